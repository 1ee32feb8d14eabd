//! The conditional denoiser: a small convolutional context encoder feeding
//! a temporal 1-D convolution U-Net over the `[actions; states]` input.
//!
//! Conditioning follows the concat-then-add pattern: the sinusoidal
//! embedding of the diffusion step is concatenated with the context
//! feature, passed through a two-layer perceptron, and the result is added
//! to every block's activations.

use super::context::SceneContext;
use crate::autodiff::{Tape, TapeError, Var};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Architecture hyperparameters; stored in checkpoints so loading can
/// reject mismatched weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    /// Future steps the model predicts (T).
    pub horizon: usize,
    /// Past steps in the context (H).
    pub history: usize,
    /// Neighbor slots in the context (M).
    pub neighbors: usize,
    /// Side length of the square agent-frame raster.
    pub raster_size: usize,
    /// Channel width of the outer U-Net level; the inner level is twice
    /// this.
    pub base_width: usize,
    /// Context feature width (split evenly between raster and history
    /// embeddings).
    pub context_width: usize,
    /// Sinusoidal diffusion-step embedding width.
    pub k_embed_width: usize,
    /// Temporal convolution kernel size (odd).
    pub kernel: usize,
    /// Diffusion steps (K).
    pub diffusion_steps: usize,
    /// Simulation timestep in seconds.
    pub dt: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            horizon: 50,
            history: 10,
            neighbors: 4,
            raster_size: 32,
            base_width: 32,
            context_width: 64,
            k_embed_width: 32,
            kernel: 5,
            diffusion_steps: 100,
            dt: 0.1,
        }
    }
}

impl ArchConfig {
    /// A deliberately small variant for tests and fast smoke runs.
    pub fn tiny() -> Self {
        Self {
            horizon: 10,
            history: 2,
            neighbors: 1,
            raster_size: 16,
            base_width: 8,
            context_width: 16,
            k_embed_width: 8,
            kernel: 3,
            diffusion_steps: 20,
            dt: 0.1,
        }
    }

    pub fn raster_widths(&self) -> [usize; 3] {
        [(self.base_width / 4).max(2), (self.base_width / 2).max(2), self.base_width]
    }

    pub fn past_input_dim(&self) -> usize {
        (self.neighbors + 1) * (self.history + 1) * 4 + (self.neighbors + 1)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.kernel % 2 == 0 {
            return Err("kernel must be odd".into());
        }
        if self.raster_size % 8 != 0 {
            return Err("raster_size must be a multiple of 8".into());
        }
        if self.context_width % 2 != 0 || self.k_embed_width % 2 != 0 {
            return Err("context_width and k_embed_width must be even".into());
        }
        if self.horizon < 4 {
            return Err("horizon must be at least 4".into());
        }
        Ok(())
    }
}

/// Named weight arrays in a stable insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    map: HashMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        if !self.map.contains_key(name) {
            self.names.push(name.to_string());
        }
        self.map.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn try_get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.map.get(name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.names.iter().map(|n| (n.as_str(), &self.map[n]))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Snap every value onto the f32 grid, making subsequent container
    /// round-trips lossless.
    pub fn quantize_f32(&mut self) {
        for name in &self.names {
            self.map
                .get_mut(name)
                .unwrap()
                .mapv_inplace(|v| v as f32 as f64);
        }
    }
}

/// Expected parameter names and shapes for an architecture.
pub fn param_shapes(cfg: &ArchConfig) -> Vec<(String, Vec<usize>)> {
    let base = cfg.base_width;
    let c2 = 2 * base;
    let k = cfg.kernel;
    let ctx = cfg.context_width;
    let half = ctx / 2;
    let [rw1, rw2, rw3] = cfg.raster_widths();
    let rflat = rw3 * (cfg.raster_size / 8) * (cfg.raster_size / 8);
    let pin = cfg.past_input_dim();

    let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
    let mut add = |name: &str, shape: &[usize]| shapes.push((name.into(), shape.to_vec()));

    // Context encoder.
    add("enc.r1.w", &[rw1, 3, 3, 3]);
    add("enc.r1.b", &[rw1]);
    add("enc.r2.w", &[rw2, rw1, 3, 3]);
    add("enc.r2.b", &[rw2]);
    add("enc.r3.w", &[rw3, rw2, 3, 3]);
    add("enc.r3.b", &[rw3]);
    add("enc.rfc.w", &[rflat, half]);
    add("enc.rfc.b", &[half]);
    add("enc.p1.w", &[pin, ctx]);
    add("enc.p1.b", &[ctx]);
    add("enc.p2.w", &[ctx, half]);
    add("enc.p2.b", &[half]);

    // Conditioning head (k embedding concat context feature).
    add("cond.fc1.w", &[cfg.k_embed_width + ctx, ctx]);
    add("cond.fc1.b", &[ctx]);
    add("cond.fc2.w", &[ctx, ctx]);
    add("cond.fc2.b", &[ctx]);

    // Temporal U-Net.
    add("unet.in.w", &[base, 6, k]);
    add("unet.in.b", &[base]);
    let block = |shapes: &mut Vec<(String, Vec<usize>)>, prefix: &str, width: usize| {
        shapes.push((format!("{prefix}.c1.w"), vec![width, width, k]));
        shapes.push((format!("{prefix}.c1.b"), vec![width]));
        shapes.push((format!("{prefix}.cond.w"), vec![ctx, width]));
        shapes.push((format!("{prefix}.cond.b"), vec![width]));
        shapes.push((format!("{prefix}.c2.w"), vec![width, width, k]));
        shapes.push((format!("{prefix}.c2.b"), vec![width]));
    };
    block(&mut shapes, "unet.e0", base);
    add("unet.down1.w", &[c2, base, k]);
    add("unet.down1.b", &[c2]);
    block(&mut shapes, "unet.e1", c2);
    add("unet.down2.w", &[c2, c2, k]);
    add("unet.down2.b", &[c2]);
    block(&mut shapes, "unet.mid", c2);
    add("unet.up1.fuse.w", &[c2, 2 * c2, k]);
    add("unet.up1.fuse.b", &[c2]);
    block(&mut shapes, "unet.u1", c2);
    add("unet.up2.fuse.w", &[base, c2 + base, k]);
    add("unet.up2.fuse.b", &[base]);
    block(&mut shapes, "unet.u2", base);
    add("unet.out.w", &[2, base, k]);
    add("unet.out.b", &[2]);
    shapes
}

/// Random initialization: uniform with fan-in scaling, biases zero.
pub fn init_params(cfg: &ArchConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::default();
    for (name, shape) in param_shapes(cfg) {
        let value = if name.ends_with(".b") {
            ArrayD::zeros(IxDyn(&shape))
        } else {
            let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
            let bound = (1.0 / fan_in as f64).sqrt();
            ArrayD::from_shape_fn(IxDyn(&shape), |_| rng.gen_range(-bound..bound))
        };
        store.insert(&name, value);
    }
    store
}

/// Tape handles for every staged parameter.
pub struct NetVars {
    vars: HashMap<String, Var>,
}

impl NetVars {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not staged"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Copy parameters onto a tape; `trainable` decides whether gradients flow
/// into them.
pub fn stage_params(tape: &mut Tape, store: &ParamStore, trainable: bool) -> NetVars {
    let mut vars = HashMap::new();
    for (name, value) in store.iter() {
        let v = if trainable {
            tape.param(value.clone())
        } else {
            tape.constant(value.clone())
        };
        vars.insert(name.to_string(), v);
    }
    NetVars { vars }
}

/// Sinusoidal embedding of diffusion steps, `[B, k_embed_width]`.
pub fn k_embedding(cfg: &ArchConfig, ks: &[usize]) -> ArrayD<f64> {
    let d = cfg.k_embed_width;
    let mut out = ArrayD::zeros(IxDyn(&[ks.len(), d]));
    for (b, &k) in ks.iter().enumerate() {
        for i in 0..d / 2 {
            let freq = (-(2.0 * i as f64 / d as f64) * 10000f64.ln()).exp();
            out[[b, 2 * i]] = (k as f64 * freq).sin();
            out[[b, 2 * i + 1]] = (k as f64 * freq).cos();
        }
    }
    out
}

/// Assemble the `[B, 3, R, R]` raster batch and `[B, pin]` history batch
/// from contexts (neighbor slots are masked to zero before flattening).
fn context_inputs(cfg: &ArchConfig, contexts: &[&SceneContext]) -> (ArrayD<f64>, ArrayD<f64>) {
    let b = contexts.len();
    let r = cfg.raster_size;
    let slots = cfg.neighbors + 1;
    let hsteps = cfg.history + 1;
    let pin = cfg.past_input_dim();
    let mut raster = ArrayD::zeros(IxDyn(&[b, 3, r, r]));
    let mut past = ArrayD::zeros(IxDyn(&[b, pin]));
    for (bi, ctx) in contexts.iter().enumerate() {
        assert_eq!(ctx.raster.shape(), &[3, r, r], "raster shape mismatch");
        assert_eq!(ctx.past.shape(), &[slots, hsteps, 4], "past shape mismatch");
        for c in 0..3 {
            for y in 0..r {
                for x in 0..r {
                    raster[[bi, c, y, x]] = ctx.raster[[c, y, x]];
                }
            }
        }
        let mut at = 0;
        for s in 0..slots {
            let m = ctx.mask[s];
            for t in 0..hsteps {
                for c in 0..4 {
                    past[[bi, at]] = ctx.past[[s, t, c]] * m;
                    at += 1;
                }
            }
        }
        for s in 0..slots {
            past[[bi, at]] = ctx.mask[s];
            at += 1;
        }
    }
    (raster, past)
}

/// Context encoder: raster conv stack concatenated with a history MLP.
/// Returns a `[B, context_width]` feature.
pub fn encode_context(
    tape: &mut Tape,
    vars: &NetVars,
    cfg: &ArchConfig,
    contexts: &[&SceneContext],
) -> Result<Var, TapeError> {
    let (raster, past) = context_inputs(cfg, contexts);
    let raster = tape.constant(raster);
    let past = tape.constant(past);

    let mut h = raster;
    for (i, layer) in ["enc.r1", "enc.r2", "enc.r3"].iter().enumerate() {
        h = tape.conv2d(h, vars.get(&format!("{layer}.w")), 2, 1);
        h = tape.add_bias(h, vars.get(&format!("{layer}.b")));
        h = tape.silu(h);
        tape.check_finite(h, &format!("encoder.raster.conv{}", i + 1))?;
    }
    let flat = tape.flatten_batch(h);
    let mut rfeat = tape.matmul(flat, vars.get("enc.rfc.w"));
    rfeat = tape.add_bias(rfeat, vars.get("enc.rfc.b"));
    rfeat = tape.silu(rfeat);
    tape.check_finite(rfeat, "encoder.raster.fc")?;

    let mut pfeat = tape.matmul(past, vars.get("enc.p1.w"));
    pfeat = tape.add_bias(pfeat, vars.get("enc.p1.b"));
    pfeat = tape.silu(pfeat);
    pfeat = tape.matmul(pfeat, vars.get("enc.p2.w"));
    pfeat = tape.add_bias(pfeat, vars.get("enc.p2.b"));
    pfeat = tape.silu(pfeat);
    tape.check_finite(pfeat, "encoder.history.mlp")?;

    Ok(tape.concat_channels(rfeat, pfeat))
}

/// Two-layer head combining the step embedding with the context feature.
pub fn cond_features(
    tape: &mut Tape,
    vars: &NetVars,
    k_emb: Var,
    ctx_feat: Var,
) -> Result<Var, TapeError> {
    let joint = tape.concat_channels(k_emb, ctx_feat);
    let mut h = tape.matmul(joint, vars.get("cond.fc1.w"));
    h = tape.add_bias(h, vars.get("cond.fc1.b"));
    h = tape.silu(h);
    h = tape.matmul(h, vars.get("cond.fc2.w"));
    h = tape.add_bias(h, vars.get("cond.fc2.b"));
    tape.check_finite(h, "cond.mlp")?;
    Ok(h)
}

fn res_block(
    tape: &mut Tape,
    vars: &NetVars,
    prefix: &str,
    x: Var,
    cond: Var,
    pad: usize,
) -> Result<Var, TapeError> {
    let mut h = tape.conv1d(x, vars.get(&format!("{prefix}.c1.w")), 1, pad);
    h = tape.add_bias(h, vars.get(&format!("{prefix}.c1.b")));
    let mut proj = tape.matmul(cond, vars.get(&format!("{prefix}.cond.w")));
    proj = tape.add_bias(proj, vars.get(&format!("{prefix}.cond.b")));
    h = tape.add_channel_bias(h, proj);
    h = tape.silu(h);
    h = tape.conv1d(h, vars.get(&format!("{prefix}.c2.w")), 1, pad);
    h = tape.add_bias(h, vars.get(&format!("{prefix}.c2.b")));
    let out = tape.add(x, h);
    tape.check_finite(out, prefix)?;
    Ok(out)
}

/// U-Net forward: `[B, 6, T]` noisy input to `[B, 2, T]` predicted clean
/// normalized actions.
pub fn denoise(
    tape: &mut Tape,
    vars: &NetVars,
    cfg: &ArchConfig,
    input: Var,
    cond: Var,
) -> Result<Var, TapeError> {
    let t_len = tape.shape(input)[2];
    let pad = cfg.kernel / 2;

    let mut x = tape.conv1d(input, vars.get("unet.in.w"), 1, pad);
    x = tape.add_bias(x, vars.get("unet.in.b"));
    tape.check_finite(x, "unet.in")?;

    let e0 = res_block(tape, vars, "unet.e0", x, cond, pad)?;
    let mut d1 = tape.conv1d(e0, vars.get("unet.down1.w"), 2, pad);
    d1 = tape.add_bias(d1, vars.get("unet.down1.b"));
    let e1 = res_block(tape, vars, "unet.e1", d1, cond, pad)?;
    let mut d2 = tape.conv1d(e1, vars.get("unet.down2.w"), 2, pad);
    d2 = tape.add_bias(d2, vars.get("unet.down2.b"));
    let mid = res_block(tape, vars, "unet.mid", d2, cond, pad)?;

    let l1 = tape.shape(e1)[2];
    let mut u = tape.upsample_nearest(mid);
    u = tape.crop_last(u, l1);
    u = tape.concat_channels(u, e1);
    u = tape.conv1d(u, vars.get("unet.up1.fuse.w"), 1, pad);
    u = tape.add_bias(u, vars.get("unet.up1.fuse.b"));
    let u1 = res_block(tape, vars, "unet.u1", u, cond, pad)?;

    let mut u = tape.upsample_nearest(u1);
    u = tape.crop_last(u, t_len);
    u = tape.concat_channels(u, e0);
    u = tape.conv1d(u, vars.get("unet.up2.fuse.w"), 1, pad);
    u = tape.add_bias(u, vars.get("unet.up2.fuse.b"));
    let u2 = res_block(tape, vars, "unet.u2", u, cond, pad)?;

    let mut out = tape.conv1d(u2, vars.get("unet.out.w"), 1, pad);
    out = tape.add_bias(out, vars.get("unet.out.b"));
    tape.check_finite(out, "unet.out")?;
    Ok(out)
}
