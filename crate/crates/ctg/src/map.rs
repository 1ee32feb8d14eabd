//! Map-side geometry: 2D poses, axis-aligned stop boxes, boolean drivable
//! grids, and signed distance fields with bilinear sampling.
//!
//! The distance field is the workhorse behind the off-road predicate: it is
//! positive inside the drivable area, negative outside, zero on the boundary,
//! and piecewise-smooth so STL guidance can differentiate through it.

use serde::{Deserialize, Serialize};

/// Rigid 2D transform mapping local coordinates into world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2 {
    pub fn identity() -> Self {
        Self { x: 0.0, y: 0.0, theta: 0.0 }
    }

    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta }
    }

    pub fn to_world(&self, p: (f64, f64)) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        (self.x + p.0 * c - p.1 * s, self.y + p.0 * s + p.1 * c)
    }

    pub fn to_local(&self, p: (f64, f64)) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let dx = p.0 - self.x;
        let dy = p.1 - self.y;
        (dx * c + dy * s, -dx * s + dy * c)
    }

    /// Rotate a world-frame cotangent back into the local frame:
    /// `d f / d p_local = R^T (d f / d p_world)` transposed appropriately.
    pub fn cograd_to_local(&self, g_world: (f64, f64)) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        (g_world.0 * c + g_world.1 * s, -g_world.0 * s + g_world.1 * c)
    }
}

/// Axis-aligned box with a signed distance that is positive inside.
///
/// The signed distance is `min(hx - |px - cx|, hy - |py - cy|)`, which has
/// the box boundary as its zero-level set and is differentiable away from
/// the diagonals and centerlines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopBox {
    pub cx: f64,
    pub cy: f64,
    pub half_x: f64,
    pub half_y: f64,
}

impl StopBox {
    pub fn new(cx: f64, cy: f64, half_x: f64, half_y: f64) -> Self {
        Self { cx, cy, half_x, half_y }
    }

    pub fn signed_distance(&self, p: (f64, f64)) -> f64 {
        let dx = self.half_x - (p.0 - self.cx).abs();
        let dy = self.half_y - (p.1 - self.cy).abs();
        dx.min(dy)
    }

    /// Subgradient of the signed distance; ties route to the x term first,
    /// and `|.|` at zero takes subgradient 0.
    pub fn signed_distance_grad(&self, p: (f64, f64)) -> (f64, f64) {
        let ox = p.0 - self.cx;
        let oy = p.1 - self.cy;
        let dx = self.half_x - ox.abs();
        let dy = self.half_y - oy.abs();
        if dx <= dy {
            (-sign0(ox), 0.0)
        } else {
            (0.0, -sign0(oy))
        }
    }

    pub fn contains(&self, p: (f64, f64)) -> bool {
        self.signed_distance(p) > 0.0
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Boolean occupancy grid; cell centers sit at `origin + (i + 0.5) * cell`.
#[derive(Debug, Clone, PartialEq)]
pub struct DrivableGrid {
    pub origin: (f64, f64),
    pub cell: f64,
    pub width: usize,
    pub height: usize,
    pub cells: Vec<bool>,
}

impl DrivableGrid {
    pub fn filled(origin: (f64, f64), cell: f64, width: usize, height: usize, value: bool) -> Self {
        Self { origin, cell, width, height, cells: vec![value; width * height] }
    }

    #[inline]
    pub fn idx(&self, ix: usize, iy: usize) -> usize {
        iy * self.width + ix
    }

    pub fn get(&self, ix: usize, iy: usize) -> bool {
        self.cells[self.idx(ix, iy)]
    }

    pub fn set(&mut self, ix: usize, iy: usize, value: bool) {
        let i = self.idx(ix, iy);
        self.cells[i] = value;
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            self.origin.0 + (ix as f64 + 0.5) * self.cell,
            self.origin.1 + (iy as f64 + 0.5) * self.cell,
        )
    }

    /// Nearest-cell lookup; points outside the grid are non-drivable.
    pub fn drivable_at(&self, p: (f64, f64)) -> bool {
        let fx = (p.0 - self.origin.0) / self.cell;
        let fy = (p.1 - self.origin.1) / self.cell;
        if fx < 0.0 || fy < 0.0 {
            return false;
        }
        let ix = fx as usize;
        let iy = fy as usize;
        if ix >= self.width || iy >= self.height {
            return false;
        }
        self.get(ix, iy)
    }

    /// Signed Euclidean distance field: positive inside the drivable set,
    /// negative outside, in the grid's length units.
    pub fn signed_distance_field(&self) -> SignedDistanceField {
        let inf = 1e18f64;
        let n = self.width * self.height;
        // Squared distance to the nearest non-drivable cell (for points on
        // the road) and to the nearest drivable cell (for points off it).
        let mut to_off = vec![inf; n];
        let mut to_on = vec![inf; n];
        for i in 0..n {
            if self.cells[i] {
                to_on[i] = 0.0;
            } else {
                to_off[i] = 0.0;
            }
        }
        edt_2d(&mut to_off, self.width, self.height);
        edt_2d(&mut to_on, self.width, self.height);
        let values = (0..n)
            .map(|i| (to_off[i].sqrt() - to_on[i].sqrt()) * self.cell)
            .collect();
        SignedDistanceField {
            origin: self.origin,
            cell: self.cell,
            width: self.width,
            height: self.height,
            values,
        }
    }
}

/// Scalar field over a grid with bilinear interpolation and gradients.
#[derive(Debug, Clone)]
pub struct SignedDistanceField {
    pub origin: (f64, f64),
    pub cell: f64,
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl SignedDistanceField {
    fn value_at_cell(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.width + ix]
    }

    /// Bilinear sample between cell centers. Queries outside the covered
    /// area are clamped to the border and penalized by the Euclidean
    /// overshoot, so the field keeps pointing back toward the grid.
    pub fn sample(&self, p: (f64, f64)) -> f64 {
        self.sample_with_grad(p).0
    }

    pub fn sample_with_grad(&self, p: (f64, f64)) -> (f64, (f64, f64)) {
        // Continuous coordinates in units of cells, with cell centers at
        // half-integer offsets.
        let fx = (p.0 - self.origin.0) / self.cell - 0.5;
        let fy = (p.1 - self.origin.1) / self.cell - 0.5;
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        let cx = fx.clamp(0.0, max_x);
        let cy = fy.clamp(0.0, max_y);

        let x0 = (cx.floor() as usize).min(self.width - 1);
        let y0 = (cy.floor() as usize).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = cx - x0 as f64;
        let ty = cy - y0 as f64;

        let v00 = self.value_at_cell(x0, y0);
        let v10 = self.value_at_cell(x1, y0);
        let v01 = self.value_at_cell(x0, y1);
        let v11 = self.value_at_cell(x1, y1);
        let v0 = v00 + (v10 - v00) * tx;
        let v1 = v01 + (v11 - v01) * tx;
        let mut value = v0 + (v1 - v0) * ty;

        let clamped_x = cx != fx;
        let clamped_y = cy != fy;
        let mut gx = if clamped_x {
            0.0
        } else {
            ((v10 - v00) * (1.0 - ty) + (v11 - v01) * ty) / self.cell
        };
        let mut gy = if clamped_y {
            0.0
        } else {
            ((v01 - v00) * (1.0 - tx) + (v11 - v10) * tx) / self.cell
        };

        if clamped_x || clamped_y {
            let ox = (fx - cx) * self.cell;
            let oy = (fy - cy) * self.cell;
            let over = (ox * ox + oy * oy).sqrt();
            value -= over;
            if over > 0.0 {
                gx -= ox / over;
                gy -= oy / over;
            }
        }
        (value, (gx, gy))
    }
}

/// In-place 2D squared Euclidean distance transform (row pass then column
/// pass of the 1D lower-envelope algorithm).
fn edt_2d(field: &mut [f64], width: usize, height: usize) {
    let mut row = vec![0.0f64; width.max(height)];
    for y in 0..height {
        for x in 0..width {
            row[x] = field[y * width + x];
        }
        let out = edt_1d(&row[..width]);
        for x in 0..width {
            field[y * width + x] = out[x];
        }
    }
    let mut col = vec![0.0f64; height];
    for x in 0..width {
        for y in 0..height {
            col[y] = field[y * width + x];
        }
        let out = edt_1d(&col[..height]);
        for y in 0..height {
            field[y * width + x] = out[y];
        }
    }
}

/// 1D squared distance transform of a sampled function (lower envelope of
/// parabolas).
fn edt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut d = vec![0.0f64; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] {
                if k == 0 {
                    break;
                }
                k -= 1;
            } else {
                break;
            }
        }
        if s > z[k] {
            k += 1;
        }
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let diff = q as f64 - v[k] as f64;
        d[q] = diff * diff + f[v[k]];
    }
    d
}
