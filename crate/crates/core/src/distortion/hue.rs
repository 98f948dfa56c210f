//! Hue rotation in HSV space as a differentiable custom op.
//!
//! The per-pixel map RGB → HSV → (H + δ) → RGB is piecewise smooth; the
//! backward pass evaluates its 3×3 Jacobian with forward-mode dual numbers.
//! Gray pixels have no hue and are passed through untouched.

use std::ops::{Add, Mul, Sub};

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor};

type CResult<T> = candle_core::Result<T>;

/// Value plus partial derivatives with respect to (r, g, b).
#[derive(Debug, Clone, Copy)]
struct Dual {
    v: f64,
    d: [f64; 3],
}

impl Dual {
    fn constant(v: f64) -> Self {
        Self { v, d: [0.0; 3] }
    }

    fn seed(v: f64, i: usize) -> Self {
        let mut d = [0.0; 3];
        d[i] = 1.0;
        Self { v, d }
    }

    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.v;
        Self {
            v: self.v * inv,
            d: std::array::from_fn(|i| (self.d[i] * o.v - self.v * o.d[i]) * inv * inv),
        }
    }
}

impl Add for Dual {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            v: self.v + o.v,
            d: std::array::from_fn(|i| self.d[i] + o.d[i]),
        }
    }
}

impl Sub for Dual {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self {
            v: self.v - o.v,
            d: std::array::from_fn(|i| self.d[i] - o.d[i]),
        }
    }
}

impl Mul for Dual {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self {
            v: self.v * o.v,
            d: std::array::from_fn(|i| self.d[i] * o.v + self.v * o.d[i]),
        }
    }
}

fn pick_max(a: Dual, b: Dual) -> Dual {
    if b.v > a.v {
        b
    } else {
        a
    }
}

fn pick_min(a: Dual, b: Dual) -> Dual {
    if b.v < a.v {
        b
    } else {
        a
    }
}

/// Rotates the hue of one pixel by `offset` turns.
fn rotate([r, g, b]: [Dual; 3], offset: f64) -> [Dual; 3] {
    let max = pick_max(pick_max(r, g), b);
    let min = pick_min(pick_min(r, g), b);
    let delta = max - min;
    if delta.v <= 0.0 {
        return [r, g, b];
    }
    // Hue in sextants, [0, 6).
    let sextant = if max.v == r.v {
        let h = (g - b).div(delta);
        if h.v < 0.0 {
            h + Dual::constant(6.0)
        } else {
            h
        }
    } else if max.v == g.v {
        (b - r).div(delta) + Dual::constant(2.0)
    } else {
        (r - g).div(delta) + Dual::constant(4.0)
    };
    let s = delta.div(max);
    let v = max;
    let mut h = sextant + Dual::constant(6.0 * offset);
    let wrap = (h.v / 6.0).floor() * 6.0;
    h.v -= wrap;
    if h.v >= 6.0 {
        h.v = 0.0;
    }
    let i = h.v.floor();
    let f = h - Dual::constant(i);
    let one = Dual::constant(1.0);
    let p = v * (one - s);
    let q = v * (one - s * f);
    let t = v * (one - s * (one - f));
    match i as u8 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Visits every pixel of a `(…, 3, H, W)` buffer, handing over the clip index
/// and the three channel offsets.
fn for_each_pixel(len: usize, dims: &[usize], clips: usize, mut f: impl FnMut(usize, [usize; 3])) {
    let n = dims.len();
    let plane = dims[n - 2] * dims[n - 1];
    let per_clip = len / clips;
    for frame in 0..len / (3 * plane) {
        let base = frame * 3 * plane;
        let clip = base / per_clip;
        for i in 0..plane {
            f(clip, [base + i, base + plane + i, base + 2 * plane + i]);
        }
    }
}

fn check_layout(layout: &Layout, clips: usize) -> CResult<(usize, usize)> {
    let dims = layout.dims();
    if dims.len() < 3 || dims[dims.len() - 3] != 3 {
        candle_core::bail!("hue rotation expects (…, 3, H, W), got {dims:?}");
    }
    if dims[0] != clips && !(dims.len() == 4 && clips == 1) {
        candle_core::bail!("{clips} hue offsets for leading dimension {}", dims[0]);
    }
    match layout.contiguous_offsets() {
        Some(r) => Ok(r),
        None => candle_core::bail!("hue rotation needs a contiguous tensor"),
    }
}

/// One offset per clip; a 4-D input is a single clip.
pub(super) struct HueShift {
    pub offsets: Vec<f64>,
}

macro_rules! hue_forward {
    ($data:expr, $dims:expr, $offsets:expr) => {{
        let src = $data;
        let mut out = src.to_vec();
        for_each_pixel(src.len(), $dims, $offsets.len(), |clip, idx| {
            let px = idx.map(|k| Dual::constant(src[k] as f64));
            let rot = rotate(px, $offsets[clip]);
            for c in 0..3 {
                out[idx[c]] = rot[c].v as _;
            }
        });
        out
    }};
}

impl CustomOp1 for HueShift {
    fn name(&self) -> &'static str {
        "itov-hue-shift"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (a, b) = check_layout(l, self.offsets.len())?;
        let out = match s {
            CpuStorage::F32(d) => CpuStorage::F32(hue_forward!(&d[a..b], l.dims(), self.offsets)),
            CpuStorage::F64(d) => CpuStorage::F64(hue_forward!(&d[a..b], l.dims(), self.offsets)),
            _ => candle_core::bail!("hue rotation supports f32 or f64"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        let grad = grad.contiguous()?;
        let dx = x.apply_op2_no_bwd(
            &grad,
            &HueGrad {
                offsets: self.offsets.clone(),
            },
        )?;
        Ok(Some(dx))
    }
}

struct HueGrad {
    offsets: Vec<f64>,
}

macro_rules! hue_backward {
    ($x:expr, $g:expr, $dims:expr, $offsets:expr) => {{
        let (x, g) = ($x, $g);
        let mut out = vec![Default::default(); x.len()];
        for_each_pixel(x.len(), $dims, $offsets.len(), |clip, idx| {
            let px: [Dual; 3] = std::array::from_fn(|c| Dual::seed(x[idx[c]] as f64, c));
            let rot = rotate(px, $offsets[clip]);
            for j in 0..3 {
                let s: f64 = (0..3).map(|c| g[idx[c]] as f64 * rot[c].d[j]).sum();
                out[idx[j]] = s as _;
            }
        });
        out
    }};
}

impl CustomOp2 for HueGrad {
    fn name(&self) -> &'static str {
        "itov-hue-shift-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let (a, b) = check_layout(l1, self.offsets.len())?;
        let (c, d) = check_layout(l2, self.offsets.len())?;
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => {
                CpuStorage::F32(hue_backward!(&x[a..b], &g[c..d], l1.dims(), self.offsets))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g)) => {
                CpuStorage::F64(hue_backward!(&x[a..b], &g[c..d], l1.dims(), self.offsets))
            }
            _ => candle_core::bail!("hue gradient supports matching f32 or f64"),
        };
        Ok((out, l1.shape().clone()))
    }
}
