//! CPU convolution kernels registered as candle custom ops.
//!
//! candle's stock CPU convolution (and especially its backward pass) is far
//! too slow for single-core training, so 2D convolution is implemented here
//! with three paths: im2col + gemm, a direct pointwise gemm for 1×1 kernels,
//! and a direct loop for grouped convolutions with one output channel per
//! group (depthwise). Every path supports `f32` and `f64`.

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor};

type CResult<T> = candle_core::Result<T>;

pub(crate) trait Elem:
    Copy
    + Default
    + std::ops::Add<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const ONE: Self;
    const ZERO: Self;

    /// `c = a·b + beta·c` for row-major `a` (m×k), `b` (k×n), `c` (m×n) with
    /// arbitrary element strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! impl_elem {
    ($t:ty, $f:path) => {
        impl Elem for $t {
            const ONE: Self = 1.0;
            const ZERO: Self = 0.0;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                (rsa, csa): (isize, isize),
                b: &[Self],
                (rsb, csb): (isize, isize),
                beta: Self,
                c: &mut [Self],
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(c.len() >= m * n);
                // SAFETY: callers pass slices covering the strided extents.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    )
                }
            }
        }
    };
}

impl_elem!(f32, matrixmultiply::sgemm);
impl_elem!(f64, matrixmultiply::dgemm);

/// Geometry of one NCHW convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        x: &[usize],
        k: &[usize],
        stride: usize,
        (pad_h, pad_w): (usize, usize),
        groups: usize,
    ) -> CResult<Self> {
        let (&[n, cin, h, w], &[cout, cig, kh, kw]) = (x, k) else {
            candle_core::bail!("conv2d expects 4-d input and kernel, got {x:?} and {k:?}")
        };
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cig != cin / groups {
            candle_core::bail!("conv2d channel mismatch: input {x:?}, kernel {k:?}, groups {groups}")
        }
        if stride == 0 || h + 2 * pad_h < kh || w + 2 * pad_w < kw {
            candle_core::bail!("conv2d kernel {kh}x{kw} larger than padded input {h}x{w}")
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad_h,
            pad_w,
            groups,
            ho: (h + 2 * pad_h - kh) / stride + 1,
            wo: (w + 2 * pad_w - kw) / stride + 1,
        })
    }

    fn cig(&self) -> usize {
        self.cin / self.groups
    }

    fn cog(&self) -> usize {
        self.cout / self.groups
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_h == 0 && self.pad_w == 0
    }

    /// Output range `[lo, hi)` whose input coordinate `o·stride + k − pad`
    /// lands inside `[0, extent)`.
    fn valid_range(&self, k: usize, pad: usize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - pad as isize;
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = (extent as isize - 1 - off).div_euclid(s) + 1;
        (lo.max(0) as usize, hi.clamp(0, out as isize) as usize)
    }

    fn in_len(&self) -> usize {
        self.n * self.cin * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.n * self.cout * self.ho * self.wo
    }

    fn kernel_len(&self) -> usize {
        self.cout * self.cig() * self.kh * self.kw
    }
}

fn im2col<T: Elem>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let p = g.ho * g.wo;
    let mut row = 0;
    for ci in 0..g.cig() {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy0, oy1) = g.valid_range(ky, g.pad_h, g.h, g.ho);
            for kx in 0..g.kw {
                let (ox0, ox1) = g.valid_range(kx, g.pad_w, g.w, g.wo);
                let dst = &mut cols[row * p..(row + 1) * p];
                dst.fill(T::ZERO);
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad_h;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let d = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    for ox in ox0..ox1 {
                        d[ox] = src[ox * g.stride + kx - g.pad_w];
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<T: Elem>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let p = g.ho * g.wo;
    let mut row = 0;
    for ci in 0..g.cig() {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy0, oy1) = g.valid_range(ky, g.pad_h, g.h, g.ho);
            for kx in 0..g.kw {
                let (ox0, ox1) = g.valid_range(kx, g.pad_w, g.w, g.wo);
                let src = &cols[row * p..(row + 1) * p];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad_h;
                    let d = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let s = &src[oy * g.wo..(oy + 1) * g.wo];
                    for ox in ox0..ox1 {
                        d[ox * g.stride + kx - g.pad_w] += s[ox];
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn conv_forward<T: Elem>(g: &ConvGeom, x: &[T], k: &[T]) -> Vec<T> {
    let (cig, cog) = (g.cig(), g.cog());
    let (hw, p) = (g.h * g.w, g.ho * g.wo);
    let kk = cig * g.kh * g.kw;
    let mut out = vec![T::ZERO; g.out_len()];
    let mut cols = if !g.is_pointwise() && cog > 1 {
        vec![T::ZERO; kk * p]
    } else {
        Vec::new()
    };
    for b in 0..g.n {
        for grp in 0..g.groups {
            let xg = &x[(b * g.cin + grp * cig) * hw..(b * g.cin + (grp + 1) * cig) * hw];
            let kg = &k[grp * cog * kk..(grp + 1) * cog * kk];
            let og = &mut out[(b * g.cout + grp * cog) * p..(b * g.cout + (grp + 1) * cog) * p];
            if cog == 1 {
                direct_forward(g, xg, kg, og);
            } else if g.is_pointwise() {
                T::gemm(cog, cig, p, kg, (cig as isize, 1), xg, (p as isize, 1), T::ZERO, og);
            } else {
                im2col(g, xg, &mut cols);
                T::gemm(cog, kk, p, kg, (kk as isize, 1), &cols, (p as isize, 1), T::ZERO, og);
            }
        }
    }
    out
}

/// One output channel: `out = Σ_ci Σ_ky,kx k[ci,ky,kx] · x[ci, shifted]`.
fn direct_forward<T: Elem>(g: &ConvGeom, x: &[T], k: &[T], out: &mut [T]) {
    let hw = g.h * g.w;
    for ci in 0..g.cig() {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..g.kh {
            let (oy0, oy1) = g.valid_range(ky, g.pad_h, g.h, g.ho);
            for kx in 0..g.kw {
                let wv = k[(ci * g.kh + ky) * g.kw + kx];
                let (ox0, ox1) = g.valid_range(kx, g.pad_w, g.w, g.wo);
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad_h;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let dst = &mut out[oy * g.wo..(oy + 1) * g.wo];
                    if g.stride == 1 {
                        let src = &src[ox0 + kx - g.pad_w..ox1 + kx - g.pad_w];
                        for (d, &s) in dst[ox0..ox1].iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    } else {
                        for ox in ox0..ox1 {
                            dst[ox] += wv * src[ox * g.stride + kx - g.pad_w];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_grad_input<T: Elem>(g: &ConvGeom, dy: &[T], k: &[T]) -> Vec<T> {
    let (cig, cog) = (g.cig(), g.cog());
    let (hw, p) = (g.h * g.w, g.ho * g.wo);
    let kk = cig * g.kh * g.kw;
    let mut dx = vec![T::ZERO; g.in_len()];
    let mut cols = if !g.is_pointwise() && cog > 1 {
        vec![T::ZERO; kk * p]
    } else {
        Vec::new()
    };
    for b in 0..g.n {
        for grp in 0..g.groups {
            let dyg = &dy[(b * g.cout + grp * cog) * p..(b * g.cout + (grp + 1) * cog) * p];
            let kg = &k[grp * cog * kk..(grp + 1) * cog * kk];
            let dxg = &mut dx[(b * g.cin + grp * cig) * hw..(b * g.cin + (grp + 1) * cig) * hw];
            if cog == 1 {
                direct_grad_input(g, dyg, kg, dxg);
            } else if g.is_pointwise() {
                // dx (cig×p) = kᵀ (cig×cog) · dy (cog×p)
                T::gemm(cig, cog, p, kg, (1, cig as isize), dyg, (p as isize, 1), T::ZERO, dxg);
            } else {
                T::gemm(kk, cog, p, kg, (1, kk as isize), dyg, (p as isize, 1), T::ZERO, &mut cols);
                col2im(g, &cols, dxg);
            }
        }
    }
    dx
}

fn direct_grad_input<T: Elem>(g: &ConvGeom, dy: &[T], k: &[T], dx: &mut [T]) {
    let hw = g.h * g.w;
    for ci in 0..g.cig() {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..g.kh {
            let (oy0, oy1) = g.valid_range(ky, g.pad_h, g.h, g.ho);
            for kx in 0..g.kw {
                let wv = k[(ci * g.kh + ky) * g.kw + kx];
                let (ox0, ox1) = g.valid_range(kx, g.pad_w, g.w, g.wo);
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad_h;
                    let src = &dy[oy * g.wo..(oy + 1) * g.wo];
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    if g.stride == 1 {
                        let dst = &mut dst[ox0 + kx - g.pad_w..ox1 + kx - g.pad_w];
                        for (d, &s) in dst.iter_mut().zip(&src[ox0..ox1]) {
                            *d += wv * s;
                        }
                    } else {
                        for ox in ox0..ox1 {
                            dst[ox * g.stride + kx - g.pad_w] += wv * src[ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_grad_kernel<T: Elem>(g: &ConvGeom, x: &[T], dy: &[T]) -> Vec<T> {
    let (cig, cog) = (g.cig(), g.cog());
    let (hw, p) = (g.h * g.w, g.ho * g.wo);
    let kk = cig * g.kh * g.kw;
    let mut dk = vec![T::ZERO; g.kernel_len()];
    let mut cols = if !g.is_pointwise() && cog > 1 {
        vec![T::ZERO; kk * p]
    } else {
        Vec::new()
    };
    for b in 0..g.n {
        for grp in 0..g.groups {
            let xg = &x[(b * g.cin + grp * cig) * hw..(b * g.cin + (grp + 1) * cig) * hw];
            let dyg = &dy[(b * g.cout + grp * cog) * p..(b * g.cout + (grp + 1) * cog) * p];
            let dkg = &mut dk[grp * cog * kk..(grp + 1) * cog * kk];
            if cog == 1 {
                direct_grad_kernel(g, xg, dyg, dkg);
            } else if g.is_pointwise() {
                // dk (cog×cig) += dy (cog×p) · xᵀ (p×cig)
                T::gemm(cog, p, cig, dyg, (p as isize, 1), xg, (1, p as isize), T::ONE, dkg);
            } else {
                im2col(g, xg, &mut cols);
                T::gemm(cog, p, kk, dyg, (p as isize, 1), &cols, (1, p as isize), T::ONE, dkg);
            }
        }
    }
    dk
}

fn direct_grad_kernel<T: Elem>(g: &ConvGeom, x: &[T], dy: &[T], dk: &mut [T]) {
    let hw = g.h * g.w;
    for ci in 0..g.cig() {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..g.kh {
            let (oy0, oy1) = g.valid_range(ky, g.pad_h, g.h, g.ho);
            for kx in 0..g.kw {
                let (ox0, ox1) = g.valid_range(kx, g.pad_w, g.w, g.wo);
                let mut acc = T::ZERO;
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad_h;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let d = &dy[oy * g.wo..(oy + 1) * g.wo];
                    if g.stride == 1 {
                        let src = &src[ox0 + kx - g.pad_w..ox1 + kx - g.pad_w];
                        acc += dot(&d[ox0..ox1], src);
                    } else {
                        for ox in ox0..ox1 {
                            acc += d[ox] * src[ox * g.stride + kx - g.pad_w];
                        }
                    }
                }
                dk[(ci * g.kh + ky) * g.kw + kx] += acc;
            }
        }
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
fn dot<T: Elem>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::ZERO; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    let mut acc = T::ZERO;
    for (x, y) in ra.iter().zip(rb) {
        acc += *x * *y;
    }
    lanes.iter().fold(acc, |s, &v| s + v)
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout, what: &str) -> CResult<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("{what} must be contiguous"),
    }
}

/// Dispatches a binary kernel over matching f32/f64 storages.
macro_rules! dispatch2 {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, |$a:ident, $b:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => {
                let $a = contiguous(a, $l1, "lhs")?;
                let $b = contiguous(b, $l2, "rhs")?;
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(a), CpuStorage::F64(b)) => {
                let $a = contiguous(a, $l1, "lhs")?;
                let $b = contiguous(b, $l2, "rhs")?;
                CpuStorage::F64($body)
            }
            _ => candle_core::bail!("convolution supports matching f32 or f64 operands only"),
        }
    };
}

struct Conv2d {
    stride: usize,
    padding: (usize, usize),
    groups: usize,
}

impl CustomOp2 for Conv2d {
    fn name(&self) -> &'static str {
        "itov-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let g = ConvGeom::new(l1.dims(), l2.dims(), self.stride, self.padding, self.groups)?;
        let out = dispatch2!(s1, l1, s2, l2, |x, k| conv_forward(&g, x, k));
        Ok((out, Shape::from((g.n, g.cout, g.ho, g.wo))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        k: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        let g = ConvGeom::new(x.dims(), k.dims(), self.stride, self.padding, self.groups)?;
        let grad = grad.contiguous()?;
        let dx = grad.apply_op2_no_bwd(k, &ConvGradInput(g))?;
        let dk = x.apply_op2_no_bwd(&grad, &ConvGradKernel(g))?;
        Ok((Some(dx), Some(dk)))
    }
}

struct ConvGradInput(ConvGeom);

impl CustomOp2 for ConvGradInput {
    fn name(&self) -> &'static str {
        "itov-conv2d-grad-input"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let g = &self.0;
        let out = dispatch2!(s1, l1, s2, l2, |dy, k| conv_grad_input(g, dy, k));
        Ok((out, Shape::from((g.n, g.cin, g.h, g.w))))
    }
}

struct ConvGradKernel(ConvGeom);

impl CustomOp2 for ConvGradKernel {
    fn name(&self) -> &'static str {
        "itov-conv2d-grad-kernel"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let g = &self.0;
        let out = dispatch2!(s1, l1, s2, l2, |x, dy| conv_grad_kernel(g, x, dy));
        Ok((out, Shape::from((g.cout, g.cig(), g.kh, g.kw))))
    }
}

/// Differentiable NCHW convolution. `kernel` has shape
/// `(out_channels, in_channels / groups, kh, kw)`.
pub fn conv2d(
    x: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: (usize, usize),
    groups: usize,
) -> CResult<Tensor> {
    ConvGeom::new(x.dims(), kernel.dims(), stride, padding, groups)?;
    x.contiguous()?.apply_op2(
        &kernel.contiguous()?,
        Conv2d {
            stride,
            padding,
            groups,
        },
    )
}
