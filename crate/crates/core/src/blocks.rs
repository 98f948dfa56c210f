//! Convolutional block variants and their analytical cost.
//!
//! 2D kinds take `(N, C, H, W)` tensors: with clips folded, frames are
//! channels. Temporal kinds take `(N, L, C, H, W)`. Every block is
//! convolution(s) → parameter-free layer normalization → ReLU, so the
//! trainable parameters are exactly the convolution weights and biases.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::conv2d;
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Regular2d,
    Regular3d,
    TwoPlusOneD,
    Depthwise2d,
    Depthwise3d,
}

impl BlockKind {
    pub const ALL: [BlockKind; 5] = [
        BlockKind::Regular2d,
        BlockKind::Regular3d,
        BlockKind::TwoPlusOneD,
        BlockKind::Depthwise2d,
        BlockKind::Depthwise3d,
    ];

    /// Whether the block keeps an explicit frame axis.
    pub fn is_temporal(self) -> bool {
        matches!(self, Self::Regular3d | Self::TwoPlusOneD | Self::Depthwise3d)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Regular2d => "regular2d",
            Self::Regular3d => "regular3d",
            Self::TwoPlusOneD => "two_plus_one_d",
            Self::Depthwise2d => "depthwise2d",
            Self::Depthwise3d => "depthwise3d",
        }
    }
}

impl std::fmt::Display for BlockKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidParam(format!("unknown block kind {s:?}")))
    }
}

fn default_kernel() -> usize {
    3
}

fn default_stride() -> usize {
    1
}

fn default_bias() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    #[serde(default = "default_kernel")]
    pub spatial_kernel: usize,
    /// Ignored by 2D kinds.
    #[serde(default = "default_kernel")]
    pub temporal_kernel: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_bias")]
    pub includes_bias: bool,
}

impl ConvBlockSpec {
    pub fn new(kind: BlockKind, in_channels: usize, out_channels: usize) -> Self {
        Self {
            kind,
            in_channels,
            out_channels,
            spatial_kernel: 3,
            temporal_kernel: 3,
            stride: 1,
            includes_bias: true,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_bias(mut self, includes_bias: bool) -> Self {
        self.includes_bias = includes_bias;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let odd = |k: usize| k >= 1 && k % 2 == 1;
        if !odd(self.spatial_kernel) || (self.kind.is_temporal() && !odd(self.temporal_kernel)) {
            return Err(Error::InvalidParam(format!(
                "kernels must be odd and positive, got {}x{} (temporal {})",
                self.spatial_kernel, self.spatial_kernel, self.temporal_kernel
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.stride == 0 {
            return Err(Error::InvalidParam("channels and stride must be positive".into()));
        }
        Ok(())
    }

    /// Hidden width of the (2+1)D factorization, chosen so its parameter
    /// count matches the full 3D kernel:
    /// `⌊k_t·k²·C_in·C_out / (k²·C_in + k_t·C_out)⌋`, at least 1.
    pub fn mid_channels(&self) -> usize {
        let (k2, kt) = (self.spatial_kernel.pow(2), self.temporal_kernel);
        let num = kt * k2 * self.in_channels * self.out_channels;
        let den = k2 * self.in_channels + kt * self.out_channels;
        (num / den).max(1)
    }

    fn spatial_out(&self, extent: usize) -> usize {
        let k = self.spatial_kernel;
        (extent + 2 * (k / 2) - k) / self.stride + 1
    }

    /// Output shape for an unbatched input (`C×H×W` or `L×C×H×W`).
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        match (self.kind.is_temporal(), input) {
            (false, &[c, h, w]) if c == self.in_channels => {
                Ok(vec![self.out_channels, self.spatial_out(h), self.spatial_out(w)])
            }
            (true, &[l, c, h, w]) if c == self.in_channels => {
                Ok(vec![l, self.out_channels, self.spatial_out(h), self.spatial_out(w)])
            }
            _ => Err(Error::Shape(format!(
                "{} block with {} input channels cannot take input {input:?}",
                self.kind, self.in_channels
            ))),
        }
    }
}

/// Closed-form trainable parameter count.
pub fn count_params(spec: &ConvBlockSpec) -> u64 {
    let (cin, cout) = (spec.in_channels as u64, spec.out_channels as u64);
    let k2 = (spec.spatial_kernel * spec.spatial_kernel) as u64;
    let kt = spec.temporal_kernel as u64;
    let bias = |c: u64| if spec.includes_bias { c } else { 0 };
    match spec.kind {
        BlockKind::Regular2d => cout * cin * k2 + bias(cout),
        BlockKind::Regular3d => cout * cin * kt * k2 + bias(cout),
        BlockKind::TwoPlusOneD => {
            let mid = spec.mid_channels() as u64;
            mid * cin * k2 + bias(mid) + cout * mid * kt + bias(cout)
        }
        BlockKind::Depthwise2d => cout * cin + bias(cout) + cout * k2 + bias(cout),
        BlockKind::Depthwise3d => cout * cin + bias(cout) + cout * kt * k2 + bias(cout),
    }
}

/// Floating-point operations for one unbatched input: 2 per
/// multiply–accumulate over every sub-convolution, counting zero-padded taps;
/// bias additions, normalization and activations are excluded.
pub fn count_flops(spec: &ConvBlockSpec, input_shape: &[usize]) -> Result<u64> {
    let out = spec.output_shape(input_shape)?;
    let (cin, cout) = (spec.in_channels as u64, spec.out_channels as u64);
    let k2 = (spec.spatial_kernel * spec.spatial_kernel) as u64;
    let kt = spec.temporal_kernel as u64;
    let macs = match spec.kind {
        BlockKind::Regular2d => {
            let outputs = (out[0] * out[1] * out[2]) as u64;
            outputs * cin * k2
        }
        BlockKind::Depthwise2d => {
            let (h, w) = (input_shape[1] as u64, input_shape[2] as u64);
            let pointwise = cout * h * w * cin;
            let per_channel = (out[0] * out[1] * out[2]) as u64 * k2;
            pointwise + per_channel
        }
        BlockKind::Regular3d => (out[0] * out[1] * out[2] * out[3]) as u64 * cin * kt * k2,
        BlockKind::TwoPlusOneD => {
            let mid = spec.mid_channels() as u64;
            let plane = (out[0] * out[2] * out[3]) as u64;
            plane * mid * cin * k2 + plane * cout * mid * kt
        }
        BlockKind::Depthwise3d => {
            let (l, h, w) = (input_shape[0] as u64, input_shape[2] as u64, input_shape[3] as u64);
            let pointwise = l * cout * h * w * cin;
            let per_channel = (out[0] * out[1] * out[2] * out[3]) as u64 * kt * k2;
            pointwise + per_channel
        }
    };
    Ok(2 * macs)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub parameter_count: u64,
    pub flop_count: u64,
    pub output_shape: Vec<usize>,
}

pub fn cost(spec: &ConvBlockSpec, input_shape: &[usize]) -> Result<CostReport> {
    Ok(CostReport {
        parameter_count: count_params(spec),
        flop_count: count_flops(spec, input_shape)?,
        output_shape: spec.output_shape(input_shape)?,
    })
}

/// Per-sample layer normalization without affine parameters.
pub fn layer_norm(x: &Tensor) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let flat = x.flatten_from(1)?;
    let centered = flat.broadcast_sub(&flat.mean_keepdim(1)?)?;
    let var = centered.sqr()?.mean_keepdim(1)?;
    let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
    Ok(normed.reshape(dims)?)
}

/// `(N, L, C, H, W)` → `(N·L, kt·C, H, W)` holding the zero-padded frames
/// `t−kt/2 … t+kt/2` for every `t`. With `channel_major` the stacked channel
/// index is `c·kt + dt`, otherwise `dt·C + c`.
pub(crate) fn temporal_stack(x: &Tensor, kt: usize, channel_major: bool) -> Result<Tensor> {
    let (n, l, c, h, w) = x.dims5()?;
    let half = kt / 2;
    let padded = if half > 0 {
        x.pad_with_zeros(1, half, half)?
    } else {
        x.clone()
    };
    let shifted: Vec<Tensor> = (0..kt)
        .map(|dt| padded.narrow(1, dt, l))
        .collect::<candle_core::Result<_>>()?;
    let stacked = Tensor::stack(&shifted, if channel_major { 3 } else { 2 })?;
    Ok(stacked.reshape((n * l, kt * c, h, w))?)
}

fn add_channel_bias(x: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    Ok(match bias {
        Some(b) => x.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?,
        None => x.clone(),
    })
}

/// A built block holding its weights.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    spec: ConvBlockSpec,
    /// First (or only) convolution weight and bias.
    w1: Tensor,
    b1: Option<Tensor>,
    /// Second convolution of composite kinds.
    w2: Option<Tensor>,
    b2: Option<Tensor>,
}

impl ConvBlock {
    pub fn new(spec: ConvBlockSpec, store: &mut ParamStore, prefix: &str) -> Result<Self> {
        spec.validate()?;
        let (cin, cout) = (spec.in_channels, spec.out_channels);
        let (k, kt) = (spec.spatial_kernel, spec.temporal_kernel);
        let bias = |store: &mut ParamStore, name: &str, c: usize| -> Result<Option<Tensor>> {
            if spec.includes_bias {
                Ok(Some(store.zeros(&format!("{prefix}.{name}"), &[c])?))
            } else {
                Ok(None)
            }
        };
        let (w1, b1, w2, b2) = match spec.kind {
            BlockKind::Regular2d => {
                let w = store.he_normal(&format!("{prefix}.weight"), &[cout, cin, k, k], cin * k * k)?;
                (w, bias(store, "bias", cout)?, None, None)
            }
            BlockKind::Regular3d => {
                let fan = cin * kt * k * k;
                let w = store.he_normal(&format!("{prefix}.weight"), &[cout, cin, kt, k, k], fan)?;
                (w, bias(store, "bias", cout)?, None, None)
            }
            BlockKind::TwoPlusOneD => {
                let mid = spec.mid_channels();
                let ws = store.he_normal(&format!("{prefix}.spatial.weight"), &[mid, cin, k, k], cin * k * k)?;
                let bs = bias(store, "spatial.bias", mid)?;
                let wt = store.he_normal(&format!("{prefix}.temporal.weight"), &[cout, mid, kt], mid * kt)?;
                let bt = bias(store, "temporal.bias", cout)?;
                (ws, bs, Some(wt), bt)
            }
            BlockKind::Depthwise2d | BlockKind::Depthwise3d => {
                let wp = store.he_normal(&format!("{prefix}.pointwise.weight"), &[cout, cin, 1, 1], cin)?;
                let bp = bias(store, "pointwise.bias", cout)?;
                let shape: Vec<usize> = if spec.kind == BlockKind::Depthwise2d {
                    vec![cout, 1, k, k]
                } else {
                    vec![cout, 1, kt, k, k]
                };
                let fan: usize = shape[2..].iter().product();
                let wd = store.he_normal(&format!("{prefix}.depthwise.weight"), &shape, fan)?;
                let bd = bias(store, "depthwise.bias", cout)?;
                (wp, bp, Some(wd), bd)
            }
        };
        Ok(Self { spec, w1, b1, w2, b2 })
    }

    pub fn spec(&self) -> &ConvBlockSpec {
        &self.spec
    }

    /// Trainable parameters owned by this block.
    pub fn num_params(&self) -> usize {
        [Some(&self.w1), self.b1.as_ref(), self.w2.as_ref(), self.b2.as_ref()]
            .into_iter()
            .flatten()
            .map(|t| t.elem_count())
            .sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let d = x.dims();
        let ok = if self.spec.kind.is_temporal() {
            d.len() == 5 && d[2] == self.spec.in_channels
        } else {
            d.len() == 4 && d[1] == self.spec.in_channels
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{} block with {} input channels cannot take a batch of shape {d:?}",
                self.spec.kind, self.spec.in_channels
            )))
        }
    }

    /// The convolutions alone, without normalization or activation.
    pub fn conv(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let s = &self.spec;
        let (k, kt, stride) = (s.spatial_kernel, s.temporal_kernel, s.stride);
        let pad = (k / 2, k / 2);
        match s.kind {
            BlockKind::Regular2d => add_channel_bias(&conv2d(x, &self.w1, stride, pad, 1)?, self.b1.as_ref()),
            BlockKind::Depthwise2d => {
                let w2 = self.w2.as_ref().expect("depthwise weight");
                let y = add_channel_bias(&conv2d(x, &self.w1, 1, (0, 0), 1)?, self.b1.as_ref())?;
                add_channel_bias(&conv2d(&y, w2, stride, pad, s.out_channels)?, self.b2.as_ref())
            }
            BlockKind::Regular3d => {
                let (n, l, _, _, _) = x.dims5()?;
                let stacked = temporal_stack(x, kt, false)?;
                // (Cout, Cin, kt, k, k) → (Cout, kt·Cin, k, k), matching the dt-major stack.
                let w = self.w1.permute((0, 2, 1, 3, 4))?.reshape((s.out_channels, kt * s.in_channels, k, k))?;
                let y = add_channel_bias(&conv2d(&stacked, &w, stride, pad, 1)?, self.b1.as_ref())?;
                unflatten_frames(&y, n, l)
            }
            BlockKind::TwoPlusOneD => {
                let (n, l, c, h, w) = x.dims5()?;
                let mid = s.mid_channels();
                let frames = x.reshape((n * l, c, h, w))?;
                let y = add_channel_bias(&conv2d(&frames, &self.w1, stride, pad, 1)?, self.b1.as_ref())?;
                let y = unflatten_frames(&y.relu()?, n, l)?;
                let stacked = temporal_stack(&y, kt, false)?;
                let wt = self.w2.as_ref().expect("temporal weight");
                let wt = wt.permute((0, 2, 1))?.reshape((s.out_channels, kt * mid, 1, 1))?;
                let z = add_channel_bias(&conv2d(&stacked, &wt, 1, (0, 0), 1)?, self.b2.as_ref())?;
                unflatten_frames(&z, n, l)
            }
            BlockKind::Depthwise3d => {
                let (n, l, c, h, w) = x.dims5()?;
                let frames = x.reshape((n * l, c, h, w))?;
                let y = add_channel_bias(&conv2d(&frames, &self.w1, 1, (0, 0), 1)?, self.b1.as_ref())?;
                let stacked = temporal_stack(&unflatten_frames(&y, n, l)?, kt, true)?;
                let wd = self.w2.as_ref().expect("depthwise weight");
                let wd = wd.reshape((s.out_channels, kt, k, k))?;
                let z = add_channel_bias(&conv2d(&stacked, &wd, stride, pad, s.out_channels)?, self.b2.as_ref())?;
                unflatten_frames(&z, n, l)
            }
        }
    }

    /// conv → layer norm → ReLU.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(layer_norm(&self.conv(x)?)?.relu()?)
    }
}

fn unflatten_frames(y: &Tensor, n: usize, l: usize) -> Result<Tensor> {
    let (_, c, h, w) = y.dims4()?;
    Ok(y.reshape((n, l, c, h, w))?)
}
