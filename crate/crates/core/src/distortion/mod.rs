//! Attack simulation: the distortion set, forward-ASL wrapping for attacks
//! without a usable gradient, and per-batch distortion sampling.
//!
//! Every distortion works on `(B, L, 3, H, W)` batches (or a single
//! `(L, 3, H, W)` clip) and, except H.264, is built from differentiable
//! tensor ops. Randomness is drawn from a ChaCha stream seeded per call, one
//! clip after another, so a batch of one reproduces the single-clip result.

mod hue;

use std::fmt;

use candle_core::{DType, Device, Tensor};
use rand::distributions::uniform::SampleUniform;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::{self, MAX_CRF};
use crate::error::{Error, Result};
use crate::kernels::conv2d;
use crate::media::{ClipDims, VideoClip};

/// Default hue offset bound, as a fraction of the hue circle.
pub const DEFAULT_HUE_RANGE: f64 = 0.1;

fn default_hue_range() -> f64 {
    DEFAULT_HUE_RANGE
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionKind {
    Identity,
    H264,
    FrameAverage,
    FrameDrop,
    FrameSwap,
    GaussianBlur,
    GaussianNoise,
    RandomCrop,
    RandomHue,
}

impl DistortionKind {
    pub const ALL: [DistortionKind; 9] = [
        DistortionKind::Identity,
        DistortionKind::H264,
        DistortionKind::FrameAverage,
        DistortionKind::FrameDrop,
        DistortionKind::FrameSwap,
        DistortionKind::GaussianBlur,
        DistortionKind::GaussianNoise,
        DistortionKind::RandomCrop,
        DistortionKind::RandomHue,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::H264 => "h264",
            Self::FrameAverage => "frame_average",
            Self::FrameDrop => "frame_drop",
            Self::FrameSwap => "frame_swap",
            Self::GaussianBlur => "gaussian_blur",
            Self::GaussianNoise => "gaussian_noise",
            Self::RandomCrop => "random_crop",
            Self::RandomHue => "random_hue",
        }
    }

    /// Parameters used for robustness evaluation.
    pub fn evaluation_spec(self) -> DistortionSpec {
        match self {
            Self::Identity => DistortionSpec::Identity,
            Self::H264 => DistortionSpec::H264 { crf: 22 },
            Self::FrameAverage => DistortionSpec::FrameAverage { n: 3 },
            Self::FrameDrop => DistortionSpec::FrameDrop { p: 0.5 },
            Self::FrameSwap => DistortionSpec::FrameSwap { p: 0.5 },
            Self::GaussianBlur => DistortionSpec::GaussianBlur { sigma: 2.0 },
            Self::GaussianNoise => DistortionSpec::GaussianNoise { std: 0.04 },
            Self::RandomCrop => DistortionSpec::RandomCrop { p: 0.4 },
            Self::RandomHue => DistortionSpec::RandomHue {
                p: 1.0,
                max_offset: DEFAULT_HUE_RANGE,
            },
        }
    }
}

impl fmt::Display for DistortionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DistortionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidParam(format!("unknown distortion {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistortionSpec {
    Identity,
    H264 {
        crf: u8,
    },
    /// Centered window of `n` frames, clamped at the clip edges.
    FrameAverage {
        n: usize,
    },
    FrameDrop {
        p: f64,
    },
    FrameSwap {
        p: f64,
    },
    GaussianBlur {
        sigma: f64,
    },
    GaussianNoise {
        std: f64,
    },
    /// `p` is the retained area fraction.
    RandomCrop {
        p: f64,
    },
    RandomHue {
        p: f64,
        #[serde(default = "default_hue_range")]
        max_offset: f64,
    },
}

fn check_probability(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidParam(format!("{name} probability {p} outside [0, 1]")))
    }
}

impl DistortionSpec {
    pub fn kind(&self) -> DistortionKind {
        match self {
            Self::Identity => DistortionKind::Identity,
            Self::H264 { .. } => DistortionKind::H264,
            Self::FrameAverage { .. } => DistortionKind::FrameAverage,
            Self::FrameDrop { .. } => DistortionKind::FrameDrop,
            Self::FrameSwap { .. } => DistortionKind::FrameSwap,
            Self::GaussianBlur { .. } => DistortionKind::GaussianBlur,
            Self::GaussianNoise { .. } => DistortionKind::GaussianNoise,
            Self::RandomCrop { .. } => DistortionKind::RandomCrop,
            Self::RandomHue { .. } => DistortionKind::RandomHue,
        }
    }

    pub fn is_differentiable(&self) -> bool {
        !matches!(self, Self::H264 { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Identity => Ok(()),
            Self::H264 { crf } if crf > MAX_CRF => {
                Err(Error::InvalidParam(format!("crf {crf} outside [0, {MAX_CRF}]")))
            }
            Self::H264 { .. } => Ok(()),
            Self::FrameAverage { n } if n == 0 || n % 2 == 0 => {
                Err(Error::InvalidParam(format!("frame-average window {n} must be odd and ≥ 1")))
            }
            Self::FrameAverage { .. } => Ok(()),
            Self::FrameDrop { p } => check_probability("frame-drop", p),
            Self::FrameSwap { p } => check_probability("frame-swap", p),
            Self::GaussianBlur { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                Err(Error::InvalidParam(format!("blur sigma {sigma} must be > 0")))
            }
            Self::GaussianBlur { .. } => Ok(()),
            Self::GaussianNoise { std } if !(std >= 0.0 && std.is_finite()) => {
                Err(Error::InvalidParam(format!("noise std {std} must be ≥ 0")))
            }
            Self::GaussianNoise { .. } => Ok(()),
            Self::RandomCrop { p } if !(p > 0.0 && p <= 1.0) => {
                Err(Error::InvalidParam(format!("crop fraction {p} outside (0, 1]")))
            }
            Self::RandomCrop { .. } => Ok(()),
            Self::RandomHue { p, max_offset } => {
                check_probability("hue", p)?;
                if (0.0..=0.5).contains(&max_offset) {
                    Ok(())
                } else {
                    Err(Error::InvalidParam(format!("hue offset bound {max_offset} outside [0, 0.5]")))
                }
            }
        }
    }

    /// Short label such as `h264(crf=22)`.
    pub fn label(&self) -> String {
        match *self {
            Self::Identity => "identity".into(),
            Self::H264 { crf } => format!("h264(crf={crf})"),
            Self::FrameAverage { n } => format!("frame_average(n={n})"),
            Self::FrameDrop { p } => format!("frame_drop(p={p})"),
            Self::FrameSwap { p } => format!("frame_swap(p={p})"),
            Self::GaussianBlur { sigma } => format!("gaussian_blur(sigma={sigma})"),
            Self::GaussianNoise { std } => format!("gaussian_noise(std={std})"),
            Self::RandomCrop { p } => format!("random_crop(p={p})"),
            Self::RandomHue { p, .. } => format!("random_hue(p={p})"),
        }
    }
}

/// A fixed value or an inclusive range sampled uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamRange<T> {
    Fixed(T),
    Range { min: T, max: T },
}

impl<T: SampleUniform + PartialOrd + Copy + fmt::Debug> ParamRange<T> {
    fn sample(&self, rng: &mut impl Rng) -> T {
        match *self {
            Self::Fixed(v) => v,
            Self::Range { min, max } => rng.gen_range(min..=max),
        }
    }

    fn bounds(&self) -> (T, T) {
        match *self {
            Self::Fixed(v) => (v, v),
            Self::Range { min, max } => (min, max),
        }
    }
}

/// A distortion with possibly randomized parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistortionTemplate {
    Identity,
    H264 { crf: ParamRange<u8> },
    FrameAverage { n: ParamRange<usize> },
    FrameDrop { p: ParamRange<f64> },
    FrameSwap { p: ParamRange<f64> },
    GaussianBlur { sigma: ParamRange<f64> },
    GaussianNoise { std: ParamRange<f64> },
    RandomCrop { p: ParamRange<f64> },
    RandomHue {
        p: ParamRange<f64>,
        #[serde(default = "default_hue_range")]
        max_offset: f64,
    },
}

impl DistortionTemplate {
    pub fn fixed(spec: DistortionSpec) -> Self {
        use ParamRange::Fixed;
        match spec {
            DistortionSpec::Identity => Self::Identity,
            DistortionSpec::H264 { crf } => Self::H264 { crf: Fixed(crf) },
            DistortionSpec::FrameAverage { n } => Self::FrameAverage { n: Fixed(n) },
            DistortionSpec::FrameDrop { p } => Self::FrameDrop { p: Fixed(p) },
            DistortionSpec::FrameSwap { p } => Self::FrameSwap { p: Fixed(p) },
            DistortionSpec::GaussianBlur { sigma } => Self::GaussianBlur { sigma: Fixed(sigma) },
            DistortionSpec::GaussianNoise { std } => Self::GaussianNoise { std: Fixed(std) },
            DistortionSpec::RandomCrop { p } => Self::RandomCrop { p: Fixed(p) },
            DistortionSpec::RandomHue { p, max_offset } => Self::RandomHue {
                p: Fixed(p),
                max_offset,
            },
        }
    }

    pub fn kind(&self) -> DistortionKind {
        self.draw(&mut ChaCha8Rng::seed_from_u64(0)).kind()
    }

    fn draw(&self, rng: &mut impl Rng) -> DistortionSpec {
        match *self {
            Self::Identity => DistortionSpec::Identity,
            Self::H264 { crf } => DistortionSpec::H264 { crf: crf.sample(rng) },
            Self::FrameAverage { n } => DistortionSpec::FrameAverage { n: n.sample(rng) },
            Self::FrameDrop { p } => DistortionSpec::FrameDrop { p: p.sample(rng) },
            Self::FrameSwap { p } => DistortionSpec::FrameSwap { p: p.sample(rng) },
            Self::GaussianBlur { sigma } => DistortionSpec::GaussianBlur { sigma: sigma.sample(rng) },
            Self::GaussianNoise { std } => DistortionSpec::GaussianNoise { std: std.sample(rng) },
            Self::RandomCrop { p } => DistortionSpec::RandomCrop { p: p.sample(rng) },
            Self::RandomHue { p, max_offset } => DistortionSpec::RandomHue {
                p: p.sample(rng),
                max_offset,
            },
        }
    }

    /// Checks both ends of every range.
    pub fn validate(&self) -> Result<()> {
        let ends = |f: &dyn Fn(bool) -> DistortionSpec| -> Result<()> {
            f(false).validate()?;
            f(true).validate()
        };
        let pick = |(lo, hi): (f64, f64), upper: bool| if upper { hi } else { lo };
        match *self {
            Self::Identity => Ok(()),
            Self::H264 { crf } => {
                let (lo, hi) = crf.bounds();
                ends(&|u| DistortionSpec::H264 { crf: if u { hi } else { lo } })
            }
            Self::FrameAverage { n } => {
                let (lo, hi) = n.bounds();
                if lo != hi {
                    return Err(Error::InvalidParam("frame-average window must be fixed".into()));
                }
                ends(&|u| DistortionSpec::FrameAverage { n: if u { hi } else { lo } })
            }
            Self::FrameDrop { p } => ends(&|u| DistortionSpec::FrameDrop { p: pick(p.bounds(), u) }),
            Self::FrameSwap { p } => ends(&|u| DistortionSpec::FrameSwap { p: pick(p.bounds(), u) }),
            Self::GaussianBlur { sigma } => ends(&|u| DistortionSpec::GaussianBlur {
                sigma: pick(sigma.bounds(), u),
            }),
            Self::GaussianNoise { std } => ends(&|u| DistortionSpec::GaussianNoise {
                std: pick(std.bounds(), u),
            }),
            Self::RandomCrop { p } => ends(&|u| DistortionSpec::RandomCrop { p: pick(p.bounds(), u) }),
            Self::RandomHue { p, max_offset } => ends(&|u| DistortionSpec::RandomHue {
                p: pick(p.bounds(), u),
                max_offset,
            }),
        }
    }
}

/// The randomized training set: one template per kind.
pub fn training_templates() -> Vec<DistortionTemplate> {
    use ParamRange::{Fixed, Range};
    vec![
        DistortionTemplate::Identity,
        DistortionTemplate::H264 {
            crf: Range { min: 18, max: 28 },
        },
        DistortionTemplate::FrameAverage { n: Fixed(3) },
        DistortionTemplate::FrameDrop {
            p: Range { min: 0.2, max: 0.6 },
        },
        DistortionTemplate::FrameSwap {
            p: Range { min: 0.2, max: 0.6 },
        },
        DistortionTemplate::GaussianBlur {
            sigma: Range { min: 0.5, max: 2.0 },
        },
        DistortionTemplate::GaussianNoise {
            std: Range { min: 0.01, max: 0.05 },
        },
        DistortionTemplate::RandomCrop {
            p: Range { min: 0.3, max: 0.7 },
        },
        DistortionTemplate::RandomHue {
            p: Fixed(1.0),
            max_offset: DEFAULT_HUE_RANGE,
        },
    ]
}

/// Picks one template uniformly and draws its parameters.
pub fn sample_distortion(templates: &[DistortionTemplate], seed: u64) -> Result<DistortionSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_with(templates, &mut rng)
}

pub fn sample_with(templates: &[DistortionTemplate], rng: &mut impl Rng) -> Result<DistortionSpec> {
    if templates.is_empty() {
        return Err(Error::Empty("distortion set"));
    }
    let t = templates[rng.gen_range(0..templates.len())];
    Ok(t.draw(rng))
}

/// Views a clip or batch as `(B, L, 3, H, W)`.
fn as_batch(x: &Tensor) -> Result<(Tensor, bool)> {
    match x.rank() {
        4 => Ok((x.unsqueeze(0)?, true)),
        5 => Ok((x.clone(), false)),
        r => Err(Error::Shape(format!("expected a clip or clip batch, got rank {r}"))),
    }
}

/// Applies `spec` to a clip `(L, 3, H, W)` or a batch `(B, L, 3, H, W)`.
pub fn apply(x: &Tensor, spec: &DistortionSpec, seed: u64) -> Result<Tensor> {
    spec.validate()?;
    let (batch, single) = as_batch(x)?;
    let (b, l, c, h, w) = batch.dims5()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected RGB clips, got {c} channels")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = match *spec {
        DistortionSpec::Identity => batch,
        DistortionSpec::H264 { crf } => h264_batch(&batch, crf)?,
        DistortionSpec::FrameAverage { n } => frame_average(&batch, n)?,
        DistortionSpec::FrameDrop { p } => {
            let idx: Vec<usize> = (0..b).flat_map(|_| frame_drop_indices(l, p, &mut rng)).collect();
            gather_frames(&batch, &idx)?
        }
        DistortionSpec::FrameSwap { p } => {
            let idx: Vec<usize> = (0..b).flat_map(|_| frame_swap_indices(l, p, &mut rng)).collect();
            gather_frames(&batch, &idx)?
        }
        DistortionSpec::GaussianBlur { sigma } => gaussian_blur(&batch, sigma)?,
        DistortionSpec::GaussianNoise { std } => {
            let dist = Normal::new(0.0f32, std as f32).map_err(|e| Error::InvalidParam(e.to_string()))?;
            let noise: Vec<f32> = (0..batch.elem_count()).map(|_| dist.sample(&mut rng)).collect();
            let noise = Tensor::from_vec(noise, batch.shape(), &Device::Cpu)?.to_dtype(batch.dtype())?;
            (batch + noise)?.clamp(0.0, 1.0)?
        }
        DistortionSpec::RandomCrop { p } => {
            let mut mask = vec![0f32; b * h * w];
            for plane in mask.chunks_exact_mut(h * w) {
                let (y0, x0, ch, cw) = crop_window(h, w, p, &mut rng);
                for y in y0..y0 + ch {
                    plane[y * w + x0..y * w + x0 + cw].fill(1.0);
                }
            }
            let mask = Tensor::from_vec(mask, (b, 1, 1, h, w), &Device::Cpu)?.to_dtype(batch.dtype())?;
            batch.broadcast_mul(&mask)?
        }
        DistortionSpec::RandomHue { p, max_offset } => {
            let offsets: Vec<f64> = (0..b)
                .map(|_| {
                    let apply = rng.gen_bool(p);
                    let off = rng.gen_range(-max_offset..=max_offset);
                    if apply {
                        off
                    } else {
                        0.0
                    }
                })
                .collect();
            batch
                .contiguous()?
                .apply_op1(hue::HueShift { offsets })?
                .clamp(0.0, 1.0)?
        }
    };
    Ok(if single { out.squeeze(0)? } else { out })
}

/// Single-clip convenience over [`apply`].
pub fn apply_distortion(clip: &VideoClip, spec: &DistortionSpec, seed: u64) -> Result<VideoClip> {
    let out = apply(clip.pixels(), spec, seed)?;
    VideoClip::from_trusted(out, clip.frame_rate())
}

/// Forward attack simulation: the value of the result is the attacked video,
/// while the gradient with respect to `vw` is the identity.
pub fn forward_asl(vw: &Tensor, spec: &DistortionSpec, seed: u64) -> Result<Tensor> {
    let detached = vw.detach();
    let attacked = apply(&detached, spec, seed)?;
    Ok((attacked + (vw - &detached)?)?)
}

/// What an attack did to one clip.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub attacked: VideoClip,
    /// Forward-ASL output; present for attacks without a gradient.
    pub pseudo: Option<VideoClip>,
    pub spec_used: DistortionSpec,
    pub rng_seed: u64,
}

pub fn attack(clip: &VideoClip, spec: &DistortionSpec, seed: u64) -> Result<AttackOutcome> {
    let attacked = apply_distortion(clip, spec, seed)?;
    let pseudo = if spec.is_differentiable() {
        None
    } else {
        let out = forward_asl(clip.pixels(), spec, seed)?;
        Some(VideoClip::from_trusted(out, clip.frame_rate())?)
    };
    Ok(AttackOutcome {
        attacked,
        pseudo,
        spec_used: *spec,
        rng_seed: seed,
    })
}

/// Applies a distortion inside a training graph: in-graph for
/// differentiable kinds, via [`forward_asl`] otherwise.
pub fn apply_for_training(vw: &Tensor, spec: &DistortionSpec, seed: u64) -> Result<Tensor> {
    if spec.is_differentiable() {
        apply(vw, spec, seed)
    } else {
        forward_asl(vw, spec, seed)
    }
}

fn h264_batch(batch: &Tensor, crf: u8) -> Result<Tensor> {
    let ff = codec::ffmpeg()?;
    let (b, l, _, h, w) = batch.dims5()?;
    let dtype = batch.dtype();
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let clip = VideoClip::from_trusted(batch.get(i)?.clamp(0.0, 1.0)?, crate::media::DEFAULT_FRAME_RATE)?;
        let bytes = ff.h264_roundtrip(&clip.to_rgb24()?, (w, h), crf)?;
        let decoded = VideoClip::from_rgb24(&bytes, ClipDims::new(l, h, w), clip.frame_rate())?;
        out.push(decoded.into_pixels().to_dtype(dtype)?);
    }
    Ok(Tensor::stack(&out, 0)?)
}

/// Sequential window sums divided by the window size, frame by frame.
fn frame_average(batch: &Tensor, n: usize) -> Result<Tensor> {
    let l = batch.dim(1)?;
    let half = n / 2;
    let mut frames = Vec::with_capacity(l);
    for i in 0..l {
        let (lo, hi) = (i.saturating_sub(half), (i + half).min(l - 1));
        let mut sum = batch.narrow(1, lo, 1)?;
        for j in lo + 1..=hi {
            sum = (sum + batch.narrow(1, j, 1)?)?;
        }
        let count = Tensor::new(&[(hi - lo + 1) as f64], &Device::Cpu)?.to_dtype(batch.dtype())?;
        frames.push(sum.broadcast_div(&count)?);
    }
    Ok(Tensor::cat(&frames, 1)?.clamp(0.0, 1.0)?)
}

/// Source frame for every output frame after dropping.
pub fn frame_drop_indices(l: usize, p: f64, rng: &mut impl Rng) -> Vec<usize> {
    let mut keep: Vec<bool> = (0..l).map(|_| !rng.gen_bool(p)).collect();
    if !keep.iter().any(|&k| k) {
        keep[rng.gen_range(0..l)] = true;
    }
    let first = keep.iter().position(|&k| k).expect("one survivor");
    let mut last = first;
    (0..l)
        .map(|i| {
            if keep[i] {
                last = i;
            }
            if i < first {
                first
            } else {
                last
            }
        })
        .collect()
}

pub fn frame_swap_indices(l: usize, p: f64, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..l).collect();
    for i in (0..l.saturating_sub(1)).step_by(2) {
        if rng.gen_bool(p) {
            idx.swap(i, i + 1);
        }
    }
    idx
}

/// Gathers frames with per-clip indices `idx` (length `B·L`).
fn gather_frames(batch: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let (b, l, c, h, w) = batch.dims5()?;
    let global: Vec<u32> = idx
        .iter()
        .enumerate()
        .map(|(k, &j)| ((k / l) * l + j) as u32)
        .collect();
    let ids = Tensor::from_vec(global, b * l, &Device::Cpu)?;
    let flat = batch.reshape((b * l, c, h, w))?;
    Ok(flat.index_select(&ids, 0)?.reshape((b, l, c, h, w))?)
}

/// Kernel radius `ceil(3σ)`.
pub fn blur_radius(sigma: f64) -> usize {
    (3.0 * sigma).ceil() as usize
}

pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = blur_radius(sigma) as i64;
    let raw: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Source index for position `i` of an axis of length `n` padded by `pad`,
/// mirroring about the edge samples.
fn reflect(i: i64, n: i64) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

fn reflect_pad(x: &Tensor, dim: usize, pad: usize) -> Result<Tensor> {
    let n = x.dim(dim)? as i64;
    let ids: Vec<u32> = (-(pad as i64)..n + pad as i64).map(|i| reflect(i, n) as u32).collect();
    let len = ids.len();
    Ok(x.index_select(&Tensor::from_vec(ids, len, &Device::Cpu)?, dim)?)
}

/// Separable blur, computed in f64.
fn gaussian_blur(batch: &Tensor, sigma: f64) -> Result<Tensor> {
    let (b, l, c, h, w) = batch.dims5()?;
    let dtype = batch.dtype();
    let k = gaussian_kernel(sigma);
    let r = k.len() / 2;
    let x = batch.to_dtype(DType::F64)?.reshape((b * l, c, h, w))?;
    let kx = Tensor::from_vec(k.repeat(c), (c, 1, 1, k.len()), &Device::Cpu)?;
    let ky = kx.reshape((c, 1, k.len(), 1))?;
    let x = conv2d(&reflect_pad(&x, 3, r)?, &kx, 1, (0, 0), c)?;
    let x = conv2d(&reflect_pad(&x, 2, r)?, &ky, 1, (0, 0), c)?;
    Ok(x.reshape((b, l, c, h, w))?.to_dtype(dtype)?.clamp(0.0, 1.0)?)
}

/// Retained window `(y0, x0, height, width)` covering about `p·H·W` pixels.
pub fn crop_window(h: usize, w: usize, p: f64, rng: &mut impl Rng) -> (usize, usize, usize, usize) {
    let ch = ((h as f64 * p.sqrt()).round() as usize).clamp(1, h);
    let cw = ((p * (h * w) as f64 / ch as f64).round() as usize).clamp(1, w);
    let y0 = rng.gen_range(0..=h - ch);
    let x0 = rng.gen_range(0..=w - cw);
    (y0, x0, ch, cw)
}
