//! Training losses and evaluation metrics.
//!
//! Losses are tensor expressions so they can be differentiated; the metrics
//! are plain numbers. Pixels are in `[0, 1]`, so PSNR uses a peak of 1.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media::VideoClip;
use crate::net::Message;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub encoder: f64,
    pub decoder: f64,
    pub frame: f64,
}

impl LossWeights {
    pub const NOISE_FREE: LossWeights = LossWeights::new(1.0, 0.1, 0.0);
    pub const WITH_NOISE: LossWeights = LossWeights::new(1.0, 0.01, 0.05);

    pub const fn new(encoder: f64, decoder: f64, frame: f64) -> Self {
        Self {
            encoder,
            decoder,
            frame,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.encoder, self.decoder, self.frame];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w.iter().all(|&v| v == 0.0) {
            return Err(Error::InvalidParam(format!(
                "loss weights {w:?} must be non-negative with at least one positive"
            )));
        }
        Ok(())
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{what}: shapes {:?} and {:?} differ", a.dims(), b.dims())));
    }
    Ok(())
}

/// Mean squared pixel difference.
pub fn encoder_loss(vc: &Tensor, vw: &Tensor) -> Result<Tensor> {
    same_shape(vc, vw, "encoder loss")?;
    Ok((vw - vc)?.sqr()?.mean_all()?)
}

/// Sum over frames of the squared per-frame mean absolute difference, averaged
/// over the batch for `(B, L, 3, H, W)` input.
pub fn frame_loss(vc: &Tensor, vw: &Tensor) -> Result<Tensor> {
    same_shape(vc, vw, "frame loss")?;
    let diff = (vw - vc)?.abs()?;
    let per_frame = match diff.rank() {
        4 => diff.flatten_from(1)?.mean(1)?.unsqueeze(0)?,
        5 => diff.flatten_from(2)?.mean(2)?,
        r => return Err(Error::Shape(format!("frame loss expects a clip or batch, got rank {r}"))),
    };
    Ok(per_frame.sqr()?.sum(1)?.mean_all()?)
}

/// Mean squared error between 0/1 targets and logits.
pub fn decoder_loss(target: &Tensor, logits: &Tensor) -> Result<Tensor> {
    same_shape(target, logits, "decoder loss")?;
    Ok((logits - target)?.sqr()?.mean_all()?)
}

/// Individual loss terms and their weighted sum.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub encoder: Tensor,
    pub decoder: Tensor,
    pub frame: Tensor,
    pub total: Tensor,
}

pub fn total_loss(
    vc: &Tensor,
    vw: &Tensor,
    target: &Tensor,
    logits: &Tensor,
    w: &LossWeights,
) -> Result<LossTerms> {
    w.validate()?;
    let encoder = encoder_loss(vc, vw)?;
    let decoder = decoder_loss(target, logits)?;
    let frame = frame_loss(vc, vw)?;
    let total = (((&encoder * w.encoder)? + (&decoder * w.decoder)?)? + (&frame * w.frame)?)?;
    Ok(LossTerms {
        encoder,
        decoder,
        frame,
        total,
    })
}

/// Percentage of matching bits.
pub fn bit_accuracy(m: &Message, pred: &Message) -> Result<f64> {
    if m.len() != pred.len() || m.is_empty() {
        return Err(Error::Shape(format!(
            "messages of length {} and {} cannot be compared",
            m.len(),
            pred.len()
        )));
    }
    let wrong = m.bits().iter().zip(pred.bits()).filter(|(a, b)| a != b).count();
    Ok((1.0 - wrong as f64 / m.len() as f64) * 100.0)
}

/// `10·log10(1/mse)`; infinite for a zero error.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

fn squared_errors(a: &VideoClip, b: &VideoClip) -> Result<Vec<f64>> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("clips {} and {} differ in shape", a.dims(), b.dims())));
    }
    let d = (a.pixels().to_dtype(DType::F64)? - b.pixels().to_dtype(DType::F64)?)?;
    Ok(d.sqr()?.flatten_from(1)?.mean(1)?.to_vec1()?)
}

/// Whole-clip PSNR in dB.
pub fn psnr(vc: &VideoClip, vw: &VideoClip) -> Result<f64> {
    let per = squared_errors(vc, vw)?;
    Ok(psnr_from_mse(per.iter().sum::<f64>() / per.len() as f64))
}

/// Per-frame PSNR with summary statistics over the finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameQualityStats {
    /// One value per frame; `None` for frames identical to the cover.
    pub per_frame_psnr: Vec<Option<f64>>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
}

impl FrameQualityStats {
    /// Summarizes a list of PSNR values, dropping infinite ones. All-infinite
    /// input gives an infinite mean and min with zero spread.
    pub fn from_values(values: &[f64]) -> Self {
        let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        let per_frame_psnr = values.iter().map(|&v| v.is_finite().then_some(v)).collect();
        if finite.is_empty() {
            return Self {
                per_frame_psnr,
                mean: f64::INFINITY,
                std: 0.0,
                min: f64::INFINITY,
            };
        }
        let n = finite.len() as f64;
        let mean = finite.iter().sum::<f64>() / n;
        let var = finite.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            per_frame_psnr,
            mean,
            std: var.sqrt(),
            min: finite.iter().cloned().fold(f64::INFINITY, f64::min),
        }
    }

    /// Frame-wise average of several clips' per-frame PSNR, summarized.
    pub fn aggregate(stats: &[FrameQualityStats]) -> Result<Self> {
        let l = stats.first().ok_or(Error::Empty("frame statistics"))?.per_frame_psnr.len();
        if stats.iter().any(|s| s.per_frame_psnr.len() != l) {
            return Err(Error::Shape("per-frame statistics of different lengths".into()));
        }
        let means: Vec<f64> = (0..l)
            .map(|i| {
                let vals: Vec<f64> = stats.iter().filter_map(|s| s.per_frame_psnr[i]).collect();
                if vals.is_empty() {
                    f64::INFINITY
                } else {
                    vals.iter().sum::<f64>() / vals.len() as f64
                }
            })
            .collect();
        Ok(Self::from_values(&means))
    }
}

pub fn per_frame_psnr(vc: &VideoClip, vw: &VideoClip) -> Result<FrameQualityStats> {
    let values: Vec<f64> = squared_errors(vc, vw)?.into_iter().map(psnr_from_mse).collect();
    Ok(FrameQualityStats::from_values(&values))
}

/// Mean of finite values, or `None` when there are none.
pub fn finite_mean(values: &[f64]) -> Option<f64> {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media::ClipDims;
    use candle_core::Device;

    fn scalar(t: Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar().unwrap()
    }

    #[test]
    fn encoder_loss_closed_form() {
        let a = Tensor::full(0.5f64, (2, 3, 8, 8), &Device::Cpu).unwrap();
        let b = (&a + 0.1).unwrap();
        assert!((scalar(encoder_loss(&a, &b).unwrap()) - 0.01).abs() < 1e-12);
        assert_eq!(scalar(encoder_loss(&a, &a).unwrap()), 0.0);
    }

    #[test]
    fn frame_loss_one_and_all_frames() {
        let vc = Tensor::full(0.5f64, (8, 3, 8, 8), &Device::Cpu).unwrap();
        let mut offsets = vec![0.0f64; 8];
        offsets[3] = 0.1;
        let shift = Tensor::from_vec(offsets, (8, 1, 1, 1), &Device::Cpu).unwrap();
        let one = vc.broadcast_add(&shift).unwrap();
        assert!((scalar(frame_loss(&vc, &one).unwrap()) - 0.01).abs() < 1e-12);
        let all = (&vc + 0.1).unwrap();
        assert!((scalar(frame_loss(&vc, &all).unwrap()) - 0.08).abs() < 1e-12);
    }

    #[test]
    fn decoder_loss_examples() {
        let t = Tensor::new(&[1.0f64, 0.0], &Device::Cpu).unwrap();
        let l = Tensor::new(&[0.5f64, 0.5], &Device::Cpu).unwrap();
        assert!((scalar(decoder_loss(&t, &l).unwrap()) - 0.25).abs() < 1e-12);
        let ones = Tensor::ones(5, DType::F64, &Device::Cpu).unwrap();
        let zeros = Tensor::zeros(5, DType::F64, &Device::Cpu).unwrap();
        assert_eq!(scalar(decoder_loss(&ones, &zeros).unwrap()), 1.0);
        assert!(decoder_loss(&ones, &t).is_err());
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::new(0.0, 0.0, 0.0).validate().is_err());
        assert!(LossWeights::new(1.0, -0.1, 0.0).validate().is_err());
        LossWeights::NOISE_FREE.validate().unwrap();
    }

    #[test]
    fn psnr_closed_forms() {
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-9);
        assert!((psnr_from_mse(1e-4) - 40.0).abs() < 1e-9);
        assert_eq!(psnr_from_mse(0.0), f64::INFINITY);
    }

    #[test]
    fn identical_frames_excluded_from_stats() {
        let dims = ClipDims::new(2, 8, 8);
        let a = VideoClip::from_vec(vec![0.5; dims.elements()], dims).unwrap();
        let mut v = vec![0.5; dims.elements()];
        for x in &mut v[..dims.elements() / 2] {
            *x = 0.6;
        }
        let b = VideoClip::from_vec(v, dims).unwrap();
        let s = per_frame_psnr(&a, &b).unwrap();
        assert_eq!(s.per_frame_psnr[1], None);
        assert!((s.mean - 20.0).abs() < 1e-4);
        assert_eq!(s.std, 0.0);
        assert!(per_frame_psnr(&a, &a).unwrap().mean.is_infinite());
    }
}
