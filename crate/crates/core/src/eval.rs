//! Robustness evaluation, CRF sweeps, and file-level embed / extract /
//! attack helpers behind the command-line tool.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distortion::{apply_distortion, DistortionKind, DistortionSpec};
use crate::error::{Error, Result};
use crate::media::{read_video, sample_clips, write_video, ClipDims, ClipManifest, VideoClip};
use crate::metrics::{bit_accuracy, finite_mean, per_frame_psnr, psnr, FrameQualityStats};
use crate::net::{Message, MessageLogits, WatermarkModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionResult {
    pub kind: DistortionKind,
    pub spec: DistortionSpec,
    /// Mean bit accuracy over clips, in percent.
    pub bit_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub model_id: String,
    pub dataset_id: String,
    pub n_clips: usize,
    pub seed: u64,
    /// Mean whole-clip PSNR of the un-attacked watermarked clips; `None`
    /// when every clip came out identical to its cover.
    pub psnr: Option<f64>,
    pub frame_quality: FrameQualityStats,
    pub distortions: Vec<DistortionResult>,
}

impl EvaluationReport {
    pub fn accuracy(&self, kind: DistortionKind) -> Option<f64> {
        self.distortions.iter().find(|d| d.kind == kind).map(|d| d.bit_accuracy)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// CSV mirror: one row per distortion plus the PSNR summary.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::MalformedInput(e.to_string());
        w.write_record(["metric", "distortion", "value"]).map_err(csv_err)?;
        let psnr = self.psnr.map_or("inf".to_string(), |p| p.to_string());
        w.write_record(["psnr", "none", &psnr]).map_err(csv_err)?;
        w.write_record(["frame_psnr_std", "none", &self.frame_quality.std.to_string()])
            .map_err(csv_err)?;
        for d in &self.distortions {
            w.write_record(["bit_accuracy", &d.spec.label(), &d.bit_accuracy.to_string()])
                .map_err(csv_err)?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::MalformedInput(e.to_string()))?)
            .map_err(|e| Error::MalformedInput(e.to_string()))
    }

    /// Writes the JSON report to `path` and the CSV mirror next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))?;
        let csv_path = path.with_extension("csv");
        std::fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Corrupt {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// Seed for attacking clip `i` with distortion number `j`.
fn attack_seed(seed: u64, i: usize, j: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((i as u64) << 16) | j as u64 | 1 << 48);
    rng.gen()
}

/// Embeds a fresh random message in every clip, applies each distortion,
/// and averages bit accuracy; PSNR is measured before any attack.
pub fn evaluate(
    model: &WatermarkModel,
    clips: &[VideoClip],
    specs: &[DistortionSpec],
    seed: u64,
    model_id: &str,
    dataset_id: &str,
) -> Result<EvaluationReport> {
    if clips.is_empty() {
        return Err(Error::Empty("evaluation clips"));
    }
    for s in specs {
        s.validate()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = model.config().message_length;
    let mut acc = vec![0.0; specs.len()];
    let mut psnrs = Vec::with_capacity(clips.len());
    let mut frames = Vec::with_capacity(clips.len());
    for (i, clip) in clips.iter().enumerate() {
        let msg = Message::random(m, &mut rng);
        let wm = model.encode(clip, &msg)?;
        psnrs.push(psnr(clip, &wm)?);
        frames.push(per_frame_psnr(clip, &wm)?);
        for (j, spec) in specs.iter().enumerate() {
            let attacked = apply_distortion(&wm, spec, attack_seed(seed, i, j))?;
            acc[j] += bit_accuracy(&msg, &model.decode(&attacked)?.threshold())?;
        }
    }
    let n = clips.len() as f64;
    Ok(EvaluationReport {
        model_id: model_id.to_string(),
        dataset_id: dataset_id.to_string(),
        n_clips: clips.len(),
        seed,
        psnr: finite_mean(&psnrs),
        frame_quality: FrameQualityStats::aggregate(&frames)?,
        distortions: specs
            .iter()
            .zip(acc)
            .map(|(s, a)| DistortionResult {
                kind: s.kind(),
                spec: *s,
                bit_accuracy: a / n,
            })
            .collect(),
    })
}

/// Samples `n_clips` clips from `manifest` and evaluates them.
pub fn evaluate_manifest(
    model: &WatermarkModel,
    manifest: &ClipManifest,
    specs: &[DistortionSpec],
    n_clips: usize,
    seed: u64,
    model_id: &str,
    dataset_id: &str,
) -> Result<EvaluationReport> {
    if n_clips == 0 {
        return Err(Error::InvalidParam("n_clips must be ≥ 1".into()));
    }
    let clips = sample_clips(manifest, n_clips, model.config().clip, seed)?;
    evaluate(model, &clips, specs, seed, model_id, dataset_id)
}

/// Parses `all` or a comma-separated list of kinds into evaluation specs.
pub fn parse_distortion_list(list: &str) -> Result<Vec<DistortionSpec>> {
    if list.trim() == "all" {
        return Ok(DistortionKind::ALL.iter().map(|k| k.evaluation_spec()).collect());
    }
    list.split(',')
        .map(|s| Ok(s.trim().parse::<DistortionKind>()?.evaluation_spec()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrfPoint {
    pub crf: u8,
    pub bit_accuracy: f64,
}

/// CRF values from `min` to `max` inclusive in steps of `step`.
pub fn crf_grid(min: u8, max: u8, step: u8) -> Result<Vec<u8>> {
    if min > max {
        return Err(Error::InvalidParam(format!("crf range {min}..{max} is empty")));
    }
    if max > crate::codec::MAX_CRF || step == 0 {
        return Err(Error::InvalidParam(format!(
            "crf range must lie in [0, {}] with a positive step",
            crate::codec::MAX_CRF
        )));
    }
    Ok((min..=max).step_by(step as usize).collect())
}

/// H.264 accuracy for each CRF in `crfs`, on the same clips and messages.
pub fn sweep_crf(model: &WatermarkModel, clips: &[VideoClip], crfs: &[u8], seed: u64) -> Result<Vec<CrfPoint>> {
    let specs: Vec<DistortionSpec> = crfs.iter().map(|&crf| DistortionSpec::H264 { crf }).collect();
    let report = evaluate(model, clips, &specs, seed, "", "")?;
    Ok(report
        .distortions
        .iter()
        .zip(crfs)
        .map(|(d, &crf)| CrfPoint {
            crf,
            bit_accuracy: d.bit_accuracy,
        })
        .collect())
}

/// Splits a video into consecutive `L`-frame segments; trailing frames that
/// do not fill a segment are returned separately.
fn segments(video: &VideoClip, dims: ClipDims) -> Result<(Vec<VideoClip>, Option<Tensor>)> {
    let d = video.dims();
    if d.height != dims.height || d.width != dims.width {
        return Err(Error::Shape(format!(
            "video is {}x{}, the model expects {}x{}",
            d.width, d.height, dims.width, dims.height
        )));
    }
    if d.frames < dims.frames {
        return Err(Error::Shape(format!(
            "video has {} frames, the model needs at least {}",
            d.frames, dims.frames
        )));
    }
    let full = d.frames / dims.frames;
    let segs = (0..full)
        .map(|s| VideoClip::new(video.pixels().narrow(0, s * dims.frames, dims.frames)?, video.frame_rate()))
        .collect::<Result<_>>()?;
    let rest = d.frames - full * dims.frames;
    let tail = if rest > 0 {
        Some(video.pixels().narrow(0, full * dims.frames, rest)?)
    } else {
        None
    };
    Ok((segs, tail))
}

/// Watermarks every full segment of a video in memory.
pub fn embed_clip(model: &WatermarkModel, video: &VideoClip, msg: &Message) -> Result<VideoClip> {
    let (segs, tail) = segments(video, model.config().clip)?;
    let mut parts = segs
        .iter()
        .map(|s| Ok(model.encode(s, msg)?.into_pixels()))
        .collect::<Result<Vec<_>>>()?;
    parts.extend(tail);
    VideoClip::new(Tensor::cat(&parts, 0)?, video.frame_rate())
}

/// Reads `input`, embeds `msg`, and writes the result losslessly.
pub fn embed_file(model: &WatermarkModel, input: &Path, msg: &Message, output: &Path) -> Result<()> {
    let video = read_video(input)?;
    write_video(&embed_clip(model, &video, msg)?, output)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extraction {
    pub bits: String,
    pub hex: Option<String>,
    /// Mean |logit − 0.5|.
    pub confidence: f64,
    /// Per-bit `logit − 0.5`, averaged over segments.
    pub margins: Vec<f64>,
    pub segments: usize,
}

pub fn extract_clip(model: &WatermarkModel, video: &VideoClip) -> Result<Extraction> {
    let (segs, _) = segments(video, model.config().clip)?;
    let m = model.config().message_length;
    let mut sum = vec![0.0; m];
    for s in &segs {
        for (a, l) in sum.iter_mut().zip(model.decode(s)?.0) {
            *a += l;
        }
    }
    let logits = MessageLogits(sum.iter().map(|v| v / segs.len() as f64).collect());
    let msg = logits.threshold();
    Ok(Extraction {
        bits: msg.to_string(),
        hex: msg.to_hex(),
        confidence: logits.confidence(),
        margins: logits.0.iter().map(|l| l - crate::net::BIT_THRESHOLD).collect(),
        segments: segs.len(),
    })
}

pub fn extract_file(model: &WatermarkModel, input: &Path) -> Result<Extraction> {
    extract_clip(model, &read_video(input)?)
}

/// Applies one distortion to a whole video file and writes it losslessly.
pub fn attack_file(input: &Path, spec: &DistortionSpec, seed: u64, output: &Path) -> Result<()> {
    let video = read_video(input)?;
    write_video(&apply_distortion(&video, spec, seed)?, output)
}

/// Several evaluation runs merged into one grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedReport {
    pub columns: Vec<String>,
    pub rows: Vec<MergedRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedRow {
    pub model_id: String,
    pub dataset_id: String,
    pub psnr: Option<f64>,
    pub frame_psnr_std: f64,
    /// Accuracy per column label; missing when the run skipped it.
    pub accuracy: BTreeMap<String, f64>,
}

pub fn merge_reports(reports: &[EvaluationReport]) -> Result<MergedReport> {
    if reports.is_empty() {
        return Err(Error::Empty("reports"));
    }
    let mut columns: Vec<String> = Vec::new();
    for r in reports {
        for d in &r.distortions {
            let label = d.spec.label();
            if !columns.contains(&label) {
                columns.push(label);
            }
        }
    }
    let rows = reports
        .iter()
        .map(|r| MergedRow {
            model_id: r.model_id.clone(),
            dataset_id: r.dataset_id.clone(),
            psnr: r.psnr,
            frame_psnr_std: r.frame_quality.std,
            accuracy: r.distortions.iter().map(|d| (d.spec.label(), d.bit_accuracy)).collect(),
        })
        .collect();
    Ok(MergedReport { columns, rows })
}

impl MergedReport {
    pub fn to_csv(&self) -> Result<String> {
        let err = |e: csv::Error| Error::MalformedInput(e.to_string());
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["model".to_string(), "dataset".into(), "psnr".into(), "frame_psnr_std".into()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header).map_err(err)?;
        for r in &self.rows {
            let mut rec = vec![
                r.model_id.clone(),
                r.dataset_id.clone(),
                r.psnr.map_or("inf".into(), |p| format!("{p:.2}")),
                format!("{:.3}", r.frame_psnr_std),
            ];
            rec.extend(
                self.columns
                    .iter()
                    .map(|c| r.accuracy.get(c).map_or(String::new(), |a| format!("{a:.2}"))),
            );
            w.write_record(&rec).map_err(err)?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::MalformedInput(e.to_string()))?)
            .map_err(|e| Error::MalformedInput(e.to_string()))
    }

    /// Fixed-width text table.
    pub fn to_table(&self) -> String {
        let mut header = vec!["model".to_string(), "PSNR".into()];
        header.extend(self.columns.iter().cloned());
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut row = vec![r.model_id.clone(), r.psnr.map_or("inf".into(), |p| format!("{p:.2}"))];
                row.extend(
                    self.columns
                        .iter()
                        .map(|c| r.accuracy.get(c).map_or("-".into(), |a| format!("{a:.2}"))),
                );
                row
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| body.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0))
            .collect();
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = line(&header);
        for r in &body {
            out.push('\n');
            out.push_str(&line(r));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distortion_list_parsing() {
        assert_eq!(parse_distortion_list("all").unwrap().len(), 9);
        let two = parse_distortion_list("identity, h264").unwrap();
        assert_eq!(two, vec![DistortionSpec::Identity, DistortionSpec::H264 { crf: 22 }]);
        assert!(parse_distortion_list("jpeg").is_err());
    }

    #[test]
    fn crf_grid_bounds() {
        assert_eq!(crf_grid(0, 51, 17).unwrap(), vec![0, 17, 34, 51]);
        assert!(crf_grid(30, 20, 1).is_err());
        assert!(crf_grid(0, 52, 1).is_err());
        assert!(crf_grid(0, 10, 0).is_err());
    }

    #[test]
    fn merged_table_has_union_of_columns() {
        let mk = |id: &str, specs: &[DistortionSpec]| EvaluationReport {
            model_id: id.into(),
            dataset_id: "d".into(),
            n_clips: 1,
            seed: 0,
            psnr: Some(35.0),
            frame_quality: FrameQualityStats::from_values(&[35.0]),
            distortions: specs
                .iter()
                .map(|s| DistortionResult {
                    kind: s.kind(),
                    spec: *s,
                    bit_accuracy: 90.0,
                })
                .collect(),
        };
        let a = mk("a", &[DistortionSpec::Identity]);
        let b = mk("b", &[DistortionSpec::Identity, DistortionSpec::H264 { crf: 22 }]);
        let merged = merge_reports(&[a, b]).unwrap();
        assert_eq!(merged.columns, vec!["identity", "h264(crf=22)"]);
        let csv = merged.to_csv().unwrap();
        assert!(csv.lines().nth(1).unwrap().ends_with("90.00,"), "{csv}");
        assert!(merged.to_table().contains("h264(crf=22)"));
    }
}
