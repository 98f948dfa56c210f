//! Two-stage training with checkpointing and exact resumption.
//!
//! Stage one trains without attacks; stage two starts from a stage-one
//! checkpoint and samples one distortion per batch. All randomness of step
//! `s` comes from a generator seeded by `(seed, s)`, so resuming from a
//! checkpoint replays the uninterrupted run bit for bit.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distortion::{self, DistortionSpec, DistortionTemplate};
use crate::error::{Error, Result};
use crate::media::{sample_clips, stack_clips, ClipManifest, VideoClip};
use crate::metrics::{finite_mean, psnr_from_mse, total_loss, LossWeights};
use crate::net::{messages_tensor, Message, NetConfig, WatermarkModel, BIT_THRESHOLD};
use crate::params::Adam;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    NoiseFree,
    WithNoise,
}

impl Stage {
    pub fn default_weights(self) -> LossWeights {
        match self {
            Stage::NoiseFree => LossWeights::NOISE_FREE,
            Stage::WithNoise => LossWeights::WITH_NOISE,
        }
    }

    pub fn default_distortions(self) -> Vec<DistortionTemplate> {
        match self {
            Stage::NoiseFree => vec![DistortionTemplate::Identity],
            Stage::WithNoise => distortion::training_templates(),
        }
    }
}

fn default_batch() -> usize {
    16
}

fn default_lr() -> f64 {
    1e-5
}

fn default_pool() -> usize {
    64
}

fn default_eval_interval() -> u64 {
    50
}

fn default_eval_clips() -> usize {
    8
}

fn default_stop_accuracy() -> Option<f64> {
    Some(99.5)
}

fn default_patience() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub stage: Stage,
    pub net: NetConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Defaults to the stage's weights.
    #[serde(default)]
    pub weights: Option<LossWeights>,
    /// Defaults to the stage's distortion set.
    #[serde(default)]
    pub distortions: Option<Vec<DistortionTemplate>>,
    /// Total optimizer steps for the stage.
    pub steps: u64,
    #[serde(default)]
    pub seed: u64,
    /// Training clips held in memory, sampled from the manifest.
    #[serde(default = "default_pool")]
    pub pool_size: usize,
    /// Held-out clips for periodic identity-attack evaluation.
    #[serde(default = "default_eval_clips")]
    pub eval_clips: usize,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: u64,
    /// Stage one stops once held-out accuracy reaches this for `patience`
    /// consecutive evaluations.
    #[serde(default = "default_stop_accuracy")]
    pub stop_accuracy: Option<f64>,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    /// Stage-one checkpoint to start stage two from.
    #[serde(default)]
    pub init: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint_interval: Option<u64>,
    #[serde(default)]
    pub log: Option<PathBuf>,
}

impl TrainingConfig {
    pub fn new(stage: Stage, net: NetConfig, steps: u64) -> Self {
        Self {
            stage,
            net,
            batch_size: default_batch(),
            learning_rate: default_lr(),
            weights: None,
            distortions: None,
            steps,
            seed: 0,
            pool_size: default_pool(),
            eval_clips: default_eval_clips(),
            eval_interval: default_eval_interval(),
            stop_accuracy: default_stop_accuracy(),
            patience: default_patience(),
            manifest: None,
            init: None,
            checkpoint: None,
            checkpoint_interval: None,
            log: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.manifest, &mut cfg.init, &mut cfg.checkpoint, &mut cfg.log]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn weights(&self) -> LossWeights {
        self.weights.unwrap_or_else(|| self.stage.default_weights())
    }

    pub fn distortions(&self) -> Vec<DistortionTemplate> {
        self.distortions.clone().unwrap_or_else(|| self.stage.default_distortions())
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.batch_size == 0 || self.pool_size == 0 {
            return Err(Error::InvalidParam("batch and pool sizes must be ≥ 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParam(format!("learning rate {} must be > 0", self.learning_rate)));
        }
        if self.eval_interval == 0 {
            return Err(Error::InvalidParam("evaluation interval must be ≥ 1".into()));
        }
        let w = self.weights();
        w.validate()?;
        let set = self.distortions();
        if set.is_empty() {
            return Err(Error::Empty("distortion set"));
        }
        for t in &set {
            t.validate()?;
        }
        if self.stage == Stage::NoiseFree {
            if set != [DistortionTemplate::Identity] {
                return Err(Error::InvalidParam("the noise-free stage trains with identity only".into()));
            }
            if w.frame != 0.0 {
                return Err(Error::InvalidParam("the noise-free stage has no frame loss".into()));
            }
        }
        Ok(())
    }

    /// Digest of everything that shapes the optimization trajectory.
    pub fn hash(&self) -> String {
        let key = serde_json::json!({
            "stage": self.stage,
            "net": self.net,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "weights": self.weights(),
            "distortions": self.distortions(),
            "seed": self.seed,
            "pool_size": self.pool_size,
            "eval_clips": self.eval_clips,
        });
        hex::encode(Sha256::digest(key.to_string().as_bytes()))
    }
}

/// One optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub distortion: String,
    pub encoder_loss: f64,
    pub decoder_loss: f64,
    pub frame_loss: f64,
    pub total_loss: f64,
    pub bit_accuracy: f64,
    pub psnr: Option<f64>,
}

/// Held-out identity-attack evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub bit_accuracy: f64,
    pub psnr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub net: NetConfig,
    pub stage: Stage,
    pub step: u64,
    pub learning_rate: f64,
    pub config_hash: String,
    #[serde(default)]
    pub history: Vec<StepRecord>,
    #[serde(default)]
    pub evals: Vec<EvalRecord>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub model: WatermarkModel,
    pub optimizer: Adam,
    pub meta: CheckpointMeta,
}

/// Sidecar metadata path for a weights file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = tempfile::Builder::new()
        .prefix(".itov-")
        .tempfile_in(dir)
        .map_err(|e| Error::io(dir, e))?;
    write(tmp.path())?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

impl Checkpoint {
    /// Writes `path` (weights and optimizer moments) and its JSON sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: HashMap<String, Tensor> = self.model.params().snapshot()?;
        tensors.extend(self.optimizer.state());
        write_atomic(path, |tmp| {
            candle_core::safetensors::save(&tensors, tmp).map_err(Error::from)
        })?;
        let json = serde_json::to_string_pretty(&self.meta)?;
        write_atomic(&sidecar_path(path), |tmp| {
            std::fs::write(tmp, &json).map_err(|e| Error::io(tmp, e))
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::Corrupt {
            path: side.clone(),
            reason: e.to_string(),
        })?;
        let tensors = candle_core::safetensors::load(path, &Device::Cpu).map_err(|e| Error::Corrupt {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let (adam, weights): (HashMap<_, _>, HashMap<_, _>) =
            tensors.into_iter().partition(|(k, _)| k.starts_with("adam."));
        let model = WatermarkModel::new(meta.net.clone())?;
        model.params().assign(&weights)?;
        let optimizer = Adam::restore(meta.learning_rate, meta.step, &adam);
        Ok(Self {
            model,
            optimizer,
            meta,
        })
    }

    /// Loads only the weights into an existing model, which must have the
    /// same architecture.
    pub fn load_weights(model: &WatermarkModel, path: &Path) -> Result<()> {
        let tensors = candle_core::safetensors::load(path, &Device::Cpu).map_err(|e| Error::Corrupt {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let weights: HashMap<_, _> = tensors.into_iter().filter(|(k, _)| !k.starts_with("adam.")).collect();
        model.params().assign(&weights)
    }
}

/// Clips for training plus a held-out set for evaluation.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub train: Vec<VideoClip>,
    pub holdout: Vec<VideoClip>,
}

impl TrainingData {
    /// Samples `pool_size + eval_clips` clips and splits them.
    pub fn sample(cfg: &TrainingConfig, manifest: &ClipManifest) -> Result<Self> {
        let mut clips = sample_clips(manifest, cfg.pool_size + cfg.eval_clips, cfg.net.clip, cfg.seed)?;
        let holdout = clips.split_off(cfg.pool_size);
        Ok(Self { train: clips, holdout })
    }
}

/// Derives the generator for step `step`.
fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Identity-attack accuracy and PSNR on `clips` with messages drawn from `seed`.
pub fn evaluate_identity(model: &WatermarkModel, clips: &[VideoClip], seed: u64) -> Result<(f64, Option<f64>)> {
    if clips.is_empty() {
        return Err(Error::Empty("evaluation clips"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = model.config().message_length;
    let mut acc = Vec::new();
    let mut psnr = Vec::new();
    for chunk in clips.chunks(8) {
        let msgs: Vec<Message> = chunk.iter().map(|_| Message::random(m, &mut rng)).collect();
        let cover = stack_clips(chunk)?.to_dtype(model.dtype())?;
        let bits = messages_tensor(&msgs, model.dtype())?;
        let vw = model.encoder().forward(&cover, &bits)?;
        let logits = model.decoder().forward(&vw)?;
        acc.extend(per_clip_accuracy(&bits, &logits)?);
        psnr.extend(per_clip_psnr(&cover, &vw)?);
    }
    Ok((acc.iter().sum::<f64>() / acc.len() as f64, finite_mean(&psnr)))
}

fn per_clip_accuracy(bits: &Tensor, logits: &Tensor) -> Result<Vec<f64>> {
    let pred = logits.ge(BIT_THRESHOLD)?.to_dtype(bits.dtype())?;
    let right = pred.eq(bits)?.to_dtype(DType::F64)?.mean(1)?;
    Ok(right.to_vec1::<f64>()?.into_iter().map(|r| r * 100.0).collect())
}

fn per_clip_psnr(cover: &Tensor, vw: &Tensor) -> Result<Vec<f64>> {
    let d = (vw.to_dtype(DType::F64)? - cover.to_dtype(DType::F64)?)?;
    let mse = d.sqr()?.flatten_from(1)?.mean(1)?.to_vec1::<f64>()?;
    Ok(mse.into_iter().map(psnr_from_mse).collect())
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

struct CsvLog {
    writer: csv::Writer<std::fs::File>,
}

impl CsvLog {
    fn open(path: &Path) -> Result<Self> {
        let fresh = !path.exists() || std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if fresh {
            writer
                .write_record(["step", "distortion", "L_E", "L_D", "L_F", "total", "bit_acc", "psnr"])
                .map_err(|e| Error::io(path, e.into()))?;
        }
        Ok(Self { writer })
    }

    fn push(&mut self, r: &StepRecord) -> Result<()> {
        let psnr = r.psnr.map(|p| p.to_string()).unwrap_or_else(|| "inf".into());
        self.writer
            .write_record([
                r.step.to_string(),
                r.distortion.clone(),
                r.encoder_loss.to_string(),
                r.decoder_loss.to_string(),
                r.frame_loss.to_string(),
                r.total_loss.to_string(),
                r.bit_accuracy.to_string(),
                psnr,
            ])
            .and_then(|_| self.writer.flush().map_err(Into::into))
            .map_err(|e| Error::io(Path::new("training log"), e.into()))
    }
}

/// Runs a stage on clips sampled from `manifest`.
pub fn train_stage(cfg: &TrainingConfig, manifest: &ClipManifest, init: Option<Checkpoint>) -> Result<Checkpoint> {
    cfg.validate()?;
    let data = TrainingData::sample(cfg, manifest)?;
    train_stage_on(cfg, &data, init)
}

/// Runs a stage on in-memory clips.
///
/// `init` either resumes the same stage (weights, optimizer and step
/// restored) or, for stage two, supplies the stage-one model.
pub fn train_stage_on(cfg: &TrainingConfig, data: &TrainingData, init: Option<Checkpoint>) -> Result<Checkpoint> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Empty("training clips"));
    }
    if let Some(c) = data.train.iter().chain(&data.holdout).find(|c| c.dims() != cfg.net.clip) {
        return Err(Error::Shape(format!("training clip {} for a {} network", c.dims(), cfg.net.clip)));
    }
    let hash = cfg.hash();
    let mut ckpt = match (cfg.stage, init) {
        (Stage::WithNoise, None) => {
            return Err(Error::Precondition(
                "the with-noise stage must start from a noise-free checkpoint".into(),
            ))
        }
        (_, Some(c)) if !same_architecture(&c.meta.net, &cfg.net) => {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint network {:?} does not match configured {:?}",
                c.meta.net, cfg.net
            )))
        }
        (stage, Some(c)) if c.meta.stage == stage => {
            if c.meta.config_hash != hash {
                log::warn!("resuming with a configuration that differs from the checkpoint's");
            }
            let mut c = c;
            c.optimizer.learning_rate = cfg.learning_rate;
            c.meta.learning_rate = cfg.learning_rate;
            c.meta.config_hash = hash.clone();
            c
        }
        (Stage::NoiseFree, Some(_)) => {
            return Err(Error::Precondition("cannot resume noise-free training from a with-noise checkpoint".into()))
        }
        (Stage::WithNoise, Some(c)) => Checkpoint {
            optimizer: Adam::new(cfg.learning_rate),
            meta: CheckpointMeta {
                net: cfg.net.clone(),
                stage: Stage::WithNoise,
                step: 0,
                learning_rate: cfg.learning_rate,
                config_hash: hash.clone(),
                history: Vec::new(),
                evals: Vec::new(),
            },
            model: {
                let mut model = c.model;
                model.encoder_mut().set_strength(cfg.net.strength)?;
                model
            },
        },
        (Stage::NoiseFree, None) => Checkpoint {
            model: WatermarkModel::new(cfg.net.clone())?,
            optimizer: Adam::new(cfg.learning_rate),
            meta: CheckpointMeta {
                net: cfg.net.clone(),
                stage: Stage::NoiseFree,
                step: 0,
                learning_rate: cfg.learning_rate,
                config_hash: hash.clone(),
                history: Vec::new(),
                evals: Vec::new(),
            },
        },
    };

    let weights = cfg.weights();
    let templates = cfg.distortions();
    let m = cfg.net.message_length;
    let dtype = ckpt.model.dtype();
    let mut log = cfg.log.as_deref().map(CsvLog::open).transpose()?;
    let eval_seed = cfg.seed ^ 0x5eed_e7a1;

    while ckpt.meta.step < cfg.steps {
        if cfg.stage == Stage::NoiseFree && stop_reached(&ckpt.meta.evals, cfg) {
            log::info!("held-out accuracy target reached at step {}", ckpt.meta.step);
            break;
        }
        let step = ckpt.meta.step;
        let mut rng = step_rng(cfg.seed, step);
        let picks: Vec<VideoClip> = (0..cfg.batch_size)
            .map(|_| data.train[rng.gen_range(0..data.train.len())].clone())
            .collect();
        let msgs: Vec<Message> = (0..cfg.batch_size).map(|_| Message::random(m, &mut rng)).collect();
        let spec = distortion::sample_with(&templates, &mut rng)?;
        let attack_seed: u64 = rng.gen();

        let cover = stack_clips(&picks)?.to_dtype(dtype)?;
        let bits = messages_tensor(&msgs, dtype)?;
        let vw = ckpt.model.encoder().forward(&cover, &bits)?;
        let attacked = distortion::apply_for_training(&vw, &spec, attack_seed)?;
        let logits = ckpt.model.decoder().forward(&attacked)?;
        let terms = total_loss(&cover, &vw, &bits, &logits, &weights)?;

        let record = StepRecord {
            step,
            distortion: spec.label(),
            encoder_loss: scalar(&terms.encoder)?,
            decoder_loss: scalar(&terms.decoder)?,
            frame_loss: scalar(&terms.frame)?,
            total_loss: scalar(&terms.total)?,
            bit_accuracy: {
                let a = per_clip_accuracy(&bits, &logits)?;
                a.iter().sum::<f64>() / a.len() as f64
            },
            psnr: finite_mean(&per_clip_psnr(&cover, &vw)?),
        };
        if !record.total_loss.is_finite() {
            return Err(non_finite(cfg, &ckpt, &record, &spec));
        }
        let grads = terms.total.backward()?;
        ckpt.optimizer.step(ckpt.model.params(), &grads)?;
        ckpt.meta.step += 1;
        if let Some(l) = log.as_mut() {
            l.push(&record)?;
        }
        ckpt.meta.history.push(record);

        if ckpt.meta.step % cfg.eval_interval == 0 && !data.holdout.is_empty() {
            let (acc, psnr) = evaluate_identity(&ckpt.model, &data.holdout, eval_seed)?;
            log::info!(
                "step {}: held-out accuracy {acc:.2}%, PSNR {}",
                ckpt.meta.step,
                psnr.map(|p| format!("{p:.2} dB")).unwrap_or_else(|| "inf".into())
            );
            ckpt.meta.evals.push(EvalRecord {
                step: ckpt.meta.step,
                bit_accuracy: acc,
                psnr,
            });
        }
        if let (Some(path), Some(every)) = (&cfg.checkpoint, cfg.checkpoint_interval) {
            if every > 0 && ckpt.meta.step % every == 0 {
                ckpt.save(path)?;
            }
        }
    }
    if let Some(path) = &cfg.checkpoint {
        ckpt.save(path)?;
    }
    Ok(ckpt)
}

fn same_architecture(a: &NetConfig, b: &NetConfig) -> bool {
    a.message_length == b.message_length
        && a.clip == b.clip
        && a.block_kind == b.block_kind
        && a.channels == b.channels
        && a.depth == b.depth
        && a.squeeze_excitation == b.squeeze_excitation
}

fn stop_reached(evals: &[EvalRecord], cfg: &TrainingConfig) -> bool {
    let Some(target) = cfg.stop_accuracy else {
        return false;
    };
    evals.len() >= cfg.patience && evals[evals.len() - cfg.patience..].iter().all(|e| e.bit_accuracy >= target)
}

/// Builds the non-finite-loss error, dumping the step's state next to the
/// checkpoint when one is configured.
fn non_finite(cfg: &TrainingConfig, ckpt: &Checkpoint, record: &StepRecord, spec: &DistortionSpec) -> Error {
    let finite_params = ckpt.model.params().check_finite().is_ok();
    let mut msg = format!(
        "loss became non-finite at step {} under {} (L_E={}, L_D={}, L_F={}, parameters finite: {finite_params})",
        record.step,
        spec.label(),
        record.encoder_loss,
        record.decoder_loss,
        record.frame_loss,
    );
    if let Some(path) = &cfg.checkpoint {
        let dump = path.with_extension("nonfinite.json");
        let body = serde_json::json!({
            "step": record.step,
            "distortion": spec,
            "record": record,
            "recent": ckpt.meta.history.iter().rev().take(20).collect::<Vec<_>>(),
            "parameters_finite": finite_params,
        });
        if std::fs::write(&dump, body.to_string()).is_ok() {
            msg.push_str(&format!("; diagnostics written to {}", dump.display()));
        }
    }
    Error::NonFinite(msg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::BlockKind;
    use crate::media::ClipDims;

    fn tiny_cfg(stage: Stage, steps: u64) -> TrainingConfig {
        let net = NetConfig {
            channels: 4,
            depth: 1,
            ..NetConfig::new(8, ClipDims::new(2, 16, 16), BlockKind::Depthwise2d)
        };
        TrainingConfig {
            batch_size: 2,
            learning_rate: 1e-3,
            eval_interval: 2,
            ..TrainingConfig::new(stage, net, steps)
        }
    }

    fn tiny_data() -> TrainingData {
        let dims = ClipDims::new(2, 16, 16);
        let clip = |s: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            VideoClip::from_vec((0..dims.elements()).map(|_| rng.gen_range(0.0..1.0)).collect(), dims).unwrap()
        };
        TrainingData {
            train: (0..4).map(clip).collect(),
            holdout: vec![clip(10)],
        }
    }

    #[test]
    fn noise_free_stage_rejects_attacks_and_frame_loss() {
        let mut cfg = tiny_cfg(Stage::NoiseFree, 1);
        cfg.weights = Some(LossWeights::new(1.0, 0.1, 0.05));
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg(Stage::NoiseFree, 1);
        cfg.distortions = Some(vec![DistortionTemplate::fixed(DistortionSpec::GaussianNoise { std: 0.1 })]);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn stage_two_requires_stage_one() {
        let cfg = tiny_cfg(Stage::WithNoise, 1);
        assert!(matches!(train_stage_on(&cfg, &tiny_data(), None), Err(Error::Precondition(_))));
    }

    #[test]
    fn config_json_defaults() {
        let cfg: TrainingConfig = serde_json::from_str(
            r#"{"stage":"noise_free","steps":10,
                "net":{"message_length":16,"clip":{"frames":8,"height":64,"width":64},"block_kind":"depthwise2d"}}"#,
        )
        .unwrap();
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.learning_rate, 1e-5);
        assert_eq!(cfg.weights(), LossWeights::NOISE_FREE);
        cfg.validate().unwrap();
    }

    #[test]
    fn stop_rule_needs_consecutive_hits() {
        let cfg = tiny_cfg(Stage::NoiseFree, 1);
        let ev = |a| EvalRecord {
            step: 0,
            bit_accuracy: a,
            psnr: None,
        };
        let mut evals: Vec<_> = [100.0, 100.0, 90.0, 100.0, 100.0, 100.0, 100.0].map(ev).to_vec();
        assert!(!stop_reached(&evals, &cfg));
        evals.push(ev(99.5));
        assert!(stop_reached(&evals, &cfg));
    }

    #[test]
    fn short_run_is_deterministic() {
        let cfg = tiny_cfg(Stage::NoiseFree, 3);
        let a = train_stage_on(&cfg, &tiny_data(), None).unwrap();
        let b = train_stage_on(&cfg, &tiny_data(), None).unwrap();
        assert_eq!(a.meta.history, b.meta.history);
        assert_eq!(a.meta.step, 3);
    }
}
