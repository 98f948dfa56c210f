//! Encoder and decoder networks.
//!
//! Encoder: cover processor (a stack of blocks) in parallel with a message
//! processor (linear projection of the bits onto an `H/8 × W/8` grid, then
//! three 2× transposed-convolution stages), concatenated on channels, fed to
//! a watermark generator and projected back to pixel space. The residual is
//! added to the cover with strength α. Decoder: three stride-2 blocks,
//! global average pooling and a linear map to `m` logits.
//!
//! 2D block kinds see the folded `(B, 3L, H, W)` clip; temporal kinds see
//! `(B, L, C, H, W)` and receive the message grid replicated over frames.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{layer_norm, BlockKind, ConvBlock, ConvBlockSpec};
use crate::error::{Error, Result};
use crate::kernels::conv2d;
use crate::media::{fold_batch, unfold_batch, ClipDims, VideoClip};
use crate::params::ParamStore;

/// Message bits mapped to ±1 before projection.
const BIT_SCALE: f64 = 2.0;

/// Gain of the residual projection at initialization, relative to fan-in scaling.
pub const PROJECTION_INIT_GAIN: f64 = 0.05;

/// Logit threshold separating 0 from 1.
pub const BIT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Message {
    bits: Vec<u8>,
}

impl Message {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::MalformedInput(format!("message bit {b} is not binary")));
        }
        Ok(Self { bits })
    }

    pub fn zeros(m: usize) -> Self {
        Self { bits: vec![0; m] }
    }

    pub fn random(m: usize, rng: &mut impl Rng) -> Self {
        Self {
            bits: (0..m).map(|_| rng.gen_range(0..=1u8)).collect(),
        }
    }

    /// Parses `m/4` hex digits, most significant bit first.
    pub fn from_hex(hex: &str, m: usize) -> Result<Self> {
        let hex = hex.trim().trim_start_matches("0x");
        if m % 4 != 0 || hex.len() != m / 4 {
            return Err(Error::MalformedInput(format!(
                "expected {} hex digits for a {m}-bit message, got {:?}",
                m / 4,
                hex
            )));
        }
        let mut bits = Vec::with_capacity(m);
        for ch in hex.chars() {
            let v = ch
                .to_digit(16)
                .ok_or_else(|| Error::MalformedInput(format!("{ch:?} is not a hex digit")))?;
            bits.extend((0..4).rev().map(|i| ((v >> i) & 1) as u8));
        }
        Ok(Self { bits })
    }

    /// Hex form, or `None` when the length is not a multiple of 4.
    pub fn to_hex(&self) -> Option<String> {
        if self.bits.len() % 4 != 0 {
            return None;
        }
        Some(
            self.bits
                .chunks(4)
                .map(|c| {
                    let v = c.iter().fold(0u32, |acc, &b| (acc << 1) | b as u32);
                    char::from_digit(v, 16).expect("nibble")
                })
                .collect(),
        )
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn complement(&self) -> Self {
        Self {
            bits: self.bits.iter().map(|b| 1 - b).collect(),
        }
    }
}

impl std::fmt::Display for Message {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for b in &self.bits {
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

/// Stacks messages into a `(B, m)` tensor of 0/1 values.
pub fn messages_tensor(msgs: &[Message], dtype: DType) -> Result<Tensor> {
    let m = msgs.first().ok_or(Error::Empty("message batch"))?.len();
    if msgs.iter().any(|x| x.len() != m) {
        return Err(Error::Shape("messages of different lengths".into()));
    }
    let flat: Vec<f32> = msgs.iter().flat_map(|x| x.bits.iter().map(|&b| b as f32)).collect();
    Ok(Tensor::from_vec(flat, (msgs.len(), m), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Raw decoder output for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageLogits(pub Vec<f64>);

impl MessageLogits {
    pub fn threshold(&self) -> Message {
        threshold_message(self)
    }

    /// Mean |logit − 0.5|.
    pub fn confidence(&self) -> f64 {
        if self.0.is_empty() {
            return 0.0;
        }
        self.0.iter().map(|l| (l - BIT_THRESHOLD).abs()).sum::<f64>() / self.0.len() as f64
    }
}

pub fn threshold_message(logits: &MessageLogits) -> Message {
    Message {
        bits: logits.0.iter().map(|&l| u8::from(l >= BIT_THRESHOLD)).collect(),
    }
}

fn default_channels() -> usize {
    64
}

fn default_depth() -> usize {
    4
}

fn default_strength() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub message_length: usize,
    pub clip: ClipDims,
    pub block_kind: BlockKind,
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// Blocks in the cover processor and in the watermark generator.
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_strength")]
    pub strength: f64,
    #[serde(default)]
    pub squeeze_excitation: bool,
    #[serde(default)]
    pub seed: u64,
}

impl NetConfig {
    pub fn new(message_length: usize, clip: ClipDims, block_kind: BlockKind) -> Self {
        Self {
            message_length,
            clip,
            block_kind,
            channels: default_channels(),
            depth: default_depth(),
            strength: default_strength(),
            squeeze_excitation: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.clip.validate()?;
        if self.message_length == 0 || self.channels == 0 || self.depth == 0 {
            return Err(Error::InvalidParam(
                "message length, channel width and depth must be positive".into(),
            ));
        }
        if !(self.strength >= 0.0 && self.strength.is_finite()) {
            return Err(Error::InvalidParam(format!("strength {} must be finite and ≥ 0", self.strength)));
        }
        Ok(())
    }

    /// Channels seen by the first block: 3L when folded, 3 per frame otherwise.
    fn image_channels(&self) -> usize {
        if self.block_kind.is_temporal() {
            3
        } else {
            3 * self.clip.frames
        }
    }
}

fn check_clip_batch(x: &Tensor, clip: ClipDims, what: &str) -> Result<usize> {
    match *x.dims() {
        [b, l, 3, h, w] if ClipDims::new(l, h, w) == clip => Ok(b),
        ref d => Err(Error::Shape(format!(
            "{what} expects clips of shape {}x3x{}x{}, got {d:?}",
            clip.frames, clip.height, clip.width
        ))),
    }
}

/// `x (B, in) · w (in, out) + b`.
fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(x.matmul(w)?.broadcast_add(b)?)
}

fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Channel gating from globally pooled features.
#[derive(Debug, Clone)]
struct SqueezeExcite {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl SqueezeExcite {
    fn new(store: &mut ParamStore, prefix: &str, c: usize) -> Result<Self> {
        let r = (c / 4).max(1);
        Ok(Self {
            w1: store.he_normal(&format!("{prefix}.fc1.weight"), &[c, r], c)?,
            b1: store.zeros(&format!("{prefix}.fc1.bias"), &[r])?,
            w2: store.normal(&format!("{prefix}.fc2.weight"), &[r, c], (1.0 / r as f64).sqrt())?,
            b2: store.zeros(&format!("{prefix}.fc2.bias"), &[c])?,
        })
    }

    fn forward(&self, x: &Tensor, temporal: bool) -> Result<Tensor> {
        let pooled = if temporal {
            x.mean(4)?.mean(3)?.mean(1)?
        } else {
            x.mean(3)?.mean(2)?
        };
        let gate = sigmoid(&linear(&linear(&pooled, &self.w1, &self.b1)?.relu()?, &self.w2, &self.b2)?)?;
        let (b, c) = gate.dims2()?;
        let gate = if temporal {
            gate.reshape((b, 1, c, 1, 1))?
        } else {
            gate.reshape((b, c, 1, 1))?
        };
        Ok(x.broadcast_mul(&gate)?)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    block: ConvBlock,
    se: Option<SqueezeExcite>,
}

impl Stage {
    fn new(spec: ConvBlockSpec, store: &mut ParamStore, prefix: &str, se: bool) -> Result<Self> {
        let c = spec.out_channels;
        Ok(Self {
            block: ConvBlock::new(spec, store, prefix)?,
            se: if se {
                Some(SqueezeExcite::new(store, &format!("{prefix}.se"), c)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.block.forward(x)?;
        match &self.se {
            Some(se) => se.forward(&y, self.block.spec().kind.is_temporal()),
            None => Ok(y),
        }
    }
}

fn run(stages: &[Stage], x: &Tensor) -> Result<Tensor> {
    stages.iter().try_fold(x.clone(), |h, s| s.forward(&h))
}

/// 2× transposed convolution with a 2×2 kernel and stride 2, written as a
/// per-pixel linear map: `out[c, 2y+a, 2x+b] = Σ_ci x[ci, y, x]·w[ci, c, a, b]`.
#[derive(Debug, Clone)]
struct Upsample {
    weight: Tensor,
    bias: Tensor,
}

impl Upsample {
    fn new(store: &mut ParamStore, prefix: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            weight: store.he_normal(&format!("{prefix}.weight"), &[cin, cout * 4], cin)?,
            bias: store.zeros(&format!("{prefix}.bias"), &[cout])?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, cin, h, w) = x.dims4()?;
        let cout = self.bias.dim(0)?;
        let rows = x.permute((0, 2, 3, 1))?.reshape((b * h * w, cin))?;
        let y = rows.matmul(&self.weight)?.reshape((b, h, w, cout, 2, 2))?;
        let y = y.permute((0, 3, 1, 4, 2, 5))?.reshape((b, cout, 2 * h, 2 * w))?;
        let y = y.broadcast_add(&self.bias.reshape((1, cout, 1, 1))?)?;
        Ok(layer_norm(&y)?.relu()?)
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    config: NetConfig,
    cover: Vec<Stage>,
    msg_weight: Tensor,
    msg_bias: Tensor,
    upsample: Vec<Upsample>,
    generator: Vec<Stage>,
    proj_weight: Tensor,
    proj_bias: Tensor,
}

impl Encoder {
    fn new(config: &NetConfig, store: &mut ParamStore) -> Result<Self> {
        let (kind, c, se) = (config.block_kind, config.channels, config.squeeze_excitation);
        let cin = config.image_channels();
        let cover = (0..config.depth)
            .map(|i| {
                let spec = ConvBlockSpec::new(kind, if i == 0 { cin } else { c }, c);
                Stage::new(spec, store, &format!("encoder.cover.{i}"), se)
            })
            .collect::<Result<_>>()?;
        let grid = (config.clip.height / 8) * (config.clip.width / 8);
        let m = config.message_length;
        let msg_weight = store.normal("encoder.message.weight", &[m, c * grid], (1.0 / m as f64).sqrt())?;
        let msg_bias = store.zeros("encoder.message.bias", &[c * grid])?;
        let upsample = (0..3)
            .map(|i| Upsample::new(store, &format!("encoder.message.up.{i}"), c, c))
            .collect::<Result<_>>()?;
        let generator = (0..config.depth)
            .map(|i| {
                let spec = ConvBlockSpec::new(kind, if i == 0 { 2 * c } else { c }, c);
                Stage::new(spec, store, &format!("encoder.generator.{i}"), se)
            })
            .collect::<Result<_>>()?;
        let proj_weight = store.normal(
            "encoder.project.weight",
            &[cin, c, 1, 1],
            PROJECTION_INIT_GAIN * (1.0 / c as f64).sqrt(),
        )?;
        let proj_bias = store.zeros("encoder.project.bias", &[cin])?;
        Ok(Self {
            config: config.clone(),
            cover,
            msg_weight,
            msg_bias,
            upsample,
            generator,
            proj_weight,
            proj_bias,
        })
    }

    pub fn strength(&self) -> f64 {
        self.config.strength
    }

    pub fn set_strength(&mut self, alpha: f64) -> Result<()> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidParam(format!("strength {alpha} must be finite and ≥ 0")));
        }
        self.config.strength = alpha;
        Ok(())
    }

    /// Message processor: `(B, m)` bits → `(B, C, H, W)` feature grid.
    pub fn expand_bits(&self, bits: &Tensor) -> Result<Tensor> {
        let (b, m) = bits.dims2()?;
        if m != self.config.message_length {
            return Err(Error::Shape(format!(
                "message of {m} bits for a {}-bit network",
                self.config.message_length
            )));
        }
        let (c, h8, w8) = (self.config.channels, self.config.clip.height / 8, self.config.clip.width / 8);
        let signed = ((bits * BIT_SCALE)? - 1.0)?;
        let grid = linear(&signed, &self.msg_weight, &self.msg_bias)?.reshape((b, c, h8, w8))?;
        self.upsample.iter().try_fold(grid, |g, up| up.forward(&g))
    }

    /// Expands one message to the latent shape `target` (`C×H×W`).
    pub fn expand_message(&self, msg: &Message, target: &[usize]) -> Result<Tensor> {
        let expected = [self.config.channels, self.config.clip.height, self.config.clip.width];
        if target != expected {
            return Err(Error::Shape(format!(
                "latent shape {target:?} does not match the network's {expected:?}"
            )));
        }
        let bits = messages_tensor(std::slice::from_ref(msg), self.proj_weight.dtype())?;
        Ok(self.expand_bits(&bits)?.squeeze(0)?)
    }

    /// Un-scaled watermark residual, `(B, L, 3, H, W)`.
    pub fn residual(&self, cover: &Tensor, bits: &Tensor) -> Result<Tensor> {
        let b = check_clip_batch(cover, self.config.clip, "encoder")?;
        let temporal = self.config.block_kind.is_temporal();
        let l = self.config.clip.frames;
        let msg = self.expand_bits(bits)?;
        if msg.dim(0)? != b {
            return Err(Error::Shape(format!("{} messages for {b} clips", msg.dim(0)?)));
        }
        if temporal {
            let feats = run(&self.cover, cover)?;
            let (_, _, c, h, w) = feats.dims5()?;
            let msg = msg.unsqueeze(1)?.broadcast_as((b, l, c, h, w))?;
            let joined = Tensor::cat(&[&feats, &msg], 2)?;
            let g = run(&self.generator, &joined)?;
            let g = g.reshape((b * l, c, h, w))?;
            let out = conv2d(&g, &self.proj_weight, 1, (0, 0), 1)?
                .broadcast_add(&self.proj_bias.reshape((1, 3, 1, 1))?)?;
            Ok(out.reshape((b, l, 3, h, w))?)
        } else {
            let feats = run(&self.cover, &fold_batch(cover)?)?;
            let joined = Tensor::cat(&[&feats, &msg], 1)?;
            let g = run(&self.generator, &joined)?;
            let cin = self.proj_bias.dim(0)?;
            let out = conv2d(&g, &self.proj_weight, 1, (0, 0), 1)?
                .broadcast_add(&self.proj_bias.reshape((1, cin, 1, 1))?)?;
            unfold_batch(&out)
        }
    }

    /// `clamp(V_c + α·residual, 0, 1)` for a batch.
    pub fn forward(&self, cover: &Tensor, bits: &Tensor) -> Result<Tensor> {
        let r = self.residual(cover, bits)?;
        Ok((cover + (r * self.config.strength)?)?.clamp(0.0, 1.0)?)
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    config: NetConfig,
    stages: Vec<Stage>,
    weight: Tensor,
    bias: Tensor,
}

impl Decoder {
    fn new(config: &NetConfig, store: &mut ParamStore) -> Result<Self> {
        let (kind, c, se) = (config.block_kind, config.channels, config.squeeze_excitation);
        let stages = (0..3)
            .map(|i| {
                let cin = if i == 0 { config.image_channels() } else { c };
                let spec = ConvBlockSpec::new(kind, cin, c).with_stride(2);
                Stage::new(spec, store, &format!("decoder.down.{i}"), se)
            })
            .collect::<Result<_>>()?;
        let m = config.message_length;
        Ok(Self {
            config: config.clone(),
            stages,
            weight: store.normal("decoder.linear.weight", &[c, m], (1.0 / c as f64).sqrt())?,
            bias: store.zeros("decoder.linear.bias", &[m])?,
        })
    }

    /// `(B, L, 3, H, W)` → `(B, m)` logits.
    pub fn forward(&self, attacked: &Tensor) -> Result<Tensor> {
        check_clip_batch(attacked, self.config.clip, "decoder")?;
        let pooled = if self.config.block_kind.is_temporal() {
            run(&self.stages, attacked)?.mean(4)?.mean(3)?.mean(1)?
        } else {
            run(&self.stages, &fold_batch(attacked)?)?.mean(3)?.mean(2)?
        };
        linear(&pooled, &self.weight, &self.bias)
    }
}

/// Encoder, decoder and their shared parameter store.
#[derive(Debug)]
pub struct WatermarkModel {
    config: NetConfig,
    params: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
}

impl WatermarkModel {
    pub fn new(config: NetConfig) -> Result<Self> {
        Self::with_dtype(config, DType::F32)
    }

    pub fn with_dtype(config: NetConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(config.seed, dtype);
        let encoder = Encoder::new(&config, &mut params)?;
        let decoder = Decoder::new(&config, &mut params)?;
        Ok(Self {
            config,
            params,
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn encoder_mut(&mut self) -> &mut Encoder {
        &mut self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn encoder_param_count(&self) -> usize {
        self.part_count("encoder.")
    }

    pub fn decoder_param_count(&self) -> usize {
        self.part_count("decoder.")
    }

    fn part_count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    fn clip_batch(&self, clip: &VideoClip) -> Result<Tensor> {
        Ok(clip.pixels().to_dtype(self.dtype())?.unsqueeze(0)?)
    }

    /// Embeds `msg` into one clip.
    pub fn encode(&self, cover: &VideoClip, msg: &Message) -> Result<VideoClip> {
        self.params.check_finite()?;
        if msg.len() != self.config.message_length {
            return Err(Error::Shape(format!(
                "{}-bit message for a {}-bit network",
                msg.len(),
                self.config.message_length
            )));
        }
        let bits = messages_tensor(std::slice::from_ref(msg), self.dtype())?;
        let out = self.encoder.forward(&self.clip_batch(cover)?, &bits)?;
        VideoClip::from_trusted(out.squeeze(0)?, cover.frame_rate())
    }

    pub fn decode(&self, attacked: &VideoClip) -> Result<MessageLogits> {
        let logits = self.decoder.forward(&self.clip_batch(attacked)?)?;
        Ok(MessageLogits(logits.squeeze(0)?.to_dtype(DType::F64)?.to_vec1()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny(kind: BlockKind) -> NetConfig {
        NetConfig {
            channels: 4,
            depth: 1,
            ..NetConfig::new(8, ClipDims::new(2, 16, 16), kind)
        }
    }

    #[test]
    fn hex_roundtrip_msb_first() {
        let m = Message::from_hex("a5", 8).unwrap();
        assert_eq!(m.bits(), &[1, 0, 1, 0, 0, 1, 0, 1]);
        assert_eq!(m.to_hex().unwrap(), "a5");
        assert!(Message::from_hex("a5", 12).is_err());
        assert!(Message::from_hex("zz", 8).is_err());
        assert!(Message::new(vec![0, 2]).is_err());
    }

    #[test]
    fn threshold_examples() {
        let m = threshold_message(&MessageLogits(vec![0.9, 0.1, 0.5]));
        assert_eq!(m.bits(), &[1, 0, 1]);
        let exact = MessageLogits(vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(exact.threshold().bits(), &[1, 0, 0, 1]);
        assert!((MessageLogits(vec![1.0, 0.0]).confidence() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn every_kind_builds_and_preserves_shape() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for kind in BlockKind::ALL {
            let model = WatermarkModel::new(tiny(kind)).unwrap();
            let clip = VideoClip::from_vec(vec![0.5; 2 * 3 * 16 * 16], ClipDims::new(2, 16, 16)).unwrap();
            let msg = Message::random(8, &mut rng);
            let wm = model.encode(&clip, &msg).unwrap();
            assert_eq!(wm.dims(), clip.dims());
            assert_eq!(model.decode(&wm).unwrap().0.len(), 8, "{kind}");
        }
    }

    #[test]
    fn squeeze_excitation_adds_parameters() {
        let plain = WatermarkModel::new(tiny(BlockKind::Depthwise2d)).unwrap();
        let se = WatermarkModel::new(NetConfig {
            squeeze_excitation: true,
            ..tiny(BlockKind::Depthwise2d)
        })
        .unwrap();
        assert!(se.params().num_params() > plain.params().num_params());
        let clip = VideoClip::from_vec(vec![0.25; 2 * 3 * 16 * 16], ClipDims::new(2, 16, 16)).unwrap();
        assert_eq!(se.decode(&clip).unwrap().0.len(), 8);
    }

    #[test]
    fn wrong_message_length_rejected() {
        let model = WatermarkModel::new(tiny(BlockKind::Regular2d)).unwrap();
        let clip = VideoClip::from_vec(vec![0.5; 2 * 3 * 16 * 16], ClipDims::new(2, 16, 16)).unwrap();
        assert!(matches!(model.encode(&clip, &Message::zeros(4)), Err(Error::Shape(_))));
    }
}
