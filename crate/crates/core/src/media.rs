//! Video clips, the frame-into-channel fold, and clip loading.
//!
//! A clip is an `L×3×H×W` tensor of `f32` pixels in `[0, 1]`. Folding
//! interleaves frames frame-major: channel `3·i + c` of the pseudo-image is
//! colour channel `c` of frame `i`, which makes the fold a pure reshape of
//! the contiguous clip tensor.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{self, CropBox, VideoCodec};
use crate::error::{Error, Result};

pub const DEFAULT_FRAME_RATE: f64 = 30.0;

/// Spatial extents must divide by this (three 2× resampling stages).
pub const SPATIAL_MULTIPLE: usize = 8;

/// Temporal and spatial extent of a clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipDims {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl ClipDims {
    pub const fn new(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Shape("a clip needs at least one frame".into()));
        }
        if self.height == 0
            || self.width == 0
            || self.height % SPATIAL_MULTIPLE != 0
            || self.width % SPATIAL_MULTIPLE != 0
        {
            return Err(Error::Shape(format!(
                "frame size {}x{} must be a positive multiple of {SPATIAL_MULTIPLE}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn elements(&self) -> usize {
        self.frames * 3 * self.height * self.width
    }
}

impl std::fmt::Display for ClipDims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.frames, self.height, self.width)
    }
}

#[derive(Debug, Clone)]
pub struct VideoClip {
    pixels: Tensor,
    frame_rate: f64,
}

impl VideoClip {
    /// Wraps an `L×3×H×W` tensor after checking shape and pixel range.
    pub fn new(pixels: Tensor, frame_rate: f64) -> Result<Self> {
        let pixels = pixels.to_dtype(DType::F32)?.contiguous()?;
        let dims = clip_dims_of(&pixels)?;
        dims.validate()?;
        let values = pixels.flatten_all()?.to_vec1::<f32>()?;
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::OutOfRange(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { pixels, frame_rate })
    }

    /// For tensors produced by operations that already guarantee the range.
    pub(crate) fn from_trusted(pixels: Tensor, frame_rate: f64) -> Result<Self> {
        let pixels = pixels.to_dtype(DType::F32)?.contiguous()?;
        clip_dims_of(&pixels)?.validate()?;
        Ok(Self { pixels, frame_rate })
    }

    pub fn from_vec(values: Vec<f32>, dims: ClipDims) -> Result<Self> {
        dims.validate()?;
        if values.len() != dims.elements() {
            return Err(Error::Shape(format!(
                "{} values for a {dims} clip",
                values.len()
            )));
        }
        let t = Tensor::from_vec(values, (dims.frames, 3, dims.height, dims.width), &Device::Cpu)?;
        Self::new(t, DEFAULT_FRAME_RATE)
    }

    /// Builds a clip from packed RGB24 frames (`L×H×W×3` bytes).
    pub fn from_rgb24(bytes: &[u8], dims: ClipDims, frame_rate: f64) -> Result<Self> {
        dims.validate()?;
        if bytes.len() != dims.elements() {
            return Err(Error::Shape(format!(
                "{} bytes for a {dims} RGB clip",
                bytes.len()
            )));
        }
        let (h, w) = (dims.height, dims.width);
        let mut planar = vec![0f32; bytes.len()];
        for (f, frame) in bytes.chunks_exact(h * w * 3).enumerate() {
            for (i, px) in frame.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    planar[(f * 3 + c) * h * w + i] = codec::from_u8(px[c]);
                }
            }
        }
        let t = Tensor::from_vec(planar, (dims.frames, 3, h, w), &Device::Cpu)?;
        Ok(Self {
            pixels: t,
            frame_rate,
        })
    }

    /// Packed RGB24 bytes, `round(x·255)` clamped.
    pub fn to_rgb24(&self) -> Result<Vec<u8>> {
        let d = self.dims();
        let (h, w) = (d.height, d.width);
        let planar = self.to_vec()?;
        let mut out = vec![0u8; planar.len()];
        for f in 0..d.frames {
            for c in 0..3 {
                let plane = &planar[(f * 3 + c) * h * w..(f * 3 + c + 1) * h * w];
                for (i, &v) in plane.iter().enumerate() {
                    out[(f * h * w + i) * 3 + c] = codec::to_u8(v);
                }
            }
        }
        Ok(out)
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn into_pixels(self) -> Tensor {
        self.pixels
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn dims(&self) -> ClipDims {
        let (l, _, h, w) = self.pixels.dims4().expect("validated on construction");
        ClipDims::new(l, h, w)
    }

    pub fn to_vec(&self) -> Result<Vec<f32>> {
        Ok(self.pixels.flatten_all()?.to_vec1::<f32>()?)
    }

    /// Frame `i` as a `3×H×W` tensor.
    pub fn frame(&self, i: usize) -> Result<Tensor> {
        Ok(self.pixels.get(i)?)
    }
}

impl PartialEq for VideoClip {
    fn eq(&self, other: &Self) -> bool {
        self.dims() == other.dims()
            && matches!((self.to_vec(), other.to_vec()), (Ok(a), Ok(b)) if a == b)
    }
}

fn clip_dims_of(t: &Tensor) -> Result<ClipDims> {
    match *t.dims() {
        [l, 3, h, w] => Ok(ClipDims::new(l, h, w)),
        ref d => Err(Error::Shape(format!("expected an Lx3xHxW clip, got {d:?}"))),
    }
}

/// A clip with its frames folded into the channel axis: `(3·L)×H×W`.
#[derive(Debug, Clone)]
pub struct PseudoImage {
    pixels: Tensor,
    frame_count: usize,
}

impl PseudoImage {
    pub fn from_tensor(pixels: Tensor) -> Result<Self> {
        let (c, _, _) = pixels
            .dims3()
            .map_err(|_| Error::MalformedInput(format!("expected CxHxW, got {:?}", pixels.dims())))?;
        if c == 0 || c % 3 != 0 {
            return Err(Error::MalformedInput(format!(
                "{c} channels is not a multiple of 3"
            )));
        }
        Ok(Self {
            pixels,
            frame_count: c / 3,
        })
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }
}

pub fn fold_video(clip: &VideoClip) -> PseudoImage {
    let d = clip.dims();
    let pixels = clip
        .pixels
        .reshape((3 * d.frames, d.height, d.width))
        .expect("contiguous clip reshapes");
    PseudoImage {
        pixels,
        frame_count: d.frames,
    }
}

pub fn unfold_video(img: &PseudoImage) -> Result<VideoClip> {
    let (c, h, w) = img.pixels.dims3()?;
    if c != 3 * img.frame_count {
        return Err(Error::MalformedInput(format!(
            "{c} channels for {} frames",
            img.frame_count
        )));
    }
    let pixels = img.pixels.contiguous()?.reshape((img.frame_count, 3, h, w))?;
    VideoClip::from_trusted(pixels, DEFAULT_FRAME_RATE)
}

/// `(B, L, 3, H, W) → (B, 3L, H, W)`.
pub fn fold_batch(t: &Tensor) -> Result<Tensor> {
    let (b, l, c, h, w) = t.dims5()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected RGB clips, got {c} channels")));
    }
    Ok(t.contiguous()?.reshape((b, 3 * l, h, w))?)
}

/// `(B, 3L, H, W) → (B, L, 3, H, W)`.
pub fn unfold_batch(t: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = t.dims4()?;
    if c % 3 != 0 {
        return Err(Error::MalformedInput(format!(
            "{c} channels is not a multiple of 3"
        )));
    }
    Ok(t.contiguous()?.reshape((b, c / 3, 3, h, w))?)
}

/// Stacks equally-shaped clips into a `(B, L, 3, H, W)` batch.
pub fn stack_clips(clips: &[VideoClip]) -> Result<Tensor> {
    let first = clips.first().ok_or(Error::Empty("clip batch"))?.dims();
    if let Some(c) = clips.iter().find(|c| c.dims() != first) {
        return Err(Error::Shape(format!(
            "mixed clip shapes {first} and {}",
            c.dims()
        )));
    }
    let ts: Vec<&Tensor> = clips.iter().map(|c| &c.pixels).collect();
    Ok(Tensor::stack(&ts, 0)?)
}

/// Splits a `(B, L, 3, H, W)` batch back into clips.
pub fn unstack_clips(batch: &Tensor) -> Result<Vec<VideoClip>> {
    let b = batch.dims5()?.0;
    (0..b)
        .map(|i| VideoClip::from_trusted(batch.get(i)?, DEFAULT_FRAME_RATE))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub n_frames: usize,
    pub width: usize,
    pub height: usize,
}

/// Source videos for clip sampling. Serialized as a bare JSON list of
/// entries; relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClipManifest {
    pub entries: Vec<ManifestEntry>,
}

impl ClipManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries: Vec<ManifestEntry> = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for e in &mut entries {
            if e.path.is_relative() {
                e.path = base.join(&e.path);
            }
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.entries)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Probes each video with the codec tool.
    pub fn from_videos<P: AsRef<Path>>(paths: &[P]) -> Result<Self> {
        let ff = codec::ffmpeg()?;
        let entries = paths
            .iter()
            .map(|p| {
                let info = ff.probe(p.as_ref())?;
                Ok(ManifestEntry {
                    path: p.as_ref().to_path_buf(),
                    n_frames: info.n_frames,
                    width: info.width,
                    height: info.height,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Loads `frame_count` frames from `start_frame`, cropped to `crop` (whole
/// frame when `None`), scaled to `[0, 1]`.
pub fn load_clip(
    path: &Path,
    start_frame: usize,
    frame_count: usize,
    crop: Option<CropBox>,
) -> Result<VideoClip> {
    let ff = codec::ffmpeg()?;
    let info = ff.probe(path)?;
    load_with_info(path, (info.width, info.height, info.n_frames), info.frame_rate, start_frame, frame_count, crop)
}

fn load_with_info(
    path: &Path,
    (width, height, n_frames): (usize, usize, usize),
    frame_rate: f64,
    start_frame: usize,
    frame_count: usize,
    crop: Option<CropBox>,
) -> Result<VideoClip> {
    if frame_count == 0 || start_frame + frame_count > n_frames {
        return Err(Error::OutOfRange(format!(
            "frames {start_frame}..{} of a {n_frames}-frame video",
            start_frame + frame_count
        )));
    }
    if let Some(c) = crop {
        if c.width == 0 || c.height == 0 || c.x + c.width > width || c.y + c.height > height {
            return Err(Error::OutOfRange(format!(
                "crop {}x{}+{}+{} outside {width}x{height}",
                c.width, c.height, c.x, c.y
            )));
        }
    }
    let (w, h) = crop.map_or((width, height), |c| (c.width, c.height));
    let bytes = codec::ffmpeg()?.decode_rgb24(path, (width, height), start_frame, Some(frame_count), crop)?;
    let bytes = &bytes[..frame_count * w * h * 3];
    VideoClip::from_rgb24(bytes, ClipDims::new(frame_count, h, w), frame_rate)
}

/// Draws `count` clips of shape `dims`: a uniformly chosen video, temporal
/// offset and crop position per clip, all from one seeded stream.
pub fn sample_clips(
    manifest: &ClipManifest,
    count: usize,
    dims: ClipDims,
    seed: u64,
) -> Result<Vec<VideoClip>> {
    if manifest.is_empty() {
        return Err(Error::Empty("clip manifest"));
    }
    dims.validate()?;
    if let Some(e) = manifest.entries.iter().find(|e| {
        e.n_frames < dims.frames || e.width < dims.width || e.height < dims.height
    }) {
        return Err(Error::OutOfRange(format!(
            "{} ({}x{}, {} frames) is smaller than the requested {dims} clips",
            e.path.display(),
            e.width,
            e.height,
            e.n_frames
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<_> = (0..count)
        .map(|_| {
            let e = &manifest.entries[rng.gen_range(0..manifest.entries.len())];
            let start = rng.gen_range(0..=e.n_frames - dims.frames);
            let crop = CropBox {
                x: rng.gen_range(0..=e.width - dims.width),
                y: rng.gen_range(0..=e.height - dims.height),
                width: dims.width,
                height: dims.height,
            };
            (e, start, crop)
        })
        .collect();
    picks
        .into_iter()
        .map(|(e, start, crop)| {
            load_with_info(
                &e.path,
                (e.width, e.height, e.n_frames),
                DEFAULT_FRAME_RATE,
                start,
                dims.frames,
                Some(crop),
            )
        })
        .collect()
}

/// Reads every frame of a video.
pub fn read_video(path: &Path) -> Result<VideoClip> {
    let ff = codec::ffmpeg()?;
    let info = ff.probe(path)?;
    let bytes = ff.decode_rgb24(path, (info.width, info.height), 0, None, None)?;
    let frames = bytes.len() / (info.width * info.height * 3);
    VideoClip::from_rgb24(&bytes, ClipDims::new(frames, info.height, info.width), info.frame_rate)
}

/// Writes a clip losslessly (FFV1).
pub fn write_video(clip: &VideoClip, path: &Path) -> Result<()> {
    write_video_with(clip, path, VideoCodec::Ffv1)
}

pub fn write_video_with(clip: &VideoClip, path: &Path, codec: VideoCodec) -> Result<()> {
    let d = clip.dims();
    codec::ffmpeg()?.encode_rgb24(&clip.to_rgb24()?, (d.width, d.height), clip.frame_rate(), codec, path)
}
