//! Subprocess wrapper around the external `ffmpeg` tool.
//!
//! Frames cross the process boundary as packed RGB24. The tool is located,
//! in order, from `ITOV_CODEC_PATH`, an `ffmpeg` on `PATH`, or the binary
//! bundled with the `imageio-ffmpeg` Python package.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::OnceLock;

use regex::Regex;

use crate::error::{Error, Result};

pub const CODEC_PATH_ENV: &str = "ITOV_CODEC_PATH";

/// H.264 settings pinned for reproducible roundtrips.
pub const H264_PRESET: &str = "medium";
pub const H264_GOP: u32 = 8;
pub const MAX_CRF: u8 = 51;

/// Scaler flags for every RGB/YUV conversion.
const SWS_FLAGS: &str = "accurate_rnd+full_chroma_int+full_chroma_inp+bitexact";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VideoCodec {
    /// Lossless FFV1 in planar RGB.
    Ffv1,
    H264 { crf: u8 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoInfo {
    pub width: usize,
    pub height: usize,
    pub n_frames: usize,
    pub frame_rate: f64,
}

/// Axis-aligned crop in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropBox {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone)]
pub struct Ffmpeg {
    exe: PathBuf,
}

static DISCOVERED: OnceLock<std::result::Result<Ffmpeg, String>> = OnceLock::new();

/// Process-wide codec tool, discovered once.
pub fn ffmpeg() -> Result<&'static Ffmpeg> {
    DISCOVERED
        .get_or_init(|| Ffmpeg::discover().map_err(|e| e.to_string()))
        .as_ref()
        .map_err(|e| Error::CodecUnavailable(e.clone()))
}

impl Ffmpeg {
    pub fn discover() -> Result<Self> {
        let mut tried = Vec::new();
        if let Some(p) = std::env::var_os(CODEC_PATH_ENV) {
            let p = PathBuf::from(p);
            return Self::at(&p);
        }
        for candidate in [PathBuf::from("ffmpeg"), imageio_ffmpeg_path().unwrap_or_default()] {
            if candidate.as_os_str().is_empty() {
                continue;
            }
            match Self::at(&candidate) {
                Ok(f) => return Ok(f),
                Err(e) => tried.push(e.to_string()),
            }
        }
        Err(Error::CodecUnavailable(format!(
            "set {CODEC_PATH_ENV} or install ffmpeg with libx264 ({})",
            tried.join("; ")
        )))
    }

    /// Uses the binary at `exe` after checking it runs and ships libx264.
    pub fn at(exe: &Path) -> Result<Self> {
        let out = Command::new(exe)
            .args(["-hide_banner", "-encoders"])
            .stdin(Stdio::null())
            .output()
            .map_err(|e| Error::CodecUnavailable(format!("{}: {e}", exe.display())))?;
        let listing = String::from_utf8_lossy(&out.stdout);
        if !out.status.success() || !listing.contains("libx264") || !listing.contains("ffv1") {
            return Err(Error::CodecUnavailable(format!(
                "{} lacks the libx264 or ffv1 encoder",
                exe.display()
            )));
        }
        Ok(Self {
            exe: exe.to_path_buf(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.exe
    }

    fn command(&self) -> Command {
        let mut cmd = Command::new(&self.exe);
        cmd.args(["-hide_banner", "-nostdin", "-nostats", "-loglevel", "error"]);
        cmd
    }

    pub fn probe(&self, path: &Path) -> Result<VideoInfo> {
        if !path.exists() {
            return Err(Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "no such video"),
            ));
        }
        let out = Command::new(&self.exe)
            .args(["-hide_banner", "-nostdin", "-i"])
            .arg(path)
            .args(["-map", "0:v:0", "-f", "null", "-"])
            .stdin(Stdio::null())
            .output()
            .map_err(|e| Error::io(&self.exe, e))?;
        let log = String::from_utf8_lossy(&out.stderr);
        if !out.status.success() {
            return Err(codec_failure(format!("probe {}", path.display()), &log));
        }
        static DIMS: OnceLock<Regex> = OnceLock::new();
        static FPS: OnceLock<Regex> = OnceLock::new();
        static FRAMES: OnceLock<Regex> = OnceLock::new();
        let dims = DIMS.get_or_init(|| Regex::new(r"Video: .*?(\d{1,5})x(\d{1,5})[ ,\]]").unwrap());
        let fps = FPS.get_or_init(|| Regex::new(r"(\d+(?:\.\d+)?) (?:fps|tbr)").unwrap());
        let frames = FRAMES.get_or_init(|| Regex::new(r"frame=\s*(\d+)").unwrap());
        let caps = dims
            .captures(&log)
            .ok_or_else(|| codec_failure(format!("no video stream in {}", path.display()), &log))?;
        let n_frames = frames
            .captures_iter(&log)
            .last()
            .and_then(|c| c[1].parse().ok())
            .unwrap_or(0);
        Ok(VideoInfo {
            width: caps[1].parse().unwrap_or(0),
            height: caps[2].parse().unwrap_or(0),
            n_frames,
            frame_rate: fps
                .captures(&log)
                .and_then(|c| c[1].parse().ok())
                .unwrap_or(30.0),
        })
    }

    /// Decodes `count` frames starting at `start` (all remaining when `None`),
    /// optionally cropped, as packed RGB24. Fewer frames than requested is an
    /// out-of-range error.
    pub fn decode_rgb24(
        &self,
        path: &Path,
        (frame_width, frame_height): (usize, usize),
        start: usize,
        count: Option<usize>,
        crop: Option<CropBox>,
    ) -> Result<Vec<u8>> {
        let mut filters = vec![match count {
            Some(n) => format!("trim=start_frame={start}:end_frame={}", start + n),
            None => format!("trim=start_frame={start}"),
        }];
        filters.push("setpts=PTS-STARTPTS".into());
        let (w, h) = match crop {
            Some(c) => {
                filters.push(format!("crop={}:{}:{}:{}", c.width, c.height, c.x, c.y));
                (c.width, c.height)
            }
            None => (frame_width, frame_height),
        };
        let out = self
            .command()
            .arg("-i")
            .arg(path)
            .args(["-map", "0:v:0", "-vf", &filters.join(","), "-fps_mode", "passthrough"])
            .args(["-sws_flags", SWS_FLAGS])
            .args(["-f", "rawvideo", "-pix_fmt", "rgb24", "-"])
            .stdin(Stdio::null())
            .output()
            .map_err(|e| Error::io(&self.exe, e))?;
        if !out.status.success() {
            let log = String::from_utf8_lossy(&out.stderr);
            return Err(codec_failure(format!("decode {}", path.display()), &log));
        }
        let frame_bytes = w * h * 3;
        let data = out.stdout;
        if frame_bytes == 0 || data.len() % frame_bytes != 0 {
            return Err(Error::Codec {
                context: format!("decode {}", path.display()),
                stderr: format!("{} bytes is not a whole number of {w}x{h} frames", data.len()),
            });
        }
        if let Some(n) = count {
            let got = data.len() / frame_bytes;
            if got < n {
                return Err(Error::OutOfRange(format!(
                    "requested frames {start}..{} but {} has only {} from frame {start}",
                    start + n,
                    path.display(),
                    got
                )));
            }
        }
        Ok(data)
    }

    /// Encodes packed RGB24 frames to `out`.
    pub fn encode_rgb24(
        &self,
        frames: &[u8],
        (width, height): (usize, usize),
        frame_rate: f64,
        codec: VideoCodec,
        out: &Path,
    ) -> Result<()> {
        if width == 0 || height == 0 || frames.is_empty() || frames.len() % (width * height * 3) != 0 {
            return Err(Error::Shape(format!(
                "{} bytes do not form {width}x{height} RGB frames",
                frames.len()
            )));
        }
        let mut cmd = self.command();
        cmd.args(["-y", "-f", "rawvideo", "-pix_fmt", "rgb24"])
            .args(["-s", &format!("{width}x{height}")])
            .args(["-r", &format!("{frame_rate}")])
            .args(["-i", "-"]);
        match codec {
            VideoCodec::Ffv1 => {
                cmd.args(["-c:v", "ffv1", "-pix_fmt", "gbrp"]);
            }
            VideoCodec::H264 { crf } => {
                if crf > MAX_CRF {
                    return Err(Error::InvalidParam(format!("crf {crf} outside [0, {MAX_CRF}]")));
                }
                let gop = H264_GOP.to_string();
                cmd.args(["-c:v", "libx264", "-preset", H264_PRESET])
                    .args(["-crf", &crf.to_string(), "-pix_fmt", "yuv420p"])
                    .args(["-sws_flags", SWS_FLAGS])
                    .args(["-g", &gop, "-keyint_min", &gop, "-sc_threshold", "0"])
                    .args(["-threads", "1", "-x264-params", "threads=1:lookahead_threads=1"]);
            }
        }
        cmd.arg(out)
            .stdin(Stdio::piped())
            .stdout(Stdio::null())
            .stderr(Stdio::piped());
        let mut child = cmd.spawn().map_err(|e| Error::io(&self.exe, e))?;
        let mut stdin = child.stdin.take().expect("stdin is piped");
        let written = std::thread::scope(|s| {
            let writer = s.spawn(move || stdin.write_all(frames));
            let output = child.wait_with_output();
            (writer.join().expect("writer thread panicked"), output)
        });
        let output = written.1.map_err(|e| Error::io(&self.exe, e))?;
        let log = String::from_utf8_lossy(&output.stderr);
        if !output.status.success() {
            return Err(codec_failure(format!("encode {}", out.display()), &log));
        }
        written.0.map_err(|e| Error::io(out, e))?;
        Ok(())
    }

    /// Encodes frames to H.264 at `crf` and decodes them back.
    pub fn h264_roundtrip(&self, frames: &[u8], dims: (usize, usize), crf: u8) -> Result<Vec<u8>> {
        let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let path = dir.path().join("roundtrip.mkv");
        self.encode_rgb24(frames, dims, 30.0, VideoCodec::H264 { crf }, &path)?;
        let out = self.decode_rgb24(&path, dims, 0, None, None)?;
        if out.len() != frames.len() {
            return Err(Error::Codec {
                context: "h264 roundtrip".into(),
                stderr: format!("frame count changed: {} -> {} bytes", frames.len(), out.len()),
            });
        }
        Ok(out)
    }
}

fn codec_failure(context: String, log: &str) -> Error {
    let tail: Vec<&str> = log.lines().rev().take(12).collect();
    Error::Codec {
        context,
        stderr: tail.into_iter().rev().collect::<Vec<_>>().join("\n"),
    }
}

fn imageio_ffmpeg_path() -> Option<PathBuf> {
    let out = Command::new("python3")
        .args(["-c", "import imageio_ffmpeg; print(imageio_ffmpeg.get_ffmpeg_exe())"])
        .stdin(Stdio::null())
        .stderr(Stdio::null())
        .output()
        .ok()?;
    let s = String::from_utf8(out.stdout).ok()?;
    let p = PathBuf::from(s.trim());
    p.is_file().then_some(p)
}

/// `round(x·255)` clamped to the 8-bit range.
pub fn to_u8(x: f32) -> u8 {
    (x * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn from_u8(v: u8) -> f32 {
    v as f32 / 255.0
}
