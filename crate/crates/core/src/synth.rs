//! Procedural test videos: drifting gradients, textured backgrounds and
//! moving soft-edged blobs under a slow camera pan. Used for fixtures and the
//! desk-scale training runs.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{self, VideoCodec};
use crate::error::{Error, Result};
use crate::media::{ClipManifest, ManifestEntry};

struct Wave {
    amp: [f32; 3],
    fx: f32,
    fy: f32,
    phase: f32,
    speed: f32,
}

struct Blob {
    color: [f32; 3],
    cx: f32,
    cy: f32,
    vx: f32,
    vy: f32,
    rx: f32,
    ry: f32,
}

/// Renders `n_frames` packed RGB24 frames.
pub fn render(width: usize, height: usize, n_frames: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.25..0.75));
    let tilt: [f32; 3] = std::array::from_fn(|_| rng.gen_range(-0.25..0.25));
    let waves: Vec<Wave> = (0..4)
        .map(|_| Wave {
            amp: std::array::from_fn(|_| rng.gen_range(-0.12..0.12)),
            fx: rng.gen_range(-6.0..6.0),
            fy: rng.gen_range(-6.0..6.0),
            phase: rng.gen_range(0.0..std::f32::consts::TAU),
            speed: rng.gen_range(-0.15..0.15),
        })
        .collect();
    let blobs: Vec<Blob> = (0..rng.gen_range(2..6))
        .map(|_| Blob {
            color: std::array::from_fn(|_| rng.gen_range(0.05..0.95)),
            cx: rng.gen_range(0.0..1.0),
            cy: rng.gen_range(0.0..1.0),
            vx: rng.gen_range(-0.02..0.02),
            vy: rng.gen_range(-0.02..0.02),
            rx: rng.gen_range(0.06..0.25),
            ry: rng.gen_range(0.06..0.25),
        })
        .collect();
    // Texture tile, bilinearly sampled so the pan stays sub-pixel smooth.
    const TILE: usize = 32;
    let texture: Vec<f32> = (0..TILE * TILE).map(|_| rng.gen_range(-0.04..0.04)).collect();
    let pan = (rng.gen_range(-0.6..0.6f32), rng.gen_range(-0.6..0.6f32));
    let grain = rng.gen_range(0.0..0.01f32);

    let mut out = Vec::with_capacity(width * height * 3 * n_frames);
    for t in 0..n_frames {
        let tf = t as f32;
        for y in 0..height {
            for x in 0..width {
                let u = x as f32 / width as f32;
                let v = y as f32 / height as f32;
                let mut px: [f32; 3] = std::array::from_fn(|c| base[c] + tilt[c] * (u - v));
                for w in &waves {
                    let s = (std::f32::consts::TAU * (w.fx * u + w.fy * v) + w.phase + w.speed * tf).sin();
                    for c in 0..3 {
                        px[c] += w.amp[c] * s;
                    }
                }
                let tx = (x as f32 + pan.0 * tf) / 3.0;
                let ty = (y as f32 + pan.1 * tf) / 3.0;
                let tex = bilinear(&texture, TILE, tx, ty);
                for b in &blobs {
                    let bx = bounce(b.cx + b.vx * tf);
                    let by = bounce(b.cy + b.vy * tf);
                    let d = ((u - bx) / b.rx).powi(2) + ((v - by) / b.ry).powi(2);
                    let a = 1.0 / (1.0 + (8.0 * (d - 1.0)).exp());
                    for c in 0..3 {
                        px[c] = px[c] * (1.0 - a) + b.color[c] * a;
                    }
                }
                for c in 0..3 {
                    let n = grain * rng.gen_range(-1.0..1.0f32);
                    out.push(codec::to_u8(px[c] + tex + n));
                }
            }
        }
    }
    out
}

fn bounce(p: f32) -> f32 {
    let m = p.rem_euclid(2.0);
    if m > 1.0 {
        2.0 - m
    } else {
        m
    }
}

fn bilinear(tile: &[f32], n: usize, x: f32, y: f32) -> f32 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let at = |i: f32, j: f32| {
        let i = (i as i64).rem_euclid(n as i64) as usize;
        let j = (j as i64).rem_euclid(n as i64) as usize;
        tile[j * n + i]
    };
    let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1.0, y0) * fx;
    let bottom = at(x0, y0 + 1.0) * (1.0 - fx) + at(x0 + 1.0, y0 + 1.0) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Writes `count` lossless videos into `dir` plus a `manifest.json`, and
/// returns the manifest path.
pub fn write_dataset(
    dir: &Path,
    count: usize,
    (width, height): (usize, usize),
    n_frames: usize,
    seed: u64,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ff = codec::ffmpeg()?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let name = format!("synth_{i:03}.mkv");
        let frames = render(width, height, n_frames, seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
        ff.encode_rgb24(&frames, (width, height), 30.0, VideoCodec::Ffv1, &dir.join(&name))?;
        entries.push(ManifestEntry {
            path: PathBuf::from(name),
            n_frames,
            width,
            height,
        });
    }
    let manifest = dir.join("manifest.json");
    ClipManifest { entries }.save(&manifest)?;
    Ok(manifest)
}
