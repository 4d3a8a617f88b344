//! Deterministic toy "human animation" clips and a fixed pooling autoencoder.
//!
//! A clip shows one sprite on a fixed background: a body disc, two hands that
//! swing, and a head disc whose three sectors carry a seed-dependent identity
//! pattern. The sprite follows a smooth bounded random walk. The pose map marks
//! the head, body, and hand joints with small plus-shaped stamps.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::npy;
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;
pub const DEFAULT_FRAMES: usize = 16;
pub const DEFAULT_SIZE: usize = 32;
pub const DEFAULT_DOWNSAMPLE: usize = 2;
const MIN_SIZE: usize = 16;
const CLIP_SCHEMA_VERSION: u32 = 1;

/// Axis-aligned pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaceBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl FaceBox {
    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn is_valid_in(&self, width: usize, height: usize) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && self.x1 <= width && self.y1 <= height
    }
}

/// Generator knobs beyond the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClipParams {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Maximum sprite displacement per frame, in pixels.
    pub motion_amplitude: f64,
    /// Seed for the face colour pattern; defaults to the clip seed.
    pub identity_seed: Option<u64>,
    pub downsample: usize,
}

impl Default for ClipParams {
    fn default() -> Self {
        Self {
            frames: DEFAULT_FRAMES,
            height: DEFAULT_SIZE,
            width: DEFAULT_SIZE,
            motion_amplitude: 1.5,
            identity_seed: None,
            downsample: DEFAULT_DOWNSAMPLE,
        }
    }
}

impl ClipParams {
    pub fn with_geometry(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::Config(format!("clips need at least 2 frames, got {}", self.frames)));
        }
        if self.height < MIN_SIZE || self.width < MIN_SIZE {
            return Err(Error::Config(format!(
                "frames must be at least {MIN_SIZE}x{MIN_SIZE}, got {}x{}",
                self.height, self.width
            )));
        }
        if self.downsample == 0 || self.height % self.downsample != 0 || self.width % self.downsample != 0 {
            return Err(Error::Config(format!(
                "frame size {}x{} not divisible by downsample factor {}",
                self.height, self.width, self.downsample
            )));
        }
        if !(self.motion_amplitude.is_finite() && self.motion_amplitude >= 0.0) {
            return Err(Error::Config("motion amplitude must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// A pixel-space clip with its conditioning signals.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub seed: u64,
    /// `[F, 3, H, W]` in `[0, 1]`.
    pub pixels: Tensor,
    /// `[F, 1, H, W]` joint stamps.
    pub pose_map: Tensor,
    /// `[3, H, W]`; the first frame.
    pub reference_frame: Tensor,
    /// Face rectangle in the reference frame.
    pub face_box: FaceBox,
    /// Face rectangle of every frame.
    pub face_track: Vec<FaceBox>,
    /// Body joint of every frame, `(x, y)` in pixels.
    pub body_track: Vec<(f64, f64)>,
    pub params: ClipParams,
}

impl VideoClip {
    pub fn frames(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[3]
    }

    /// Same clip with new pixels (e.g. a decoded sample); conditioning is kept.
    pub fn with_pixels(&self, pixels: Tensor) -> Result<VideoClip> {
        self.pixels.check_same_shape(&pixels, "with_pixels")?;
        Ok(VideoClip {
            pixels,
            ..self.clone()
        })
    }
}

struct Palette {
    body: [f64; 3],
    hands: [f64; 3],
    face: [[f64; 3]; 3],
}

fn background(y: usize, height: usize) -> f64 {
    0.08 + 0.1 * y as f64 / height as f64
}

pub fn generate_clip(seed: u64, frames: usize, height: usize, width: usize) -> Result<VideoClip> {
    generate_clip_with(seed, &ClipParams::with_geometry(frames, height, width))
}

pub fn generate_clip_with(seed: u64, params: &ClipParams) -> Result<VideoClip> {
    params.validate()?;
    let (f, h, w) = (params.frames, params.height, params.width);
    let size = h.min(w) as f64;
    let body_r = 0.14 * size;
    let head_r = 0.09 * size;
    let hand_r = 0.05 * size;
    let hand_off = body_r + 0.07 * size;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = |rng: &mut ChaCha8Rng, lo: f64| -> [f64; 3] {
        [rng.random_range(lo..0.95), rng.random_range(lo..0.95), rng.random_range(lo..0.95)]
    };
    let body = color(&mut rng, 0.35);
    let hands = body.map(|c| c * 0.8);
    let mut id_rng = ChaCha8Rng::seed_from_u64(params.identity_seed.unwrap_or(seed) ^ 0x5eed_face);
    let face = [color(&mut id_rng, 0.2), color(&mut id_rng, 0.2), color(&mut id_rng, 0.2)];
    let palette = Palette { body, hands, face };

    let x_lo = hand_off + hand_r + 1.0;
    let x_hi = w as f64 - x_lo;
    let y_lo = body_r + 2.0 * head_r + 1.0;
    let y_hi = h as f64 - body_r - 1.0;
    let amp = params.motion_amplitude;
    let mut pos = (
        rng.random_range(x_lo..x_hi),
        rng.random_range(y_lo..y_hi),
    );
    let mut vel = (
        rng.random_range(-amp..=amp.max(f64::MIN_POSITIVE)),
        rng.random_range(-amp..=amp.max(f64::MIN_POSITIVE)),
    );
    let swing_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let swing_rate = rng.random_range(0.4..0.9);
    let swing_amp = 0.06 * size;

    let mut pixels = Tensor::zeros(&[f, CHANNELS, h, w]);
    let mut pose_map = Tensor::zeros(&[f, 1, h, w]);
    let mut face_track = Vec::with_capacity(f);
    let mut body_track = Vec::with_capacity(f);

    for i in 0..f {
        if i > 0 {
            vel.0 = 0.8 * vel.0 + 0.5 * amp * rng.random_range(-1.0..=1.0);
            vel.1 = 0.8 * vel.1 + 0.5 * amp * rng.random_range(-1.0..=1.0);
            let speed = (vel.0 * vel.0 + vel.1 * vel.1).sqrt();
            if speed > amp {
                vel.0 *= amp / speed;
                vel.1 *= amp / speed;
            }
            pos.0 += vel.0;
            pos.1 += vel.1;
            if pos.0 < x_lo || pos.0 > x_hi {
                vel.0 = -vel.0;
                pos.0 = pos.0.clamp(x_lo, x_hi);
            }
            if pos.1 < y_lo || pos.1 > y_hi {
                vel.1 = -vel.1;
                pos.1 = pos.1.clamp(y_lo, y_hi);
            }
        }
        let swing = swing_amp * (swing_phase + swing_rate * i as f64).sin();
        let head = (pos.0, pos.1 - body_r - head_r);
        let left = (pos.0 - hand_off, pos.1 + swing);
        let right = (pos.0 + hand_off, pos.1 - swing);

        let frame = pixels.outer_mut(i);
        let plane = h * w;
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let inside = |c: (f64, f64), r: f64| (px - c.0).powi(2) + (py - c.1).powi(2) <= r * r;
                let rgb = if inside(head, head_r) {
                    let (dx, dy) = (px - head.0, py - head.1);
                    let sector = if dy < 0.0 { 0 } else if dx < 0.0 { 1 } else { 2 };
                    palette.face[sector]
                } else if inside(pos, body_r) {
                    palette.body
                } else if inside(left, hand_r) || inside(right, hand_r) {
                    palette.hands
                } else {
                    [background(y, h); 3]
                };
                for (c, v) in rgb.iter().enumerate() {
                    frame[c * plane + y * w + x] = *v;
                }
            }
        }

        let pose = pose_map.outer_mut(i);
        for joint in [head, pos, left, right] {
            stamp_joint(pose, w, h, joint);
        }
        face_track.push(face_box_for(head, head_r, w, h));
        body_track.push(pos);
    }

    let reference_frame = Tensor::from_vec(&[CHANNELS, h, w], pixels.outer(0).to_vec())?;
    Ok(VideoClip {
        seed,
        pixels,
        pose_map,
        reference_frame,
        face_box: face_track[0],
        face_track,
        body_track,
        params: params.clone(),
    })
}

fn stamp_joint(plane: &mut [f64], w: usize, h: usize, joint: (f64, f64)) {
    let cx = joint.0.floor() as i64;
    let cy = joint.1.floor() as i64;
    for (dx, dy) in [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)] {
        let (x, y) = (cx + dx, cy + dy);
        if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
            plane[y as usize * w + x as usize] = 1.0;
        }
    }
}

fn face_box_for(center: (f64, f64), r: f64, w: usize, h: usize) -> FaceBox {
    let x0 = (center.0 - r).floor().max(0.0) as usize;
    let y0 = (center.1 - r).floor().max(0.0) as usize;
    let x1 = ((center.0 + r).ceil() as usize).clamp(x0 + 1, w);
    let y1 = ((center.1 + r).ceil() as usize).clamp(y0 + 1, h);
    FaceBox { x0, y0, x1, y1 }
}

/// Generates `count` clips with seeds `base_seed, base_seed + 1, ...`.
pub fn generate_dataset(base_seed: u64, count: usize, params: &ClipParams) -> Result<Vec<VideoClip>> {
    (0..count as u64)
        .map(|i| generate_clip_with(base_seed.wrapping_add(i), params))
        .collect()
}

/// Fixed linear autoencoder: `factor x factor` average-pool encode, nearest-neighbour decode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyAutoencoder {
    pub factor: usize,
}

impl Default for ToyAutoencoder {
    fn default() -> Self {
        Self {
            factor: DEFAULT_DOWNSAMPLE,
        }
    }
}

/// Latent clip `[F, C_lat, H / f, W / f]`.
pub type LatentVideo = Tensor;

impl ToyAutoencoder {
    pub fn new(factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::Config("downsample factor must be positive".into()));
        }
        Ok(Self { factor })
    }

    /// Pools a `[..., H, W]` array (any leading dimensions) down by the factor.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let shape = x.shape();
        if shape.len() < 2 {
            return Err(Error::Argument("encode needs at least two dimensions".into()));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let f = self.factor;
        if h % f != 0 || w % f != 0 {
            return Err(Error::Argument(format!(
                "spatial size {h}x{w} not divisible by downsample factor {f}"
            )));
        }
        let (lh, lw) = (h / f, w / f);
        let planes: usize = shape[..shape.len() - 2].iter().product();
        let mut out_shape = shape.to_vec();
        let n = out_shape.len();
        out_shape[n - 2] = lh;
        out_shape[n - 1] = lw;
        let mut out = Tensor::zeros(&out_shape);
        let scale = 1.0 / (f * f) as f64;
        let src = x.data();
        let dst = out.data_mut();
        for p in 0..planes {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut dst[p * lh * lw..(p + 1) * lh * lw];
            for ly in 0..lh {
                for lx in 0..lw {
                    let mut acc = 0.0;
                    for dy in 0..f {
                        let row = (ly * f + dy) * w + lx * f;
                        acc += s[row..row + f].iter().sum::<f64>();
                    }
                    d[ly * lw + lx] = acc * scale;
                }
            }
        }
        Ok(out)
    }

    /// Nearest-neighbour upsampling of a `[..., h, w]` array by the factor.
    pub fn decode(&self, lat: &Tensor) -> Result<Tensor> {
        let shape = lat.shape();
        if shape.len() < 2 {
            return Err(Error::Argument("decode needs at least two dimensions".into()));
        }
        let (lh, lw) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let f = self.factor;
        let (h, w) = (lh * f, lw * f);
        let planes: usize = shape[..shape.len() - 2].iter().product();
        let mut out_shape = shape.to_vec();
        let n = out_shape.len();
        out_shape[n - 2] = h;
        out_shape[n - 1] = w;
        let mut out = Tensor::zeros(&out_shape);
        let src = lat.data();
        let dst = out.data_mut();
        for p in 0..planes {
            for y in 0..h {
                for x in 0..w {
                    dst[p * h * w + y * w + x] = src[p * lh * lw + (y / f) * lw + x / f];
                }
            }
        }
        Ok(out)
    }
}

pub fn encode_latent(clip: &VideoClip, ae: &ToyAutoencoder) -> Result<LatentVideo> {
    ae.encode(&clip.pixels)
}

pub fn decode_latent(lat: &LatentVideo, ae: &ToyAutoencoder) -> Result<Tensor> {
    if lat.shape().len() != 4 {
        return Err(Error::Argument(format!("latent video must be 4-d, got {:?}", lat.shape())));
    }
    ae.decode(lat)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClipSidecar {
    schema_version: u32,
    seed: u64,
    frames: usize,
    channels: usize,
    height: usize,
    width: usize,
    face_box: FaceBox,
    face_track: Vec<FaceBox>,
    body_track: Vec<(f64, f64)>,
    params: ClipParams,
}

/// Writes `pixels.npy`, `pose_map.npy`, `reference_frame.npy` and `clip.json` into `dir`.
pub fn save_clip(clip: &VideoClip, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    npy::write(&dir.join("pixels.npy"), &clip.pixels)?;
    npy::write(&dir.join("pose_map.npy"), &clip.pose_map)?;
    npy::write(&dir.join("reference_frame.npy"), &clip.reference_frame)?;
    let sidecar = ClipSidecar {
        schema_version: CLIP_SCHEMA_VERSION,
        seed: clip.seed,
        frames: clip.frames(),
        channels: CHANNELS,
        height: clip.height(),
        width: clip.width(),
        face_box: clip.face_box,
        face_track: clip.face_track.clone(),
        body_track: clip.body_track.clone(),
        params: clip.params.clone(),
    };
    let path = dir.join("clip.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&path, e))
}

pub fn load_clip(dir: &Path) -> Result<VideoClip> {
    let path = dir.join("clip.json");
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let sidecar: ClipSidecar = serde_json::from_slice(&bytes)?;
    if sidecar.schema_version != CLIP_SCHEMA_VERSION {
        return Err(Error::Integrity {
            section: "clip.json".into(),
            message: format!("unsupported schema version {}", sidecar.schema_version),
        });
    }
    let pixels = npy::read(&dir.join("pixels.npy"))?;
    let pose_map = npy::read(&dir.join("pose_map.npy"))?;
    let reference_frame = npy::read(&dir.join("reference_frame.npy"))?;
    let expected = [sidecar.frames, sidecar.channels, sidecar.height, sidecar.width];
    if pixels.shape() != expected {
        return Err(Error::Integrity {
            section: "pixels.npy".into(),
            message: format!("shape {:?} disagrees with sidecar {expected:?}", pixels.shape()),
        });
    }
    Ok(VideoClip {
        seed: sidecar.seed,
        pixels,
        pose_map,
        reference_frame,
        face_box: sidecar.face_box,
        face_track: sidecar.face_track,
        body_track: sidecar.body_track,
        params: sidecar.params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = generate_clip(7, 8, 32, 32).unwrap();
        let b = generate_clip(7, 8, 32, 32).unwrap();
        assert_eq!(a, b);
        let c = generate_clip(8, 8, 32, 32).unwrap();
        assert_ne!(a.pixels, c.pixels);
    }

    #[test]
    fn default_geometry_invariants() {
        let clip = generate_clip(0, 16, 32, 32).unwrap();
        assert_eq!(clip.pixels.shape(), &[16, 3, 32, 32]);
        assert!(clip.face_box.is_valid_in(32, 32));
        assert!(clip.face_box.width() * clip.face_box.height() > 0);
        assert!(clip.pixels.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(clip.reference_frame.data(), clip.pixels.outer(0));
        assert!(clip.pose_map.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(matches!(generate_clip(0, 4, 33, 32), Err(Error::Config(_))));
        assert!(matches!(generate_clip(0, 1, 32, 32), Err(Error::Config(_))));
    }

    #[test]
    fn motion_fraction_in_range() {
        // Fraction of (frame pair, pixel) cells whose channel-max change exceeds 0.2.
        for seed in 0..20 {
            let clip = generate_clip(seed, 16, 32, 32).unwrap();
            let (f, h, w) = (16, 32, 32);
            let mut changed = 0usize;
            for i in 0..f - 1 {
                for p in 0..h * w {
                    let d = (0..3)
                        .map(|c| (clip.pixels.outer(i)[c * h * w + p] - clip.pixels.outer(i + 1)[c * h * w + p]).abs())
                        .fold(0.0, f64::max);
                    if d > 0.2 {
                        changed += 1;
                    }
                }
            }
            let frac = changed as f64 / ((f - 1) * h * w) as f64;
            assert!(frac > 0.0 && frac < 0.5, "seed {seed}: {frac}");
        }
    }

    #[test]
    fn pose_tracks_body_centroid() {
        for seed in 0..10 {
            let clip = generate_clip(seed, 16, 32, 32).unwrap();
            let body = {
                let f0 = clip.pixels.outer(0);
                let (cx, cy) = clip.body_track[0];
                let idx = cy.floor() as usize * 32 + cx.floor() as usize;
                [f0[idx], f0[1024 + idx], f0[2048 + idx]]
            };
            for i in 0..16 {
                let fr = clip.pixels.outer(i);
                let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
                for y in 0..32 {
                    for x in 0..32 {
                        let p = y * 32 + x;
                        if fr[p] == body[0] && fr[1024 + p] == body[1] && fr[2048 + p] == body[2] {
                            sx += x as f64 + 0.5;
                            sy += y as f64 + 0.5;
                            n += 1.0;
                        }
                    }
                }
                let (cx, cy) = (sx / n, sy / n);
                let (jx, jy) = clip.body_track[i];
                // Pose stamp centre pixel.
                let (px, py) = (jx.floor() + 0.5, jy.floor() + 0.5);
                assert_eq!(clip.pose_map.outer(i)[jy.floor() as usize * 32 + jx.floor() as usize], 1.0);
                assert!((cx - px).abs() <= 1.0 && (cy - py).abs() <= 1.0, "seed {seed} frame {i}");
            }
        }
    }

    #[test]
    fn pooling_autoencoder() {
        let ae = ToyAutoencoder::new(2).unwrap();
        let block = Tensor::from_vec(&[1, 1, 2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(ae.encode(&block).unwrap().data(), &[0.5]);

        let c = Tensor::full(&[2, 3, 4, 4], 0.37);
        assert!(ae.encode(&c).unwrap().data().iter().all(|&v| (v - 0.37).abs() < 1e-15));

        let id = ToyAutoencoder::new(1).unwrap();
        let clip = generate_clip(1, 4, 16, 16).unwrap();
        assert_eq!(id.encode(&clip.pixels).unwrap(), clip.pixels);
        assert_eq!(id.decode(&clip.pixels).unwrap(), clip.pixels);

        let single = Tensor::full(&[1, 1, 1, 1], 0.5);
        assert_eq!(ae.decode(&single).unwrap().data(), &[0.5; 4]);

        // Block-constant input survives the round trip exactly.
        let lat = ae.encode(&clip.pixels).unwrap();
        let blocky = ae.decode(&lat).unwrap();
        assert_eq!(ae.decode(&ae.encode(&blocky).unwrap()).unwrap(), blocky);

        assert!(ae.encode(&Tensor::zeros(&[1, 1, 3, 4])).is_err());
    }

    #[test]
    fn clip_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let clip = generate_clip(5, 4, 16, 16).unwrap();
        save_clip(&clip, dir.path()).unwrap();
        assert_eq!(load_clip(dir.path()).unwrap(), clip);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn encode_is_linear(a in -2.0f64..2.0, b in -2.0f64..2.0, s1 in 0u64..50, s2 in 0u64..50) {
                let ae = ToyAutoencoder::new(2).unwrap();
                let x = generate_clip(s1, 2, 16, 16).unwrap().pixels;
                let y = generate_clip(s2, 2, 16, 16).unwrap().pixels;
                let mix = Tensor::from_vec(x.shape(), x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
                let lhs = ae.encode(&mix).unwrap();
                let ex = ae.encode(&x).unwrap();
                let ey = ae.encode(&y).unwrap();
                for ((l, p), q) in lhs.data().iter().zip(ex.data()).zip(ey.data()) {
                    prop_assert!((l - (a * p + b * q)).abs() < 1e-12);
                }
            }
        }
    }
}
