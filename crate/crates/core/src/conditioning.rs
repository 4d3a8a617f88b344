//! Motion masks from frame differences, motion-weighted distances, and face
//! features cropped from the reference frame.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{FaceBox, ToyAutoencoder, VideoClip, CHANNELS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_DELTA: f64 = 0.2;
pub const DEFAULT_LAMBDA1: f64 = 0.5;
pub const DEFAULT_CROP_SIZE: usize = 16;
pub const DEFAULT_FACE_GRID: usize = 2;

/// Boolean `[F, H, W]` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoolGrid {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BoolGrid {
    pub fn new(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
            data: vec![false; frames * height * width],
        }
    }

    pub fn filled(frames: usize, height: usize, width: usize, value: bool) -> Self {
        Self {
            frames,
            height,
            width,
            data: vec![value; frames * height * width],
        }
    }

    pub fn get(&self, f: usize, y: usize, x: usize) -> bool {
        self.data[(f * self.height + y) * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// True iff every set cell of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BoolGrid) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }
}

/// Pixels of a clip whose channel-max temporal difference to a neighbour exceeds `delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionMask {
    pub mask: BoolGrid,
    pub delta: f64,
}

pub fn compute_motion_mask(clip: &VideoClip, delta: f64) -> Result<MotionMask> {
    motion_mask_from_pixels(&clip.pixels, delta)
}

/// Motion mask of a raw `[F, C, H, W]` array.
pub fn motion_mask_from_pixels(pixels: &Tensor, delta: f64) -> Result<MotionMask> {
    let shape = pixels.shape();
    if shape.len() != 4 {
        return Err(Error::Argument(format!("expected [F, C, H, W], got {shape:?}")));
    }
    let (f, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if f < 2 {
        return Err(Error::Argument(format!("motion mask needs at least 2 frames, got {f}")));
    }
    if !(delta > 0.0) {
        return Err(Error::Argument(format!("motion threshold must be positive, got {delta}")));
    }
    let plane = h * w;
    // moving[i][p]: channel-max |v_i - v_{i+1}| > delta.
    let mut moving = vec![false; (f - 1) * plane];
    for i in 0..f - 1 {
        let a = pixels.outer(i);
        let b = pixels.outer(i + 1);
        let row = &mut moving[i * plane..(i + 1) * plane];
        for ch in 0..c {
            let (pa, pb) = (&a[ch * plane..(ch + 1) * plane], &b[ch * plane..(ch + 1) * plane]);
            for ((m, x), y) in row.iter_mut().zip(pa).zip(pb) {
                *m |= (x - y).abs() > delta;
            }
        }
    }
    let mut mask = BoolGrid::new(f, h, w);
    for i in 0..f {
        let dst = &mut mask.data[i * plane..(i + 1) * plane];
        if i + 1 < f {
            for (d, &m) in dst.iter_mut().zip(&moving[i * plane..(i + 1) * plane]) {
                *d |= m;
            }
        }
        if i > 0 {
            for (d, &m) in dst.iter_mut().zip(&moving[(i - 1) * plane..i * plane]) {
                *d |= m;
            }
        }
    }
    Ok(MotionMask { mask, delta })
}

/// Max-pools a pixel mask onto the latent grid.
pub fn project_mask_to_latent(m: &MotionMask, factor: usize) -> Result<BoolGrid> {
    let g = &m.mask;
    if factor == 0 || g.height % factor != 0 || g.width % factor != 0 {
        return Err(Error::Argument(format!(
            "mask size {}x{} not divisible by factor {factor}",
            g.height, g.width
        )));
    }
    let (lh, lw) = (g.height / factor, g.width / factor);
    let mut out = BoolGrid::new(g.frames, lh, lw);
    for f in 0..g.frames {
        for y in 0..g.height {
            for x in 0..g.width {
                if g.get(f, y, x) {
                    out.data[(f * lh + y / factor) * lw + x / factor] = true;
                }
            }
        }
    }
    Ok(out)
}

/// Writes one black/white PNG per frame: `<prefix>_<frame>.png`.
pub fn export_mask_frames(mask: &BoolGrid, dir: &Path, prefix: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for f in 0..mask.frames {
        let mut img = image::GrayImage::new(mask.width as u32, mask.height as u32);
        for y in 0..mask.height {
            for x in 0..mask.width {
                img.put_pixel(x as u32, y as u32, image::Luma([if mask.get(f, y, x) { 255 } else { 0 }]));
            }
        }
        img.save(dir.join(format!("{prefix}_{f:03}.png")))?;
    }
    Ok(())
}

/// Elementwise base distance averaged over the selected entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BaseDistance {
    #[default]
    MeanSquared,
    PseudoHuber { c: f64 },
}

impl BaseDistance {
    #[inline]
    fn value(self, d: f64) -> f64 {
        match self {
            BaseDistance::MeanSquared => d * d,
            BaseDistance::PseudoHuber { c } => (d * d + c * c).sqrt() - c,
        }
    }

    #[inline]
    pub(crate) fn derivative(self, d: f64) -> f64 {
        match self {
            BaseDistance::MeanSquared => 2.0 * d,
            BaseDistance::PseudoHuber { c } => d / (d * d + c * c).sqrt(),
        }
    }

    /// Mean over all entries.
    pub fn mean(self, pred: &[f64], target: &[f64]) -> f64 {
        let s: f64 = pred.iter().zip(target).map(|(p, t)| self.value(p - t)).sum();
        s / pred.len() as f64
    }
}

fn check_mask_shape(pred: &Tensor, mask: &BoolGrid) -> Result<usize> {
    let s = pred.shape();
    if s.len() != 4 || s[0] != mask.frames || s[2] != mask.height || s[3] != mask.width {
        return Err(Error::Argument(format!(
            "latent shape {s:?} does not match mask [{}, {}, {}]",
            mask.frames, mask.height, mask.width
        )));
    }
    Ok(s[1])
}

/// `d(pred, target) + lambda1 * d_M(pred, target)` with the mean squared base distance.
pub fn motion_weighted_distance(pred: &Tensor, target: &Tensor, latent_mask: &BoolGrid, lambda1: f64) -> Result<f64> {
    motion_weighted_distance_with(pred, target, latent_mask, lambda1, BaseDistance::MeanSquared)
}

/// The masked term averages over masked cells times channels; it vanishes for an empty mask.
pub fn motion_weighted_distance_with(
    pred: &Tensor,
    target: &Tensor,
    latent_mask: &BoolGrid,
    lambda1: f64,
    base: BaseDistance,
) -> Result<f64> {
    Ok(motion_weighted_distance_grad(pred, target, latent_mask, lambda1, base, None)?)
}

/// Value of the motion-weighted distance; when `grad` is given, also writes
/// its derivative with respect to `pred`.
pub(crate) fn motion_weighted_distance_grad(
    pred: &Tensor,
    target: &Tensor,
    mask: &BoolGrid,
    lambda1: f64,
    base: BaseDistance,
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    pred.check_same_shape(target, "motion_weighted_distance")?;
    let c = check_mask_shape(pred, mask)?;
    let plane = mask.height * mask.width;
    let n = pred.len() as f64;
    let masked = mask.count() * c;
    let p = pred.data();
    let t = target.data();

    let mut plain = 0.0;
    let mut inside = 0.0;
    for (i, (a, b)) in p.iter().zip(t).enumerate() {
        let v = base.value(a - b);
        plain += v;
        let (f, rest) = (i / (c * plane), i % plane);
        if mask.data[f * plane + rest] {
            inside += v;
        }
    }
    let masked_mean = if masked == 0 { 0.0 } else { inside / masked as f64 };
    let value = plain / n + lambda1 * masked_mean;

    if let Some(g) = grad {
        let w_in = if masked == 0 { 0.0 } else { lambda1 / masked as f64 };
        for (i, (gi, (a, b))) in g.iter_mut().zip(p.iter().zip(t)).enumerate() {
            let d = base.derivative(a - b);
            let (f, rest) = (i / (c * plane), i % plane);
            let w = if mask.data[f * plane + rest] { 1.0 / n + w_in } else { 1.0 / n };
            *gi = w * d;
        }
    }
    Ok(value)
}

/// Face descriptor extracted from a crop of the reference frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceFeature {
    pub vector: Vec<f64>,
    pub source_box: FaceBox,
    pub crop_size: usize,
}

/// Crop-resize-encode-pool settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaceFeatureConfig {
    pub crop_size: usize,
    /// The encoded crop is average-pooled onto a `grid x grid` lattice.
    pub grid: usize,
}

impl Default for FaceFeatureConfig {
    fn default() -> Self {
        Self {
            crop_size: DEFAULT_CROP_SIZE,
            grid: DEFAULT_FACE_GRID,
        }
    }
}

impl FaceFeatureConfig {
    pub fn dim(&self) -> usize {
        CHANNELS * self.grid * self.grid
    }

    pub fn validate(&self, ae: &ToyAutoencoder) -> Result<()> {
        let step = ae.factor * self.grid;
        if self.crop_size == 0 || self.grid == 0 || self.crop_size % step != 0 {
            return Err(Error::Config(format!(
                "face crop size {} must be a positive multiple of downsample x grid = {step}",
                self.crop_size
            )));
        }
        Ok(())
    }
}

pub fn extract_face_feature(clip: &VideoClip, ae: &ToyAutoencoder, crop_size: usize) -> Result<FaceFeature> {
    let cfg = FaceFeatureConfig {
        crop_size,
        ..FaceFeatureConfig::default()
    };
    face_feature_from_frame(&clip.reference_frame, clip.face_box, ae, &cfg)
}

/// Crops `frame` (`[3, H, W]`) to `bx`, bilinearly resizes it, encodes, and grid-pools.
pub fn face_feature_from_frame(
    frame: &Tensor,
    bx: FaceBox,
    ae: &ToyAutoencoder,
    cfg: &FaceFeatureConfig,
) -> Result<FaceFeature> {
    cfg.validate(ae)?;
    let s = frame.shape();
    if s.len() != 3 {
        return Err(Error::Argument(format!("expected [C, H, W] frame, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if !bx.is_valid_in(w, h) {
        return Err(Error::Argument(format!("degenerate or out-of-bounds face box {bx:?}")));
    }
    let crop = resize_bilinear(frame.data(), c, w, bx, cfg.crop_size);
    let crop = Tensor::from_vec(&[c, cfg.crop_size, cfg.crop_size], crop)?;
    let lat = ae.encode(&crop)?;
    let ls = cfg.crop_size / ae.factor;
    let cell = ls / cfg.grid;
    let mut vector = Vec::with_capacity(c * cfg.grid * cfg.grid);
    let d = lat.data();
    for ch in 0..c {
        for gy in 0..cfg.grid {
            for gx in 0..cfg.grid {
                let mut acc = 0.0;
                for y in gy * cell..(gy + 1) * cell {
                    for x in gx * cell..(gx + 1) * cell {
                        acc += d[(ch * ls + y) * ls + x];
                    }
                }
                vector.push(acc / (cell * cell) as f64);
            }
        }
    }
    Ok(FaceFeature {
        vector,
        source_box: bx,
        crop_size: cfg.crop_size,
    })
}

/// Half-pixel-centre bilinear resize of a box crop to `out x out`.
fn resize_bilinear(src: &[f64], channels: usize, width: usize, bx: FaceBox, out: usize) -> Vec<f64> {
    let height = src.len() / (channels * width);
    let (bw, bh) = (bx.width() as f64, bx.height() as f64);
    let sample_axis = |i: usize, len: f64, origin: usize| -> (usize, usize, f64) {
        let pos = ((i as f64 + 0.5) * len / out as f64 - 0.5).clamp(0.0, len - 1.0);
        let lo = pos.floor();
        let frac = pos - lo;
        let lo = lo as usize;
        let hi = (lo + 1).min(len as usize - 1);
        (origin + lo, origin + hi, frac)
    };
    let mut dst = vec![0.0; channels * out * out];
    for oy in 0..out {
        let (y0, y1, fy) = sample_axis(oy, bh, bx.y0);
        for ox in 0..out {
            let (x0, x1, fx) = sample_axis(ox, bw, bx.x0);
            for ch in 0..channels {
                let p = |y: usize, x: usize| src[(ch * height + y) * width + x];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                dst[(ch * out + oy) * out + ox] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    dst
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_clip, generate_clip_with, ClipParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(pixels: &Tensor, delta: f64) -> BoolGrid {
        let s = pixels.shape();
        let (f, c, h, w) = (s[0], s[1], s[2], s[3]);
        let v = |t: usize, ch: usize, y: usize, x: usize| pixels.data()[((t * c + ch) * h + y) * w + x];
        let mut out = BoolGrid::new(f, h, w);
        for t in 0..f {
            for y in 0..h {
                for x in 0..w {
                    let diff = |u: usize| (0..c).map(|ch| (v(t, ch, y, x) - v(u, ch, y, x)).abs()).fold(0.0, f64::max);
                    let fwd = t + 1 < f && diff(t + 1) > delta;
                    let bwd = t > 0 && diff(t - 1) > delta;
                    out.data[(t * h + y) * w + x] = fwd || bwd;
                }
            }
        }
        out
    }

    #[test]
    fn static_clip_has_empty_mask() {
        let px = Tensor::full(&[4, 3, 8, 8], 0.4);
        assert_eq!(motion_mask_from_pixels(&px, 0.2).unwrap().mask.count(), 0);
    }

    #[test]
    fn two_pixel_clip() {
        let px = Tensor::from_vec(&[2, 1, 1, 1], vec![0.0, 0.3]).unwrap();
        let m = motion_mask_from_pixels(&px, 0.2).unwrap();
        assert_eq!(m.mask.data, vec![true, true]);
        assert!(motion_mask_from_pixels(&Tensor::zeros(&[1, 1, 1, 1]), 0.2).is_err());
    }

    #[test]
    fn matches_brute_force_on_random_arrays() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let data: Vec<f64> = (0..5 * 3 * 6 * 7).map(|_| rng.random::<f64>()).collect();
            let px = Tensor::from_vec(&[5, 3, 6, 7], data).unwrap();
            for delta in [0.1, 0.5, 0.9] {
                assert_eq!(motion_mask_from_pixels(&px, delta).unwrap().mask, brute_force(&px, delta));
            }
        }
    }

    #[test]
    fn latent_projection() {
        let clip = generate_clip(3, 4, 16, 16).unwrap();
        let m = compute_motion_mask(&clip, 0.2).unwrap();
        assert_eq!(project_mask_to_latent(&m, 1).unwrap(), m.mask);

        let mut single = MotionMask { mask: BoolGrid::new(1, 4, 4), delta: 0.2 };
        single.mask.data[5] = true;
        assert_eq!(project_mask_to_latent(&single, 2).unwrap().count(), 1);

        let all = MotionMask { mask: BoolGrid::filled(2, 4, 4, true), delta: 0.2 };
        assert!(project_mask_to_latent(&all, 2).unwrap().data.iter().all(|&b| b));
        assert!(project_mask_to_latent(&all, 3).is_err());
    }

    #[test]
    fn weighted_distance_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mk = |rng: &mut ChaCha8Rng| {
            Tensor::from_vec(&[2, 3, 4, 4], (0..96).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let (p, t) = (mk(&mut rng), mk(&mut rng));
        let empty = BoolGrid::new(2, 4, 4);
        let full = BoolGrid::filled(2, 4, 4, true);
        let plain = BaseDistance::MeanSquared.mean(p.data(), t.data());
        assert_eq!(motion_weighted_distance(&p, &t, &empty, 0.5).unwrap(), plain);
        approx::assert_relative_eq!(motion_weighted_distance(&p, &t, &full, 0.5).unwrap(), 1.5 * plain, max_relative = 1e-14);
        assert_eq!(motion_weighted_distance(&p, &p, &full, 0.5).unwrap(), 0.0);
        assert!(motion_weighted_distance(&p, &t, &BoolGrid::new(2, 4, 3), 0.5).is_err());
    }

    #[test]
    fn weighted_distance_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = Tensor::from_vec(&[2, 2, 2, 2], (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let t = Tensor::from_vec(&[2, 2, 2, 2], (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut mask = BoolGrid::new(2, 2, 2);
        mask.data[1] = true;
        mask.data[6] = true;
        for base in [BaseDistance::MeanSquared, BaseDistance::PseudoHuber { c: 0.1 }] {
            let mut g = vec![0.0; 16];
            motion_weighted_distance_grad(&p, &t, &mask, 0.5, base, Some(&mut g)).unwrap();
            for i in 0..16 {
                let h = 1e-6;
                let mut a = p.clone();
                a.data_mut()[i] += h;
                let mut b = p.clone();
                b.data_mut()[i] -= h;
                let fd = (motion_weighted_distance_with(&a, &t, &mask, 0.5, base).unwrap()
                    - motion_weighted_distance_with(&b, &t, &mask, 0.5, base).unwrap())
                    / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-8, "{base:?} {i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn face_features() {
        let ae = ToyAutoencoder::default();
        let clip = generate_clip(4, 4, 32, 32).unwrap();
        let a = extract_face_feature(&clip, &ae, 16).unwrap();
        assert_eq!(a, extract_face_feature(&clip, &ae, 16).unwrap());
        assert_eq!(a.vector.len(), 12);

        let mut flat = clip.clone();
        flat.reference_frame = Tensor::full(&[3, 32, 32], 0.6);
        let f = extract_face_feature(&flat, &ae, 16).unwrap();
        assert!(f.vector.iter().all(|&v| (v - 0.6).abs() < 1e-12));

        let mut bad = clip.clone();
        bad.face_box.x1 = bad.face_box.x0;
        assert!(extract_face_feature(&bad, &ae, 16).is_err());
    }

    #[test]
    fn identities_are_distinguishable() {
        let ae = ToyAutoencoder::default();
        let mut worst: f64 = -1.0;
        for s in 0..10u64 {
            let p1 = ClipParams { identity_seed: Some(100 + s), ..ClipParams::with_geometry(2, 32, 32) };
            let p2 = ClipParams { identity_seed: Some(200 + s), ..ClipParams::with_geometry(2, 32, 32) };
            let a = extract_face_feature(&generate_clip_with(s, &p1).unwrap(), &ae, 16).unwrap();
            let b = extract_face_feature(&generate_clip_with(s, &p2).unwrap(), &ae, 16).unwrap();
            worst = worst.max(cosine_similarity(&a.vector, &b.vector));
        }
        assert!(worst < 0.99, "max cosine {worst}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn mask_monotone_in_delta(seed in 0u64..200, d1 in 0.01f64..0.6, d2 in 0.01f64..0.6) {
                let (lo, hi) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
                let clip = generate_clip(seed, 4, 16, 16).unwrap();
                let a = compute_motion_mask(&clip, lo).unwrap();
                let b = compute_motion_mask(&clip, hi).unwrap();
                prop_assert!(b.mask.is_subset_of(&a.mask));
            }

            #[test]
            fn weighted_distance_symmetric(seed in 0u64..1000, lambda in 0.0f64..2.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let p = Tensor::from_vec(&[2, 1, 2, 2], (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
                let t = Tensor::from_vec(&[2, 1, 2, 2], (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
                let mut mask = BoolGrid::new(2, 2, 2);
                for b in mask.data.iter_mut() { *b = rng.random(); }
                let ab = motion_weighted_distance(&p, &t, &mask, lambda).unwrap();
                let ba = motion_weighted_distance(&t, &p, &mask, lambda).unwrap();
                prop_assert_eq!(ab, ba);
                prop_assert!(ab > 0.0);
            }
        }
    }
}
