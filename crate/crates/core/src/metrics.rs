//! Frame metrics, a seeded random-feature Fréchet distance, and face identity similarity.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::conditioning::{cosine_similarity, face_feature_from_frame, motion_mask_from_pixels, FaceFeatureConfig};
use crate::data::{ToyAutoencoder, VideoClip};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PSNR_MSE_FLOOR: f64 = 1e-10;
/// `10 log10(1 / PSNR_MSE_FLOOR)`.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 7;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
/// Embedding size of the random-feature extractor.
pub const FEATURE_DIM: usize = 8;
const FEATURE_KERNEL: usize = 3;
const FEATURE_STRIDE: usize = 2;
pub const DEFAULT_FEATURE_SEED: u64 = 20_240_531;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub l1: f64,
    pub psnr: f64,
    pub ssim: f64,
}

fn check_video(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, usize)> {
    a.check_same_shape(b, "frame metrics")?;
    let s = a.shape();
    if s.len() != 4 {
        return Err(Error::Argument(format!("expected [F, C, H, W] pixels, got {s:?}")));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// Mean absolute error, frame-averaged PSNR with an mse floor, and 7x7 SSIM.
pub fn frame_metrics(pred: &Tensor, reference: &Tensor) -> Result<FrameMetrics> {
    let (f, c, h, w) = check_video(pred, reference)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Argument(format!(
            "frames of {h}x{w} are smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let (p, r) = (pred.data(), reference.data());
    let l1 = p.iter().zip(r).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64;
    let per_frame = c * h * w;
    let mut psnr = 0.0;
    let mut ssim_sum = 0.0;
    for fi in 0..f {
        let range = fi * per_frame..(fi + 1) * per_frame;
        let mse = p[range.clone()].iter().zip(&r[range]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            / per_frame as f64;
        psnr += 10.0 * (1.0 / mse.max(PSNR_MSE_FLOOR)).log10();
        for ch in 0..c {
            let off = (fi * c + ch) * h * w;
            ssim_sum += ssim_plane(&p[off..off + h * w], &r[off..off + h * w], h, w);
        }
    }
    Ok(FrameMetrics {
        l1,
        psnr: psnr / f as f64,
        ssim: ssim_sum / (f * c) as f64,
    })
}

/// Mean SSIM over every fully contained 7x7 window of one plane.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let k = SSIM_WINDOW;
    let n = (k * k) as f64;
    let mut total = 0.0;
    for y in 0..=h - k {
        for x in 0..=w - k {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..k {
                let row = (y + dy) * w + x;
                for i in row..row + k {
                    let (u, v) = (a[i], b[i]);
                    sa += u;
                    sb += v;
                    saa += u * u;
                    sbb += v * v;
                    sab += u * v;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
    }
    total / ((h - k + 1) * (w - k + 1)) as f64
}

/// Mean squared error restricted to the moving region of `reference`.
/// Returns 0 when nothing moves.
pub fn masked_mse(pred: &Tensor, reference: &Tensor, delta: f64) -> Result<f64> {
    let (_, c, h, w) = check_video(pred, reference)?;
    let mask = motion_mask_from_pixels(reference, delta)?.mask;
    let plane = h * w;
    let (mut acc, mut n) = (0.0, 0usize);
    for (i, (a, b)) in pred.data().iter().zip(reference.data()).enumerate() {
        let (f, rest) = (i / (c * plane), i % plane);
        if mask.data[f * plane + rest] {
            acc += (a - b) * (a - b);
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { acc / n as f64 })
}

/// Frozen random spatiotemporal filters defined by a seed.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    pub seed: u64,
    channels: usize,
    /// `[FEATURE_DIM, channels, k, k, k]`, each filter zero-mean.
    weights: Vec<f64>,
}

impl FeatureExtractor {
    pub fn new(seed: u64, channels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let per = channels * FEATURE_KERNEL.pow(3);
        let mut weights = Vec::with_capacity(FEATURE_DIM * per);
        for _ in 0..FEATURE_DIM {
            let mut filt: Vec<f64> = (0..per).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mean = filt.iter().sum::<f64>() / per as f64;
            let scale = 1.0 / (per as f64).sqrt();
            for v in &mut filt {
                *v = (*v - mean) * scale;
            }
            weights.extend(filt);
        }
        Self { seed, channels, weights }
    }

    /// Mean absolute filter response over every valid strided position.
    pub fn embed(&self, pixels: &Tensor) -> Result<Vec<f64>> {
        let s = pixels.shape();
        let k = FEATURE_KERNEL;
        if s.len() != 4 || s[1] != self.channels || s[0] < k || s[2] < k || s[3] < k {
            return Err(Error::Argument(format!(
                "feature extractor needs [F>={k}, {}, H>={k}, W>={k}], got {s:?}",
                self.channels
            )));
        }
        let (f, c, h, w) = (s[0], s[1], s[2], s[3]);
        let d = pixels.data();
        let per = c * k * k * k;
        let mut out = vec![0.0; FEATURE_DIM];
        let mut count = 0usize;
        for t in 0..=f - k {
            for y in (0..=h - k).step_by(FEATURE_STRIDE) {
                for x in (0..=w - k).step_by(FEATURE_STRIDE) {
                    count += 1;
                    for (j, o) in out.iter_mut().enumerate() {
                        let filt = &self.weights[j * per..(j + 1) * per];
                        let mut acc = 0.0;
                        let mut idx = 0;
                        for dt in 0..k {
                            for ch in 0..c {
                                for dy in 0..k {
                                    let base = (((t + dt) * c + ch) * h + y + dy) * w + x;
                                    for dx in 0..k {
                                        acc += filt[idx] * d[base + dx];
                                        idx += 1;
                                    }
                                }
                            }
                        }
                        *o += acc.abs();
                    }
                }
            }
        }
        for o in &mut out {
            *o /= count as f64;
        }
        Ok(out)
    }
}

fn gaussian_fit(rows: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = rows.len() as f64;
    let d = rows[0].len();
    let mut mean = DVector::zeros(d);
    for r in rows {
        mean += DVector::from_column_slice(r);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for r in rows {
        let v = DVector::from_column_slice(r) - &mean;
        cov += &v * v.transpose();
    }
    (mean, cov / n)
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two embedding sets.
///
/// Covariances use the population normalization, so duplicating both sets
/// leaves the distance unchanged.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let dim = a.first().map(Vec::len).unwrap_or(0);
    let need = dim + 1;
    if a.len() < need || b.len() < need {
        return Err(Error::Evaluation(format!(
            "Fréchet distance needs at least {need} samples per set, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|r| r.len() != dim) {
        return Err(Error::Evaluation("embeddings have inconsistent sizes".into()));
    }
    let (ma, ca) = gaussian_fit(a);
    let (mb, cb) = gaussian_fit(b);
    let sa = sqrt_psd(&ca);
    let cross = sqrt_psd(&(&sa * &cb * &sa));
    let value = (ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross.trace();
    Ok(value.max(0.0))
}

/// Fréchet distance between two clip sets under the extractor for `feature_seed`.
pub fn frechet_feature_distance(a: &[&Tensor], b: &[&Tensor], feature_seed: u64) -> Result<f64> {
    let channels = a.first().or(b.first()).map(|t| t.shape()[1]).unwrap_or(3);
    let fx = FeatureExtractor::new(feature_seed, channels);
    let ea = a.iter().map(|t| fx.embed(t)).collect::<Result<Vec<_>>>()?;
    let eb = b.iter().map(|t| fx.embed(t)).collect::<Result<Vec<_>>>()?;
    frechet_distance(&ea, &eb)
}

fn mean_face_feature(clip: &VideoClip, ae: &ToyAutoencoder, cfg: &FaceFeatureConfig) -> Result<Vec<f64>> {
    if clip.face_track.len() != clip.frames() {
        return Err(Error::Evaluation(format!(
            "clip has {} face boxes for {} frames",
            clip.face_track.len(),
            clip.frames()
        )));
    }
    let mut acc = vec![0.0; cfg.dim()];
    let (c, h, w) = (clip.pixels.shape()[1], clip.height(), clip.width());
    for (f, bx) in clip.face_track.iter().enumerate() {
        if !bx.is_valid_in(w, h) {
            return Err(Error::Evaluation(format!("degenerate face box {bx:?} in frame {f}")));
        }
        let frame = Tensor::from_vec(&[c, h, w], clip.pixels.outer(f).to_vec())?;
        let v = face_feature_from_frame(&frame, *bx, ae, cfg)?.vector;
        for (a, b) in acc.iter_mut().zip(v) {
            *a += b;
        }
    }
    for a in &mut acc {
        *a /= clip.frames() as f64;
    }
    Ok(acc)
}

/// Cosine similarity of frame-averaged face features along each clip's face track.
pub fn face_identity_similarity(
    pred: &VideoClip,
    reference: &VideoClip,
    ae: &ToyAutoencoder,
    crop_size: usize,
) -> Result<f64> {
    let cfg = FaceFeatureConfig {
        crop_size,
        ..FaceFeatureConfig::default()
    };
    let a = mean_face_feature(pred, ae, &cfg)?;
    let b = mean_face_feature(reference, ae, &cfg)?;
    Ok(cosine_similarity(&a, &b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub schema_version: u32,
    pub l1: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub frechet: f64,
    pub identity: f64,
    /// Mean squared error inside the ground-truth motion mask.
    pub masked_mse: f64,
    pub clips: usize,
    pub feature_seed: u64,
    pub config_digest: String,
}

impl EvalReport {
    pub fn is_finite(&self) -> bool {
        [self.l1, self.psnr, self.ssim, self.frechet, self.identity, self.masked_mse]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub feature_seed: u64,
    pub crop_size: usize,
    /// Motion threshold for the masked error.
    pub delta: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            feature_seed: DEFAULT_FEATURE_SEED,
            crop_size: crate::conditioning::DEFAULT_CROP_SIZE,
            delta: crate::conditioning::DEFAULT_DELTA,
        }
    }
}

/// Scores predicted clips against aligned ground truth.
pub fn evaluate_clips(
    pred: &[VideoClip],
    truth: &[VideoClip],
    ae: &ToyAutoencoder,
    settings: &EvalSettings,
    config_digest: &str,
) -> Result<EvalReport> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Evaluation(format!(
            "need equally many non-zero predicted and true clips, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let n = pred.len() as f64;
    let (mut l1, mut psnr, mut ssim, mut id, mut mm) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        let m = frame_metrics(&p.pixels, &t.pixels)?;
        l1 += m.l1;
        psnr += m.psnr;
        ssim += m.ssim;
        id += face_identity_similarity(p, t, ae, settings.crop_size)?;
        mm += masked_mse(&p.pixels, &t.pixels, settings.delta)?;
    }
    let pa: Vec<&Tensor> = pred.iter().map(|c| &c.pixels).collect();
    let ta: Vec<&Tensor> = truth.iter().map(|c| &c.pixels).collect();
    let frechet = frechet_feature_distance(&pa, &ta, settings.feature_seed)?;
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        l1: l1 / n,
        psnr: psnr / n,
        ssim: ssim / n,
        frechet,
        identity: id / n,
        masked_mse: mm / n,
        clips: pred.len(),
        feature_seed: settings.feature_seed,
        config_digest: config_digest.to_string(),
    })
}

/// Aligned text table, one row per labelled report.
pub fn format_table(rows: &[(String, EvalReport)]) -> String {
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(5);
    let mut out = format!(
        "{:<label_w$}  {:>8}  {:>8}  {:>7}  {:>10}  {:>8}  {:>10}\n",
        "run", "L1", "PSNR", "SSIM", "FD-rand", "ID-cos", "mask-MSE"
    );
    for (label, r) in rows {
        out.push_str(&format!(
            "{:<label_w$}  {:>8.4}  {:>8.2}  {:>7.4}  {:>10.5}  {:>8.4}  {:>10.6}\n",
            label, r.l1, r.psnr, r.ssim, r.frechet, r.identity, r.masked_mse
        ));
    }
    out
}
