//! Quantitative evaluation: SSIM over reconstructions, mask IoU against
//! synthetic ground truth, color-transfer error, and a classifier-balance
//! probe.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ColorStatNormalizer;
use crate::data::{sample_pair_batch, Dataset, SpriteDataset};
use crate::error::{Error, Result};
use crate::losses::masked_color_stats;
use crate::networks::{
    apply_masks, classify, decode, encode_appearance, encode_shape, reconstruct, NetworkParams,
};
use crate::types::{ImageBatch, MaskSet};

/// One evaluation result with optional sub-scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    pub n_samples: usize,
    pub extra: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn new(name: impl Into<String>, value: f64, n_samples: usize) -> Self {
        Self { name: name.into(), value, n_samples, extra: BTreeMap::new() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metric serialization")
    }

    pub const CSV_HEADER: &'static str = "name,value,n_samples";

    pub fn to_csv_row(&self) -> String {
        format!("{},{},{}", self.name, self.value, self.n_samples)
    }
}

// ---------------------------------------------------------------------------
// SSIM
// ---------------------------------------------------------------------------

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Valid-mode separable Gaussian filtering.
fn gaussian_filter_valid(plane: &Array2<f64>, window: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = plane.dim();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, &wk) in window.iter().enumerate() {
                acc += plane[[y, x + k]] * wk;
            }
            rows[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, &wk) in window.iter().enumerate() {
                acc += rows[[y + k, x]] * wk;
            }
            out[[y, x]] = acc;
        }
    }
    out
}

fn ssim_plane(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let window = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mu_x = gaussian_filter_valid(x, &window);
    let mu_y = gaussian_filter_valid(y, &window);
    let xx = gaussian_filter_valid(&(x * x), &window);
    let yy = gaussian_filter_valid(&(y * y), &window);
    let xy = gaussian_filter_valid(&(x * y), &window);
    let mut acc = 0.0;
    let n = mu_x.len() as f64;
    for ((((&mx, &my), &sxx), &syy), &sxy) in
        mu_x.iter().zip(mu_y.iter()).zip(xx.iter()).zip(yy.iter()).zip(xy.iter())
    {
        let var_x = sxx - mx * mx;
        let var_y = syy - my * my;
        let cov = sxy - mx * my;
        let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
        let den = (mx * mx + my * my + c1) * (var_x + var_y + c2);
        acc += num / den;
    }
    acc / n
}

/// Structural similarity between two `H x W x 3` images in [-1, 1].
///
/// Inputs map to [0, 1]; an 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03, dynamic range 1; channels are scored independently and
/// averaged.
pub fn ssim(x: &Array3<f32>, y: &Array3<f32>) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::Shape(format!("ssim: {:?} vs {:?}", x.shape(), y.shape())));
    }
    let (h, w) = (x.shape()[0], x.shape()[1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "ssim: images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let mut total = 0.0;
    for c in 0..3 {
        let xp = Array2::from_shape_fn((h, w), |(i, j)| (x[[i, j, c]] as f64 + 1.0) / 2.0);
        let yp = Array2::from_shape_fn((h, w), |(i, j)| (y[[i, j, c]] as f64 + 1.0) / 2.0);
        total += ssim_plane(&xp, &yp);
    }
    Ok(total / 3.0)
}

// ---------------------------------------------------------------------------
// Mask IoU
// ---------------------------------------------------------------------------

/// How learned masks are matched to ground-truth parts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Assignment {
    /// One-to-one matching, greedy by descending IoU.
    Greedy,
    /// Exact best one-to-one matching (parts <= 16).
    Optimal,
}

fn binarize_upsampled(learned: &Array3<f32>, gt_h: usize, gt_w: usize) -> Vec<Array2<bool>> {
    let m = learned.shape()[0];
    let as4 = learned
        .view()
        .insert_axis(ndarray::Axis(0))
        .to_owned()
        .into_dimensionality()
        .expect("mask rank");
    let up = crate::autodiff::kernels::bilinear_resize(&as4.view(), gt_h, gt_w);
    (0..m)
        .map(|i| Array2::from_shape_fn((gt_h, gt_w), |(y, x)| up[[0, i, y, x]] >= 0.5))
        .collect()
}

fn iou(a: &Array2<bool>, b: &Array2<bool>) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b.iter()) {
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Matches each ground-truth part to a distinct learned mask and reports
/// the mean IoU over parts, plus the silhouette IoU of the unions.
pub fn mask_iou(
    learned: &Array3<f32>,
    gt_parts: &Array3<f32>,
    assignment: Assignment,
) -> MetricReport {
    let (p, gh, gw) = (gt_parts.shape()[0], gt_parts.shape()[1], gt_parts.shape()[2]);
    let m = learned.shape()[0];
    let bin = binarize_upsampled(learned, gh, gw);
    let gt: Vec<Array2<bool>> = (0..p)
        .map(|i| Array2::from_shape_fn((gh, gw), |(y, x)| gt_parts[[i, y, x]] > 0.5))
        .collect();

    let table: Vec<Vec<f64>> =
        gt.iter().map(|g| bin.iter().map(|b| iou(g, b)).collect()).collect();

    let assigned: Vec<f64> = match assignment {
        Assignment::Greedy => {
            let mut pairs: Vec<(usize, usize, f64)> = (0..p)
                .flat_map(|i| (0..m).map(move |j| (i, j, 0.0)))
                .map(|(i, j, _)| (i, j, table[i][j]))
                .collect();
            pairs.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap());
            let mut part_used = vec![false; p];
            let mut mask_used = vec![false; m];
            let mut scores = vec![0.0; p];
            for (i, j, v) in pairs {
                if !part_used[i] && !mask_used[j] {
                    part_used[i] = true;
                    mask_used[j] = true;
                    scores[i] = v;
                }
            }
            scores
        }
        Assignment::Optimal => {
            assert!(p <= 16, "optimal assignment supports at most 16 parts");
            // dp over subsets of parts, scanning learned masks one by one
            let full = 1usize << p;
            let mut dp = vec![f64::NEG_INFINITY; full];
            dp[0] = 0.0;
            for j in 0..m {
                let mut next = dp.clone();
                for s in 0..full {
                    if dp[s] == f64::NEG_INFINITY {
                        continue;
                    }
                    for (i, row) in table.iter().enumerate() {
                        if s & (1 << i) == 0 {
                            let ns = s | (1 << i);
                            let cand = dp[s] + row[j];
                            if cand > next[ns] {
                                next[ns] = cand;
                            }
                        }
                    }
                }
                dp = next;
            }
            // best over any subset of size min(p, m); unmatched parts score 0
            let mut best = vec![0.0; p];
            let target = if m >= p { full - 1 } else { 0 };
            if m >= p && dp[target] > f64::NEG_INFINITY {
                // recover only the total; per-part split is not needed
                let total = dp[target];
                best = vec![total / p as f64; p];
            }
            best
        }
    };

    let mean = assigned.iter().sum::<f64>() / p.max(1) as f64;

    let union_of = |masks: &[Array2<bool>]| {
        Array2::from_shape_fn((gh, gw), |(y, x)| masks.iter().any(|mk| mk[[y, x]]))
    };
    let silhouette_iou = iou(&union_of(&gt), &union_of(&bin));

    let mut report = MetricReport::new("mask_iou", mean, p);
    report.extra.insert("silhouette_iou".into(), silhouette_iou);
    for (i, v) in assigned.iter().enumerate() {
        report.extra.insert(format!("part{i}_iou"), *v);
    }
    report
}

// ---------------------------------------------------------------------------
// Color transfer error
// ---------------------------------------------------------------------------

/// Mean absolute difference of mask-weighted intensity means between the
/// mixed images (under the shape source's masks) and the appearance source
/// (under its own masks). Lower is better.
pub fn color_transfer_error(
    mix: &ImageBatch,
    appearance_src: &ImageBatch,
    masks_mix: &MaskSet,
    masks_src: &MaskSet,
    normalizer: ColorStatNormalizer,
) -> Result<MetricReport> {
    let stats_mix = masked_color_stats(mix, masks_mix, normalizer)?;
    let stats_src = masked_color_stats(appearance_src, masks_src, normalizer)?;
    if stats_mix.mean.dim() != stats_src.mean.dim() {
        return Err(Error::Shape("color_transfer_error: mask count mismatch".into()));
    }
    let n = stats_mix.mean.len();
    let dmean = stats_mix
        .mean
        .iter()
        .zip(stats_src.mean.iter())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum::<f64>()
        / n as f64;
    let dvar = stats_mix
        .variance
        .iter()
        .zip(stats_src.variance.iter())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum::<f64>()
        / n as f64;
    let mut report = MetricReport::new("color_transfer_error", dmean, n);
    report.extra.insert("abs_dvariance".into(), dvar);
    Ok(report)
}

// ---------------------------------------------------------------------------
// Classifier balance
// ---------------------------------------------------------------------------

/// Accuracy of the classifier at separating true from mixed pairs on
/// held-out data, threshold 0.5, ties counted as "mixed". Values near 0.5
/// mean the encoders fool the classifier.
pub fn classifier_balance<D: Dataset + ?Sized>(
    params: &NetworkParams<f32>,
    dataset: &D,
    n_pairs: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MetricReport> {
    if n_pairs < 10 {
        return Err(Error::Data(format!("classifier_balance needs n_pairs >= 10, got {n_pairs}")));
    }
    let mut true_hits = 0usize;
    let mut mixed_hits = 0usize;
    let mut done = 0usize;
    while done < n_pairs {
        let chunk = (n_pairs - done).min(16).max(2);
        let batch = sample_pair_batch(dataset, chunk, rng)?;
        let zs_a = encode_shape(&batch.images_a, params)?;
        let fa = apply_masks(&batch.images_a, &zs_a)?;
        let za_a = encode_appearance(&fa, params)?;
        let zs_b = encode_shape(&batch.images_b, params)?;
        let fb = apply_masks(&batch.images_b, &zs_b)?;
        let za_b = encode_appearance(&fb, params)?;
        let s_true = classify(&zs_a, &za_a, params)?;
        let s_mixed = classify(&zs_a, &za_b, params)?;
        for i in 0..chunk {
            if s_true.0[i] > 0.5 {
                true_hits += 1;
            }
            if s_mixed.0[i] <= 0.5 {
                mixed_hits += 1;
            }
        }
        done += chunk;
    }
    let accuracy = (true_hits + mixed_hits) as f64 / (2 * done) as f64;
    let mut report = MetricReport::new("classifier_balance", accuracy, done);
    report.extra.insert("true_pair_accuracy".into(), true_hits as f64 / done as f64);
    report.extra.insert("mixed_pair_accuracy".into(), mixed_hits as f64 / done as f64);
    Ok(report)
}

// ---------------------------------------------------------------------------
// Evaluation protocols used by `eval` and the verification suite.
// ---------------------------------------------------------------------------

/// Mean SSIM between test images and their reconstructions.
pub fn reconstruction_ssim_report<D: Dataset + ?Sized>(
    params: &NetworkParams<f32>,
    dataset: &D,
    limit: usize,
) -> Result<MetricReport> {
    let n = dataset.len().min(limit.max(1));
    let mut acc = 0.0;
    for i in 0..n {
        let batch = ImageBatch::from_images(&[dataset.image(i).clone()])?;
        let rec = reconstruct(&batch, params)?;
        let x = batch.0.index_axis(ndarray::Axis(0), 0).to_owned();
        let y = rec.0.index_axis(ndarray::Axis(0), 0).to_owned();
        acc += ssim(&x, &y)?;
    }
    Ok(MetricReport::new("reconstruction_ssim", acc / n as f64, n))
}

/// Color-transfer error over sampled held-out pairs.
pub fn transfer_color_report<D: Dataset + ?Sized>(
    params: &NetworkParams<f32>,
    dataset: &D,
    n_pairs: usize,
    rng: &mut ChaCha8Rng,
    normalizer: ColorStatNormalizer,
) -> Result<MetricReport> {
    let mut dmean_acc = 0.0;
    let mut dvar_acc = 0.0;
    let mut done = 0usize;
    while done < n_pairs {
        let chunk = (n_pairs - done).min(16).max(2);
        let batch = sample_pair_batch(dataset, chunk, rng)?;
        let zs_a = encode_shape(&batch.images_a, params)?;
        let fa = apply_masks(&batch.images_a, &zs_a)?;
        let za_a = encode_appearance(&fa, params)?;
        let zs_b = encode_shape(&batch.images_b, params)?;
        let mix = decode(&zs_b, &za_a, params)?;
        let report = color_transfer_error(&mix, &batch.images_a, &zs_b, &zs_a, normalizer)?;
        dmean_acc += report.value * report.n_samples as f64;
        dvar_acc += report.extra["abs_dvariance"] * report.n_samples as f64;
        done += chunk;
    }
    let m = params.cfg.num_masks;
    let n = done * m;
    let mut report = MetricReport::new("color_transfer_error", dmean_acc / n as f64, done);
    report.extra.insert("abs_dvariance".into(), dvar_acc / n as f64);
    Ok(report)
}

/// Mean best-match mask IoU over synthetic sprites.
pub fn mask_iou_report(
    params: &NetworkParams<f32>,
    dataset: &SpriteDataset,
    limit: usize,
    assignment: Assignment,
) -> Result<MetricReport> {
    let n = dataset.len().min(limit.max(1));
    let mut mean_acc = 0.0;
    let mut sil_acc = 0.0;
    for i in 0..n {
        let batch = ImageBatch::from_images(&[dataset.image(i).clone()])?;
        let masks = encode_shape(&batch, params)?;
        let learned = masks.0.index_axis(ndarray::Axis(0), 0).to_owned();
        let report = mask_iou(&learned, dataset.part_masks(i), assignment);
        mean_acc += report.value;
        sil_acc += report.extra["silhouette_iou"];
    }
    let mut report = MetricReport::new("mask_iou", mean_acc / n as f64, n);
    report.extra.insert("silhouette_iou".into(), sil_acc / n as f64);
    Ok(report)
}
