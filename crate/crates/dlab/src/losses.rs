//! Training objectives: perceptual reconstruction, least-squares feature
//! adversary (both classifier and encoder sides), color consistency over
//! mask-weighted intensity statistics, and the weighted total.
//!
//! Each loss exists twice: a tape-level builder used inside training and
//! gradient checks, and a value-level wrapper over the public domain types.

use ndarray::Array2;

use crate::autodiff::{bind_params, Real, Tape, Var};
use crate::config::{AdvLossMode, ColorStatNormalizer, TrainConfig};
use crate::error::{Error, Result};
use crate::networks::to_nchw;
use crate::perceptual::{pyramid_forward, PerceptualExtractor};
use crate::types::{ClassifierScore, ImageBatch, MaskSet};

/// Epsilon guarding empty masks in `mask_mass` normalization.
pub const MASK_MASS_EPS: f64 = 1e-6;

/// Mask-weighted intensity statistics, one (mean, variance) per mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorStats {
    pub mean: Array2<f32>,
    pub variance: Array2<f32>,
}

/// Scalar values of every objective for one step.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub adv_classifier: f64,
    pub adv_encoders: f64,
    pub color: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Name of the first non-finite component, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("recon", self.recon),
            ("adv_classifier", self.adv_classifier),
            ("adv_encoders", self.adv_encoders),
            ("color", self.color),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

// ---------------------------------------------------------------------------
// Tape-level builders.
// ---------------------------------------------------------------------------

/// Weighted sum over pyramid layers of the mean absolute feature
/// difference (batch mean included).
pub fn reconstruction_loss_t<F: Real>(
    tape: &mut Tape<F>,
    pyramid_x: &[Var],
    pyramid_y: &[Var],
    layer_weights: &[f64],
) -> Var {
    assert_eq!(pyramid_x.len(), pyramid_y.len());
    assert_eq!(pyramid_x.len(), layer_weights.len());
    let mut total: Option<Var> = None;
    for ((&fx, &fy), &phi) in pyramid_x.iter().zip(pyramid_y).zip(layer_weights) {
        let diff = tape.sub(fx, fy);
        let mag = tape.abs(diff);
        let mean = tape.mean_all(mag);
        let weighted = tape.scale(mean, F::from_f64(phi));
        total = Some(match total {
            Some(t) => tape.add(t, weighted),
            None => weighted,
        });
    }
    total.expect("at least one pyramid layer")
}

/// Classifier side of the least-squares game:
/// `mean((s_true - 1)^2 + s_false^2)`.
pub fn classifier_adv_loss_t<F: Real>(tape: &mut Tape<F>, s_true: Var, s_false: Var) -> Var {
    let shifted = tape.add_scalar(s_true, F::ZERO - F::ONE);
    let t_sq = tape.square(shifted);
    let f_sq = tape.square(s_false);
    let t_mean = tape.mean_all(t_sq);
    let f_mean = tape.mean_all(f_sq);
    tape.add(t_mean, f_mean)
}

/// Encoder side of the game. `LiteralEq3` penalizes the true-pair score
/// toward 0.5; `CorrectedEq3` pushes the mixed pair toward the "real" label.
pub fn encoder_adv_loss_t<F: Real>(
    tape: &mut Tape<F>,
    s_true: Var,
    s_false: Var,
    mode: AdvLossMode,
) -> Var {
    match mode {
        AdvLossMode::LiteralEq3 => {
            let shifted = tape.add_scalar(s_true, F::ZERO - F::ONE);
            let a = tape.square(shifted);
            let b = tape.square(s_true);
            let am = tape.mean_all(a);
            let bm = tape.mean_all(b);
            tape.add(am, bm)
        }
        AdvLossMode::CorrectedEq3 => {
            let shifted = tape.add_scalar(s_false, F::ZERO - F::ONE);
            let sq = tape.square(shifted);
            tape.mean_all(sq)
        }
    }
}

/// Mask-weighted mean/variance of image intensity.
///
/// Input images are NCHW; masks are at encoder resolution and upsampled
/// here. Channels collapse to intensity before statistics. Returns
/// `(mean, variance)` as `(B, m)` nodes.
pub fn masked_color_stats_t<F: Real>(
    tape: &mut Tape<F>,
    images: Var,
    masks: Var,
    normalizer: ColorStatNormalizer,
) -> (Var, Var) {
    let (b, m) = {
        let s = tape.value(masks).shape();
        (s[0], s[1])
    };
    let (h, w) = {
        let s = tape.value(images).shape();
        (s[2], s[3])
    };
    let up = tape.bilinear_up(masks, h, w); // (B, m, H, W)
    let intensity3 = tape.mean_axes(images, &[1]); // (B, H, W)
    let intensity = tape.reshape(intensity3, &[b, 1, h, w]);
    let patches = tape.mul(intensity, up); // (B, m, H, W)

    match normalizer {
        ColorStatNormalizer::TotalPixels => {
            let mean = tape.mean_axes(patches, &[2, 3]); // (B, m)
            let mean4 = tape.reshape(mean, &[b, m, 1, 1]);
            let centered = tape.sub(patches, mean4);
            let sq = tape.square(centered);
            let variance = tape.mean_axes(sq, &[2, 3]);
            (mean, variance)
        }
        ColorStatNormalizer::MaskMass => {
            let mass_raw = tape.sum_axes(up, &[2, 3]); // (B, m)
            let mass = tape.add_scalar(mass_raw, F::from_f64(MASK_MASS_EPS));
            let total = tape.sum_axes(patches, &[2, 3]);
            let mean = tape.div(total, mass);
            let mean4 = tape.reshape(mean, &[b, m, 1, 1]);
            let centered = tape.sub(patches, mean4);
            let sq = tape.square(centered);
            let sq_total = tape.sum_axes(sq, &[2, 3]);
            let variance = tape.div(sq_total, mass);
            (mean, variance)
        }
    }
}

/// Mean over batch and masks of squared statistic differences.
pub fn color_consistency_loss_t<F: Real>(
    tape: &mut Tape<F>,
    stats_mix: (Var, Var),
    stats_src: (Var, Var),
) -> Var {
    let d_mean = tape.sub(stats_mix.0, stats_src.0);
    let d_var = tape.sub(stats_mix.1, stats_src.1);
    let sq_mean = tape.square(d_mean);
    let sq_var = tape.square(d_var);
    let sum = tape.add(sq_mean, sq_var);
    tape.mean_all(sum)
}

// ---------------------------------------------------------------------------
// Value-level operations over the public domain types.
// ---------------------------------------------------------------------------

/// Perceptual reconstruction loss between two image batches.
pub fn reconstruction_loss(
    original: &ImageBatch,
    reconstructed: &ImageBatch,
    extractor: &PerceptualExtractor<f32>,
) -> Result<f64> {
    if original.0.shape() != reconstructed.0.shape() {
        return Err(Error::Shape(format!(
            "reconstruction_loss: {:?} vs {:?}",
            original.0.shape(),
            reconstructed.0.shape()
        )));
    }
    let mut tape = Tape::<f32>::new();
    let xa = tape.constant(to_nchw(&original.0).into_dyn());
    let xb = tape.constant(to_nchw(&reconstructed.0).into_dyn());
    let bound = bind_params(&mut tape, &extractor.params, false);
    let pyr_a = pyramid_forward(&mut tape, xa, &bound, extractor.num_stages());
    let pyr_b = pyramid_forward(&mut tape, xb, &bound, extractor.num_stages());
    let loss = reconstruction_loss_t(&mut tape, &pyr_a, &pyr_b, &extractor.layer_weights);
    Ok(tape.scalar(loss) as f64)
}

fn score_mean<F>(scores: &ClassifierScore, f: F) -> f64
where
    F: Fn(f64) -> f64,
{
    let n = scores.0.len().max(1) as f64;
    scores.0.iter().map(|&s| f(s as f64)).sum::<f64>() / n
}

/// `mean((s_true - 1)^2 + s_false^2)`.
pub fn classifier_adv_loss(s_true: &ClassifierScore, s_false: &ClassifierScore) -> Result<f64> {
    if s_true.0.len() != s_false.0.len() {
        return Err(Error::Shape("classifier_adv_loss: batch size mismatch".into()));
    }
    Ok(score_mean(s_true, |s| (s - 1.0).powi(2)) + score_mean(s_false, |s| s * s))
}

/// Encoder-side adversarial loss in either printed or corrected form.
pub fn encoder_adv_loss(
    s_true: &ClassifierScore,
    s_false: &ClassifierScore,
    mode: AdvLossMode,
) -> Result<f64> {
    if s_true.0.len() != s_false.0.len() {
        return Err(Error::Shape("encoder_adv_loss: batch size mismatch".into()));
    }
    Ok(match mode {
        AdvLossMode::LiteralEq3 => {
            score_mean(s_true, |s| (s - 1.0).powi(2)) + score_mean(s_true, |s| s * s)
        }
        AdvLossMode::CorrectedEq3 => score_mean(s_false, |s| (s - 1.0).powi(2)),
    })
}

/// Mask-weighted intensity statistics of an image batch.
pub fn masked_color_stats(
    images: &ImageBatch,
    masks: &MaskSet,
    normalizer: ColorStatNormalizer,
) -> Result<ColorStats> {
    if images.batch() != masks.batch() {
        return Err(Error::Shape("masked_color_stats: batch mismatch".into()));
    }
    if images.height() % masks.height() != 0 || images.width() % masks.width() != 0 {
        return Err(Error::Shape(
            "masked_color_stats: image size is not a multiple of mask size".into(),
        ));
    }
    let mut tape = Tape::<f32>::new();
    let imgs = tape.constant(to_nchw(&images.0).into_dyn());
    let mask_var = tape.constant(masks.0.clone().into_dyn());
    let (mean, variance) = masked_color_stats_t(&mut tape, imgs, mask_var, normalizer);
    let mean = tape.value(mean).clone().into_dimensionality().expect("stats rank");
    let variance = tape.value(variance).clone().into_dimensionality().expect("stats rank");
    Ok(ColorStats { mean, variance })
}

/// `(1/m) sum_i ((mu_mix - mu_src)^2 + (sigma_mix - sigma_src)^2)`,
/// averaged over the batch.
pub fn color_consistency_loss(stats_mix: &ColorStats, stats_src: &ColorStats) -> Result<f64> {
    if stats_mix.mean.dim() != stats_src.mean.dim() {
        return Err(Error::Shape(format!(
            "color_consistency_loss: {:?} vs {:?}",
            stats_mix.mean.dim(),
            stats_src.mean.dim()
        )));
    }
    let n = stats_mix.mean.len() as f64;
    let mut acc = 0.0f64;
    for ((&m1, &m2), (&v1, &v2)) in stats_mix
        .mean
        .iter()
        .zip(stats_src.mean.iter())
        .zip(stats_mix.variance.iter().zip(stats_src.variance.iter()))
    {
        acc += (m1 as f64 - m2 as f64).powi(2) + (v1 as f64 - v2 as f64).powi(2);
    }
    Ok(acc / n)
}

/// Generator-side weighted total.
pub fn total_loss(recon: f64, adv_encoders: f64, color: f64, cfg: &TrainConfig) -> f64 {
    cfg.lambda_recon * recon + cfg.lambda_adv * adv_encoders + cfg.lambda_color * color
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ColorStatNormalizer::{MaskMass, TotalPixels};
    use crate::perceptual::fixed_random_extractor;
    use ndarray::{Array1, Array4};

    fn scores(values: &[f32]) -> ClassifierScore {
        ClassifierScore(Array1::from_vec(values.to_vec()))
    }

    #[test]
    fn reconstruction_of_identical_images_is_zero() {
        let ex = fixed_random_extractor::<f32>(1, 3);
        let mut data = Array4::zeros((2, 32, 32, 3));
        data.iter_mut().enumerate().for_each(|(i, v)| *v = ((i % 9) as f32 / 4.5) - 1.0);
        let x = ImageBatch(data);
        assert_eq!(reconstruction_loss(&x, &x, &ex).unwrap(), 0.0);
    }

    #[test]
    fn reconstruction_linear_in_layer_weights() {
        let mut ex = fixed_random_extractor::<f32>(2, 2);
        let a = ImageBatch(Array4::from_elem((1, 16, 16, 3), 0.5f32));
        let b = ImageBatch(Array4::from_elem((1, 16, 16, 3), -0.25f32));
        let base = reconstruction_loss(&a, &b, &ex).unwrap();
        for w in ex.layer_weights.iter_mut() {
            *w *= 2.0;
        }
        let doubled = reconstruction_loss(&a, &b, &ex).unwrap();
        assert!((doubled - 2.0 * base).abs() < 1e-9 * base.abs().max(1.0));
    }

    #[test]
    fn identity_layer_reconstruction_matches_hand_value() {
        // Phi = identity, phi = 1: loss is the mean absolute difference
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1, 3, 4, 4]), 0.5));
        let y = tape.constant(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1, 3, 4, 4]), 0.25));
        let loss = reconstruction_loss_t(&mut tape, &[x], &[y], &[1.0]);
        assert_eq!(tape.scalar(loss), 0.25);
    }

    #[test]
    fn classifier_loss_examples() {
        assert_eq!(classifier_adv_loss(&scores(&[1.0]), &scores(&[0.0])).unwrap(), 0.0);
        assert_eq!(classifier_adv_loss(&scores(&[0.5]), &scores(&[0.5])).unwrap(), 0.5);
        assert_eq!(classifier_adv_loss(&scores(&[0.0]), &scores(&[1.0])).unwrap(), 2.0);
    }

    #[test]
    fn encoder_loss_examples() {
        let s_half = scores(&[0.5]);
        let s_one = scores(&[1.0]);
        let dummy = scores(&[0.0]);
        assert_eq!(encoder_adv_loss(&s_half, &dummy, AdvLossMode::LiteralEq3).unwrap(), 0.5);
        assert_eq!(encoder_adv_loss(&s_one, &dummy, AdvLossMode::LiteralEq3).unwrap(), 1.0);
        assert_eq!(encoder_adv_loss(&dummy, &s_one, AdvLossMode::CorrectedEq3).unwrap(), 0.0);
    }

    #[test]
    fn literal_minimum_is_at_one_half() {
        // (x-1)^2 + x^2 has its minimum 0.5 at x = 0.5
        let at = |x: f32| {
            encoder_adv_loss(&scores(&[x]), &scores(&[0.0]), AdvLossMode::LiteralEq3).unwrap()
        };
        assert_eq!(at(0.5), 0.5);
        for x in [0.0f32, 0.25, 0.49, 0.51, 0.75, 1.0] {
            assert!(at(x) >= 0.5);
        }
    }

    fn intensity_image(values: [[f32; 2]; 2]) -> ImageBatch {
        let mut data = Array4::zeros((1, 2, 2, 3));
        for y in 0..2 {
            for x in 0..2 {
                for c in 0..3 {
                    data[[0, y, x, c]] = values[y][x];
                }
            }
        }
        ImageBatch(data)
    }

    #[test]
    fn color_stats_hand_examples() {
        let img = intensity_image([[1.0, 0.0], [0.0, 1.0]]);
        let ones = MaskSet(Array4::from_elem((1, 1, 2, 2), 1.0f32));
        let stats = masked_color_stats(&img, &ones, TotalPixels).unwrap();
        assert!((stats.mean[[0, 0]] - 0.5).abs() < 1e-7);
        assert!((stats.variance[[0, 0]] - 0.25).abs() < 1e-7);

        let mut corner = Array4::zeros((1, 1, 2, 2));
        corner[[0, 0, 0, 0]] = 1.0f32;
        let stats = masked_color_stats(&img, &MaskSet(corner), TotalPixels).unwrap();
        assert!((stats.mean[[0, 0]] - 0.25).abs() < 1e-7);
        assert!((stats.variance[[0, 0]] - 0.1875).abs() < 1e-7);

        let zeros = MaskSet(Array4::zeros((1, 1, 2, 2)));
        let stats = masked_color_stats(&img, &zeros, TotalPixels).unwrap();
        assert_eq!(stats.mean[[0, 0]], 0.0);
        assert_eq!(stats.variance[[0, 0]], 0.0);
    }

    #[test]
    fn mask_mass_normalizer_handles_empty_masks() {
        let img = intensity_image([[1.0, 0.0], [0.0, 1.0]]);
        let zeros = MaskSet(Array4::zeros((1, 1, 2, 2)));
        let stats = masked_color_stats(&img, &zeros, MaskMass).unwrap();
        assert!(stats.mean[[0, 0]].abs() < 1e-6);
        assert!(stats.variance[[0, 0]].abs() < 1e-6);
        // full mask: mass normalizer matches total pixels (up to epsilon)
        let ones = MaskSet(Array4::from_elem((1, 1, 2, 2), 1.0f32));
        let a = masked_color_stats(&img, &ones, MaskMass).unwrap();
        let b = masked_color_stats(&img, &ones, TotalPixels).unwrap();
        assert!((a.mean[[0, 0]] - b.mean[[0, 0]]).abs() < 1e-5);
    }

    #[test]
    fn color_consistency_examples() {
        let stats = |mu: Vec<f32>, var: Vec<f32>| ColorStats {
            mean: Array2::from_shape_vec((1, mu.len()), mu).unwrap(),
            variance: Array2::from_shape_vec((1, var.len()), var).unwrap(),
        };
        let a = stats(vec![0.3, 0.4], vec![0.1, 0.2]);
        assert_eq!(color_consistency_loss(&a, &a).unwrap(), 0.0);

        let b = stats(vec![0.4, 0.4], vec![0.1, 0.4]);
        // delta mu = (0.1, 0), delta sigma = (0, 0.2) -> (0.01 + 0.04)/2
        let v = color_consistency_loss(&a, &b).unwrap();
        assert!((v - 0.025).abs() < 1e-7, "{v}");
        let w = color_consistency_loss(&b, &a).unwrap();
        assert_eq!(v, w);
    }

    #[test]
    fn total_loss_weighting() {
        let cfg = TrainConfig::default();
        let total = total_loss(1.0, 1.0, 1.0, &cfg);
        assert!((total - 2.01).abs() < 1e-12);

        let zero = TrainConfig {
            lambda_recon: 0.0,
            lambda_adv: 0.0,
            lambda_color: 0.0,
            ..TrainConfig::default()
        };
        assert_eq!(total_loss(3.0, 5.0, 7.0, &zero), 0.0);

        let mut doubled = cfg.clone();
        doubled.lambda_color *= 2.0;
        let t2 = total_loss(1.0, 1.0, 1.0, &doubled);
        assert!((t2 - (total + cfg.lambda_color)).abs() < 1e-12);
    }

    #[test]
    fn tape_and_value_color_stats_agree() {
        // same computation through the public wrapper and a hand loop
        let mut data = Array4::zeros((2, 8, 8, 3));
        data.iter_mut().enumerate().for_each(|(i, v)| *v = ((i % 23) as f32 / 11.5) - 1.0);
        let img = ImageBatch(data);
        let mut masks = Array4::zeros((2, 3, 4, 4));
        masks.iter_mut().enumerate().for_each(|(i, v)| *v = ((i % 7) as f32) / 7.0);
        let masks = MaskSet(masks);
        let stats = masked_color_stats(&img, &masks, TotalPixels).unwrap();

        let up = crate::networks::resize_broadcast(&masks, 8, 8).unwrap();
        for b in 0..2 {
            for m in 0..3 {
                let mut acc = 0.0f64;
                for y in 0..8 {
                    for x in 0..8 {
                        let inten = (img.0[[b, y, x, 0]] + img.0[[b, y, x, 1]] + img.0[[b, y, x, 2]])
                            as f64
                            / 3.0;
                        acc += inten * up[[b, m, y, x]] as f64;
                    }
                }
                let mu = acc / 64.0;
                assert!((stats.mean[[b, m]] as f64 - mu).abs() < 1e-5);
            }
        }
    }
}
