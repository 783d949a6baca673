//! Model and training configuration: schema, defaults, the flat
//! `key = value` file format, and validation.
//!
//! The file format is one `key = value` per line with `#` comments.
//! Unknown keys are errors. The special key `preset` (`paper` or `desk`)
//! applies a bundle of defaults before any other key in the file is read.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-pixel activation used on the last shape-encoder layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskActivation {
    /// Independent saturation of each mask pixel into [0, 1].
    Sigmoid,
    /// Masks compete per pixel: softmax across the mask axis.
    SoftmaxOverMasks,
}

/// Which form of the encoder adversarial objective to optimize.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdvLossMode {
    /// `(s_true - 1)^2 + s_true^2`, minimized when the classifier outputs 0.5
    /// on the true pair.
    LiteralEq3,
    /// `(s_false - 1)^2`, the standard least-squares generator objective on
    /// the mixed pair.
    CorrectedEq3,
}

/// Normalizer for masked color statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColorStatNormalizer {
    /// Divide by H*W, the total pixel count of the image.
    TotalPixels,
    /// Divide by the mask's total weight (plus a small epsilon).
    MaskMass,
}

/// Ablation presets: reconstruction only, plus disentanglement losses,
/// plus shape-prior initialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    Base,
    BaseDisentangle,
    Full,
}

/// Which side updates first within a training step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpdateOrder {
    ClassifierFirst,
    GeneratorFirst,
}

/// How to initialize network parameters before training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitMode {
    /// Derived from the ablation: `full` uses `shape_prior`, others `random`.
    Auto,
    Random,
    /// Warm-start the shape encoder on synthetic ground-truth part masks.
    ShapePrior,
}

/// Architecture-shaping configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// Number of shape masks `m`.
    pub num_masks: usize,
    /// Length `d` of each appearance feature vector.
    pub appearance_dim: usize,
    /// Mask resolution is image resolution divided by this (power of two).
    pub downsample_factor: usize,
    /// Channel width after the decoder's 1x1 fusion convolution.
    pub decoder_fuse_channels: usize,
    pub mask_activation: MaskActivation,
    pub adv_loss_mode: AdvLossMode,
    pub color_stat_normalizer: ColorStatNormalizer,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_height: 64,
            image_width: 64,
            num_masks: 14,
            appearance_dim: 32,
            downsample_factor: 4,
            decoder_fuse_channels: 32,
            mask_activation: MaskActivation::Sigmoid,
            adv_loss_mode: AdvLossMode::CorrectedEq3,
            color_stat_normalizer: ColorStatNormalizer::TotalPixels,
        }
    }
}

impl ModelConfig {
    /// Mask height/width implied by the image size and downsample factor.
    pub fn mask_height(&self) -> usize {
        self.image_height / self.downsample_factor
    }

    pub fn mask_width(&self) -> usize {
        self.image_width / self.downsample_factor
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_masks < 1 {
            return Err(Error::Config(format!(
                "num_masks must be >= 1, got {}",
                self.num_masks
            )));
        }
        if self.appearance_dim < 1 {
            return Err(Error::Config(format!(
                "appearance_dim must be >= 1, got {}",
                self.appearance_dim
            )));
        }
        if self.decoder_fuse_channels < 1 {
            return Err(Error::Config(format!(
                "decoder_fuse_channels must be >= 1, got {}",
                self.decoder_fuse_channels
            )));
        }
        if !self.downsample_factor.is_power_of_two() {
            return Err(Error::Config(format!(
                "downsample_factor must be a power of two (stride-2 stages), got {}",
                self.downsample_factor
            )));
        }
        for (name, dim) in [
            ("image_height", self.image_height),
            ("image_width", self.image_width),
        ] {
            if dim == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
            if dim % self.downsample_factor != 0 {
                return Err(Error::Config(format!(
                    "{name} = {dim} is not divisible by downsample_factor = {}",
                    self.downsample_factor
                )));
            }
        }
        Ok(())
    }
}

/// Optimization and schedule configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the perceptual reconstruction loss.
    pub lambda_recon: f64,
    /// Weight of the encoder adversarial loss.
    pub lambda_adv: f64,
    /// Weight of the color consistency loss.
    pub lambda_color: f64,
    pub base_lr: f64,
    /// Extra multiplier on the shape encoder's learning rate.
    pub shape_encoder_lr_factor: f64,
    /// Fractional decay applied every `lr_decay_every` iterations.
    pub lr_decay_rate: f64,
    pub lr_decay_every: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub total_iters: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub checkpoint_every: usize,
    pub update_order: UpdateOrder,
    /// Global-norm gradient clip; 0 disables clipping.
    pub grad_clip: f64,
    pub init_mode: InitMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_recon: 0.01,
            lambda_adv: 1.0,
            lambda_color: 1.0,
            base_lr: 1e-4,
            shape_encoder_lr_factor: 0.1,
            lr_decay_rate: 0.05,
            lr_decay_every: 2500,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            batch_size: 12,
            total_iters: 5000,
            seed: 0,
            ablation: Ablation::Full,
            checkpoint_every: 1000,
            update_order: UpdateOrder::ClassifierFirst,
            grad_clip: 0.0,
            init_mode: InitMode::Auto,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_recon", self.lambda_recon),
            ("lambda_adv", self.lambda_adv),
            ("lambda_color", self.lambda_color),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("shape_encoder_lr_factor", self.shape_encoder_lr_factor),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.lr_decay_rate) {
            return Err(Error::Config(format!(
                "lr_decay_rate must be in [0, 1), got {}",
                self.lr_decay_rate
            )));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::Config("lr_decay_every must be >= 1".into()));
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be >= 2 (pair sampling needs two distinct images), got {}",
                self.batch_size
            )));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be >= 1".into()));
        }
        if self.grad_clip < 0.0 || !self.grad_clip.is_finite() {
            return Err(Error::Config(format!(
                "grad_clip must be >= 0 (0 disables), got {}",
                self.grad_clip
            )));
        }
        Ok(())
    }

    /// Effective loss weights after applying the ablation switch.
    pub fn effective_lambdas(&self) -> (f64, f64, f64) {
        match self.ablation {
            Ablation::Base => (self.lambda_recon, 0.0, 0.0),
            _ => (self.lambda_recon, self.lambda_adv, self.lambda_color),
        }
    }

    /// Initialization mode after resolving `Auto` against the ablation.
    pub fn effective_init_mode(&self) -> InitMode {
        match self.init_mode {
            InitMode::Auto => match self.ablation {
                Ablation::Full => InitMode::ShapePrior,
                _ => InitMode::Random,
            },
            other => other,
        }
    }
}

/// Named bundles of config overrides.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Full-scale settings: batch size 12.
    Paper,
    /// Desk-scale settings: 64x64 images, batch size 8, 5000 iterations.
    Desk,
}

fn apply_preset(preset: Preset, model: &mut ModelConfig, train: &mut TrainConfig) {
    match preset {
        Preset::Paper => {
            train.batch_size = 12;
        }
        Preset::Desk => {
            model.image_height = 64;
            model.image_width = 64;
            train.batch_size = 8;
            train.total_iters = 5000;
        }
    }
}

/// Returns the desk-scale config pair used by the evaluation protocol.
pub fn desk_config() -> (ModelConfig, TrainConfig) {
    let mut model = ModelConfig::default();
    let mut train = TrainConfig::default();
    apply_preset(Preset::Desk, &mut model, &mut train);
    (model, train)
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("key {key}: expected an integer, got '{value}'")))
}

fn parse_u64(key: &str, value: &str) -> Result<u64> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("key {key}: expected an integer, got '{value}'")))
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("key {key}: expected a number, got '{value}'")))
}

fn apply_key(model: &mut ModelConfig, train: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "image_height" => model.image_height = parse_usize(key, value)?,
        "image_width" => model.image_width = parse_usize(key, value)?,
        "num_masks" => model.num_masks = parse_usize(key, value)?,
        "appearance_dim" => model.appearance_dim = parse_usize(key, value)?,
        "downsample_factor" => model.downsample_factor = parse_usize(key, value)?,
        "decoder_fuse_channels" => model.decoder_fuse_channels = parse_usize(key, value)?,
        "mask_activation" => {
            model.mask_activation = match value {
                "sigmoid" => MaskActivation::Sigmoid,
                "softmax_over_masks" => MaskActivation::SoftmaxOverMasks,
                _ => {
                    return Err(Error::Config(format!(
                        "key mask_activation: expected sigmoid|softmax_over_masks, got '{value}'"
                    )))
                }
            }
        }
        "adv_loss_mode" => {
            model.adv_loss_mode = match value {
                "literal_eq3" => AdvLossMode::LiteralEq3,
                "corrected_eq3" => AdvLossMode::CorrectedEq3,
                _ => {
                    return Err(Error::Config(format!(
                        "key adv_loss_mode: expected literal_eq3|corrected_eq3, got '{value}'"
                    )))
                }
            }
        }
        "color_stat_normalizer" => {
            model.color_stat_normalizer = match value {
                "total_pixels" => ColorStatNormalizer::TotalPixels,
                "mask_mass" => ColorStatNormalizer::MaskMass,
                _ => {
                    return Err(Error::Config(format!(
                        "key color_stat_normalizer: expected total_pixels|mask_mass, got '{value}'"
                    )))
                }
            }
        }
        "lambda_recon" => train.lambda_recon = parse_f64(key, value)?,
        "lambda_adv" => train.lambda_adv = parse_f64(key, value)?,
        "lambda_color" => train.lambda_color = parse_f64(key, value)?,
        "base_lr" => train.base_lr = parse_f64(key, value)?,
        "shape_encoder_lr_factor" => train.shape_encoder_lr_factor = parse_f64(key, value)?,
        "lr_decay_rate" => train.lr_decay_rate = parse_f64(key, value)?,
        "lr_decay_every" => train.lr_decay_every = parse_usize(key, value)?,
        "adam_beta1" => train.adam_beta1 = parse_f64(key, value)?,
        "adam_beta2" => train.adam_beta2 = parse_f64(key, value)?,
        "batch_size" => train.batch_size = parse_usize(key, value)?,
        "total_iters" => train.total_iters = parse_usize(key, value)?,
        "seed" => train.seed = parse_u64(key, value)?,
        "ablation" => {
            train.ablation = match value {
                "base" => Ablation::Base,
                "base_disentangle" => Ablation::BaseDisentangle,
                "full" => Ablation::Full,
                _ => {
                    return Err(Error::Config(format!(
                        "key ablation: expected base|base_disentangle|full, got '{value}'"
                    )))
                }
            }
        }
        "checkpoint_every" => train.checkpoint_every = parse_usize(key, value)?,
        "update_order" => {
            train.update_order = match value {
                "classifier_first" => UpdateOrder::ClassifierFirst,
                "generator_first" => UpdateOrder::GeneratorFirst,
                _ => {
                    return Err(Error::Config(format!(
                        "key update_order: expected classifier_first|generator_first, got '{value}'"
                    )))
                }
            }
        }
        "grad_clip" => train.grad_clip = parse_f64(key, value)?,
        "init_mode" => {
            train.init_mode = match value {
                "auto" => InitMode::Auto,
                "random" => InitMode::Random,
                "shape_prior" => InitMode::ShapePrior,
                _ => {
                    return Err(Error::Config(format!(
                        "key init_mode: expected auto|random|shape_prior, got '{value}'"
                    )))
                }
            }
        }
        _ => return Err(Error::Config(format!("unknown key '{key}'"))),
    }
    Ok(())
}

/// Parses configs from the flat text format.
///
/// The `preset` key, wherever it appears, is applied before every other
/// key; remaining keys override the preset in file order.
pub fn parse_config(text: &str) -> Result<(ModelConfig, TrainConfig)> {
    let mut pairs = Vec::new();
    let mut preset = None;
    for (line_no, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(idx) => &raw[..idx],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected 'key = value', got '{line}'", line_no + 1))
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key == "preset" {
            preset = Some(match value.as_str() {
                "paper" => Preset::Paper,
                "desk" => Preset::Desk,
                _ => {
                    return Err(Error::Config(format!(
                        "key preset: expected paper|desk, got '{value}'"
                    )))
                }
            });
        } else {
            pairs.push((key, value));
        }
    }

    let mut model = ModelConfig::default();
    let mut train = TrainConfig::default();
    if let Some(p) = preset {
        apply_preset(p, &mut model, &mut train);
    }
    for (key, value) in &pairs {
        apply_key(&mut model, &mut train, key, value)?;
    }
    model.validate()?;
    train.validate()?;
    Ok((model, train))
}

/// Loads and validates configs from a file.
pub fn load_config(path: &Path) -> Result<(ModelConfig, TrainConfig)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

/// Applies `key=value` overrides (the CLI's `--set`) on top of parsed configs.
pub fn apply_overrides(
    model: &mut ModelConfig,
    train: &mut TrainConfig,
    overrides: &[(String, String)],
) -> Result<()> {
    for (key, value) in overrides {
        apply_key(model, train, key, value)?;
    }
    model.validate()?;
    train.validate()?;
    Ok(())
}

/// Serializes configs back into the flat text format. The output parses to
/// an identical config pair.
pub fn serialize_config(model: &ModelConfig, train: &TrainConfig) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# model");
    let _ = writeln!(out, "image_height = {}", model.image_height);
    let _ = writeln!(out, "image_width = {}", model.image_width);
    let _ = writeln!(out, "num_masks = {}", model.num_masks);
    let _ = writeln!(out, "appearance_dim = {}", model.appearance_dim);
    let _ = writeln!(out, "downsample_factor = {}", model.downsample_factor);
    let _ = writeln!(out, "decoder_fuse_channels = {}", model.decoder_fuse_channels);
    let _ = writeln!(
        out,
        "mask_activation = {}",
        match model.mask_activation {
            MaskActivation::Sigmoid => "sigmoid",
            MaskActivation::SoftmaxOverMasks => "softmax_over_masks",
        }
    );
    let _ = writeln!(
        out,
        "adv_loss_mode = {}",
        match model.adv_loss_mode {
            AdvLossMode::LiteralEq3 => "literal_eq3",
            AdvLossMode::CorrectedEq3 => "corrected_eq3",
        }
    );
    let _ = writeln!(
        out,
        "color_stat_normalizer = {}",
        match model.color_stat_normalizer {
            ColorStatNormalizer::TotalPixels => "total_pixels",
            ColorStatNormalizer::MaskMass => "mask_mass",
        }
    );
    let _ = writeln!(out, "# training");
    let _ = writeln!(out, "lambda_recon = {}", train.lambda_recon);
    let _ = writeln!(out, "lambda_adv = {}", train.lambda_adv);
    let _ = writeln!(out, "lambda_color = {}", train.lambda_color);
    let _ = writeln!(out, "base_lr = {}", train.base_lr);
    let _ = writeln!(out, "shape_encoder_lr_factor = {}", train.shape_encoder_lr_factor);
    let _ = writeln!(out, "lr_decay_rate = {}", train.lr_decay_rate);
    let _ = writeln!(out, "lr_decay_every = {}", train.lr_decay_every);
    let _ = writeln!(out, "adam_beta1 = {}", train.adam_beta1);
    let _ = writeln!(out, "adam_beta2 = {}", train.adam_beta2);
    let _ = writeln!(out, "batch_size = {}", train.batch_size);
    let _ = writeln!(out, "total_iters = {}", train.total_iters);
    let _ = writeln!(out, "seed = {}", train.seed);
    let _ = writeln!(
        out,
        "ablation = {}",
        match train.ablation {
            Ablation::Base => "base",
            Ablation::BaseDisentangle => "base_disentangle",
            Ablation::Full => "full",
        }
    );
    let _ = writeln!(out, "checkpoint_every = {}", train.checkpoint_every);
    let _ = writeln!(
        out,
        "update_order = {}",
        match train.update_order {
            UpdateOrder::ClassifierFirst => "classifier_first",
            UpdateOrder::GeneratorFirst => "generator_first",
        }
    );
    let _ = writeln!(out, "grad_clip = {}", train.grad_clip);
    let _ = writeln!(
        out,
        "init_mode = {}",
        match train.init_mode {
            InitMode::Auto => "auto",
            InitMode::Random => "random",
            InitMode::ShapePrior => "shape_prior",
        }
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_yields_defaults() {
        let (model, train) = parse_config("").unwrap();
        assert_eq!(model.num_masks, 14);
        assert_eq!(train.lambda_recon, 0.01);
        assert_eq!(train.lambda_adv, 1.0);
        assert_eq!(train.lambda_color, 1.0);
        assert_eq!(train.base_lr, 1e-4);
        assert_eq!(train.adam_beta1, 0.9);
        assert_eq!(train.adam_beta2, 0.999);
        assert_eq!(train.batch_size, 12);
        assert_eq!(train.lr_decay_rate, 0.05);
        assert_eq!(train.lr_decay_every, 2500);
        assert_eq!(train.shape_encoder_lr_factor, 0.1);
    }

    #[test]
    fn single_key_passthrough() {
        let (model, train) = parse_config("num_masks = 2\n").unwrap();
        assert_eq!(model.num_masks, 2);
        assert_eq!(train, TrainConfig::default());
        let defaults = ModelConfig::default();
        assert_eq!(model.appearance_dim, defaults.appearance_dim);
    }

    #[test]
    fn batch_size_one_rejected() {
        let err = parse_config("batch_size = 1\n").unwrap_err();
        assert!(err.to_string().contains("batch_size must be >= 2"), "{err}");
    }

    #[test]
    fn unknown_key_rejected() {
        let err = parse_config("frobnicate = 3\n").unwrap_err();
        assert!(err.to_string().contains("unknown key 'frobnicate'"), "{err}");
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let text = "# full line comment\n\nnum_masks = 4  # trailing comment\n";
        let (model, _) = parse_config(text).unwrap();
        assert_eq!(model.num_masks, 4);
    }

    #[test]
    fn preset_applies_before_other_keys() {
        let (model, train) = parse_config("batch_size = 10\npreset = desk\n").unwrap();
        // preset sets batch 8, the explicit key wins regardless of position
        assert_eq!(train.batch_size, 10);
        assert_eq!(train.total_iters, 5000);
        assert_eq!(model.image_height, 64);
    }

    #[test]
    fn indivisible_image_size_rejected() {
        let err = parse_config("image_height = 66\n").unwrap_err();
        assert!(err.to_string().contains("not divisible"), "{err}");
    }

    #[test]
    fn roundtrip_identity() {
        let (model, train) =
            parse_config("num_masks = 6\nlambda_color = 0.5\nmask_activation = softmax_over_masks\n")
                .unwrap();
        let text = serialize_config(&model, &train);
        let (model2, train2) = parse_config(&text).unwrap();
        assert_eq!(model, model2);
        assert_eq!(train, train2);
    }

    #[test]
    fn overrides_apply_after_file() {
        let (mut model, mut train) = parse_config("num_masks = 6\n").unwrap();
        apply_overrides(
            &mut model,
            &mut train,
            &[("num_masks".into(), "8".into()), ("seed".into(), "7".into())],
        )
        .unwrap();
        assert_eq!(model.num_masks, 8);
        assert_eq!(train.seed, 7);
    }

    #[test]
    fn ablation_lambda_zeroing() {
        let (_, mut train) = parse_config("ablation = base\n").unwrap();
        train.lambda_adv = 2.0;
        let (l1, l2, l3) = train.effective_lambdas();
        assert_eq!((l1, l2, l3), (0.01, 0.0, 0.0));
    }
}
