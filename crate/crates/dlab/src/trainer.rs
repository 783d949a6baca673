//! Alternating adversarial training: one classifier update and one
//! generator update per step, per-network learning rates with stepped
//! decay, JSONL metrics logging, and bit-exact checkpointing.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{bind_params, collect_grads, BoundParams, ParamSet, Real, Tape, Var};
use crate::checkpoint::{
    read_container, write_container, ArrayData, Container, MetaValue, Section,
};
use crate::config::{
    parse_config, serialize_config, InitMode, ModelConfig, TrainConfig, UpdateOrder,
};
use crate::data::{sample_pair_batch, Dataset, PairBatch, SpriteDataset};
use crate::error::{Error, Result};
use crate::losses::{
    classifier_adv_loss_t, color_consistency_loss_t, encoder_adv_loss_t, masked_color_stats_t,
    reconstruction_loss_t, LossBreakdown,
};
use crate::networks::{
    self, appearance_encoder_forward, apply_masks_forward, classifier_forward, decoder_forward,
    init_params, shape_encoder_forward, to_nchw, InitKind, NetworkParams,
};
use crate::opt::{adam_update, global_grad_norm, AdamMoments};
use crate::perceptual::{pyramid_forward, PerceptualExtractor};

const ADAM_EPS: f64 = 1e-8;

/// Which learning rate a parameter group uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrNet {
    ShapeEncoder,
    Other,
}

/// Stepped exponential decay: `base * (1 - rate)^(iter / every)`, with the
/// shape encoder scaled by its extra factor.
pub fn lr_at(iter: u64, cfg: &TrainConfig, net: LrNet) -> f64 {
    let steps = (iter / cfg.lr_decay_every as u64) as i32;
    let lr = cfg.base_lr * (1.0 - cfg.lr_decay_rate).powi(steps);
    match net {
        LrNet::ShapeEncoder => lr * cfg.shape_encoder_lr_factor,
        LrNet::Other => lr,
    }
}

/// Adam moments for every network; the generator group (shape encoder,
/// appearance encoder, decoder) shares one step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub shape: AdamMoments<f32>,
    pub appearance: AdamMoments<f32>,
    pub decoder: AdamMoments<f32>,
    pub classifier: AdamMoments<f32>,
    pub gen_t: u64,
    pub cls_t: u64,
}

impl OptimizerState {
    pub fn new_like(params: &NetworkParams<f32>) -> Self {
        Self {
            shape: AdamMoments::new_like(&params.shape_encoder),
            appearance: AdamMoments::new_like(&params.appearance_encoder),
            decoder: AdamMoments::new_like(&params.decoder),
            classifier: AdamMoments::new_like(&params.classifier),
            gen_t: 0,
            cls_t: 0,
        }
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: NetworkParams<f32>,
    pub opt: OptimizerState,
    pub iter: u64,
    pub rng: ChaCha8Rng,
    pub config_fingerprint: String,
}

/// One JSONL metrics record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: u64,
    pub recon: f64,
    pub adv_c: f64,
    pub adv_e: f64,
    pub color: f64,
    pub total: f64,
    pub lr: f64,
}

/// Builds the initial training state: seeded parameter init (with the
/// shape-prior warm start when the resolved init mode asks for it), zeroed
/// optimizer moments, and the pair-sampling RNG.
pub fn init_state(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    synthetic: Option<&SpriteDataset>,
) -> Result<TrainState> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    let kind = match train_cfg.effective_init_mode() {
        InitMode::ShapePrior => InitKind::ShapePrior,
        _ => InitKind::Random,
    };
    let params = init_params(model_cfg, train_cfg.seed, kind, synthetic)?;
    let opt = OptimizerState::new_like(&params);
    Ok(TrainState {
        opt,
        config_fingerprint: params.fingerprint.clone(),
        params,
        iter: 0,
        rng: ChaCha8Rng::seed_from_u64(train_cfg.seed),
    })
}

/// Encoder outputs for one pair batch.
pub struct ForwardVars {
    /// Masks of the appearance-source images.
    pub zs_a: Var,
    /// Masks of the shape-source images.
    pub zs_b: Var,
    /// Appearance features of side a.
    pub za_a: Var,
    /// Appearance features of side b.
    pub za_b: Var,
}

/// Runs both encoders on both sides of a pair batch. The two sides share
/// one batched pass through each encoder.
pub fn encoders_forward<F: Real>(
    tape: &mut Tape<F>,
    xa: Var,
    xb: Var,
    bound_shape: &BoundParams,
    bound_app: &BoundParams,
    cfg: &ModelConfig,
) -> ForwardVars {
    let batch = tape.value(xa).shape()[0];
    let xcat = tape.concat(&[xa, xb], 0);
    let zs = shape_encoder_forward(tape, xcat, bound_shape, cfg);
    let filtered = apply_masks_forward(tape, xcat, zs, cfg);
    let za = appearance_encoder_forward(tape, filtered, bound_app, cfg, 2 * batch);
    let zs_a = tape.slice_axis(zs, 0, 0, batch);
    let zs_b = tape.slice_axis(zs, 0, batch, batch);
    let za_a = tape.slice_axis(za, 0, 0, batch);
    let za_b = tape.slice_axis(za, 0, batch, batch);
    ForwardVars { zs_a, zs_b, za_a, za_b }
}

/// Generator-side loss nodes.
pub struct GeneratorLosses {
    pub recon: Var,
    pub adv_e: Var,
    pub color: Var,
    /// Classifier score of the true pair under frozen classifier weights.
    pub s_true: Var,
    /// Classifier score of the mixed pair under frozen classifier weights.
    pub s_false: Var,
    /// Reconstruction of side a.
    pub recon_img: Var,
    /// Mixed decode: shape of b, appearance of a.
    pub mix_img: Var,
}

/// Builds reconstruction, encoder-adversarial, and color losses on top of
/// encoder outputs. The classifier must be bound as constants here: the
/// encoder adversarial loss flows through it but never into it.
#[allow(clippy::too_many_arguments)]
pub fn generator_losses<F: Real>(
    tape: &mut Tape<F>,
    xa: Var,
    fw: &ForwardVars,
    bound_dec: &BoundParams,
    bound_cls: &BoundParams,
    bound_perc: &BoundParams,
    model_cfg: &ModelConfig,
    layer_weights: &[f64],
    num_stages: usize,
) -> GeneratorLosses {
    let batch = tape.value(fw.zs_a).shape()[0];
    let masks_cat = tape.concat(&[fw.zs_a, fw.zs_b], 0);
    let app_cat = tape.concat(&[fw.za_a, fw.za_a], 0);
    let decoded = decoder_forward(tape, masks_cat, app_cat, bound_dec, model_cfg);
    let recon_img = tape.slice_axis(decoded, 0, 0, batch);
    let mix_img = tape.slice_axis(decoded, 0, batch, batch);

    let pyr_a = pyramid_forward(tape, xa, bound_perc, num_stages);
    let pyr_r = pyramid_forward(tape, recon_img, bound_perc, num_stages);
    let recon = reconstruction_loss_t(tape, &pyr_a, &pyr_r, layer_weights);

    let s_true = classifier_forward(tape, fw.zs_a, fw.za_a, bound_cls, model_cfg);
    let s_false = classifier_forward(tape, fw.zs_a, fw.za_b, bound_cls, model_cfg);
    let adv_e = encoder_adv_loss_t(tape, s_true, s_false, model_cfg.adv_loss_mode);

    // the mixed image is laid out by the shape source's masks, so its color
    // statistics are taken under those masks
    let stats_mix = masked_color_stats_t(tape, mix_img, fw.zs_b, model_cfg.color_stat_normalizer);
    let stats_src = masked_color_stats_t(tape, xa, fw.zs_a, model_cfg.color_stat_normalizer);
    let color = color_consistency_loss_t(tape, stats_mix, stats_src);

    GeneratorLosses { recon, adv_e, color, s_true, s_false, recon_img, mix_img }
}

/// Classifier objective on detached encoder outputs: true pair
/// `(z_s^a, z_a^a)` toward 1, mixed pair `(z_s^a, z_a^b)` toward 0.
pub fn classifier_loss<F: Real>(
    tape: &mut Tape<F>,
    zs_a: Var,
    za_a: Var,
    za_b: Var,
    bound_cls: &BoundParams,
    cfg: &ModelConfig,
) -> Var {
    let s_true = classifier_forward(tape, zs_a, za_a, bound_cls, cfg);
    let s_false = classifier_forward(tape, zs_a, za_b, bound_cls, cfg);
    classifier_adv_loss_t(tape, s_true, s_false)
}

struct ZValues {
    zs_a: ArrayD<f32>,
    za_a: ArrayD<f32>,
    za_b: ArrayD<f32>,
}

/// One Adam update of the classifier from detached features. Returns the
/// classifier loss value.
fn classifier_update(
    state: &mut TrainState,
    z: &ZValues,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    lr: f64,
) -> Result<f64> {
    let mut tape = Tape::<f32>::new();
    let zs_a = tape.constant(z.zs_a.clone());
    let za_a = tape.constant(z.za_a.clone());
    let za_b = tape.constant(z.za_b.clone());
    let bound_cls = bind_params(&mut tape, &state.params.classifier, true);
    let loss = classifier_loss(&mut tape, zs_a, za_a, za_b, &bound_cls, model_cfg);
    let value = tape.scalar(loss) as f64;
    if !value.is_finite() {
        return Err(Error::Numeric("adv_classifier is non-finite".into()));
    }
    tape.backward(loss);
    let grads = collect_grads(&tape, &state.params.classifier, &bound_cls)?;
    let clip_scale = clip_scale_for(&[&grads], train_cfg.grad_clip);
    state.opt.cls_t += 1;
    adam_update(
        &mut state.params.classifier,
        &grads,
        &mut state.opt.classifier,
        state.opt.cls_t,
        lr,
        train_cfg.adam_beta1,
        train_cfg.adam_beta2,
        ADAM_EPS,
        clip_scale,
    );
    Ok(value)
}

fn clip_scale_for(grads: &[&ParamSet<f32>], clip: f64) -> f64 {
    if clip <= 0.0 {
        return 1.0;
    }
    let norm = global_grad_norm(grads);
    if norm > clip {
        clip / norm
    } else {
        1.0
    }
}

/// Shared tail of a generator update: losses, backward, Adam. The tape
/// must already hold the encoder forward with trainable encoder bindings;
/// the classifier is bound as constants here (freshest parameters).
#[allow(clippy::too_many_arguments)]
fn finish_generator_update(
    mut tape: Tape<f32>,
    state: &mut TrainState,
    xa: Var,
    fw: &ForwardVars,
    bound_shape: &BoundParams,
    bound_app: &BoundParams,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    extractor: &PerceptualExtractor<f32>,
) -> Result<(f64, f64, f64, f64, ZValues)> {
    let (l1, l2, l3) = train_cfg.effective_lambdas();
    let bound_dec = bind_params(&mut tape, &state.params.decoder, true);
    let bound_cls = bind_params(&mut tape, &state.params.classifier, false);
    let bound_perc = bind_params(&mut tape, &extractor.params, false);
    let losses = generator_losses(
        &mut tape,
        xa,
        fw,
        &bound_dec,
        &bound_cls,
        &bound_perc,
        model_cfg,
        &extractor.layer_weights,
        extractor.num_stages(),
    );

    let recon = tape.scalar(losses.recon) as f64;
    let adv_e = tape.scalar(losses.adv_e) as f64;
    let color = tape.scalar(losses.color) as f64;
    let total_value = l1 * recon + l2 * adv_e + l3 * color;
    let breakdown = LossBreakdown {
        recon,
        adv_classifier: 0.0,
        adv_encoders: adv_e,
        color,
        total: total_value,
    };
    if let Some(name) = breakdown.first_non_finite() {
        return Err(Error::Numeric(format!("{name} is non-finite at iter {}", state.iter)));
    }

    // weighted total over the active terms only; zero-weight subgraphs are
    // never traversed by backward
    let mut total: Option<Var> = None;
    for (lambda, term) in [(l1, losses.recon), (l2, losses.adv_e), (l3, losses.color)] {
        if lambda > 0.0 {
            let scaled = tape.scale(term, lambda as f32);
            total = Some(match total {
                Some(t) => tape.add(t, scaled),
                None => scaled,
            });
        }
    }

    let z = ZValues {
        zs_a: tape.value(fw.zs_a).clone(),
        za_a: tape.value(fw.za_a).clone(),
        za_b: tape.value(fw.za_b).clone(),
    };

    if let Some(total) = total {
        tape.backward(total);
        let g_shape = collect_grads(&tape, &state.params.shape_encoder, bound_shape)?;
        let g_app = collect_grads(&tape, &state.params.appearance_encoder, bound_app)?;
        let g_dec = collect_grads(&tape, &state.params.decoder, &bound_dec)?;
        let clip_scale = clip_scale_for(&[&g_shape, &g_app, &g_dec], train_cfg.grad_clip);
        let lr_other = lr_at(state.iter, train_cfg, LrNet::Other);
        let lr_shape = lr_at(state.iter, train_cfg, LrNet::ShapeEncoder);
        state.opt.gen_t += 1;
        let t = state.opt.gen_t;
        adam_update(
            &mut state.params.shape_encoder,
            &g_shape,
            &mut state.opt.shape,
            t,
            lr_shape,
            train_cfg.adam_beta1,
            train_cfg.adam_beta2,
            ADAM_EPS,
            clip_scale,
        );
        adam_update(
            &mut state.params.appearance_encoder,
            &g_app,
            &mut state.opt.appearance,
            t,
            lr_other,
            train_cfg.adam_beta1,
            train_cfg.adam_beta2,
            ADAM_EPS,
            clip_scale,
        );
        adam_update(
            &mut state.params.decoder,
            &g_dec,
            &mut state.opt.decoder,
            t,
            lr_other,
            train_cfg.adam_beta1,
            train_cfg.adam_beta2,
            ADAM_EPS,
            clip_scale,
        );
    }

    Ok((recon, adv_e, color, total_value, z))
}

/// Full generator update from scratch (used by the generator-first order):
/// the classifier it plays against is frozen at its current parameters.
fn generator_update(
    state: &mut TrainState,
    batch: &PairBatch,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    extractor: &PerceptualExtractor<f32>,
) -> Result<(f64, f64, f64, f64, ZValues)> {
    let mut tape = Tape::<f32>::new();
    let xa = tape.constant(to_nchw(&batch.images_a.0).into_dyn());
    let xb = tape.constant(to_nchw(&batch.images_b.0).into_dyn());
    let bound_shape = bind_params(&mut tape, &state.params.shape_encoder, true);
    let bound_app = bind_params(&mut tape, &state.params.appearance_encoder, true);
    let fw = encoders_forward(&mut tape, xa, xb, &bound_shape, &bound_app, model_cfg);
    finish_generator_update(
        tape,
        state,
        xa,
        &fw,
        &bound_shape,
        &bound_app,
        model_cfg,
        train_cfg,
        extractor,
    )
}

/// Computes encoder outputs without building gradients (used by the
/// generator-first order to refresh features for the classifier update).
fn eval_features(
    params: &NetworkParams<f32>,
    batch: &PairBatch,
    model_cfg: &ModelConfig,
) -> ZValues {
    let mut tape = Tape::<f32>::new();
    let xa = tape.constant(to_nchw(&batch.images_a.0).into_dyn());
    let xb = tape.constant(to_nchw(&batch.images_b.0).into_dyn());
    let bound_shape = bind_params(&mut tape, &params.shape_encoder, false);
    let bound_app = bind_params(&mut tape, &params.appearance_encoder, false);
    let fw = encoders_forward(&mut tape, xa, xb, &bound_shape, &bound_app, model_cfg);
    ZValues {
        zs_a: tape.value(fw.zs_a).clone(),
        za_a: tape.value(fw.za_a).clone(),
        za_b: tape.value(fw.za_b).clone(),
    }
}

/// One training step: exactly one classifier update and one generator
/// update, in the configured order. Increments `state.iter`.
pub fn train_step(
    state: &mut TrainState,
    batch: &PairBatch,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    extractor: &PerceptualExtractor<f32>,
) -> Result<LossBreakdown> {
    let lr_cls = lr_at(state.iter, train_cfg, LrNet::Other);
    let (recon, adv_e, color, total, adv_c) = match train_cfg.update_order {
        UpdateOrder::ClassifierFirst => {
            // one tape serves both sides: encoder outputs feed the
            // classifier update as constants, then the same tape continues
            // into the generator losses against the updated classifier
            let mut tape = Tape::<f32>::new();
            let xa = tape.constant(to_nchw(&batch.images_a.0).into_dyn());
            let xb = tape.constant(to_nchw(&batch.images_b.0).into_dyn());
            let bound_shape = bind_params(&mut tape, &state.params.shape_encoder, true);
            let bound_app = bind_params(&mut tape, &state.params.appearance_encoder, true);
            let fw = encoders_forward(&mut tape, xa, xb, &bound_shape, &bound_app, model_cfg);
            let z = ZValues {
                zs_a: tape.value(fw.zs_a).clone(),
                za_a: tape.value(fw.za_a).clone(),
                za_b: tape.value(fw.za_b).clone(),
            };
            let adv_c = classifier_update(state, &z, model_cfg, train_cfg, lr_cls)?;
            let (recon, adv_e, color, total, _) = finish_generator_update(
                tape,
                state,
                xa,
                &fw,
                &bound_shape,
                &bound_app,
                model_cfg,
                train_cfg,
                extractor,
            )?;
            (recon, adv_e, color, total, adv_c)
        }
        UpdateOrder::GeneratorFirst => {
            let (recon, adv_e, color, total, _) =
                generator_update(state, batch, model_cfg, train_cfg, extractor)?;
            let z = eval_features(&state.params, batch, model_cfg);
            let adv_c = classifier_update(state, &z, model_cfg, train_cfg, lr_cls)?;
            (recon, adv_e, color, total, adv_c)
        }
    };
    state.iter += 1;
    Ok(LossBreakdown { recon, adv_classifier: adv_c, adv_encoders: adv_e, color, total })
}

/// Side outputs of a training run.
#[derive(Default)]
pub struct TrainOptions {
    /// Directory for periodic and final checkpoints.
    pub checkpoint_dir: Option<PathBuf>,
    /// JSONL metrics file, one record per iteration.
    pub metrics_path: Option<PathBuf>,
    /// `log::info` progress interval in iterations; 0 silences progress.
    pub log_every: usize,
}

/// Runs (or resumes) training to `train_cfg.total_iters`, logging every
/// iteration and checkpointing every `checkpoint_every` plus at the end.
pub fn train<D: Dataset + ?Sized>(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    dataset: &D,
    extractor: &PerceptualExtractor<f32>,
    resume: Option<TrainState>,
    synthetic_for_init: Option<&SpriteDataset>,
    opts: &TrainOptions,
) -> Result<(TrainState, Vec<IterRecord>)> {
    if dataset.len() < 2 {
        return Err(Error::Data(format!(
            "training needs at least 2 images, got {}",
            dataset.len()
        )));
    }
    let resuming = resume.is_some();
    let mut state = match resume {
        Some(s) => s,
        None => init_state(model_cfg, train_cfg, synthetic_for_init)?,
    };
    if state.config_fingerprint != networks::architecture_fingerprint(model_cfg) {
        return Err(Error::Checkpoint(
            "resume state was built for a different architecture".into(),
        ));
    }
    let mut metrics_file = match &opts.metrics_path {
        Some(path) => {
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(resuming)
                .truncate(!resuming)
                .write(true)
                .open(path)?;
            Some(std::io::BufWriter::new(file))
        }
        None => None,
    };
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut log = Vec::new();
    while state.iter < train_cfg.total_iters as u64 {
        let batch = sample_pair_batch(dataset, train_cfg.batch_size, &mut state.rng)?;
        let iter_before = state.iter;
        let lr = lr_at(iter_before, train_cfg, LrNet::Other);
        let breakdown = train_step(&mut state, &batch, model_cfg, train_cfg, extractor)?;
        let record = IterRecord {
            iter: iter_before,
            recon: breakdown.recon,
            adv_c: breakdown.adv_classifier,
            adv_e: breakdown.adv_encoders,
            color: breakdown.color,
            total: breakdown.total,
            lr,
        };
        if let Some(file) = metrics_file.as_mut() {
            serde_json::to_writer(&mut *file, &record)
                .map_err(|e| Error::Data(format!("metrics log: {e}")))?;
            file.write_all(b"\n")?;
        }
        if opts.log_every > 0 && state.iter % opts.log_every as u64 == 0 {
            log::info!(
                "iter {:>6}  recon {:.5}  adv_c {:.4}  adv_e {:.4}  color {:.5}  total {:.5}",
                state.iter,
                record.recon,
                record.adv_c,
                record.adv_e,
                record.color,
                record.total
            );
        }
        log.push(record);
        if let Some(dir) = &opts.checkpoint_dir {
            if state.iter % train_cfg.checkpoint_every as u64 == 0 {
                let path = dir.join(format!("ck_{:06}.dlab", state.iter));
                save_checkpoint(&state, model_cfg, train_cfg, extractor, &path)?;
            }
        }
    }
    if let Some(file) = metrics_file.as_mut() {
        file.flush()?;
    }
    if let Some(dir) = &opts.checkpoint_dir {
        save_checkpoint(&state, model_cfg, train_cfg, extractor, &dir.join("final.dlab"))?;
    }
    Ok((state, log))
}

// ---------------------------------------------------------------------------
// Checkpoint glue: TrainState <-> container.
// ---------------------------------------------------------------------------

const NET_PREFIXES: [&str; 4] = ["shape_encoder", "appearance_encoder", "decoder", "classifier"];

fn net_of<'a>(params: &'a NetworkParams<f32>, prefix: &str) -> &'a ParamSet<f32> {
    match prefix {
        "shape_encoder" => &params.shape_encoder,
        "appearance_encoder" => &params.appearance_encoder,
        "decoder" => &params.decoder,
        "classifier" => &params.classifier,
        _ => unreachable!(),
    }
}

fn net_of_mut<'a>(params: &'a mut NetworkParams<f32>, prefix: &str) -> &'a mut ParamSet<f32> {
    match prefix {
        "shape_encoder" => &mut params.shape_encoder,
        "appearance_encoder" => &mut params.appearance_encoder,
        "decoder" => &mut params.decoder,
        "classifier" => &mut params.classifier,
        _ => unreachable!(),
    }
}

fn moments_of_mut<'a>(opt: &'a mut OptimizerState, prefix: &str) -> &'a mut AdamMoments<f32> {
    match prefix {
        "shape_encoder" => &mut opt.shape,
        "appearance_encoder" => &mut opt.appearance,
        "decoder" => &mut opt.decoder,
        "classifier" => &mut opt.classifier,
        _ => unreachable!(),
    }
}

/// Serializes the full training state (parameters, optimizer moments,
/// perceptual extractor, config text, RNG position) into one container.
pub fn save_checkpoint(
    state: &TrainState,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    extractor: &PerceptualExtractor<f32>,
    path: &Path,
) -> Result<()> {
    let mut container = Container::default();

    let mut model = Section::default();
    for prefix in NET_PREFIXES {
        for (name, value) in net_of(&state.params, prefix).iter() {
            model.arrays.insert(format!("{prefix}.{name}"), ArrayData::F32(value.clone()));
        }
    }
    model.meta.insert("fingerprint".into(), MetaValue::Str(state.params.fingerprint.clone()));
    container.sections.insert("model".into(), model);

    let mut optimizer = Section::default();
    for (prefix, moments) in [
        ("shape_encoder", &state.opt.shape),
        ("appearance_encoder", &state.opt.appearance),
        ("decoder", &state.opt.decoder),
        ("classifier", &state.opt.classifier),
    ] {
        for (name, value) in moments.m.iter() {
            optimizer.arrays.insert(format!("m.{prefix}.{name}"), ArrayData::F32(value.clone()));
        }
        for (name, value) in moments.v.iter() {
            optimizer.arrays.insert(format!("v.{prefix}.{name}"), ArrayData::F32(value.clone()));
        }
    }
    optimizer.meta.insert("gen_t".into(), MetaValue::Int(state.opt.gen_t as i64));
    optimizer.meta.insert("cls_t".into(), MetaValue::Int(state.opt.cls_t as i64));
    container.sections.insert("optimizer".into(), optimizer);

    let mut perceptual = Section::default();
    for (name, value) in extractor.params.iter() {
        perceptual.arrays.insert(name.clone(), ArrayData::F32(value.clone()));
    }
    perceptual.meta.insert("num_stages".into(), MetaValue::Int(extractor.num_stages() as i64));
    for (k, w) in extractor.layer_weights.iter().enumerate() {
        perceptual.meta.insert(format!("phi{}", k + 1), MetaValue::Float(*w));
    }
    container.sections.insert("perceptual".into(), perceptual);

    let mut meta = Section::default();
    meta.meta.insert("iter".into(), MetaValue::Int(state.iter as i64));
    meta.meta.insert("seed".into(), MetaValue::Int(train_cfg.seed as i64));
    meta.meta
        .insert("config".into(), MetaValue::Str(serialize_config(model_cfg, train_cfg)));
    meta.meta
        .insert("fingerprint".into(), MetaValue::Str(state.config_fingerprint.clone()));
    let seed_hex: String = state.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
    meta.meta.insert("rng_seed".into(), MetaValue::Str(seed_hex));
    meta.meta
        .insert("rng_stream".into(), MetaValue::Int(state.rng.get_stream() as i64));
    let pos = state.rng.get_word_pos();
    meta.meta.insert("rng_word_pos_lo".into(), MetaValue::Int(pos as u64 as i64));
    meta.meta.insert("rng_word_pos_hi".into(), MetaValue::Int((pos >> 64) as u64 as i64));
    container.sections.insert("meta".into(), meta);

    write_container(path, &container)
}

/// A checkpoint split back into its typed parts.
#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub state: TrainState,
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub extractor: PerceptualExtractor<f32>,
}

fn require_meta<'c>(section: &'c Section, key: &str, name: &str) -> Result<&'c MetaValue> {
    section
        .meta
        .get(key)
        .ok_or_else(|| Error::Checkpoint(format!("section '{name}' is missing meta '{key}'")))
}

/// Loads a checkpoint, verifying the architecture fingerprint against the
/// embedded config (override with `allow_fingerprint_mismatch`).
pub fn load_checkpoint(path: &Path, allow_fingerprint_mismatch: bool) -> Result<LoadedCheckpoint> {
    let container = read_container(path)?;
    let get = |name: &str| -> Result<&Section> {
        container
            .sections
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing section '{name}'")))
    };
    let meta = get("meta")?;
    let config_text = require_meta(meta, "config", "meta")?
        .as_str()
        .ok_or_else(|| Error::Checkpoint("meta 'config' is not a string".into()))?;
    let (model_cfg, train_cfg) = parse_config(config_text)?;

    let stored_fp = require_meta(meta, "fingerprint", "meta")?
        .as_str()
        .ok_or_else(|| Error::Checkpoint("meta 'fingerprint' is not a string".into()))?
        .to_string();
    let expect_fp = networks::architecture_fingerprint(&model_cfg);
    if stored_fp != expect_fp && !allow_fingerprint_mismatch {
        return Err(Error::Checkpoint(format!(
            "config fingerprint mismatch: checkpoint {stored_fp}, config {expect_fp} \
             (pass the override flag to load anyway)"
        )));
    }

    // model parameters: start from a correctly-shaped skeleton and fill in
    let mut params = networks::init_random_params::<f32>(&model_cfg, 0);
    let model = get("model")?;
    for prefix in NET_PREFIXES {
        let set = net_of_mut(&mut params, prefix);
        let names: Vec<String> = set.names().cloned().collect();
        for name in names {
            let full = format!("{prefix}.{name}");
            let data = model.arrays.get(&full).ok_or_else(|| {
                Error::Checkpoint(format!("section 'model' is missing array '{full}'"))
            })?;
            let arr = data.as_f32();
            let slot = set.get_mut(&name).unwrap();
            if arr.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "array '{full}' has shape {:?}, expected {:?}",
                    arr.shape(),
                    slot.shape()
                )));
            }
            *slot = arr;
        }
    }
    params.fingerprint = stored_fp.clone();
    if !params.all_finite() {
        return Err(Error::Checkpoint("model section contains non-finite parameters".into()));
    }

    let mut opt = OptimizerState::new_like(&params);
    let optimizer = get("optimizer")?;
    for prefix in NET_PREFIXES {
        let moments = moments_of_mut(&mut opt, prefix);
        for (kind, target) in [("m", &mut moments.m), ("v", &mut moments.v)] {
            let names: Vec<String> = target.names().cloned().collect();
            for name in names {
                let full = format!("{kind}.{prefix}.{name}");
                let data = optimizer.arrays.get(&full).ok_or_else(|| {
                    Error::Checkpoint(format!("section 'optimizer' is missing array '{full}'"))
                })?;
                *target.get_mut(&name).unwrap() = data.as_f32();
            }
        }
    }
    opt.gen_t = require_meta(optimizer, "gen_t", "optimizer")?
        .as_int()
        .ok_or_else(|| Error::Checkpoint("optimizer 'gen_t' is not an integer".into()))?
        as u64;
    opt.cls_t = require_meta(optimizer, "cls_t", "optimizer")?
        .as_int()
        .ok_or_else(|| Error::Checkpoint("optimizer 'cls_t' is not an integer".into()))?
        as u64;

    let perc = get("perceptual")?;
    let num_stages = require_meta(perc, "num_stages", "perceptual")?
        .as_int()
        .ok_or_else(|| Error::Checkpoint("perceptual 'num_stages' is not an integer".into()))?
        as usize;
    let mut extractor = crate::perceptual::fixed_random_extractor::<f32>(0, num_stages);
    {
        let names: Vec<String> = extractor.params.names().cloned().collect();
        for name in names {
            let data = perc.arrays.get(&name).ok_or_else(|| {
                Error::Checkpoint(format!("section 'perceptual' is missing array '{name}'"))
            })?;
            *extractor.params.get_mut(&name).unwrap() = data.as_f32();
        }
        for k in 0..num_stages {
            if let Some(MetaValue::Float(w)) = perc.meta.get(&format!("phi{}", k + 1)) {
                extractor.layer_weights[k] = *w;
            }
        }
    }

    let iter = require_meta(meta, "iter", "meta")?
        .as_int()
        .ok_or_else(|| Error::Checkpoint("meta 'iter' is not an integer".into()))? as u64;
    let seed_hex = require_meta(meta, "rng_seed", "meta")?
        .as_str()
        .ok_or_else(|| Error::Checkpoint("meta 'rng_seed' is not a string".into()))?;
    if seed_hex.len() != 64 {
        return Err(Error::Checkpoint("meta 'rng_seed' must be 32 hex bytes".into()));
    }
    let mut seed_bytes = [0u8; 32];
    for (i, chunk) in seed_hex.as_bytes().chunks(2).enumerate() {
        let s = std::str::from_utf8(chunk).unwrap();
        seed_bytes[i] = u8::from_str_radix(s, 16)
            .map_err(|_| Error::Checkpoint("meta 'rng_seed' is not valid hex".into()))?;
    }
    let stream = require_meta(meta, "rng_stream", "meta")?
        .as_int()
        .ok_or_else(|| Error::Checkpoint("meta 'rng_stream' is not an integer".into()))?
        as u64;
    let lo = require_meta(meta, "rng_word_pos_lo", "meta")?
        .as_int()
        .ok_or_else(|| Error::Checkpoint("meta 'rng_word_pos_lo' is not an integer".into()))?
        as u64;
    let hi = require_meta(meta, "rng_word_pos_hi", "meta")?
        .as_int()
        .ok_or_else(|| Error::Checkpoint("meta 'rng_word_pos_hi' is not an integer".into()))?
        as u64;
    let mut rng = ChaCha8Rng::from_seed(seed_bytes);
    rng.set_stream(stream);
    rng.set_word_pos(((hi as u128) << 64) | lo as u128);

    Ok(LoadedCheckpoint {
        state: TrainState { params, opt, iter, rng, config_fingerprint: stored_fp },
        model_cfg,
        train_cfg,
        extractor,
    })
}
