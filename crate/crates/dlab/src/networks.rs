//! The four parametric maps: shape encoder, appearance encoder, image
//! decoder, and feature classifier, plus the mask resize/filter mechanics
//! that connect them.
//!
//! Layer widths are fixed; strides adapt to `downsample_factor` so that the
//! shape encoder emits masks at `H/downsample x W/downsample` and the
//! decoder upsamples back to image resolution. The tape-level `*_forward`
//! builders are shared by training, evaluation, and the gradient-check
//! suite; the value-level operations below them are thin eval wrappers.

use ndarray::{Array1, Array3, Array4, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{bind_params, BoundParams, ParamSet, Real, Tape, Var};
use crate::config::{MaskActivation, ModelConfig};
use crate::data::SpriteDataset;
use crate::error::{Error, Result};
use crate::types::{
    validate_batch, AppearanceFeatureSet, ClassifierScore, FilteredImageSet, ImageBatch, MaskSet,
};

const LEAKY_SLOPE: f64 = 0.2;
const SHAPE_CHANNELS: [usize; 3] = [32, 64, 128];
const APPEARANCE_CHANNELS: [usize; 3] = [16, 32, 64];
const CLASSIFIER_CONV_CHANNELS: [usize; 2] = [16, 32];
const CLASSIFIER_HIDDEN: [usize; 2] = [128, 64];

#[derive(Clone, Debug)]
struct ConvDef {
    name: String,
    in_ch: usize,
    out_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Debug)]
struct LinearDef {
    name: String,
    in_dim: usize,
    out_dim: usize,
}

/// Concrete layer plan derived from a [`ModelConfig`].
#[derive(Clone, Debug)]
pub(crate) struct Architecture {
    shape_convs: Vec<ConvDef>,
    app_convs: Vec<ConvDef>,
    dec_fuse: ConvDef,
    dec_res: Vec<ConvDef>,
    dec_up: Vec<ConvDef>, // transposed convolutions
    dec_out: ConvDef,
    cls_convs: Vec<ConvDef>,
    cls_linears: Vec<LinearDef>,
}

impl Architecture {
    pub(crate) fn build(cfg: &ModelConfig) -> Self {
        let m = cfg.num_masks;
        let d = cfg.appearance_dim;
        let n_stride2 = cfg.downsample_factor.trailing_zeros() as usize;

        let mut shape_convs = Vec::new();
        let mut in_ch = 3;
        for (i, &out_ch) in SHAPE_CHANNELS.iter().chain(std::iter::once(&m)).enumerate() {
            shape_convs.push(ConvDef {
                name: format!("conv{}", i + 1),
                in_ch,
                out_ch,
                k: 3,
                stride: if i < n_stride2 { 2 } else { 1 },
                pad: 1,
            });
            in_ch = out_ch;
        }

        let mut app_convs = Vec::new();
        let mut in_ch = 3;
        for (i, &out_ch) in APPEARANCE_CHANNELS.iter().chain(std::iter::once(&d)).enumerate() {
            app_convs.push(ConvDef {
                name: format!("conv{}", i + 1),
                in_ch,
                out_ch,
                k: 3,
                stride: 2,
                pad: 1,
            });
            in_ch = out_ch;
        }

        let fuse = cfg.decoder_fuse_channels;
        let dec_fuse = ConvDef {
            name: "fuse".into(),
            in_ch: m * (d + 1),
            out_ch: fuse,
            k: 1,
            stride: 1,
            pad: 0,
        };
        let mut dec_res = Vec::new();
        for block in 0..2 {
            for half in 0..2 {
                dec_res.push(ConvDef {
                    name: format!("res{}_conv{}", block + 1, half + 1),
                    in_ch: fuse,
                    out_ch: fuse,
                    k: 3,
                    stride: 1,
                    pad: 1,
                });
            }
        }
        let mut dec_up = Vec::new();
        let mut ch = fuse;
        for i in 0..n_stride2 {
            let out_ch = (ch / 2).max(8);
            dec_up.push(ConvDef {
                name: format!("up{}", i + 1),
                in_ch: ch,
                out_ch,
                k: 4,
                stride: 2,
                pad: 1,
            });
            ch = out_ch;
        }
        let dec_out = ConvDef { name: "out".into(), in_ch: ch, out_ch: 3, k: 3, stride: 1, pad: 1 };

        let mut cls_convs = Vec::new();
        let mut in_ch = m;
        for (i, &out_ch) in CLASSIFIER_CONV_CHANNELS.iter().enumerate() {
            cls_convs.push(ConvDef {
                name: format!("conv{}", i + 1),
                in_ch,
                out_ch,
                k: 3,
                stride: 2,
                pad: 1,
            });
            in_ch = out_ch;
        }
        let (mh, mw) = (cfg.mask_height(), cfg.mask_width());
        let (fh, fw) = (mh.div_ceil(2).div_ceil(2), mw.div_ceil(2).div_ceil(2));
        let mask_feat = CLASSIFIER_CONV_CHANNELS[1] * fh * fw;
        let mut cls_linears = Vec::new();
        let mut in_dim = mask_feat + m * d;
        for (i, &out_dim) in CLASSIFIER_HIDDEN.iter().chain(std::iter::once(&1)).enumerate() {
            cls_linears.push(LinearDef { name: format!("fc{}", i + 1), in_dim, out_dim });
            in_dim = out_dim;
        }

        Self { shape_convs, app_convs, dec_fuse, dec_res, dec_up, dec_out, cls_convs, cls_linears }
    }
}

/// Stable fingerprint of the config fields that shape the parameter layout.
pub fn architecture_fingerprint(cfg: &ModelConfig) -> String {
    let desc = format!(
        "h{}w{}m{}d{}df{}fuse{}act{:?}",
        cfg.image_height,
        cfg.image_width,
        cfg.num_masks,
        cfg.appearance_dim,
        cfg.downsample_factor,
        cfg.decoder_fuse_channels,
        cfg.mask_activation,
    );
    // FNV-1a
    let mut hash: u64 = 0xcbf29ce484222325;
    for byte in desc.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x100000001b3);
    }
    format!("{hash:016x}")
}

/// Parameters of all four networks plus the config they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<F: Real = f32> {
    pub cfg: ModelConfig,
    pub shape_encoder: ParamSet<F>,
    pub appearance_encoder: ParamSet<F>,
    pub decoder: ParamSet<F>,
    pub classifier: ParamSet<F>,
    pub fingerprint: String,
}

impl<F: Real> NetworkParams<F> {
    /// Checks that the stored fingerprint still matches the stored config.
    pub fn check_fingerprint(&self) -> Result<()> {
        let expect = architecture_fingerprint(&self.cfg);
        if expect != self.fingerprint {
            return Err(Error::Checkpoint(format!(
                "architecture fingerprint mismatch: params built for {}, config hashes to {expect}",
                self.fingerprint
            )));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.shape_encoder.all_finite()
            && self.appearance_encoder.all_finite()
            && self.decoder.all_finite()
            && self.classifier.all_finite()
    }

    pub fn cast<G: Real>(&self) -> NetworkParams<G> {
        NetworkParams {
            cfg: self.cfg.clone(),
            shape_encoder: self.shape_encoder.cast(),
            appearance_encoder: self.appearance_encoder.cast(),
            decoder: self.decoder.cast(),
            classifier: self.classifier.cast(),
            fingerprint: self.fingerprint.clone(),
        }
    }
}

/// How to initialize parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitKind {
    /// Variance-scaled random initialization.
    Random,
    /// Random initialization followed by a supervised warm start of the
    /// shape encoder on synthetic ground-truth part masks.
    ShapePrior,
}

struct Initializer {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Initializer {
    fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), normal: Normal::new(0.0, 1.0).unwrap() }
    }

    fn conv<F: Real>(&mut self, set: &mut ParamSet<F>, def: &ConvDef, transposed: bool) {
        let fan_in = def.in_ch * def.k * def.k;
        let std = (2.0 / fan_in as f64).sqrt();
        let shape = if transposed {
            vec![def.in_ch, def.out_ch, def.k, def.k]
        } else {
            vec![def.out_ch, def.in_ch, def.k, def.k]
        };
        let w = ArrayD::from_shape_simple_fn(IxDyn(&shape), || {
            F::from_f64(self.normal.sample(&mut self.rng) * std)
        });
        set.insert(format!("{}.weight", def.name), w);
        set.insert(format!("{}.bias", def.name), ArrayD::from_elem(IxDyn(&[def.out_ch]), F::ZERO));
    }

    fn linear<F: Real>(&mut self, set: &mut ParamSet<F>, def: &LinearDef) {
        let std = (2.0 / def.in_dim as f64).sqrt();
        let w = ArrayD::from_shape_simple_fn(IxDyn(&[def.in_dim, def.out_dim]), || {
            F::from_f64(self.normal.sample(&mut self.rng) * std)
        });
        set.insert(format!("{}.weight", def.name), w);
        set.insert(format!("{}.bias", def.name), ArrayD::from_elem(IxDyn(&[def.out_dim]), F::ZERO));
    }
}

/// Random parameter initialization from a seeded generator.
pub fn init_random_params<F: Real>(cfg: &ModelConfig, seed: u64) -> NetworkParams<F> {
    let arch = Architecture::build(cfg);
    let mut init = Initializer::new(seed);

    let mut shape_encoder = ParamSet::new();
    for def in &arch.shape_convs {
        init.conv(&mut shape_encoder, def, false);
    }
    let mut appearance_encoder = ParamSet::new();
    for def in &arch.app_convs {
        init.conv(&mut appearance_encoder, def, false);
    }
    let mut decoder = ParamSet::new();
    init.conv(&mut decoder, &arch.dec_fuse, false);
    for def in &arch.dec_res {
        init.conv(&mut decoder, def, false);
    }
    for def in &arch.dec_up {
        init.conv(&mut decoder, def, true);
    }
    init.conv(&mut decoder, &arch.dec_out, false);
    let mut classifier = ParamSet::new();
    for def in &arch.cls_convs {
        init.conv(&mut classifier, def, false);
    }
    for def in &arch.cls_linears {
        init.linear(&mut classifier, def);
    }

    NetworkParams {
        cfg: cfg.clone(),
        shape_encoder,
        appearance_encoder,
        decoder,
        classifier,
        fingerprint: architecture_fingerprint(cfg),
    }
}

/// Initializes parameters, optionally warm-starting the shape encoder on
/// a synthetic dataset's ground-truth part masks.
pub fn init_params(
    cfg: &ModelConfig,
    seed: u64,
    kind: InitKind,
    synthetic: Option<&SpriteDataset>,
) -> Result<NetworkParams<f32>> {
    let mut params = init_random_params::<f32>(cfg, seed);
    if kind == InitKind::ShapePrior {
        let dataset = synthetic.ok_or_else(|| {
            Error::Data("shape_prior initialization requires a synthetic dataset".into())
        })?;
        warm_start_shape_encoder(&mut params, dataset, seed)?;
    }
    Ok(params)
}

const WARM_START_ITERS: usize = 400;
const WARM_START_BATCH: usize = 8;
const WARM_START_LR: f64 = 2e-3;

/// Pre-fits the first `num_parts` mask channels to the dataset's
/// ground-truth part masks (box-averaged down to encoder resolution) with
/// an L2 objective and Adam. The remaining channels receive no gradient.
pub fn warm_start_shape_encoder(
    params: &mut NetworkParams<f32>,
    dataset: &SpriteDataset,
    seed: u64,
) -> Result<()> {
    let cfg = params.cfg.clone();
    if dataset.height() != cfg.image_height || dataset.width() != cfg.image_width {
        return Err(Error::Data(format!(
            "warm start: dataset is {}x{}, config wants {}x{}",
            dataset.height(),
            dataset.width(),
            cfg.image_height,
            cfg.image_width
        )));
    }
    let supervised = dataset.num_parts().min(cfg.num_masks);
    let (mh, mw) = (cfg.mask_height(), cfg.mask_width());
    let df = cfg.downsample_factor;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a5a_5a5a_5a5a_5a5a);
    let mut moments = crate::opt::AdamMoments::new_like(&params.shape_encoder);

    for step in 0..WARM_START_ITERS {
        let idx: Vec<usize> = (0..WARM_START_BATCH)
            .map(|_| rand::Rng::random_range(&mut rng, 0..dataset.len()))
            .collect();
        let images: Vec<Array3<f32>> = idx.iter().map(|&i| dataset.image(i).clone()).collect();
        let batch = ImageBatch::from_images(&images)?;

        let mut tape = Tape::<f32>::new();
        let images_var = tape.constant(to_nchw(&batch.0).into_dyn());
        let bound = bind_params(&mut tape, &params.shape_encoder, true);
        let masks = shape_encoder_forward(&mut tape, images_var, &bound, &cfg);

        // target = prediction everywhere, overwritten with ground truth on the
        // supervised channels, so unsupervised channels contribute zero loss
        let mut target = tape.value(masks).clone();
        for (bi, &i) in idx.iter().enumerate() {
            let gt = dataset.part_masks(i);
            for p in 0..supervised {
                for y in 0..mh {
                    for x in 0..mw {
                        let mut acc = 0.0f32;
                        for dy in 0..df {
                            for dx in 0..df {
                                acc += gt[[p, y * df + dy, x * df + dx]];
                            }
                        }
                        target[[bi, p, y, x]] = acc / (df * df) as f32;
                    }
                }
            }
        }
        let target_var = tape.constant(target);
        let diff = tape.sub(masks, target_var);
        let sq = tape.square(diff);
        let loss = tape.mean_all(sq);
        tape.backward(loss);
        let grads = crate::autodiff::collect_grads(&tape, &params.shape_encoder, &bound)?;
        crate::opt::adam_update(
            &mut params.shape_encoder,
            &grads,
            &mut moments,
            (step + 1) as u64,
            WARM_START_LR,
            0.9,
            0.999,
            1e-8,
            1.0,
        );
    }
    Ok(())
}

/// BHWC `f32` image batch to NCHW.
pub fn to_nchw(images: &Array4<f32>) -> Array4<f32> {
    images.view().permuted_axes([0, 3, 1, 2]).as_standard_layout().into_owned()
}

/// NCHW back to the public BHWC layout.
pub fn to_bhwc(images: &Array4<f32>) -> Array4<f32> {
    images.view().permuted_axes([0, 2, 3, 1]).as_standard_layout().into_owned()
}

fn conv_block<F: Real>(
    tape: &mut Tape<F>,
    x: Var,
    bound: &BoundParams,
    def: &ConvDef,
    transposed: bool,
) -> Var {
    let w = bound.var(&format!("{}.weight", def.name));
    let b = bound.var(&format!("{}.bias", def.name));
    if transposed {
        tape.conv_transpose2d(x, w, b, def.stride, def.pad)
    } else {
        tape.conv2d(x, w, b, def.stride, def.pad)
    }
}

/// Shape encoder: NCHW images to `(B, m, h, w)` masks in [0, 1].
pub fn shape_encoder_forward<F: Real>(
    tape: &mut Tape<F>,
    images: Var,
    bound: &BoundParams,
    cfg: &ModelConfig,
) -> Var {
    let arch = Architecture::build(cfg);
    let mut x = images;
    let last = arch.shape_convs.len() - 1;
    for (i, def) in arch.shape_convs.iter().enumerate() {
        x = conv_block(tape, x, bound, def, false);
        if i < last {
            x = tape.leaky_relu(x, F::from_f64(LEAKY_SLOPE));
        }
    }
    match cfg.mask_activation {
        MaskActivation::Sigmoid => tape.sigmoid(x),
        MaskActivation::SoftmaxOverMasks => tape.softmax(x, 1),
    }
}

/// Upsamples masks and multiplies them into the image: `(B, 3, H, W)` images
/// with `(B, m, h, w)` masks produce `(B*m, 3, H, W)` filtered images.
pub fn apply_masks_forward<F: Real>(
    tape: &mut Tape<F>,
    images: Var,
    masks: Var,
    cfg: &ModelConfig,
) -> Var {
    let (b, m) = {
        let s = tape.value(masks).shape();
        (s[0], s[1])
    };
    let (h, w) = (cfg.image_height, cfg.image_width);
    let up = tape.bilinear_up(masks, h, w);
    let imgs5 = tape.reshape(images, &[b, 1, 3, h, w]);
    let masks5 = tape.reshape(up, &[b, m, 1, h, w]);
    let filtered = tape.mul(imgs5, masks5);
    tape.reshape(filtered, &[b * m, 3, h, w])
}

/// Appearance encoder: `(B*m, 3, H, W)` filtered images to `(B, m, d)`
/// feature vectors via weight-shared convolutions and global average pooling.
pub fn appearance_encoder_forward<F: Real>(
    tape: &mut Tape<F>,
    filtered: Var,
    bound: &BoundParams,
    cfg: &ModelConfig,
    batch: usize,
) -> Var {
    let arch = Architecture::build(cfg);
    let mut x = filtered;
    let last = arch.app_convs.len() - 1;
    for (i, def) in arch.app_convs.iter().enumerate() {
        x = conv_block(tape, x, bound, def, false);
        if i < last {
            x = tape.leaky_relu(x, F::from_f64(LEAKY_SLOPE));
        }
    }
    let pooled = tape.mean_axes(x, &[2, 3]); // (B*m, d)
    tape.reshape(pooled, &[batch, cfg.num_masks, cfg.appearance_dim])
}

/// Image decoder: masks `(B, m, h, w)` and appearance `(B, m, d)` to NCHW
/// images in [-1, 1].
///
/// Fusion tiles each appearance vector over the mask grid, gates it by its
/// mask, concatenates the masks themselves, and projects with a 1x1
/// convolution before residual blocks and strided upsampling.
pub fn decoder_forward<F: Real>(
    tape: &mut Tape<F>,
    masks: Var,
    appearance: Var,
    bound: &BoundParams,
    cfg: &ModelConfig,
) -> Var {
    let arch = Architecture::build(cfg);
    let (b, m) = {
        let s = tape.value(masks).shape();
        (s[0], s[1])
    };
    let d = cfg.appearance_dim;
    let (h, w) = (cfg.mask_height(), cfg.mask_width());

    let app5 = tape.reshape(appearance, &[b, m, d, 1, 1]);
    let mask5 = tape.reshape(masks, &[b, m, 1, h, w]);
    let tiled = tape.mul(app5, mask5); // (B, m, d, h, w)
    let tiled4 = tape.reshape(tiled, &[b, m * d, h, w]);
    let fused_in = tape.concat(&[tiled4, masks], 1);

    let mut x = conv_block(tape, fused_in, bound, &arch.dec_fuse, false);
    x = tape.relu(x);
    for pair in arch.dec_res.chunks(2) {
        let c1 = conv_block(tape, x, bound, &pair[0], false);
        let a1 = tape.relu(c1);
        let c2 = conv_block(tape, a1, bound, &pair[1], false);
        let sum = tape.add(x, c2);
        x = tape.relu(sum);
    }
    for def in &arch.dec_up {
        x = conv_block(tape, x, bound, def, true);
        x = tape.relu(x);
    }
    let out = conv_block(tape, x, bound, &arch.dec_out, false);
    tape.tanh(out)
}

/// Feature classifier: masks and appearance to one unbounded score per
/// batch element, shape `(B, 1)`.
pub fn classifier_forward<F: Real>(
    tape: &mut Tape<F>,
    masks: Var,
    appearance: Var,
    bound: &BoundParams,
    cfg: &ModelConfig,
) -> Var {
    let arch = Architecture::build(cfg);
    let (b, m) = {
        let s = tape.value(masks).shape();
        (s[0], s[1])
    };
    let mut x = masks;
    for def in &arch.cls_convs {
        x = conv_block(tape, x, bound, def, false);
        x = tape.leaky_relu(x, F::from_f64(LEAKY_SLOPE));
    }
    let feat_len = tape.value(x).len() / b;
    let mask_flat = tape.reshape(x, &[b, feat_len]);
    let app_flat = tape.reshape(appearance, &[b, m * cfg.appearance_dim]);
    let mut y = tape.concat(&[mask_flat, app_flat], 1);
    let last = arch.cls_linears.len() - 1;
    for (i, def) in arch.cls_linears.iter().enumerate() {
        let w = bound.var(&format!("{}.weight", def.name));
        let bias = bound.var(&format!("{}.bias", def.name));
        y = tape.linear(y, w, bias);
        if i < last {
            y = tape.leaky_relu(y, F::from_f64(LEAKY_SLOPE));
        }
    }
    y
}

// ---------------------------------------------------------------------------
// Value-level operations over the public domain types (evaluation mode).
// ---------------------------------------------------------------------------

/// Encodes a batch of images into shape masks.
pub fn encode_shape(images: &ImageBatch, params: &NetworkParams<f32>) -> Result<MaskSet> {
    validate_batch(images, &params.cfg)?;
    params.check_fingerprint()?;
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(to_nchw(&images.0).into_dyn());
    let bound = bind_params(&mut tape, &params.shape_encoder, false);
    let masks = shape_encoder_forward(&mut tape, x, &bound, &params.cfg);
    let value = tape.value(masks).clone().into_dimensionality().expect("mask rank");
    Ok(MaskSet(value))
}

/// Bilinearly upsamples masks to a target resolution. Values stay in [0, 1]
/// because bilinear interpolation is a convex combination; the channel
/// broadcast is performed by the consumer.
pub fn resize_broadcast(masks: &MaskSet, target_h: usize, target_w: usize) -> Result<Array4<f32>> {
    let (h, w) = (masks.height(), masks.width());
    if target_h == 0 || target_w == 0 || target_h % h != 0 || target_w % w != 0 {
        return Err(Error::Shape(format!(
            "target {target_h}x{target_w} is not an integer multiple of mask resolution {h}x{w}"
        )));
    }
    Ok(crate::autodiff::kernels::bilinear_resize(&masks.0.view(), target_h, target_w))
}

/// Element-wise multiplication of each upsampled mask with the image.
pub fn apply_masks(images: &ImageBatch, masks: &MaskSet) -> Result<FilteredImageSet> {
    let (b, m) = (masks.batch(), masks.num_masks());
    if images.batch() != b {
        return Err(Error::Shape(format!(
            "batch mismatch: {} images vs {} mask sets",
            images.batch(),
            b
        )));
    }
    let (h, w) = (images.height(), images.width());
    let up = resize_broadcast(masks, h, w)?;
    let mut out = ndarray::Array5::<f32>::zeros((b, m, h, w, 3));
    for bi in 0..b {
        for mi in 0..m {
            for y in 0..h {
                for x in 0..w {
                    let g = up[[bi, mi, y, x]];
                    for c in 0..3 {
                        out[[bi, mi, y, x, c]] = images.0[[bi, y, x, c]] * g;
                    }
                }
            }
        }
    }
    Ok(FilteredImageSet(out))
}

/// Encodes mask-filtered images into per-mask appearance vectors.
pub fn encode_appearance(
    filtered: &FilteredImageSet,
    params: &NetworkParams<f32>,
) -> Result<AppearanceFeatureSet> {
    params.check_fingerprint()?;
    let s = filtered.0.shape();
    let (b, m, h, w) = (s[0], s[1], s[2], s[3]);
    if m != params.cfg.num_masks {
        return Err(Error::Shape(format!(
            "filtered set has {m} masks, config wants {}",
            params.cfg.num_masks
        )));
    }
    // (B, m, H, W, 3) -> (B*m, 3, H, W)
    let flat = filtered
        .0
        .view()
        .permuted_axes([0, 1, 4, 2, 3])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((b * m, 3, h, w))
        .expect("filtered reshape");
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(flat.into_dyn());
    let bound = bind_params(&mut tape, &params.appearance_encoder, false);
    let feats = appearance_encoder_forward(&mut tape, x, &bound, &params.cfg, b);
    let value = tape.value(feats).clone().into_dimensionality().expect("feature rank");
    Ok(AppearanceFeatureSet(value))
}

/// Decodes masks plus appearance vectors into an image batch.
pub fn decode(
    masks: &MaskSet,
    appearance: &AppearanceFeatureSet,
    params: &NetworkParams<f32>,
) -> Result<ImageBatch> {
    params.check_fingerprint()?;
    if masks.batch() != appearance.batch() || masks.num_masks() != appearance.num_masks() {
        return Err(Error::Shape(format!(
            "decode: masks {}x{} vs appearance {}x{}",
            masks.batch(),
            masks.num_masks(),
            appearance.batch(),
            appearance.num_masks()
        )));
    }
    let mut tape = Tape::<f32>::new();
    let mv = tape.constant(masks.0.clone().into_dyn());
    let av = tape.constant(appearance.0.clone().into_dyn());
    let bound = bind_params(&mut tape, &params.decoder, false);
    let out = decoder_forward(&mut tape, mv, av, &bound, &params.cfg);
    let nchw: Array4<f32> = tape.value(out).clone().into_dimensionality().expect("image rank");
    Ok(ImageBatch(to_bhwc(&nchw)))
}

/// Scores (shape, appearance) pairs: positive pairs should score near 1,
/// mixed pairs near 0 once the classifier is trained.
pub fn classify(
    masks: &MaskSet,
    appearance: &AppearanceFeatureSet,
    params: &NetworkParams<f32>,
) -> Result<ClassifierScore> {
    params.check_fingerprint()?;
    if masks.batch() != appearance.batch() || masks.num_masks() != appearance.num_masks() {
        return Err(Error::Shape("classify: batch or mask-count mismatch".into()));
    }
    let mut tape = Tape::<f32>::new();
    let mv = tape.constant(masks.0.clone().into_dyn());
    let av = tape.constant(appearance.0.clone().into_dyn());
    let bound = bind_params(&mut tape, &params.classifier, false);
    let score = classifier_forward(&mut tape, mv, av, &bound, &params.cfg);
    let flat: Array1<f32> = tape
        .value(score)
        .clone()
        .into_shape_with_order(masks.batch())
        .expect("score shape");
    Ok(ClassifierScore(flat))
}

/// Full reconstruction path of one image batch:
/// `decode(E_s(I), E_a(I (.) E_s(I)))`.
pub fn reconstruct(images: &ImageBatch, params: &NetworkParams<f32>) -> Result<ImageBatch> {
    let masks = encode_shape(images, params)?;
    let filtered = apply_masks(images, &masks)?;
    let appearance = encode_appearance(&filtered, params)?;
    decode(&masks, &appearance, params)
}

/// Appearance/shape transfer: appearance from the first batch, shape from
/// the second.
pub fn transfer(
    appearance_src: &ImageBatch,
    shape_src: &ImageBatch,
    params: &NetworkParams<f32>,
) -> Result<ImageBatch> {
    let masks_app = encode_shape(appearance_src, params)?;
    let filtered = apply_masks(appearance_src, &masks_app)?;
    let appearance = encode_appearance(&filtered, params)?;
    let masks_shape = encode_shape(shape_src, params)?;
    decode(&masks_shape, &appearance, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array4, Array5};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            image_height: 8,
            image_width: 8,
            num_masks: 2,
            appearance_dim: 4,
            downsample_factor: 4,
            decoder_fuse_channels: 8,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn shapes_follow_config() {
        let cfg = ModelConfig::default();
        let params = init_random_params::<f32>(&cfg, 0);
        let images = ImageBatch(Array4::from_elem((2, 64, 64, 3), 0.1f32));
        let masks = encode_shape(&images, &params).unwrap();
        assert_eq!(masks.0.shape(), &[2, 14, 16, 16]);
        let filtered = apply_masks(&images, &masks).unwrap();
        assert_eq!(filtered.0.shape(), &[2, 14, 64, 64, 3]);
        let feats = encode_appearance(&filtered, &params).unwrap();
        assert_eq!(feats.0.shape(), &[2, 14, 32]);
        let out = decode(&masks, &feats, &params).unwrap();
        assert_eq!(out.0.shape(), &[2, 64, 64, 3]);
        assert!(out.0.iter().all(|v| (-1.0..=1.0).contains(v)));
        let scores = classify(&masks, &feats, &params).unwrap();
        assert_eq!(scores.0.len(), 2);
    }

    #[test]
    fn masks_stay_in_unit_range() {
        let cfg = tiny_cfg();
        let params = init_random_params::<f32>(&cfg, 3);
        let mut data = Array4::zeros((2, 8, 8, 3));
        data.iter_mut().enumerate().for_each(|(i, v)| *v = ((i % 17) as f32 / 8.0) - 1.0);
        let masks = encode_shape(&ImageBatch(data), &params).unwrap();
        assert!(masks.0.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn softmax_masks_stay_in_unit_range() {
        let cfg = ModelConfig { mask_activation: MaskActivation::SoftmaxOverMasks, ..tiny_cfg() };
        let params = init_random_params::<f32>(&cfg, 3);
        let mut data = Array4::zeros((1, 8, 8, 3));
        data.iter_mut().enumerate().for_each(|(i, v)| *v = ((i % 17) as f32 / 8.0) - 1.0);
        let masks = encode_shape(&ImageBatch(data), &params).unwrap();
        assert!(masks.0.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // per-pixel mask weights sum to one
        for y in 0..2 {
            for x in 0..2 {
                let s: f32 = (0..cfg.num_masks).map(|m| masks.0[[0, m, y, x]]).sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn zero_input_masks_follow_bias_path() {
        let cfg = tiny_cfg();
        let params = init_random_params::<f32>(&cfg, 4);
        let images = ImageBatch(Array4::zeros((2, 8, 8, 3)));
        let masks = encode_shape(&images, &params).unwrap();
        assert!(masks.0.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // both batch elements see the same bias response
        let a = masks.0.index_axis(ndarray::Axis(0), 0);
        let b = masks.0.index_axis(ndarray::Axis(0), 1);
        assert_eq!(a, b);
    }

    #[test]
    fn encode_shape_deterministic() {
        let cfg = tiny_cfg();
        let params = init_random_params::<f32>(&cfg, 5);
        let images = ImageBatch(Array4::from_elem((2, 8, 8, 3), 0.25f32));
        let m1 = encode_shape(&images, &params).unwrap();
        let m2 = encode_shape(&images, &params).unwrap();
        assert_eq!(m1.0, m2.0);
    }

    #[test]
    fn apply_masks_identity_and_annihilator() {
        let cfg = tiny_cfg();
        let mut images = Array4::zeros((1, 8, 8, 3));
        images.iter_mut().enumerate().for_each(|(i, v)| *v = ((i % 13) as f32 / 6.5) - 1.0);
        let images = ImageBatch(images);
        let ones = MaskSet(Array4::from_elem((1, cfg.num_masks, 2, 2), 1.0f32));
        let filtered = apply_masks(&images, &ones).unwrap();
        for mi in 0..cfg.num_masks {
            for y in 0..8 {
                for x in 0..8 {
                    for c in 0..3 {
                        assert_eq!(filtered.0[[0, mi, y, x, c]], images.0[[0, y, x, c]]);
                    }
                }
            }
        }
        let zeros = MaskSet(Array4::zeros((1, cfg.num_masks, 2, 2)));
        let filtered = apply_masks(&images, &zeros).unwrap();
        assert!(filtered.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn apply_masks_constant_product() {
        let images = ImageBatch(Array4::from_elem((1, 8, 8, 3), 1.0f32));
        let masks = MaskSet(Array4::from_elem((1, 2, 2, 2), 0.25f32));
        let filtered = apply_masks(&images, &masks).unwrap();
        assert!(filtered.0.iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn weight_sharing_identical_and_permuted_rows() {
        let cfg = tiny_cfg();
        let params = init_random_params::<f32>(&cfg, 6);
        let mut filtered = Array5::zeros((2, 2, 8, 8, 3));
        filtered.iter_mut().enumerate().for_each(|(i, v)| *v = ((i % 11) as f32 / 5.5) - 1.0);
        // batch element 1 = batch element 0 with masks swapped
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    let a = filtered[[0, 0, y, x, c]];
                    let b = filtered[[0, 1, y, x, c]];
                    filtered[[1, 0, y, x, c]] = b;
                    filtered[[1, 1, y, x, c]] = a;
                }
            }
        }
        let feats = encode_appearance(&FilteredImageSet(filtered), &params).unwrap();
        for j in 0..cfg.appearance_dim {
            assert!((feats.0[[0, 0, j]] - feats.0[[1, 1, j]]).abs() < 1e-6);
            assert!((feats.0[[0, 1, j]] - feats.0[[1, 0, j]]).abs() < 1e-6);
        }
    }

    #[test]
    fn all_zero_filtered_input_gives_shared_bias_response() {
        let cfg = tiny_cfg();
        let params = init_random_params::<f32>(&cfg, 7);
        let filtered = FilteredImageSet(Array5::zeros((1, 2, 8, 8, 3)));
        let feats = encode_appearance(&filtered, &params).unwrap();
        for j in 0..cfg.appearance_dim {
            assert_eq!(feats.0[[0, 0, j]], feats.0[[0, 1, j]]);
        }
    }

    #[test]
    fn decode_same_inputs_bitwise_identical() {
        let cfg = tiny_cfg();
        let params = init_random_params::<f32>(&cfg, 8);
        let masks = MaskSet(Array4::from_elem((1, 2, 2, 2), 0.5f32));
        let app = AppearanceFeatureSet(Array3::from_elem((1, 2, 4), 0.3f32));
        let a = decode(&masks, &app, &params).unwrap();
        let b = decode(&masks, &app, &params).unwrap();
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn classify_per_element_and_permutation() {
        let cfg = tiny_cfg();
        let params = init_random_params::<f32>(&cfg, 9);
        let mut masks = Array4::zeros((3, 2, 2, 2));
        masks.iter_mut().enumerate().for_each(|(i, v)| *v = (i % 7) as f32 / 7.0);
        let mut app = Array3::zeros((3, 2, 4));
        app.iter_mut().enumerate().for_each(|(i, v)| *v = (i % 5) as f32 / 5.0);
        let scores = classify(&MaskSet(masks.clone()), &AppearanceFeatureSet(app.clone()), &params)
            .unwrap();
        assert_eq!(scores.0.len(), 3);
        // permute batch order 0,1,2 -> 2,0,1
        let perm = [2usize, 0, 1];
        let mut masks_p = Array4::zeros((3, 2, 2, 2));
        let mut app_p = Array3::zeros((3, 2, 4));
        for (dst, &src) in perm.iter().enumerate() {
            masks_p
                .index_axis_mut(ndarray::Axis(0), dst)
                .assign(&masks.index_axis(ndarray::Axis(0), src));
            app_p
                .index_axis_mut(ndarray::Axis(0), dst)
                .assign(&app.index_axis(ndarray::Axis(0), src));
        }
        let scores_p = classify(&MaskSet(masks_p), &AppearanceFeatureSet(app_p), &params).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            assert!((scores_p.0[dst] - scores.0[src]).abs() < 1e-6);
        }
    }

    #[test]
    fn seeded_init_reproducible_and_seed_sensitive() {
        let cfg = tiny_cfg();
        let a = init_random_params::<f32>(&cfg, 42);
        let b = init_random_params::<f32>(&cfg, 42);
        assert_eq!(a, b);
        let c = init_random_params::<f32>(&cfg, 43);
        assert_ne!(a, c);
    }

    #[test]
    fn fingerprint_detects_config_change() {
        let cfg = tiny_cfg();
        let mut params = init_random_params::<f32>(&cfg, 1);
        params.cfg.num_masks = 3;
        assert!(params.check_fingerprint().is_err());
    }

    #[test]
    fn resize_broadcast_rejects_non_integer_scale() {
        let masks = MaskSet(Array4::from_elem((1, 2, 3, 3), 0.5f32));
        assert!(resize_broadcast(&masks, 7, 9).is_err());
        assert!(resize_broadcast(&masks, 9, 9).is_ok());
    }

    #[test]
    fn transfer_with_same_image_equals_reconstruct() {
        let cfg = tiny_cfg();
        let params = init_random_params::<f32>(&cfg, 11);
        let mut data = Array4::zeros((1, 8, 8, 3));
        data.iter_mut().enumerate().for_each(|(i, v)| *v = ((i % 19) as f32 / 9.5) - 1.0);
        let images = ImageBatch(data);
        let rec = reconstruct(&images, &params).unwrap();
        let mix = transfer(&images, &images, &params).unwrap();
        assert_eq!(rec.0, mix.0);
    }
}
