//! Frozen convolutional feature extractor behind the perceptual
//! reconstruction loss.
//!
//! The default extractor is a fixed random 3-stage stride-2 stack (random
//! deep features are a serviceable perceptual metric at this scale); an
//! import path accepts externally converted weights from the checkpoint
//! container's `perceptual` section. Extractor parameters are never
//! updated by training.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{bind_params, BoundParams, ParamSet, Real, Tape, Var};
use crate::checkpoint::{read_container, ArrayData};
use crate::error::{Error, Result};
use crate::networks::to_nchw;
use crate::types::ImageBatch;

const LEAKY_SLOPE: f64 = 0.2;

/// Channel width of tap `k` (1-based): 16, 32, 64, then capped.
fn stage_channels(stage: usize) -> usize {
    (16 << stage).min(128)
}

/// Frozen feature network with per-layer loss weights.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualExtractor<F: Real = f32> {
    pub params: ParamSet<F>,
    num_stages: usize,
    /// Per-layer weights applied by the reconstruction loss.
    pub layer_weights: Vec<f64>,
}

/// Features tapped after each stride-2 stage, plus the layer weights.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub features: Vec<ArrayD<f32>>,
    pub layer_weights: Vec<f64>,
}

/// Where extractor weights come from.
pub enum ExtractorSource<'a> {
    FixedRandom,
    Imported(&'a Path),
}

impl<F: Real> PerceptualExtractor<F> {
    pub fn num_stages(&self) -> usize {
        self.num_stages
    }

    /// Expected `(out_ch, in_ch, k, k)` weight shape per stage.
    fn expected_shapes(num_stages: usize) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut in_ch = 3;
        for s in 0..num_stages {
            let out_ch = stage_channels(s);
            out.push((format!("stage{}.weight", s + 1), vec![out_ch, in_ch, 3, 3]));
            out.push((format!("stage{}.bias", s + 1), vec![out_ch]));
            in_ch = out_ch;
        }
        out
    }

    pub fn cast<G: Real>(&self) -> PerceptualExtractor<G> {
        PerceptualExtractor {
            params: self.params.cast(),
            num_stages: self.num_stages,
            layer_weights: self.layer_weights.clone(),
        }
    }
}

/// Builds an extractor with seeded variance-scaled random filters.
pub fn fixed_random_extractor<F: Real>(seed: u64, num_stages: usize) -> PerceptualExtractor<F> {
    assert!(num_stages >= 1, "perceptual extractor needs at least one stage");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut params = ParamSet::new();
    let mut in_ch = 3;
    for s in 0..num_stages {
        let out_ch = stage_channels(s);
        let std = (2.0 / (in_ch * 9) as f64).sqrt();
        let w = ArrayD::from_shape_simple_fn(IxDyn(&[out_ch, in_ch, 3, 3]), || {
            F::from_f64(normal.sample(&mut rng) * std)
        });
        params.insert(format!("stage{}.weight", s + 1), w);
        params.insert(format!("stage{}.bias", s + 1), ArrayD::from_elem(IxDyn(&[out_ch]), F::ZERO));
        in_ch = out_ch;
    }
    PerceptualExtractor { params, num_stages, layer_weights: vec![1.0; num_stages] }
}

/// Creates an extractor from the requested source. `Imported` reads the
/// `perceptual` section of a checkpoint container and validates every
/// layer shape.
pub fn make_extractor(
    seed: u64,
    source: ExtractorSource<'_>,
    num_stages: usize,
) -> Result<PerceptualExtractor<f32>> {
    match source {
        ExtractorSource::FixedRandom => Ok(fixed_random_extractor(seed, num_stages)),
        ExtractorSource::Imported(path) => {
            let container = read_container(path)?;
            let section = container.sections.get("perceptual").ok_or_else(|| {
                Error::Checkpoint(format!(
                    "{} has no 'perceptual' section",
                    path.display()
                ))
            })?;
            let mut params = ParamSet::new();
            for (name, shape) in PerceptualExtractor::<f32>::expected_shapes(num_stages) {
                let data = section.arrays.get(&name).ok_or_else(|| {
                    Error::Checkpoint(format!("imported perceptual weights: missing layer '{name}'"))
                })?;
                let arr = match data {
                    ArrayData::F32(a) => a.clone(),
                    ArrayData::F64(a) => a.mapv(|v| v as f32),
                };
                if arr.shape() != shape.as_slice() {
                    return Err(Error::Checkpoint(format!(
                        "imported perceptual weights: layer '{name}' has shape {:?}, expected {:?}",
                        arr.shape(),
                        shape
                    )));
                }
                params.insert(name, arr);
            }
            Ok(PerceptualExtractor { params, num_stages, layer_weights: vec![1.0; num_stages] })
        }
    }
}

/// Tape-level pyramid: taps after each stride-2 stage's activation.
pub fn pyramid_forward<F: Real>(
    tape: &mut Tape<F>,
    images: Var,
    bound: &BoundParams,
    num_stages: usize,
) -> Vec<Var> {
    let mut taps = Vec::with_capacity(num_stages);
    let mut x = images;
    for s in 0..num_stages {
        let w = bound.var(&format!("stage{}.weight", s + 1));
        let b = bound.var(&format!("stage{}.bias", s + 1));
        x = tape.conv2d(x, w, b, 2, 1);
        x = tape.leaky_relu(x, F::from_f64(LEAKY_SLOPE));
        taps.push(x);
    }
    taps
}

/// Deterministic forward pass of the frozen stack over an image batch.
pub fn extract_features(
    images: &ImageBatch,
    extractor: &PerceptualExtractor<f32>,
) -> FeaturePyramid {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(to_nchw(&images.0).into_dyn());
    let bound = bind_params(&mut tape, &extractor.params, false);
    let taps = pyramid_forward(&mut tape, x, &bound, extractor.num_stages);
    FeaturePyramid {
        features: taps.into_iter().map(|v| tape.value(v).clone()).collect(),
        layer_weights: extractor.layer_weights.clone(),
    }
}

/// Checks the pyramid invariants: at least one layer, strictly decreasing
/// spatial size, finite elements.
pub fn validate_pyramid(pyr: &FeaturePyramid) -> Result<()> {
    if pyr.features.is_empty() {
        return Err(Error::Shape("feature pyramid is empty".into()));
    }
    let mut prev: Option<(usize, usize)> = None;
    for (k, f) in pyr.features.iter().enumerate() {
        let s = f.shape();
        let (h, w) = (s[2], s[3]);
        if let Some((ph, pw)) = prev {
            if h >= ph || w >= pw {
                return Err(Error::Shape(format!(
                    "pyramid layer {k} is {h}x{w}, not smaller than the previous {ph}x{pw}"
                )));
            }
        }
        prev = Some((h, w));
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("pyramid layer {k} contains non-finite values")));
        }
    }
    Ok(())
}
