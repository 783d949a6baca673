//! Synthetic sprite dataset with ground-truth appearance/shape factors,
//! folder-based image loading, and random pair sampling.
//!
//! Sprites are stick figures with 6 parts (head disc, torso rectangle, four
//! limb capsules), flat or striped per-part colors, and a uniform gray
//! background. Rasterization is anti-aliased with 2x supersampling; ground
//! truth assigns each subsample to the topmost covering part, and a pixel
//! belongs to a part's binary mask when that part covers at least half of
//! its subsamples (ties go to the topmost part, so masks are disjoint).

use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::ImageBatch;

pub const NUM_PARTS: usize = 6;
pub const PART_NAMES: [&str; NUM_PARTS] =
    ["head", "torso", "arm_left", "arm_right", "leg_left", "leg_right"];

/// Articulation descriptor, in pixels at the 64x64 reference scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    /// Torso width as a fraction of torso height.
    pub torso_aspect: f32,
    /// Swing of [arm_left, arm_right, leg_left, leg_right] away from
    /// straight down, radians.
    pub limb_angles: [f32; 4],
    /// Capsule radius of the limbs.
    pub limb_thickness: f32,
    pub head_radius: f32,
    /// Whole-figure translation from the canvas center.
    pub translation: [f32; 2],
}

/// Per-part colors plus an optional stripe texture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppearanceParams {
    /// RGB in [-1, 1], indexed like [`PART_NAMES`].
    pub part_colors: [[f32; 3]; NUM_PARTS],
    /// Horizontal stripe frequency in cycles per image height; 0 disables
    /// striping. Stripes alternate the part color with a darker tone.
    pub stripe_freq: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpriteSpec {
    pub shape: ShapeParams,
    pub appearance: AppearanceParams,
}

/// Factor sampling ranges used by [`generate_dataset`].
mod ranges {
    pub const TORSO_ASPECT: (f32, f32) = (0.40, 0.75);
    pub const ARM_ANGLE: (f32, f32) = (0.15, 1.40);
    pub const LEG_ANGLE: (f32, f32) = (0.05, 0.45);
    pub const LIMB_THICKNESS: (f32, f32) = (2.5, 4.0);
    pub const HEAD_RADIUS: (f32, f32) = (4.0, 8.0);
    pub const TRANSLATION: (f32, f32) = (-4.0, 4.0);
    pub const STRIPE_FREQ: (f32, f32) = (2.0, 6.0);
    pub const BACKGROUND: (f32, f32) = (-0.2, 0.2);
}

fn uniform(rng: &mut ChaCha8Rng, range: (f32, f32)) -> f32 {
    rng.random_range(range.0..range.1)
}

/// Samples sprite factors from the documented uniform ranges.
pub fn sample_spec(rng: &mut ChaCha8Rng) -> SpriteSpec {
    let shape = ShapeParams {
        torso_aspect: uniform(rng, ranges::TORSO_ASPECT),
        limb_angles: [
            uniform(rng, ranges::ARM_ANGLE),
            uniform(rng, ranges::ARM_ANGLE),
            uniform(rng, ranges::LEG_ANGLE),
            uniform(rng, ranges::LEG_ANGLE),
        ],
        limb_thickness: uniform(rng, ranges::LIMB_THICKNESS),
        head_radius: uniform(rng, ranges::HEAD_RADIUS),
        translation: [uniform(rng, ranges::TRANSLATION), uniform(rng, ranges::TRANSLATION)],
    };
    let mut part_colors = [[0.0f32; 3]; NUM_PARTS];
    for color in part_colors.iter_mut() {
        for ch in color.iter_mut() {
            *ch = rng.random_range(-1.0..1.0);
        }
    }
    let stripe_freq =
        if rng.random_range(0.0..1.0) < 0.5 { 0.0 } else { uniform(rng, ranges::STRIPE_FREQ) };
    SpriteSpec { shape, appearance: AppearanceParams { part_colors, stripe_freq } }
}

/// One drawable primitive, listed in z-order (lowest index on top).
enum PartGeom {
    Disc { cx: f32, cy: f32, r: f32 },
    Rect { cx: f32, cy: f32, half_w: f32, half_h: f32 },
    Capsule { ax: f32, ay: f32, bx: f32, by: f32, r: f32 },
}

impl PartGeom {
    fn covers(&self, px: f32, py: f32) -> bool {
        match *self {
            PartGeom::Disc { cx, cy, r } => {
                let (dx, dy) = (px - cx, py - cy);
                dx * dx + dy * dy <= r * r
            }
            PartGeom::Rect { cx, cy, half_w, half_h } => {
                (px - cx).abs() <= half_w && (py - cy).abs() <= half_h
            }
            PartGeom::Capsule { ax, ay, bx, by, r } => {
                let (vx, vy) = (bx - ax, by - ay);
                let (wx, wy) = (px - ax, py - ay);
                let len2 = vx * vx + vy * vy;
                let t = if len2 > 0.0 { ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
                let (dx, dy) = (wx - t * vx, wy - t * vy);
                dx * dx + dy * dy <= r * r
            }
        }
    }

    fn bbox(&self) -> (f32, f32, f32, f32) {
        match *self {
            PartGeom::Disc { cx, cy, r } => (cx - r, cy - r, cx + r, cy + r),
            PartGeom::Rect { cx, cy, half_w, half_h } => {
                (cx - half_w, cy - half_h, cx + half_w, cy + half_h)
            }
            PartGeom::Capsule { ax, ay, bx, by, r } => {
                (ax.min(bx) - r, ay.min(by) - r, ax.max(bx) + r, ay.max(by) + r)
            }
        }
    }
}

fn build_geometry(spec: &SpriteSpec, h: usize, w: usize) -> Vec<PartGeom> {
    let s = (h.min(w)) as f32 / 64.0;
    let sp = &spec.shape;
    let cx = w as f32 * 0.5 + sp.translation[0] * s;
    let cy = h as f32 * 0.47 + sp.translation[1] * s;
    let half_h = 10.0 * s;
    let half_w = half_h * sp.torso_aspect;
    let head_r = sp.head_radius * s;
    let limb_r = sp.limb_thickness * s;
    let arm_len = 16.0 * s;
    let leg_len = 17.0 * s;

    let capsule = |px: f32, py: f32, angle: f32, sign: f32, len: f32| PartGeom::Capsule {
        ax: px,
        ay: py,
        bx: px + sign * angle.sin() * len,
        by: py + angle.cos() * len,
        r: limb_r,
    };

    vec![
        PartGeom::Disc { cx, cy: cy - half_h - 0.8 * head_r, r: head_r },
        PartGeom::Rect { cx, cy, half_w, half_h },
        capsule(cx - (half_w - s), cy - half_h + 2.0 * s, sp.limb_angles[0], -1.0, arm_len),
        capsule(cx + (half_w - s), cy - half_h + 2.0 * s, sp.limb_angles[1], 1.0, arm_len),
        capsule(cx - (half_w - 2.0 * s), cy + half_h - 2.0 * s, sp.limb_angles[2], -1.0, leg_len),
        capsule(cx + (half_w - 2.0 * s), cy + half_h - 2.0 * s, sp.limb_angles[3], 1.0, leg_len),
    ]
}

/// Renders one sprite. Returns the image (`h x w x 3`, values in [-1, 1])
/// and the binary ground-truth part masks (`NUM_PARTS x h x w`).
///
/// The seed fixes per-image nuisance factors (the background gray).
pub fn render_sprite(
    spec: &SpriteSpec,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<(Array3<f32>, Array3<f32>)> {
    let geoms = build_geometry(spec, h, w);
    for (p, g) in geoms.iter().enumerate() {
        let (x0, y0, x1, y1) = g.bbox();
        if x1 < 0.0 || y1 < 0.0 || x0 >= w as f32 || y0 >= h as f32 {
            return Err(Error::Data(format!(
                "part '{}' rendered fully outside the {w}x{h} canvas",
                PART_NAMES[p]
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = uniform(&mut rng, ranges::BACKGROUND);

    let freq = spec.appearance.stripe_freq;
    let part_color = |p: usize, sy: f32| -> [f32; 3] {
        let mut c = spec.appearance.part_colors[p];
        if freq > 0.0 {
            let band = (sy / h as f32 * freq * 2.0).floor() as i64;
            if band.rem_euclid(2) == 1 {
                for ch in c.iter_mut() {
                    *ch *= 0.55;
                }
            }
        }
        c
    };

    let mut image = Array3::<f32>::zeros((h, w, 3));
    let mut masks = Array3::<f32>::zeros((NUM_PARTS, h, w));
    const SUB: [f32; 2] = [0.25, 0.75];
    for y in 0..h {
        for x in 0..w {
            let mut counts = [0u8; NUM_PARTS];
            let mut acc = [0.0f32; 3];
            for oy in SUB {
                for ox in SUB {
                    let (sx, sy) = (x as f32 + ox, y as f32 + oy);
                    let mut hit = None;
                    for (p, g) in geoms.iter().enumerate() {
                        if g.covers(sx, sy) {
                            hit = Some(p);
                            break;
                        }
                    }
                    match hit {
                        Some(p) => {
                            counts[p] += 1;
                            let c = part_color(p, sy);
                            for ch in 0..3 {
                                acc[ch] += c[ch];
                            }
                        }
                        None => {
                            for item in acc.iter_mut() {
                                *item += bg;
                            }
                        }
                    }
                }
            }
            for ch in 0..3 {
                image[[y, x, ch]] = acc[ch] / 4.0;
            }
            // >= half coverage wins; the topmost such part takes the pixel
            if let Some(p) = counts.iter().position(|&c| c >= 2) {
                masks[[p, y, x]] = 1.0;
            }
        }
    }
    Ok((image, masks))
}

/// In-memory synthetic dataset: images, ground-truth part masks, and the
/// factor values they were rendered from.
#[derive(Clone, Debug)]
pub struct SpriteDataset {
    images: Vec<Array3<f32>>,
    part_masks: Vec<Array3<f32>>,
    specs: Vec<SpriteSpec>,
    height: usize,
    width: usize,
}

impl SpriteDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_parts(&self) -> usize {
        NUM_PARTS
    }

    pub fn image(&self, idx: usize) -> &Array3<f32> {
        &self.images[idx]
    }

    pub fn part_masks(&self, idx: usize) -> &Array3<f32> {
        &self.part_masks[idx]
    }

    pub fn spec(&self, idx: usize) -> &SpriteSpec {
        &self.specs[idx]
    }

    /// Union of the part masks.
    pub fn silhouette(&self, idx: usize) -> ndarray::Array2<f32> {
        let gt = &self.part_masks[idx];
        let mut out = ndarray::Array2::<f32>::zeros((self.height, self.width));
        for p in 0..NUM_PARTS {
            for y in 0..self.height {
                for x in 0..self.width {
                    if gt[[p, y, x]] > 0.5 {
                        out[[y, x]] = 1.0;
                    }
                }
            }
        }
        out
    }
}

/// Generates `n` sprites with independently sampled factors.
pub fn generate_dataset(n: usize, h: usize, w: usize, seed: u64) -> Result<SpriteDataset> {
    if n < 2 {
        return Err(Error::Data(format!("need >= 2 samples for pair training, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n);
    let mut part_masks = Vec::with_capacity(n);
    let mut specs = Vec::with_capacity(n);
    for _ in 0..n {
        let spec = sample_spec(&mut rng);
        let render_seed = rng.random::<u64>();
        let (image, masks) = render_sprite(&spec, h, w, render_seed)?;
        images.push(image);
        part_masks.push(masks);
        specs.push(spec);
    }
    Ok(SpriteDataset { images, part_masks, specs, height: h, width: w })
}

/// Common interface the trainer samples batches from.
pub trait Dataset: Sync {
    fn len(&self) -> usize;
    fn image(&self, idx: usize) -> &Array3<f32>;
    /// Identifies the underlying sample; pair sampling guarantees the two
    /// sides of a pair have different ids.
    fn source_id(&self, idx: usize) -> u64;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Dataset for SpriteDataset {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn image(&self, idx: usize) -> &Array3<f32> {
        &self.images[idx]
    }

    fn source_id(&self, idx: usize) -> u64 {
        idx as u64
    }
}

/// Images loaded from one split directory, resized and normalized.
#[derive(Clone, Debug)]
pub struct FolderDataset {
    images: Vec<Array3<f32>>,
    /// Files that could not be decoded and were skipped.
    pub skipped: usize,
}

impl Dataset for FolderDataset {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn image(&self, idx: usize) -> &Array3<f32> {
        &self.images[idx]
    }

    fn source_id(&self, idx: usize) -> u64 {
        idx as u64
    }
}

/// Train and test splits of a folder dataset.
#[derive(Clone, Debug)]
pub struct FolderSplits {
    pub train: FolderDataset,
    pub test: FolderDataset,
}

/// Loads one image file, resized to `h x w` and normalized to [-1, 1].
pub fn load_image(path: &Path, h: usize, w: usize) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot read image {}: {e}", path.display())))?;
    let rgb = img.to_rgb8();
    let resized =
        image::imageops::resize(&rgb, w as u32, h as u32, image::imageops::FilterType::Triangle);
    let mut arr = Array3::<f32>::zeros((h, w, 3));
    for (x, y, pixel) in resized.enumerate_pixels() {
        for c in 0..3 {
            arr[[y as usize, x as usize, c]] = pixel.0[c] as f32 / 127.5 - 1.0;
        }
    }
    Ok(arr)
}

fn load_split(dir: &Path, h: usize, w: usize) -> Result<FolderDataset> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("missing split directory {}", dir.display())));
    }
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
                Some("png") | Some("jpg") | Some("jpeg")
            )
        })
        .collect();
    paths.sort();
    let mut images = Vec::new();
    let mut skipped = 0usize;
    for path in &paths {
        match load_image(path, h, w) {
            Ok(arr) => images.push(arr),
            Err(e) => {
                log::warn!("skipping unreadable image: {e}");
                skipped += 1;
            }
        }
    }
    if images.is_empty() {
        return Err(Error::Data(format!("split {} contains no readable images", dir.display())));
    }
    Ok(FolderDataset { images, skipped })
}

/// Loads `<root>/train` and `<root>/test`, resizing every image to `h x w`
/// and normalizing to [-1, 1]. Ordering is stable (sorted by filename).
pub fn load_folder(root: &Path, h: usize, w: usize) -> Result<FolderSplits> {
    Ok(FolderSplits {
        train: load_split(&root.join("train"), h, w)?,
        test: load_split(&root.join("test"), h, w)?,
    })
}

/// Randomly paired image batches; `meta` holds (source_a, source_b) ids.
#[derive(Clone, Debug)]
pub struct PairBatch {
    pub images_a: ImageBatch,
    pub images_b: ImageBatch,
    pub meta: Vec<(u64, u64)>,
}

/// Draws `batch_size` pairs with distinct source ids on the two sides.
pub fn sample_pair_batch<D: Dataset + ?Sized>(
    dataset: &D,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PairBatch> {
    if batch_size < 2 {
        return Err(Error::Data(format!("batch_size must be >= 2, got {batch_size}")));
    }
    let n = dataset.len();
    if n < 2 {
        return Err(Error::Data(format!("dataset too small for pair sampling: {n} element(s)")));
    }
    let mut ia = Vec::with_capacity(batch_size);
    let mut ib = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let a = rng.random_range(0..n);
        let b = loop {
            let c = rng.random_range(0..n);
            if dataset.source_id(c) != dataset.source_id(a) {
                break c;
            }
        };
        ia.push(a);
        ib.push(b);
    }
    let images_a: Vec<Array3<f32>> = ia.iter().map(|&i| dataset.image(i).clone()).collect();
    let images_b: Vec<Array3<f32>> = ib.iter().map(|&i| dataset.image(i).clone()).collect();
    let meta =
        ia.iter().zip(&ib).map(|(&a, &b)| (dataset.source_id(a), dataset.source_id(b))).collect();
    Ok(PairBatch {
        images_a: ImageBatch::from_images(&images_a)?,
        images_b: ImageBatch::from_images(&images_b)?,
        meta,
    })
}

/// Maps a [-1, 1] image to 8-bit RGB.
pub fn to_rgb8(image: &Array3<f32>) -> image::RgbImage {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = out.get_pixel_mut(x as u32, y as u32);
            for c in 0..3 {
                px.0[c] = (((image[[y, x, c]] + 1.0) / 2.0 * 255.0).round()).clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

/// Saves a [-1, 1] image as PNG.
pub fn save_image_png(path: &Path, image: &Array3<f32>) -> Result<()> {
    to_rgb8(image).save(path)?;
    Ok(())
}

fn rle_encode(mask: &ndarray::ArrayView2<f32>) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = 0u8; // runs start with zeros
    let mut count = 0usize;
    for &v in mask.iter() {
        let bit = u8::from(v > 0.5);
        if bit == current {
            count += 1;
        } else {
            runs.push(count);
            current = bit;
            count = 1;
        }
    }
    runs.push(count);
    runs
}

#[derive(Serialize, Deserialize)]
struct PartSidecar {
    name: String,
    rle: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct SpriteSidecar {
    spec: SpriteSpec,
    height: usize,
    width: usize,
    parts: Vec<PartSidecar>,
}

/// Exports a sprite dataset as PNGs plus JSON sidecars (factor values and
/// run-length-encoded part masks) under `<out>/train` and `<out>/test`.
pub fn export_sprites(dataset: &SpriteDataset, out: &Path, train_fraction: f64) -> Result<()> {
    let n_train = ((dataset.len() as f64 * train_fraction).round() as usize)
        .clamp(1, dataset.len().saturating_sub(1));
    for split in ["train", "test"] {
        std::fs::create_dir_all(out.join(split))?;
    }
    for i in 0..dataset.len() {
        let split = if i < n_train { "train" } else { "test" };
        let stem = format!("sprite_{i:05}");
        let dir = out.join(split);
        save_image_png(&dir.join(format!("{stem}.png")), dataset.image(i))?;
        let gt = dataset.part_masks(i);
        let sidecar = SpriteSidecar {
            spec: dataset.spec(i).clone(),
            height: dataset.height(),
            width: dataset.width(),
            parts: (0..NUM_PARTS)
                .map(|p| PartSidecar {
                    name: PART_NAMES[p].to_string(),
                    rle: rle_encode(&gt.index_axis(ndarray::Axis(0), p)),
                })
                .collect(),
        };
        let json = serde_json::to_string_pretty(&sidecar)
            .map_err(|e| Error::Data(format!("sidecar serialization: {e}")))?;
        std::fs::write(dir.join(format!("{stem}.json")), json)?;
    }
    Ok(())
}

/// Intensity (channel mean) of an image, used by tests and metrics.
pub fn intensity(image: &Array3<f32>) -> ndarray::Array2<f32> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut out = ndarray::Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = (image[[y, x, 0]] + image[[y, x, 1]] + image[[y, x, 2]]) / 3.0;
        }
    }
    out
}

/// Chebyshev-dilates a binary mask by one pixel, the documented
/// anti-aliasing tolerance.
pub fn dilate1(mask: &ndarray::Array2<f32>) -> ndarray::Array2<f32> {
    let (h, w) = mask.dim();
    let mut out = ndarray::Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] > 0.5 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                            out[[ny as usize, nx as usize]] = 1.0;
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
pub(crate) fn default_spec() -> SpriteSpec {
    SpriteSpec {
        shape: ShapeParams {
            torso_aspect: 0.6,
            limb_angles: [0.6, 0.6, 0.25, 0.25],
            limb_thickness: 3.2,
            head_radius: 6.0,
            translation: [0.0, 0.0],
        },
        appearance: AppearanceParams {
            part_colors: [
                [0.9, 0.7, 0.2],
                [-0.2, 0.4, 0.9],
                [0.8, -0.5, -0.5],
                [-0.7, 0.8, -0.3],
                [0.3, -0.9, 0.6],
                [-0.5, -0.2, -0.8],
            ],
            stripe_freq: 0.0,
        },
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn render_is_deterministic() {
        let spec = default_spec();
        let (img1, gt1) = render_sprite(&spec, 64, 64, 7).unwrap();
        let (img2, gt2) = render_sprite(&spec, 64, 64, 7).unwrap();
        assert_eq!(img1, img2);
        assert_eq!(gt1, gt2);
    }

    #[test]
    fn neutral_pose_silhouette_is_mirror_symmetric() {
        let mut spec = default_spec();
        spec.shape.limb_angles = [0.0; 4];
        spec.shape.translation = [0.0, 0.0];
        // equal limb colors so the rendered image itself is symmetric
        let arm = spec.appearance.part_colors[2];
        spec.appearance.part_colors[3] = arm;
        let leg = spec.appearance.part_colors[4];
        spec.appearance.part_colors[5] = leg;
        let (img, gt) = render_sprite(&spec, 64, 64, 3).unwrap();
        let mut sil = ndarray::Array2::<f32>::zeros((64, 64));
        for p in 0..NUM_PARTS {
            for y in 0..64 {
                for x in 0..64 {
                    if gt[[p, y, x]] > 0.5 {
                        sil[[y, x]] = 1.0;
                    }
                }
            }
        }
        for y in 0..64 {
            for x in 0..64 {
                assert_eq!(sil[[y, x]], sil[[y, 63 - x]], "silhouette asymmetry at {y},{x}");
                for c in 0..3 {
                    let a = img[[y, x, c]];
                    let b = img[[y, 63 - x, c]];
                    assert!((a - b).abs() < 1e-6, "image asymmetry at {y},{x},{c}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn torso_color_changes_stay_inside_torso_mask() {
        let spec_a = default_spec();
        let mut spec_b = spec_a.clone();
        spec_b.appearance.part_colors[1] = [0.9, -0.9, 0.1];
        let (img_a, gt) = render_sprite(&spec_a, 64, 64, 9).unwrap();
        let (img_b, _) = render_sprite(&spec_b, 64, 64, 9).unwrap();
        let torso = gt.index_axis(ndarray::Axis(0), 1).to_owned();
        let allowed = dilate1(&torso);
        for y in 0..64 {
            for x in 0..64 {
                let differs = (0..3).any(|c| (img_a[[y, x, c]] - img_b[[y, x, c]]).abs() > 1e-6);
                if differs {
                    assert!(
                        allowed[[y, x]] > 0.5,
                        "pixel difference at {y},{x} outside the torso mask"
                    );
                }
            }
        }
    }

    #[test]
    fn part_masks_are_disjoint_and_union_matches_background() {
        let dataset = generate_dataset(6, 64, 64, 11).unwrap();
        for i in 0..dataset.len() {
            let gt = dataset.part_masks(i);
            for y in 0..64 {
                for x in 0..64 {
                    let hits: u32 = (0..NUM_PARTS).map(|p| (gt[[p, y, x]] > 0.5) as u32).sum();
                    assert!(hits <= 1, "overlapping part masks at {y},{x}");
                }
            }
            // pixels away from the silhouette keep the exact background gray
            let sil = dataset.silhouette(i);
            let allowed = dilate1(&sil);
            let img = dataset.image(i);
            let mut bg = None;
            for y in 0..64 {
                for x in 0..64 {
                    if allowed[[y, x] ] < 0.5 {
                        let px = [img[[y, x, 0]], img[[y, x, 1]], img[[y, x, 2]]];
                        assert!((px[0] - px[1]).abs() < 1e-6 && (px[1] - px[2]).abs() < 1e-6);
                        match bg {
                            None => bg = Some(px[0]),
                            Some(b) => assert!((px[0] - b).abs() < 1e-6),
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn dataset_reproducible_and_diverse() {
        let a = generate_dataset(20, 32, 32, 5).unwrap();
        let b = generate_dataset(20, 32, 32, 5).unwrap();
        for i in 0..20 {
            assert_eq!(a.image(i), b.image(i));
        }
        let mut silhouettes = HashSet::new();
        let mut palettes = HashSet::new();
        for i in 0..20 {
            silhouettes.insert(format!("{:?}", a.spec(i).shape));
            palettes.insert(format!("{:?}", a.spec(i).appearance.part_colors));
        }
        assert!(silhouettes.len() >= 2, "expected >= 2 distinct silhouettes");
        assert!(palettes.len() >= 2, "expected >= 2 distinct palettes");
    }

    #[test]
    fn dataset_needs_two_samples() {
        let err = generate_dataset(1, 32, 32, 0).unwrap_err();
        assert!(err.to_string().contains(">= 2 samples"), "{err}");
    }

    #[test]
    fn sprite_fully_off_canvas_is_an_error() {
        let mut spec = default_spec();
        spec.shape.translation = [4000.0, 4000.0];
        let err = render_sprite(&spec, 64, 64, 0).unwrap_err();
        assert!(err.to_string().contains("outside"), "{err}");
    }

    #[test]
    fn pair_batches_have_distinct_sources_and_are_reproducible() {
        let dataset = generate_dataset(10, 16, 16, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = sample_pair_batch(&dataset, 6, &mut rng).unwrap();
        for (a, b) in &batch.meta {
            assert_ne!(a, b);
        }
        let mut rng2 = ChaCha8Rng::seed_from_u64(1);
        let batch2 = sample_pair_batch(&dataset, 6, &mut rng2).unwrap();
        assert_eq!(batch.meta, batch2.meta);
        assert_eq!(batch.images_a.0, batch2.images_a.0);
    }

    #[test]
    fn side_a_draws_are_near_uniform() {
        let dataset = generate_dataset(10, 16, 16, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut counts = vec![0usize; 10];
        let draws = 2500usize;
        let batch_size = 4usize;
        for _ in 0..draws {
            let batch = sample_pair_batch(&dataset, batch_size, &mut rng).unwrap();
            for (a, _) in &batch.meta {
                counts[*a as usize] += 1;
            }
        }
        let total = (draws * batch_size) as f64;
        for &c in &counts {
            let freq = c as f64 / total;
            assert!((freq - 0.1).abs() < 0.02, "frequency {freq}");
        }
    }

    #[test]
    fn rle_runs_start_with_zeros_and_sum_to_area() {
        let mut mask = ndarray::Array2::<f32>::zeros((4, 4));
        mask[[0, 0]] = 1.0;
        mask[[3, 3]] = 1.0;
        let runs = rle_encode(&mask.view());
        assert_eq!(runs.iter().sum::<usize>(), 16);
        assert_eq!(runs[0], 0); // leading zero-run is empty: mask starts with 1
        assert_eq!(runs[1], 1);
    }

    #[test]
    fn folder_roundtrip_and_missing_split() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = generate_dataset(10, 32, 32, 8).unwrap();
        export_sprites(&dataset, dir.path(), 0.8).unwrap();
        let splits = load_folder(dir.path(), 32, 32).unwrap();
        assert_eq!(splits.train.len(), 8);
        assert_eq!(splits.test.len(), 2);
        assert_eq!(splits.train.skipped, 0);

        // a root with a populated train/ but no test/ names the missing split
        let no_test = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(no_test.path().join("train")).unwrap();
        save_image_png(&no_test.path().join("train/a.png"), dataset.image(0)).unwrap();
        let err = load_folder(no_test.path(), 32, 32).unwrap_err();
        assert!(err.to_string().contains("test"), "{err}");

        // an empty split is its own error
        let empty = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(empty.path().join("train")).unwrap();
        let err = load_folder(empty.path(), 32, 32).unwrap_err();
        assert!(err.to_string().contains("no readable images"), "{err}");
    }

    #[test]
    fn folder_resizes_to_requested_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = generate_dataset(4, 64, 32, 8).unwrap();
        export_sprites(&dataset, dir.path(), 0.5).unwrap();
        let splits = load_folder(dir.path(), 32, 32).unwrap();
        assert_eq!(splits.train.image(0).shape(), &[32, 32, 3]);
    }
}
