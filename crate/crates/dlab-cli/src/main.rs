//! Command-line entry point: training, reconstruction, appearance/shape
//! transfer, mask visualization, evaluation, and sprite dataset export.
//!
//! Exit codes: 0 success, 2 usage/config/data errors, 3 numeric aborts.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dlab::config::{apply_overrides, load_config, ModelConfig, TrainConfig};
use dlab::data::{
    generate_dataset, load_folder, load_image, save_image_png, Dataset, SpriteDataset,
};
use dlab::error::Error;
use dlab::metrics::{
    classifier_balance, mask_iou_report, reconstruction_ssim_report, transfer_color_report,
    Assignment, MetricReport,
};
use dlab::networks::{decode, encode_shape, resize_broadcast, NetworkParams};
use dlab::perceptual::fixed_random_extractor;
use dlab::trainer::{load_checkpoint, train, TrainOptions, TrainState};
use dlab::types::{AppearanceFeatureSet, ImageBatch};

#[derive(Parser)]
#[command(name = "dlab", version, about = "Unsupervised appearance/shape disentanglement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on synthetic sprites or a folder dataset.
    Train {
        /// Config file (flat `key = value` lines).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for checkpoints and the metrics log.
        #[arg(long)]
        out: PathBuf,
        /// Generate a synthetic sprite dataset with this many images.
        #[arg(long, value_name = "N")]
        synthetic: Option<usize>,
        /// Folder dataset root containing train/ and test/.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Config overrides applied after the file, repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from a checkpoint (configs come from the checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Reconstruct one image through the full encode/decode path.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image.
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode the appearance of one image under the shape of another.
    Transfer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Appearance source image.
        appearance: PathBuf,
        /// Shape source image.
        shape: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the learned masks and the zero-appearance decode of an image.
    VisualizeMasks {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image.
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint: reconstruction SSIM, color-transfer error,
    /// classifier balance, and (synthetic data only) mask IoU.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate on freshly generated sprites.
        #[arg(long, value_name = "N")]
        synthetic: Option<usize>,
        /// Evaluate on the test/ split of a folder dataset.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Pairs sampled for the classifier-balance and color-transfer probes.
        #[arg(long, default_value_t = 100)]
        n_pairs: usize,
        /// Seed for evaluation sampling (and synthetic generation).
        #[arg(long, default_value_t = 1000)]
        seed: u64,
    },
    /// Export a synthetic sprite dataset as PNGs with JSON sidecars.
    MakeSprites {
        #[arg(long)]
        out: PathBuf,
        /// Number of sprites.
        #[arg(long, value_name = "N")]
        synthetic: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional config supplying the image resolution (default 64x64).
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn parse_overrides(set: &[String]) -> Result<Vec<(String, String)>, Error> {
    set.iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))
        })
        .collect()
}

/// Derives the perceptual-extractor seed from the training seed so the two
/// random streams stay distinct.
fn extractor_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config: Option<PathBuf>,
    out: PathBuf,
    synthetic: Option<usize>,
    data: Option<PathBuf>,
    set: Vec<String>,
    seed: Option<u64>,
    checkpoint: Option<PathBuf>,
) -> Result<(), Error> {
    let overrides = parse_overrides(&set)?;
    let (mut model_cfg, mut train_cfg, resume, extractor) = match &checkpoint {
        Some(path) => {
            let loaded = load_checkpoint(path, false)?;
            (loaded.model_cfg, loaded.train_cfg, Some(loaded.state), Some(loaded.extractor))
        }
        None => {
            let path = config
                .as_ref()
                .ok_or_else(|| Error::Config("train needs --config (or --checkpoint)".into()))?;
            let (m, t) = load_config(path)?;
            (m, t, None, None)
        }
    };
    apply_overrides(&mut model_cfg, &mut train_cfg, &overrides)?;
    if let Some(seed) = seed {
        train_cfg.seed = seed;
    }
    let extractor =
        extractor.unwrap_or_else(|| fixed_random_extractor(extractor_seed(train_cfg.seed), 3));

    std::fs::create_dir_all(&out)?;
    let opts = TrainOptions {
        checkpoint_dir: Some(out.clone()),
        metrics_path: Some(out.join("metrics.jsonl")),
        log_every: 50,
    };

    let (state, _log): (TrainState, _) = match (synthetic, data) {
        (Some(n), None) => {
            let dataset =
                generate_dataset(n, model_cfg.image_height, model_cfg.image_width, train_cfg.seed)?;
            train(&model_cfg, &train_cfg, &dataset, &extractor, resume, Some(&dataset), &opts)?
        }
        (None, Some(root)) => {
            let splits = load_folder(&root, model_cfg.image_height, model_cfg.image_width)?;
            train(&model_cfg, &train_cfg, &splits.train, &extractor, resume, None, &opts)?
        }
        _ => {
            return Err(Error::Config(
                "train needs exactly one of --synthetic N or --data DIR".into(),
            ))
        }
    };
    log::info!("finished at iter {}; final checkpoint in {}", state.iter, out.display());
    Ok(())
}

fn load_params(path: &Path) -> Result<(NetworkParams<f32>, ModelConfig, TrainConfig), Error> {
    let loaded = load_checkpoint(path, false)?;
    Ok((loaded.state.params, loaded.model_cfg, loaded.train_cfg))
}

fn single_batch(path: &Path, cfg: &ModelConfig) -> Result<ImageBatch, Error> {
    let img = load_image(path, cfg.image_height, cfg.image_width)?;
    ImageBatch::from_images(&[img])
}

fn first_image(batch: &ImageBatch) -> Array3<f32> {
    batch.0.index_axis(ndarray::Axis(0), 0).to_owned()
}

/// Horizontal strip of equally-sized panels with 2-pixel white separators.
fn panel_grid(panels: &[Array3<f32>]) -> Array3<f32> {
    let (h, w) = (panels[0].shape()[0], panels[0].shape()[1]);
    let sep = 2;
    let total_w = panels.len() * w + (panels.len() - 1) * sep;
    let mut out = Array3::<f32>::from_elem((h, total_w, 3), 1.0);
    for (i, panel) in panels.iter().enumerate() {
        let x0 = i * (w + sep);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[[y, x0 + x, c]] = panel[[y, x, c]];
                }
            }
        }
    }
    out
}

fn cmd_reconstruct(checkpoint: PathBuf, image: PathBuf, out: PathBuf) -> Result<(), Error> {
    let (params, model_cfg, _) = load_params(&checkpoint)?;
    let batch = single_batch(&image, &model_cfg)?;
    let recon = dlab::networks::reconstruct(&batch, &params)?;
    std::fs::create_dir_all(&out)?;
    save_image_png(&out.join("recon.png"), &first_image(&recon))?;
    let grid = panel_grid(&[first_image(&batch), first_image(&recon)]);
    save_image_png(&out.join("grid.png"), &grid)?;
    Ok(())
}

fn cmd_transfer(
    checkpoint: PathBuf,
    appearance: PathBuf,
    shape: PathBuf,
    out: PathBuf,
) -> Result<(), Error> {
    let (params, model_cfg, _) = load_params(&checkpoint)?;
    let app_batch = single_batch(&appearance, &model_cfg)?;
    let shape_batch = single_batch(&shape, &model_cfg)?;
    let mix = dlab::networks::transfer(&app_batch, &shape_batch, &params)?;
    std::fs::create_dir_all(&out)?;
    save_image_png(&out.join("mix.png"), &first_image(&mix))?;
    let grid =
        panel_grid(&[first_image(&app_batch), first_image(&shape_batch), first_image(&mix)]);
    save_image_png(&out.join("grid.png"), &grid)?;
    Ok(())
}

/// Square-ish tile grid of masks, mapped [0, 1] -> [0, 255] exactly.
fn mask_grid(masks: &ndarray::Array4<f32>) -> Array3<f32> {
    let (m, h, w) = (masks.shape()[1], masks.shape()[2], masks.shape()[3]);
    let cols = (m as f64).sqrt().ceil() as usize;
    let rows = m.div_ceil(cols);
    let sep = 2;
    let (gh, gw) = (rows * h + (rows - 1) * sep, cols * w + (cols - 1) * sep);
    let mut out = Array3::<f32>::from_elem((gh, gw, 3), 1.0);
    for i in 0..m {
        let (r, c) = (i / cols, i % cols);
        let (y0, x0) = (r * (h + sep), c * (w + sep));
        for y in 0..h {
            for x in 0..w {
                // save_image_png maps [-1,1] to [0,255]; pre-map [0,1] masks
                let v = masks[[0, i, y, x]] * 2.0 - 1.0;
                for ch in 0..3 {
                    out[[y0 + y, x0 + x, ch]] = v;
                }
            }
        }
    }
    out
}

fn cmd_visualize_masks(checkpoint: PathBuf, image: PathBuf, out: PathBuf) -> Result<(), Error> {
    let (params, model_cfg, _) = load_params(&checkpoint)?;
    let batch = single_batch(&image, &model_cfg)?;
    let masks = encode_shape(&batch, &params)?;
    let up = resize_broadcast(&masks, model_cfg.image_height, model_cfg.image_width)?;
    std::fs::create_dir_all(&out)?;
    save_image_png(&out.join("masks.png"), &mask_grid(&up))?;
    let zeros = AppearanceFeatureSet::zeros(1, model_cfg.num_masks, model_cfg.appearance_dim);
    let silhouette = decode(&masks, &zeros, &params)?;
    save_image_png(&out.join("zero_appearance.png"), &first_image(&silhouette))?;
    Ok(())
}

enum EvalData {
    Synthetic(SpriteDataset),
    Folder(dlab::data::FolderDataset),
}

fn cmd_eval(
    checkpoint: PathBuf,
    synthetic: Option<usize>,
    data: Option<PathBuf>,
    out: PathBuf,
    n_pairs: usize,
    seed: u64,
) -> Result<(), Error> {
    let (params, model_cfg, _) = load_params(&checkpoint)?;
    let eval_data = match (synthetic, data) {
        (Some(n), None) => EvalData::Synthetic(generate_dataset(
            n,
            model_cfg.image_height,
            model_cfg.image_width,
            seed,
        )?),
        (None, Some(root)) => {
            let splits = load_folder(&root, model_cfg.image_height, model_cfg.image_width)?;
            EvalData::Folder(splits.test)
        }
        _ => {
            return Err(Error::Config(
                "eval needs exactly one of --synthetic N or --data DIR".into(),
            ))
        }
    };
    let dataset: &dyn Dataset = match &eval_data {
        EvalData::Synthetic(d) => d,
        EvalData::Folder(d) => d,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    reports.push(reconstruction_ssim_report(&params, dataset, dataset.len())?);
    reports.push(transfer_color_report(
        &params,
        dataset,
        n_pairs,
        &mut rng,
        model_cfg.color_stat_normalizer,
    )?);
    reports.push(classifier_balance(&params, dataset, n_pairs, &mut rng)?);
    let mut note = None;
    match &eval_data {
        EvalData::Synthetic(d) => {
            reports.push(mask_iou_report(&params, d, d.len().min(100), Assignment::Greedy)?);
        }
        EvalData::Folder(_) => {
            note = Some("mask_iou skipped: folder datasets carry no ground-truth part masks");
        }
    }

    std::fs::create_dir_all(&out)?;
    let json = serde_json::json!({
        "reports": reports,
        "note": note,
    });
    std::fs::write(out.join("reports.json"), serde_json::to_string_pretty(&json).unwrap())?;
    let mut csv = String::from(MetricReport::CSV_HEADER);
    csv.push('\n');
    for r in &reports {
        csv.push_str(&r.to_csv_row());
        csv.push('\n');
    }
    std::fs::write(out.join("reports.csv"), csv)?;
    for r in &reports {
        println!("{}", r.to_json());
    }
    if let Some(note) = note {
        println!("{{\"note\":\"{note}\"}}");
    }
    Ok(())
}

fn cmd_make_sprites(
    out: PathBuf,
    n: usize,
    seed: u64,
    config: Option<PathBuf>,
) -> Result<(), Error> {
    let (model_cfg, _) = match config {
        Some(path) => load_config(&path)?,
        None => (ModelConfig::default(), TrainConfig::default()),
    };
    let dataset = generate_dataset(n, model_cfg.image_height, model_cfg.image_width, seed)?;
    dlab::data::export_sprites(&dataset, &out, 0.9)?;
    log::info!("exported {n} sprites to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train { config, out, synthetic, data, set, seed, checkpoint } => {
            cmd_train(config, out, synthetic, data, set, seed, checkpoint)
        }
        Command::Reconstruct { checkpoint, image, out } => cmd_reconstruct(checkpoint, image, out),
        Command::Transfer { checkpoint, appearance, shape, out } => {
            cmd_transfer(checkpoint, appearance, shape, out)
        }
        Command::VisualizeMasks { checkpoint, image, out } => {
            cmd_visualize_masks(checkpoint, image, out)
        }
        Command::Eval { checkpoint, synthetic, data, out, n_pairs, seed } => {
            cmd_eval(checkpoint, synthetic, data, out, n_pairs, seed)
        }
        Command::MakeSprites { out, synthetic, seed, config } => {
            cmd_make_sprites(out, synthetic, seed, config)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numeric(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
