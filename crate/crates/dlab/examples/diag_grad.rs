use dlab::autodiff::{bind_params, collect_grads, Tape};
use dlab::config::{AdvLossMode, ModelConfig};
use dlab::networks::*;
use dlab::perceptual::fixed_random_extractor;
use dlab::trainer::{classifier_loss, encoders_forward, generator_losses};
use ndarray::{ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn main() {
    let cfg = ModelConfig {
        image_height: 8, image_width: 8, num_masks: 2, appearance_dim: 4,
        downsample_factor: 4, decoder_fuse_channels: 8, ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let xa0 = ArrayD::from_shape_simple_fn(IxDyn(&[2, 3, 8, 8]), || rng.random_range(-1.0..1.0f64));
    let xb0 = ArrayD::from_shape_simple_fn(IxDyn(&[2, 3, 8, 8]), || rng.random_range(-1.0..1.0f64));
    let extractor = fixed_random_extractor::<f64>(3, 1);
    let params = init_random_params::<f64>(&cfg, 11);

    for (label, mode, which) in [
        ("recon", AdvLossMode::CorrectedEq3, 0usize),
        ("adv_e_corr", AdvLossMode::CorrectedEq3, 1),
        ("adv_e_lit", AdvLossMode::LiteralEq3, 1),
        ("color", AdvLossMode::CorrectedEq3, 2),
        ("adv_c", AdvLossMode::CorrectedEq3, 3),
    ] {
        let cfg = ModelConfig { adv_loss_mode: mode, ..cfg.clone() };
        let mut tape = Tape::<f64>::new();
        let xa = tape.constant(xa0.clone());
        let xb = tape.constant(xb0.clone());
        let bs = bind_params(&mut tape, &params.shape_encoder, true);
        let ba = bind_params(&mut tape, &params.appearance_encoder, true);
        let bd = bind_params(&mut tape, &params.decoder, true);
        let bc = bind_params(&mut tape, &params.classifier, true);
        let bp = bind_params(&mut tape, &extractor.params, false);
        let fw = encoders_forward(&mut tape, xa, xb, &bs, &ba, &cfg);
        let loss = if which == 3 {
            let zs_a = tape.detach(fw.zs_a);
            let za_a = tape.detach(fw.za_a);
            let za_b = tape.detach(fw.za_b);
            classifier_loss(&mut tape, zs_a, za_a, za_b, &bc, &cfg)
        } else {
            let l = generator_losses(&mut tape, xa, &fw, &bd, &bc, &bp, &cfg, &extractor.layer_weights, 1);
            [l.recon, l.adv_e, l.color][which]
        };
        tape.backward(loss);
        for (net, set, bound) in [
            ("shape", &params.shape_encoder, &bs),
            ("app", &params.appearance_encoder, &ba),
            ("dec", &params.decoder, &bd),
            ("cls", &params.classifier, &bc),
        ] {
            let g = collect_grads(&tape, set, bound).unwrap();
            let total: usize = g.iter().map(|(_, a)| a.len()).sum();
            let above: usize = g.iter().flat_map(|(_, a)| a.iter()).filter(|v| v.abs() > 1e-6).count();
            println!("{label:11} {net:5}: {above:6} / {total:6} above 1e-6");
        }
    }
}
