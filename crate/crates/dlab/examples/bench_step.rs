use std::time::Instant;

fn main() {
    let (model_cfg, train_cfg) = dlab::config::desk_config();
    let dataset = dlab::data::generate_dataset(50, 64, 64, 0).unwrap();
    let extractor = dlab::perceptual::fixed_random_extractor::<f32>(1, 3);
    let mut state = dlab::trainer::init_state(
        &model_cfg,
        &dlab::config::TrainConfig {
            init_mode: dlab::config::InitMode::Random,
            ..train_cfg.clone()
        },
        None,
    )
    .unwrap();
    let mut rng = state.rng.clone();
    // warmup
    let batch = dlab::data::sample_pair_batch(&dataset, train_cfg.batch_size, &mut rng).unwrap();
    dlab::trainer::train_step(&mut state, &batch, &model_cfg, &train_cfg, &extractor).unwrap();
    let n = 10;
    let t0 = Instant::now();
    for _ in 0..n {
        let batch =
            dlab::data::sample_pair_batch(&dataset, train_cfg.batch_size, &mut rng).unwrap();
        dlab::trainer::train_step(&mut state, &batch, &model_cfg, &train_cfg, &extractor).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64() / n as f64;
    println!("desk step: {:.3} s  ->  5000 iters ~ {:.1} min", dt, dt * 5000.0 / 60.0);
}
