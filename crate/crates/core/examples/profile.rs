//! Scratch per-phase profiler (not shipped).
use mcgpfa::data::{generate_synthetic, GenerativeSpec, Likelihood};
use mcgpfa::infer::*;
use mcgpfa::state::*;
use std::time::Instant;

fn main() {
    let s = GenerativeSpec {
        conditions: 10, neurons: 20, time_bins: 100, latent_dims: 2, condition_dim: 1,
        time_lengthscales: vec![0.12, 0.25], condition_lengthscales: vec![0.4],
        dispersion_range: (0.0, 5.0), trials_per_condition: 30,
        bias_mean: -0.6, bias_scale: 0.6, weight_scale: 0.8, bin_width: 1.0,
        seed: 20240717, likelihood: Likelihood::NegBinomial, binomial_trials: 8,
    };
    let (data, _) = generate_synthetic(&s).unwrap();
    let config = ModelConfig { latents: 10, condition_lengthscales: vec![0.3], max_iters: 3, seed: 1, ..ModelConfig::default() };
    let t = Instant::now();
    let mut state = initialize_state(&data, &config).unwrap();
    println!("init: {:.3}s", t.elapsed().as_secs_f64());
    let stats = SuffStats::new(&data);
    let mut grams = build_grams(&data.condition_coords, state.n_bins(), &state.time_lengthscales, &state.condition_lengthscales, config.jitter).unwrap();
    for it in 0..3 {
        let t0 = Instant::now();
        let fm = state.f_moments();
        let t1 = Instant::now();
        update_aug_gamma(&mut state, &stats);
        update_aug_pig(&mut state);
        update_aug_pg(&mut state, &stats, &fm);
        let t2 = Instant::now();
        update_q_w(&mut state, &grams).unwrap();
        let t3 = Instant::now();
        update_q_x(&mut state, &grams).unwrap();
        let t4 = Instant::now();
        update_q_beta(&mut state);
        update_q_tau_beta(&mut state, &config);
        let t5 = Instant::now();
        let fm2 = state.f_moments();
        update_q_r(&mut state, &stats, &fm2).unwrap();
        let t6 = Instant::now();
        update_q_ard(&mut state, &grams, &config);
        let t7 = Instant::now();
        grams = m_step(&mut state, &grams, &config, &data.condition_coords).unwrap();
        let t8 = Instant::now();
        let v = monitor(&state, &data).unwrap();
        let t9 = Instant::now();
        println!("iter {it}: fm={:.3} aug={:.3} w={:.3} x={:.3} beta={:.3} r={:.3} ard={:.3} mstep={:.3} mon={:.3} | monitor={v:.4}",
            (t1-t0).as_secs_f64(), (t2-t1).as_secs_f64(), (t3-t2).as_secs_f64(), (t4-t3).as_secs_f64(),
            (t5-t4).as_secs_f64(), (t6-t5).as_secs_f64(), (t7-t6).as_secs_f64(), (t8-t7).as_secs_f64(), (t9-t8).as_secs_f64());
    }
}
