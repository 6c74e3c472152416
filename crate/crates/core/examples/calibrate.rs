//! Scratch calibration runner (not shipped).
use mcgpfa::data::{generate_synthetic, GenerativeSpec, Likelihood};
use mcgpfa::infer::fit;
use mcgpfa::metrics::{loglik_truth, rate_mae, split_trials};
use mcgpfa::state::ModelConfig;

fn spec(ws: f64, bm: f64, bs: f64) -> GenerativeSpec {
    GenerativeSpec {
        conditions: 10,
        neurons: 20,
        time_bins: 100,
        latent_dims: 2,
        condition_dim: 1,
        time_lengthscales: vec![0.12, 0.25],
        condition_lengthscales: vec![0.4],
        dispersion_range: (0.0, 5.0),
        trials_per_condition: 50,
        bias_mean: bm,
        bias_scale: bs,
        weight_scale: ws,
        bin_width: 1.0,
        seed: 20240717,
        likelihood: Likelihood::NegBinomial,
        binomial_trials: 8,
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let (ws, bm, bs, iters) = (
        args[1].parse::<f64>().unwrap(),
        args[2].parse::<f64>().unwrap(),
        args[3].parse::<f64>().unwrap(),
        args.get(4).map(|s| s.parse::<usize>().unwrap()).unwrap_or(300),
    );
    let s = spec(ws, bm, bs);
    let (data, truth) = generate_synthetic(&s).unwrap();
    let (train, test) = split_trials(&data, 30, 123).unwrap();
    let test = test.unwrap();
    let ll_train_true = loglik_truth(&truth, &train).unwrap();
    let ll_test_true = loglik_truth(&truth, &test).unwrap();
    println!("true: train={ll_train_true:+.4} test={ll_test_true:+.4}");

    let config = ModelConfig {
        latents: 10,
        condition_lengthscales: vec![0.3],
        max_iters: iters,
        seed: 1,
        ..ModelConfig::default()
    };
    let t0 = std::time::Instant::now();
    let (state, report) = fit(&train, &config).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let ll_train_fit = report.monitor.last().unwrap();
    let ll_test_fit = mcgpfa::metrics::loglik_per_bin(&state, &test).unwrap();
    let mae = rate_mae(&state, &truth).unwrap();
    println!(
        "fit:  train={ll_train_fit:+.4} test={ll_test_fit:+.4} gap={:+.4} mae={mae:.4} retained={:?} iters={} secs={secs:.1}",
        ll_test_fit - ll_test_true,
        report.retained_dims,
        report.iterations_run
    );
    println!(
        "hyper: theta={:?} ell={:?}",
        report.final_time_lengthscales, report.final_condition_lengthscales
    );
    let energies = mcgpfa::infer::loading_energies(&state);
    println!("energies: {:?}", energies.iter().map(|e| (e * 1000.0).round() / 1000.0).collect::<Vec<_>>());
    // dispersion recovery
    let r_fit = &state.disp_mean;
    let r_true = &truth.dispersions;
    let mean_f: f64 = r_fit.iter().sum::<f64>() / r_fit.len() as f64;
    let mean_t: f64 = r_true.iter().sum::<f64>() / r_true.len() as f64;
    let cov: f64 = r_fit.iter().zip(r_true.iter()).map(|(a, b)| (a - mean_f) * (b - mean_t)).sum();
    let va: f64 = r_fit.iter().map(|a| (a - mean_f) * (a - mean_f)).sum();
    let vb: f64 = r_true.iter().map(|b| (b - mean_t) * (b - mean_t)).sum();
    println!("disp pearson={:.3}", cov / (va.sqrt() * vb.sqrt()));
}
