use hmt_core::estimation::{align_to, fit_mle, FitOptions, Init};
use hmt_core::experiments::ExperimentConfig;
use hmt_core::model::Packing;
use hmt_core::simulate::{sample, RootLaw};
use rayon::prelude::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let bound: f64 = args[1].parse().unwrap();
    let reps: u64 = args[2].parse().unwrap();
    let cfg = ExperimentConfig::reference();
    let packing = Packing::new(cfg.model.clone());
    let star = packing.pack(&cfg.theta).unwrap().values;
    for (li, law) in [RootLaw::Stationary, RootLaw::Custom(vec![1.0, 0.0])].iter().enumerate() {
        let mut rmses = Vec::new();
        for depth in [4usize, 6, 8, 10] {
            let errs: Vec<f64> = (0..reps)
                .into_par_iter()
                .map(|rep| {
                    let s = sample(&cfg.model, &cfg.theta, depth, law, 5_000_000 + rep).unwrap();
                    let opts = FitOptions { max_iter: 300, tol: 1e-7, polish_iters: 30, packed_box: Some(bound), multi_start: 2, ..FitOptions::default() };
                    let fit = fit_mle(&s, 0, &cfg.model, Init::Random(rep ^ 0x5a5a), &opts).unwrap();
                    let (aligned, _, _) = align_to(&fit.theta_hat, &cfg.theta);
                    let packed = packing.pack(&aligned).unwrap().values;
                    packed.iter().zip(star.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
                })
                .collect();
            let rmse = (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt();
            rmses.push(rmse);
        }
        let ratios: Vec<String> = rmses.windows(2).map(|w| format!("{:.4}", w[1] / w[0])).collect();
        println!("variant={li} box={bound}: rmses={:?} true_ratios={ratios:?}",
            rmses.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>());
    }
}
