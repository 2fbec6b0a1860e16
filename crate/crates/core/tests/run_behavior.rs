//! Cross-variant behavior of the optimizer runs.

use std::sync::Arc;

use vrcg::data::synth_ridge;
use vrcg::model::RidgeObjective;
use vrcg::optimize::{run_alg1, run_alg2, Algorithm, GammaMode, RunConfig};
use vrcg::search::WolfeParams;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

/// Weak monotone-progress property: over 10 seeds, the median loss at
/// iteration 100 is below the median loss at iteration 10 for all four
/// variants.
#[test]
fn median_loss_decreases_for_all_four_variants() {
    let (ds, _) = synth_ridge::<f64>(400, 8, 0.2, 55).unwrap();
    let obj = RidgeObjective::new(Arc::new(ds), 0.05);

    let mut base1 = RunConfig::alg1(100);
    base1.batch_size = 32;
    base1.lambda = 0.05;
    base1.eval_every = 10;
    let mut base2 = RunConfig::alg2(10, 10);
    base2.batch_size = 32;
    base2.lambda = 0.05;
    base2.eval_every = 10;

    for (label, algorithm, gamma_mode) in [
        ("alg1/star", Algorithm::Alg1, GammaMode::Star),
        ("alg1/one", Algorithm::Alg1, GammaMode::One),
        ("alg2/star", Algorithm::Alg2, GammaMode::Star),
        ("alg2/one", Algorithm::Alg2, GammaMode::One),
    ] {
        let mut at_10 = Vec::new();
        let mut at_100 = Vec::new();
        for seed in 0..10u64 {
            let mut cfg = match algorithm {
                Algorithm::Alg1 => base1.clone(),
                Algorithm::Alg2 => base2.clone(),
            };
            cfg.gamma_mode = gamma_mode;
            cfg.seed = seed;
            let run = match algorithm {
                Algorithm::Alg1 => run_alg1(&obj, &cfg).unwrap(),
                Algorithm::Alg2 => run_alg2(&obj, &cfg).unwrap(),
            };
            at_10.push(run.trace.loss_at(10).unwrap());
            at_100.push(run.trace.loss_at(100).unwrap());
        }
        let m10 = median(at_10);
        let m100 = median(at_100);
        assert!(
            m100 < m10,
            "{label}: median loss at 100 ({m100}) not below median at 10 ({m10})"
        );
    }
}

/// The whole pipeline is generic over the scalar; a single-precision run
/// must build and make progress.
#[test]
fn single_precision_run_makes_progress() {
    let (ds, _) = synth_ridge::<f32>(120, 6, 0.1, 9).unwrap();
    let obj = RidgeObjective::new(Arc::new(ds), 0.05f32);
    let mut cfg: RunConfig<f32> = RunConfig::alg1(30);
    cfg.batch_size = 16;
    cfg.lambda = 0.05;
    cfg.wolfe = WolfeParams::<f32>::default().with_alpha_max(100.0);
    let run = run_alg1(&obj, &cfg).unwrap();
    let first = run.trace.records[0].loss;
    let last = run.trace.last().unwrap().loss;
    assert!(last < 0.5 * first, "f32 run went {first} -> {last}");
}
