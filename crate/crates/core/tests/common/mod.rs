//! Helpers shared by the numerics and acceptance tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use offcem::harness::{run_sweep, write_csv, ExperimentConfig, ModelSource, SweepAxis};
use offcem::regression::mlp::{batch_loss_and_gradient, Gradient, Input, Mlp, Scratch};
use offcem::synthetic::EnvironmentSpec;
use offcem::estimators::EstimatorKind;

const DENSE: usize = 4;
const SPARSE: usize = 7;

struct Example {
    dense: Vec<f64>,
    hot: [usize; 2],
    target: f64,
}

fn examples(rng: &mut ChaCha8Rng, n: usize) -> Vec<Example> {
    (0..n)
        .map(|_| Example {
            dense: (0..DENSE).map(|_| rng.random_range(-1.5..1.5)).collect(),
            hot: [rng.random_range(0..4), 4 + rng.random_range(0..3)],
            target: rng.random_range(-2.0..2.0),
        })
        .collect()
}

fn scratch(net: &Mlp) -> Scratch {
    Scratch {
        first: net.trace(),
        second: net.trace(),
    }
}

/// Squared loss on single examples, or on within-pair differences when
/// `pairwise` is set (examples 2k and 2k+1 form a pair).
fn objective(net: &Mlp, data: &[Example], pairwise: bool, weight_decay: f64, grad: &mut Gradient) -> f64 {
    let mut s = scratch(net);
    let idx: Vec<usize> = if pairwise { (0..data.len() / 2).collect() } else { (0..data.len()).collect() };
    let mut cb = |net: &Mlp, i: usize, s: &mut Scratch, g: &mut Gradient, scale: f64| {
        if pairwise {
            let (a, b) = (&data[2 * i], &data[2 * i + 1]);
            let ia = Input { dense: &a.dense, hot: &a.hot };
            let ib = Input { dense: &b.dense, hot: &b.hot };
            let fa = net.forward(ia, &mut s.first);
            let fb = net.forward(ib, &mut s.second);
            let err = (fa - fb) - (a.target - b.target);
            net.backward(ia, &mut s.first, 2.0 * err * scale, g);
            net.backward(ib, &mut s.second, -2.0 * err * scale, g);
            err * err
        } else {
            let e = &data[i];
            let input = Input { dense: &e.dense, hot: &e.hot };
            let err = net.forward(input, &mut s.first) - e.target;
            net.backward(input, &mut s.first, 2.0 * err * scale, g);
            err * err
        }
    };
    batch_loss_and_gradient(net, &idx, weight_decay, &mut s, grad, &mut cb)
}

/// Largest relative error between the analytic gradient and central finite
/// differences with step `h`, over every parameter.
pub fn gradient_check(seed: u64, hidden: &[usize], pairwise: bool, h: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Mlp::new(DENSE, SPARSE, 2, hidden, &mut rng);
    let data = examples(&mut rng, 12);
    let wd = 0.01;
    let mut grad = net.zero_gradient();
    objective(&net, &data, pairwise, wd, &mut grad);
    let analytic = grad.flatten();
    let params = net.params();
    let mut probe = net.clone();
    let mut scratch_grad = net.zero_gradient();
    let mut worst: f64 = 0.0;
    for (k, &g) in analytic.iter().enumerate() {
        let mut p = params.clone();
        p[k] += h;
        probe.set_params(&p);
        let up = objective(&probe, &data, pairwise, wd, &mut scratch_grad);
        p[k] -= 2.0 * h;
        probe.set_params(&p);
        let down = objective(&probe, &data, pairwise, wd, &mut scratch_grad);
        let numeric = (up - down) / (2.0 * h);
        let denom = (g.abs() + numeric.abs()).max(1e-8);
        worst = worst.max((g - numeric).abs() / denom);
    }
    worst
}

/// A small fitted-model sweep used for reproducibility checks.
pub fn small_sweep(replications: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        environment: EnvironmentSpec {
            num_contexts: 10,
            context_dim: 4,
            num_actions: 30,
            num_clusters: 5,
            ..Default::default()
        },
        sample_size: 300,
        sweep_axis: SweepAxis::N,
        sweep_values: vec![150.0, 300.0],
        estimators: EstimatorKind::ALL.to_vec(),
        replications,
        model_source: ModelSource::Fitted,
        master_seed: 99,
        ..Default::default()
    };
    cfg.learner.hidden = vec![16, 16];
    cfg.learner.epochs = 5;
    cfg
}

/// Every estimate of a sweep run on a pool with `threads` workers.
pub fn estimates_with_threads(cfg: &ExperimentConfig, threads: usize) -> Vec<f64> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    let report = pool.install(|| run_sweep(cfg)).unwrap();
    report.rows.iter().flat_map(|r| r.estimates.clone()).collect()
}

pub fn csv_bytes(cfg: &ExperimentConfig, threads: usize) -> Vec<u8> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    let report = pool.install(|| run_sweep(cfg)).unwrap();
    let mut out = Vec::new();
    write_csv(&report, &mut out).unwrap();
    out
}

/// Largest absolute difference between two estimate lists (NaN-aware).
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| if x.is_nan() && y.is_nan() { 0.0 } else { (x - y).abs() })
        .fold(0.0, f64::max)
}
