//! Acceptance suite: one line per criterion, then a single verdict.
//!
//! Run with `cargo test -p offcem-core --test acceptance -- --nocapture` to
//! see the report.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use offcem::estimators::{estimate, EstimatorKind, EstimatorSpec};
use offcem::harness::{run_sweep, ExperimentConfig, ExperimentReport, SweepAxis};
use offcem::oracle::{
    bias_closed_form, exact_mean, exact_variance, mips_variance_reduction, variance_closed_form_dr,
    variance_closed_form_offcem, RandomInstanceOptions, TinyInstance,
};
use offcem::regression::{LearnerConfig, ModelFamily};
use offcem::synthetic::{epsilon_target, make_environment, sample_logged_data, softmax_logging, EnvironmentSpec};
use offcem::{is_locally_correct, ActionCatalog, Clustering, Matrix, RewardModel, TabularModel};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// ── 1: closed forms against enumeration ─────────────────────────────────

const ORACLE_TOL: f64 = 1e-10;

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut note = |name: &str, seed: u64, a: f64, b: f64| -> Result<(), String> {
        let err = (a - b).abs();
        worst = worst.max(err);
        check(err <= ORACLE_TOL, format!("instance {seed}: {name} {a} vs {b}"))
    };
    for seed in 0..200u64 {
        let unsupported = seed % 2 == 1;
        let opts = RandomInstanceOptions {
            unsupported_actions: unsupported,
            ..Default::default()
        };
        let base = TinyInstance::random(seed, &opts).map_err(|e| e.to_string())?;
        let v = base.value().unwrap();
        let n = 1 + (seed as usize % 20);

        let mean = exact_mean(&base, &base.spec(EstimatorKind::Offcem)).unwrap();
        note("bias", seed, bias_closed_form(&base).unwrap(), mean - v)?;

        let lc = base.with_model(base.locally_correct_model(seed + 1000)).unwrap();
        check(lc.model_is_locally_correct(), format!("instance {seed}: constructed model not locally correct"))?;
        note("unbiasedness", seed, exact_mean(&lc, &lc.spec(EstimatorKind::Offcem)).unwrap(), v)?;
        let enumerated = exact_variance(&lc, &lc.spec(EstimatorKind::Offcem), n).unwrap();
        note("offcem variance", seed, variance_closed_form_offcem(&lc, n).unwrap(), enumerated)?;

        // IPS/DR/MIPS identities assume full support.
        if !unsupported {
            let dr = exact_variance(&base, &base.spec(EstimatorKind::Dr), n).unwrap();
            note("dr variance", seed, variance_closed_form_dr(&base, n).unwrap(), dr)?;
            let ips = exact_variance(&base, &base.spec(EstimatorKind::Ips), n).unwrap();
            let mips = exact_variance(&base, &base.spec(EstimatorKind::Mips), n).unwrap();
            let reduction = mips_variance_reduction(&base, n).unwrap();
            check(reduction >= 0.0, format!("instance {seed}: negative MIPS reduction {reduction}"))?;
            note("mips reduction", seed, reduction, ips - mips)?;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 30.0, format!("took {secs:.1} s"))?;
    Ok(format!("200 instances, max abs error {worst:.1e}, {secs:.2} s"))
}

// ── 2: four-action golden values ────────────────────────────────────────

fn criterion_2() -> Outcome {
    let models = [
        [3.0, 0.0, 1.0, 0.0],
        [50.0, 47.0, -30.0, -31.0],
        [4.0, 1.0, 3.0, 2.0],
    ];
    let inst = TinyInstance::four_action_example(&models[0]).map_err(|e| e.to_string())?;
    let q = |a: usize| inst.rewards.expected(0, a);
    let deltas = (q(0) - q(1), q(2) - q(3));
    check(deltas == (3.0, 1.0), format!("Δq = {deltas:?}"))?;
    for (i, m) in models.iter().enumerate() {
        let inst = TinyInstance::four_action_example(m).unwrap();
        check(inst.model_is_locally_correct(), format!("f̂{} rejected", i + 1))?;
        let mean = exact_mean(&inst, &inst.spec(EstimatorKind::Offcem)).unwrap();
        check(mean == 4.0, format!("f̂{}: E[OffCEM] = {mean}", i + 1))?;
    }
    for k in 0..4 {
        let mut bumped = models[0];
        bumped[k] += 1.0;
        let model = TabularModel::from_rows(vec![bumped.to_vec()]).unwrap();
        check(
            !is_locally_correct(&inst.rewards, &model, &inst.catalog, 0.0),
            format!("f̂1 with entry {k} + 1 accepted"),
        )?;
    }
    Ok("Δq = (3, 1); f̂1..f̂3 locally correct; every +1 perturbation of f̂1 rejected".into())
}

// ── 3: reduction lattice ────────────────────────────────────────────────

const LATTICE_TOL: f64 = 1e-12;

fn criterion_3() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = EnvironmentSpec {
            num_contexts: rng.random_range(2..8),
            context_dim: 3,
            num_actions: rng.random_range(4..40),
            num_clusters: rng.random_range(1..5),
            master_seed: seed,
            ..Default::default()
        };
        let env = make_environment(&spec).map_err(|e| e.to_string())?;
        let pi0 = softmax_logging(&env.rewards, rng.random_range(-1.0..1.0)).unwrap();
        let pi = epsilon_target(&env.rewards, rng.random_range(0.0..1.0)).unwrap();
        let data = sample_logged_data(&env, &pi0, rng.random_range(20..400), seed).unwrap();
        let (nx, na) = (env.contexts.len(), env.catalog.num_actions());
        let model: Arc<dyn RewardModel> =
            Arc::new(TabularModel::new(Matrix::from_fn(nx, na, |_, _| rng.random_range(-2.0..2.0))));
        let zero: Arc<dyn RewardModel> = Arc::new(TabularModel::constant(nx, na, 0.0));

        let run = |d: &offcem::LoggedDataset, spec: EstimatorSpec| estimate(d, &pi, Some(&pi0), &spec).unwrap();
        let plain = |kind| EstimatorSpec::new(kind);
        let with = |kind, m: &Arc<dyn RewardModel>| EstimatorSpec::new(kind).with_model(Arc::clone(m));

        let ids: Vec<usize> = (0..na).collect();
        let singletons = data
            .with_catalog(Arc::new(env.catalog.with_clusters(ids.clone()).unwrap()))
            .unwrap();
        let unique = data
            .with_catalog(Arc::new(env.catalog.with_embedding_ids(ids).unwrap()))
            .unwrap();
        let cluster_ids = match env.catalog.clustering() {
            Clustering::Shared(c) => c.clone(),
            Clustering::PerContext(_) => return Err("expected a shared clustering".into()),
        };
        let by_cluster = data
            .with_catalog(Arc::new(ActionCatalog::new(cluster_ids.clone(), Clustering::Shared(cluster_ids)).unwrap()))
            .unwrap();

        let ips = run(&data, plain(EstimatorKind::Ips));
        let plus_clustering = run(&data, plain(EstimatorKind::PlusClustering));
        let pairs = [
            ("DR(0) = IPS", run(&data, with(EstimatorKind::Dr, &zero)), ips),
            ("OffCEM(0) = +clustering", run(&data, with(EstimatorKind::Offcem, &zero)), plus_clustering),
            (
                "OffCEM(singletons) = DR",
                run(&singletons, with(EstimatorKind::Offcem, &model)),
                run(&data, with(EstimatorKind::Dr, &model)),
            ),
            ("MIPS(unique) = IPS", run(&unique, plain(EstimatorKind::Mips)), ips),
            ("MIPS(clusters) = +clustering", run(&by_cluster, plain(EstimatorKind::Mips)), plus_clustering),
        ];
        for (name, a, b) in pairs {
            let err = (a - b).abs();
            worst = worst.max(err);
            check(err <= LATTICE_TOL, format!("dataset {seed}: {name}: {a} vs {b}"))?;
        }
    }
    Ok(format!("50 datasets, 5 equalities, max abs error {worst:.1e}"))
}

// ── 4 to 6: sweeps ──────────────────────────────────────────────────────

/// The fitted-model sweeps use the linear learner so that all cells finish
/// within the runtime budget on a single core.
fn learner() -> LearnerConfig {
    LearnerConfig {
        family: ModelFamily::Linear,
        epochs: 20,
        ..Default::default()
    }
}

fn sweep_config(axis: SweepAxis, values: Vec<f64>, sample_size: usize, estimators: Vec<EstimatorKind>) -> ExperimentConfig {
    ExperimentConfig {
        environment: EnvironmentSpec {
            num_contexts: 50,
            context_dim: 10,
            num_actions: 200,
            num_clusters: 20,
            reward_noise: 3.0,
            master_seed: 12345,
            ..Default::default()
        },
        sample_size,
        beta: -0.1,
        epsilon: 0.2,
        sweep_axis: axis,
        sweep_values: values,
        estimators,
        learner: learner(),
        replications: 100,
        master_seed: 1,
        ..Default::default()
    }
}

struct Sweeps {
    by_n: ExperimentReport,
    large_actions: ExperimentReport,
    unsupported: ExperimentReport,
    secs: f64,
}

fn sweeps() -> &'static Sweeps {
    static CELLS: OnceLock<Sweeps> = OnceLock::new();
    CELLS.get_or_init(|| {
        use EstimatorKind::*;
        let start = Instant::now();
        let by_n = run_sweep(&sweep_config(
            SweepAxis::N,
            vec![500.0, 2000.0],
            2000,
            vec![Ips, Dr, Mips, Offcem, ClusteringOnestep, PlusClustering],
        ))
        .expect("n sweep");
        let large_actions = run_sweep(&sweep_config(SweepAxis::NumActions, vec![800.0], 2000, vec![Ips, Offcem]))
            .expect("action sweep");
        let unsupported = run_sweep(&sweep_config(SweepAxis::NumUnsupported, vec![100.0], 2000, vec![Ips, Mips, Offcem]))
            .expect("unsupported sweep");
        Sweeps {
            by_n,
            large_actions,
            unsupported,
            secs: start.elapsed().as_secs_f64(),
        }
    })
}

fn mse(report: &ExperimentReport, value: f64, kind: EstimatorKind) -> Result<f64, String> {
    let row = report.row(value, kind).ok_or_else(|| format!("no row for {kind} at {value}"))?;
    check(!row.failed(), format!("{kind} at {value} failed: {:?}", row.error))?;
    Ok(row.mse)
}

fn criterion_4() -> Outcome {
    let s = sweeps();
    let mut parts = Vec::new();
    let mut failures = Vec::new();
    for n in [500.0, 2000.0] {
        let offcem = mse(&s.by_n, n, EstimatorKind::Offcem)?;
        let best = [EstimatorKind::Ips, EstimatorKind::Dr, EstimatorKind::Mips]
            .into_iter()
            .map(|k| mse(&s.by_n, n, k))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        parts.push(format!("n={n}: OffCEM {offcem:.1} vs 0.8×{best:.1}"));
        if offcem >= 0.8 * best {
            failures.push(format!("n={n}"));
        }
    }
    let ratio_200 = mse(&s.by_n, 2000.0, EstimatorKind::Offcem)? / mse(&s.by_n, 2000.0, EstimatorKind::Ips)?;
    let ratio_800 =
        mse(&s.large_actions, 800.0, EstimatorKind::Offcem)? / mse(&s.large_actions, 800.0, EstimatorKind::Ips)?;
    parts.push(format!("OffCEM/IPS at |A|=200 {ratio_200:.3}, at |A|=800 {ratio_800:.3}"));
    if ratio_800 >= ratio_200 {
        failures.push("ratio".into());
    }
    parts.push(format!("{:.0} s for all sweeps", s.secs));
    if s.secs >= 900.0 {
        failures.push("runtime".into());
    }
    let summary = parts.join("; ");
    if failures.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{summary} (failed: {})", failures.join(", ")))
    }
}

fn criterion_5() -> Outcome {
    let s = sweeps();
    let row = |k| s.unsupported.row(100.0, k).ok_or_else(|| format!("no row for {k}"));
    let offcem = row(EstimatorKind::Offcem)?;
    let mut parts = vec![format!("|bias| OffCEM {:.3}±{:.3}", offcem.bias.abs(), offcem.bias_std_error)];
    let mut ok = true;
    for kind in [EstimatorKind::Ips, EstimatorKind::Mips] {
        let other = row(kind)?;
        let gap = other.bias.abs() - offcem.bias.abs();
        let se = offcem.bias_std_error.hypot(other.bias_std_error);
        parts.push(format!("{kind} {:.3}±{:.3} (gap {:.2} SE)", other.bias.abs(), other.bias_std_error, gap / se));
        ok &= gap >= 3.0 * se;
    }
    let summary = parts.join(", ");
    if ok {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn criterion_6() -> Outcome {
    let s = sweeps();
    let two = mse(&s.by_n, 2000.0, EstimatorKind::Offcem)?;
    let one = mse(&s.by_n, 2000.0, EstimatorKind::ClusteringOnestep)?;
    let plus = mse(&s.by_n, 2000.0, EstimatorKind::PlusClustering)?;
    let summary = format!("two-step {two:.1}, one-step {one:.1}, +clustering {plus:.1}");
    if two <= 1.05 * one && one <= 1.05 * plus {
        Ok(summary)
    } else {
        Err(summary)
    }
}

// ── 7: numerics ─────────────────────────────────────────────────────────

fn criterion_7() -> Outcome {
    let mut grad: f64 = 0.0;
    for (seed, hidden, pairwise) in [(1, &[5, 3][..], false), (2, &[5, 3][..], true), (3, &[][..], false)] {
        grad = grad.max(common::gradient_check(seed, hidden, pairwise, 1e-5));
    }
    check(grad < 1e-4, format!("gradient relative error {grad:.2e}"))?;
    let cfg = common::small_sweep(4);
    let one = common::estimates_with_threads(&cfg, 1);
    let mut spread: f64 = 0.0;
    for threads in [2, 8] {
        spread = spread.max(common::max_abs_diff(&one, &common::estimates_with_threads(&cfg, threads)));
    }
    check(spread <= 1e-12, format!("thread spread {spread:.2e}"))?;
    check(common::csv_bytes(&cfg, 1) == common::csv_bytes(&cfg, 8), "CSV bytes differ")?;
    Ok(format!("gradient error {grad:.1e}; thread spread {spread:.1e}; CSV byte-identical"))
}

#[test]
fn acceptance_criteria() {
    let criteria: [(usize, fn() -> Outcome); 7] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
    ];
    let mut failed = Vec::new();
    for (id, run) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {id}: PASS  {detail}"),
            Err(detail) => {
                println!("criterion {id}: FAIL  {detail}");
                failed.push(id);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
