//! Closed forms against exact enumeration on random tiny instances.

use std::sync::Arc;

use proptest::prelude::*;

use offcem::estimators::{estimate, EstimatorKind, EstimatorSpec};
use offcem::oracle::{
    bias_closed_form, exact_mean, exact_variance, mips_variance_reduction, variance_closed_form_dr,
    variance_closed_form_ips, variance_closed_form_offcem, OracleRewards, RandomInstanceOptions, TinyInstance,
};
use offcem::LoggedDataset;

const TOL: f64 = 1e-10;

fn instance(seed: u64, unsupported: bool) -> TinyInstance {
    let opts = RandomInstanceOptions {
        unsupported_actions: unsupported,
        ..Default::default()
    };
    TinyInstance::random(seed, &opts).unwrap()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bias_closed_form_matches_enumeration(seed in any::<u64>(), unsupported in any::<bool>()) {
        let inst = instance(seed, unsupported);
        let mean = exact_mean(&inst, &inst.spec(EstimatorKind::Offcem)).unwrap();
        let bias = bias_closed_form(&inst).unwrap();
        prop_assert!(close(bias, mean - inst.value().unwrap()), "{bias} vs {}", mean - inst.value().unwrap());
    }

    #[test]
    fn locally_correct_models_are_unbiased(seed in any::<u64>(), unsupported in any::<bool>()) {
        let base = instance(seed, unsupported);
        let inst = base.with_model(base.locally_correct_model(seed ^ 1)).unwrap();
        prop_assert!(inst.model_is_locally_correct());
        let mean = exact_mean(&inst, &inst.spec(EstimatorKind::Offcem)).unwrap();
        prop_assert!(close(mean, inst.value().unwrap()));
        prop_assert!(bias_closed_form(&inst).unwrap().abs() <= TOL);
    }

    #[test]
    fn variance_closed_forms_match_enumeration(seed in any::<u64>(), n in 1usize..50) {
        let base = instance(seed, false);
        let inst = base.with_model(base.locally_correct_model(seed)).unwrap();
        let enumerated = exact_variance(&inst, &inst.spec(EstimatorKind::Offcem), n).unwrap();
        prop_assert!(close(variance_closed_form_offcem(&inst, n).unwrap(), enumerated));
        // DR with an arbitrary fixed model.
        let dr = exact_variance(&base, &base.spec(EstimatorKind::Dr), n).unwrap();
        prop_assert!(close(variance_closed_form_dr(&base, n).unwrap(), dr));
        let ips = exact_variance(&base, &base.spec(EstimatorKind::Ips), n).unwrap();
        prop_assert!(close(variance_closed_form_ips(&base, n).unwrap(), ips));
    }

    #[test]
    fn mips_reduction_is_the_variance_gap(seed in any::<u64>()) {
        let inst = instance(seed, false);
        let ips = exact_variance(&inst, &inst.spec(EstimatorKind::Ips), 1).unwrap();
        let mips = exact_variance(&inst, &inst.spec(EstimatorKind::Mips), 1).unwrap();
        let reduction = mips_variance_reduction(&inst, 1).unwrap();
        prop_assert!(reduction >= 0.0);
        prop_assert!(close(reduction, ips - mips), "{reduction} vs {}", ips - mips);
        // MIPS stays unbiased when embeddings carry the whole reward signal.
        let mean = exact_mean(&inst, &inst.spec(EstimatorKind::Mips)).unwrap();
        prop_assert!(close(mean, inst.value().unwrap()));
    }

    #[test]
    fn ips_and_dr_are_unbiased_under_full_support(seed in any::<u64>()) {
        let inst = instance(seed, false);
        let v = inst.value().unwrap();
        prop_assert!(close(exact_mean(&inst, &inst.spec(EstimatorKind::Ips)).unwrap(), v));
        prop_assert!(close(exact_mean(&inst, &inst.spec(EstimatorKind::Dr)).unwrap(), v));
    }

    #[test]
    fn ips_bias_under_deficient_support(seed in any::<u64>()) {
        // E[IPS] − V = −E_x Σ_{a: π₀(a|x)=0} π(a|x) q(x,a).
        let inst = instance(seed, true);
        let mut missing = 0.0;
        for x in 0..inst.contexts.len() {
            for a in 0..inst.catalog.num_actions() {
                if inst.logging.prob(x, a) == 0.0 {
                    missing += inst.contexts.weight(x) * inst.target.prob(x, a) * inst.rewards.expected(x, a);
                }
            }
        }
        let mean = exact_mean(&inst, &inst.spec(EstimatorKind::Ips)).unwrap();
        prop_assert!(close(mean - inst.value().unwrap(), -missing));
    }

    #[test]
    fn noiseless_instances_enumerate_too(seed in any::<u64>()) {
        let opts = RandomInstanceOptions { rewards: OracleRewards::Noiseless, ..Default::default() };
        let inst = TinyInstance::random(seed, &opts).unwrap();
        let mean = exact_mean(&inst, &inst.spec(EstimatorKind::Offcem)).unwrap();
        prop_assert!(close(bias_closed_form(&inst).unwrap(), mean - inst.value().unwrap()));
    }
}

/// Enumerates every dataset of two records and averages `estimate` over
/// them, which checks the oracle's n-scaling against the real estimator code.
#[test]
fn two_record_enumeration_matches_oracle() {
    let opts = RandomInstanceOptions {
        max_contexts: 2,
        max_actions: 4,
        max_clusters: 2,
        ..Default::default()
    };
    for seed in 0..10 {
        let inst = TinyInstance::random(seed, &opts).unwrap();
        let contexts = Arc::new(inst.contexts.clone());
        let catalog = Arc::new(inst.catalog.clone());
        let mut outcomes = Vec::new();
        for x in 0..contexts.len() {
            for a in 0..catalog.num_actions() {
                let p0 = inst.logging.prob(x, a);
                for (r, pr) in inst.rewards.support(x, a).unwrap() {
                    let p = contexts.weight(x) * p0 * pr;
                    if p > 0.0 {
                        outcomes.push((p, LoggedDataset::record(&catalog, x, a, p0, r)));
                    }
                }
            }
        }
        for kind in [EstimatorKind::Ips, EstimatorKind::Dr, EstimatorKind::Mips, EstimatorKind::Offcem] {
            let spec: EstimatorSpec = inst.spec(kind);
            let (mut m1, mut m2) = (0.0, 0.0);
            for (p1, r1) in &outcomes {
                for (p2, r2) in &outcomes {
                    let data = LoggedDataset::new(vec![r1.clone(), r2.clone()], Arc::clone(&contexts), Arc::clone(&catalog)).unwrap();
                    let e = estimate(&data, &inst.target, Some(&inst.logging), &spec).unwrap();
                    m1 += p1 * p2 * e;
                    m2 += p1 * p2 * e * e;
                }
            }
            let var = m2 - m1 * m1;
            let mean = exact_mean(&inst, &spec).unwrap();
            let oracle_var = exact_variance(&inst, &spec, 2).unwrap();
            assert!(close(m1, mean), "{kind}: mean {m1} vs {mean}");
            assert!((var - oracle_var).abs() <= 1e-9 * (1.0 + var.abs()), "{kind}: var {var} vs {oracle_var}");
        }
    }
}

#[test]
fn on_policy_offcem_variance_with_exact_model_is_noise_plus_context_variance() {
    let base = instance(5, false);
    let exact = base.with_model(offcem::TabularModel::new(base.rewards.expected_table().clone())).unwrap();
    let inst = exact.with_target(exact.logging.clone()).unwrap();
    let values: Vec<f64> = (0..inst.contexts.len())
        .map(|x| (0..inst.catalog.num_actions()).map(|a| inst.target.prob(x, a) * inst.rewards.expected(x, a)).sum())
        .collect();
    let v: f64 = (0..values.len()).map(|x| inst.contexts.weight(x) * values[x]).sum();
    let mut expect = 0.0;
    for (x, value) in values.iter().enumerate() {
        let px = inst.contexts.weight(x);
        expect += px * (value - v).powi(2);
        for a in 0..inst.catalog.num_actions() {
            expect += px * inst.logging.prob(x, a) * inst.rewards.variance(x, a);
        }
    }
    let closed = variance_closed_form_offcem(&inst, 1).unwrap();
    assert!(close(closed, expect), "{closed} vs {expect}");
}
