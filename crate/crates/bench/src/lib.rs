//! Shared fixtures for the criterion benches under `benches/`.

use offcem::synthetic::{epsilon_target, make_environment, sample_logged_data, softmax_logging, EnvironmentSpec, SyntheticEnvironment};
use offcem::{LoggedDataset, Policy};

/// An environment with both policies and one logged dataset.
pub struct Fixture {
    pub env: SyntheticEnvironment,
    pub logging: Policy,
    pub target: Policy,
    pub data: LoggedDataset,
}

pub fn spec(num_actions: usize) -> EnvironmentSpec {
    EnvironmentSpec {
        num_contexts: 50,
        num_actions,
        num_clusters: 20,
        ..Default::default()
    }
}

pub fn fixture(num_actions: usize, n: usize) -> Fixture {
    let env = make_environment(&spec(num_actions)).expect("valid spec");
    let logging = softmax_logging(&env.rewards, -0.1).expect("logging policy");
    let target = epsilon_target(&env.rewards, 0.2).expect("target policy");
    let data = sample_logged_data(&env, &logging, n, 7).expect("sample");
    Fixture {
        env,
        logging,
        target,
        data,
    }
}
