use servesim::config::{ConfigError, ExperimentConfig};
use servesim::PolicyConfig;

#[test]
fn defaults_fill_every_section() {
    let mut c = ExperimentConfig::default();
    c.fill_defaults().unwrap();
    assert_eq!(c.gpu.preset.as_deref(), Some("toy"));
    assert_eq!(c.workload.kind.as_deref(), Some("chat"));
    assert_eq!(c.workload.paying_frac, Some(0.05));
    assert_eq!(c.policy_config().unwrap(), PolicyConfig::Rad { n: 16 });
    assert_eq!(c.sim.nodes, Some(1));
    assert_eq!(c.sweep.ttft_limit, Some(0.5));
}

#[test]
fn effective_config_round_trips() {
    let mut c = ExperimentConfig::from_toml_str("[policy]\nname = \"slai\"\n[gpu]\npreset = \"reference\"\n").unwrap();
    c.fill_defaults().unwrap();
    let back = ExperimentConfig::from_toml_str(&c.to_toml()).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.cost_model().unwrap(), c.cost_model().unwrap());
}

#[test]
fn unknown_keys_and_names_rejected() {
    assert!(matches!(
        ExperimentConfig::from_toml_str("[policy]\nnme = 3\n"),
        Err(ConfigError::Parse(_))
    ));
    let mut c = ExperimentConfig::from_toml_str("[policy]\nname = \"fifo\"\n").unwrap();
    let err = c.fill_defaults().unwrap_err();
    assert!(err.to_string().contains("distserve"), "{err}");
    let mut c = ExperimentConfig::from_toml_str("[gpu]\npreset = \"h100\"\n").unwrap();
    assert!(matches!(c.fill_defaults(), Err(ConfigError::UnknownPreset(_))));
}

#[test]
fn direct_linear_rate_wins_over_derived() {
    let c = ExperimentConfig::from_toml_str("[model]\nlin_rate = 2.0\nlin_rate_derived = true\n").unwrap();
    let cm = c.cost_model().unwrap();
    assert_eq!(cm.lin_rate(cm.optimal_tile()).unwrap(), 2.0);
    let c = ExperimentConfig::from_toml_str("[model]\nlin_rate_derived = true\n").unwrap();
    let cm = c.cost_model().unwrap();
    assert_eq!(cm.lin_rate(cm.optimal_tile()).unwrap(), 1.0 / 6.0);
}

#[test]
fn distserve_defaults_to_two_nodes() {
    let c = ExperimentConfig::from_toml_str("[policy]\nname = \"distserve\"\n").unwrap();
    assert_eq!(c.sim_config().unwrap().roles.len(), 2);
}

#[test]
fn deterministic_lengths_need_both_fields() {
    let c = ExperimentConfig::from_toml_str("[workload]\nkind = \"deterministic\"\nprompt_len = 4\n").unwrap();
    assert!(c.length_distribution(2).is_err());
}
