use std::path::PathBuf;

use inclearn::data::SplitMode;
use inclearn::data::{synthetic_gaussians, SyntheticSpec};
use inclearn_cli::ExperimentConfig;

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn shipped_experiment_configs_parse() {
    for name in ["ws.toml", "dsads.toml", "synthetic.toml"] {
        let cfg = ExperimentConfig::load(&configs_dir().join(name))
            .unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(cfg.n_orders > 0, "{name}");
    }
    let dsads = ExperimentConfig::load(&configs_dir().join("dsads.toml")).unwrap();
    assert_eq!(dsads.network.hidden, vec![202, 202, 101]);
    assert_eq!(dsads.train.batch_size, 20);
    assert_eq!(dsads.dataset.split.mode, SplitMode::BySubject);
    let ws = ExperimentConfig::load(&configs_dir().join("ws.toml")).unwrap();
    assert_eq!(ws.network.hidden, vec![32, 16, 16]);
    assert_eq!(ws.dataset.split.mode, SplitMode::Stratified);
}

#[test]
fn shipped_synthetic_spec_generates() {
    let text = std::fs::read_to_string(configs_dir().join("synth_spec.toml")).unwrap();
    let spec: SyntheticSpec = toml::from_str(&text).unwrap();
    let ds = synthetic_gaussians(&spec).unwrap();
    assert_eq!(ds.n_classes(), 6);
    assert!(ds.subjects().is_some());
}
