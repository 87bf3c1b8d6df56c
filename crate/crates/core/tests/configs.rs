use std::path::Path;

use esp_core::harness::{Algorithm, ExperimentConfig};

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            cfg.env.build().unwrap();
            n += 1;
        }
    }
    assert!(n >= 6);
}

#[test]
fn paired_configs_differ_only_in_algorithm() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for env in ["coop_nav", "predator_prey"] {
        let esp = ExperimentConfig::load(&dir.join(format!("{env}_esp.toml"))).unwrap();
        let mut base = ExperimentConfig::load(&dir.join(format!("{env}_mappo.toml"))).unwrap();
        assert_eq!(base.algorithm, Algorithm::Mappo);
        base.algorithm = Algorithm::MappoEsp;
        assert_eq!(base, esp);
    }
}
