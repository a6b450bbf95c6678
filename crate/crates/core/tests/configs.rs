use std::path::Path;

use mcc_core::config::RunConfig;

fn shipped(name: &str) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    RunConfig::load(&path).unwrap()
}

#[test]
fn shipped_configs_match_the_presets() {
    assert_eq!(shipped("desk.cfg"), RunConfig::desk());
    assert_eq!(shipped("paper.cfg"), RunConfig::paper());
}
