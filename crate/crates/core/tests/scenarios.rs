use std::path::PathBuf;

use xbof_sim::config::ScenarioConfig;
use xbof_sim::presets;

fn dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

#[test]
fn scenario_files_match_presets() {
    for n in presets::SCENARIOS {
        let path = dir().join(format!("{n}.toml"));
        let file = ScenarioConfig::load(&path).unwrap_or_else(|e| panic!("{n}: {e}"));
        let preset = presets::scenario(n).unwrap();
        assert_eq!(file, preset, "{n}: regenerate with `xbof export`");
    }
}

#[test]
fn no_stray_scenario_files() {
    for e in std::fs::read_dir(dir()).unwrap() {
        let p = e.unwrap().path();
        let stem = p.file_stem().unwrap().to_string_lossy().into_owned();
        assert!(presets::SCENARIOS.contains(&stem.as_str()), "{}", p.display());
    }
}

#[test]
fn toml_round_trip_is_lossless() {
    for n in presets::SCENARIOS {
        let c = presets::scenario(n).unwrap();
        assert_eq!(ScenarioConfig::from_toml_str(&c.to_toml()).unwrap(), c, "{n}");
    }
}
