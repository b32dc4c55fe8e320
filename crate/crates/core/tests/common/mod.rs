//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use srnle::backend::{MockFixture, MockProvider};
use srnle::harness::{run_with_provider, RunConfig, RunOutcome};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

pub fn golden_dir() -> PathBuf {
    fixtures().join("golden")
}

/// Golden config with outputs redirected to `out`.
pub fn golden_config(out: &Path) -> RunConfig {
    let mut config = RunConfig::load(golden_dir().join("run.toml")).expect("golden config");
    config.output_dir = out.to_path_buf();
    config
}

pub fn golden_provider(config: &RunConfig) -> MockProvider {
    let fixture = MockFixture::load(&config.resolve(config.backend.fixture.as_ref().expect("fixture path")))
        .expect("golden fixture");
    MockProvider::new(&config.backend.model_tag, fixture, 8192)
}

pub fn run_mock(config: &RunConfig, provider: &MockProvider) -> RunOutcome {
    run_with_provider(config, Arc::new(provider.clone())).expect("run succeeds")
}

/// Every output file except `timing.json`, by name.
pub fn output_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).expect("output dir") {
        let entry = entry.expect("dir entry");
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.path().is_file() && name != "timing.json" {
            out.insert(name, fs::read(entry.path()).expect("readable output"));
        }
    }
    out
}

pub fn read_jsonl(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .expect("jsonl output")
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).expect("json line"))
        .collect()
}
