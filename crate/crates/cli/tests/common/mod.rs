#![allow(dead_code)]

use std::fs;
use std::path::Path;

use bpl_cli::config::{DataSource, ExperimentConfig, FrontKind};
use bpl_core::data::SyntheticSpec;
use bpl_core::nn::ModelConfig;

pub fn tiny_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_samples: 20,
        t_dim: 24,
        f_dim: 12,
        n_classes: 4,
        seed,
        ..SyntheticSpec::default()
    }
}

/// A config that trains in well under a second.
pub fn tiny_config(front: FrontKind, size: Option<usize>) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        data: DataSource::Synthetic(tiny_spec(0)),
        model: ModelConfig {
            channels: 4,
            blocks: 2,
            ..ModelConfig::default()
        },
        steps: 40,
        batch_size: 4,
        log_interval: 10,
        ..ExperimentConfig::default()
    };
    c.front.kind = front;
    c.front.size = size;
    c
}

/// Every file under `dir` with its bytes, sorted by relative path.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

pub fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

pub fn validate(schema_file: &str, doc: &serde_json::Value) -> Result<(), String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(schema_file);
    let schema: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema).map_err(|e| e.to_string())?;
    let errors: Vec<String> = validator.iter_errors(doc).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    if errors.is_empty() {
        Ok(())
    } else {
        Err(errors.join("; "))
    }
}
