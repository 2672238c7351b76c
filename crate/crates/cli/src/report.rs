//! Bundles stage outputs into `<out_dir>/report/` with a CRC32 manifest.
//! Missing inputs become warnings in the manifest; rerunning on unchanged
//! inputs reproduces the bundle byte for byte.

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::{log, CliError};

/// Bundled files and the command that produces each.
const INPUTS: &[(&str, &str)] = &[
    ("ablation_arms.json", "ablate"),
    ("ablation_outcomes.csv", "ablate"),
    ("ablation_summary.csv", "ablate"),
    ("activation_shift.csv", "trajectory"),
    ("eval_outcomes.csv", "steer-eval"),
    ("eval_summary.csv", "steer-eval"),
    ("gate_training.csv", "train-gate"),
    ("probe_cv.csv", "probe"),
    ("scores.csv", "identify"),
    ("selection.json", "identify"),
    ("sweep.csv", "sweep"),
    ("trajectory_steered_summary.csv", "trajectory"),
    ("trajectory_steered_tokens.csv", "trajectory"),
    ("trajectory_summary.csv", "trajectory"),
    ("trajectory_tokens.csv", "trajectory"),
];

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize)]
struct Entry {
    file: String,
    bytes: usize,
    crc32: String,
}

#[derive(Debug, Serialize)]
struct Manifest {
    files: Vec<Entry>,
    warnings: Vec<String>,
}

pub fn report(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let dir = cfg.out("report");
    std::fs::create_dir_all(&dir)?;
    let mut files = Vec::new();
    let mut warnings = Vec::new();
    for &(name, producer) in INPUTS {
        let src = cfg.out(name);
        let dst = dir.join(name);
        if !src.exists() {
            warnings.push(format!("missing input {name} (produced by `steerlab {producer}`)"));
            // a stale copy from an earlier run would contradict the manifest
            if dst.exists() {
                std::fs::remove_file(&dst)?;
            }
            continue;
        }
        let data = std::fs::read(&src)?;
        std::fs::write(&dst, &data)?;
        files.push(Entry {
            file: name.to_string(),
            bytes: data.len(),
            crc32: format!("{:08x}", crc32fast::hash(&data)),
        });
    }
    if files.is_empty() {
        return Err(CliError::Data(format!("nothing to report: {}", warnings.join("; "))));
    }
    for w in &warnings {
        log(&format!("warning: {w}"));
    }
    let manifest = Manifest { files, warnings };
    std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    log(&format!("bundled {} files into {}", manifest.files.len(), dir.display()));
    Ok(())
}
