//! The bundled synthetic benchmark: a small labeled seed set from a source
//! site, a large unlabeled corpus from a shifted site, and validation and
//! test sets from the shifted site.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataPaths, ExperimentConfig, Mode};
use crate::error::{Error, Result};
use crate::frame;
use crate::model::{Architecture, TrainConfig};
use crate::phantom::{generate_corpus, DomainProfile, MANIFEST_FILE};
use crate::pseudolabel::RankerConfig;

pub const BENCHMARK_SEED: u64 = 20_200_906;
pub const EXPERIMENT_FILE: &str = "experiment.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub name: String,
    pub stacks: usize,
    pub seed: u64,
    pub profile: DomainProfile,
}

pub fn source_profile() -> DomainProfile {
    DomainProfile {
        domain_id: "source".into(),
        noise_sigma: 0.02,
        contrast_bias: 1.0,
        head_scale: 0.38,
        lesion_rate: 0.3,
        lesion_brightness: 0.3,
        frame_dims: [48, 48],
        frames_per_stack: 4,
    }
}

pub fn shifted_profile(lesion_rate: f64) -> DomainProfile {
    DomainProfile {
        domain_id: "shifted".into(),
        noise_sigma: 0.1,
        contrast_bias: 0.75,
        head_scale: 0.33,
        lesion_rate,
        lesion_brightness: 0.12,
        frame_dims: [48, 48],
        frames_per_stack: 4,
    }
}

pub fn splits() -> Vec<SplitSpec> {
    let split = |name: &str, stacks, idx, profile| SplitSpec {
        name: name.into(),
        stacks,
        seed: crate::rng::mix_seed(BENCHMARK_SEED, idx),
        profile,
    };
    vec![
        split("labeled", 20, 0, source_profile()),
        split("unlabeled", 200, 1, shifted_profile(0.14)),
        split("validation", 20, 2, shifted_profile(0.2)),
        split("test", 40, 3, shifted_profile(0.2)),
    ]
}

pub fn experiment(data: DataPaths, mode: Mode, iterations: usize) -> ExperimentConfig {
    let train = TrainConfig {
        epochs: 100,
        ..TrainConfig::default()
    };
    ExperimentConfig {
        mode,
        iterations,
        master_seed: BENCHMARK_SEED,
        baseline_repeats: 1,
        data,
        model: Architecture::default(),
        teacher: train.clone(),
        student: train,
        ranker: RankerConfig::default(),
    }
}

/// Write every split under `out_dir/<name>/` and an `experiment.toml`
/// (noisy student, one iteration) pointing at them. Returns the config path.
pub fn generate_benchmark(out_dir: &Path) -> Result<PathBuf> {
    for s in splits() {
        generate_corpus(&s.profile, s.stacks, s.seed, &out_dir.join(&s.name))?;
    }
    let rel = |name: &str| PathBuf::from(name).join(MANIFEST_FILE);
    let cfg = experiment(
        DataPaths {
            labeled: rel("labeled"),
            unlabeled: rel("unlabeled"),
            validation: rel("validation"),
            test: rel("test"),
        },
        Mode::NoisyStudent,
        1,
    );
    let path = out_dir.join(EXPERIMENT_FILE);
    let text = toml::to_string(&cfg).map_err(|e| Error::config(&path, e.to_string()))?;
    frame::write_file(&path, text.as_bytes())?;
    Ok(path)
}
