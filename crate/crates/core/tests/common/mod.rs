#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use nsseg::model::TrainConfig;
use nsseg::phantom::{generate_corpus, DomainProfile, MANIFEST_FILE};
use nsseg::pipeline::{DataPaths, ExperimentConfig, Mode};
use nsseg::pseudolabel::RankerConfig;

pub fn profile(lesion_rate: f64, noise: f64) -> DomainProfile {
    DomainProfile {
        domain_id: "toy".into(),
        noise_sigma: noise,
        contrast_bias: 1.0,
        head_scale: 0.38,
        lesion_rate,
        lesion_brightness: 0.35,
        frame_dims: [24, 24],
        frames_per_stack: 3,
    }
}

/// A tiny four-split dataset under `root` and an experiment config
/// (`experiment.toml`) pointing at it with relative paths.
pub fn tiny_experiment(root: &Path, mode: Mode, iterations: usize) -> (PathBuf, ExperimentConfig) {
    for (name, n, seed, rate, noise) in [
        ("labeled", 4, 1, 0.4, 0.02),
        ("unlabeled", 6, 2, 0.3, 0.05),
        ("validation", 6, 3, 0.3, 0.05),
        ("test", 6, 4, 0.3, 0.05),
    ] {
        let dir = root.join(name);
        if !dir.join(MANIFEST_FILE).exists() {
            generate_corpus(&profile(rate, noise), n, seed, &dir).unwrap();
        }
    }
    let train = TrainConfig {
        epochs: 2,
        batch_size: 5,
        crop_size: 16,
        ..TrainConfig::default()
    };
    let rel = |n: &str| PathBuf::from(n).join(MANIFEST_FILE);
    let cfg = ExperimentConfig {
        mode,
        iterations,
        master_seed: 99,
        baseline_repeats: 1,
        data: DataPaths {
            labeled: rel("labeled"),
            unlabeled: rel("unlabeled"),
            validation: rel("validation"),
            test: rel("test"),
        },
        model: Default::default(),
        teacher: train.clone(),
        student: train,
        ranker: RankerConfig::default(),
    };
    let path = root.join("experiment.toml");
    fs::write(&path, toml::to_string(&cfg).unwrap()).unwrap();
    (path.clone(), ExperimentConfig::load(&path).unwrap())
}

/// Every file under `dir` (relative path, bytes), sorted.
pub fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}
