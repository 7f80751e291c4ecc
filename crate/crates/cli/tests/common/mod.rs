#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const RESNET: &str = r#"
[schedule]
kind = "cosine"
eta_max = 0.8
eta_end = 0.0
epochs = 200
warmup_epochs = 5
dataset_size = 1281167
batch_size = 4096
"#;

pub const VIT: &str = r#"
[schedule]
kind = "cosine"
eta_max = 0.008
eta_end = 1e-6
epochs = 300
warmup_steps = 10000
dataset_size = 1281167
batch_size = 4096
"#;

pub fn with_sync(schedule: &str, sync: &str) -> String {
    format!("{schedule}\n[sync]\n{sync}\n")
}

/// Noisy quadratic, local SGD with momentum and `H = 1` unless changed.
pub const TRAIN_QUAD: &str = r#"
seed = 5
mode = "local"
workers = 4
local_batch = 2

[optimizer]
kind = "sgd"
momentum = 0.9
weight_decay = 0.001

[schedule]
kind = "cosine"
eta_max = 0.05
eta_end = 0.0
total_steps = 1000
warmup_steps = 50

[sync]
rule = "constant"
h = 1

[problem]
kind = "quadratic"
curvature = [1.0, 0.5, 2.0]
target = [0.3, -0.2, 0.1]
noise_std = [0.5, 0.5, 0.5]
init = [1.0, 1.0, -1.0]
"#;

pub const TRAIN_TOY: &str = r#"
seed = 0
seeds = 4
workers = 4
local_batch = 1

[optimizer]
kind = "sgd"

[schedule]
kind = "cosine"
eta_max = 0.05
eta_end = 0.0
total_steps = 2000

[sync]
rule = "qsr"
alpha = 0.25
h_base = 2

[problem]
kind = "manifold"
init = [1.0, 0.0]
data_seed = 3

[problem.manifold]
kind = "toy"
sigma_x = 0.2
"#;

pub const SDE: &str = r#"
seed = 9
start = [0.5, 0.0]
variants = [{ kind = "sgd" }, { kind = "local_lsr", beta = 0.3 }, { kind = "local_qsr" }]
batch = 1.0
workers = 4
horizon = 0.5
dt = 0.01
paths = 64
record_every = 5

[problem]
kind = "toy"
sigma_x = 0.3
"#;

pub const MOMENTS: &str = r#"
seed = 1
start = [0.5, 0.0]
alphas = [0.2, 0.1]
eta_coef = 2.0
local_batch = 1
workers = 2
seeds = 200

[problem]
kind = "toy"
sigma_x = 1.2
"#;

pub const COMMCOST: &str = r#"
total_parallel = 26.7
total_h1 = 21.2
h1 = 4

[[predictions]]
kind = "period"
h = 8

[[predictions]]
kind = "fraction"
label = "qsr"
value = 0.104
"#;

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_qsr-lab")
}

/// Writes `config` into `dir` and runs `qsr-lab <sub>` with output in `dir/<tag>`.
pub fn run_in(
    dir: &Path,
    tag: &str,
    sub: &str,
    config: &str,
    ext: &str,
    extra: &[&str],
) -> (Output, PathBuf) {
    let cfg = dir.join(format!("{tag}.{ext}"));
    std::fs::write(&cfg, config).unwrap();
    let out = dir.join(tag);
    let output = Command::new(bin())
        .arg(sub)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(extra)
        .output()
        .unwrap();
    (output, out)
}

pub fn summary(out: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap()
}

/// Rows of a CSV file without the header, split on commas.
pub fn rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}
