#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use voxseg::data::{gen_synthetic, SynthConfig};

pub const BIN: &str = env!("CARGO_BIN_EXE_voxseg");

pub fn voxseg(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Writes a synthetic dataset of `count` volumes of `extent³` into `dir`.
pub fn synth_dataset(dir: &Path, count: usize, extent: usize, seed: u64) {
    let cfg = SynthConfig {
        extent: [extent; 3],
        count,
        seed,
        ..SynthConfig::default()
    };
    gen_synthetic(&cfg, dir).expect("synthetic dataset");
}

/// Settings for one training config file.
pub struct TrainSpec<'a> {
    pub data: &'a Path,
    pub out: &'a Path,
    pub seed: u64,
    pub mode: &'a str,
    pub depth: usize,
    pub base: usize,
    pub patch: usize,
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub every: usize,
}

impl<'a> TrainSpec<'a> {
    pub fn tiny(data: &'a Path, out: &'a Path) -> Self {
        Self {
            data,
            out,
            seed: 1,
            mode: "adaptive_tverskyce",
            depth: 1,
            base: 2,
            patch: 16,
            batch: 2,
            epochs: 3,
            lr: 0.005,
            alpha: 0.7,
            beta: 0.3,
            every: 0,
        }
    }

    pub fn toml(&self) -> String {
        format!(
            "seed = {}\nout = {:?}\n\n[model]\ndepth = {}\nbase_channels = {}\n\n[loss]\nmode = {:?}\nalpha = {}\nbeta = {}\n\n\
             [optim]\nbatch_size = {}\nepochs = {}\ninitial_lr = {}\n\n[data]\ndir = {:?}\npatch = [{p}, {p}, {p}]\n\n\
             [checkpoint]\nevery = {}\n",
            self.seed,
            self.out,
            self.depth,
            self.base,
            self.mode,
            self.alpha,
            self.beta,
            self.batch,
            self.epochs,
            self.lr,
            self.data,
            self.every,
            p = self.patch,
        )
    }

    /// Writes the config next to the output directory and returns its path.
    pub fn write(&self, name: &str) -> PathBuf {
        let path = self.out.with_file_name(name);
        fs::write(&path, self.toml()).expect("config written");
        path
    }
}

/// Parsed `metrics.csv`: header plus numeric rows.
pub struct Csv {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Csv {
    pub fn read(path: &Path) -> Self {
        let text = fs::read_to_string(path).expect("csv readable");
        let mut lines = text.lines();
        let header = lines.next().expect("header").split(',').map(str::to_string).collect();
        let rows = lines
            .map(|l| l.split(',').map(|v| v.parse().expect("numeric cell")).collect())
            .collect();
        Self { header, rows }
    }

    pub fn col(&self, name: &str) -> Vec<f64> {
        let i = self.header.iter().position(|h| h == name).expect("column exists");
        self.rows.iter().map(|r| r[i]).collect()
    }
}

/// Largest violation of the fusion-weight law and the fused-loss identity
/// over all logged epochs.
pub fn weight_law_error(csv: &Csv) -> f64 {
    let (wt, wb) = (csv.col("w_tversky"), csv.col("w_bce"));
    let (lt, lb, total) = (csv.col("train_l_tversky"), csv.col("train_l_bce"), csv.col("train_l_total"));
    let mut worst = (wt[0] - 0.5).abs().max((wb[0] - 0.5).abs());
    for t in 0..wt.len() {
        worst = worst.max((wt[t] + wb[t] - 1.0).abs());
        worst = worst.max((total[t] - wt[t] * lt[t] - wb[t] * lb[t]).abs());
        if t > 0 {
            worst = worst.max((wt[t] - lt[t - 1] / (lt[t - 1] + lb[t - 1])).abs());
        }
    }
    worst
}
