//! Run configuration: a flat `key = value` text file plus CLI overrides.
//! Unknown keys are rejected, and every run writes its fully resolved
//! configuration next to its outputs.
//!
//! Recognized keys (defaults in parentheses):
//!
//! ```text
//! data.source        synthetic | mnist        (synthetic)
//! data.dir           IDX directory            (data/mnist; mnist only)
//! data.seed          generator seed           (1; synthetic only)
//! data.count         synthetic train samples  (600)
//! data.test_count    synthetic test samples   (200)
//! data.size_x        synthetic image width    (12)
//! data.size_y        synthetic image height   (12)
//! data.classes       synthetic class count    (4)
//! data.train_limit   cap on train split, 0 = all (0)
//! data.test_limit    cap on test split, 0 = all  (0)
//! layer.<i>.kernel   kernel size of conv layer i
//! layer.<i>.channels output channels of conv layer i
//! layer.<i>.rank     factor groups of conv layer i
//! baseline           dense kernels instead of factor groups (false)
//! train.learning_rate (0.05)
//! train.epochs        (2)
//! train.batch_size    (32)
//! train.momentum      (0)
//! train.rectifier     (false)
//! seed                run seed: init, shuffles, subsets (42)
//! deterministic       single-threaded, zeroed wall_time column (true)
//! out                 output directory (runs/default)
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use cpac_core::data::{load_idx, subset, synthetic_shapes, Dataset};
use cpac_core::error::{CpacError, Result};
use cpac_core::network::{LayerConfig, NetworkConfig, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataSource {
    Synthetic,
    Mnist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: DataSource,
    pub dir: PathBuf,
    pub seed: u64,
    pub count: usize,
    pub test_count: usize,
    pub size_x: usize,
    pub size_y: usize,
    pub classes: usize,
    pub train_limit: usize,
    pub test_limit: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            dir: PathBuf::from("data/mnist"),
            seed: 1,
            count: 600,
            test_count: 200,
            size_x: 12,
            size_y: 12,
            classes: 4,
            train_limit: 0,
            test_limit: 0,
        }
    }
}

impl DataConfig {
    /// Loads the train and test splits. Subset caps use `run_seed` so the
    /// draw is reproducible per run.
    pub fn load(&self, run_seed: u64) -> Result<(Dataset, Dataset)> {
        let (train, test) = match self.source {
            DataSource::Synthetic => (
                synthetic_shapes(self.seed, self.count, self.size_x, self.size_y, self.classes)?,
                synthetic_shapes(
                    self.seed + 1,
                    self.test_count,
                    self.size_x,
                    self.size_y,
                    self.classes,
                )?,
            ),
            DataSource::Mnist => {
                let file = |name: &str| self.dir.join(name);
                (
                    load_idx(
                        file("train-images-idx3-ubyte"),
                        file("train-labels-idx1-ubyte"),
                    )?,
                    load_idx(
                        file("t10k-images-idx3-ubyte"),
                        file("t10k-labels-idx1-ubyte"),
                    )?,
                )
            }
        };
        let train = if self.train_limit > 0 && self.train_limit < train.len() {
            subset(&train, self.train_limit, run_seed)?
        } else {
            train
        };
        let test = if self.test_limit > 0 && self.test_limit < test.len() {
            subset(&test, self.test_limit, run_seed + 1)?
        } else {
            test
        };
        Ok((train, test))
    }
}

/// Everything a run needs, resolved from file and flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataConfig,
    pub layers: Vec<LayerConfig>,
    pub baseline: bool,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub rectifier: bool,
    pub seed: u64,
    pub deterministic: bool,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            layers: vec![LayerConfig {
                kernel: 3,
                channels: 8,
                rank: 1,
            }],
            baseline: false,
            learning_rate: 0.05,
            epochs: 2,
            batch_size: 32,
            momentum: 0.0,
            rectifier: false,
            seed: 42,
            deterministic: true,
            out: PathBuf::from("runs/default"),
        }
    }
}

/// Flag-level overrides; every run command accepts these.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub rank: Option<usize>,
    pub out: Option<PathBuf>,
    pub deterministic: Option<bool>,
    pub baseline: Option<bool>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| {
            CpacError::config(format!("cannot read config {}: {e}", path.display()))
        })?;
        RunConfig::parse(&text)
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut layers: BTreeMap<usize, (Option<usize>, Option<usize>, Option<usize>)> =
            BTreeMap::new();
        let mut saw_layer_key = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CpacError::config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| {
                CpacError::config(format!("line {}: {what} in `{key} = {value}`", lineno + 1))
            };
            match key {
                "data.source" => {
                    cfg.data.source = match value {
                        "synthetic" => DataSource::Synthetic,
                        "mnist" => DataSource::Mnist,
                        _ => return Err(bad("unknown data source")),
                    }
                }
                "data.dir" => cfg.data.dir = PathBuf::from(value),
                "data.seed" => cfg.data.seed = parse_num(value).ok_or_else(|| bad("bad u64"))?,
                "data.count" => cfg.data.count = parse_num(value).ok_or_else(|| bad("bad count"))?,
                "data.test_count" => {
                    cfg.data.test_count = parse_num(value).ok_or_else(|| bad("bad count"))?
                }
                "data.size_x" => cfg.data.size_x = parse_num(value).ok_or_else(|| bad("bad size"))?,
                "data.size_y" => cfg.data.size_y = parse_num(value).ok_or_else(|| bad("bad size"))?,
                "data.classes" => {
                    cfg.data.classes = parse_num(value).ok_or_else(|| bad("bad class count"))?
                }
                "data.train_limit" => {
                    cfg.data.train_limit = parse_num(value).ok_or_else(|| bad("bad limit"))?
                }
                "data.test_limit" => {
                    cfg.data.test_limit = parse_num(value).ok_or_else(|| bad("bad limit"))?
                }
                "baseline" => cfg.baseline = parse_bool(value).ok_or_else(|| bad("bad bool"))?,
                "train.learning_rate" => {
                    cfg.learning_rate = value.parse().map_err(|_| bad("bad float"))?
                }
                "train.epochs" => cfg.epochs = parse_num(value).ok_or_else(|| bad("bad count"))?,
                "train.batch_size" => {
                    cfg.batch_size = parse_num(value).ok_or_else(|| bad("bad count"))?
                }
                "train.momentum" => cfg.momentum = value.parse().map_err(|_| bad("bad float"))?,
                "train.rectifier" => {
                    cfg.rectifier = parse_bool(value).ok_or_else(|| bad("bad bool"))?
                }
                "seed" => cfg.seed = parse_num(value).ok_or_else(|| bad("bad u64"))?,
                "deterministic" => {
                    cfg.deterministic = parse_bool(value).ok_or_else(|| bad("bad bool"))?
                }
                "out" => cfg.out = PathBuf::from(value),
                _ => {
                    let parts: Vec<&str> = key.split('.').collect();
                    if parts.len() == 3 && parts[0] == "layer" {
                        let idx: usize = parts[1].parse().map_err(|_| bad("bad layer index"))?;
                        let entry = layers.entry(idx).or_default();
                        let num = parse_num(value).ok_or_else(|| bad("bad number"))?;
                        match parts[2] {
                            "kernel" => entry.0 = Some(num),
                            "channels" => entry.1 = Some(num),
                            "rank" => entry.2 = Some(num),
                            _ => {
                                return Err(CpacError::config(format!(
                                    "line {}: unknown key `{key}`",
                                    lineno + 1
                                )))
                            }
                        }
                        saw_layer_key = true;
                    } else {
                        return Err(CpacError::config(format!(
                            "line {}: unknown key `{key}`",
                            lineno + 1
                        )));
                    }
                }
            }
        }
        if saw_layer_key {
            let mut parsed = Vec::new();
            for (want, (idx, entry)) in layers.iter().enumerate() {
                if *idx != want {
                    return Err(CpacError::config(format!(
                        "layer indices must be contiguous from 0, found {idx}"
                    )));
                }
                let (Some(kernel), Some(channels), Some(rank)) = *entry else {
                    return Err(CpacError::config(format!(
                        "layer {idx} needs kernel, channels, and rank"
                    )));
                };
                parsed.push(LayerConfig {
                    kernel,
                    channels,
                    rank,
                });
            }
            cfg.layers = parsed;
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, over: &Overrides) {
        if let Some(seed) = over.seed {
            self.seed = seed;
        }
        if let Some(rank) = over.rank {
            for l in &mut self.layers {
                l.rank = rank;
            }
        }
        if let Some(out) = &over.out {
            self.out = out.clone();
        }
        if let Some(det) = over.deterministic {
            self.deterministic = det;
        }
        if let Some(base) = over.baseline {
            self.baseline = base;
        }
    }

    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        self.data.load(self.seed)
    }

    /// Network description for a loaded train split; input geometry and class
    /// count come from the data itself.
    pub fn network_config(&self, train: &Dataset) -> Result<NetworkConfig> {
        let (x, y, s) = train
            .image_dims()
            .ok_or_else(|| CpacError::config("train split is empty"))?;
        let cfg = NetworkConfig {
            input_x: x,
            input_y: y,
            input_channels: s,
            classes: train.classes,
            conv: self.layers.clone(),
            baseline: self.baseline,
            train: TrainConfig {
                learning_rate: self.learning_rate,
                epochs: self.epochs,
                batch_size: self.batch_size,
                seed: self.seed,
                momentum: self.momentum,
                rectifier: self.rectifier,
                parallel: !self.deterministic,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The fully resolved key = value text, parseable back into an equal
    /// config.
    pub fn resolved_text(&self) -> String {
        let mut s = String::new();
        let src = match self.data.source {
            DataSource::Synthetic => "synthetic",
            DataSource::Mnist => "mnist",
        };
        writeln!(s, "data.source = {src}").unwrap();
        writeln!(s, "data.dir = {}", self.data.dir.display()).unwrap();
        writeln!(s, "data.seed = {}", self.data.seed).unwrap();
        writeln!(s, "data.count = {}", self.data.count).unwrap();
        writeln!(s, "data.test_count = {}", self.data.test_count).unwrap();
        writeln!(s, "data.size_x = {}", self.data.size_x).unwrap();
        writeln!(s, "data.size_y = {}", self.data.size_y).unwrap();
        writeln!(s, "data.classes = {}", self.data.classes).unwrap();
        writeln!(s, "data.train_limit = {}", self.data.train_limit).unwrap();
        writeln!(s, "data.test_limit = {}", self.data.test_limit).unwrap();
        for (i, l) in self.layers.iter().enumerate() {
            writeln!(s, "layer.{i}.kernel = {}", l.kernel).unwrap();
            writeln!(s, "layer.{i}.channels = {}", l.channels).unwrap();
            writeln!(s, "layer.{i}.rank = {}", l.rank).unwrap();
        }
        writeln!(s, "baseline = {}", self.baseline).unwrap();
        writeln!(s, "train.learning_rate = {}", self.learning_rate).unwrap();
        writeln!(s, "train.epochs = {}", self.epochs).unwrap();
        writeln!(s, "train.batch_size = {}", self.batch_size).unwrap();
        writeln!(s, "train.momentum = {}", self.momentum).unwrap();
        writeln!(s, "train.rectifier = {}", self.rectifier).unwrap();
        writeln!(s, "seed = {}", self.seed).unwrap();
        writeln!(s, "deterministic = {}", self.deterministic).unwrap();
        writeln!(s, "out = {}", self.out.display()).unwrap();
        s
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> Option<T> {
    v.parse().ok()
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_layers_and_rejects_unknown_keys() {
        let cfg = RunConfig::parse(
            "data.source = synthetic\nlayer.0.kernel = 3\nlayer.0.channels = 8\n\
             layer.0.rank = 5\nlayer.1.kernel = 3\nlayer.1.channels = 4\nlayer.1.rank = 2\n\
             seed = 9\n# comment\n",
        )
        .unwrap();
        assert_eq!(cfg.layers.len(), 2);
        assert_eq!(cfg.layers[1].channels, 4);
        assert_eq!(cfg.seed, 9);

        let err = RunConfig::parse("nonsense = 1\n").unwrap_err().to_string();
        assert!(err.contains("unknown key"), "{err}");
        let err = RunConfig::parse("layer.0.depth = 1\n").unwrap_err().to_string();
        assert!(err.contains("unknown key"), "{err}");
    }

    #[test]
    fn layer_indices_must_be_contiguous() {
        let err = RunConfig::parse("layer.1.kernel = 3\nlayer.1.channels = 8\nlayer.1.rank = 1\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("contiguous"), "{err}");
    }

    #[test]
    fn resolved_text_roundtrips() {
        let mut cfg = RunConfig::default();
        cfg.seed = 77;
        cfg.layers[0].rank = 4;
        cfg.deterministic = false;
        let text = cfg.resolved_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_take_precedence() {
        let mut cfg = RunConfig::default();
        cfg.apply(&Overrides {
            seed: Some(5),
            rank: Some(7),
            out: Some(PathBuf::from("elsewhere")),
            deterministic: Some(false),
            baseline: Some(true),
        });
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.layers[0].rank, 7);
        assert_eq!(cfg.out, PathBuf::from("elsewhere"));
        assert!(!cfg.deterministic);
        assert!(cfg.baseline);
    }

    #[test]
    fn synthetic_data_loads_and_respects_limits() {
        let mut cfg = RunConfig::default();
        cfg.data.count = 40;
        cfg.data.test_count = 20;
        cfg.data.train_limit = 10;
        let (train, test) = cfg.load_data().unwrap();
        assert_eq!(train.len(), 10);
        assert_eq!(test.len(), 20);
        let net_cfg = cfg.network_config(&train).unwrap();
        assert_eq!(net_cfg.input_x, 12);
        assert_eq!(net_cfg.classes, 4);
        assert!(net_cfg.train.parallel == !cfg.deterministic);
    }
}
