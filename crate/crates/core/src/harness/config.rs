use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{HarnessError, Result};
use crate::encoder::EncoderDims;
use crate::losses::{LossConfig, LossKind, MultiSimilarityParams, NegativeSchedule, Similarity};
use crate::retrieval::Measure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Singletask,
    Multitask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextInit {
    Random,
    Metapath,
}

/// Everything a run needs; read from and written to flat `key=value` files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: Task,
    pub loss: LossKind,
    /// Defaults to 0.2 for singletask and 0.3 for multitask.
    pub tau: Option<f64>,
    pub alpha: f64,
    pub similarity: Similarity,
    pub schedule: NegativeSchedule,
    /// Margin-loss scale and margin; per-loss defaults when unset.
    pub scale: Option<f64>,
    pub margin: Option<f64>,
    pub multisim: MultiSimilarityParams,
    pub batch_size: usize,
    pub episode_length: usize,
    /// Defaults to `2 · episode_length`.
    pub min_posts: Option<usize>,
    pub lr: f64,
    pub momentum: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub seed: u64,
    pub dims: EncoderDims,
    pub measure: Measure,
    pub context_init: ContextInit,
    pub walks_per_node: usize,
    pub skipgram_epochs: usize,
    pub data: Vec<PathBuf>,
    pub cross_map: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::Singletask,
            loss: LossKind::Nbc,
            tau: None,
            alpha: 0.5,
            similarity: Similarity::Cosine,
            schedule: NegativeSchedule::Batch,
            scale: None,
            margin: None,
            multisim: MultiSimilarityParams::default(),
            batch_size: 32,
            episode_length: 5,
            min_posts: None,
            lr: 0.01,
            momentum: 0.9,
            warmup_epochs: 1,
            epochs: 10,
            seed: 0,
            dims: EncoderDims::default(),
            measure: Measure::Cosine,
            context_init: ContextInit::Random,
            walks_per_node: 10,
            skipgram_epochs: 5,
            data: Vec::new(),
            cross_map: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| HarnessError::Config(format!("{key}: cannot parse {v:?}: {e}")))
}

fn opt_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    if v.is_empty() || v == "auto" {
        Ok(None)
    } else {
        parse_num(key, v).map(Some)
    }
}

fn fmt_opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), T::to_string)
}

impl RunConfig {
    pub fn tau(&self) -> f64 {
        self.tau.unwrap_or(match self.task {
            Task::Singletask => LossConfig::singletask().tau,
            Task::Multitask => LossConfig::multitask().tau,
        })
    }

    pub fn min_posts(&self) -> usize {
        self.min_posts.unwrap_or(2 * self.episode_length)
    }

    /// Head scale and margin: CosFace `s = 30, m = 0.35`, ArcFace
    /// `s = 30, m = 0.5`, plain logits otherwise.
    pub fn head_scale_margin(&self) -> (f64, f64) {
        let (s, m) = match self.loss {
            LossKind::CosFace => (30.0, 0.35),
            LossKind::ArcFace => (30.0, 0.5),
            _ => (1.0, 0.0),
        };
        (self.scale.unwrap_or(s), self.margin.unwrap_or(m))
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            tau: self.tau(),
            alpha: self.alpha,
            similarity: self.similarity,
            schedule: self.schedule,
            multisim: self.multisim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.loss_config().validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.dims.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.loss == LossKind::Nbc && self.batch_size < 2 {
            return bad("nbc needs batch_size >= 2".into());
        }
        if self.batch_size == 0 || self.episode_length == 0 {
            return bad("batch_size and episode_length must be positive".into());
        }
        if self.min_posts() < self.episode_length {
            return bad(format!("min_posts {} below episode_length {}", self.min_posts(), self.episode_length));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("lr {} / momentum {} out of range", self.lr, self.momentum));
        }
        let (s, m) = self.head_scale_margin();
        if !(s > 0.0) || m < 0.0 {
            return bad(format!("scale {s} / margin {m} out of range"));
        }
        Ok(())
    }

    /// Checks that every referenced input file exists.
    pub fn check_paths(&self) -> Result<()> {
        for p in self.data.iter().chain(self.cross_map.iter()) {
            if !p.exists() {
                return Err(HarnessError::Config(format!("missing file {}", p.display())));
            }
        }
        Ok(())
    }

    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let enum_err = |what: &str| HarnessError::Config(format!("{key}: unknown {what} {v:?}"));
        match key.trim() {
            "task" => {
                self.task = match v {
                    "singletask" => Task::Singletask,
                    "multitask" => Task::Multitask,
                    _ => return Err(enum_err("task")),
                }
            }
            "loss" => self.loss = LossKind::parse(v).ok_or_else(|| enum_err("loss"))?,
            "tau" => self.tau = opt_num(key, v)?,
            "alpha" => self.alpha = parse_num(key, v)?,
            "similarity" => {
                self.similarity = match v {
                    "cosine" => Similarity::Cosine,
                    "dot" => Similarity::Dot,
                    _ => return Err(enum_err("similarity")),
                }
            }
            "schedule" => {
                self.schedule = match v {
                    "batch" => NegativeSchedule::Batch,
                    "epoch" => NegativeSchedule::Epoch,
                    _ => return Err(enum_err("schedule")),
                }
            }
            "scale" => self.scale = opt_num(key, v)?,
            "margin" => self.margin = opt_num(key, v)?,
            "ms_alpha" => self.multisim.alpha = parse_num(key, v)?,
            "ms_beta" => self.multisim.beta = parse_num(key, v)?,
            "ms_lambda" => self.multisim.lambda = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "episode_length" => self.episode_length = parse_num(key, v)?,
            "min_posts" => self.min_posts = opt_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "momentum" => self.momentum = parse_num(key, v)?,
            "warmup_epochs" => self.warmup_epochs = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "d_t" => self.dims.d_t = parse_num(key, v)?,
            "f_n" => self.dims.f_n = parse_num(key, v)?,
            "widths" => {
                self.dims.widths = v
                    .split(',')
                    .map(|w| parse_num(key, w.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            "d_txt" => self.dims.d_txt = parse_num(key, v)?,
            "d_time" => self.dims.d_time = parse_num(key, v)?,
            "d_ctx" => self.dims.d_ctx = parse_num(key, v)?,
            "embed" => self.dims.embed = parse_num(key, v)?,
            "max_len" => self.dims.max_len = parse_num(key, v)?,
            "heads" => self.dims.heads = parse_num(key, v)?,
            "layers" => self.dims.layers = parse_num(key, v)?,
            "d_ff" => self.dims.d_ff = parse_num(key, v)?,
            "dropout" => self.dims.dropout = parse_num(key, v)?,
            "measure" => self.measure = v.parse().map_err(HarnessError::Config)?,
            "context_init" => {
                self.context_init = match v {
                    "random" => ContextInit::Random,
                    "metapath" => ContextInit::Metapath,
                    _ => return Err(enum_err("context_init")),
                }
            }
            "walks_per_node" => self.walks_per_node = parse_num(key, v)?,
            "skipgram_epochs" => self.skipgram_epochs = parse_num(key, v)?,
            "data" => {
                self.data = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(PathBuf::from)
                    .collect()
            }
            "cross_map" => self.cross_map = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "output_dir" => self.output_dir = PathBuf::from(v),
            other => return Err(HarnessError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected key=value", n + 1)))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::parse(&fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &PathBuf| if p.is_relative() { base.join(p) } else { p.clone() };
        cfg.data = cfg.data.iter().map(resolve).collect();
        cfg.cross_map = cfg.cross_map.as_ref().map(resolve);
        cfg.check_paths()?;
        Ok(cfg)
    }

    /// Every field as `key=value`, in a fixed order.
    pub fn to_kv(&self) -> String {
        let task = match self.task {
            Task::Singletask => "singletask",
            Task::Multitask => "multitask",
        };
        let similarity = match self.similarity {
            Similarity::Cosine => "cosine",
            Similarity::Dot => "dot",
        };
        let schedule = match self.schedule {
            NegativeSchedule::Batch => "batch",
            NegativeSchedule::Epoch => "epoch",
        };
        let context_init = match self.context_init {
            ContextInit::Random => "random",
            ContextInit::Metapath => "metapath",
        };
        let widths: Vec<String> = self.dims.widths.iter().map(usize::to_string).collect();
        let data: Vec<String> = self.data.iter().map(|p| p.display().to_string()).collect();
        let d = &self.dims;
        let pairs: Vec<(&str, String)> = vec![
            ("task", task.into()),
            ("loss", self.loss.name().into()),
            ("tau", fmt_opt(&self.tau)),
            ("alpha", self.alpha.to_string()),
            ("similarity", similarity.into()),
            ("schedule", schedule.into()),
            ("scale", fmt_opt(&self.scale)),
            ("margin", fmt_opt(&self.margin)),
            ("ms_alpha", self.multisim.alpha.to_string()),
            ("ms_beta", self.multisim.beta.to_string()),
            ("ms_lambda", self.multisim.lambda.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("episode_length", self.episode_length.to_string()),
            ("min_posts", fmt_opt(&self.min_posts)),
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("epochs", self.epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("d_t", d.d_t.to_string()),
            ("f_n", d.f_n.to_string()),
            ("widths", widths.join(",")),
            ("d_txt", d.d_txt.to_string()),
            ("d_time", d.d_time.to_string()),
            ("d_ctx", d.d_ctx.to_string()),
            ("embed", d.embed.to_string()),
            ("max_len", d.max_len.to_string()),
            ("heads", d.heads.to_string()),
            ("layers", d.layers.to_string()),
            ("d_ff", d.d_ff.to_string()),
            ("dropout", d.dropout.to_string()),
            ("measure", self.measure.name().into()),
            ("context_init", context_init.into()),
            ("walks_per_node", self.walks_per_node.to_string()),
            ("skipgram_epochs", self.skipgram_epochs.to_string()),
            ("data", data.join(",")),
            (
                "cross_map",
                self.cross_map.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ),
            ("output_dir", self.output_dir.display().to_string()),
        ];
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    /// SHA-256 of [`RunConfig::to_kv`], hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_kv().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let cfg = RunConfig {
            task: Task::Multitask,
            loss: LossKind::ArcFace,
            tau: Some(0.1),
            data: vec!["a.jsonl".into(), "b.jsonl".into()],
            cross_map: Some("x.txt".into()),
            ..RunConfig::default()
        };
        let back = RunConfig::parse(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn task_sets_default_tau() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.tau(), 0.2);
        cfg.task = Task::Multitask;
        assert_eq!(cfg.tau(), 0.3);
        cfg.tau = Some(0.5);
        assert_eq!(cfg.tau(), 0.5);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::parse("nope=1").is_err());
        assert!(RunConfig::parse("loss=triplet").is_err());
        assert!(RunConfig::parse("loss=nbc\nbatch_size=1").is_err());
        assert!(RunConfig::parse("batch_size").is_err());
        assert!(RunConfig::parse("# comment only\n").is_ok());
    }

    #[test]
    fn margin_defaults_follow_loss() {
        let mut cfg = RunConfig {
            loss: LossKind::CosFace,
            ..RunConfig::default()
        };
        assert_eq!(cfg.head_scale_margin(), (30.0, 0.35));
        cfg.loss = LossKind::ArcFace;
        assert_eq!(cfg.head_scale_margin(), (30.0, 0.5));
        cfg.margin = Some(0.1);
        assert_eq!(cfg.head_scale_margin(), (30.0, 0.1));
    }
}
