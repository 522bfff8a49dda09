//! Pipeline configuration.
//!
//! The file is line oriented:
//!
//! ```text
//! # comment
//! [section]
//! key = value
//! ```
//!
//! Values run to the end of the line (no inline comments). Lists are comma
//! separated. Every key has a built-in default; the file and then command-line
//! flags override it. Unknown sections or keys are rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sotk_core::bpe::MIN_VOCAB_SIZE;
use sotk_core::corpus::{AnswerFilter, CleanOptions};
use sotk_core::metrics::WeightMode;
use sotk_core::miner::MinerConfig;
use sotk_core::mlm::{OptimizerConfig, Pooling};
use sotk_core::planner::CostModel;

const MS_PER_YEAR: f64 = 365.0 * 86_400_000.0;

/// `(key, default)`; an empty default means unset.
const SCHEMA: &[(&str, &str)] = &[
    ("run.seed", "0"),
    ("paths.posts", ""),
    ("paths.comments", ""),
    ("paths.history", ""),
    ("paths.store", ""),
    ("paths.corpus", ""),
    ("paths.vocab", ""),
    ("paths.shard", ""),
    ("paths.stats", ""),
    ("paths.checkpoint", ""),
    ("paths.loss_trace", ""),
    ("paths.finetune_train", ""),
    ("paths.finetune_eval", ""),
    ("paths.predictions", ""),
    ("paths.report", ""),
    ("paths.candidates", ""),
    ("paths.annotation_sample", ""),
    ("paths.annotations", ""),
    ("filter.min_score", "1"),
    ("filter.min_comments", "1"),
    ("cleaning.abstract_identifiers", "true"),
    ("cleaning.keep_code", "true"),
    ("tokenizer.vocab_size", "50000"),
    ("tokenizer.sample_fraction", "0.10"),
    ("tokenizer.split_digits", "false"),
    ("tokenizer.threads", "0"),
    ("sequence.max_len", "2048"),
    ("sequence.bucket_edges", "512,1024,2048"),
    ("model.layers", "2"),
    ("model.hidden", "64"),
    ("model.heads", "4"),
    ("model.ffn_mult", "4"),
    ("model.tied", "true"),
    ("batch.target_tokens", "500000"),
    ("batch.micro_batch", "8"),
    ("batch.lr", "1e-4"),
    ("batch.steps", "100"),
    ("batch.warmup_steps", "0"),
    ("batch.optimizer", "momentum"),
    ("batch.grad_clip", "1.0"),
    ("batch.mask_rate", "0.15"),
    ("finetune.batch_size", "32"),
    ("finetune.epochs", "3"),
    ("finetune.lr", "1e-5"),
    ("finetune.optimizer", "momentum"),
    ("finetune.head", "sequence"),
    ("finetune.pooling", "class_marker"),
    ("finetune.classes", "2"),
    ("miner.levenshtein_min", "100"),
    ("miner.late_years", "1.5"),
    ("miner.late_min_score", "2"),
    ("miner.keyword_min_score", "1"),
    ("miner.edit_min_score", "1"),
    ("miner.keywords", "deprecated,outdated,obsolete,out of date"),
    (
        "miner.reference_phrases",
        "'s answers,answer by,accepted answer,other answer",
    ),
    ("miner.annotation_size", "1000"),
    ("metrics.mode", "inverse_frequency"),
    ("metrics.unnormalized", "false"),
    ("cost.rate_per_hour", "1.0"),
    ("cost.perf_ratio", "1.8"),
    ("cost.gpu_hours", "2880"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl ConfigError {
    fn new(key: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError {
            key: key.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

impl std::error::Error for ConfigError {}

/// String values keyed by `section.key`, before typing.
#[derive(Debug, Clone)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl Default for RawConfig {
    fn default() -> Self {
        RawConfig {
            values: SCHEMA
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

fn known(key: &str) -> bool {
    SCHEMA.iter().any(|(k, _)| *k == key)
}

impl RawConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("config", format!("{}: {e}", path.display())))?;
        let mut cfg = RawConfig::default();
        cfg.merge_text(&text)?;
        Ok(cfg)
    }

    pub fn merge_text(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut section: Option<String> = None;
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| {
                        ConfigError::new(format!("line {lineno}"), "unterminated section header")
                    })?
                    .trim();
                if !SCHEMA
                    .iter()
                    .any(|(k, _)| k.split('.').next() == Some(name))
                {
                    return Err(ConfigError::new(
                        name,
                        format!("unknown section (line {lineno})"),
                    ));
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                ConfigError::new(format!("line {lineno}"), "expected `key = value`")
            })?;
            let sec = section.as_deref().ok_or_else(|| {
                ConfigError::new(k.trim(), format!("key outside any section (line {lineno})"))
            })?;
            let key = format!("{sec}.{}", k.trim());
            if !known(&key) {
                return Err(ConfigError::new(
                    key,
                    format!("unknown key (line {lineno})"),
                ));
            }
            if let Some(first) = seen.insert(key.clone(), lineno) {
                return Err(ConfigError::new(
                    key,
                    format!("set twice (lines {first} and {lineno})"),
                ));
            }
            self.values.insert(key, v.trim().to_string());
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<(), ConfigError> {
        if !known(key) {
            return Err(ConfigError::new(key, "unknown key"));
        }
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    /// Applies a `section.key=value` assignment.
    pub fn set_assignment(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| ConfigError::new(assignment, "expected section.key=value"))?;
        self.set(k.trim(), v.trim())
    }

    fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("{key} is not in the schema"))
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T, ConfigError> {
        let v = self.raw(key);
        v.parse()
            .map_err(|_| ConfigError::new(key, format!("cannot parse `{v}`")))
    }

    fn int<T>(&self, key: &str, lo: T, hi: T) -> Result<T, ConfigError>
    where
        T: FromStr + PartialOrd + fmt::Display + Copy,
    {
        let v: T = self.parse(key)?;
        if v < lo || v > hi {
            return Err(ConfigError::new(key, format!("{v} outside [{lo}, {hi}]")));
        }
        Ok(v)
    }

    /// `lo` is exclusive when `open_lo`.
    fn float(&self, key: &str, lo: f64, open_lo: bool, hi: f64) -> Result<f64, ConfigError> {
        let v: f64 = self.parse(key)?;
        let above = if open_lo { v > lo } else { v >= lo };
        if !(above && v <= hi) {
            let l = if open_lo { '(' } else { '[' };
            return Err(ConfigError::new(key, format!("{v} outside {l}{lo}, {hi}]")));
        }
        Ok(v)
    }

    fn boolean(&self, key: &str) -> Result<bool, ConfigError> {
        match self.raw(key).to_ascii_lowercase().as_str() {
            "true" | "yes" | "on" | "1" => Ok(true),
            "false" | "no" | "off" | "0" => Ok(false),
            other => Err(ConfigError::new(
                key,
                format!("expected a boolean, got `{other}`"),
            )),
        }
    }

    fn choice<'a>(&self, key: &str, options: &[&'a str]) -> Result<&'a str, ConfigError> {
        let v = self.raw(key);
        options.iter().find(|o| **o == v).copied().ok_or_else(|| {
            ConfigError::new(key, format!("`{v}` is not one of {}", options.join(", ")))
        })
    }

    fn list(&self, key: &str) -> Result<Vec<String>, ConfigError> {
        let items: Vec<String> = self
            .raw(key)
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        if items.is_empty() {
            return Err(ConfigError::new(key, "list is empty"));
        }
        Ok(items)
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.raw(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn build(&self) -> Result<PipelineConfig, ConfigError> {
        PipelineConfig::from_raw(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    pub posts: Option<PathBuf>,
    pub comments: Option<PathBuf>,
    pub history: Option<PathBuf>,
    pub store: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub shard: Option<PathBuf>,
    pub stats: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub loss_trace: Option<PathBuf>,
    pub finetune_train: Option<PathBuf>,
    pub finetune_eval: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub candidates: Option<PathBuf>,
    pub annotation_sample: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerSettings {
    pub vocab_size: usize,
    pub sample_fraction: f64,
    pub split_digits: bool,
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSettings {
    pub max_len: usize,
    pub bucket_edges: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSettings {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub tied: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchSettings {
    pub target_tokens: u64,
    pub micro_batch: usize,
    pub steps: usize,
    pub optimizer: OptimizerConfig,
    pub mask_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadChoice {
    Sequence,
    Token,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneSettings {
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub head: HeadChoice,
    pub pooling: Pooling,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Root seed; every stage seed is derived from it.
    pub seed: u64,
    pub paths: Paths,
    pub filter: AnswerFilter,
    pub cleaning: CleanOptions,
    pub tokenizer: TokenizerSettings,
    pub sequence: SequenceSettings,
    pub model: ModelSettings,
    pub batch: BatchSettings,
    pub finetune: FinetuneSettings,
    pub miner: MinerConfig,
    pub annotation_size: usize,
    pub metric_mode: WeightMode,
    pub unnormalized_accuracy: bool,
    pub cost: CostModel,
    pub gpu_hours: f64,
}

fn optimizer(raw: &RawConfig, section: &str, lr: f64) -> Result<OptimizerConfig, ConfigError> {
    let key = format!("{section}.optimizer");
    Ok(match raw.choice(&key, &["momentum", "adam"])? {
        "momentum" => OptimizerConfig::momentum(lr),
        _ => OptimizerConfig::adam(lr),
    })
}

impl PipelineConfig {
    fn from_raw(raw: &RawConfig) -> Result<Self, ConfigError> {
        let p = |k: &str| raw.path(&format!("paths.{k}"));
        let paths = Paths {
            posts: p("posts"),
            comments: p("comments"),
            history: p("history"),
            store: p("store"),
            corpus: p("corpus"),
            vocab: p("vocab"),
            shard: p("shard"),
            stats: p("stats"),
            checkpoint: p("checkpoint"),
            loss_trace: p("loss_trace"),
            finetune_train: p("finetune_train"),
            finetune_eval: p("finetune_eval"),
            predictions: p("predictions"),
            report: p("report"),
            candidates: p("candidates"),
            annotation_sample: p("annotation_sample"),
            annotations: p("annotations"),
        };

        let bucket_edges = raw
            .list("sequence.bucket_edges")?
            .iter()
            .map(|s| s.parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| {
                ConfigError::new("sequence.bucket_edges", "expected comma-separated integers")
            })?;
        if bucket_edges.windows(2).any(|w| w[0] >= w[1]) || bucket_edges[0] == 0 {
            return Err(ConfigError::new(
                "sequence.bucket_edges",
                "edges must be positive and strictly increasing",
            ));
        }

        let hidden = raw.int("model.hidden", 1usize, 65_536)?;
        let heads = raw.int("model.heads", 1usize, 1024)?;
        if hidden % heads != 0 {
            return Err(ConfigError::new(
                "model.heads",
                format!("{heads} does not divide hidden {hidden}"),
            ));
        }
        let model = ModelSettings {
            layers: raw.int("model.layers", 0usize, 256)?,
            hidden,
            heads,
            ffn_mult: raw.int("model.ffn_mult", 1usize, 16)?,
            tied: raw.boolean("model.tied")?,
        };

        let mut pre_opt = optimizer(raw, "batch", raw.float("batch.lr", 0.0, true, 10.0)?)?;
        pre_opt.warmup_steps = raw.int("batch.warmup_steps", 0usize, 10_000_000)?;
        let clip = raw.float("batch.grad_clip", 0.0, false, 1e6)?;
        pre_opt.grad_clip = (clip > 0.0).then_some(clip);
        let batch = BatchSettings {
            target_tokens: raw.int("batch.target_tokens", 1u64, 1_000_000_000_000)?,
            micro_batch: raw.int("batch.micro_batch", 1usize, 65_536)?,
            steps: raw.int("batch.steps", 0usize, 10_000_000)?,
            optimizer: pre_opt,
            mask_rate: raw.float("batch.mask_rate", 0.0, true, 0.99)?,
        };

        let finetune = FinetuneSettings {
            batch_size: raw.int("finetune.batch_size", 1usize, 65_536)?,
            epochs: raw.int("finetune.epochs", 1usize, 100_000)?,
            optimizer: optimizer(raw, "finetune", raw.float("finetune.lr", 0.0, true, 10.0)?)?,
            head: match raw.choice("finetune.head", &["sequence", "token"])? {
                "sequence" => HeadChoice::Sequence,
                _ => HeadChoice::Token,
            },
            pooling: match raw.choice("finetune.pooling", &["class_marker", "mean"])? {
                "class_marker" => Pooling::ClassMarker,
                _ => Pooling::Mean,
            },
            classes: raw.int("finetune.classes", 2usize, 10_000)?,
        };

        let late_years = raw.float("miner.late_years", 0.0, false, 100.0)?;
        let miner = MinerConfig {
            keywords: raw.list("miner.keywords")?,
            reference_phrases: raw.list("miner.reference_phrases")?,
            keyword_min_score: raw.int("miner.keyword_min_score", -1_000_000i64, 1_000_000)?,
            edit_min_score: raw.int("miner.edit_min_score", -1_000_000i64, 1_000_000)?,
            late_min_score: raw.int("miner.late_min_score", -1_000_000i64, 1_000_000)?,
            min_code_distance: raw.int("miner.levenshtein_min", 0usize, 10_000_000)?,
            late_after_ms: (late_years * MS_PER_YEAR).round() as i64,
        };

        let batch_tokens = batch.target_tokens;
        Ok(PipelineConfig {
            seed: raw.parse("run.seed")?,
            paths,
            filter: AnswerFilter {
                min_score: raw.int("filter.min_score", -1_000_000i64, 1_000_000)?,
                min_comments: raw.int("filter.min_comments", 1usize, 1_000_000)?,
            },
            cleaning: CleanOptions {
                abstract_identifiers: raw.boolean("cleaning.abstract_identifiers")?,
                keep_code: raw.boolean("cleaning.keep_code")?,
            },
            tokenizer: TokenizerSettings {
                vocab_size: raw.int("tokenizer.vocab_size", MIN_VOCAB_SIZE, 1_000_000)?,
                sample_fraction: raw.float("tokenizer.sample_fraction", 0.0, true, 1.0)?,
                split_digits: raw.boolean("tokenizer.split_digits")?,
                threads: raw.int("tokenizer.threads", 0usize, 1024)?,
            },
            sequence: SequenceSettings {
                max_len: raw.int("sequence.max_len", 1usize, 65_536)?,
                bucket_edges,
            },
            model,
            batch,
            finetune,
            miner,
            annotation_size: raw.int("miner.annotation_size", 3usize, 10_000_000)?,
            metric_mode: match raw.choice(
                "metrics.mode",
                &["inverse_frequency", "balanced", "uniform"],
            )? {
                "inverse_frequency" => WeightMode::InverseFrequency,
                "balanced" => WeightMode::Balanced,
                _ => WeightMode::Uniform,
            },
            unnormalized_accuracy: raw.boolean("metrics.unnormalized")?,
            cost: CostModel {
                rate_per_hour: raw.float("cost.rate_per_hour", 0.0, false, 1e6)?,
                perf_ratio: raw.float("cost.perf_ratio", 0.0, true, 1e3)?,
                batch_tokens,
            },
            gpu_hours: raw.float("cost.gpu_hours", 0.0, false, 1e9)?,
        })
    }
}

/// Stage seeds, so that stages draw independent streams from one root.
#[derive(Debug, Clone, Copy)]
pub enum Stage {
    Tokenizer = 1,
    Model = 2,
    Pretrain = 3,
    Finetune = 4,
    Annotation = 5,
}

pub fn stage_seed(root: u64, stage: Stage) -> u64 {
    // splitmix64 finalizer
    let mut z = root.wrapping_add((stage as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use sotk_core::miner::LATE_AFTER_MS;

    fn parsed(text: &str) -> Result<PipelineConfig, ConfigError> {
        let mut raw = RawConfig::default();
        raw.merge_text(text)?;
        raw.build()
    }

    #[test]
    fn defaults() {
        let c = RawConfig::default().build().unwrap();
        assert_eq!(c.filter, AnswerFilter::default());
        assert_eq!(c.tokenizer.vocab_size, 50_000);
        assert_eq!(c.tokenizer.sample_fraction, 0.10);
        assert_eq!(c.sequence.max_len, 2048);
        assert_eq!(c.sequence.bucket_edges, vec![512, 1024, 2048]);
        assert_eq!(c.batch.target_tokens, 500_000);
        assert_eq!(c.miner, MinerConfig::default());
        assert_eq!(c.miner.late_after_ms, LATE_AFTER_MS);
        assert_eq!(c.finetune.batch_size, 32);
        assert_eq!(c.finetune.optimizer.lr, 1e-5);
        assert_eq!(c.metric_mode, WeightMode::InverseFrequency);
        assert!(c.paths.posts.is_none());
    }

    #[test]
    fn file_values() {
        let c = parsed(
            "# test\n[run]\nseed = 7\n\n[paths]\nposts = /d/Posts.xml\n[miner]\nkeywords = legacy, no longer works\n",
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.paths.posts.as_deref(), Some(Path::new("/d/Posts.xml")));
        assert_eq!(c.miner.keywords, vec!["legacy", "no longer works"]);
    }

    #[test]
    fn unknown_keys_and_sections() {
        assert_eq!(
            parsed("[filter]\nmin_votes = 1\n").unwrap_err().key,
            "filter.min_votes"
        );
        assert_eq!(parsed("[filters]\n").unwrap_err().key, "filters");
        assert_eq!(parsed("seed = 1\n").unwrap_err().key, "seed");
        assert_eq!(
            parsed("[run]\nseed = 1\nseed = 2\n").unwrap_err().key,
            "run.seed"
        );
        assert!(parsed("[run]\nnonsense\n").is_err());
    }

    #[test]
    fn every_out_of_bounds_value_names_its_key() {
        let cases = [
            ("filter", "min_comments", "0"),
            ("tokenizer", "vocab_size", "100"),
            ("tokenizer", "sample_fraction", "0"),
            ("tokenizer", "sample_fraction", "1.5"),
            ("tokenizer", "threads", "-1"),
            ("sequence", "max_len", "0"),
            ("sequence", "bucket_edges", "512,512"),
            ("sequence", "bucket_edges", "a,b"),
            ("model", "heads", "5"),
            ("model", "layers", "1000"),
            ("model", "tied", "maybe"),
            ("batch", "target_tokens", "0"),
            ("batch", "micro_batch", "0"),
            ("batch", "lr", "0"),
            ("batch", "optimizer", "sgd"),
            ("batch", "mask_rate", "1"),
            ("batch", "grad_clip", "-1"),
            ("finetune", "classes", "1"),
            ("finetune", "head", "span"),
            ("miner", "levenshtein_min", "-5"),
            ("miner", "late_years", "-1"),
            ("miner", "keywords", " , "),
            ("miner", "annotation_size", "2"),
            ("metrics", "mode", "macro"),
            ("cost", "perf_ratio", "0"),
            ("cost", "gpu_hours", "nan"),
            ("run", "seed", "-1"),
        ];
        for (sec, key, value) in cases {
            let err = parsed(&format!("[{sec}]\n{key} = {value}\n")).unwrap_err();
            assert_eq!(err.key, format!("{sec}.{key}"), "{sec}.{key}={value}");
        }
    }

    #[test]
    fn flags_override_file() {
        let mut raw = RawConfig::default();
        raw.merge_text("[model]\nlayers = 3\n").unwrap();
        raw.set_assignment("model.layers=5").unwrap();
        assert_eq!(raw.build().unwrap().model.layers, 5);
        assert_eq!(
            raw.set_assignment("model.depth=5").unwrap_err().key,
            "model.depth"
        );
    }

    #[test]
    fn late_years_to_ms() {
        let c = parsed("[miner]\nlate_years = 1\n").unwrap();
        assert_eq!(c.miner.late_after_ms, 365 * 86_400_000);
    }

    #[test]
    fn stage_seeds_differ() {
        let s: Vec<u64> = [
            Stage::Tokenizer,
            Stage::Model,
            Stage::Pretrain,
            Stage::Finetune,
            Stage::Annotation,
        ]
        .into_iter()
        .map(|st| stage_seed(0, st))
        .collect();
        let mut d = s.clone();
        d.sort();
        d.dedup();
        assert_eq!(d.len(), s.len());
        assert_eq!(stage_seed(3, Stage::Model), stage_seed(3, Stage::Model));
        assert_ne!(stage_seed(3, Stage::Model), stage_seed(4, Stage::Model));
    }
}
