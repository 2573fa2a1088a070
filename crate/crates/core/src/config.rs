//! Unified run configuration: task generation, model dimensions, the
//! two-stage training schedule, and decoding defaults, parsed from
//! `key = value` files with `#` comments. Unknown keys are rejected and
//! every run can echo its fully-resolved configuration.

use std::fmt::Write as _;
use std::path::Path as FsPath;

use crate::data::{TaskSpec, Transform};
use crate::error::{Error, Result};
use crate::lattice::PathConstraint;
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AlphaMode {
    Fixed,
    FromValidation,
}

impl std::fmt::Display for AlphaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AlphaMode::Fixed => write!(f, "fixed"),
            AlphaMode::FromValidation => write!(f, "from-validation"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Mle,
    Contrastive,
    Reward,
}

impl std::str::FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mle" => Ok(Objective::Mle),
            "contrastive" => Ok(Objective::Contrastive),
            "reward" => Ok(Objective::Reward),
            other => Err(Error::Config(format!("unknown objective '{other}'"))),
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Objective::Mle => write!(f, "mle"),
            Objective::Contrastive => write!(f, "contrastive"),
            Objective::Reward => write!(f, "reward"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Config {
    // task
    pub vocab_size: usize,
    pub src_len_min: usize,
    pub src_len_max: usize,
    pub transforms: Vec<Transform>,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    // model
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub lambda: usize,
    pub l_max: usize,
    pub max_src_len: usize,
    pub constraint: PathConstraint,
    // schedule
    pub stage1_steps: usize,
    pub stage2_epochs: usize,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub clip_norm: f64,
    pub max_tokens: usize,
    pub grad_accum: usize,
    pub glancing_start: f64,
    pub glancing_end: f64,
    /// 0 means "use stage1_steps".
    pub glancing_span: usize,
    pub eval_interval: usize,
    /// Validation examples used for interval metrics; 0 means all.
    pub eval_subset: usize,
    /// Samples per input for interval oracle-BLEU metrics.
    pub eval_k: usize,
    pub ckpt_keep: usize,
    // objective
    pub objective: Objective,
    pub cl_weight: f64,
    pub rl_weight: f64,
    pub epsilon_lb: f64,
    pub k: usize,
    pub keep_ratio: f64,
    pub alpha_mode: AlphaMode,
    pub alpha: f64,
    // decoding
    pub tau_train: f64,
    pub tau_infer: f64,
    pub top_p: f64,
    pub beta: f64,
    pub beta_grid: Vec<f64>,
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            vocab_size: 32,
            src_len_min: 6,
            src_len_max: 10,
            transforms: vec![Transform::IdentityCopy, Transform::Reverse],
            train_size: 10_000,
            valid_size: 500,
            test_size: 500,
            d: 64,
            layers: 2,
            heads: 2,
            lambda: 4,
            l_max: 96,
            max_src_len: 24,
            constraint: PathConstraint::Anchored,
            stage1_steps: 3000,
            stage2_epochs: 5,
            lr_stage1: 3e-3,
            lr_stage2: 1e-3,
            clip_norm: 1.0,
            max_tokens: 4000,
            grad_accum: 1,
            glancing_start: 0.5,
            glancing_end: 0.1,
            glancing_span: 0,
            eval_interval: 40,
            eval_subset: 128,
            eval_k: 16,
            ckpt_keep: 5,
            objective: Objective::Contrastive,
            cl_weight: 1.0,
            rl_weight: 1.0,
            epsilon_lb: 0.001,
            k: 128,
            keep_ratio: 0.25,
            alpha_mode: AlphaMode::FromValidation,
            alpha: f64::INFINITY,
            tau_train: 0.1,
            tau_infer: 0.05,
            top_p: 0.5,
            beta: 0.5,
            beta_grid: vec![0.3, 0.5, 0.7],
            seed: 0,
        }
    }
}

impl Config {
    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            vocab_size: self.vocab_size,
            src_len_min: self.src_len_min,
            src_len_max: self.src_len_max,
            transforms: self.transforms.clone(),
            train_size: self.train_size,
            valid_size: self.valid_size,
            test_size: self.test_size,
            seed: self.seed,
        }
    }

    pub fn model_config(&self, vocab: usize) -> ModelConfig {
        ModelConfig {
            d: self.d,
            layers: self.layers,
            heads: self.heads,
            lambda: self.lambda,
            l_max: self.l_max,
            vocab,
            max_src_len: self.max_src_len,
            constraint: self.constraint,
        }
    }

    /// Effective loss weights for the selected objective.
    pub fn loss_weights(&self) -> (f64, f64) {
        match self.objective {
            Objective::Mle => (0.0, 0.0),
            Objective::Contrastive => (self.cl_weight, 0.0),
            Objective::Reward => (0.0, self.rl_weight),
        }
    }

    pub fn glancing_span_effective(&self) -> usize {
        if self.glancing_span == 0 {
            self.stage1_steps
        } else {
            self.glancing_span
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value '{value}' for key '{key}'")))
        }
        match key {
            "vocab_size" => self.vocab_size = num(key, value)?,
            "src_len_min" => self.src_len_min = num(key, value)?,
            "src_len_max" => self.src_len_max = num(key, value)?,
            "transforms" => {
                self.transforms = value
                    .split(',')
                    .map(|s| s.trim().parse())
                    .collect::<Result<_>>()?;
            }
            "train_size" => self.train_size = num(key, value)?,
            "valid_size" => self.valid_size = num(key, value)?,
            "test_size" => self.test_size = num(key, value)?,
            "d" => self.d = num(key, value)?,
            "layers" => self.layers = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "l_max" => self.l_max = num(key, value)?,
            "max_src_len" => self.max_src_len = num(key, value)?,
            "constraint" => self.constraint = value.parse()?,
            "stage1_steps" => self.stage1_steps = num(key, value)?,
            "stage2_epochs" => self.stage2_epochs = num(key, value)?,
            "lr_stage1" => self.lr_stage1 = num(key, value)?,
            "lr_stage2" => self.lr_stage2 = num(key, value)?,
            "clip_norm" => self.clip_norm = num(key, value)?,
            "max_tokens" => self.max_tokens = num(key, value)?,
            "grad_accum" => self.grad_accum = num(key, value)?,
            "glancing_start" => self.glancing_start = num(key, value)?,
            "glancing_end" => self.glancing_end = num(key, value)?,
            "glancing_span" => self.glancing_span = num(key, value)?,
            "eval_interval" => self.eval_interval = num(key, value)?,
            "eval_subset" => self.eval_subset = num(key, value)?,
            "eval_k" => self.eval_k = num(key, value)?,
            "ckpt_keep" => self.ckpt_keep = num(key, value)?,
            "objective" => self.objective = value.parse()?,
            "cl_weight" => self.cl_weight = num(key, value)?,
            "rl_weight" => self.rl_weight = num(key, value)?,
            "epsilon_lb" => self.epsilon_lb = num(key, value)?,
            "k" => self.k = num(key, value)?,
            "keep_ratio" => self.keep_ratio = num(key, value)?,
            "alpha_mode" => {
                self.alpha_mode = match value {
                    "fixed" => AlphaMode::Fixed,
                    "from-validation" => AlphaMode::FromValidation,
                    other => {
                        return Err(Error::Config(format!("unknown alpha_mode '{other}'")))
                    }
                }
            }
            "alpha" => self.alpha = num(key, value)?,
            "tau_train" => self.tau_train = num(key, value)?,
            "tau_infer" => self.tau_infer = num(key, value)?,
            "top_p" => self.top_p = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "beta_grid" => {
                self.beta_grid = value
                    .split(',')
                    .map(|s| num("beta_grid", s.trim()))
                    .collect::<Result<_>>()?;
            }
            "seed" => self.seed = num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn parse_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: lineno + 1,
                msg: format!("expected 'key = value', got '{line}'"),
            })?;
            self.set(key.trim(), value.trim())?;
        }
        self.validate()
    }

    pub fn load(path: &FsPath) -> Result<Config> {
        let mut cfg = Config::default();
        cfg.parse_text(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return Err(Error::Config("keep_ratio must be in (0, 1]".into()));
        }
        if self.tau_train <= 0.0 || self.tau_infer <= 0.0 {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config("top_p must be in (0, 1]".into()));
        }
        if self.k == 0 || self.ckpt_keep == 0 || self.grad_accum == 0 {
            return Err(Error::Config("k, ckpt_keep, grad_accum must be >= 1".into()));
        }
        if self.epsilon_lb < 0.0 {
            return Err(Error::Config("epsilon_lb must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config("beta must be in [0, 1]".into()));
        }
        if self.stage2_epochs > 0 && self.stage1_steps == 0 {
            return Err(Error::Config("stage 2 requires a stage-1 warmup".into()));
        }
        Ok(())
    }

    /// Fully-resolved `key = value` rendering, stable order.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("vocab_size", self.vocab_size.to_string());
        put("src_len_min", self.src_len_min.to_string());
        put("src_len_max", self.src_len_max.to_string());
        put(
            "transforms",
            self.transforms
                .iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        put("train_size", self.train_size.to_string());
        put("valid_size", self.valid_size.to_string());
        put("test_size", self.test_size.to_string());
        put("d", self.d.to_string());
        put("layers", self.layers.to_string());
        put("heads", self.heads.to_string());
        put("lambda", self.lambda.to_string());
        put("l_max", self.l_max.to_string());
        put("max_src_len", self.max_src_len.to_string());
        put("constraint", self.constraint.to_string());
        put("stage1_steps", self.stage1_steps.to_string());
        put("stage2_epochs", self.stage2_epochs.to_string());
        put("lr_stage1", self.lr_stage1.to_string());
        put("lr_stage2", self.lr_stage2.to_string());
        put("clip_norm", self.clip_norm.to_string());
        put("max_tokens", self.max_tokens.to_string());
        put("grad_accum", self.grad_accum.to_string());
        put("glancing_start", self.glancing_start.to_string());
        put("glancing_end", self.glancing_end.to_string());
        put("glancing_span", self.glancing_span.to_string());
        put("eval_interval", self.eval_interval.to_string());
        put("eval_subset", self.eval_subset.to_string());
        put("eval_k", self.eval_k.to_string());
        put("ckpt_keep", self.ckpt_keep.to_string());
        put("objective", self.objective.to_string());
        put("cl_weight", self.cl_weight.to_string());
        put("rl_weight", self.rl_weight.to_string());
        put("epsilon_lb", self.epsilon_lb.to_string());
        put("k", self.k.to_string());
        put("keep_ratio", self.keep_ratio.to_string());
        put("alpha_mode", self.alpha_mode.to_string());
        put("alpha", self.alpha.to_string());
        put("tau_train", self.tau_train.to_string());
        put("tau_infer", self.tau_infer.to_string());
        put("top_p", self.top_p.to_string());
        put("beta", self.beta.to_string());
        put(
            "beta_grid",
            self.beta_grid
                .iter()
                .map(|b| b.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        put("seed", self.seed.to_string());
        out
    }
}
