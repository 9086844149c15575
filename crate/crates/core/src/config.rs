//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::heads::Task;
use crate::model::PromptMode;
use crate::optim::AdamWConfig;
use crate::prompt::AdapterKind;

/// Text the explicit branch is prompted with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExplicitSource {
    /// Class words of the ground-truth class set.
    GroundTruthLabels,
    /// The generator's caption of the scene.
    GeneratedCaptions,
}

/// Query counts the adapter supports.
pub const ALLOWED_NQ: [usize; 3] = [64, 128, 256];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub task: Task,
    pub base_lr: f64,
    pub poly_power: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_iters: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub nq: usize,
    pub position_embeddings: bool,
    pub adapter_kind: AdapterKind,
    pub explicit_source: ExplicitSource,
    pub explicit_branch_enabled: bool,
    pub prompt_mode: PromptMode,
    pub si_lambda: f64,
    pub hflip_augment: bool,
    pub data: PathBuf,
    pub encoder_checkpoint: PathBuf,
    pub out_dir: PathBuf,
    pub train_split: String,
    pub eval_split: String,
    /// Iterations between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub eval_crop: usize,
    pub eval_stride: usize,
    pub eval_hflip: bool,
    pub eval_two_scale: bool,
    /// Cap on evaluated samples; 0 evaluates the whole split.
    pub eval_max_samples: usize,
    pub visualize: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: Task::Segmentation,
            base_lr: 1e-3,
            poly_power: 0.9,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_iters: 2000,
            batch_size: 4,
            seed: 0,
            nq: 256,
            position_embeddings: true,
            adapter_kind: AdapterKind::LearnableQueries,
            explicit_source: ExplicitSource::GroundTruthLabels,
            explicit_branch_enabled: true,
            prompt_mode: PromptMode::Implicit,
            si_lambda: 0.5,
            hflip_augment: true,
            data: PathBuf::new(),
            encoder_checkpoint: PathBuf::new(),
            out_dir: PathBuf::new(),
            train_split: "train".into(),
            eval_split: "val".into(),
            checkpoint_every: 500,
            eval_crop: 64,
            eval_stride: 43,
            eval_hflip: true,
            eval_two_scale: true,
            eval_max_samples: 0,
            visualize: 4,
        }
    }
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn parse_num<N: FromStr>(v: &str) -> std::result::Result<N, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?} as a number"))
}

fn task_name(t: Task) -> &'static str {
    match t {
        Task::Segmentation => "segmentation",
        Task::Depth => "depth",
    }
}

fn adapter_name(a: AdapterKind) -> &'static str {
    match a {
        AdapterKind::LearnableQueries => "learnable_queries",
        AdapterKind::MlpOnly => "mlp_only",
    }
}

fn source_name(s: ExplicitSource) -> &'static str {
    match s {
        ExplicitSource::GroundTruthLabels => "ground_truth_labels",
        ExplicitSource::GeneratedCaptions => "generated_captions",
    }
}

fn mode_name(m: PromptMode) -> &'static str {
    match m {
        PromptMode::Implicit => "implicit",
        PromptMode::UnalignedAllClasses => "unaligned_all_classes",
    }
}

impl TrainConfig {
    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "task" => {
                self.task = match v {
                    "segmentation" => Task::Segmentation,
                    "depth" => Task::Depth,
                    _ => return Err(format!("unknown task {v:?}")),
                }
            }
            "base_lr" => self.base_lr = parse_num(v)?,
            "poly_power" => self.poly_power = parse_num(v)?,
            "weight_decay" => self.weight_decay = parse_num(v)?,
            "beta1" => self.beta1 = parse_num(v)?,
            "beta2" => self.beta2 = parse_num(v)?,
            "eps" => self.eps = parse_num(v)?,
            "max_iters" => self.max_iters = parse_num(v)?,
            "batch_size" => self.batch_size = parse_num(v)?,
            "seed" => self.seed = parse_num(v)?,
            "nq" => self.nq = parse_num(v)?,
            "position_embeddings" => self.position_embeddings = parse_bool(v)?,
            "adapter_kind" => {
                self.adapter_kind = match v {
                    "learnable_queries" => AdapterKind::LearnableQueries,
                    "mlp_only" => AdapterKind::MlpOnly,
                    _ => return Err(format!("unknown adapter kind {v:?}")),
                }
            }
            "explicit_source" => {
                self.explicit_source = match v {
                    "ground_truth_labels" => ExplicitSource::GroundTruthLabels,
                    "generated_captions" => ExplicitSource::GeneratedCaptions,
                    _ => return Err(format!("unknown explicit source {v:?}")),
                }
            }
            "explicit_branch_enabled" => self.explicit_branch_enabled = parse_bool(v)?,
            "prompt_mode" => {
                self.prompt_mode = match v {
                    "implicit" => PromptMode::Implicit,
                    "unaligned_all_classes" => PromptMode::UnalignedAllClasses,
                    _ => return Err(format!("unknown prompt mode {v:?}")),
                }
            }
            "si_lambda" => self.si_lambda = parse_num(v)?,
            "hflip_augment" => self.hflip_augment = parse_bool(v)?,
            "data" => self.data = PathBuf::from(v),
            "encoder_checkpoint" => self.encoder_checkpoint = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "train_split" => self.train_split = v.to_string(),
            "eval_split" => self.eval_split = v.to_string(),
            "checkpoint_every" => self.checkpoint_every = parse_num(v)?,
            "eval_crop" => self.eval_crop = parse_num(v)?,
            "eval_stride" => self.eval_stride = parse_num(v)?,
            "eval_hflip" => self.eval_hflip = parse_bool(v)?,
            "eval_two_scale" => self.eval_two_scale = parse_bool(v)?,
            "eval_max_samples" => self.eval_max_samples = parse_num(v)?,
            "visualize" => self.visualize = parse_num(v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Parses `key = value` lines (`#` starts a comment), applies the
    /// overrides on top, then validates. Every problem is reported at once.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut problems = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                problems.push(format!("line {}: expected key = value, got {line:?}", n + 1));
                continue;
            };
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                problems.push(format!("line {}: duplicate key {k:?}", n + 1));
                continue;
            }
            if let Err(e) = cfg.set(k, v) {
                problems.push(format!("line {}: {e}", n + 1));
            }
        }
        for (k, v) in overrides {
            if let Err(e) = cfg.set(k, v) {
                problems.push(format!("override {k}: {e}"));
            }
        }
        problems.extend(cfg.problems());
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(problems.join("\n")))
        }
    }

    pub fn from_file(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, overrides)
    }

    /// Every validation failure, empty when the config is usable.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        let mut need = |ok: bool, msg: &str| {
            if !ok {
                p.push(msg.to_string());
            }
        };
        need(self.base_lr.is_finite() && self.base_lr > 0.0, "base_lr must be positive");
        need(self.poly_power.is_finite() && self.poly_power > 0.0, "poly_power must be positive");
        need(self.weight_decay.is_finite() && self.weight_decay >= 0.0, "weight_decay must be non-negative");
        need((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2), "betas must lie in [0, 1)");
        need(self.eps.is_finite() && self.eps > 0.0, "eps must be positive");
        need(self.max_iters > 0, "max_iters must be positive");
        need(self.batch_size > 0, "batch_size must be positive");
        need(ALLOWED_NQ.contains(&self.nq), "nq must be one of 64, 128, 256");
        need(self.si_lambda.is_finite() && (0.0..=1.0).contains(&self.si_lambda), "si_lambda must lie in [0, 1]");
        need(!self.data.as_os_str().is_empty(), "data is required");
        need(!self.encoder_checkpoint.as_os_str().is_empty(), "encoder_checkpoint is required");
        need(!self.out_dir.as_os_str().is_empty(), "out_dir is required");
        need(self.eval_crop > 0 && self.eval_stride > 0 && self.eval_stride <= self.eval_crop, "need 0 < eval_stride ≤ eval_crop");
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("\n")))
        }
    }

    /// Effective configuration in the same `key = value` format, every key
    /// present.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("task", task_name(self.task).into());
        put("base_lr", self.base_lr.to_string());
        put("poly_power", self.poly_power.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("beta1", self.beta1.to_string());
        put("beta2", self.beta2.to_string());
        put("eps", self.eps.to_string());
        put("max_iters", self.max_iters.to_string());
        put("batch_size", self.batch_size.to_string());
        put("seed", self.seed.to_string());
        put("nq", self.nq.to_string());
        put("position_embeddings", self.position_embeddings.to_string());
        put("adapter_kind", adapter_name(self.adapter_kind).into());
        put("explicit_source", source_name(self.explicit_source).into());
        put("explicit_branch_enabled", self.explicit_branch_enabled.to_string());
        put("prompt_mode", mode_name(self.prompt_mode).into());
        put("si_lambda", self.si_lambda.to_string());
        put("hflip_augment", self.hflip_augment.to_string());
        put("data", self.data.display().to_string());
        put("encoder_checkpoint", self.encoder_checkpoint.display().to_string());
        put("out_dir", self.out_dir.display().to_string());
        put("train_split", self.train_split.clone());
        put("eval_split", self.eval_split.clone());
        put("checkpoint_every", self.checkpoint_every.to_string());
        put("eval_crop", self.eval_crop.to_string());
        put("eval_stride", self.eval_stride.to_string());
        put("eval_hflip", self.eval_hflip.to_string());
        put("eval_two_scale", self.eval_two_scale.to_string());
        put("eval_max_samples", self.eval_max_samples.to_string());
        put("visualize", self.visualize.to_string());
        s
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            crop: self.eval_crop,
            stride: self.eval_stride,
            hflip: self.eval_hflip,
            two_scale: self.eval_two_scale,
            max_samples: (self.eval_max_samples > 0).then_some(self.eval_max_samples),
            visualize: self.visualize,
        }
    }
}
