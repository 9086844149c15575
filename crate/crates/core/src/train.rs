//! Joint two-branch training with shared UNet and head weights.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExplicitSource, TrainConfig};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate, write_reports, EvalResult};
use crate::heads::Task;
use crate::model::{FrozenImage, Model, ModelConfig, PromptMode, Target, FROZEN_PREFIXES};
use crate::optim::{poly_lr, AdamW};
use crate::prompt::build_prompt;
use crate::synth::Sample;
use crate::tensor::{load_checkpoint, save_checkpoint, Float, Graph, Tensor, Var};

pub const LOSS_CSV: &str = "loss.csv";
pub const LOSS_HEADER: &str = "iter,lr,L_imp,L_exp,L_total";
pub const CONFIG_SNAPSHOT: &str = "config.txt";
pub const FINAL_CHECKPOINT: &str = "model.bin";

/// Losses of one joint step, averaged over the batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub l_imp: f64,
    pub l_exp: f64,
    pub l_total: f64,
}

/// One training sample as both branches see it.
#[derive(Clone, Copy, Debug)]
pub struct BatchItem<'a, T> {
    pub frozen: &'a FrozenImage<T>,
    /// Frozen text features for the explicit branch.
    pub text: Option<&'a Tensor<T>>,
    pub target: Target<'a>,
}

/// Graph nodes of the two batch-mean branch losses.
#[derive(Clone, Copy, Debug)]
pub struct BranchLosses {
    pub imp: Var,
    pub exp: Option<Var>,
    pub total: Var,
}

/// Builds both branches for a batch in one graph. The explicit branch runs
/// for items that carry text; `fixed_text` feeds the all-classes prompt mode.
pub fn branch_losses<T: Float>(
    model: &Model<T>,
    g: &mut Graph<'_, T>,
    items: &[BatchItem<'_, T>],
    fixed_text: Option<&Tensor<T>>,
    si_lambda: f64,
) -> Result<BranchLosses> {
    if items.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let q_s = model.shared_queries(g)?;
    let mut imp = Vec::with_capacity(items.len());
    let mut exp = Vec::new();
    for item in items {
        let cond = model.main_condition(g, &item.frozen.patches, fixed_text, q_s)?;
        let z0 = g.constant(item.frozen.z0.clone());
        let (_, out) = model.decode(g, z0, cond)?;
        imp.push(model.task_loss(g, out, item.target, si_lambda)?);
        if let Some(text) = item.text {
            let cond = model.explicit_condition(g, text)?;
            let z0 = g.constant(item.frozen.z0.clone());
            let (_, out) = model.decode(g, z0, cond)?;
            exp.push(model.task_loss(g, out, item.target, si_lambda)?);
        }
    }
    let mean = |g: &mut Graph<'_, T>, terms: &[Var]| -> Result<Var> {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = g.add(acc, t)?;
        }
        Ok(g.scale(acc, 1.0 / terms.len() as f64))
    };
    let imp = mean(g, &imp)?;
    let exp = if exp.is_empty() { None } else { Some(mean(g, &exp)?) };
    let total = match exp {
        Some(e) => g.add(imp, e)?,
        None => imp,
    };
    Ok(BranchLosses { imp, exp, total })
}

/// Labels and frozen features of one training sample, both orientations.
struct Prepared {
    frozen: [FrozenImage<f32>; 2],
    mask: [Vec<u8>; 2],
    depth: [Vec<f32>; 2],
    prompt: String,
}

fn flip_rows<V: Copy>(data: &[V], w: usize) -> Vec<V> {
    data.chunks(w).flat_map(|row| row.iter().rev().copied()).collect()
}

/// Checkpoint bookkeeping beside the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Iterations completed.
    pub iter: usize,
    pub skipped_nonfinite: u64,
}

/// Outcome of [`Trainer::run`].
#[derive(Clone, Debug, PartialEq)]
pub enum RunStatus {
    /// Stopped early at the given iteration (nothing after it ran).
    Interrupted(usize),
    Finished,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model<f32>,
    pub opt: AdamW,
    /// Iterations completed.
    pub iter: usize,
    data: Vec<Prepared>,
    texts: HashMap<String, Tensor<f32>>,
    fixed_text: Option<Tensor<f32>>,
    /// Every pixel carries depth in the synthetic data.
    valid: Vec<bool>,
}

pub fn checkpoint_dir(out_dir: &Path, iter: usize) -> PathBuf {
    out_dir.join("checkpoints").join(format!("iter_{iter:06}"))
}

/// Latest checkpoint directory with all three files present.
pub fn latest_checkpoint(out_dir: &Path) -> Option<(usize, PathBuf)> {
    let entries = fs::read_dir(out_dir.join("checkpoints")).ok()?;
    entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let iter: usize = name.strip_prefix("iter_")?.parse().ok()?;
            let p = e.path();
            ["model.bin", "optim.bin", "state.json"].iter().all(|f| p.join(f).is_file()).then_some((iter, p))
        })
        .max_by_key(|(i, _)| *i)
}

impl Trainer {
    /// Opens the data, builds the model around the pretrained encoder and
    /// resumes from the latest checkpoint in `out_dir` when one exists.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let ds = Dataset::open(&cfg.data)?;
        let idx = ds.split(&cfg.train_split)?;
        if cfg.batch_size > idx.len() {
            return Err(Error::Config(format!("batch_size {} exceeds {} training samples", cfg.batch_size, idx.len())));
        }
        let mut mcfg = ModelConfig::new(cfg.task, ds.palette().len()).with_nq(cfg.nq);
        mcfg.prompt.adapter = cfg.adapter_kind;
        mcfg.prompt.position_embeddings = cfg.position_embeddings;
        mcfg.prompt_mode = cfg.prompt_mode;
        let mut model: Model<f32> = Model::new(mcfg, cfg.seed)?;
        let clip_params = model.store.iter().filter(|(_, p)| p.name.starts_with("clip.")).count();
        let loaded = load_checkpoint(&mut model.store, &cfg.encoder_checkpoint)?;
        if loaded != clip_params {
            return Err(Error::Checkpoint {
                path: cfg.encoder_checkpoint.clone(),
                detail: format!("holds {loaded} tensors, the dual encoder has {clip_params}"),
            });
        }
        let samples = idx.iter().map(|&i| ds.sample(i)).collect::<Result<Vec<Sample>>>()?;
        let width = samples[0].width;
        let mut data = Vec::with_capacity(samples.len());
        let mut texts = HashMap::new();
        for s in &samples {
            if s.width != width || s.height != samples[0].height {
                return Err(Error::Contract("training images must share one size".into()));
            }
            let prompt = match cfg.explicit_source {
                ExplicitSource::GroundTruthLabels => build_prompt(&s.classes, ds.palette()).text,
                ExplicitSource::GeneratedCaptions => s.caption.clone(),
            };
            if cfg.explicit_branch_enabled && !texts.contains_key(&prompt) {
                texts.insert(prompt.clone(), model.frozen_text(&prompt)?);
            }
            let flipped = s.image.flip_last();
            data.push(Prepared {
                frozen: [model.frozen_image(&s.image)?, model.frozen_image(&flipped)?],
                mask: [s.mask.clone(), flip_rows(&s.mask, width)],
                depth: [s.depth.clone(), flip_rows(&s.depth, width)],
                prompt,
            });
        }
        let fixed_text = match cfg.prompt_mode {
            PromptMode::UnalignedAllClasses => Some(model.frozen_text(&model.all_classes_prompt())?),
            PromptMode::Implicit => None,
        };
        let opt = AdamW::new(cfg.optimizer());
        let valid = vec![true; width * samples[0].height];
        let mut t = Trainer { cfg, model, opt, iter: 0, data, texts, fixed_text, valid };
        t.prepare_run_dir()?;
        Ok(t)
    }

    fn prepare_run_dir(&mut self) -> Result<()> {
        let out = self.cfg.out_dir.clone();
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let snap = out.join(CONFIG_SNAPSHOT);
        let text = self.cfg.to_kv();
        let csv = out.join(LOSS_CSV);
        let model_cfg = out.join("model.json");
        fs::write(&model_cfg, serde_json::to_string_pretty(&self.model.cfg)?).map_err(|e| Error::io(&model_cfg, e))?;
        if let Some((iter, dir)) = latest_checkpoint(&out) {
            let old = fs::read_to_string(&snap).unwrap_or_default();
            if old != text {
                return Err(Error::Config(format!("{} differs from the configuration being resumed", snap.display())));
            }
            load_checkpoint(&mut self.model.store, &dir.join("model.bin"))?;
            self.opt.load(&self.model.store, &dir.join("optim.bin"))?;
            let state: TrainState = serde_json::from_str(&fs::read_to_string(dir.join("state.json")).map_err(|e| Error::io(&dir, e))?)?;
            if state.iter != iter {
                return Err(Error::Checkpoint { path: dir, detail: format!("state says iteration {}", state.iter) });
            }
            self.opt.skipped_nonfinite = state.skipped_nonfinite;
            self.iter = iter;
            truncate_loss_csv(&csv, iter)?;
            log::info!("resumed from iteration {iter}");
        } else {
            fs::write(&snap, &text).map_err(|e| Error::io(&snap, e))?;
            fs::write(&csv, format!("{LOSS_HEADER}\n")).map_err(|e| Error::io(&csv, e))?;
        }
        Ok(())
    }

    /// Training-set positions and flip flags of iteration `iter`'s batch.
    pub fn batch_for(&self, iter: usize) -> Vec<(usize, bool)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ (iter as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let idx = sample_indices(&mut rng, self.data.len(), self.cfg.batch_size).into_vec();
        idx.into_iter()
            .map(|i| (i, self.cfg.hflip_augment && rng.random_bool(0.5)))
            .collect()
    }

    /// One optimizer step over `batch`.
    pub fn joint_step(&mut self, batch: &[(usize, bool)], lr: f64) -> Result<LossReport> {
        let items: Vec<BatchItem<'_, f32>> = batch
            .iter()
            .map(|&(i, flip)| {
                let p = &self.data[i];
                let f = flip as usize;
                let target = match self.cfg.task {
                    Task::Segmentation => Target::Segmentation(&p.mask[f]),
                    Task::Depth => Target::Depth { depth: &p.depth[f], valid: &self.valid },
                };
                let text = if self.cfg.explicit_branch_enabled { self.texts.get(&p.prompt) } else { None };
                BatchItem { frozen: &p.frozen[f], text, target }
            })
            .collect();
        let model = &self.model;
        let (report, grads) = {
            let mut g = Graph::with_store(&model.store);
            let l = branch_losses(model, &mut g, &items, self.fixed_text.as_ref(), self.cfg.si_lambda)?;
            let report = LossReport {
                l_imp: g.value(l.imp).item().f64(),
                l_exp: l.exp.map_or(0.0, |e| g.value(e).item().f64()),
                l_total: g.value(l.total).item().f64(),
            };
            (report, g.backward(l.total)?)
        };
        drop(items);
        self.model.store.zero_grads();
        grads.accumulate_into(&mut self.model.store);
        self.opt.step(&mut self.model.store, lr);
        Ok(report)
    }

    /// Runs the remaining iterations, stopping before `stop_at` when given.
    pub fn run(&mut self, stop_at: Option<usize>) -> Result<RunStatus> {
        let csv_path = self.cfg.out_dir.join(LOSS_CSV);
        let mut csv = OpenOptions::new().append(true).open(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        while self.iter < self.cfg.max_iters {
            if stop_at == Some(self.iter) {
                return Ok(RunStatus::Interrupted(self.iter));
            }
            let it = self.iter;
            let lr = poly_lr(it, self.cfg.max_iters, self.cfg.base_lr, self.cfg.poly_power)?;
            let batch = self.batch_for(it);
            let r = self.joint_step(&batch, lr)?;
            if !r.l_total.is_finite() {
                return Err(Error::NonFinite(format!("training loss at iteration {it}")));
            }
            writeln!(csv, "{it},{lr},{},{},{}", r.l_imp, r.l_exp, r.l_total).map_err(|e| Error::io(&csv_path, e))?;
            self.iter += 1;
            if it.is_multiple_of(100) {
                log::info!("iter {it} lr {lr:.3e} L_imp {:.4} L_exp {:.4}", r.l_imp, r.l_exp);
            }
            let every = self.cfg.checkpoint_every;
            if (every > 0 && self.iter.is_multiple_of(every)) || self.iter == self.cfg.max_iters {
                self.save_checkpoint()?;
            }
        }
        Ok(RunStatus::Finished)
    }

    pub fn save_checkpoint(&self) -> Result<PathBuf> {
        let dir = checkpoint_dir(&self.cfg.out_dir, self.iter);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        save_checkpoint(&self.model.store, &dir.join("model.bin"))?;
        self.opt.save(&self.model.store, &dir.join("optim.bin"))?;
        let state = TrainState { iter: self.iter, skipped_nonfinite: self.opt.skipped_nonfinite };
        let p = dir.join("state.json");
        fs::write(&p, serde_json::to_string_pretty(&state)?).map_err(|e| Error::io(&p, e))?;
        Ok(dir)
    }

    /// Writes the final weights and evaluates them on the eval split.
    pub fn finish(&self) -> Result<EvalResult> {
        let out = &self.cfg.out_dir;
        save_checkpoint(&self.model.store, &out.join(FINAL_CHECKPOINT))?;
        let ds = Dataset::open(&self.cfg.data)?;
        let result = evaluate(&self.model, &ds, &self.cfg.eval_split, &self.cfg.eval_options(), Some(&out.join("predictions")))?;
        write_reports(&result, out)?;
        Ok(result)
    }

    /// Parameters excluded from optimization, for inspection.
    pub fn frozen_prefixes() -> &'static [&'static str] {
        &FROZEN_PREFIXES
    }
}

/// Keeps the header and rows for iterations before `iter`.
fn truncate_loss_csv(path: &Path, iter: usize) -> Result<()> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let keep = n == 0 || line.split(',').next().and_then(|v| v.parse::<usize>().ok()).is_some_and(|i| i < iter);
        if keep {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Loads a model saved by [`Trainer::finish`]: `model.json` beside the
/// checkpoint describes its shape.
pub fn load_trained_model(checkpoint: &Path) -> Result<Model<f32>> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let cfg_path = [dir.join("model.json"), dir.join("../../model.json")]
        .into_iter()
        .find(|p| p.is_file())
        .ok_or_else(|| Error::Checkpoint { path: checkpoint.to_path_buf(), detail: "model.json not found beside it".into() })?;
    let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let cfg: ModelConfig = serde_json::from_str(&text)?;
    let mut model = Model::new(cfg, 0)?;
    let n = load_checkpoint(&mut model.store, checkpoint)?;
    if n != model.store.len() {
        return Err(Error::Checkpoint {
            path: checkpoint.to_path_buf(),
            detail: format!("holds {n} tensors, the model has {}", model.store.len()),
        });
    }
    Ok(model)
}
