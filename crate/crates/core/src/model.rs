//! The perception model: frozen encoders, prompt modules, UNet and task head
//! in one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{DualEncoder, DualEncoderConfig, LatentEncoder, Vocabulary};
use crate::error::{Error, Result};
use crate::heads::{scale_invariant_loss, segmentation_loss, DepthHead, SegHead, Task};
use crate::prompt::{build_prompt, AdapterKind, ExplicitPromptModule, ImplicitPromptModule, PromptConfig};
use crate::synth::Palette;
use crate::tensor::{Float, Graph, ParamStore, Tensor, Var};
use crate::unet::{FeatureBundle, UNet, UNetConfig};

/// Parameter-name prefixes excluded from optimization.
pub const FROZEN_PREFIXES: [&str; 2] = ["latent.", "clip."];

/// Where the conditioning used by the main (inference) stream comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// Implicit prompts from the image through the adapter.
    Implicit,
    /// One fixed prompt naming every class, identical for all images.
    UnalignedAllClasses,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub task: Task,
    pub num_classes: usize,
    pub clip: DualEncoderConfig,
    pub prompt: PromptConfig,
    pub unet: UNetConfig,
    pub prompt_mode: PromptMode,
    pub fpn_width: usize,
    /// Depth the depth head predicts at initialization.
    pub init_depth: f64,
}

impl ModelConfig {
    pub fn new(task: Task, num_classes: usize) -> Self {
        let clip = DualEncoderConfig::default();
        let prompt = PromptConfig { d_text: clip.width, patches: clip.patches(), ..Default::default() };
        let unet = UNetConfig { d_cond: prompt.d_cond, nq: prompt.nq, ..Default::default() };
        ModelConfig {
            task,
            num_classes,
            clip,
            prompt,
            unet,
            prompt_mode: PromptMode::Implicit,
            fpn_width: 32,
            init_depth: 5.0,
        }
    }

    pub fn with_nq(mut self, nq: usize) -> Self {
        self.prompt.nq = nq;
        self.unet.nq = nq;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        if self.prompt.nq != self.unet.nq || self.prompt.d_cond != self.unet.d_cond {
            return Err(Error::Config("prompt and UNet conditioning shapes disagree".into()));
        }
        if self.prompt.d_text != self.clip.width || self.prompt.patches != self.clip.patches() {
            return Err(Error::Config("prompt adapter and image tower shapes disagree".into()));
        }
        if self.prompt.nq == 0 || self.num_classes < 2 {
            return Err(Error::Config("need at least one query and two classes".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum TaskHead {
    Segmentation(SegHead),
    Depth(DepthHead),
}

/// Frozen-encoder outputs for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenImage<T> {
    /// `[C_lat, H/8, W/8]`
    pub z0: Tensor<T>,
    /// `[Np, D]`
    pub patches: Tensor<T>,
}

/// Supervision for one sample.
#[derive(Clone, Copy, Debug)]
pub enum Target<'a> {
    Segmentation(&'a [u8]),
    Depth { depth: &'a [f32], valid: &'a [bool] },
}

#[derive(Clone, Debug)]
pub struct Model<T: Float> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub vocab: Vocabulary,
    pub palette: Palette,
    pub latent: LatentEncoder,
    pub clip: DualEncoder,
    pub implicit: ImplicitPromptModule,
    pub explicit: ExplicitPromptModule,
    pub unet: UNet,
    pub head: TaskHead,
}

impl<T: Float> Model<T> {
    /// Builds every component with seeded random weights and freezes the
    /// encoders.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let palette = Palette::new(cfg.num_classes)?;
        let vocab = Vocabulary::synthetic();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let latent = LatentEncoder::new(&mut store, "latent")?;
        let clip = DualEncoder::new(&mut store, "clip", cfg.clip, vocab.len(), &mut ChaCha8Rng::seed_from_u64(seed ^ 0xC11F))?;
        let implicit = ImplicitPromptModule::new(&mut store, "prompt", cfg.prompt, &mut rng)?;
        let explicit = ExplicitPromptModule::new(&mut store, "text_proj", &cfg.prompt, &mut rng)?;
        let unet = UNet::new(&mut store, "unet", cfg.unet.clone(), &mut rng)?;
        let extra = cfg.unet.nq;
        let head = match cfg.task {
            Task::Segmentation => TaskHead::Segmentation(SegHead::new(
                &mut store,
                "head",
                cfg.unet.channels,
                extra,
                cfg.fpn_width,
                cfg.num_classes,
                &mut rng,
            )?),
            Task::Depth => TaskHead::Depth(DepthHead::new(
                &mut store,
                "head",
                cfg.unet.channels,
                extra,
                cfg.fpn_width,
                cfg.init_depth,
                &mut rng,
            )?),
        };
        for p in FROZEN_PREFIXES {
            store.freeze_prefix(p);
        }
        Ok(Model { cfg, store, vocab, palette, latent, clip, implicit, explicit, unet, head })
    }

    pub fn frozen_image(&self, image: &Tensor<T>) -> Result<FrozenImage<T>> {
        Ok(FrozenImage {
            z0: self.latent.encode(&self.store, image)?,
            patches: self.clip.encode_image(&self.store, image)?.patches,
        })
    }

    /// Real-token features `[Lt, D]` of a prompt from the frozen text tower.
    pub fn frozen_text(&self, prompt: &str) -> Result<Tensor<T>> {
        Ok(self.clip.encode_text(&self.store, &self.vocab, prompt)?.features)
    }

    /// The prompt naming every palette class.
    pub fn all_classes_prompt(&self) -> String {
        let ids: Vec<u8> = (0..self.palette.len() as u8).collect();
        build_prompt(&ids, &self.palette).text
    }

    /// Conditioning of the main stream for one image. `q_s` may carry the
    /// query self-attention output shared across a batch.
    pub fn main_condition(
        &self,
        g: &mut Graph<'_, T>,
        patches: &Tensor<T>,
        fixed_text: Option<&Tensor<T>>,
        q_s: Option<Var>,
    ) -> Result<Var> {
        let cond = match self.cfg.prompt_mode {
            PromptMode::Implicit => {
                let p = g.constant(patches.clone());
                self.implicit.forward(g, p, q_s)?.out
            }
            PromptMode::UnalignedAllClasses => {
                let text = fixed_text.ok_or_else(|| Error::Contract("fixed prompt features missing".into()))?;
                let t = g.constant(text.clone());
                self.explicit.forward(g, t)?
            }
        };
        self.check_condition(g, cond)?;
        Ok(cond)
    }

    /// Shared query self-attention, when the main stream uses it.
    pub fn shared_queries(&self, g: &mut Graph<'_, T>) -> Result<Option<Var>> {
        match (self.cfg.prompt_mode, self.cfg.prompt.adapter) {
            (PromptMode::Implicit, AdapterKind::LearnableQueries) => Ok(Some(self.implicit.self_attend(g)?)),
            _ => Ok(None),
        }
    }

    pub fn explicit_condition(&self, g: &mut Graph<'_, T>, text_features: &Tensor<T>) -> Result<Var> {
        let t = g.constant(text_features.clone());
        let cond = self.explicit.forward(g, t)?;
        self.check_condition(g, cond)?;
        Ok(cond)
    }

    fn check_condition(&self, g: &Graph<'_, T>, cond: Var) -> Result<()> {
        let want = [self.cfg.prompt.nq, self.cfg.prompt.d_cond];
        if g.shape(cond) != want {
            return Err(Error::shape("prompt", format!("stream emitted {:?}, expected {want:?}", g.shape(cond))));
        }
        Ok(())
    }

    /// UNet features and head output for latent `z0` under `cond`.
    pub fn decode(&self, g: &mut Graph<'_, T>, z0: Var, cond: Var) -> Result<(FeatureBundle, Var)> {
        let zs = g.shape(z0).to_vec();
        let (h, w) = (zs[1] * 8, zs[2] * 8);
        let f = self.unet.forward(g, z0, cond, 0)?;
        let out = match &self.head {
            TaskHead::Segmentation(s) => s.forward(g, &f, h, w)?,
            TaskHead::Depth(d) => d.forward(g, &f, h, w)?,
        };
        Ok((f, out))
    }

    pub fn task_loss(&self, g: &mut Graph<'_, T>, out: Var, target: Target<'_>, si_lambda: f64) -> Result<Var> {
        match target {
            Target::Segmentation(mask) => segmentation_loss(g, out, mask),
            Target::Depth { depth, valid } => scale_invariant_loss(g, out, depth, valid, si_lambda),
        }
    }

    /// Inference through the main stream only: logits `[classes, H, W]` or
    /// depth `[1, H, W]`.
    pub fn predict(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let frozen = self.frozen_image(image)?;
        let fixed = match self.cfg.prompt_mode {
            PromptMode::UnalignedAllClasses => Some(self.frozen_text(&self.all_classes_prompt())?),
            PromptMode::Implicit => None,
        };
        let mut g = Graph::with_store(&self.store);
        let cond = self.main_condition(&mut g, &frozen.patches, fixed.as_ref(), None)?;
        let z0 = g.constant(frozen.z0);
        let (_, out) = self.decode(&mut g, z0, cond)?;
        Ok(g.value(out).clone())
    }
}
