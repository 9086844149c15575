//! Frozen feature producers: a fixed random-weight latent encoder and a small
//! image/text dual encoder trained with a symmetric contrastive loss.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::nn::{l2_normalize_rows, to_tokens, Conv2d, LayerNorm, Linear, TransformerBlock};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::{save_checkpoint, Float, Graph, ParamId, ParamStore, Tensor, Var};

pub const LATENT_CHANNELS: usize = 16;
/// Seed of the latent encoder's fixed weights, shared by every model.
pub const LATENT_SEED: u64 = 0x1A7E_0008;

/// Three stride-2 convolutions (stride 8 overall) with fixed random weights.
#[derive(Clone, Debug)]
pub struct LatentEncoder {
    stages: [Conv2d; 3],
}

impl LatentEncoder {
    pub fn new<T: Float>(store: &mut ParamStore<T>, prefix: &str) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(LATENT_SEED);
        let widths = [3, 24, 48, LATENT_CHANNELS];
        let mut convs = Vec::with_capacity(3);
        for s in 0..3 {
            let name = format!("{prefix}.conv{s}");
            convs.push(Conv2d::new(store, &name, widths[s], widths[s + 1], 3, 2, 1, &mut rng)?);
        }
        let stages = convs.try_into().expect("three stages");
        Ok(LatentEncoder { stages })
    }

    /// `image[3, H, W]` with values in `[0, 1]` to `z0[16, H/8, W/8]`.
    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<Var> {
        let s = g.shape(image);
        if s.len() != 3 || s[0] != 3 || !s[1].is_multiple_of(8) || !s[2].is_multiple_of(8) || s[1] == 0 || s[2] == 0 {
            return Err(Error::shape("encode_latent", format!("image {s:?} must be [3, 8k, 8m]")));
        }
        let x = g.scale(image, 2.0);
        let mut x = g.add_scalar(x, -1.0);
        for conv in &self.stages {
            let y = conv.forward(g, x)?;
            x = g.tanh(y);
        }
        Ok(x)
    }

    pub fn encode<T: Float>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::with_store(store);
        let x = g.constant(image.clone());
        let z = self.forward(&mut g, x)?;
        Ok(g.value(z).clone())
    }
}

// ---- vocabulary -------------------------------------------------------

pub const START: &str = "<start>";
pub const END: &str = "<end>";
pub const PAD: &str = "<pad>";

/// Closed word-level vocabulary. Ids are positions in the sorted word list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

/// Result of tokenizing one prompt.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokens {
    /// Real tokens: start, words, end.
    pub ids: Vec<u32>,
    /// Set when words were dropped to fit the length limit.
    pub truncated: bool,
}

impl Vocabulary {
    pub fn new<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Self {
        let mut all: Vec<String> = words.into_iter().map(|w| w.as_ref().to_string()).collect();
        all.extend([START, END, PAD].map(String::from));
        all.sort();
        all.dedup();
        let index = all.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Vocabulary { words: all, index }
    }

    /// Every class word the generator knows, caption words and the fallback
    /// prompt word.
    pub fn synthetic() -> Self {
        let mut words: Vec<&str> = crate::synth::CLASS_WORDS.to_vec();
        words.extend(crate::synth::CAPTION_WORDS);
        words.push(crate::prompt::BACKGROUND_WORD);
        Vocabulary::new(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> &str {
        &self.words[id as usize]
    }

    pub fn pad_id(&self) -> u32 {
        self.index[PAD]
    }

    /// Whitespace tokenization with start/end markers, keeping at most
    /// `max_len` tokens in total.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Result<Tokens> {
        assert!(max_len >= 2, "room for start and end tokens");
        let mut ids = vec![self.index[START]];
        let mut truncated = false;
        for w in text.split_whitespace() {
            let id = self.id(w).ok_or_else(|| Error::Contract(format!("word {w:?} is not in the vocabulary")))?;
            if ids.len() + 1 >= max_len {
                truncated = true;
                continue;
            }
            ids.push(id);
        }
        if truncated {
            log::warn!("prompt {text:?} truncated to {max_len} tokens");
        }
        ids.push(self.index[END]);
        Ok(Tokens { ids, truncated })
    }

    /// Ids padded to `max_len` and the matching real-token mask.
    pub fn padded(&self, tokens: &Tokens, max_len: usize) -> (Vec<u32>, Vec<bool>) {
        let mut ids = tokens.ids.clone();
        let mut mask = vec![true; ids.len()];
        ids.resize(max_len.max(ids.len()), self.pad_id());
        mask.resize(ids.len(), false);
        (ids, mask)
    }

    /// Words of `ids` with markers removed, each followed by one space.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut s = String::new();
        for &id in ids {
            let w = self.word(id);
            if w != START && w != END && w != PAD {
                s.push_str(w);
                s.push(' ');
            }
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.words.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let words: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
        if words.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("{}: vocabulary must be sorted and unique", path.display())));
        }
        Ok(Vocabulary::new(words))
    }
}

// ---- dual encoder -----------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DualEncoderConfig {
    pub width: usize,
    pub patch: usize,
    pub image_size: usize,
    pub max_len: usize,
    pub heads: usize,
    pub ffn: usize,
}

impl Default for DualEncoderConfig {
    fn default() -> Self {
        DualEncoderConfig { width: 64, patch: 8, image_size: 64, max_len: 16, heads: 4, ffn: 128 }
    }
}

impl DualEncoderConfig {
    /// Patch tokens per image.
    pub fn patches(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }
}

#[derive(Clone, Debug)]
pub struct DualEncoder {
    pub cfg: DualEncoderConfig,
    patch_embed: Conv2d,
    image_pos: ParamId,
    image_block: TransformerBlock,
    image_norm: LayerNorm,
    image_proj: Linear,
    token_embed: ParamId,
    text_pos: ParamId,
    text_block: TransformerBlock,
    text_norm: LayerNorm,
    text_proj: Linear,
    /// Log of the multiplier applied to cosine similarities.
    pub log_scale: ParamId,
}

/// Frozen image-tower output.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEmbedding<T> {
    /// `[Np, D]`
    pub patches: Tensor<T>,
    /// `[D]`, unit norm.
    pub pooled: Tensor<T>,
}

/// Frozen text-tower output.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding<T> {
    pub tokens: Tokens,
    /// `[Lt, D]`, real tokens only.
    pub features: Tensor<T>,
    /// `[D]`, unit norm.
    pub pooled: Tensor<T>,
}

/// Upper bound on the similarity multiplier.
const MAX_LOG_SCALE: f64 = 4.605_170_185_988_092; // ln 100

impl DualEncoder {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: DualEncoderConfig,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.width;
        let p = |s: &str| format!("{prefix}.{s}");
        Ok(DualEncoder {
            cfg,
            patch_embed: Conv2d::new(store, &p("image.patch"), 3, d, cfg.patch, cfg.patch, 0, rng)?,
            image_pos: store.randn(p("image.pos"), &[cfg.patches(), d], 0.02, rng)?,
            image_block: TransformerBlock::new(store, &p("image.block"), d, cfg.heads, cfg.ffn, rng)?,
            image_norm: LayerNorm::new(store, &p("image.norm"), d)?,
            image_proj: Linear::new(store, &p("image.proj"), d, d, false, rng)?,
            token_embed: store.randn(p("text.embed"), &[vocab_size, d], 0.5, rng)?,
            text_pos: store.randn(p("text.pos"), &[cfg.max_len, d], 0.02, rng)?,
            text_block: TransformerBlock::new(store, &p("text.block"), d, cfg.heads, cfg.ffn, rng)?,
            text_norm: LayerNorm::new(store, &p("text.norm"), d)?,
            text_proj: Linear::new(store, &p("text.proj"), d, d, false, rng)?,
            log_scale: store.add(p("log_scale"), Tensor::scalar(T::zero()))?,
        })
    }

    /// `image[3, S, S]` to patch features `[Np, D]` and a unit pooled row `[1, D]`.
    pub fn image_tower<T: Float>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<(Var, Var)> {
        let s = self.cfg.image_size;
        if g.shape(image) != [3, s, s] {
            return Err(Error::shape("encode_image_clip", format!("image {:?} vs tower input [3, {s}, {s}]", g.shape(image))));
        }
        let x = g.scale(image, 2.0);
        let x = g.add_scalar(x, -1.0);
        let grid = self.patch_embed.forward(g, x)?;
        let tokens = to_tokens(g, grid)?;
        let pos = g.param(self.image_pos);
        let tokens = g.add(tokens, pos)?;
        let tokens = self.image_block.forward(g, tokens)?;
        let patches = self.image_norm.forward(g, tokens)?;
        let pooled = self.pool(g, patches, &self.image_proj)?;
        Ok((patches, pooled))
    }

    /// Real token ids to token features `[Lt, D]` and a unit pooled row `[1, D]`.
    pub fn text_tower<T: Float>(&self, g: &mut Graph<'_, T>, ids: &[u32]) -> Result<(Var, Var)> {
        if ids.is_empty() || ids.len() > self.cfg.max_len {
            return Err(Error::shape("encode_text_clip", format!("{} tokens, limit {}", ids.len(), self.cfg.max_len)));
        }
        let table = g.param(self.token_embed);
        let rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let emb = g.gather_rows(table, &rows)?;
        let pos_table = g.param(self.text_pos);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = g.gather_rows(pos_table, &positions)?;
        let x = g.add(emb, pos)?;
        let x = self.text_block.forward(g, x)?;
        let feats = self.text_norm.forward(g, x)?;
        let pooled = self.pool(g, feats, &self.text_proj)?;
        Ok((feats, pooled))
    }

    fn pool<T: Float>(&self, g: &mut Graph<'_, T>, seq: Var, proj: &Linear) -> Result<Var> {
        let n = g.shape(seq)[0];
        let s = g.sum_axis(seq, 0)?;
        let s = g.scale(s, 1.0 / n as f64);
        let s = g.reshape(s, &[1, self.cfg.width])?;
        let s = proj.forward(g, s)?;
        l2_normalize_rows(g, s)
    }

    pub fn encode_image<T: Float>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<ImageEmbedding<T>> {
        let mut g = Graph::with_store(store);
        let x = g.constant(image.clone());
        let (patches, pooled) = self.image_tower(&mut g, x)?;
        Ok(ImageEmbedding {
            patches: g.value(patches).clone(),
            pooled: g.value(pooled).reshape(&[self.cfg.width])?,
        })
    }

    pub fn encode_text<T: Float>(&self, store: &ParamStore<T>, vocab: &Vocabulary, prompt: &str) -> Result<TextEmbedding<T>> {
        let tokens = vocab.tokenize(prompt, self.cfg.max_len)?;
        let mut g = Graph::with_store(store);
        let (feats, pooled) = self.text_tower(&mut g, &tokens.ids)?;
        Ok(TextEmbedding {
            tokens,
            features: g.value(feats).clone(),
            pooled: g.value(pooled).reshape(&[self.cfg.width])?,
        })
    }

    /// Symmetric InfoNCE over a batch of matched pairs; returns the loss and
    /// the image-by-text logit matrix.
    pub fn contrastive_loss<T: Float>(&self, g: &mut Graph<'_, T>, images: &[Var], texts: &[Vec<u32>]) -> Result<(Var, Var)> {
        assert_eq!(images.len(), texts.len(), "one caption per image");
        let mut img_rows = Vec::with_capacity(images.len());
        for &im in images {
            img_rows.push(self.image_tower(g, im)?.1);
        }
        let mut txt_rows = Vec::with_capacity(texts.len());
        for ids in texts {
            txt_rows.push(self.text_tower(g, ids)?.1);
        }
        let img = g.concat(&img_rows, 0)?;
        let txt = g.concat(&txt_rows, 0)?;
        let txt_t = g.transpose(txt)?;
        let cos = g.matmul(img, txt_t)?;
        let log_scale = g.param(self.log_scale);
        let scale = g.exp(log_scale);
        let logits = g.mul_broadcast(cos, scale)?;
        let targets: Vec<u32> = (0..images.len() as u32).collect();
        // cross_entropy takes classes on axis 0: columns of `logits` are
        // text-to-image rows, columns of its transpose image-to-text rows.
        let by_text = g.cross_entropy(logits, &targets, u32::MAX)?;
        let logits_t = g.transpose(logits)?;
        let by_image = g.cross_entropy(logits_t, &targets, u32::MAX)?;
        let sum = g.add(by_text, by_image)?;
        Ok((g.scale(sum, 0.5), logits))
    }
}

// ---- pretraining ------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { iters: 600, batch_size: 32, lr: 2e-3, weight_decay: 0.01, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub iters: usize,
    pub batch_size: usize,
    pub skipped_batches: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Fraction of held-out images whose own caption scores highest within
    /// its evaluation batch.
    pub top1_retrieval: f64,
    pub chance: f64,
    pub heldout_pairs: usize,
}

/// Image-to-text top-1 accuracy over consecutive chunks of `batch` pairs.
/// Returns `(accuracy, chance)`; chunks smaller than two are dropped.
pub fn retrieval_accuracy<T: Float>(
    enc: &DualEncoder,
    store: &ParamStore<T>,
    vocab: &Vocabulary,
    pairs: &[(Tensor<T>, String)],
    batch: usize,
) -> Result<(f64, f64)> {
    let mut hits = 0usize;
    let mut total = 0usize;
    let mut chunks = 0usize;
    for chunk in pairs.chunks(batch) {
        if chunk.len() < 2 {
            continue;
        }
        let imgs = chunk.iter().map(|(im, _)| enc.encode_image(store, im)).collect::<Result<Vec<_>>>()?;
        let txts = chunk.iter().map(|(_, c)| enc.encode_text(store, vocab, c)).collect::<Result<Vec<_>>>()?;
        for (i, im) in imgs.iter().enumerate() {
            let scores: Vec<f64> = txts
                .iter()
                .map(|t| im.pooled.data().iter().zip(t.pooled.data()).map(|(a, b)| a.f64() * b.f64()).sum())
                .collect();
            hits += usize::from(argmax(&scores) == i);
        }
        total += chunk.len();
        chunks += 1;
    }
    if total == 0 {
        return Err(Error::UndefinedMetric("retrieval needs at least two held-out pairs".into()));
    }
    // Each chunk contributes len · (1/len) expected hits.
    let chance = chunks as f64 / total as f64;
    Ok((hits as f64 / total as f64, chance))
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Trains the dual encoder in `store` on `(image, caption)` pairs, then
/// freezes it and measures retrieval on `heldout`.
pub fn contrastive_pretrain(
    enc: &DualEncoder,
    store: &mut ParamStore<f32>,
    vocab: &Vocabulary,
    train: &[(Tensor<f32>, String)],
    heldout: &[(Tensor<f32>, String)],
    cfg: &PretrainConfig,
) -> Result<RetrievalReport> {
    if train.len() < 2 {
        return Err(Error::Config("contrastive pretraining needs at least two pairs".into()));
    }
    let tokens = train
        .iter()
        .map(|(_, c)| vocab.tokenize(c, enc.cfg.max_len).map(|t| t.ids))
        .collect::<Result<Vec<_>>>()?;
    let mut opt = AdamW::new(AdamWConfig { weight_decay: cfg.weight_decay, ..Default::default() });
    let batch = cfg.batch_size.clamp(2, train.len());
    let mut skipped = 0usize;
    let mut losses = Vec::with_capacity(cfg.iters);
    for it in 0..cfg.iters {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (it as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let idx = sample_indices(&mut rng, train.len(), batch).into_vec();
        let first = &train[idx[0]].1;
        if idx.iter().all(|&i| train[i].1 == *first) {
            log::warn!("pretrain iteration {it}: every caption in the batch is identical; batch skipped");
            skipped += 1;
            continue;
        }
        let lr = crate::optim::poly_lr(it, cfg.iters, cfg.lr, 0.9)?;
        store.zero_grads();
        let grads = {
            let mut g = Graph::with_store(store);
            let images: Vec<Var> = idx.iter().map(|&i| g.constant(train[i].0.clone())).collect();
            let texts: Vec<Vec<u32>> = idx.iter().map(|&i| tokens[i].clone()).collect();
            let (loss, _) = enc.contrastive_loss(&mut g, &images, &texts)?;
            losses.push(g.value(loss).item().f64());
            g.backward(loss)?
        };
        grads.accumulate_into(store);
        opt.step(store, lr);
        let ls = store.get_mut(enc.log_scale);
        let v = ls.value.item().f64().min(MAX_LOG_SCALE);
        ls.value.fill(f32::of(v));
    }
    let initial_loss = losses.first().copied().unwrap_or(f64::NAN);
    let tail = &losses[losses.len().saturating_sub(50)..];
    let final_loss = if tail.is_empty() { f64::NAN } else { tail.iter().sum::<f64>() / tail.len() as f64 };
    let (top1, chance) = retrieval_accuracy(enc, store, vocab, heldout, batch)?;
    Ok(RetrievalReport {
        iters: cfg.iters,
        batch_size: batch,
        skipped_batches: skipped,
        initial_loss,
        final_loss,
        top1_retrieval: top1,
        chance,
        heldout_pairs: heldout.len(),
    })
}

/// File names written by [`pretrain_from_dataset`].
pub const ENCODER_CHECKPOINT: &str = "encoder.bin";
pub const RETRIEVAL_REPORT: &str = "retrieval.json";
pub const VOCAB_FILE: &str = "vocab.json";

/// Pretrains a dual encoder (parameter prefix `clip`) on the train-split
/// captions of `data`, measures retrieval on the val split (or the last
/// fifth of train when there is none) and writes checkpoint, vocabulary and
/// report into `out_dir`.
pub fn pretrain_from_dataset(data: &Path, out_dir: &Path, cfg: &PretrainConfig) -> Result<(PathBuf, RetrievalReport)> {
    let ds = Dataset::open(data)?;
    let pair = |i: usize| -> Result<(Tensor<f32>, String)> { Ok((ds.image(i)?, ds.caption(i)?.to_string())) };
    let mut train = ds.split("train")?.into_iter().map(pair).collect::<Result<Vec<_>>>()?;
    let heldout = match ds.split("val") {
        Ok(idx) => idx.into_iter().map(pair).collect::<Result<Vec<_>>>()?,
        Err(_) => train.split_off(train.len() - train.len() / 5),
    };
    let vocab = Vocabulary::synthetic();
    let mut store = ParamStore::new();
    let enc_cfg = DualEncoderConfig { image_size: train[0].0.shape()[1], ..Default::default() };
    let enc = DualEncoder::new(&mut store, "clip", enc_cfg, vocab.len(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let report = contrastive_pretrain(&enc, &mut store, &vocab, &train, &heldout, cfg)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ckpt = out_dir.join(ENCODER_CHECKPOINT);
    save_checkpoint(&store, &ckpt)?;
    vocab.save(&out_dir.join(VOCAB_FILE))?;
    let rp = out_dir.join(RETRIEVAL_REPORT);
    std::fs::write(&rp, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| Error::io(&rp, e))?;
    Ok((ckpt, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_is_sorted_with_markers_first() {
        let v = Vocabulary::synthetic();
        assert_eq!(v.word(0), END);
        assert_eq!(v.word(1), PAD);
        assert_eq!(v.word(2), START);
        let words: Vec<&str> = (0..v.len() as u32).map(|i| v.word(i)).collect();
        assert!(words.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn truncation_keeps_markers() {
        let v = Vocabulary::synthetic();
        let t = v.tokenize("wall sky floor lamp", 4).unwrap();
        assert!(t.truncated);
        assert_eq!(t.ids.len(), 4);
        assert_eq!(v.detokenize(&t.ids), "wall sky ");
        assert_eq!(*t.ids.last().unwrap(), v.id(END).unwrap());
    }

    #[test]
    fn unknown_words_are_rejected() {
        assert!(Vocabulary::synthetic().tokenize("wall zebra", 16).is_err());
    }

    #[test]
    fn padding_marks_real_tokens() {
        let v = Vocabulary::synthetic();
        let t = v.tokenize("sky", 16).unwrap();
        let (ids, mask) = v.padded(&t, 16);
        assert_eq!(ids.len(), 16);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 3);
        assert!(ids[3..].iter().all(|&i| i == v.pad_id()));
    }
}
