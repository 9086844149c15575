//! Task decoders over the UNet feature taps, and their losses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::synth::IGNORE_LABEL;
use crate::tensor::{Float, Graph, ParamStore, Tensor, Var};
use crate::unet::{FeatureBundle, LEVELS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Segmentation,
    Depth,
}

/// Feature-pyramid trunk: lateral 1×1 convs, top-down sums, one 3×3 conv per
/// level, everything resized to the finest level and summed.
#[derive(Clone, Debug)]
pub struct FpnTrunk {
    lateral: Vec<Conv2d>,
    smooth: Vec<Conv2d>,
    /// Extra channels expected on the finest tap (the averaged attention map).
    pub extra_channels: usize,
}

impl FpnTrunk {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        tap_channels: [usize; LEVELS],
        extra_channels: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut lateral = Vec::with_capacity(LEVELS);
        let mut smooth = Vec::with_capacity(LEVELS);
        for (l, &c) in tap_channels.iter().enumerate() {
            let c_in = if l == 0 { c + extra_channels } else { c };
            lateral.push(Conv2d::new(store, &format!("{prefix}.lateral{l}"), c_in, width, 1, 1, 0, rng)?);
            smooth.push(Conv2d::new(store, &format!("{prefix}.smooth{l}"), width, width, 3, 1, 1, rng)?);
        }
        Ok(FpnTrunk { lateral, smooth, extra_channels })
    }

    /// Fused `[width, H/8, W/8]` map. The averaged attention map is
    /// concatenated onto the finest tap first.
    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, f: &FeatureBundle) -> Result<Var> {
        let finest = if self.extra_channels > 0 {
            let nq = g.shape(f.f_ca)[0];
            if nq != self.extra_channels {
                return Err(Error::shape("fpn", format!("attention map has {nq} channels, head expects {}", self.extra_channels)));
            }
            g.concat(&[f.taps[0], f.f_ca], 0)?
        } else {
            f.taps[0]
        };
        let inputs = [finest, f.taps[1], f.taps[2], f.taps[3]];
        let mut lat = Vec::with_capacity(LEVELS);
        for (conv, &x) in self.lateral.iter().zip(&inputs) {
            lat.push(conv.forward(g, x)?);
        }
        for l in (0..LEVELS - 1).rev() {
            let (h, w) = (g.shape(lat[l])[1], g.shape(lat[l])[2]);
            let up = g.resize_bilinear(lat[l + 1], h, w)?;
            lat[l] = g.add(lat[l], up)?;
        }
        let (h0, w0) = (g.shape(lat[0])[1], g.shape(lat[0])[2]);
        let mut fused: Option<Var> = None;
        for (conv, &x) in self.smooth.iter().zip(&lat) {
            let y = conv.forward(g, x)?;
            let mut y = g.relu(y);
            if g.shape(y)[1] != h0 || g.shape(y)[2] != w0 {
                y = g.resize_bilinear(y, h0, w0)?;
            }
            fused = Some(match fused {
                Some(a) => g.add(a, y)?,
                None => y,
            });
        }
        Ok(fused.expect("four levels"))
    }
}

/// Segmentation decoder: trunk, 1×1 classifier, bilinear ×8.
#[derive(Clone, Debug)]
pub struct SegHead {
    pub trunk: FpnTrunk,
    pub classifier: Conv2d,
}

/// Depth decoder: trunk, 1×1 regressor, softplus, bilinear ×8.
#[derive(Clone, Debug)]
pub struct DepthHead {
    pub trunk: FpnTrunk,
    pub regressor: Conv2d,
}

/// Inverse of softplus, for initializing the depth bias.
fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl SegHead {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        tap_channels: [usize; LEVELS],
        extra_channels: usize,
        width: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let trunk = FpnTrunk::new(store, &format!("{prefix}.fpn"), tap_channels, extra_channels, width, rng)?;
        let classifier = Conv2d::new(store, &format!("{prefix}.classifier"), width, num_classes, 1, 1, 0, rng)?;
        // Zero weights start every pixel at the uniform distribution.
        store.get_mut(classifier.w).value.fill(T::zero());
        Ok(SegHead { trunk, classifier })
    }

    /// Logits `[classes, out_h, out_w]`.
    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, f: &FeatureBundle, out_h: usize, out_w: usize) -> Result<Var> {
        let x = self.trunk.forward(g, f)?;
        let logits = self.classifier.forward(g, x)?;
        g.resize_bilinear(logits, out_h, out_w)
    }
}

impl DepthHead {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        tap_channels: [usize; LEVELS],
        extra_channels: usize,
        width: usize,
        init_depth: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let trunk = FpnTrunk::new(store, &format!("{prefix}.fpn"), tap_channels, extra_channels, width, rng)?;
        let regressor = Conv2d::new(store, &format!("{prefix}.regressor"), width, 1, 1, 1, 0, rng)?;
        store.get_mut(regressor.w).value.fill(T::zero());
        store.get_mut(regressor.b).value.fill(T::of(softplus_inv(init_depth)));
        Ok(DepthHead { trunk, regressor })
    }

    /// Positive depth `[1, out_h, out_w]`.
    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, f: &FeatureBundle, out_h: usize, out_w: usize) -> Result<Var> {
        let x = self.trunk.forward(g, f)?;
        let d = self.regressor.forward(g, x)?;
        let d = g.resize_bilinear(d, out_h, out_w)?;
        Ok(g.softplus(d))
    }
}

/// Mean cross-entropy over pixels whose label is not [`IGNORE_LABEL`].
pub fn segmentation_loss<T: Float>(g: &mut Graph<'_, T>, logits: Var, mask: &[u8]) -> Result<Var> {
    let targets: Vec<u32> = mask.iter().map(|&m| m as u32).collect();
    g.cross_entropy(logits, &targets, IGNORE_LABEL as u32)
}

/// Scale-invariant log loss `(1/n)Σg² − (λ/n²)(Σg)²` with
/// `g = log pred − log gt` over valid pixels.
pub fn scale_invariant_loss<T: Float>(g: &mut Graph<'_, T>, pred: Var, gt: &[f32], valid: &[bool], lambda: f64) -> Result<Var> {
    let n_pix = g.value(pred).numel();
    if gt.len() != n_pix || valid.len() != n_pix {
        return Err(Error::shape("scale_invariant_loss", format!("{n_pix} predictions, {} targets, {} mask", gt.len(), valid.len())));
    }
    let rows: Vec<usize> = (0..n_pix).filter(|&i| valid[i]).collect();
    if rows.is_empty() {
        log::warn!("scale_invariant_loss: empty valid mask; loss defined as 0");
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    if let Some(&bad) = rows.iter().find(|&&i| gt[i] <= 0.0 || !gt[i].is_finite()) {
        return Err(Error::Contract(format!("ground-truth depth {} at pixel {bad} is not positive", gt[bad])));
    }
    let n = rows.len() as f64;
    let flat = g.reshape(pred, &[n_pix, 1])?;
    let picked = g.gather_rows(flat, &rows)?;
    let log_pred = g.log(picked);
    let log_gt: Vec<f64> = rows.iter().map(|&i| (gt[i] as f64).ln()).collect();
    let log_gt = g.constant(Tensor::from_f64(&[rows.len(), 1], &log_gt)?);
    let diff = g.sub(log_pred, log_gt)?;
    let sq = g.square(diff);
    let sum_sq = g.sum(sq);
    let first = g.scale(sum_sq, 1.0 / n);
    let sum = g.sum(diff);
    let sum2 = g.square(sum);
    let second = g.scale(sum2, lambda / (n * n));
    g.sub(first, second)
}
