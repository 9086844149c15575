//! AdamW with decoupled weight decay and the polynomial learning-rate schedule.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{read_records, write_records, Float, ParamId, ParamStore, Record};

/// `base_lr · (1 − iter/max_iters)^power`, defined for `0 ≤ iter < max_iters`.
pub fn poly_lr(iter: usize, max_iters: usize, base_lr: f64, power: f64) -> Result<f64> {
    if iter >= max_iters {
        return Err(Error::Schedule { iter, max_iters });
    }
    Ok(base_lr * (1.0 - iter as f64 / max_iters as f64).powf(power))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First/second moment buffers of one parameter. Stored in 32-bit so a
/// checkpoint restores them exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub steps: u64,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    state: BTreeMap<ParamId, Moments>,
    /// Parameter updates skipped because the gradient held NaN or infinity.
    pub skipped_nonfinite: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW { cfg, state: BTreeMap::new(), skipped_nonfinite: 0 }
    }

    pub fn moments(&self, id: ParamId) -> Option<&Moments> {
        self.state.get(&id)
    }

    /// Applies one update from the gradients held in `store`. Frozen
    /// parameters are left alone and never get moment buffers.
    pub fn step<T: Float>(&mut self, store: &mut ParamStore<T>, lr: f64) {
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if p.frozen {
                continue;
            }
            if !p.grad.all_finite() {
                self.skipped_nonfinite += 1;
                log::warn!("adamw: non-finite gradient for {}, update skipped", p.name);
                continue;
            }
            let n = p.value.numel();
            let st = self
                .state
                .entry(id)
                .or_insert_with(|| Moments { m: vec![0.0; n], v: vec![0.0; n], steps: 0 });
            st.steps += 1;
            let bc1 = 1.0 - beta1.powi(st.steps as i32);
            let bc2 = 1.0 - beta2.powi(st.steps as i32);
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for i in 0..n {
                let g = grad[i].f64();
                let m = beta1 * st.m[i] as f64 + (1.0 - beta1) * g;
                let v = beta2 * st.v[i] as f64 + (1.0 - beta2) * g * g;
                st.m[i] = m as f32;
                st.v[i] = v as f32;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                let theta = value[i].f64();
                value[i] = T::of(theta - lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * theta));
            }
        }
    }

    /// Writes moment buffers as checkpoint records named `m/<param>`,
    /// `v/<param>` and `steps/<param>`.
    pub fn save<T: Float>(&self, store: &ParamStore<T>, path: &Path) -> Result<()> {
        let mut records = Vec::with_capacity(self.state.len() * 3);
        for (&id, st) in &self.state {
            let p = store.get(id);
            let shape = p.value.shape().to_vec();
            records.push(Record {
                name: format!("m/{}", p.name),
                shape: shape.clone(),
                data: st.m.clone(),
            });
            records.push(Record {
                name: format!("v/{}", p.name),
                shape,
                data: st.v.clone(),
            });
            records.push(Record { name: format!("steps/{}", p.name), shape: vec![], data: vec![st.steps as f32] });
        }
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        write_records(std::io::BufWriter::new(file), &records).map_err(|e| Error::io(path, e))
    }

    /// Restores moment buffers written by [`AdamW::save`].
    pub fn load<T: Float>(&mut self, store: &ParamStore<T>, path: &Path) -> Result<()> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let records = read_records(std::io::BufReader::new(file), path)?;
        let bad = |detail: String| Error::Checkpoint { path: path.to_path_buf(), detail };
        self.state.clear();
        for r in records {
            let (kind, name) = r.name.split_once('/').ok_or_else(|| bad(format!("record {:?}", r.name)))?;
            let id = store.id(name).ok_or_else(|| bad(format!("unknown parameter {name:?}")))?;
            let n = store.value(id).numel();
            let st = self
                .state
                .entry(id)
                .or_insert_with(|| Moments { m: vec![0.0; n], v: vec![0.0; n], steps: 0 });
            match kind {
                "m" | "v" if r.data.len() == n => {
                    let dst = if kind == "m" { &mut st.m } else { &mut st.v };
                    dst.copy_from_slice(&r.data);
                }
                "steps" if r.data.len() == 1 => st.steps = r.data[0] as u64,
                _ => return Err(bad(format!("malformed record {:?}", r.name))),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn poly_schedule_values() {
        assert_eq!(poly_lr(0, 100, 0.1, 0.9).unwrap(), 0.1);
        let half = poly_lr(50, 100, 1.0, 0.9).unwrap();
        assert!((half - 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!((half - 0.5359).abs() < 1e-4);
        assert!(matches!(poly_lr(100, 100, 1.0, 0.9), Err(Error::Schedule { iter: 100, max_iters: 100 })));
        let lrs: Vec<f64> = (0..100).map(|i| poly_lr(i, 100, 1.0, 0.9).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn zero_grad_without_decay_is_a_no_op() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap()).unwrap();
        let before = store.value(id).clone();
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        opt.step(&mut store, 0.1);
        assert_eq!(store.value(id), &before);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", Tensor::from_f64(&[2], &[0.0, 0.0]).unwrap()).unwrap();
        store.get_mut(id).grad = Tensor::from_f64(&[2], &[3.0, -0.25]).unwrap();
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        let lr = 0.01;
        opt.step(&mut store, lr);
        // Bias-corrected first step: m̂ = g, v̂ = g², update = lr·g/(|g|+eps).
        let expect = [-lr * 3.0 / (3.0 + 1e-8), lr * 0.25 / (0.25 + 1e-8)];
        for (v, e) in store.value(id).data().iter().zip(expect) {
            assert!((v - e).abs() < 1e-15, "{v} vs {e}");
        }
    }

    #[test]
    fn frozen_params_have_no_state_and_do_not_move() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add("enc.w", Tensor::full(&[2], 1.0)).unwrap();
        let b = store.add("head.w", Tensor::full(&[2], 1.0)).unwrap();
        store.freeze_prefix("enc.");
        store.get_mut(a).grad.fill(1.0);
        store.get_mut(b).grad.fill(1.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut store, 0.1);
        assert!(opt.moments(a).is_none());
        assert!(opt.moments(b).is_some());
        assert_eq!(store.value(a).data(), &[1.0, 1.0]);
        assert_ne!(store.value(b).data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_finite_gradient_skips_that_parameter() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add("a", Tensor::full(&[2], 1.0)).unwrap();
        store.get_mut(a).grad = Tensor::from_f64(&[2], &[f64::NAN, 1.0]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut store, 0.1);
        assert_eq!(opt.skipped_nonfinite, 1);
        assert_eq!(store.value(a).data(), &[1.0, 1.0]);
    }

    #[test]
    fn moments_round_trip_through_a_file() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add("a", Tensor::full(&[3], 1.0)).unwrap();
        store.get_mut(a).grad.fill(0.5);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut store, 0.1);
        opt.step(&mut store, 0.1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("optim.bin");
        opt.save(&store, &path).unwrap();
        let mut back = AdamW::new(AdamWConfig::default());
        back.load(&store, &path).unwrap();
        let (x, y) = (opt.moments(a).unwrap(), back.moments(a).unwrap());
        assert_eq!(x.steps, y.steps);
        assert_eq!(x, y);
    }
}
