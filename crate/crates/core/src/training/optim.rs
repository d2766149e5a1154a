//! AdamW with decoupled weight decay and a reduce-on-plateau schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Moment buffers, one pair per parameter in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> OptState<T> {
    pub fn for_shapes(shapes: impl IntoIterator<Item = [usize; 4]>) -> Self {
        let (m, v) = shapes.into_iter().map(|s| (Tensor::zeros(s), Tensor::zeros(s))).unzip();
        Self { step: 0, m, v }
    }
}

impl AdamW {
    /// One update. `params[i]` is skipped entirely when `grads[i]` is `None`.
    pub fn step<T: Scalar>(&self, params: &mut [&mut Tensor<T>], grads: &[Option<&Tensor<T>>], state: &mut OptState<T>) -> Result<()> {
        if params.len() != grads.len() || params.len() != state.m.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer got {} parameters, {} gradients and {} moment buffers",
                params.len(),
                grads.len(),
                state.m.len()
            )));
        }
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = grads[i] else { continue };
            if g.shape() != p.shape() || state.m[i].shape() != p.shape() {
                return Err(Error::shape(
                    "adamw",
                    format!("parameter {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
            let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gf = gv.as_f64();
                let mf = self.beta1 * mv.as_f64() + (1.0 - self.beta1) * gf;
                let vf = self.beta2 * vv.as_f64() + (1.0 - self.beta2) * gf * gf;
                *mv = T::lit(mf);
                *vv = T::lit(vf);
                let update = self.lr * (mf / bc1) / ((vf / bc2).sqrt() + self.eps);
                *pv = T::lit(pv.as_f64() * decay - update);
            }
        }
        Ok(())
    }
}

/// Multiplies the rate by `factor` once `patience` consecutive epochs pass
/// without a strictly lower validation loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub best: f64,
    pub bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Result<Self> {
        if !(lr >= 0.0 && factor > 0.0 && factor < 1.0 && patience > 0) {
            return Err(Error::InvalidArgument(format!(
                "scheduler needs lr >= 0, factor in (0, 1), patience > 0 (got {lr}, {factor}, {patience})"
            )));
        }
        Ok(Self {
            lr,
            factor,
            patience,
            best: f64::INFINITY,
            bad_epochs: 0,
        })
    }

    /// Records one epoch's validation loss and returns the rate to use next.
    pub fn observe(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr *= self.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }

    /// Rate after replaying a whole validation history.
    pub fn replay(history: &[f64], lr: f64, factor: f64, patience: usize) -> Result<f64> {
        let mut s = Self::new(lr, factor, patience)?;
        for &v in history {
            s.observe(v);
        }
        Ok(s.lr)
    }
}
