//! SGD and AdamW parameter updates.

use thiserror::Error;

use super::tensor::Tensor;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("parameter {index} has shape {param:?} but gradient has shape {grad:?}")]
    ShapeMismatch { index: usize, param: Vec<usize>, grad: Vec<usize> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimKind {
    Sgd,
    AdamW,
}

/// Optimizer with per-parameter state, indexed positionally.
///
/// Callers pass the same parameter list (same order) to every `step`; moment
/// buffers are allocated lazily on first use. A `None` gradient is treated as
/// an all-zero gradient, so AdamW still applies weight decay and moment decay
/// to parameters that happened to be unreachable from the loss.
pub struct Optimizer {
    pub kind: OptimKind,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step_count: u64,
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl Optimizer {
    pub fn sgd(lr: f32) -> Self {
        assert!(lr > 0.0, "learning rate must be positive");
        Optimizer {
            kind: OptimKind::Sgd,
            lr,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
            weight_decay: 0.0,
            step_count: 0,
            moments: Vec::new(),
        }
    }

    pub fn adamw(lr: f32, beta1: f32, beta2: f32, eps: f32, weight_decay: f32) -> Self {
        assert!(lr > 0.0, "learning rate must be positive");
        Optimizer {
            kind: OptimKind::AdamW,
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            step_count: 0,
            moments: Vec::new(),
        }
    }

    /// AdamW with the usual (0.9, 0.999, 1e-8) defaults.
    pub fn adamw_default(lr: f32, weight_decay: f32) -> Self {
        Self::adamw(lr, 0.9, 0.999, 1e-8, weight_decay)
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    /// Applies one update; `grads[i]` pairs with `params[i]`.
    pub fn step(
        &mut self,
        params: &mut [Tensor],
        grads: &[Option<Tensor>],
    ) -> Result<(), OptimError> {
        let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
        self.step_refs(&mut refs, grads)
    }

    /// Same as [`Optimizer::step`], for parameters scattered across struct
    /// fields rather than held in one owned slice.
    pub fn step_refs(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Option<Tensor>],
    ) -> Result<(), OptimError> {
        assert_eq!(params.len(), grads.len(), "one gradient slot per parameter");
        if self.moments.len() < params.len() {
            self.moments.resize_with(params.len(), || None);
        }
        for (i, (p, g)) in params.iter().zip(grads.iter()).enumerate() {
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(OptimError::ShapeMismatch {
                        index: i,
                        param: p.shape().to_vec(),
                        grad: g.shape().to_vec(),
                    });
                }
            }
        }
        self.step_count += 1;
        match self.kind {
            OptimKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads.iter()) {
                    let Some(g) = g else { continue };
                    let lr = self.lr;
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data().iter()) {
                        *pv -= lr * gv;
                    }
                }
            }
            OptimKind::AdamW => {
                let t = self.step_count as f32;
                let bc1 = 1.0 - libm::powf(self.beta1, t);
                let bc2 = 1.0 - libm::powf(self.beta2, t);
                for (i, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
                    if self.moments[i].is_none() {
                        self.moments[i] = Some((
                            Tensor::zeros(p.shape().to_vec()),
                            Tensor::zeros(p.shape().to_vec()),
                        ));
                    }
                    let (m, v) = self.moments[i].as_mut().unwrap();
                    debug_assert_eq!(m.shape(), p.shape(), "moment buffer tracks parameter shape");
                    let zero_grad;
                    let gdata: &[f32] = match g {
                        Some(g) => g.data(),
                        None => {
                            zero_grad = vec![0.0f32; p.numel()];
                            &zero_grad
                        }
                    };
                    let (b1, b2, eps, lr, wd) =
                        (self.beta1, self.beta2, self.eps, self.lr, self.weight_decay);
                    let md = m.data_mut();
                    let vd = v.data_mut();
                    let pd = p.data_mut();
                    for j in 0..pd.len() {
                        md[j] = b1 * md[j] + (1.0 - b1) * gdata[j];
                        vd[j] = b2 * vd[j] + (1.0 - b2) * gdata[j] * gdata[j];
                        let mhat = md[j] / bc1;
                        let vhat = vd[j] / bc2;
                        pd[j] -= lr * (mhat / (libm::sqrtf(vhat) + eps) + wd * pd[j]);
                    }
                }
            }
        }
        Ok(())
    }
}
