use crate::error::{Error, Result};
use crate::model::Parameterized;
use crate::tensor::Tensor;

/// AdamW with decoupled weight decay on [`ParamKind::Weight`](crate::model::ParamKind) tensors only.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    steps: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamW {
    pub fn new(model: &impl Parameterized, weight_decay: f64) -> Self {
        let mut first = Vec::new();
        model.visit_params(&mut |_, _, t| first.push(Tensor::zeros(t.shape())));
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            steps: 0,
            second: first.clone(),
            first,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update; `grads` follow the model's parameter order.
    pub fn step(&mut self, model: &mut impl Parameterized, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.first.len() {
            return Err(Error::shape(
                "adamw_step",
                format!("{} gradients for {} parameters", grads.len(), self.first.len()),
            ));
        }
        let mut problem = None;
        let mut k = 0;
        model.visit_params(&mut |name, _, t| {
            if problem.is_none() {
                let g = &grads[k];
                if g.shape() != t.shape() {
                    problem = Some(Error::shape(
                        "adamw_step",
                        format!("gradient {:?} for {name} {:?}", g.shape(), t.shape()),
                    ));
                } else if !g.is_finite() {
                    problem = Some(Error::NonFinite(format!("gradient of {name}")));
                }
            }
            k += 1;
        });
        if let Some(e) = problem {
            return Err(e);
        }
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let mut k = 0;
        let (first, second) = (&mut self.first, &mut self.second);
        model.visit_params_mut(&mut |_, kind, theta| {
            let decay = if kind.decays() { wd } else { 0.0 };
            let m = first[k].data_mut();
            let v = second[k].data_mut();
            for (((p, &g), m), v) in theta.data_mut().iter_mut().zip(grads[k].data()).zip(m).zip(v) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * (m_hat / (v_hat.sqrt() + eps) + decay * *p);
            }
            k += 1;
        });
        Ok(())
    }
}
