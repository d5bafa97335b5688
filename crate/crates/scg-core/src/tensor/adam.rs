//! Named parameters and the Adam update.

use super::{Graph, Tensor, Var};
use crate::error::{Result, ScgError};

/// One trainable tensor with its gradient accumulator and Adam moments.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Populated by [`ParamSet::absorb_grads`]; `None` until then.
    pub grad: Option<Tensor>,
    pub m: Tensor,
    pub v: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Param {
            name: name.into(),
            value,
            grad: None,
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
        }
    }
}

/// Ordered collection of parameters belonging to one network.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    pub params: Vec<Param>,
}

/// Graph handles for one binding of a [`ParamSet`], parallel to its order.
pub struct Bound {
    pub vars: Vec<Var>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.push(Param::new(name, value));
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Register every parameter on the graph. Trainable bindings receive
    /// gradients; frozen bindings are constants (grad flows through them
    /// but not into them).
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Pull leaf gradients out of a finished graph into `grad`, adding to
    /// whatever is already accumulated there.
    pub fn absorb_grads(&mut self, g: &Graph, bound: &Bound) {
        for (p, v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(gr) = g.grad(*v) {
                match &mut p.grad {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gr.data()) {
                            *a += b;
                        }
                    }
                    None => p.grad = Some(gr.clone()),
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }
}

/// Adam with a shared step counter; learning rate is supplied per step so
/// schedules live outside the optimizer.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam { beta1, beta2, eps, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_step_count(&mut self, t: u64) {
        self.step = t;
    }

    /// In-place update over every parameter of every set. All parameters
    /// must have gradients populated.
    pub fn step(&mut self, sets: &mut [&mut ParamSet], lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for set in sets {
            for p in &mut set.params {
                let grad = p.grad.as_ref().ok_or_else(|| {
                    ScgError::Contract(format!("adam step: parameter '{}' has no gradient", p.name))
                })?;
                if grad.shape() != p.value.shape() {
                    return Err(ScgError::Dimension(format!(
                        "adam step: grad shape {:?} vs param {:?} for '{}'",
                        grad.shape(),
                        p.value.shape(),
                        p.name
                    )));
                }
                let gd = grad.data();
                let (m, v, w) = (p.m.data_mut(), p.v.data_mut(), p.value.data_mut());
                for i in 0..gd.len() {
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gd[i];
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gd[i] * gd[i];
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    w[i] -= lr * mhat / (vhat.sqrt() + self.eps);
                }
            }
        }
        Ok(())
    }
}
