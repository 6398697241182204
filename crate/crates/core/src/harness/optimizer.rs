//! Parameter updates: plain SGD by default, Adam as the alternative.

use serde::{Deserialize, Serialize};

use crate::numerics::Tensor2D;
use crate::scalar::{cast, Scalar};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Owns the update rule and (for Adam) the moment buffers.
///
/// Parameters without a gradient in a step (e.g. an expert no token was
/// routed to) are left entirely untouched, moments included.
#[derive(Clone, Debug)]
pub struct Optimizer<F> {
    kind: OptimizerKind,
    lr: F,
    steps: u64,
    m: Vec<Tensor2D<F>>,
    v: Vec<Tensor2D<F>>,
}

impl<F: Scalar> Optimizer<F> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr: cast(lr),
            steps: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Applies one update. `grads[i]` pairs with `params[i]`; the lists
    /// must stay in the same order across steps for Adam's state to track.
    pub fn step(&mut self, mut params: Vec<&mut Tensor2D<F>>, grads: &[Option<Tensor2D<F>>]) {
        assert_eq!(params.len(), grads.len(), "one gradient slot per parameter");
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    if let Some(g) = g {
                        sgd_update(p, g, self.lr);
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = params
                        .iter()
                        .map(|p| Tensor2D::zeros(p.rows(), p.cols()))
                        .collect();
                    self.v = self.m.clone();
                }
                assert_eq!(self.m.len(), params.len(), "parameter list changed size");
                let b1: F = cast(ADAM_BETA1);
                let b2: F = cast(ADAM_BETA2);
                let eps: F = cast(ADAM_EPS);
                let c1: F = cast(1.0 - ADAM_BETA1.powi(self.steps as i32));
                let c2: F = cast(1.0 - ADAM_BETA2.powi(self.steps as i32));
                for ((p, g), (m, v)) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    let Some(g) = g else { continue };
                    for i in 0..p.rows() {
                        for j in 0..p.cols() {
                            let grad = g.get(i, j);
                            let mi = b1 * m.get(i, j) + (F::one() - b1) * grad;
                            let vi = b2 * v.get(i, j) + (F::one() - b2) * grad * grad;
                            m.set(i, j, mi);
                            v.set(i, j, vi);
                            let update = self.lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                            p.set(i, j, p.get(i, j) - update);
                        }
                    }
                }
            }
        }
    }
}

fn sgd_update<F: Scalar>(p: &mut Tensor2D<F>, g: &Tensor2D<F>, lr: F) {
    assert_eq!(p.shape(), g.shape(), "gradient shape matches parameter");
    for i in 0..p.rows() {
        for j in 0..p.cols() {
            p.set(i, j, p.get(i, j) - lr * g.get(i, j));
        }
    }
}
