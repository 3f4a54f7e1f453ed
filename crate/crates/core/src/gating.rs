//! Noisy softmax gate with sparse top-k selection.
//!
//! Gate logits are W_g x plus, in training mode, input-dependent Gaussian
//! noise mu_i + sigma_i * softplus(W_noise x)_i * z_i with z ~ N(0, 1) and
//! learnable mu / log sigma. Evaluation mode uses zero noise so inference
//! is deterministic. Weights are the softmax over all N experts; selection
//! keeps the k largest with ties broken by lowest index.

use std::cell::Cell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone)]
pub struct GatingRouter {
    w_gate: Tensor,   // [N, m]
    w_noise: Tensor,  // [N, m]
    mu: Tensor,       // [N]
    log_sigma: Tensor, // [N]
    num_experts: usize,
    top_k: usize,
    in_dim: usize,
    train_mode: Rc<Cell<bool>>,
}

/// Gate output for one input vector: softmax weights over all N experts and
/// the selected top-k indices (descending weight, ties by lowest index).
#[derive(Debug)]
pub struct GateDecision {
    pub weights: Tensor,
    pub selected: Vec<usize>,
}

impl GatingRouter {
    pub fn init(in_dim: usize, num_experts: usize, top_k: usize, rng: &mut Rng) -> Result<Self> {
        if num_experts == 0 || top_k == 0 || top_k > num_experts {
            return Err(Error::Validation(format!(
                "top_k {top_k} outside [1, {num_experts}]"
            )));
        }
        let w_gate = Tensor::randn(&[num_experts, in_dim], (1.0 / in_dim as f64).sqrt(), rng);
        w_gate.set_requires_grad(true);
        let w_noise = Tensor::zeros(&[num_experts, in_dim]);
        w_noise.set_requires_grad(true);
        let mu = Tensor::zeros(&[num_experts]);
        mu.set_requires_grad(true);
        let log_sigma = Tensor::from_vec(&[num_experts], vec![(0.1f64).ln(); num_experts])?;
        log_sigma.set_requires_grad(true);
        Ok(GatingRouter {
            w_gate,
            w_noise,
            mu,
            log_sigma,
            num_experts,
            top_k,
            in_dim,
            train_mode: Rc::new(Cell::new(false)),
        })
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn set_train_mode(&self, on: bool) {
        self.train_mode.set(on);
    }

    pub fn train_mode(&self) -> bool {
        self.train_mode.get()
    }

    pub fn w_gate(&self) -> &Tensor {
        &self.w_gate
    }

    pub fn w_noise(&self) -> &Tensor {
        &self.w_noise
    }

    pub fn mu(&self) -> &Tensor {
        &self.mu
    }

    pub fn log_sigma(&self) -> &Tensor {
        &self.log_sigma
    }

    pub fn params(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("w_gate", &self.w_gate),
            ("w_noise", &self.w_noise),
            ("mu", &self.mu),
            ("log_sigma", &self.log_sigma),
        ]
    }

    /// Gate a batch of row vectors: weights [t, N] plus per-row selections.
    /// `rng` is only consumed in training mode (one z per row per expert).
    pub fn forward_rows(
        &self,
        x: &Tensor,
        rng: Option<&mut Rng>,
        site: &str,
    ) -> Result<(Tensor, Vec<Vec<usize>>)> {
        let t = match x.shape() {
            [t, m] if *m == self.in_dim => *t,
            s => {
                return Err(Error::DimMismatch {
                    op: "gate",
                    lhs: s.to_vec(),
                    rhs: vec![self.num_experts, self.in_dim],
                })
            }
        };
        let clean = x.linear(&self.w_gate)?;
        let logits = if self.train_mode.get() {
            let rng = rng.ok_or_else(|| {
                Error::Contract("train-mode gating requires an rng stream".into())
            })?;
            let n = self.num_experts;
            let mut z = vec![0.0; t * n];
            rng.fill_gaussian(&mut z, 1.0);
            let z = Tensor::from_vec(&[t, n], z)?;
            let scale = x.linear(&self.w_noise)?.softplus();
            let noise = scale
                .mul(&z)?
                .scale_cols(&self.log_sigma.exp_elem())?
                .add_bias(&self.mu)?;
            clean.add(&noise)?
        } else {
            clean
        };
        if !logits.is_finite() {
            return Err(Error::Numeric {
                site: site.to_string(),
                detail: "non-finite gate logits".into(),
            });
        }
        let weights = logits.softmax()?;
        let selected = {
            let wd = weights.to_vec();
            let n = self.num_experts;
            (0..t)
                .map(|r| select_topk_slice(&wd[r * n..(r + 1) * n], self.top_k))
                .collect::<Result<Vec<_>>>()?
        };
        Ok((weights, selected))
    }

    /// Gate a single input vector.
    pub fn compute_gate(&self, x: &Tensor, rng: Option<&mut Rng>, site: &str) -> Result<GateDecision> {
        let m = self.in_dim;
        if x.shape() != [m] {
            return Err(Error::DimMismatch {
                op: "gate",
                lhs: x.shape().to_vec(),
                rhs: vec![m],
            });
        }
        let (weights, mut selected) = self.forward_rows(&x.reshape(&[1, m])?, rng, site)?;
        Ok(GateDecision {
            weights: weights.reshape(&[self.num_experts])?,
            selected: selected.pop().unwrap(),
        })
    }
}

/// Indices of the k largest entries, descending by value, ties broken by
/// ascending index. Deterministic.
pub fn select_topk(weights: &Tensor, k: usize) -> Result<Vec<usize>> {
    match weights.shape() {
        [_] => weights.with_data(|d| select_topk_slice(d, k)),
        s => Err(Error::DimMismatch {
            op: "select_topk",
            lhs: s.to_vec(),
            rhs: vec![],
        }),
    }
}

pub fn select_topk_slice(weights: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > weights.len() {
        return Err(Error::Validation(format!(
            "top-k {k} outside [1, {}]",
            weights.len()
        )));
    }
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    idx.sort_by(|&a, &b| {
        weights[b]
            .total_cmp(&weights[a])
            .then_with(|| a.cmp(&b))
    });
    idx.truncate(k);
    Ok(idx)
}
