//! Trainable classifier back end: mean-pool over time, two-layer MLP,
//! two logits (bonafide = class 0, spoof = class 1). The score used for
//! EER is logit_0 - logit_1, so higher means more bonafide.

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub struct Head {
    w1: Tensor, // [hidden, d]
    b1: Tensor, // [hidden]
    w2: Tensor, // [2, hidden]
    b2: Tensor, // [2]
}

impl Head {
    /// The output layer starts near zero so early training drives the score
    /// ordering rather than fighting a random initial classifier.
    pub fn init(model_dim: usize, hidden: usize, rng: &mut Rng) -> Head {
        let w1 = Tensor::randn(&[hidden, model_dim], (1.0 / model_dim as f64).sqrt(), rng);
        w1.set_requires_grad(true);
        let b1 = Tensor::zeros(&[hidden]);
        b1.set_requires_grad(true);
        let w2 = Tensor::randn(&[2, hidden], 1e-3, rng);
        w2.set_requires_grad(true);
        let b2 = Tensor::zeros(&[2]);
        b2.set_requires_grad(true);
        Head { w1, b1, w2, b2 }
    }

    /// Frames [t, d] -> logits [2].
    pub fn classify(&self, frames: &Tensor) -> Result<Tensor> {
        let d = self.w1.shape()[1];
        let pooled = frames.mean_rows()?.reshape(&[1, d])?;
        let hidden = pooled.linear(&self.w1)?.add_bias(&self.b1)?.tanh();
        hidden
            .linear(&self.w2)?
            .add_bias(&self.b2)?
            .reshape(&[2])
    }

    pub fn params(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// EER score convention: logit_0 - logit_1.
pub fn score_from_logits(logits: &Tensor) -> Result<f64> {
    let v = logits.to_vec();
    Ok(v[0] - v[1])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_invariant_to_length_for_constant_frames() {
        let mut rng = Rng::new(1);
        let head = Head::init(4, 8, &mut rng);
        let row: Vec<f64> = (0..4).map(|_| rng.gaussian()).collect();
        let short = Tensor::from_vec(&[1, 4], row.clone()).unwrap();
        let mut long_data = Vec::new();
        for _ in 0..9 {
            long_data.extend_from_slice(&row);
        }
        let long = Tensor::from_vec(&[9, 4], long_data).unwrap();
        let a = head.classify(&short).unwrap().to_vec();
        let b = head.classify(&long).unwrap().to_vec();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weights_reduce_to_output_bias() {
        let mut rng = Rng::new(2);
        let head = Head::init(4, 8, &mut rng);
        head.w1.with_data_mut(|d| d.fill(0.0));
        head.w2.with_data_mut(|d| d.fill(0.0));
        head.b2.with_data_mut(|d| d.copy_from_slice(&[0.3, -0.7]));
        let x = Tensor::randn(&[5, 4], 1.0, &mut rng);
        assert_eq!(head.classify(&x).unwrap().to_vec(), vec![0.3, -0.7]);
    }

    #[test]
    fn frame_order_does_not_change_logits() {
        let mut rng = Rng::new(3);
        let head = Head::init(4, 8, &mut rng);
        let x = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let mut data = x.to_vec();
        let logits = head.classify(&x).unwrap().to_vec();
        // reverse frame order
        let mut rev = Vec::new();
        for chunk in data.chunks_exact(4).rev() {
            rev.extend_from_slice(chunk);
        }
        data.copy_from_slice(&rev);
        let xr = Tensor::from_vec(&[6, 4], data).unwrap();
        let logits_r = head.classify(&xr).unwrap().to_vec();
        for (a, b) in logits.iter().zip(&logits_r) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
