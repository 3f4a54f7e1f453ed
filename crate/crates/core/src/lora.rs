//! Low-rank adapter: the (A, B) pair whose product is the weight update,
//! its forward contribution, merging into the frozen weight, and largest
//! singular value of the update for per-expert analysis.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{no_grad, Tensor};

/// One low-rank adapter for a [d, m] projection. A: [d, r], B: [r, m].
/// A is Gaussian-initialized, B starts at zero, so the adapter contributes
/// exactly nothing until trained.
#[derive(Clone)]
pub struct LoraExpert {
    a: Tensor,
    b: Tensor,
    rank: usize,
    out_dim: usize,
    in_dim: usize,
    /// Scalar multiplier on the contribution; the update is literally A B x,
    /// so this defaults to 1.0.
    scale: f64,
}

impl LoraExpert {
    pub fn init(out_dim: usize, in_dim: usize, rank: usize, scale: f64, rng: &mut Rng) -> Result<Self> {
        if rank == 0 || rank > out_dim.min(in_dim) {
            return Err(Error::Validation(format!(
                "lora rank {rank} outside [1, min({out_dim}, {in_dim})]"
            )));
        }
        let std = (1.0 / rank as f64).sqrt();
        let a = Tensor::randn(&[out_dim, rank], std, rng);
        a.set_requires_grad(true);
        let b = Tensor::zeros(&[rank, in_dim]);
        b.set_requires_grad(true);
        Ok(LoraExpert {
            a,
            b,
            rank,
            out_dim,
            in_dim,
            scale,
        })
    }

    pub fn from_parts(a: Tensor, b: Tensor, scale: f64) -> Result<Self> {
        let (d, r) = match a.shape() {
            [d, r] => (*d, *r),
            s => {
                return Err(Error::DimMismatch {
                    op: "lora_from_parts",
                    lhs: s.to_vec(),
                    rhs: vec![],
                })
            }
        };
        let (r2, m) = match b.shape() {
            [r2, m] => (*r2, *m),
            s => {
                return Err(Error::DimMismatch {
                    op: "lora_from_parts",
                    lhs: a.shape().to_vec(),
                    rhs: s.to_vec(),
                })
            }
        };
        if r != r2 {
            return Err(Error::DimMismatch {
                op: "lora_from_parts",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        Ok(LoraExpert {
            a,
            b,
            rank: r,
            out_dim: d,
            in_dim: m,
            scale,
        })
    }

    pub fn a(&self) -> &Tensor {
        &self.a
    }

    pub fn b(&self) -> &Tensor {
        &self.b
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.out_dim, self.in_dim)
    }

    /// Adapter contribution for a batch of row vectors: (X B^T) A^T,
    /// computed right-to-left through the thin factors. [n, m] -> [n, d].
    pub fn apply_rows(&self, rows: &Tensor) -> Result<Tensor> {
        let u = rows.linear(&self.b)?;
        let v = u.linear(&self.a)?;
        Ok(if self.scale == 1.0 { v } else { v.scale(self.scale) })
    }

    /// Adapted projection of a single input vector: W0 x + A (B x).
    pub fn forward(&self, w0: &Tensor, x: &Tensor) -> Result<Tensor> {
        if w0.requires_grad() {
            return Err(Error::Validation(
                "lora forward expects a frozen base weight".into(),
            ));
        }
        let m = self.in_dim;
        if w0.shape() != [self.out_dim, m] || x.shape() != [m] {
            return Err(Error::DimMismatch {
                op: "lora_forward",
                lhs: w0.shape().to_vec(),
                rhs: x.shape().to_vec(),
            });
        }
        let row = x.reshape(&[1, m])?;
        let base = row.linear(w0)?;
        let delta = self.apply_rows(&row)?;
        base.add(&delta)?.reshape(&[self.out_dim])
    }

    /// Merged weight W' = W0 + A B (scaled).
    pub fn merge(&self, w0: &Tensor) -> Result<Tensor> {
        if w0.shape() != [self.out_dim, self.in_dim] {
            return Err(Error::DimMismatch {
                op: "lora_merge",
                lhs: w0.shape().to_vec(),
                rhs: vec![self.out_dim, self.in_dim],
            });
        }
        no_grad(|| {
            let delta = self.a.matmul(&self.b)?.scale(self.scale);
            w0.add(&delta)
        })
    }

    /// Largest singular value of the update A B, via power iteration
    /// expressed through the thin factors; the full [d, m] matrix is never
    /// decomposed. 200 iterations or 1e-12 relative convergence.
    pub fn sigma_max(&self) -> f64 {
        let a = self.a.to_vec();
        let b = self.b.to_vec();
        let (d, r, m) = (self.out_dim, self.rank, self.in_dim);
        let mut seed_rng = Rng::new(0x5157_u64);
        let mut v: Vec<f64> = (0..m).map(|_| seed_rng.gaussian()).collect();
        let norm = l2(&v);
        if norm == 0.0 {
            return 0.0;
        }
        for x in v.iter_mut() {
            *x /= norm;
        }
        let mut sigma_prev = f64::NEG_INFINITY;
        let mut sigma = 0.0;
        for _ in 0..200 {
            // w = A (B v)
            let u = matvec(&b, &v, r, m);
            let w = matvec(&a, &u, d, r);
            sigma = l2(&w) * self.scale.abs();
            if (sigma - sigma_prev).abs() <= 1e-12 * sigma.max(1.0) {
                return sigma;
            }
            sigma_prev = sigma;
            // v <- normalize(B^T (A^T w))
            let p = matvec_t(&a, &w, d, r);
            let q = matvec_t(&b, &p, r, m);
            let qn = l2(&q);
            if qn == 0.0 {
                return 0.0;
            }
            v = q;
            for x in v.iter_mut() {
                *x /= qn;
            }
        }
        sigma
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// y = M v for row-major M: [rows, cols].
fn matvec(m: &[f64], v: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows)
        .map(|i| {
            m[i * cols..(i + 1) * cols]
                .iter()
                .zip(v)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect()
}

/// y = M^T v for row-major M: [rows, cols].
fn matvec_t(m: &[f64], v: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for i in 0..rows {
        let row = &m[i * cols..(i + 1) * cols];
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * v[i];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    #[test]
    fn zero_init_contributes_nothing() {
        let mut rng = Rng::new(1);
        let e = LoraExpert::init(4, 4, 2, 1.0, &mut rng).unwrap();
        let w0 = Tensor::randn(&[4, 4], 1.0, &mut rng);
        let x = Tensor::randn(&[4], 1.0, &mut rng);
        let adapted = e.forward(&w0, &x).unwrap().to_vec();
        let base = x.reshape(&[1, 4]).unwrap().linear(&w0).unwrap().to_vec();
        assert_eq!(adapted, base);
    }

    #[test]
    fn parameter_count_matches_r_times_d_plus_m() {
        let mut rng = Rng::new(2);
        let e = LoraExpert::init(4, 4, 2, 1.0, &mut rng).unwrap();
        assert_eq!(e.a().numel() + e.b().numel(), 16);
    }

    #[test]
    fn same_seed_same_init() {
        let a1 = LoraExpert::init(6, 5, 2, 1.0, &mut Rng::new(9)).unwrap();
        let a2 = LoraExpert::init(6, 5, 2, 1.0, &mut Rng::new(9)).unwrap();
        assert_eq!(a1.a().to_vec(), a2.a().to_vec());
    }

    #[test]
    fn rank_out_of_range_rejected() {
        assert!(LoraExpert::init(4, 4, 5, 1.0, &mut Rng::new(0)).is_err());
        assert!(LoraExpert::init(4, 4, 0, 1.0, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn forward_hand_example() {
        // W0 = I2, x = [1,2], A = [[1],[0]], B = [[0,1]] => [3, 2]
        let w0 = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = Tensor::param(&[2, 1], vec![1.0, 0.0]).unwrap();
        let b = Tensor::param(&[1, 2], vec![0.0, 1.0]).unwrap();
        let e = LoraExpert::from_parts(a, b, 1.0).unwrap();
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        assert_eq!(e.forward(&w0, &x).unwrap().to_vec(), vec![3.0, 2.0]);
    }

    #[test]
    fn zero_input_zero_output() {
        let mut rng = Rng::new(3);
        let e = LoraExpert::init(3, 3, 1, 1.0, &mut rng).unwrap();
        let w0 = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let x = Tensor::zeros(&[3]);
        assert_eq!(e.forward(&w0, &x).unwrap().to_vec(), vec![0.0; 3]);
    }

    #[test]
    fn merge_equals_forward_path() {
        let mut rng = Rng::new(4);
        let e = LoraExpert::init(8, 8, 2, 1.0, &mut rng).unwrap();
        // give B nonzero values so the adapter actually does something
        e.b.with_data_mut(|d| rng.fill_gaussian(d, 0.5));
        let w0 = Tensor::randn(&[8, 8], 1.0, &mut rng);
        let merged = e.merge(&w0).unwrap();
        for _ in 0..100 {
            let x = Tensor::randn(&[8], 1.0, &mut rng);
            let via_forward = e.forward(&w0, &x).unwrap().to_vec();
            let via_merge = x
                .reshape(&[1, 8])
                .unwrap()
                .linear(&merged)
                .unwrap()
                .to_vec();
            for (p, q) in via_forward.iter().zip(&via_merge) {
                let denom = p.abs().max(q.abs()).max(1.0);
                assert!((p - q).abs() / denom < 1e-10, "{p} vs {q}");
            }
        }
    }

    #[test]
    fn merge_with_zero_adapter_is_identity() {
        let mut rng = Rng::new(5);
        let e = LoraExpert::init(4, 6, 2, 1.0, &mut rng).unwrap();
        let w0 = Tensor::randn(&[4, 6], 1.0, &mut rng);
        assert_eq!(e.merge(&w0).unwrap().to_vec(), w0.to_vec());
    }

    #[test]
    fn sigma_max_zero_adapter() {
        let mut rng = Rng::new(6);
        let e = LoraExpert::init(5, 5, 2, 1.0, &mut rng).unwrap();
        assert_eq!(e.sigma_max(), 0.0);
    }

    #[test]
    fn sigma_max_rank_one_hand_case() {
        // A = [[1],[1]], B = [[1,1]] => delta = all-ones 2x2, sigma = 2
        let a = Tensor::from_vec(&[2, 1], vec![1.0, 1.0]).unwrap();
        let b = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap();
        let e = LoraExpert::from_parts(a, b, 1.0).unwrap();
        assert!((e.sigma_max() - 2.0).abs() < 1e-10);
    }

    #[test]
    fn sigma_max_matches_explicit_svd() {
        let mut rng = Rng::new(7);
        for trial in 0..20 {
            let e = LoraExpert::init(8, 6, 2, 1.0, &mut rng).unwrap();
            e.b.with_data_mut(|d| rng.fill_gaussian(d, 0.7));
            let delta = e.a.matmul(&e.b).unwrap();
            let nd = nalgebra::DMatrix::from_row_slice(8, 6, &delta.to_vec());
            let oracle = nd.svd(false, false).singular_values[0];
            let got = e.sigma_max();
            assert!(
                (got - oracle).abs() < 1e-8,
                "trial {trial}: {got} vs svd {oracle}"
            );
        }
    }

    #[test]
    fn rank_bound_on_singular_values() {
        // singular values of A B beyond index r are below 1e-10
        let mut rng = Rng::new(8);
        let e = LoraExpert::init(7, 9, 3, 1.0, &mut rng).unwrap();
        e.b.with_data_mut(|d| rng.fill_gaussian(d, 1.0));
        let delta = e.a.matmul(&e.b).unwrap();
        let nd = nalgebra::DMatrix::from_row_slice(7, 9, &delta.to_vec());
        let svals = nd.svd(false, false).singular_values;
        for (i, s) in svals.iter().enumerate() {
            if i >= 3 {
                assert!(*s < 1e-10, "sigma_{i} = {s}");
            }
        }
    }

    #[test]
    fn step_one_gradient_structure() {
        // with B = 0, grad(A) = 0 at step one while grad(B) != 0 generically
        let mut rng = Rng::new(10);
        let e = LoraExpert::init(4, 4, 2, 1.0, &mut rng).unwrap();
        let w0 = Tensor::randn(&[4, 4], 1.0, &mut rng);
        let x = Tensor::randn(&[4], 1.0, &mut rng);
        let loss = e.forward(&w0, &x).unwrap().sum_all();
        loss.backward().unwrap();
        let ga = e.a().grad_vec().unwrap();
        let gb = e.b().grad_vec().unwrap();
        assert!(ga.iter().all(|&v| v == 0.0), "grad(A) should be exactly 0");
        assert!(gb.iter().any(|&v| v != 0.0), "grad(B) should be nonzero");
    }

    #[test]
    fn gradients_check_against_finite_differences() {
        let mut rng = Rng::new(11);
        let e = LoraExpert::init(5, 4, 2, 1.0, &mut rng).unwrap();
        e.b.with_data_mut(|d| rng.fill_gaussian(d, 0.3));
        let w0 = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let x = Tensor::randn(&[4], 1.0, &mut rng);
        let ec = e.clone();
        let params = [e.a().clone(), e.b().clone()];
        let rel = grad_check(
            move || Ok(ec.forward(&w0, &x)?.tanh().sum_all()),
            &params,
            1e-5,
        )
        .unwrap();
        assert!(rel < 1e-7, "relative error {rel}");
    }
}
