//! Fused projection: frozen base weight plus a gated sum of low-rank expert
//! contributions. Routing is decided per token vector (optionally once per
//! utterance on the mean vector); only selected experts are evaluated, and
//! they only see the rows that routed to them.

use std::cell::Cell;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::gating::GatingRouter;
use crate::lora::LoraExpert;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Attention projection site an adapter is attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Site {
    Q,
    K,
    V,
    P,
}

pub const SITES: [Site; 4] = [Site::Q, Site::K, Site::V, Site::P];

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Site::Q => "Q",
            Site::K => "K",
            Site::V => "V",
            Site::P => "P",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingGranularity {
    /// Gate every sequence position independently.
    Token,
    /// Gate once on the mean-pooled sequence; all positions share the decision.
    Utterance,
}

/// Counts multiply-accumulate operations spent inside expert adapters,
/// shared by every projection of a model. Gate projections are not counted;
/// the sparse-vs-dense comparison is about expert work.
pub type MacCounter = Rc<Cell<u64>>;

pub struct MoeLoraProjection {
    w0: Tensor, // [d, m], frozen
    experts: Vec<LoraExpert>,
    router: GatingRouter,
    site: Site,
    layer: usize,
    granularity: RoutingGranularity,
    renormalize_topk: bool,
    macs: MacCounter,
    out_dim: usize,
    in_dim: usize,
}

impl MoeLoraProjection {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        w0: Tensor,
        experts: Vec<LoraExpert>,
        router: GatingRouter,
        site: Site,
        layer: usize,
        granularity: RoutingGranularity,
        renormalize_topk: bool,
        macs: MacCounter,
    ) -> Result<Self> {
        let (d, m) = match w0.shape() {
            [d, m] => (*d, *m),
            s => {
                return Err(Error::DimMismatch {
                    op: "moe_projection",
                    lhs: s.to_vec(),
                    rhs: vec![],
                })
            }
        };
        if w0.requires_grad() {
            return Err(Error::Validation(format!(
                "layer{layer}.{site}: base weight must be frozen"
            )));
        }
        if experts.is_empty() {
            return Err(Error::Validation(format!(
                "layer{layer}.{site}: no experts"
            )));
        }
        for e in &experts {
            if e.dims() != (d, m) {
                return Err(Error::Validation(format!(
                    "layer{layer}.{site}: expert dims {:?} != ({d}, {m})",
                    e.dims()
                )));
            }
        }
        if router.num_experts() != experts.len() || router.in_dim() != m {
            return Err(Error::Validation(format!(
                "layer{layer}.{site}: router shape mismatch"
            )));
        }
        Ok(MoeLoraProjection {
            w0,
            experts,
            router,
            site,
            layer,
            granularity,
            renormalize_topk,
            macs,
            out_dim: d,
            in_dim: m,
        })
    }

    pub fn site(&self) -> Site {
        self.site
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn w0(&self) -> &Tensor {
        &self.w0
    }

    pub fn experts(&self) -> &[LoraExpert] {
        &self.experts
    }

    pub fn router(&self) -> &GatingRouter {
        &self.router
    }

    pub fn set_train_mode(&self, on: bool) {
        self.router.set_train_mode(on);
    }

    fn site_label(&self) -> String {
        format!("layer{}.{}", self.layer, self.site)
    }

    /// Fused projection over a sequence: row t of the output is the fused
    /// projection of row t of the input, with routing decided independently
    /// per row. Experts outside a row's selection contribute exactly zero
    /// and do not compute for that row.
    pub fn forward_rows(&self, x: &Tensor, rng: Option<&mut Rng>) -> Result<Tensor> {
        let (t, m) = match x.shape() {
            [t, m] => (*t, *m),
            s => {
                return Err(Error::Validation(format!(
                    "{}: expected a [T, {}] input, got {:?}",
                    self.site_label(),
                    self.in_dim,
                    s
                )))
            }
        };
        if m != self.in_dim {
            return Err(Error::Validation(format!(
                "{}: input width {m} incompatible with projection [{}, {}]",
                self.site_label(),
                self.out_dim,
                self.in_dim
            )));
        }
        let base = x.linear(&self.w0)?;

        let label = self.site_label();
        let (weights, selected) = match self.granularity {
            RoutingGranularity::Token => self.router.forward_rows(x, rng, &label)?,
            RoutingGranularity::Utterance => {
                let pooled = x.mean_rows()?.reshape(&[1, m])?;
                let (w1, sel1) = self.router.forward_rows(&pooled, rng, &label)?;
                let w = w1.gather_rows(&vec![0; t])?;
                (w, vec![sel1[0].clone(); t])
            }
        };

        let n = self.experts.len();
        // Hard selection mask; gradients reach only the selected weights.
        let mut mask = vec![0.0; t * n];
        for (ti, sel) in selected.iter().enumerate() {
            for &i in sel {
                mask[ti * n + i] = 1.0;
            }
        }
        let mask = Tensor::from_vec(&[t, n], mask)?;
        let mut gate = weights.mul(&mask)?;
        if self.renormalize_topk {
            gate = gate.scale_rows(&gate.row_sums()?.recip())?;
        }

        let mut out = base;
        for (i, expert) in self.experts.iter().enumerate() {
            let rows: Vec<usize> = selected
                .iter()
                .enumerate()
                .filter(|(_, sel)| sel.contains(&i))
                .map(|(ti, _)| ti)
                .collect();
            if rows.is_empty() {
                continue;
            }
            let xi = x.gather_rows(&rows)?;
            let ei = expert.apply_rows(&xi)?;
            self.macs.set(
                self.macs.get()
                    + (rows.len() * expert.rank() * (self.in_dim + self.out_dim)) as u64,
            );
            let cells: Vec<(usize, usize)> = rows.iter().map(|&ti| (ti, i)).collect();
            let wi = gate.gather_cells(&cells)?;
            let contribution = Tensor::scatter_rows_weighted(&ei, &wi, &rows, t)?;
            out = out.add(&contribution)?;
        }
        Ok(out)
    }

    /// Fused projection of a single token vector.
    pub fn forward_token(&self, x: &Tensor, rng: Option<&mut Rng>) -> Result<Tensor> {
        if x.shape() != [self.in_dim] {
            return Err(Error::Validation(format!(
                "{}: expected a [{}] input, got {:?}",
                self.site_label(),
                self.in_dim,
                x.shape()
            )));
        }
        let row = x.reshape(&[1, self.in_dim])?;
        self.forward_rows(&row, rng)?.reshape(&[self.out_dim])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gating::select_topk_slice;
    use crate::tensor::grad_check;

    fn counter() -> MacCounter {
        Rc::new(Cell::new(0))
    }

    /// Projection matching the worked gate example: W_g x = [2, 1, 0] for
    /// x = [1, 2], expert updates [[0,1],[0,0]], [[1,0],[0,0]], zero.
    fn worked_projection(k: usize) -> MoeLoraProjection {
        let w0 = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let e0 = LoraExpert::from_parts(
            Tensor::param(&[2, 1], vec![1.0, 0.0]).unwrap(),
            Tensor::param(&[1, 2], vec![0.0, 1.0]).unwrap(),
            1.0,
        )
        .unwrap();
        let e1 = LoraExpert::from_parts(
            Tensor::param(&[2, 1], vec![1.0, 0.0]).unwrap(),
            Tensor::param(&[1, 2], vec![1.0, 0.0]).unwrap(),
            1.0,
        )
        .unwrap();
        let e2 = LoraExpert::from_parts(
            Tensor::param(&[2, 1], vec![1.0, 0.0]).unwrap(),
            Tensor::param(&[1, 2], vec![0.0, 0.0]).unwrap(),
            1.0,
        )
        .unwrap();
        let router = GatingRouter::init(2, 3, k, &mut Rng::new(0)).unwrap();
        router
            .w_gate()
            .with_data_mut(|d| d.copy_from_slice(&[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]));
        MoeLoraProjection::new(
            w0,
            vec![e0, e1, e2],
            router,
            Site::Q,
            0,
            RoutingGranularity::Token,
            false,
            counter(),
        )
        .unwrap()
    }

    #[test]
    fn worked_example_top2() {
        let p = worked_projection(2);
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let h = p.forward_token(&x, None).unwrap().to_vec();
        // softmax([2,1,0]) = [0.66524, 0.24473, 0.09003]; experts 0 and 1 win
        let e = [2.0f64.exp(), 1.0f64.exp(), 1.0];
        let z: f64 = e.iter().sum();
        let (g0, g1) = (e[0] / z, e[1] / z);
        assert!((h[0] - (1.0 + g0 * 2.0 + g1 * 1.0)).abs() < 1e-14);
        assert!((h[1] - 2.0).abs() < 1e-14);
        // spec-quoted values
        assert!((h[0] - 2.57521).abs() < 1e-5, "{}", h[0]);
        assert!((h[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn worked_example_top1() {
        let p = worked_projection(1);
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let h = p.forward_token(&x, None).unwrap().to_vec();
        assert!((h[0] - 2.33048).abs() < 1e-5, "{}", h[0]);
        assert!((h[1] - 2.0).abs() < 1e-12);
    }

    fn random_projection(
        d: usize,
        m: usize,
        n: usize,
        r: usize,
        k: usize,
        seed: u64,
        granularity: RoutingGranularity,
    ) -> MoeLoraProjection {
        let mut rng = Rng::new(seed);
        let w0 = Tensor::randn(&[d, m], 1.0, &mut rng);
        let experts: Vec<LoraExpert> = (0..n)
            .map(|_| {
                let e = LoraExpert::init(d, m, r, 1.0, &mut rng).unwrap();
                e.b().with_data_mut(|data| rng.fill_gaussian(data, 0.5));
                e
            })
            .collect();
        let router = GatingRouter::init(m, n, k, &mut rng).unwrap();
        MoeLoraProjection::new(
            w0,
            experts,
            router,
            Site::V,
            1,
            granularity,
            false,
            counter(),
        )
        .unwrap()
    }

    /// Brute-force reference: dense evaluation of every expert with manual
    /// masking, written with plain loops (no tensor machinery).
    pub(crate) fn dense_masked_oracle(p: &MoeLoraProjection, x: &[f64]) -> Vec<f64> {
        let (d, m) = (p.out_dim, p.in_dim);
        let n = p.experts.len();
        let w0 = p.w0.to_vec();
        let wg = p.router.w_gate().to_vec();
        let mut logits = vec![0.0; n];
        for i in 0..n {
            for j in 0..m {
                logits[i] += wg[i * m + j] * x[j];
            }
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let weights: Vec<f64> = exps.iter().map(|v| v / z).collect();
        let selected = select_topk_slice(&weights, p.router.top_k()).unwrap();

        let mut h = vec![0.0; d];
        for i in 0..d {
            for j in 0..m {
                h[i] += w0[i * m + j] * x[j];
            }
        }
        for e in 0..n {
            if !selected.contains(&e) {
                continue; // manual masking
            }
            let a = p.experts[e].a().to_vec();
            let b = p.experts[e].b().to_vec();
            let r = p.experts[e].rank();
            let mut u = vec![0.0; r];
            for ri in 0..r {
                for j in 0..m {
                    u[ri] += b[ri * m + j] * x[j];
                }
            }
            for i in 0..d {
                let mut v = 0.0;
                for ri in 0..r {
                    v += a[i * r + ri] * u[ri];
                }
                h[i] += weights[e] * v;
            }
        }
        h
    }

    #[test]
    fn matches_dense_masked_oracle_on_random_configs() {
        let mut dims = Rng::new(2024);
        for trial in 0..50 {
            let d = dims.int_range(2, 16);
            let m = dims.int_range(2, 16);
            let n = dims.int_range(1, 7);
            let r = dims.int_range(1, 4.min(d.min(m)));
            let k = dims.int_range(1, n);
            let p = random_projection(d, m, n, r, k, 9000 + trial, RoutingGranularity::Token);
            let mut xr = Rng::new(31 + trial);
            let x: Vec<f64> = (0..m).map(|_| xr.gaussian()).collect();
            let got = p
                .forward_token(&Tensor::from_vec(&[m], x.clone()).unwrap(), None)
                .unwrap()
                .to_vec();
            let want = dense_masked_oracle(&p, &x);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() <= 1e-12, "trial {trial}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn zero_init_is_transparent_for_any_router_state() {
        let mut rng = Rng::new(5);
        let d = 6;
        let m = 4;
        let w0 = Tensor::randn(&[d, m], 1.0, &mut rng);
        let experts: Vec<LoraExpert> = (0..3)
            .map(|_| LoraExpert::init(d, m, 2, 1.0, &mut rng).unwrap())
            .collect();
        let router = GatingRouter::init(m, 3, 2, &mut rng).unwrap();
        let p = MoeLoraProjection::new(
            w0.clone(),
            experts,
            router,
            Site::K,
            2,
            RoutingGranularity::Token,
            false,
            counter(),
        )
        .unwrap();
        let x = Tensor::randn(&[5, m], 1.0, &mut rng);
        let h = p.forward_rows(&x, None).unwrap().to_vec();
        let base = x.linear(&w0).unwrap().to_vec();
        assert_eq!(h, base);
    }

    #[test]
    fn single_row_sequence_equals_token_forward() {
        let p = random_projection(5, 4, 3, 2, 2, 77, RoutingGranularity::Token);
        let mut rng = Rng::new(3);
        let x = Tensor::randn(&[4], 1.0, &mut rng);
        let via_token = p.forward_token(&x, None).unwrap().to_vec();
        let via_rows = p
            .forward_rows(&x.reshape(&[1, 4]).unwrap(), None)
            .unwrap()
            .to_vec();
        assert_eq!(via_token, via_rows);
    }

    #[test]
    fn duplicate_rows_get_identical_outputs() {
        let p = random_projection(5, 4, 4, 2, 2, 78, RoutingGranularity::Token);
        let mut rng = Rng::new(4);
        let row: Vec<f64> = (0..4).map(|_| rng.gaussian()).collect();
        let mut data = row.clone();
        data.extend_from_slice(&row);
        data.extend(["0.5", "1.5", "-0.5", "0.25"].iter().map(|s| s.parse::<f64>().unwrap()));
        data.extend_from_slice(&row);
        let x = Tensor::from_vec(&[4, 4], data).unwrap();
        let h = p.forward_rows(&x, None).unwrap().to_vec();
        assert_eq!(h[0..5], h[5..10]);
        assert_eq!(h[0..5], h[15..20]);
    }

    #[test]
    fn k_equals_n_is_bit_identical_to_unmasked_dense_sum() {
        let p = random_projection(6, 5, 4, 2, 4, 101, RoutingGranularity::Token);
        let mut rng = Rng::new(6);
        let x = Tensor::randn(&[7, 5], 1.0, &mut rng);
        let sparse = p.forward_rows(&x, None).unwrap().to_vec();

        // Unmasked dense composition from the same primitive ops.
        let (weights, _) = p.router.forward_rows(&x, None, "dense").unwrap();
        let mut dense = x.linear(&p.w0).unwrap();
        for (i, e) in p.experts.iter().enumerate() {
            let all: Vec<usize> = (0..7).collect();
            let ei = e.apply_rows(&x.gather_rows(&all).unwrap()).unwrap();
            let cells: Vec<(usize, usize)> = (0..7).map(|t| (t, i)).collect();
            let wi = weights.gather_cells(&cells).unwrap();
            let c = Tensor::scatter_rows_weighted(&ei, &wi, &all, 7).unwrap();
            dense = dense.add(&c).unwrap();
        }
        let dense = dense.to_vec();
        for (a, b) in sparse.iter().zip(&dense) {
            assert_eq!(a.to_bits(), b.to_bits(), "{a} vs {b}");
        }
    }

    #[test]
    fn perturbing_unselected_expert_changes_nothing() {
        let p = random_projection(5, 4, 3, 2, 1, 202, RoutingGranularity::Token);
        let mut rng = Rng::new(8);
        let x = Tensor::randn(&[4], 1.0, &mut rng);
        let decision = p.router.compute_gate(&x, None, "t").unwrap();
        let unselected = (0..3).find(|i| !decision.selected.contains(i)).unwrap();
        let before = p.forward_token(&x, None).unwrap().to_vec();
        p.experts[unselected]
            .a()
            .with_data_mut(|d| d.iter_mut().for_each(|v| *v += 123.0));
        p.experts[unselected]
            .b()
            .with_data_mut(|d| d.iter_mut().for_each(|v| *v += 123.0));
        let after = p.forward_token(&x, None).unwrap().to_vec();
        assert_eq!(before, after);
    }

    #[test]
    fn utterance_routing_shares_one_decision() {
        let p = random_projection(5, 4, 3, 2, 1, 303, RoutingGranularity::Utterance);
        let mut rng = Rng::new(9);
        let x = Tensor::randn(&[6, 4], 1.0, &mut rng);
        // with a shared decision every row uses the same expert subset, so
        // scaling any one unselected expert changes nothing for all rows
        let pooled = x.mean_rows().unwrap();
        let decision = p.router.compute_gate(&pooled, None, "t").unwrap();
        let unselected = (0..3).find(|i| !decision.selected.contains(i)).unwrap();
        let before = p.forward_rows(&x, None).unwrap().to_vec();
        p.experts[unselected]
            .b()
            .with_data_mut(|d| d.iter_mut().for_each(|v| *v += 5.0));
        let after = p.forward_rows(&x, None).unwrap().to_vec();
        assert_eq!(before, after);
    }

    #[test]
    fn renormalized_selected_weights_sum_to_one() {
        let mut rng = Rng::new(11);
        let w0 = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let experts: Vec<LoraExpert> = (0..3)
            .map(|_| {
                let e = LoraExpert::init(3, 3, 1, 1.0, &mut rng).unwrap();
                // identity-ish update so the gate weight is readable from output
                e.a().with_data_mut(|d| d.copy_from_slice(&[1.0, 0.0, 0.0]));
                e.b().with_data_mut(|d| d.copy_from_slice(&[1.0, 0.0, 0.0]));
                e
            })
            .collect();
        let router = GatingRouter::init(3, 3, 2, &mut rng).unwrap();
        let p = MoeLoraProjection::new(
            w0.clone(),
            experts,
            router,
            Site::P,
            0,
            RoutingGranularity::Token,
            true,
            counter(),
        )
        .unwrap();
        let x = Tensor::from_vec(&[3], vec![1.0, 0.0, 0.0]).unwrap();
        // every expert update maps x to [x0, 0, 0]; with renormalization the
        // summed gate weight is exactly 1, so h = W0 x + [1, 0, 0]
        let h = p.forward_token(&x, None).unwrap().to_vec();
        let base = x
            .reshape(&[1, 3])
            .unwrap()
            .linear(&w0)
            .unwrap()
            .to_vec();
        assert!((h[0] - (base[0] + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn mac_counter_scales_with_k() {
        let sparse = random_projection(8, 8, 7, 2, 2, 404, RoutingGranularity::Token);
        let dense = random_projection(8, 8, 7, 2, 7, 404, RoutingGranularity::Token);
        let mut rng = Rng::new(12);
        let x = Tensor::randn(&[50, 8], 1.0, &mut rng);
        sparse.forward_rows(&x, None).unwrap();
        dense.forward_rows(&x, None).unwrap();
        let s = sparse.macs.get() as f64;
        let d = dense.macs.get() as f64;
        assert!((s / d - 2.0 / 7.0).abs() < 1e-12, "ratio {}", s / d);
    }

    #[test]
    fn gradients_through_fused_projection() {
        let p = random_projection(4, 3, 3, 2, 2, 505, RoutingGranularity::Token);
        let mut rng = Rng::new(13);
        let x = Tensor::randn(&[2, 3], 0.8, &mut rng);
        let mut params: Vec<Tensor> = Vec::new();
        for e in p.experts() {
            params.push(e.a().clone());
            params.push(e.b().clone());
        }
        for (_, t) in p.router().params() {
            params.push(t.clone());
        }
        let rel = grad_check(
            move || Ok(p.forward_rows(&x, None)?.tanh().sum_all()),
            &params,
            1e-5,
        )
        .unwrap();
        assert!(rel < 1e-6, "relative error {rel}");
    }

    #[test]
    fn mismatched_input_names_site_and_layer() {
        let p = random_projection(4, 3, 2, 1, 1, 606, RoutingGranularity::Token);
        let x = Tensor::zeros(&[2, 9]);
        let err = p.forward_rows(&x, None).unwrap_err().to_string();
        assert!(err.contains("layer1.V"), "{err}");
    }
}
