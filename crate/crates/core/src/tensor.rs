//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Each operation records its inputs and a backward closure on the produced
//! node; `backward()` on a scalar loss walks the graph in reverse topological
//! order and accumulates gradients into every reachable tensor that requires
//! them. The graph is rebuilt on every forward pass and consumable exactly
//! once. Single-threaded per model instance.

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::rng::Rng;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Run `f` without recording any graph structure. Forward values are
/// unchanged; backward through anything produced inside is impossible.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Guard(bool);
    impl Drop for Guard {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let _guard = Guard(prev);
    f()
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

type BackwardFn = Box<dyn Fn(&[f64])>;

struct Node {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: Cell<bool>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
    consumed: Cell<bool>,
}

/// Dense row-major tensor. Cloning is cheap and aliases the same storage.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad.get())
            .finish()
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor {
            node: Rc::new(Node {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(requires_grad),
                parents: Vec::new(),
                backward: None,
                consumed: Cell::new(false),
            }),
        }
    }

    fn interior(shape: Vec<usize>, data: Vec<f64>, parents: Vec<Tensor>, backward: BackwardFn) -> Tensor {
        if grad_enabled() && parents.iter().any(Tensor::tracked) {
            Tensor {
                node: Rc::new(Node {
                    shape,
                    data: RefCell::new(data),
                    grad: RefCell::new(None),
                    requires_grad: Cell::new(false),
                    parents,
                    backward: Some(backward),
                    consumed: Cell::new(false),
                }),
            }
        } else {
            Tensor::leaf(shape, data, false)
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if numel_of(shape) != data.len() {
            return Err(Error::Validation(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel_of(shape),
                data.len()
            )));
        }
        Ok(Tensor::leaf(shape.to_vec(), data, false))
    }

    /// Trainable leaf.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::from_vec(shape, data)?;
        t.node.requires_grad.set(true);
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::leaf(shape.to_vec(), vec![0.0; numel_of(shape)], false)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::leaf(vec![1], vec![v], false)
    }

    /// Leaf filled with N(0, std^2) samples.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
        let mut data = vec![0.0; numel_of(shape)];
        rng.fill_gaussian(&mut data, std);
        Tensor::leaf(shape.to_vec(), data, false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.node.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad.get()
    }

    pub fn set_requires_grad(&self, v: bool) {
        self.node.requires_grad.set(v);
    }

    fn tracked(&self) -> bool {
        self.node.requires_grad.get() || self.node.backward.is_some()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.node.data.borrow().clone()
    }

    /// Scalar value; errors unless the tensor has exactly one element.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.node.data.borrow()[0])
    }

    pub fn grad_vec(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Mutate the underlying values (optimizer updates, finite differences).
    pub fn with_data_mut<R>(&self, f: impl FnOnce(&mut [f64]) -> R) -> R {
        f(&mut self.node.data.borrow_mut())
    }

    pub fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.node.data.borrow())
    }

    pub fn is_finite(&self) -> bool {
        self.node.data.borrow().iter().all(|v| v.is_finite())
    }

    fn ptr(&self) -> *const Node {
        Rc::as_ptr(&self.node)
    }

    /// Accumulate `delta` into this tensor's gradient if it participates in
    /// the graph. Frozen leaves are skipped entirely, so their grad slot
    /// stays absent.
    fn accumulate(&self, delta: &[f64]) {
        if !self.tracked() {
            return;
        }
        let mut g = self.node.grad.borrow_mut();
        let buf = g.get_or_insert_with(|| vec![0.0; self.numel()]);
        for (a, b) in buf.iter_mut().zip(delta) {
            *a += *b;
        }
    }

    /// Like `accumulate` but hands the kernel a zero-initialized buffer to
    /// add into directly, avoiding a scratch allocation.
    fn accumulate_with(&self, kernel: impl FnOnce(&mut [f64])) {
        if !self.tracked() {
            return;
        }
        let mut g = self.node.grad.borrow_mut();
        let buf = g.get_or_insert_with(|| vec![0.0; self.numel()]);
        kernel(buf);
    }

    /// Reverse-mode sweep from a scalar loss. Populates the gradient of
    /// every reachable tensor with `requires_grad`; interior activations are
    /// freed as the sweep passes them. The graph may be consumed once.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward() requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if self.node.consumed.get() {
            return Err(Error::Contract(
                "backward() called on an already-consumed graph".into(),
            ));
        }
        let order = self.topo_order();
        for t in &order {
            t.node.consumed.set(true);
        }
        *self.node.grad.borrow_mut() = Some(vec![1.0]);
        for t in order.iter().rev() {
            let grad = t.node.grad.borrow().clone();
            let Some(grad) = grad else { continue };
            if let Some(back) = &t.node.backward {
                back(&grad);
            }
            if !t.node.requires_grad.get() && !t.node.parents.is_empty() {
                *t.node.grad.borrow_mut() = None;
            }
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Tensor> {
        enum Phase {
            Enter,
            Exit,
        }
        let mut visited: HashSet<*const Node> = HashSet::new();
        let mut order = Vec::new();
        let mut stack = vec![(self.clone(), Phase::Enter)];
        while let Some((t, phase)) = stack.pop() {
            match phase {
                Phase::Enter => {
                    if !visited.insert(t.ptr()) {
                        continue;
                    }
                    stack.push((t.clone(), Phase::Exit));
                    for p in &t.node.parents {
                        if p.tracked() && !visited.contains(&p.ptr()) {
                            stack.push((p.clone(), Phase::Enter));
                        }
                    }
                }
                Phase::Exit => order.push(t),
            }
        }
        order
    }
}

// ── raw kernels ──────────────────────────────────────────────────────

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    let (a4, a_rest) = a.split_at(chunks * 4);
    let (b4, b_rest) = b.split_at(chunks * 4);
    for (ca, cb) in a4.chunks_exact(4).zip(b4.chunks_exact(4)) {
        acc[0] += ca[0] * cb[0];
        acc[1] += ca[1] * cb[1];
        acc[2] += ca[2] * cb[2];
        acc[3] += ca[3] * cb[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in a_rest.iter().zip(b_rest) {
        s += x * y;
    }
    s
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// C[m,n] += A[m,k] * B[k,n]
fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            axpy(av, &b[kk * n..(kk + 1) * n], crow);
        }
    }
}

/// C[t,j] = dot(X[t,:], W[j,:])  (X: [t,m], W: [d,m])
fn xwt(x: &[f64], w: &[f64], out: &mut [f64], t: usize, m: usize, d: usize) {
    for ti in 0..t {
        let xrow = &x[ti * m..(ti + 1) * m];
        let orow = &mut out[ti * d..(ti + 1) * d];
        for (j, o) in orow.iter_mut().enumerate() {
            *o = dot(xrow, &w[j * m..(j + 1) * m]);
        }
    }
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

// ── operations ───────────────────────────────────────────────────────

impl Tensor {
    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::DimMismatch {
                op,
                lhs: self.shape().to_vec(),
                rhs: vec![],
            }),
        }
    }

    /// Standard matrix product: [m,k] x [k,n] -> [m,n].
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = rhs.dims2("matmul")?;
        if k != k2 {
            return Err(Error::DimMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(&self.node.data.borrow(), &rhs.node.data.borrow(), &mut out, m, k, n);
        let a = self.clone();
        let b = rhs.clone();
        Ok(Tensor::interior(
            vec![m, n],
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                // dA[i,kk] = dot(dC[i,:], B[kk,:]); dB[kk,:] += sum_i A[i,kk] dC[i,:]
                a.accumulate_with(|da| {
                    let bd = b.node.data.borrow();
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        let darow = &mut da[i * k..(i + 1) * k];
                        for (kk, d) in darow.iter_mut().enumerate() {
                            *d += dot(grow, &bd[kk * n..(kk + 1) * n]);
                        }
                    }
                });
                b.accumulate_with(|db| {
                    let ad = a.node.data.borrow();
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        let arow = &ad[i * k..(i + 1) * k];
                        for (kk, &av) in arow.iter().enumerate() {
                            axpy(av, grow, &mut db[kk * n..(kk + 1) * n]);
                        }
                    }
                });
            }),
        ))
    }

    /// Row-wise projection through a weight stored spec-side as [d, m]:
    /// out = X W^T with X: [t, m] -> [t, d]. Equivalent to matmul with the
    /// transpose but without materializing it.
    pub fn linear(&self, w: &Tensor) -> Result<Tensor> {
        let (t, m) = self.dims2("linear")?;
        let (d, m2) = w.dims2("linear")?;
        if m != m2 {
            return Err(Error::DimMismatch {
                op: "linear",
                lhs: self.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; t * d];
        xwt(&self.node.data.borrow(), &w.node.data.borrow(), &mut out, t, m, d);
        let x = self.clone();
        let wt = w.clone();
        Ok(Tensor::interior(
            vec![t, d],
            out,
            vec![self.clone(), w.clone()],
            Box::new(move |g| {
                x.accumulate_with(|dx| {
                    let wd = wt.node.data.borrow();
                    for ti in 0..t {
                        let grow = &g[ti * d..(ti + 1) * d];
                        let dxrow = &mut dx[ti * m..(ti + 1) * m];
                        for (j, &gv) in grow.iter().enumerate() {
                            axpy(gv, &wd[j * m..(j + 1) * m], dxrow);
                        }
                    }
                });
                wt.accumulate_with(|dw| {
                    let xd = x.node.data.borrow();
                    for ti in 0..t {
                        let grow = &g[ti * d..(ti + 1) * d];
                        let xrow = &xd[ti * m..(ti + 1) * m];
                        for (j, &gv) in grow.iter().enumerate() {
                            axpy(gv, xrow, &mut dw[j * m..(j + 1) * m]);
                        }
                    }
                });
            }),
        ))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape() != rhs.shape() {
            return Err(Error::DimMismatch {
                op: "add",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let out: Vec<f64> = {
            let a = self.node.data.borrow();
            let b = rhs.node.data.borrow();
            a.iter().zip(b.iter()).map(|(x, y)| x + y).collect()
        };
        let a = self.clone();
        let b = rhs.clone();
        Ok(Tensor::interior(
            self.shape().to_vec(),
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                a.accumulate(g);
                b.accumulate(g);
            }),
        ))
    }

    /// Broadcast a length-d bias over the rows of [t, d].
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (t, d) = self.dims2("add_bias")?;
        if bias.shape() != [d] {
            return Err(Error::DimMismatch {
                op: "add_bias",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let out: Vec<f64> = {
            let x = self.node.data.borrow();
            let b = bias.node.data.borrow();
            x.chunks_exact(d)
                .flat_map(|row| row.iter().zip(b.iter()).map(|(v, bv)| v + bv).collect::<Vec<_>>())
                .collect()
        };
        let x = self.clone();
        let bt = bias.clone();
        Ok(Tensor::interior(
            vec![t, d],
            out,
            vec![self.clone(), bias.clone()],
            Box::new(move |g| {
                x.accumulate(g);
                bt.accumulate_with(|db| {
                    for row in g.chunks_exact(d) {
                        for (dbj, gv) in db.iter_mut().zip(row) {
                            *dbj += *gv;
                        }
                    }
                });
            }),
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.node.data.borrow().iter().map(|v| v * c).collect();
        let x = self.clone();
        Tensor::interior(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                x.accumulate_with(|dx| axpy(c, g, dx));
            }),
        )
    }

    /// Elementwise product; gradients flow to both sides.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape() != rhs.shape() {
            return Err(Error::DimMismatch {
                op: "mul",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let out: Vec<f64> = {
            let a = self.node.data.borrow();
            let b = rhs.node.data.borrow();
            a.iter().zip(b.iter()).map(|(x, y)| x * y).collect()
        };
        let a = self.clone();
        let b = rhs.clone();
        Ok(Tensor::interior(
            self.shape().to_vec(),
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                a.accumulate_with(|da| {
                    let bd = b.node.data.borrow();
                    for ((d, gv), bv) in da.iter_mut().zip(g).zip(bd.iter()) {
                        *d += gv * bv;
                    }
                });
                b.accumulate_with(|db| {
                    let ad = a.node.data.borrow();
                    for ((d, gv), av) in db.iter_mut().zip(g).zip(ad.iter()) {
                        *d += gv * av;
                    }
                });
            }),
        ))
    }

    /// Scale column j of [t, n] by s[j].
    pub fn scale_cols(&self, s: &Tensor) -> Result<Tensor> {
        let (t, n) = self.dims2("scale_cols")?;
        if s.shape() != [n] {
            return Err(Error::DimMismatch {
                op: "scale_cols",
                lhs: self.shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
        let out: Vec<f64> = {
            let x = self.node.data.borrow();
            let sv = s.node.data.borrow();
            x.chunks_exact(n)
                .flat_map(|row| row.iter().zip(sv.iter()).map(|(v, c)| v * c).collect::<Vec<_>>())
                .collect()
        };
        let x = self.clone();
        let st = s.clone();
        Ok(Tensor::interior(
            vec![t, n],
            out,
            vec![self.clone(), s.clone()],
            Box::new(move |g| {
                x.accumulate_with(|dx| {
                    let sv = st.node.data.borrow();
                    for (drow, grow) in dx.chunks_exact_mut(n).zip(g.chunks_exact(n)) {
                        for ((d, gv), c) in drow.iter_mut().zip(grow).zip(sv.iter()) {
                            *d += gv * c;
                        }
                    }
                });
                st.accumulate_with(|ds| {
                    let xd = x.node.data.borrow();
                    for (xrow, grow) in xd.chunks_exact(n).zip(g.chunks_exact(n)) {
                        for ((d, gv), xv) in ds.iter_mut().zip(grow).zip(xrow) {
                            *d += gv * xv;
                        }
                    }
                });
            }),
        ))
    }

    /// Scale row t of [t, n] by v[t].
    pub fn scale_rows(&self, v: &Tensor) -> Result<Tensor> {
        let (t, n) = self.dims2("scale_rows")?;
        if v.shape() != [t] {
            return Err(Error::DimMismatch {
                op: "scale_rows",
                lhs: self.shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
        let out: Vec<f64> = {
            let x = self.node.data.borrow();
            let vv = v.node.data.borrow();
            x.chunks_exact(n)
                .zip(vv.iter())
                .flat_map(|(row, c)| row.iter().map(|x| x * c).collect::<Vec<_>>())
                .collect()
        };
        let x = self.clone();
        let vt = v.clone();
        Ok(Tensor::interior(
            vec![t, n],
            out,
            vec![self.clone(), v.clone()],
            Box::new(move |g| {
                x.accumulate_with(|dx| {
                    let vv = vt.node.data.borrow();
                    for ((drow, grow), c) in dx.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(vv.iter()) {
                        axpy(*c, grow, drow);
                    }
                });
                vt.accumulate_with(|dv| {
                    let xd = x.node.data.borrow();
                    for ((d, xrow), grow) in dv.iter_mut().zip(xd.chunks_exact(n)).zip(g.chunks_exact(n)) {
                        *d += dot(xrow, grow);
                    }
                });
            }),
        ))
    }

    fn unary(&self, f: impl Fn(f64) -> f64, dfdx: impl Fn(f64, f64) -> f64 + 'static) -> Tensor {
        let out: Vec<f64> = self.node.data.borrow().iter().map(|&v| f(v)).collect();
        let x = self.clone();
        let out_copy = out.clone();
        Tensor::interior(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                x.accumulate_with(|dx| {
                    let xd = x.node.data.borrow();
                    for (((d, gv), &xv), &yv) in dx.iter_mut().zip(g).zip(xd.iter()).zip(out_copy.iter()) {
                        *d += gv * dfdx(xv, yv);
                    }
                });
            }),
        )
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    /// tanh-based GELU approximation.
    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044715;
        self.unary(
            |x| 0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh()),
            |x, _| {
                let inner = C * (x + A * x * x * x);
                let th = inner.tanh();
                let sech2 = 1.0 - th * th;
                0.5 * (1.0 + th) + 0.5 * x * sech2 * C * (1.0 + 3.0 * A * x * x)
            },
        )
    }

    pub fn softplus(&self) -> Tensor {
        self.unary(
            |x| x.max(0.0) + (-x.abs()).exp().ln_1p(),
            |x, _| 1.0 / (1.0 + (-x).exp()),
        )
    }

    pub fn exp_elem(&self) -> Tensor {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn recip(&self) -> Tensor {
        self.unary(|x| 1.0 / x, |x, _| -1.0 / (x * x))
    }

    /// Softmax over the last axis: a 1-D tensor is one distribution, a 2-D
    /// tensor is treated row-wise. Max-subtracted for stability.
    pub fn softmax(&self) -> Result<Tensor> {
        if !self.is_finite() {
            return Err(Error::Numeric {
                site: "softmax".into(),
                detail: "non-finite input".into(),
            });
        }
        let (rows, n) = match self.shape() {
            [n] => (1usize, *n),
            [r, n] => (*r, *n),
            s => {
                return Err(Error::DimMismatch {
                    op: "softmax",
                    lhs: s.to_vec(),
                    rhs: vec![],
                })
            }
        };
        if n == 0 {
            return Err(Error::Validation("softmax over empty axis".into()));
        }
        let mut out = self.node.data.borrow().clone();
        for row in out.chunks_exact_mut(n) {
            softmax_row(row);
        }
        let x = self.clone();
        let out_copy = out.clone();
        Ok(Tensor::interior(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                x.accumulate_with(|dx| {
                    for r in 0..rows {
                        let s = &out_copy[r * n..(r + 1) * n];
                        let grow = &g[r * n..(r + 1) * n];
                        let inner = dot(grow, s);
                        for ((d, &sv), &gv) in dx[r * n..(r + 1) * n].iter_mut().zip(s).zip(grow) {
                            *d += sv * (gv - inner);
                        }
                    }
                });
            }),
        ))
    }

    /// Mean negative log-likelihood of two-class log-softmax outputs.
    /// logits: [batch, 2], labels in {0, 1}.
    pub fn log_softmax_nll(&self, labels: &[u8]) -> Result<Tensor> {
        let (batch, classes) = self.dims2("log_softmax_nll")?;
        if classes != 2 {
            return Err(Error::Validation(format!(
                "log_softmax_nll expects exactly 2 classes, got {classes}"
            )));
        }
        if labels.len() != batch {
            return Err(Error::Validation(format!(
                "{} labels for batch of {batch}",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Validation(format!("label {bad} outside {{0,1}}")));
        }
        let mut loss = 0.0;
        {
            let data = self.node.data.borrow();
            for (b, &label) in labels.iter().enumerate() {
                let row = &data[b * classes..(b + 1) * classes];
                loss -= row[label as usize] - log_sum_exp(row);
            }
        }
        loss /= batch as f64;
        let x = self.clone();
        let labels_owned = labels.to_vec();
        Ok(Tensor::interior(
            vec![1],
            vec![loss],
            vec![self.clone()],
            Box::new(move |g| {
                let gs = g[0];
                x.accumulate_with(|dx| {
                    let data = x.node.data.borrow();
                    for (b, &label) in labels_owned.iter().enumerate() {
                        let row = &data[b * 2..(b + 1) * 2];
                        let mut probs = [row[0], row[1]];
                        softmax_row(&mut probs);
                        for c in 0..2 {
                            let onehot = if c == label as usize { 1.0 } else { 0.0 };
                            dx[b * 2 + c] += gs * (probs[c] - onehot) / labels_owned.len() as f64;
                        }
                    }
                });
            }),
        ))
    }

    /// Mean over the row axis: [t, d] -> [d].
    pub fn mean_rows(&self) -> Result<Tensor> {
        let (t, d) = self.dims2("mean_rows")?;
        if t == 0 {
            return Err(Error::Validation("mean_rows over zero rows".into()));
        }
        let mut out = vec![0.0; d];
        {
            let x = self.node.data.borrow();
            for row in x.chunks_exact(d) {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        for o in out.iter_mut() {
            *o /= t as f64;
        }
        let x = self.clone();
        Ok(Tensor::interior(
            vec![d],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let inv = 1.0 / t as f64;
                x.accumulate_with(|dx| {
                    for drow in dx.chunks_exact_mut(d) {
                        axpy(inv, g, drow);
                    }
                });
            }),
        ))
    }

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.node.data.borrow().iter().sum();
        let x = self.clone();
        Tensor::interior(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |g| {
                let gs = g[0];
                x.accumulate_with(|dx| {
                    for d in dx.iter_mut() {
                        *d += gs;
                    }
                });
            }),
        )
    }

    /// Per-row sums of [t, n] -> [t].
    pub fn row_sums(&self) -> Result<Tensor> {
        let (t, n) = self.dims2("row_sums")?;
        let out: Vec<f64> = self
            .node
            .data
            .borrow()
            .chunks_exact(n)
            .map(|row| row.iter().sum())
            .collect();
        let x = self.clone();
        Ok(Tensor::interior(
            vec![t],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                x.accumulate_with(|dx| {
                    for (drow, gv) in dx.chunks_exact_mut(n).zip(g) {
                        for d in drow.iter_mut() {
                            *d += gv;
                        }
                    }
                });
            }),
        ))
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(Error::DimMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.node.data.borrow().clone();
        let x = self.clone();
        Ok(Tensor::interior(
            shape.to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| x.accumulate(g)),
        ))
    }

    /// Select rows by index: [t, m] -> [idx.len(), m]. Duplicate indices are
    /// allowed; their gradients accumulate.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let (t, m) = self.dims2("gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= t) {
            return Err(Error::Validation(format!(
                "gather_rows index {bad} out of range for {t} rows"
            )));
        }
        let mut out = Vec::with_capacity(idx.len() * m);
        {
            let x = self.node.data.borrow();
            for &i in idx {
                out.extend_from_slice(&x[i * m..(i + 1) * m]);
            }
        }
        let x = self.clone();
        let idx_owned = idx.to_vec();
        Ok(Tensor::interior(
            vec![idx.len(), m],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                x.accumulate_with(|dx| {
                    for (j, &i) in idx_owned.iter().enumerate() {
                        axpy(1.0, &g[j * m..(j + 1) * m], &mut dx[i * m..(i + 1) * m]);
                    }
                });
            }),
        ))
    }

    /// Select individual cells of a 2-D tensor -> 1-D vector.
    pub fn gather_cells(&self, cells: &[(usize, usize)]) -> Result<Tensor> {
        let (t, n) = self.dims2("gather_cells")?;
        if let Some(&(r, c)) = cells.iter().find(|&&(r, c)| r >= t || c >= n) {
            return Err(Error::Validation(format!(
                "gather_cells index ({r},{c}) out of range for [{t},{n}]"
            )));
        }
        let out: Vec<f64> = {
            let x = self.node.data.borrow();
            cells.iter().map(|&(r, c)| x[r * n + c]).collect()
        };
        let x = self.clone();
        let cells_owned = cells.to_vec();
        Ok(Tensor::interior(
            vec![cells.len()],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                x.accumulate_with(|dx| {
                    for (j, &(r, c)) in cells_owned.iter().enumerate() {
                        dx[r * n + c] += g[j];
                    }
                });
            }),
        ))
    }

    /// Scatter weighted rows into a zero matrix: out[idx[j], :] += w[j] * e[j, :].
    /// Inverse of gather_rows with a per-row gain; used to recombine expert
    /// outputs into sequence order.
    pub fn scatter_rows_weighted(e: &Tensor, w: &Tensor, idx: &[usize], rows: usize) -> Result<Tensor> {
        let (n, d) = e.dims2("scatter_rows_weighted")?;
        if w.shape() != [n] || idx.len() != n {
            return Err(Error::DimMismatch {
                op: "scatter_rows_weighted",
                lhs: e.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Validation(format!(
                "scatter index {bad} out of range for {rows} rows"
            )));
        }
        let mut out = vec![0.0; rows * d];
        {
            let ed = e.node.data.borrow();
            let wd = w.node.data.borrow();
            for (j, &i) in idx.iter().enumerate() {
                axpy(wd[j], &ed[j * d..(j + 1) * d], &mut out[i * d..(i + 1) * d]);
            }
        }
        let et = e.clone();
        let wt = w.clone();
        let idx_owned = idx.to_vec();
        Ok(Tensor::interior(
            vec![rows, d],
            out,
            vec![e.clone(), w.clone()],
            Box::new(move |g| {
                et.accumulate_with(|de| {
                    let wd = wt.node.data.borrow();
                    for (j, &i) in idx_owned.iter().enumerate() {
                        axpy(wd[j], &g[i * d..(i + 1) * d], &mut de[j * d..(j + 1) * d]);
                    }
                });
                wt.accumulate_with(|dw| {
                    let ed = et.node.data.borrow();
                    for (j, &i) in idx_owned.iter().enumerate() {
                        dw[j] += dot(&g[i * d..(i + 1) * d], &ed[j * d..(j + 1) * d]);
                    }
                });
            }),
        ))
    }

    /// Stack 1-D tensors of equal length into a matrix.
    pub fn stack_rows(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Validation("stack_rows of zero tensors".into()));
        }
        let d = parts[0].numel();
        for p in parts {
            if p.shape() != [d] {
                return Err(Error::DimMismatch {
                    op: "stack_rows",
                    lhs: vec![d],
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let mut out = Vec::with_capacity(parts.len() * d);
        for p in parts {
            out.extend_from_slice(&p.node.data.borrow());
        }
        let parents: Vec<Tensor> = parts.to_vec();
        let handles = parts.to_vec();
        Ok(Tensor::interior(
            vec![parts.len(), d],
            out,
            parents,
            Box::new(move |g| {
                for (j, p) in handles.iter().enumerate() {
                    p.accumulate(&g[j * d..(j + 1) * d]);
                }
            }),
        ))
    }

    /// Columns [start, start+len) of [t, d].
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (t, d) = self.dims2("slice_cols")?;
        if start + len > d {
            return Err(Error::Validation(format!(
                "slice_cols [{start}, {}) out of range for width {d}",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(t * len);
        {
            let x = self.node.data.borrow();
            for row in x.chunks_exact(d) {
                out.extend_from_slice(&row[start..start + len]);
            }
        }
        let x = self.clone();
        Ok(Tensor::interior(
            vec![t, len],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                x.accumulate_with(|dx| {
                    for (drow, grow) in dx.chunks_exact_mut(d).zip(g.chunks_exact(len)) {
                        axpy(1.0, grow, &mut drow[start..start + len]);
                    }
                });
            }),
        ))
    }

    /// Concatenate along columns: [t, d1], [t, d2], ... -> [t, sum(di)].
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Validation("concat_cols of zero tensors".into()));
        }
        let (t, _) = parts[0].dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pt, pd) = p.dims2("concat_cols")?;
            if pt != t {
                return Err(Error::DimMismatch {
                    op: "concat_cols",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            widths.push(pd);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; t * total];
        {
            let mut offset = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                let pd = p.node.data.borrow();
                for ti in 0..t {
                    out[ti * total + offset..ti * total + offset + w]
                        .copy_from_slice(&pd[ti * w..(ti + 1) * w]);
                }
                offset += w;
            }
        }
        let handles = parts.to_vec();
        let widths_owned = widths.clone();
        Ok(Tensor::interior(
            vec![t, total],
            out,
            parts.to_vec(),
            Box::new(move |g| {
                let mut offset = 0;
                for (p, &w) in handles.iter().zip(&widths_owned) {
                    p.accumulate_with(|dp| {
                        for ti in 0..t {
                            axpy(
                                1.0,
                                &g[ti * total + offset..ti * total + offset + w],
                                &mut dp[ti * w..(ti + 1) * w],
                            );
                        }
                    });
                    offset += w;
                }
            }),
        ))
    }

    /// Per-row layer normalization with affine parameters.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (t, d) = self.dims2("layer_norm")?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::DimMismatch {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; t * d];
        let mut inv_stds = vec![0.0; t];
        let mut xhat = vec![0.0; t * d];
        {
            let x = self.node.data.borrow();
            let gd = gamma.node.data.borrow();
            let bd = beta.node.data.borrow();
            for ti in 0..t {
                let row = &x[ti * d..(ti + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv_std = 1.0 / (var + eps).sqrt();
                inv_stds[ti] = inv_std;
                for j in 0..d {
                    let h = (row[j] - mean) * inv_std;
                    xhat[ti * d + j] = h;
                    out[ti * d + j] = h * gd[j] + bd[j];
                }
            }
        }
        let x = self.clone();
        let gt = gamma.clone();
        let bt = beta.clone();
        Ok(Tensor::interior(
            vec![t, d],
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g| {
                let gd = gt.node.data.borrow().clone();
                x.accumulate_with(|dx| {
                    let df = d as f64;
                    for ti in 0..t {
                        let grow = &g[ti * d..(ti + 1) * d];
                        let hrow = &xhat[ti * d..(ti + 1) * d];
                        let mut dxhat_sum = 0.0;
                        let mut dxhat_dot = 0.0;
                        for j in 0..d {
                            let dh = grow[j] * gd[j];
                            dxhat_sum += dh;
                            dxhat_dot += dh * hrow[j];
                        }
                        let inv_std = inv_stds[ti];
                        for j in 0..d {
                            let dh = grow[j] * gd[j];
                            dx[ti * d + j] +=
                                inv_std / df * (df * dh - dxhat_sum - hrow[j] * dxhat_dot);
                        }
                    }
                });
                gt.accumulate_with(|dg| {
                    for ti in 0..t {
                        let grow = &g[ti * d..(ti + 1) * d];
                        let hrow = &xhat[ti * d..(ti + 1) * d];
                        for j in 0..d {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                });
                bt.accumulate_with(|db| {
                    for grow in g.chunks_exact(d) {
                        for (d, gv) in db.iter_mut().zip(grow) {
                            *d += gv;
                        }
                    }
                });
            }),
        ))
    }
}

// ── gradient checking ────────────────────────────────────────────────

/// Max relative error between analytic gradients and central differences:
/// max over all parameter entries of |analytic - cd| / max(1, |cd|).
///
/// `f` must be deterministic; this is verified by evaluating it twice and
/// comparing the loss bit-for-bit.
pub fn grad_check<F>(mut f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: FnMut() -> Result<Tensor>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Validation(format!(
            "grad_check eps {eps} outside [1e-7, 1e-3]"
        )));
    }
    let l1 = no_grad(&mut f)?.item()?;
    let l2 = no_grad(&mut f)?.item()?;
    if l1.to_bits() != l2.to_bits() {
        return Err(Error::Validation(
            "grad_check requires a deterministic function (losses differ between runs)".into(),
        ));
    }
    for p in params {
        p.zero_grad();
    }
    let loss = f()?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad_vec().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut max_rel: f64 = 0.0;
    for (pi, p) in params.iter().enumerate() {
        for idx in 0..p.numel() {
            let orig = p.with_data(|d| d[idx]);
            p.with_data_mut(|d| d[idx] = orig + eps);
            let lp = no_grad(&mut f)?.item()?;
            p.with_data_mut(|d| d[idx] = orig - eps);
            let lm = no_grad(&mut f)?.item()?;
            p.with_data_mut(|d| d[idx] = orig);
            let cd = (lp - lm) / (2.0 * eps);
            let rel = (analytic[pi][idx] - cd).abs() / cd.abs().max(1.0);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}
