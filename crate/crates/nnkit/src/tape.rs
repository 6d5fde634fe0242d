//! Tape-based reverse mode.
//!
//! Every operation appends a node holding its output value; [`Tape::backward`]
//! walks the nodes in reverse and propagates adjoints to their inputs.
//! Parameters enter the tape through [`Tape::param`], which records the
//! binding so gradients can be accumulated back into a [`ParamStore`].

use crate::error::{invalid, NnError, Result};
use crate::gru;
use crate::param::{ParamId, ParamStore};
use crate::tensor::{matvec_acc, matvec_t_acc, outer_acc, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A differentiable operation defined outside this crate.
///
/// `forward` may cache whatever it needs for `backward`. `backward` returns
/// one gradient per input (`None` when an input receives none).
pub trait CustomOp: Send {
    fn name(&self) -> &'static str;
    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor>;
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &Tensor,
    ) -> Result<Vec<Option<Tensor>>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
    },
    GruCell {
        x: Var,
        h: Var,
        w_ih: Var,
        w_hh: Var,
        b: Var,
        z: Vec<f64>,
        r: Vec<f64>,
        n: Vec<f64>,
    },
    GruSeq {
        x: Var,
        w_ih: Var,
        w_hh: Var,
        b: Var,
        reverse: bool,
        cache: gru::SeqCache,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<(Var, ParamId)>,
}

/// Adjoints of every node reached from the loss.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds the gradient of every parameter bound on `tape` into `store`.
    pub fn accumulate_into(&self, tape: &Tape, store: &mut ParamStore) -> Result<()> {
        for &(var, id) in &tape.bindings {
            if let Some(g) = self.get(var) {
                store.accumulate_grad(id, g)?;
            }
        }
        Ok(())
    }
}

fn shape_err<T>(op: &str, a: &[usize], b: &[usize]) -> Result<T> {
    invalid(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(NnError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// A free input whose gradient is reported by [`Gradients::get`].
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true, "input")
    }

    /// Places parameter `id` on the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let v = self.push(store.value(id).clone(), Op::Leaf, true, "param")?;
        self.bindings.push((v, id));
        Ok(v)
    }

    pub fn param_by_name(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let id = store.require(name)?;
        self.param(store, id)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err(name, ta.shape(), tb.shape());
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Sub(a, b), ng, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Mul(a, b), ng, "mul")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v * c);
        let ng = self.ng(x);
        self.push(t, Op::Scale(x, c), ng, "scale")
    }

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return shape_err("matmul", self.value(a).shape(), self.value(b).shape());
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = da[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for (o, &bv) in orow.iter_mut().zip(&db[p * n..(p + 1) * n]) {
                    *o += av * bv;
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_rows(m, n, out)?, Op::MatMul(a, b), ng, "matmul")
    }

    /// `x · wᵀ + b` for `x: n×in`, `w: out×in`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = self.value(x).dims2()?;
        let (dout, din2) = self.value(w).dims2()?;
        if din != din2 {
            return shape_err("linear", self.value(x).shape(), self.value(w).shape());
        }
        if let Some(b) = b {
            if self.value(b).shape() != [dout] {
                return shape_err("linear bias", self.value(b).shape(), &[dout]);
            }
        }
        let mut out = vec![0.0; n * dout];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let bd = b.map(|b| self.value(b).data());
            for i in 0..n {
                let row = &mut out[i * dout..(i + 1) * dout];
                if let Some(bd) = bd {
                    row.copy_from_slice(bd);
                }
                matvec_acc(wd, din, &xd[i * din..(i + 1) * din], row);
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(Tensor::from_rows(n, dout, out)?, Op::Linear { x, w, b }, ng, "linear")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(gru::sigmoid);
        let ng = self.ng(x);
        self.push(t, Op::Sigmoid(x), ng, "sigmoid")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(f64::tanh);
        let ng = self.ng(x);
        self.push(t, Op::Tanh(x), ng, "tanh")
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(softplus);
        let ng = self.ng(x);
        self.push(t, Op::Softplus(x), ng, "softplus")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.max(0.0));
        let ng = self.ng(x);
        self.push(t, Op::Relu(x), ng, "relu")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(t, Op::Sum(x), ng, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.numel() == 0 {
            return invalid("mean of an empty tensor");
        }
        let t = Tensor::scalar(v.sum() / v.numel() as f64);
        let ng = self.ng(x);
        self.push(t, Op::Mean(x), ng, "mean")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose2()?;
        let ng = self.ng(x);
        self.push(t, Op::Transpose(x), ng, "transpose")
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if start + len > c {
            return invalid(format!("slice_cols {start}..{} of {c} columns", start + len));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&d[i * c + start..i * c + start + len]);
        }
        let ng = self.ng(x);
        self.push(Tensor::from_rows(r, len, out)?, Op::SliceCols { x, start }, ng, "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return invalid("concat_cols of nothing");
        }
        let rows = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return shape_err("concat_cols", self.value(parts[0]).shape(), self.value(p).shape());
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::from_rows(rows, total, out)?, Op::ConcatCols(parts.to_vec()), ng, "concat_cols")
    }

    /// Selected rows of a matrix, in the given order.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return invalid(format!("gather_rows index {bad} out of {r}"));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&d[i * c..(i + 1) * c]);
        }
        let ng = self.ng(x);
        self.push(
            Tensor::from_rows(rows.len(), c, out)?,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            ng,
            "gather_rows",
        )
    }

    /// Temporal convolution with zero "same" padding.
    /// `x: steps×cin`, `w: cout×cin×k` (k odd), `b: cout` → `steps×cout`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (steps, cin) = self.value(x).dims2()?;
        let (cout, cin2, k) = match self.value(w).shape() {
            &[o, i, k] => (o, i, k),
            s => return invalid(format!("conv1d weight must be rank 3, got {s:?}")),
        };
        if cin != cin2 || k % 2 == 0 || self.value(b).shape() != [cout] {
            return shape_err("conv1d", self.value(x).shape(), self.value(w).shape());
        }
        let pad = k / 2;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; steps * cout];
        for t in 0..steps {
            let row = &mut out[t * cout..(t + 1) * cout];
            row.copy_from_slice(bd);
            for j in 0..k {
                let src = t as isize + j as isize - pad as isize;
                if src < 0 || src as usize >= steps {
                    continue;
                }
                let xs = &xd[src as usize * cin..(src as usize + 1) * cin];
                for (o, acc) in row.iter_mut().enumerate() {
                    let wrow = &wd[o * cin * k..(o + 1) * cin * k];
                    let mut s = 0.0;
                    for i in 0..cin {
                        s += wrow[i * k + j] * xs[i];
                    }
                    *acc += s;
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(Tensor::from_rows(steps, cout, out)?, Op::Conv1d { x, w, b }, ng, "conv1d")
    }

    fn gru_shapes(&self, w_ih: Var, w_hh: Var, b: Var, input: usize) -> Result<usize> {
        let (h3, din) = self.value(w_ih).dims2()?;
        let hidden = h3 / 3;
        if h3 % 3 != 0 || din != input {
            return shape_err("gru w_ih", self.value(w_ih).shape(), &[3 * hidden, input]);
        }
        if self.value(w_hh).shape() != [h3, hidden] {
            return shape_err("gru w_hh", self.value(w_hh).shape(), &[h3, hidden]);
        }
        if self.value(b).shape() != [h3] {
            return shape_err("gru bias", self.value(b).shape(), &[h3]);
        }
        Ok(hidden)
    }

    /// One GRU step: `x: in`, `h: hidden` → `hidden`.
    pub fn gru_cell(&mut self, x: Var, h: Var, w_ih: Var, w_hh: Var, b: Var) -> Result<Var> {
        let input = match self.value(x).shape() {
            &[n] => n,
            s => return invalid(format!("gru_cell input must be a vector, got {s:?}")),
        };
        let hidden = self.gru_shapes(w_ih, w_hh, b, input)?;
        if self.value(h).shape() != [hidden] {
            return shape_err("gru_cell state", self.value(h).shape(), &[hidden]);
        }
        let mut a = self.value(b).data().to_vec();
        matvec_acc(self.value(w_ih).data(), input, self.value(x).data(), &mut a);
        let mut z = vec![0.0; hidden];
        let mut r = vec![0.0; hidden];
        let mut n = vec![0.0; hidden];
        let mut out = vec![0.0; hidden];
        let mut scratch = vec![0.0; 3 * hidden];
        gru::step_forward(
            self.value(w_hh).data(),
            hidden,
            &a,
            self.value(h).data(),
            &mut z,
            &mut r,
            &mut n,
            &mut out,
            &mut scratch,
        );
        let ng = [x, h, w_ih, w_hh, b].iter().any(|&v| self.ng(v));
        self.push(
            Tensor::vector(out),
            Op::GruCell {
                x,
                h,
                w_ih,
                w_hh,
                b,
                z,
                r,
                n,
            },
            ng,
            "gru_cell",
        )
    }

    /// Full GRU pass over `x: steps×in` from a zero state; `reverse` runs
    /// backwards in time. Output `steps×hidden`, aligned with `x`.
    pub fn gru_sequence(&mut self, x: Var, w_ih: Var, w_hh: Var, b: Var, reverse: bool) -> Result<Var> {
        let (steps, input) = self.value(x).dims2()?;
        let hidden = self.gru_shapes(w_ih, w_hh, b, input)?;
        let (out, cache) = gru::seq_forward(
            self.value(x).data(),
            steps,
            input,
            hidden,
            self.value(w_ih).data(),
            self.value(w_hh).data(),
            self.value(b).data(),
            reverse,
        );
        let ng = [x, w_ih, w_hh, b].iter().any(|&v| self.ng(v));
        self.push(
            Tensor::from_rows(steps, hidden, out)?,
            Op::GruSeq {
                x,
                w_ih,
                w_hh,
                b,
                reverse,
                cache,
            },
            ng,
            "gru_sequence",
        )
    }

    pub fn custom(&mut self, inputs: &[Var], mut op: Box<dyn CustomOp>) -> Result<Var> {
        let name = op.name();
        let value = {
            let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
            op.forward(&vals)?
        };
        let ng = inputs.iter().any(|&v| self.ng(v));
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            ng,
            name,
        )
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(NnError::State(
                "backward called for a value that was never recorded".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.propagate(i, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Backward followed by accumulation into the bound parameters.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let g = self.backward(loss)?;
        g.accumulate_into(self, store)?;
        Ok(g)
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, zip_map(g, vb, |g, y| g * y));
                acc(*b, zip_map(g, va, |g, x| g * x));
            }
            Op::Scale(x, c) => acc(*x, g.map(|v| v * c)),
            Op::MatMul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (m, k) = va.dims2()?;
                let n = vb.dims2()?.1;
                if self.ng(*a) {
                    // dA = G Bᵀ
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        matvec_acc(vb.data(), n, &g.data()[r * n..(r + 1) * n], &mut da[r * k..(r + 1) * k]);
                    }
                    acc(*a, Tensor::from_rows(m, k, da)?);
                }
                if self.ng(*b) {
                    // dB = Aᵀ G
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        outer_acc(&mut db, n, &va.data()[r * k..(r + 1) * k], &g.data()[r * n..(r + 1) * n]);
                    }
                    acc(*b, Tensor::from_rows(k, n, db)?);
                }
            }
            Op::Linear { x, w, b } => {
                let vx = self.value(*x);
                let vw = self.value(*w);
                let (n, din) = vx.dims2()?;
                let dout = vw.dims2()?.0;
                let gd = g.data();
                if self.ng(*x) {
                    let mut dx = vec![0.0; n * din];
                    for r in 0..n {
                        matvec_t_acc(vw.data(), din, &gd[r * dout..(r + 1) * dout], &mut dx[r * din..(r + 1) * din]);
                    }
                    acc(*x, Tensor::from_rows(n, din, dx)?);
                }
                if self.ng(*w) {
                    let mut dw = vec![0.0; dout * din];
                    for r in 0..n {
                        outer_acc(&mut dw, din, &gd[r * dout..(r + 1) * dout], &vx.data()[r * din..(r + 1) * din]);
                    }
                    acc(*w, Tensor::from_rows(dout, din, dw)?);
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; dout];
                    for r in 0..n {
                        for (o, v) in db.iter_mut().zip(&gd[r * dout..(r + 1) * dout]) {
                            *o += v;
                        }
                    }
                    acc(*b, Tensor::vector(db));
                }
            }
            Op::Sigmoid(x) => acc(*x, zip_map(g, &node.value, |g, y| g * y * (1.0 - y))),
            Op::Tanh(x) => acc(*x, zip_map(g, &node.value, |g, y| g * (1.0 - y * y))),
            Op::Softplus(x) => acc(*x, zip_map(g, self.value(*x), |g, v| g * gru::sigmoid(v))),
            Op::Relu(x) => acc(*x, zip_map(g, self.value(*x), |g, v| if v > 0.0 { g } else { 0.0 })),
            Op::Sum(x) => {
                let gv = g.data()[0];
                acc(*x, Tensor::full(self.value(*x).shape(), gv));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                acc(*x, Tensor::full(self.value(*x).shape(), g.data()[0] / n));
            }
            Op::Transpose(x) => acc(*x, g.transpose2()?),
            Op::SliceCols { x, start } => {
                let (r, c) = self.value(*x).dims2()?;
                let len = g.dims2()?.1;
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len].copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                }
                acc(*x, Tensor::from_rows(r, c, dx)?);
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = g.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).dims2()?.1;
                    if self.ng(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            dp.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                        }
                        acc(p, Tensor::from_rows(rows, w, dp)?);
                    }
                    offset += w;
                }
            }
            Op::GatherRows { x, rows } => {
                let (r, c) = self.value(*x).dims2()?;
                let mut dx = vec![0.0; r * c];
                for (k, &i) in rows.iter().enumerate() {
                    for j in 0..c {
                        dx[i * c + j] += g.data()[k * c + j];
                    }
                }
                acc(*x, Tensor::from_rows(r, c, dx)?);
            }
            Op::Conv1d { x, w, b } => {
                let vx = self.value(*x);
                let vw = self.value(*w);
                let (steps, cin) = vx.dims2()?;
                let (cout, k) = (vw.shape()[0], vw.shape()[2]);
                let pad = k / 2;
                let gd = g.data();
                let mut dx = vec![0.0; steps * cin];
                let mut dw = vec![0.0; cout * cin * k];
                let mut db = vec![0.0; cout];
                for t in 0..steps {
                    let grow = &gd[t * cout..(t + 1) * cout];
                    for (o, &gv) in grow.iter().enumerate() {
                        db[o] += gv;
                    }
                    for j in 0..k {
                        let src = t as isize + j as isize - pad as isize;
                        if src < 0 || src as usize >= steps {
                            continue;
                        }
                        let s = src as usize;
                        for (o, &gv) in grow.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            for i in 0..cin {
                                let wi = o * cin * k + i * k + j;
                                dw[wi] += gv * vx.data()[s * cin + i];
                                dx[s * cin + i] += gv * vw.data()[wi];
                            }
                        }
                    }
                }
                acc(*x, Tensor::from_rows(steps, cin, dx)?);
                acc(*w, Tensor::new(vw.shape().to_vec(), dw)?);
                acc(*b, Tensor::vector(db));
            }
            Op::GruCell {
                x,
                h,
                w_ih,
                w_hh,
                b,
                z,
                r,
                n,
            } => {
                let vx = self.value(*x);
                let vh = self.value(*h);
                let vwi = self.value(*w_ih);
                let vwh = self.value(*w_hh);
                let hidden = vh.numel();
                let input = vx.numel();
                let mut da = vec![0.0; 3 * hidden];
                let mut dw_hh = vec![0.0; 3 * hidden * hidden];
                let mut dh_prev = vec![0.0; hidden];
                let mut scratch = vec![0.0; 2 * hidden];
                let st = gru::StepState { z, r, n };
                gru::step_backward(
                    vwh.data(),
                    hidden,
                    &st,
                    vh.data(),
                    g.data(),
                    &mut da,
                    &mut dw_hh,
                    &mut dh_prev,
                    &mut scratch,
                );
                let mut dx = vec![0.0; input];
                matvec_t_acc(vwi.data(), input, &da, &mut dx);
                let mut dw_ih = vec![0.0; 3 * hidden * input];
                outer_acc(&mut dw_ih, input, &da, vx.data());
                acc(*x, Tensor::vector(dx));
                acc(*h, Tensor::vector(dh_prev));
                acc(*w_ih, Tensor::from_rows(3 * hidden, input, dw_ih)?);
                acc(*w_hh, Tensor::from_rows(3 * hidden, hidden, dw_hh)?);
                acc(*b, Tensor::vector(da));
            }
            Op::GruSeq {
                x,
                w_ih,
                w_hh,
                b,
                reverse,
                cache,
            } => {
                let vx = self.value(*x);
                let (steps, input) = vx.dims2()?;
                let hidden = node.value.dims2()?.1;
                let sg = gru::seq_backward(
                    vx.data(),
                    steps,
                    input,
                    hidden,
                    self.value(*w_ih).data(),
                    self.value(*w_hh).data(),
                    node.value.data(),
                    cache,
                    *reverse,
                    g.data(),
                    self.ng(*x),
                );
                if let Some(dx) = sg.dx {
                    acc(*x, Tensor::from_rows(steps, input, dx)?);
                }
                acc(*w_ih, Tensor::from_rows(3 * hidden, input, sg.dw_ih)?);
                acc(*w_hh, Tensor::from_rows(3 * hidden, hidden, sg.dw_hh)?);
                acc(*b, Tensor::vector(sg.db));
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = op.backward(&vals, &node.value, g)?;
                if gs.len() != inputs.len() {
                    return Err(NnError::State(format!(
                        "custom op `{}` returned {} gradients for {} inputs",
                        op.name(),
                        gs.len(),
                        inputs.len()
                    )));
                }
                for (&v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        if gi.shape() != self.value(v).shape() {
                            return shape_err(op.name(), gi.shape(), self.value(v).shape());
                        }
                        acc(v, gi);
                    }
                }
            }
        }
        Ok(())
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
