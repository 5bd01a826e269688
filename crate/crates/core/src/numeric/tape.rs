//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Tape`] borrows a [`ParameterStore`] read-only; every operation appends
//! a node and returns its [`Var`]. [`Tape::backward`] walks the nodes in
//! reverse and produces [`Gradients`] aligned with the store.

use super::kernels::{bce_with_logit, dot, matvec, sigmoid, softmax};
use super::{Gradients, ParameterStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(usize),
    Row { param: usize, row: usize },
    MatVec { param: usize, x: Var },
    Add(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Slice { x: Var, start: usize },
    Dot(Var, Var),
    Sum(Vec<Var>),
    Concat(Vec<Var>),
    Softmax(Var),
    Scale { s: Var, x: Var },
    BceLogit { z: Var, label: f64 },
    Mean(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Vec<f64>,
}

/// Parameter handles of one LSTM layer on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w_x: Var,
    pub w_h: Var,
    pub b: Var,
    pub hidden: usize,
}

pub struct Tape<'s> {
    store: &'s ParameterStore,
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParameterStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn store(&self) -> &'s ParameterStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match self.nodes[v.0].op {
            Op::Param(p) => self.store.by_id(p).data(),
            _ => &self.nodes[v.0].value,
        }
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push(Op::Const, value)
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let id = self.store.id(name)?;
        Ok(self.push(Op::Param(id), Vec::new()))
    }

    fn param_of(&self, v: Var) -> Option<usize> {
        match self.nodes[v.0].op {
            Op::Param(p) => Some(p),
            _ => None,
        }
    }

    /// Row `row` of a matrix parameter (embedding lookup).
    pub fn row(&mut self, param: Var, row: usize) -> Result<Var> {
        let p = self
            .param_of(param)
            .ok_or_else(|| shape_err("row", "operand is not a parameter".into()))?;
        let a = self.store.by_id(p);
        if row >= a.rows() {
            return Err(shape_err("row", format!("row {row} of {:?}", a.shape())));
        }
        let value = a.row(row).to_vec();
        Ok(self.push(Op::Row { param: p, row }, value))
    }

    /// Matrix parameter times vector.
    pub fn matvec(&mut self, m: Var, x: Var) -> Result<Var> {
        let p = self
            .param_of(m)
            .ok_or_else(|| shape_err("matvec", "matrix operand is not a parameter".into()))?;
        let a = self.store.by_id(p);
        let xv = self.value(x);
        if a.shape().len() != 2 || a.cols() != xv.len() {
            return Err(shape_err("matvec", format!("{:?} · [{}]", a.shape(), xv.len())));
        }
        let value = matvec(a.data(), a.rows(), a.cols(), xv);
        Ok(self.push(Op::MatVec { param: p, x }, value))
    }

    fn same_len(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        if la != lb {
            return Err(shape_err(op, format!("[{la}] vs [{lb}]")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("add", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("mul", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&z| sigmoid(z)).collect();
        self.push(Op::Sigmoid(a), value)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|z| z.tanh()).collect();
        self.push(Op::Tanh(a), value)
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.len() {
            return Err(shape_err("slice", format!("{start}..{} of [{}]", start + len, xv.len())));
        }
        let value = xv[start..start + len].to_vec();
        Ok(self.push(Op::Slice { x, start }, value))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("dot", a, b)?;
        let value = vec![dot(self.value(a), self.value(b))];
        Ok(self.push(Op::Dot(a, b), value))
    }

    /// Elementwise sum of equally sized vectors. `len` is the size of the
    /// zero vector returned for an empty list.
    pub fn sum(&mut self, xs: &[Var], len: usize) -> Result<Var> {
        let mut value = vec![0.0; len];
        for &x in xs {
            let xv = self.value(x);
            if xv.len() != len {
                return Err(shape_err("sum", format!("[{}] into [{len}]", xv.len())));
            }
            value.iter_mut().zip(xv).for_each(|(a, b)| *a += b);
        }
        Ok(self.push(Op::Sum(xs.to_vec()), value))
    }

    pub fn concat(&mut self, xs: &[Var]) -> Var {
        let value = xs.iter().flat_map(|&x| self.value(x).iter().copied()).collect();
        self.push(Op::Concat(xs.to_vec()), value)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let value = softmax(self.value(x));
        self.push(Op::Softmax(x), value)
    }

    /// Scalar `s` times vector `x`.
    pub fn scale(&mut self, s: Var, x: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(shape_err("scale", format!("scalar operand has {} values", sv.len())));
        }
        let k = sv[0];
        let value = self.value(x).iter().map(|v| k * v).collect();
        Ok(self.push(Op::Scale { s, x }, value))
    }

    /// Binary cross-entropy of `sigmoid(z)` against `label`, from the logit.
    pub fn bce_logit(&mut self, z: Var, label: f64) -> Result<Var> {
        let zv = self.value(z);
        if zv.len() != 1 {
            return Err(shape_err("bce_logit", format!("logit has {} values", zv.len())));
        }
        let value = vec![bce_with_logit(zv[0], label)];
        Ok(self.push(Op::BceLogit { z, label }, value))
    }

    /// Mean of scalars.
    pub fn mean(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::invalid("mean of no values"));
        }
        let mut total = 0.0;
        for &x in xs {
            let xv = self.value(x);
            if xv.len() != 1 {
                return Err(shape_err("mean", format!("operand has {} values", xv.len())));
            }
            total += xv[0];
        }
        let value = vec![total / xs.len() as f64];
        Ok(self.push(Op::Mean(xs.to_vec()), value))
    }

    pub fn lstm_vars(&mut self, prefix: &str) -> Result<LstmVars> {
        let w_x = self.param(&format!("{prefix}.w_x"))?;
        let w_h = self.param(&format!("{prefix}.w_h"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        let hidden = self.store.by_id(self.param_of(w_h).unwrap()).cols();
        Ok(LstmVars { w_x, w_h, b, hidden })
    }

    /// LSTM over `inputs`, returning the last hidden state. Same gate layout
    /// as [`super::lstm_encode`].
    pub fn lstm(&mut self, w: &LstmVars, inputs: &[Var]) -> Result<Var> {
        let d = w.hidden;
        if inputs.is_empty() {
            log::debug!("tape lstm: empty sequence encoded as zero vector");
            return Ok(self.constant(vec![0.0; d]));
        }
        let mut h: Option<Var> = None;
        let mut c: Option<Var> = None;
        for &x in inputs {
            let zx = self.matvec(w.w_x, x)?;
            let pre = match h {
                Some(h) => {
                    let zh = self.matvec(w.w_h, h)?;
                    self.add(zx, zh)?
                }
                None => zx,
            };
            let z = self.add(pre, w.b)?;
            let zi = self.slice(z, 0, d)?;
            let zf = self.slice(z, d, d)?;
            let zg = self.slice(z, 2 * d, d)?;
            let zo = self.slice(z, 3 * d, d)?;
            let i = self.sigmoid(zi);
            let g = self.tanh(zg);
            let o = self.sigmoid(zo);
            let ig = self.mul(i, g)?;
            let c_new = match c {
                Some(c) => {
                    let f = self.sigmoid(zf);
                    let fc = self.mul(f, c)?;
                    self.add(fc, ig)?
                }
                None => ig,
            };
            let tc = self.tanh(c_new);
            h = Some(self.mul(o, tc)?);
            c = Some(c_new);
        }
        Ok(h.unwrap())
    }

    /// Gradients of the scalar `root` with respect to every parameter of the
    /// store. Parameters the root does not depend on get zero gradients.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let n = self.value(root).len();
        if n != 1 {
            return Err(Error::NonScalarRoot { len: n });
        }
        let mut out = Gradients::zeros_like(self.store);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Const => {}
                Op::Param(p) => add_into(out.by_id_mut(*p), &g),
                Op::Row { param, row } => {
                    let cols = g.len();
                    add_into(&mut out.by_id_mut(*param)[row * cols..(row + 1) * cols], &g);
                }
                Op::MatVec { param, x } => {
                    let m = self.store.by_id(*param);
                    let (rows, cols) = (m.rows(), m.cols());
                    let xv = self.value(*x);
                    let gm = out.by_id_mut(*param);
                    for r in 0..rows {
                        if g[r] != 0.0 {
                            let row = &mut gm[r * cols..(r + 1) * cols];
                            for (d, xc) in row.iter_mut().zip(xv) {
                                *d += g[r] * xc;
                            }
                        }
                    }
                    let md = m.data();
                    let gx = self.grad_slot(&mut grads, *x);
                    for r in 0..rows {
                        if g[r] != 0.0 {
                            for (d, mv) in gx.iter_mut().zip(&md[r * cols..(r + 1) * cols]) {
                                *d += g[r] * mv;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(self.grad_slot(&mut grads, *a), &g);
                    add_into(self.grad_slot(&mut grads, *b), &g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = self.grad_slot(&mut grads, *a);
                    for ((d, gi), bi) in ga.iter_mut().zip(&g).zip(bv) {
                        *d += gi * bi;
                    }
                    let gb = self.grad_slot(&mut grads, *b);
                    for ((d, gi), ai) in gb.iter_mut().zip(&g).zip(av) {
                        *d += gi * ai;
                    }
                }
                Op::Sigmoid(a) => {
                    let ga = self.grad_slot(&mut grads, *a);
                    for ((d, gi), y) in ga.iter_mut().zip(&g).zip(&node.value) {
                        *d += gi * y * (1.0 - y);
                    }
                }
                Op::Tanh(a) => {
                    let ga = self.grad_slot(&mut grads, *a);
                    for ((d, gi), y) in ga.iter_mut().zip(&g).zip(&node.value) {
                        *d += gi * (1.0 - y * y);
                    }
                }
                Op::Slice { x, start } => {
                    let gx = self.grad_slot(&mut grads, *x);
                    add_into(&mut gx[*start..start + g.len()], &g);
                }
                Op::Dot(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = self.grad_slot(&mut grads, *a);
                    for (d, bi) in ga.iter_mut().zip(bv) {
                        *d += g[0] * bi;
                    }
                    let gb = self.grad_slot(&mut grads, *b);
                    for (d, ai) in gb.iter_mut().zip(av) {
                        *d += g[0] * ai;
                    }
                }
                Op::Sum(xs) => {
                    for x in xs {
                        add_into(self.grad_slot(&mut grads, *x), &g);
                    }
                }
                Op::Concat(xs) => {
                    let mut off = 0;
                    for x in xs {
                        let len = self.value(*x).len();
                        add_into(self.grad_slot(&mut grads, *x), &g[off..off + len]);
                        off += len;
                    }
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let gy = dot(&g, y);
                    let gx = self.grad_slot(&mut grads, *x);
                    for ((d, gi), yi) in gx.iter_mut().zip(&g).zip(y) {
                        *d += yi * (gi - gy);
                    }
                }
                Op::Scale { s, x } => {
                    let (sv, xv) = (self.value(*s)[0], self.value(*x));
                    let gs = dot(&g, xv);
                    self.grad_slot(&mut grads, *s)[0] += gs;
                    let gx = self.grad_slot(&mut grads, *x);
                    for (d, gi) in gx.iter_mut().zip(&g) {
                        *d += gi * sv;
                    }
                }
                Op::BceLogit { z, label } => {
                    let zv = self.value(*z)[0];
                    self.grad_slot(&mut grads, *z)[0] += g[0] * (sigmoid(zv) - label);
                }
                Op::Mean(xs) => {
                    let share = g[0] / xs.len() as f64;
                    for x in xs {
                        self.grad_slot(&mut grads, *x)[0] += share;
                    }
                }
            }
        }
        Ok(out)
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut [f64] {
        let len = self.value(v).len();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{lstm_encode, Array, LstmWeights};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn store_with(params: &[(&str, Array)]) -> ParameterStore {
        let mut s = ParameterStore::new(0);
        for (n, a) in params {
            s.insert(n, a.clone()).unwrap();
        }
        s
    }

    #[test]
    fn linear_loss_gradient_is_outer_product() {
        // loss = sum(W v) => dW[r][c] = v[c]
        let w = Array::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0]).unwrap();
        let s = store_with(&[("w", w), ("unused", Array::vector(vec![9.0]))]);
        let mut t = Tape::new(&s);
        let wv = t.param("w").unwrap();
        let v = t.constant(vec![0.1, 0.2, 0.3]);
        let wv_v = t.matvec(wv, v).unwrap();
        let ones = t.constant(vec![1.0, 1.0]);
        let loss = t.dot(wv_v, ones).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.by_id(0), [0.1, 0.2, 0.3, 0.1, 0.2, 0.3]);
        assert_eq!(g.by_id(1), [0.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let s = store_with(&[("w", Array::vector(vec![1.0, 2.0]))]);
        let mut t = Tape::new(&s);
        let c = t.constant(vec![4.2]);
        let g = t.backward(c).unwrap();
        assert_eq!(g.by_id(0), [0.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let s = store_with(&[("w", Array::vector(vec![1.0, 2.0]))]);
        let mut t = Tape::new(&s);
        let w = t.param("w").unwrap();
        let y = t.tanh(w);
        assert!(matches!(t.backward(y), Err(Error::NonScalarRoot { len: 2 })));
    }

    #[test]
    fn shape_errors() {
        let s = store_with(&[("m", Array::zeros(&[2, 3]))]);
        let mut t = Tape::new(&s);
        let m = t.param("m").unwrap();
        let x = t.constant(vec![1.0, 2.0]);
        assert!(t.matvec(m, x).is_err());
        let y = t.constant(vec![1.0]);
        assert!(t.add(x, y).is_err());
        assert!(t.dot(x, y).is_err());
        assert!(t.row(m, 5).is_err());
        assert!(t.row(x, 0).is_err());
    }

    #[test]
    fn tape_lstm_matches_plain_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (e, d) = (4, 5);
        let mut rand = |shape: &[usize]| {
            let n = shape.iter().product();
            Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-0.6..0.6)).collect())
                .unwrap()
        };
        let s = store_with(&[
            ("l.w_x", rand(&[4 * d, e])),
            ("l.w_h", rand(&[4 * d, d])),
            ("l.b", rand(&[4 * d])),
            ("emb", rand(&[6, e])),
        ]);
        let ids = [3usize, 0, 5, 5, 1];
        let mut t = Tape::new(&s);
        let w = t.lstm_vars("l").unwrap();
        let emb = t.param("emb").unwrap();
        let xs: Vec<Var> = ids.iter().map(|&i| t.row(emb, i).unwrap()).collect();
        let h = t.lstm(&w, &xs).unwrap();

        let embs = s.get("emb").unwrap();
        let rows: Vec<&[f64]> = ids.iter().map(|&i| embs.row(i)).collect();
        let weights = LstmWeights {
            w_x: s.get("l.w_x").unwrap(),
            w_h: s.get("l.w_h").unwrap(),
            b: s.get("l.b").unwrap(),
        };
        let plain = lstm_encode(&weights, &rows).unwrap();
        for (a, b) in t.value(h).iter().zip(&plain) {
            assert!((a - b).abs() < 1e-14);
        }
        let empty = t.lstm(&w, &[]).unwrap();
        assert_eq!(t.value(empty), vec![0.0; d]);
    }
}
