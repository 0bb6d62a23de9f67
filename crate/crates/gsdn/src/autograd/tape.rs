use std::sync::Arc;

use crate::autograd::params::{Gradients, ParamId, ParameterStore};
use crate::error::{Error, Result};
use crate::scalar::{Matrix, Real};
use crate::sparse_ops::{
    bn_eval_forward, bn_train_backward, bn_train_forward, conv_backward_input, conv_backward_weights, conv_forward,
    KernelMap,
};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside binary cross entropy.
pub const PROB_CLAMP: f64 = 1e-7;

/// Handle to an activation recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Batch statistics observed by a train-mode batch norm, to be folded into
/// the running estimates once the step is committed.
#[derive(Clone, Debug)]
pub struct RunningUpdate<T> {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Input,
    Conv {
        x: Var,
        w: ParamId,
        map: Arc<KernelMap>,
        cin: usize,
        cout: usize,
    },
    Linear {
        x: Var,
        w: ParamId,
        b: Option<ParamId>,
        cin: usize,
        cout: usize,
    },
    BatchNorm {
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        xhat: Matrix<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu {
        x: Var,
    },
    UnionAdd {
        a: Var,
        b: Var,
        a_rows: Arc<Vec<u32>>,
        b_rows: Arc<Vec<u32>>,
    },
    GatherRows {
        x: Var,
        rows: Arc<Vec<u32>>,
    },
    Sigmoid {
        x: Var,
    },
    SelectElems {
        x: Var,
        idx: Vec<u32>,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    Sum {
        x: Var,
    },
    BinaryCe {
        p: Var,
        labels: Vec<bool>,
        balanced: bool,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
    },
    Huber {
        pred: Var,
        target: Matrix<T>,
        delta: T,
    },
    WeightedSum {
        terms: Vec<(Var, T)>,
    },
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
}

/// Records forward activations and replays them in reverse for gradients.
///
/// Parameters live in the borrowed [`ParameterStore`]; the tape only holds
/// activations, so a single store can back many tapes at once.
pub struct Tape<'s, T: Real> {
    store: &'s ParameterStore<T>,
    nodes: Vec<Node<T>>,
    running: Vec<RunningUpdate<T>>,
}

impl<'s, T: Real> Tape<'s, T> {
    pub fn new(store: &'s ParameterStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            running: Vec::new(),
        }
    }

    pub fn store(&self) -> &'s ParameterStore<T> {
        self.store
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Statistics gathered by train-mode batch norms since the tape was created.
    pub fn take_running_updates(&mut self) -> Vec<RunningUpdate<T>> {
        std::mem::take(&mut self.running)
    }

    fn is_input(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Input)
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn conv(&mut self, x: Var, w: ParamId, map: Arc<KernelMap>, cin: usize, cout: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.cols() != cin || xv.rows() != map.in_rows {
            return Err(Error::Shape(format!(
                "conv input is {}x{}, map expects {} rows of {cin} channels",
                xv.rows(),
                xv.cols(),
                map.in_rows
            )));
        }
        let w_data = self.store.data(w);
        if w_data.len() != map.volume() * cin * cout {
            return Err(Error::Shape(format!(
                "{}: expected {} weights",
                self.store.entry(w).name,
                map.volume() * cin * cout
            )));
        }
        let out = conv_forward(&map, xv, w_data, cin, cout);
        Ok(self.push(out, Op::Conv { x, w, map, cin, cout }))
    }

    /// Pointwise (1×1×1) convolution with optional bias.
    pub fn linear(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Result<Var> {
        let xv = self.value(x);
        let cin = xv.cols();
        let w_data = self.store.data(w);
        if cin == 0 || w_data.len() % cin != 0 {
            return Err(Error::Shape(format!("{}: incompatible with {cin} inputs", self.store.entry(w).name)));
        }
        let cout = w_data.len() / cin;
        let mut out = Matrix::zeros(xv.rows(), cout);
        if let Some(b) = b {
            let bias = self.store.data(b);
            if bias.len() != cout {
                return Err(Error::Shape(format!("{}: expected {cout} biases", self.store.entry(b).name)));
            }
            for r in 0..out.rows() {
                out.row_mut(r).copy_from_slice(bias);
            }
        }
        T::gemm(xv.rows(), cin, cout, T::one(), xv.as_slice(), false, w_data, false, T::one(), out.as_mut_slice());
        Ok(self.push(out, Op::Linear { x, w, b, cin, cout }))
    }

    /// Batch norm over all rows. Train mode uses batch statistics and records
    /// a running update; eval mode uses the stored running statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId, mean: ParamId, var: ParamId, train: bool, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (g, b) = (self.store.data(gamma), self.store.data(beta));
        if g.len() != xv.cols() {
            return Err(Error::Shape(format!("batch norm over {} channels with {} scales", xv.cols(), g.len())));
        }
        if xv.rows() == 0 {
            let out = Matrix::zeros(0, xv.cols());
            return Ok(self.push(
                out,
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat: Matrix::zeros(0, g.len()),
                    inv_std: vec![T::zero(); g.len()],
                    train,
                },
            ));
        }
        if train {
            let fw = bn_train_forward(xv, g, b, eps)?;
            self.running.push(RunningUpdate {
                mean_id: mean,
                var_id: var,
                mean: fw.mean,
                var: fw.var,
            });
            Ok(self.push(
                fw.output,
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat: fw.xhat,
                    inv_std: fw.inv_std,
                    train,
                },
            ))
        } else {
            let (m, v) = (self.store.data(mean), self.store.data(var));
            let e = T::lit(eps);
            let inv_std: Vec<T> = v.iter().map(|&s| T::one() / (s + e).sqrt()).collect();
            let mut xhat = xv.clone();
            for r in 0..xhat.rows() {
                for (j, h) in xhat.row_mut(r).iter_mut().enumerate() {
                    *h = (*h - m[j]) * inv_std[j];
                }
            }
            let out = bn_eval_forward(xv, g, b, m, v, eps);
            Ok(self.push(
                out,
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    train,
                },
            ))
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu { x })
    }

    /// Adds two activations whose rows land at `a_rows` / `b_rows` of an output with `out_rows` rows.
    pub fn union_add(&mut self, a: Var, b: Var, a_rows: Arc<Vec<u32>>, b_rows: Arc<Vec<u32>>, out_rows: usize) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() || av.rows() != a_rows.len() || bv.rows() != b_rows.len() {
            return Err(Error::Shape("union add operands do not match their row maps".into()));
        }
        let mut out = Matrix::zeros(out_rows, av.cols());
        for (src, rows) in [(av, &a_rows), (bv, &b_rows)] {
            for (i, &r) in rows.iter().enumerate() {
                for (o, &v) in out.row_mut(r as usize).iter_mut().zip(src.row(i)) {
                    *o += v;
                }
            }
        }
        Ok(self.push(out, Op::UnionAdd { a, b, a_rows, b_rows }))
    }

    pub fn gather_rows(&mut self, x: Var, rows: Arc<Vec<u32>>) -> Var {
        let out = self.value(x).gather_rows(&rows);
        self.push(out, Op::GatherRows { x, rows })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid { x })
    }

    /// Picks flat (row-major) element indices, reshaped to `len / cols` rows.
    pub fn select(&mut self, x: Var, idx: Vec<u32>, cols: usize) -> Result<Var> {
        if cols == 0 || idx.len() % cols != 0 {
            return Err(Error::Shape(format!("{} selected elements do not fill {cols} columns", idx.len())));
        }
        let src = self.value(x).as_slice();
        let data: Vec<T> = idx.iter().map(|&i| src[i as usize]).collect();
        let out = Matrix::from_vec(idx.len() / cols, cols, data);
        Ok(self.push(out, Op::SelectElems { x, idx }))
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>, cols: usize) -> Result<Var> {
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in &parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::Shape(format!("concat of {} columns into {cols}", v.cols())));
            }
            rows += v.rows();
            data.extend_from_slice(v.as_slice());
        }
        Ok(self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows { parts }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).as_slice().iter().copied().sum();
        self.push(Matrix::scalar(s), Op::Sum { x })
    }

    /// Binary cross entropy over a column of probabilities. Balanced mode
    /// averages positives and negatives separately and halves each; plain
    /// mode averages over all labels.
    pub fn binary_ce(&mut self, p: Var, labels: Vec<bool>, balanced: bool) -> Result<Var> {
        let pv = self.value(p);
        if pv.as_slice().len() != labels.len() {
            return Err(Error::Shape(format!("{} probabilities for {} labels", pv.as_slice().len(), labels.len())));
        }
        if labels.is_empty() {
            return Err(Error::Contract("binary cross entropy needs at least one label".into()));
        }
        let (wp, wn) = ce_weights::<T>(&labels, balanced);
        let lo = T::lit(PROB_CLAMP);
        let hi = T::one() - lo;
        let mut loss = T::zero();
        for (&q, &y) in pv.as_slice().iter().zip(&labels) {
            let q = q.max(lo).min(hi);
            loss -= if y { wp * q.ln() } else { wn * (T::one() - q).ln() };
        }
        Ok(self.push(Matrix::scalar(loss), Op::BinaryCe { p, labels, balanced }))
    }

    /// Mean softmax cross entropy of each row against its label; zero rows give zero.
    pub fn softmax_ce(&mut self, logits: Var, labels: Vec<usize>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != labels.len() {
            return Err(Error::Shape(format!("{} logit rows for {} labels", lv.rows(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= lv.cols()) {
            return Err(Error::Contract(format!("class label {bad} out of range for {} classes", lv.cols())));
        }
        let mut loss = T::zero();
        for (r, &y) in labels.iter().enumerate() {
            let row = lv.row(r);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            loss += lse - row[y];
        }
        if !labels.is_empty() {
            loss /= T::lit(labels.len() as f64);
        }
        Ok(self.push(Matrix::scalar(loss), Op::SoftmaxCe { logits, labels }))
    }

    /// Huber loss summed over columns and averaged over rows; zero rows give zero.
    pub fn huber(&mut self, pred: Var, target: Matrix<T>, delta: T) -> Result<Var> {
        let pv = self.value(pred);
        if (pv.rows(), pv.cols()) != (target.rows(), target.cols()) {
            return Err(Error::Shape("huber prediction and target shapes differ".into()));
        }
        let mut loss = T::zero();
        for (&a, &b) in pv.as_slice().iter().zip(target.as_slice()) {
            loss += huber(a - b, delta);
        }
        if pv.rows() > 0 {
            loss /= T::lit(pv.rows() as f64);
        }
        Ok(self.push(Matrix::scalar(loss), Op::Huber { pred, target, delta }))
    }

    pub fn weighted_sum(&mut self, terms: Vec<(Var, T)>) -> Result<Var> {
        let mut s = T::zero();
        for &(v, w) in &terms {
            let m = self.value(v);
            if m.as_slice().len() != 1 {
                return Err(Error::Shape("weighted sum expects scalar terms".into()));
            }
            s += w * m.as_slice()[0];
        }
        Ok(self.push(Matrix::scalar(s), Op::WeightedSum { terms }))
    }

    /// Reverse pass from a scalar node. Every trainable parameter the loss
    /// depends on gets a gradient slot.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.rows() != 1 || lv.cols() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {}x{}",
                lv.rows(),
                lv.cols()
            )));
        }
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(T::one()));
        let mut pg = Gradients::new(self.store.len());
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Conv { x, w, map, cin, cout } => {
                    let xv = self.value(*x);
                    pg.accumulate(*w, &conv_backward_weights(map, xv, &g, *cin, *cout));
                    if !self.is_input(*x) {
                        let gx = conv_backward_input(map, &g, self.store.data(*w), *cin, *cout);
                        add_grad(&mut grads, *x, gx);
                    }
                }
                Op::Linear { x, w, b, cin, cout } => {
                    let xv = self.value(*x);
                    let n = xv.rows();
                    let mut gw = vec![T::zero(); cin * cout];
                    T::gemm(*cin, n, *cout, T::one(), xv.as_slice(), true, g.as_slice(), false, T::zero(), &mut gw);
                    pg.accumulate(*w, &gw);
                    if let Some(b) = b {
                        let mut gb = vec![T::zero(); *cout];
                        for r in 0..n {
                            gb.iter_mut().zip(g.row(r)).for_each(|(a, &v)| *a += v);
                        }
                        pg.accumulate(*b, &gb);
                    }
                    let mut gx = Matrix::zeros(n, *cin);
                    T::gemm(n, *cout, *cin, T::one(), g.as_slice(), false, self.store.data(*w), true, T::zero(), gx.as_mut_slice());
                    add_grad(&mut grads, *x, gx);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    train,
                } => {
                    if g.rows() == 0 {
                        continue;
                    }
                    let gm = self.store.data(*gamma);
                    if *train {
                        let (gx, gg, gb) = bn_train_backward(&g, xhat, inv_std, gm);
                        pg.accumulate(*gamma, &gg);
                        pg.accumulate(*beta, &gb);
                        add_grad(&mut grads, *x, gx);
                    } else {
                        let c = g.cols();
                        let (mut gg, mut gb) = (vec![T::zero(); c], vec![T::zero(); c]);
                        let mut gx = g.clone();
                        for r in 0..g.rows() {
                            for j in 0..c {
                                let v = g.get(r, j);
                                gg[j] += v * xhat.get(r, j);
                                gb[j] += v;
                            }
                            for (j, d) in gx.row_mut(r).iter_mut().enumerate() {
                                *d *= gm[j] * inv_std[j];
                            }
                        }
                        pg.accumulate(*gamma, &gg);
                        pg.accumulate(*beta, &gb);
                        add_grad(&mut grads, *x, gx);
                    }
                }
                Op::Relu { x } => {
                    let mut gx = g;
                    for (d, &y) in gx.as_mut_slice().iter_mut().zip(node.value.as_slice()) {
                        if y <= T::zero() {
                            *d = T::zero();
                        }
                    }
                    add_grad(&mut grads, *x, gx);
                }
                Op::UnionAdd { a, b, a_rows, b_rows } => {
                    add_grad(&mut grads, *a, g.gather_rows(a_rows));
                    add_grad(&mut grads, *b, g.gather_rows(b_rows));
                }
                Op::GatherRows { x, rows } => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    for (i, &r) in rows.iter().enumerate() {
                        for (d, &v) in gx.row_mut(r as usize).iter_mut().zip(g.row(i)) {
                            *d += v;
                        }
                    }
                    add_grad(&mut grads, *x, gx);
                }
                Op::Sigmoid { x } => {
                    let mut gx = g;
                    for (d, &s) in gx.as_mut_slice().iter_mut().zip(node.value.as_slice()) {
                        *d *= s * (T::one() - s);
                    }
                    add_grad(&mut grads, *x, gx);
                }
                Op::SelectElems { x, idx } => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    let dst = gx.as_mut_slice();
                    for (&i, &v) in idx.iter().zip(g.as_slice()) {
                        dst[i as usize] += v;
                    }
                    add_grad(&mut grads, *x, gx);
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).rows();
                        let rows: Vec<u32> = (offset as u32..(offset + n) as u32).collect();
                        add_grad(&mut grads, p, g.gather_rows(&rows));
                        offset += n;
                    }
                }
                Op::Sum { x } => {
                    let xv = self.value(*x);
                    let s = g.as_slice()[0];
                    add_grad(&mut grads, *x, Matrix::from_vec(xv.rows(), xv.cols(), vec![s; xv.as_slice().len()]));
                }
                Op::BinaryCe { p, labels, balanced } => {
                    let pv = self.value(*p);
                    let s = g.as_slice()[0];
                    let (wp, wn) = ce_weights::<T>(labels, *balanced);
                    let lo = T::lit(PROB_CLAMP);
                    let hi = T::one() - lo;
                    let data = pv
                        .as_slice()
                        .iter()
                        .zip(labels)
                        .map(|(&q, &y)| {
                            if q < lo || q > hi {
                                T::zero()
                            } else if y {
                                -s * wp / q
                            } else {
                                s * wn / (T::one() - q)
                            }
                        })
                        .collect();
                    add_grad(&mut grads, *p, Matrix::from_vec(pv.rows(), pv.cols(), data));
                }
                Op::SoftmaxCe { logits, labels } => {
                    let lv = self.value(*logits);
                    let s = g.as_slice()[0] / T::lit(labels.len().max(1) as f64);
                    let mut gx = Matrix::zeros(lv.rows(), lv.cols());
                    for (r, &y) in labels.iter().enumerate() {
                        let row = lv.row(r);
                        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                        let z: T = row.iter().map(|&v| (v - m).exp()).sum();
                        let out = gx.row_mut(r);
                        for (j, o) in out.iter_mut().enumerate() {
                            *o = s * (row[j] - m).exp() / z;
                        }
                        out[y] -= s;
                    }
                    add_grad(&mut grads, *logits, gx);
                }
                Op::Huber { pred, target, delta } => {
                    let pv = self.value(*pred);
                    let s = g.as_slice()[0] / T::lit(pv.rows().max(1) as f64);
                    let data = pv
                        .as_slice()
                        .iter()
                        .zip(target.as_slice())
                        .map(|(&a, &b)| s * (a - b).max(-*delta).min(*delta))
                        .collect();
                    add_grad(&mut grads, *pred, Matrix::from_vec(pv.rows(), pv.cols(), data));
                }
                Op::WeightedSum { terms } => {
                    let s = g.as_slice()[0];
                    for &(v, w) in terms {
                        add_grad(&mut grads, v, Matrix::scalar(s * w));
                    }
                }
            }
        }
        for id in self.store.ids() {
            if self.store.entry(id).trainable && pg.get(id).is_none() {
                pg.slots[id.0] = Some(vec![T::zero(); self.store.data(id).len()]);
            }
        }
        Ok(pg)
    }
}

fn add_grad<T: Real>(grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn ce_weights<T: Real>(labels: &[bool], balanced: bool) -> (T, T) {
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if balanced {
        let w = |n: usize| if n == 0 { T::zero() } else { T::one() / T::lit(2.0 * n as f64) };
        (w(pos), w(neg))
    } else {
        let w = T::one() / T::lit(labels.len() as f64);
        (w, w)
    }
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn huber<T: Real>(e: T, delta: T) -> T {
    let a = e.abs();
    if a <= delta {
        T::lit(0.5) * e * e
    } else {
        delta * (a - T::lit(0.5) * delta)
    }
}
