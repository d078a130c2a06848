//! A small reverse-mode tape over dense `f64` matrices.
//!
//! Only the operations the vision transformer and its losses need are provided.
//! Sequences of a batch are stacked along rows (`[B*T, D]`); the attention op
//! knows how to split them back into sequences and heads.

use ndarray::{s, Array2, Axis, Zip};

use crate::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Attention {
        qkv: Var,
        seq_len: usize,
        heads: usize,
        probs: Vec<Mat>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    MaskedMse {
        pred: Var,
        target: Mat,
        rows: Vec<usize>,
    },
    SoftCrossEntropy {
        logits: Var,
        targets: Mat,
        probs: Mat,
    },
    WeightedSum(Vec<(Var, f64)>),
}

pub const LN_EPS: f64 = 1e-6;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn softmax_rows(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

#[derive(Default)]
pub struct Graph {
    values: Vec<Mat>,
    ops: Vec<Op>,
}

pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.values[v.0]
    }

    /// Scalar value of a `[1, 1]` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.values[v.0][[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.values[a.0].dot(&self.values[b.0]);
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = &self.values[a.0] + &self.values[b.0];
        self.push(out, Op::Add(a, b))
    }

    /// `a + row`, broadcasting a `[1, D]` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = &self.values[a.0] + &self.values[row.0];
        self.push(out, Op::AddRow(a, row))
    }

    /// `a + c` for a constant `c` (no gradient flows into `c`).
    pub fn add_const(&mut self, a: Var, c: &Mat) -> Var {
        let out = &self.values[a.0] + c;
        self.push(out, Op::AddConst(a))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = &self.values[a.0] * k;
        self.push(out, Op::Scale(a, k))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.values[a.0].mapv(gelu);
        self.push(out, Op::Gelu(a))
    }

    /// Row-wise layer normalization with affine `[1, D]` scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = &self.values[x.0];
        let d = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let out = &(&xhat * &self.values[gamma.0]) + &self.values[beta.0];
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Multi-head self-attention core. `qkv` is `[S*T, 3*D]` holding queries,
    /// keys and values side by side; the result is `[S*T, D]`.
    pub fn attention(&mut self, qkv: Var, seq_len: usize, heads: usize) -> Var {
        let x = &self.values[qkv.0];
        let (rows, three_d) = x.dim();
        assert!(three_d % 3 == 0 && rows % seq_len == 0);
        let d = three_d / 3;
        assert!(d % heads == 0);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((rows, d));
        let mut probs = Vec::with_capacity(rows / seq_len * heads);
        for sq in 0..rows / seq_len {
            let r = sq * seq_len..(sq + 1) * seq_len;
            for h in 0..heads {
                let q = x.slice(s![r.clone(), h * dh..(h + 1) * dh]);
                let k = x.slice(s![r.clone(), d + h * dh..d + (h + 1) * dh]);
                let v = x.slice(s![r.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh]);
                let mut p = q.dot(&k.t()) * scale;
                softmax_rows(&mut p);
                out.slice_mut(s![r.clone(), h * dh..(h + 1) * dh]).assign(&p.dot(&v));
                probs.push(p);
            }
        }
        self.push(
            out,
            Op::Attention {
                qkv,
                seq_len,
                heads,
                probs,
            },
        )
    }

    /// Post-softmax attention weights recorded by an attention node.
    pub fn attention_probs(&self, node: Var, seq: usize, head: usize) -> Option<&Mat> {
        match &self.ops[node.0] {
            Op::Attention { heads, probs, .. } if head < *heads => probs.get(seq * heads + head),
            _ => None,
        }
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let out = self.values[a.0].select(Axis(0), &idx);
        self.push(out, Op::GatherRows(a, idx))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.values[p.0].view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("matching column counts");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    /// Mean squared error over the listed rows of `pred` against a constant target.
    pub fn masked_mse(&mut self, pred: Var, target: Mat, rows: Vec<usize>) -> Var {
        let p = &self.values[pred.0];
        assert_eq!(p.dim(), target.dim());
        let count = (rows.len() * p.ncols()) as f64;
        let mut acc = 0.0;
        for &r in &rows {
            for (a, b) in p.row(r).iter().zip(target.row(r)) {
                acc += (a - b) * (a - b);
            }
        }
        let out = Array2::from_elem((1, 1), acc / count);
        self.push(out, Op::MaskedMse { pred, target, rows })
    }

    /// Mean squared error over all entries against a constant target.
    pub fn mse(&mut self, pred: Var, target: Mat) -> Var {
        let rows = (0..target.nrows()).collect();
        self.masked_mse(pred, target, rows)
    }

    /// Mean over rows of `-sum_j t_j log softmax(logits)_j`.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: Mat) -> Var {
        let mut probs = self.values[logits.0].clone();
        assert_eq!(probs.dim(), targets.dim());
        softmax_rows(&mut probs);
        let n = probs.nrows() as f64;
        let loss = Zip::from(&probs)
            .and(&targets)
            .fold(0.0, |acc, &p, &t| if t != 0.0 { acc - t * p.ln() } else { acc })
            / n;
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::SoftCrossEntropy {
                logits,
                targets,
                probs,
            },
        )
    }

    /// `sum_i w_i * x_i` over `[1, 1]` scalars.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let total = terms.iter().map(|&(v, w)| w * self.scalar(v)).sum::<f64>();
        self.push(Array2::from_elem((1, 1), total), Op::WeightedSum(terms.to_vec()))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Mat>> = (0..self.values.len()).map(|_| None).collect();
        grads[output.0] = Some(Array2::ones(self.values[output.0].dim()));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        fn acc(grads: &mut [Option<Mat>], v: Var, delta: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        }
        match &self.ops[i] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(grads, *a, g.dot(&self.values[b.0].t()));
                acc(grads, *b, self.values[a.0].t().dot(g));
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                acc(grads, *a, g.clone());
                acc(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::AddConst(a) => acc(grads, *a, g.clone()),
            Op::Scale(a, k) => acc(grads, *a, g * *k),
            Op::Gelu(a) => {
                let mut d = self.values[a.0].mapv(gelu_grad);
                d *= g;
                acc(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                acc(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                acc(grads, *gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                let dxhat = g * &self.values[gamma.0];
                let d = xhat.ncols() as f64;
                let mut dx = Array2::zeros(xhat.dim());
                for (r, mut out) in dx.rows_mut().into_iter().enumerate() {
                    let dh = dxhat.row(r);
                    let xh = xhat.row(r);
                    let mean_dh = dh.sum() / d;
                    let mean_dh_xh = dh.dot(&xh) / d;
                    let is = inv_std[r];
                    for j in 0..out.len() {
                        out[j] = is * (dh[j] - mean_dh - xh[j] * mean_dh_xh);
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Attention {
                qkv,
                seq_len,
                heads,
                probs,
            } => {
                let x = &self.values[qkv.0];
                let (rows, three_d) = x.dim();
                let d = three_d / 3;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dx = Array2::zeros((rows, three_d));
                for sq in 0..rows / seq_len {
                    let r = sq * seq_len..(sq + 1) * seq_len;
                    for h in 0..*heads {
                        let p = &probs[sq * heads + h];
                        let q = x.slice(s![r.clone(), h * dh..(h + 1) * dh]);
                        let k = x.slice(s![r.clone(), d + h * dh..d + (h + 1) * dh]);
                        let v = x.slice(s![r.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh]);
                        let go = g.slice(s![r.clone(), h * dh..(h + 1) * dh]);
                        let dv = p.t().dot(&go);
                        let dp = go.dot(&v.t());
                        let mut ds = dp;
                        for (mut ds_row, p_row) in ds.rows_mut().into_iter().zip(p.rows()) {
                            let dot = ds_row.dot(&p_row);
                            Zip::from(&mut ds_row).and(&p_row).for_each(|x, &pv| *x = pv * (*x - dot));
                        }
                        ds *= scale;
                        let dq = ds.dot(&k);
                        let dk = ds.t().dot(&q);
                        dx.slice_mut(s![r.clone(), h * dh..(h + 1) * dh]).assign(&dq);
                        dx.slice_mut(s![r.clone(), d + h * dh..d + (h + 1) * dh]).assign(&dk);
                        dx.slice_mut(s![r.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh]).assign(&dv);
                    }
                }
                acc(grads, *qkv, dx);
            }
            Op::GatherRows(a, idx) => {
                let mut d = Array2::zeros(self.values[a.0].dim());
                for (src, &dst) in idx.iter().enumerate() {
                    let mut row = d.row_mut(dst);
                    row += &g.row(src);
                }
                acc(grads, *a, d);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let n = self.values[p.0].nrows();
                    acc(grads, *p, g.slice(s![start..start + n, ..]).to_owned());
                    start += n;
                }
            }
            Op::MaskedMse { pred, target, rows } => {
                let p = &self.values[pred.0];
                let count = (rows.len() * p.ncols()) as f64;
                let k = 2.0 * g[[0, 0]] / count;
                let mut d = Array2::zeros(p.dim());
                for &r in rows {
                    Zip::from(d.row_mut(r))
                        .and(p.row(r))
                        .and(target.row(r))
                        .for_each(|o, &a, &b| *o += k * (a - b));
                }
                acc(grads, *pred, d);
            }
            Op::SoftCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = probs.nrows() as f64;
                let mut d = probs.clone();
                for (mut row, t) in d.rows_mut().into_iter().zip(targets.rows()) {
                    let mass = t.sum();
                    Zip::from(&mut row).and(&t).for_each(|x, &tv| *x = *x * mass - tv);
                }
                d *= g[[0, 0]] / n;
                acc(grads, *logits, d);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    acc(grads, v, g * w);
                }
            }
        }
    }
}
