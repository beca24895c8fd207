//! Minimal reverse-mode autodiff over `Array2<f64>`.
//!
//! A [`Tape`] records a forward computation as a flat list of nodes; calling
//! [`Tape::backward`] walks the list in reverse and accumulates gradients.
//! The op set is exactly what the trainable models here need: dense matmuls,
//! row-broadcast bias, tanh, layer norm, block attention (a batch is laid out
//! as `(batch * tokens) x width` with attention restricted to fixed-size row
//! blocks), pooling, embedding lookup, and the two fused losses.
//!
//! Everything is f64 and single-threaded; given the same inputs the same
//! tape produces bitwise-identical values and gradients.

use ndarray::{s, Array1, Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    /// `A . B^T`
    MatMulNT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    MulElem(usize, usize),
    Scale(usize, f64),
    /// `X (R x C)` plus a `1 x C` row broadcast over rows.
    AddRow(usize, usize),
    Tanh(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
    },
    L2NormRows(usize),
    /// Mean over each contiguous block of `block` rows; output has R/block rows.
    MeanPoolBlocks {
        x: usize,
        block: usize,
    },
    /// Row lookup into a table (embedding); output row r is table row ids[r].
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    /// Per-block `Q_b . K_b^T / sqrt(d)`; Q, K are `(n*block) x d`.
    AttnScores {
        q: usize,
        k: usize,
        block: usize,
    },
    /// Row softmax within blocks; the causal mask (when used) is applied in
    /// the forward pass, and masked entries backpropagate zero because their
    /// softmax output is zero.
    BlockSoftmax {
        x: usize,
        block: usize,
    },
    /// Per-block `A_b . V_b`; A is `(n*block) x block`, V is `(n*block) x d`.
    AttnApply {
        attn: usize,
        v: usize,
        block: usize,
    },
    SumAll(usize),
    /// Mean over rows of `lse(logits_r) - logits_r[target_r]`.
    CrossEntropyMean {
        logits: usize,
        targets: Vec<usize>,
    },
    /// `sum_i [lse(row_i) - row_i[i]]` on a square logit matrix.
    InfoNce {
        logits: usize,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

const LAYER_NORM_EPS: f64 = 1e-5;

/// Records a forward pass and differentiates it.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Array2<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` root with respect to `v`, if any
    /// gradient reached it.
    pub fn grad(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "not a scalar node");
        val[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(v, Op::MatMul(a.0, b.0))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value.t());
        self.push(v, Op::MatMulNT(a.0, b.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::MulElem(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = &self.nodes[a.0].value * c;
        self.push(v, Op::Scale(a.0, c))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let r = &self.nodes[row.0].value;
        assert_eq!(r.nrows(), 1);
        let v = &self.nodes[x.0].value + &r.row(0);
        self.push(v, Op::AddRow(x.0, row.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(v, Op::Tanh(a.0))
    }

    /// Row-wise layer norm with learned `1 x C` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let g = self.nodes[gain.0].value.row(0).to_owned();
        let b = self.nodes[bias.0].value.row(0).to_owned();
        let c = xv.ncols() as f64;
        let mut out = Array2::zeros(xv.raw_dim());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mu = row.sum() / c;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..xv.ncols() {
                out[[i, j]] = (row[j] - mu) * inv * g[j] + b[j];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
            },
        )
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let mut out = xv.clone();
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt().max(1e-12);
            row.mapv_inplace(|v| v / n);
        }
        self.push(out, Op::L2NormRows(x.0))
    }

    pub fn mean_pool_blocks(&mut self, x: Var, block: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.nrows() % block, 0);
        let n = xv.nrows() / block;
        let mut out = Array2::zeros((n, xv.ncols()));
        for g in 0..n {
            let sl = xv.slice(s![g * block..(g + 1) * block, ..]);
            out.row_mut(g).assign(&(sl.sum_axis(Axis(0)) / block as f64));
        }
        self.push(out, Op::MeanPoolBlocks { x: x.0, block })
    }

    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = &self.nodes[table.0].value;
        let mut out = Array2::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).assign(&t.row(id));
        }
        self.push(
            out,
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn attn_scores(&mut self, q: Var, k: Var, block: usize) -> Var {
        let qv = &self.nodes[q.0].value;
        let kv = &self.nodes[k.0].value;
        assert_eq!(qv.dim(), kv.dim());
        assert_eq!(qv.nrows() % block, 0);
        let n = qv.nrows() / block;
        let scale = 1.0 / (qv.ncols() as f64).sqrt();
        let mut out = Array2::zeros((qv.nrows(), block));
        for g in 0..n {
            let rows = s![g * block..(g + 1) * block, ..];
            let sb = qv.slice(rows).dot(&kv.slice(rows).t()) * scale;
            out.slice_mut(rows).assign(&sb);
        }
        self.push(
            out,
            Op::AttnScores {
                q: q.0,
                k: k.0,
                block,
            },
        )
    }

    pub fn block_softmax(&mut self, x: Var, block: usize, causal: bool) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.ncols(), block);
        assert_eq!(xv.nrows() % block, 0);
        let mut out = Array2::zeros(xv.raw_dim());
        for (r, row) in xv.rows().into_iter().enumerate() {
            let pos = r % block;
            let limit = if causal { pos + 1 } else { block };
            let mx = row
                .iter()
                .take(limit)
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..limit {
                denom += (row[j] - mx).exp();
            }
            for j in 0..limit {
                out[[r, j]] = (row[j] - mx).exp() / denom;
            }
        }
        self.push(out, Op::BlockSoftmax { x: x.0, block })
    }

    pub fn attn_apply(&mut self, attn: Var, v: Var, block: usize) -> Var {
        let av = &self.nodes[attn.0].value;
        let vv = &self.nodes[v.0].value;
        assert_eq!(av.ncols(), block);
        assert_eq!(av.nrows(), vv.nrows());
        let n = av.nrows() / block;
        let mut out = Array2::zeros((vv.nrows(), vv.ncols()));
        for g in 0..n {
            let rows = s![g * block..(g + 1) * block, ..];
            let ob = av.slice(rows).dot(&vv.slice(rows));
            out.slice_mut(rows).assign(&ob);
        }
        self.push(
            out,
            Op::AttnApply {
                attn: attn.0,
                v: v.0,
                block,
            },
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.nodes[x.0].value.sum());
        self.push(v, Op::SumAll(x.0))
    }

    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = &self.nodes[logits.0].value;
        assert_eq!(lv.nrows(), targets.len());
        let mut total = 0.0;
        for (row, &t) in lv.rows().into_iter().zip(targets) {
            total += log_sum_exp(row.as_slice().unwrap()) - row[t];
        }
        let v = Array2::from_elem((1, 1), total / targets.len() as f64);
        self.push(
            v,
            Op::CrossEntropyMean {
                logits: logits.0,
                targets: targets.to_vec(),
            },
        )
    }

    pub fn info_nce(&mut self, logits: Var) -> Var {
        let lv = &self.nodes[logits.0].value;
        assert_eq!(lv.nrows(), lv.ncols(), "InfoNCE logits must be square");
        let mut total = 0.0;
        for (i, row) in lv.rows().into_iter().enumerate() {
            total += log_sum_exp(row.as_slice().unwrap()) - row[i];
        }
        let v = Array2::from_elem((1, 1), total);
        self.push(v, Op::InfoNce { logits: logits.0 })
    }

    fn accumulate(&mut self, idx: usize, delta: Array2<f64>) {
        match &mut self.grads[idx] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    /// Backpropagate from a scalar root. Gradients of earlier `backward`
    /// calls are cleared.
    pub fn backward(&mut self, root: Var) {
        for g in self.grads.iter_mut() {
            *g = None;
        }
        assert_eq!(self.nodes[root.0].value.dim(), (1, 1));
        self.grads[root.0] = Some(Array2::ones((1, 1)));

        for i in (0..=root.0).rev() {
            let grad = match &self.grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = grad.dot(&self.nodes[b].value.t());
                    let db = self.nodes[a].value.t().dot(&grad);
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::MatMulNT(a, b) => {
                    let da = grad.dot(&self.nodes[b].value);
                    let db = grad.t().dot(&self.nodes[a].value);
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::Add(a, b) => {
                    self.accumulate(a, grad.clone());
                    self.accumulate(b, grad);
                }
                Op::Sub(a, b) => {
                    self.accumulate(a, grad.clone());
                    self.accumulate(b, -grad);
                }
                Op::MulElem(a, b) => {
                    let da = &grad * &self.nodes[b].value;
                    let db = &grad * &self.nodes[a].value;
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::Scale(a, c) => {
                    self.accumulate(a, grad * c);
                }
                Op::AddRow(x, row) => {
                    let drow = grad.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(x, grad);
                    self.accumulate(row, drow);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    let da = &grad * &y.mapv(|v| 1.0 - v * v);
                    self.accumulate(a, da);
                }
                Op::LayerNorm { x, gain, bias } => {
                    let xv = &self.nodes[x].value;
                    let g = self.nodes[gain].value.row(0).to_owned();
                    let c = xv.ncols() as f64;
                    let mut dx = Array2::zeros(xv.raw_dim());
                    let mut dgain = Array1::zeros(xv.ncols());
                    let mut dbias = Array1::zeros(xv.ncols());
                    for (r, row) in xv.rows().into_iter().enumerate() {
                        let mu = row.sum() / c;
                        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c;
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let xhat = row.mapv(|v| (v - mu) * inv);
                        let dy = grad.row(r);
                        for j in 0..xv.ncols() {
                            dgain[j] += dy[j] * xhat[j];
                            dbias[j] += dy[j];
                        }
                        let dxhat = &dy.to_owned() * &g;
                        let m1 = dxhat.sum() / c;
                        let m2 = (&dxhat * &xhat).sum() / c;
                        for j in 0..xv.ncols() {
                            dx[[r, j]] = inv * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                    self.accumulate(x, dx);
                    self.accumulate(gain, dgain.insert_axis(Axis(0)));
                    self.accumulate(bias, dbias.insert_axis(Axis(0)));
                }
                Op::L2NormRows(x) => {
                    let xv = &self.nodes[x].value;
                    let y = &self.nodes[i].value;
                    let mut dx = Array2::zeros(xv.raw_dim());
                    for (r, xr) in xv.rows().into_iter().enumerate() {
                        let n = xr.dot(&xr).sqrt().max(1e-12);
                        let yr = y.row(r);
                        let dyr = grad.row(r);
                        let proj = dyr.dot(&yr);
                        for j in 0..xv.ncols() {
                            dx[[r, j]] = (dyr[j] - yr[j] * proj) / n;
                        }
                    }
                    self.accumulate(x, dx);
                }
                Op::MeanPoolBlocks { x, block } => {
                    let rows = self.nodes[x].value.nrows();
                    let mut dx = Array2::zeros((rows, grad.ncols()));
                    for g in 0..grad.nrows() {
                        let contrib = &grad.row(g) / block as f64;
                        for r in g * block..(g + 1) * block {
                            dx.row_mut(r).assign(&contrib);
                        }
                    }
                    self.accumulate(x, dx);
                }
                Op::Gather { table, ids } => {
                    let dims = self.nodes[table].value.raw_dim();
                    let mut dt = Array2::zeros(dims);
                    for (r, &id) in ids.iter().enumerate() {
                        let mut target = dt.row_mut(id);
                        target += &grad.row(r);
                    }
                    self.accumulate(table, dt);
                }
                Op::AttnScores { q, k, block } => {
                    let qv = &self.nodes[q].value;
                    let kv = &self.nodes[k].value;
                    let scale = 1.0 / (qv.ncols() as f64).sqrt();
                    let n = qv.nrows() / block;
                    let mut dq = Array2::zeros(qv.raw_dim());
                    let mut dk = Array2::zeros(kv.raw_dim());
                    for g in 0..n {
                        let rows = s![g * block..(g + 1) * block, ..];
                        let gb = grad.slice(rows);
                        dq.slice_mut(rows)
                            .assign(&(gb.dot(&kv.slice(rows)) * scale));
                        dk.slice_mut(rows)
                            .assign(&(gb.t().dot(&qv.slice(rows)) * scale));
                    }
                    self.accumulate(q, dq);
                    self.accumulate(k, dk);
                }
                Op::BlockSoftmax { x, block } => {
                    let y = &self.nodes[i].value;
                    let mut dx = Array2::zeros(y.raw_dim());
                    for (r, yr) in y.rows().into_iter().enumerate() {
                        let dyr = grad.row(r);
                        let dot = dyr.dot(&yr);
                        for j in 0..block {
                            dx[[r, j]] = yr[j] * (dyr[j] - dot);
                        }
                    }
                    self.accumulate(x, dx);
                }
                Op::AttnApply { attn, v, block } => {
                    let av = &self.nodes[attn].value;
                    let vv = &self.nodes[v].value;
                    let n = av.nrows() / block;
                    let mut da = Array2::zeros(av.raw_dim());
                    let mut dv = Array2::zeros(vv.raw_dim());
                    for g in 0..n {
                        let rows = s![g * block..(g + 1) * block, ..];
                        let gb = grad.slice(rows);
                        da.slice_mut(rows).assign(&gb.dot(&vv.slice(rows).t()));
                        dv.slice_mut(rows).assign(&av.slice(rows).t().dot(&gb));
                    }
                    self.accumulate(attn, da);
                    self.accumulate(v, dv);
                }
                Op::SumAll(x) => {
                    let dims = self.nodes[x].value.raw_dim();
                    let dx = Array2::from_elem(dims, grad[[0, 0]]);
                    self.accumulate(x, dx);
                }
                Op::CrossEntropyMean { logits, targets } => {
                    let lv = &self.nodes[logits].value;
                    let g0 = grad[[0, 0]] / targets.len() as f64;
                    let mut dl = Array2::zeros(lv.raw_dim());
                    for (r, &t) in targets.iter().enumerate() {
                        let sm = softmax_row(lv.row(r).as_slice().unwrap());
                        for j in 0..lv.ncols() {
                            dl[[r, j]] = g0 * sm[j];
                        }
                        dl[[r, t]] -= g0;
                    }
                    self.accumulate(logits, dl);
                }
                Op::InfoNce { logits } => {
                    let lv = &self.nodes[logits].value;
                    let g0 = grad[[0, 0]];
                    let mut dl = Array2::zeros(lv.raw_dim());
                    for r in 0..lv.nrows() {
                        let sm = softmax_row(lv.row(r).as_slice().unwrap());
                        for j in 0..lv.ncols() {
                            dl[[r, j]] = g0 * sm[j];
                        }
                        dl[[r, r]] -= g0;
                    }
                    self.accumulate(logits, dl);
                }
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Numerically stable log(sum(exp(xs))).
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    let s: f64 = xs.iter().map(|&x| (x - mx).exp()).sum();
    mx + s.ln()
}

/// Stable row softmax.
pub fn softmax_row(xs: &[f64]) -> Vec<f64> {
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - mx).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / denom).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn randn(rng: &mut ChaCha12Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen::<f64>() * 2.0 - 1.0)
    }

    /// Central finite differences on one input of a scalar-valued builder.
    fn finite_diff<F>(build: F, inputs: &mut Vec<Array2<f64>>, which: usize) -> Array2<f64>
    where
        F: Fn(&[Array2<f64>]) -> f64,
    {
        let eps = 1e-6;
        let dims = inputs[which].raw_dim();
        let mut out = Array2::zeros(dims);
        for idx in 0..inputs[which].len() {
            let (r, c) = (idx / out.ncols(), idx % out.ncols());
            let orig = inputs[which][[r, c]];
            inputs[which][[r, c]] = orig + eps;
            let up = build(inputs);
            inputs[which][[r, c]] = orig - eps;
            let down = build(inputs);
            inputs[which][[r, c]] = orig;
            out[[r, c]] = (up - down) / (2.0 * eps);
        }
        out
    }

    fn check_grads<F>(build: F, inputs: Vec<Array2<f64>>)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let eval = |xs: &[Array2<f64>]| {
            let mut t = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone())).collect();
            let root = build(&mut t, &vars);
            t.scalar(root)
        };
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
        let root = build(&mut t, &vars);
        t.backward(root);

        let mut xs = inputs.clone();
        for (w, var) in vars.iter().enumerate() {
            let fd = finite_diff(eval, &mut xs, w);
            let ad = t
                .grad(*var)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(fd.raw_dim()));
            for (a, f) in ad.iter().zip(fd.iter()) {
                let denom = a.abs().max(f.abs()).max(1e-4);
                assert!(
                    (a - f).abs() / denom < 1e-5,
                    "input {w}: ad {a} vs fd {f}"
                );
            }
        }
    }

    #[test]
    fn grad_matmul_chain() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let a = randn(&mut rng, 3, 4);
        let b = randn(&mut rng, 4, 2);
        let c = randn(&mut rng, 3, 2);
        check_grads(
            |t, v| {
                let y = t.matmul(v[0], v[1]);
                let d = t.sub(y, v[2]);
                let sq = t.mul_elem(d, d);
                t.sum_all(sq)
            },
            vec![a, b, c],
        );
    }

    #[test]
    fn grad_matmul_nt_tanh_scale() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let a = randn(&mut rng, 3, 4);
        let b = randn(&mut rng, 5, 4);
        check_grads(
            |t, v| {
                let y = t.matmul_nt(v[0], v[1]);
                let h = t.tanh(y);
                let s = t.scale(h, 0.7);
                t.sum_all(s)
            },
            vec![a, b],
        );
    }

    #[test]
    fn grad_add_row_and_pool() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let x = randn(&mut rng, 6, 3);
        let b = randn(&mut rng, 1, 3);
        check_grads(
            |t, v| {
                let y = t.add_row(v[0], v[1]);
                let h = t.tanh(y);
                let p = t.mean_pool_blocks(h, 3);
                let sq = t.mul_elem(p, p);
                t.sum_all(sq)
            },
            vec![x, b],
        );
    }

    #[test]
    fn grad_layer_norm() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let x = randn(&mut rng, 4, 5);
        let g = randn(&mut rng, 1, 5);
        let b = randn(&mut rng, 1, 5);
        let w = randn(&mut rng, 5, 2);
        check_grads(
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2]);
                let z = t.matmul(y, v[3]);
                let sq = t.mul_elem(z, z);
                t.sum_all(sq)
            },
            vec![x, g, b, w],
        );
    }

    #[test]
    fn grad_l2_normalize() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let x = randn(&mut rng, 4, 3) + 0.5;
        let w = randn(&mut rng, 3, 3);
        check_grads(
            |t, v| {
                let y = t.l2_normalize_rows(v[0]);
                let z = t.matmul(y, v[1]);
                let h = t.tanh(z);
                t.sum_all(h)
            },
            vec![x, w],
        );
    }

    #[test]
    fn grad_attention_block() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let block = 3;
        let q = randn(&mut rng, 6, 4);
        let k = randn(&mut rng, 6, 4);
        let v = randn(&mut rng, 6, 4);
        for causal in [false, true] {
            check_grads(
                |t, vars| {
                    let s = t.attn_scores(vars[0], vars[1], block);
                    let a = t.block_softmax(s, block, causal);
                    let o = t.attn_apply(a, vars[2], block);
                    let sq = t.mul_elem(o, o);
                    t.sum_all(sq)
                },
                vec![q.clone(), k.clone(), v.clone()],
            );
        }
    }

    #[test]
    fn grad_gather_cross_entropy() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let table = randn(&mut rng, 5, 4);
        let w = randn(&mut rng, 4, 5);
        let ids = vec![0usize, 2, 4, 2];
        let targets = vec![1usize, 3, 0, 2];
        check_grads(
            |t, v| {
                let e = t.gather(v[0], &ids);
                let logits = t.matmul(e, v[1]);
                t.cross_entropy_mean(logits, &targets)
            },
            vec![table, w],
        );
    }

    #[test]
    fn grad_info_nce() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let h = randn(&mut rng, 4, 3);
        let hm = randn(&mut rng, 4, 3);
        check_grads(
            |t, v| {
                let a = t.l2_normalize_rows(v[0]);
                let b = t.l2_normalize_rows(v[1]);
                let logits = t.matmul_nt(a, b);
                let scaled = t.scale(logits, 1.0 / 0.1);
                t.info_nce(scaled)
            },
            vec![h, hm],
        );
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut t = Tape::new();
        let x = t.leaf(Array2::from_shape_vec((2, 2), vec![1.0, 9.0, 0.5, 0.5]).unwrap());
        let y = t.block_softmax(x, 2, true);
        let yv = t.value(y);
        assert_eq!(yv[[0, 0]], 1.0);
        assert_eq!(yv[[0, 1]], 0.0);
        assert!((yv[[1, 0]] - 0.5).abs() < 1e-12);
    }
}
