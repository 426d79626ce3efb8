use rand::Rng;

use super::Tensor;
use crate::Scalar;

/// Handle to a value recorded on a [`Tape`].
///
/// Only valid for the tape that produced it; indices are never reused within
/// one tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One recorded operation. Inputs are indices of earlier nodes, so reverse
/// index order is a reverse topological order.
enum Op<T> {
    Leaf,
    /// Value copy whose backward contributes nothing to the source.
    Detach,
    Add(usize, usize),
    /// Sum of several same-shape values.
    AddN(Vec<usize>),
    /// Elementwise product.
    Mul(usize, usize),
    ScalarMul(usize, T),
    AddScalar(usize),
    Tanh(usize),
    Sigmoid(usize),
    /// `[m,k] x [k,n] -> [m,n]`.
    MatMul(usize, usize),
    /// `[r,c] x [c] -> [r]`.
    MatVec(usize, usize),
    /// `[n] x [n,d] -> [d]`.
    VecMat(usize, usize),
    /// Column `ids[t]` of the table becomes column `t` of the output.
    EmbedCols { table: usize, ids: Vec<usize> },
    /// Bank row `f` holds `width` stacked columns of a `[dim, width]` kernel:
    /// `out[f,t] = sum_{o,e} bank[f, o*dim+e] * input[e, t+o]`.
    ConvOverTime { bank: usize, input: usize, width: usize },
    /// `[r,c] + [r]`, the vector added to every column.
    AddColBroadcast(usize, usize),
    /// `[n,d] + [d]`, the vector added to every row.
    AddRowBroadcast(usize, usize),
    /// Per-row maximum of a `[r,c]` matrix; ties resolve to the lowest column.
    MaxOverTime { input: usize, argmax: Vec<usize> },
    /// Max over `pieces` consecutive entries; ties resolve to the lowest index.
    Maxout { input: usize, argmax: Vec<usize> },
    /// Mask entries are 0 or 1/(1-rate); identity cases record no node.
    Dropout { input: usize, mask: Vec<T> },
    /// Value holds the probabilities.
    Softmax(usize),
    /// Negative log-probability of `target` under softmax of a logit vector.
    CrossEntropy { logits: usize, target: usize, probs: Vec<T> },
    /// Row of a matrix as a vector.
    Row(usize, usize),
    /// Vectors of equal length stacked as matrix rows.
    StackRows(Vec<usize>),
    /// Vector prepended as row 0 of a matrix.
    PrependRow { row: usize, matrix: usize },
    /// Vector repeated as every row of an `[n,d]` matrix.
    RepeatRow { input: usize, n: usize },
    /// Vectors joined end to end.
    ConcatVec(Vec<usize>),
    /// Matrices with equal row counts joined side by side.
    ConcatCols(usize, usize),
    /// Contiguous vector slice.
    Slice { input: usize, start: usize },
    /// Sum of all entries as a scalar.
    Sum(usize),
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Gradients of one scalar output with respect to every tape node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads[var.0].as_ref()
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads[var.0].take()
    }
}

/// Append-only record of a forward computation.
///
/// Every operation pushes one node holding its inputs and result; `backward`
/// walks the nodes in reverse and accumulates gradients. A tape is built per
/// training example and dropped afterwards.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), check_finite: cfg!(debug_assertions) }
    }

    /// Toggle the per-op finiteness assertion (on by default in debug builds).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        if self.check_finite {
            assert!(value.all_finite(), "tape op {} produced a non-finite value", op_name(&op));
        }
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    /// Copy of `x` that blocks gradient flow into it.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(Op::Detach, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let mut out = va.clone();
        out.add_assign(vb);
        self.push(Op::Add(a.0, b.0), out)
    }

    /// Sum of any number of same-shape values.
    pub fn add_n(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "add_n: no inputs");
        let mut out = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            let v = self.value(p);
            assert_eq!(out.shape(), v.shape(), "add_n: shape mismatch");
            out.add_assign(v);
        }
        self.push(Op::AddN(parts.iter().map(|v| v.0).collect()), out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let data = va.data().iter().zip(vb.data().iter()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(va.shape(), data).unwrap();
        self.push(Op::Mul(a.0, b.0), out)
    }

    pub fn scalar_mul(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(Op::ScalarMul(x.0, c), out)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(Op::AddScalar(x.0), out)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        self.push(Op::Tanh(x.0), out)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let one = T::one();
        let out = self.value(x).map(|v| one / (one + (-v).exp()));
        self.push(Op::Sigmoid(x.0), out)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b)).unwrap_or_else(|e| panic!("{e}"));
        self.push(Op::MatMul(a.0, b.0), out)
    }

    pub fn matvec(&mut self, m: Var, x: Var) -> Var {
        let out = self.value(m).matvec(self.value(x)).unwrap_or_else(|e| panic!("{e}"));
        self.push(Op::MatVec(m.0, x.0), out)
    }

    pub fn vecmat(&mut self, x: Var, m: Var) -> Var {
        let out = Tensor::vecmat(self.value(x), self.value(m)).unwrap_or_else(|e| panic!("{e}"));
        self.push(Op::VecMat(x.0, m.0), out)
    }

    /// `w.x + b` for a vector input.
    pub fn linear(&mut self, w: Var, x: Var, b: Var) -> Var {
        let wx = self.matvec(w, x);
        self.add(wx, b)
    }

    /// `x.w + b` applied to every row of `x`.
    pub fn linear_rows(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row_broadcast(xw, b)
    }

    /// Gather table columns: output column `t` is `table[:, ids[t]]`.
    pub fn embed_cols(&mut self, table: Var, ids: &[usize]) -> Var {
        let tab = self.value(table);
        assert_eq!(tab.rank(), 2, "embed_cols: table must be a matrix");
        let (d, vocab) = (tab.rows(), tab.cols());
        assert!(!ids.is_empty(), "embed_cols: empty id list");
        let mut out = Tensor::zeros(&[d, ids.len()]);
        for (t, &id) in ids.iter().enumerate() {
            assert!(id < vocab, "embed_cols: id {} out of range {}", id, vocab);
            for e in 0..d {
                out.set2(e, t, tab.at2(e, id));
            }
        }
        self.push(Op::EmbedCols { table: table.0, ids: ids.to_vec() }, out)
    }

    /// Valid 1-d convolution over the time axis of `input` (`[dim, time]`).
    /// `bank` is `[filters, dim*width]` with row `f` holding the kernel's
    /// columns stacked oldest first. Output is `[filters, time - width + 1]`.
    pub fn conv_over_time(&mut self, bank: Var, input: Var, width: usize) -> Var {
        let (vb, vi) = (self.value(bank), self.value(input));
        assert_eq!(vb.rank(), 2, "conv_over_time: bank must be a matrix");
        assert_eq!(vi.rank(), 2, "conv_over_time: input must be a matrix");
        let (nf, dim, time) = (vb.rows(), vi.rows(), vi.cols());
        assert_eq!(vb.cols(), dim * width, "conv_over_time: bank width mismatch");
        assert!(time >= width, "conv_over_time: input shorter than filter");
        let t_out = time - width + 1;
        let mut out = Tensor::zeros(&[nf, t_out]);
        for f in 0..nf {
            for t in 0..t_out {
                let mut acc = T::zero();
                for o in 0..width {
                    for e in 0..dim {
                        acc += vb.at2(f, o * dim + e) * vi.at2(e, t + o);
                    }
                }
                out.set2(f, t, acc);
            }
        }
        self.push(Op::ConvOverTime { bank: bank.0, input: input.0, width }, out)
    }

    /// Add a `[r]` vector to every column of a `[r,c]` matrix.
    pub fn add_col_broadcast(&mut self, m: Var, v: Var) -> Var {
        let (vm, vv) = (self.value(m), self.value(v));
        assert_eq!(vm.rank(), 2, "add_col_broadcast: need a matrix");
        assert_eq!(vm.rows(), vv.len(), "add_col_broadcast: length mismatch");
        let mut out = vm.clone();
        let (r, c) = (vm.rows(), vm.cols());
        for i in 0..r {
            let bias = vv.data()[i];
            for j in 0..c {
                let cur = out.at2(i, j);
                out.set2(i, j, cur + bias);
            }
        }
        self.push(Op::AddColBroadcast(m.0, v.0), out)
    }

    /// Add a `[d]` vector to every row of an `[n,d]` matrix.
    pub fn add_row_broadcast(&mut self, m: Var, v: Var) -> Var {
        let (vm, vv) = (self.value(m), self.value(v));
        assert_eq!(vm.rank(), 2, "add_row_broadcast: need a matrix");
        assert_eq!(vm.cols(), vv.len(), "add_row_broadcast: length mismatch");
        let mut out = vm.clone();
        let (r, c) = (vm.rows(), vm.cols());
        for i in 0..r {
            for j in 0..c {
                let cur = out.at2(i, j);
                out.set2(i, j, cur + vv.data()[j]);
            }
        }
        self.push(Op::AddRowBroadcast(m.0, v.0), out)
    }

    /// Per-row maximum over the time axis of a `[r, time]` matrix.
    pub fn max_over_time(&mut self, x: Var) -> Var {
        let v = self.value(x);
        assert_eq!(v.rank(), 2, "max_over_time: need a matrix");
        let (r, c) = (v.rows(), v.cols());
        assert!(c > 0, "max_over_time: empty time axis");
        let mut out = vec![T::zero(); r];
        let mut argmax = vec![0usize; r];
        for i in 0..r {
            let mut best = v.at2(i, 0);
            let mut at = 0;
            for j in 1..c {
                if v.at2(i, j) > best {
                    best = v.at2(i, j);
                    at = j;
                }
            }
            out[i] = best;
            argmax[i] = at;
        }
        self.push(Op::MaxOverTime { input: x.0, argmax }, Tensor::vector(out))
    }

    /// Max over groups of `pieces` consecutive entries of a vector.
    pub fn maxout(&mut self, x: Var, pieces: usize) -> Var {
        let v = self.value(x);
        assert_eq!(v.rank(), 1, "maxout: need a vector");
        assert!(
            pieces > 0 && v.len().is_multiple_of(pieces),
            "maxout: length not divisible by pieces"
        );
        let groups = v.len() / pieces;
        let mut out = vec![T::zero(); groups];
        let mut argmax = vec![0usize; groups];
        for g in 0..groups {
            let base = g * pieces;
            let mut best = v.data()[base];
            let mut at = base;
            for k in 1..pieces {
                if v.data()[base + k] > best {
                    best = v.data()[base + k];
                    at = base + k;
                }
            }
            out[g] = best;
            argmax[g] = at;
        }
        self.push(Op::Maxout { input: x.0, argmax }, Tensor::vector(out))
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-rate)` so the
    /// expected value is unchanged. Identity (the same `Var`, no node) when
    /// not training or when `rate` is zero.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: T, train: bool, rng: &mut R) -> Var {
        if !train || rate <= T::zero() {
            return x;
        }
        let rate_f = rate.to_f64().unwrap();
        assert!(rate_f < 1.0, "dropout: rate must be below 1");
        let keep_scale = T::one() / (T::one() - rate);
        let v = self.value(x);
        let mask: Vec<T> = (0..v.len())
            .map(|_| if rng.random::<f64>() < rate_f { T::zero() } else { keep_scale })
            .collect();
        let data: Vec<T> =
            v.data().iter().zip(mask.iter()).map(|(&a, &m)| a * m).collect();
        let out = Tensor::from_vec(v.shape(), data).unwrap();
        self.push(Op::Dropout { input: x.0, mask }, out)
    }

    /// Softmax of a logit vector, computed with the max subtracted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        assert_eq!(v.rank(), 1, "softmax: need a vector");
        let out = Tensor::vector(softmax_vec(v.data()));
        self.push(Op::Softmax(x.0), out)
    }

    /// `-ln softmax(logits)[target]` via a stable log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Var {
        let v = self.value(logits);
        assert_eq!(v.rank(), 1, "cross_entropy: need a logit vector");
        assert!(target < v.len(), "cross_entropy: target {} out of range {}", target, v.len());
        let probs = softmax_vec(v.data());
        let max = v.data().iter().cloned().fold(T::neg_infinity(), T::max);
        let log_z = v
            .data()
            .iter()
            .fold(T::zero(), |acc, &l| acc + (l - max).exp())
            .ln()
            + max;
        let loss = log_z - v.data()[target];
        self.push(
            Op::CrossEntropy { logits: logits.0, target, probs },
            Tensor::scalar(loss),
        )
    }

    /// Row `r` of a matrix as a vector.
    pub fn row(&mut self, m: Var, r: usize) -> Var {
        let v = self.value(m);
        assert_eq!(v.rank(), 2, "row: need a matrix");
        assert!(r < v.rows(), "row: index {} out of range {}", r, v.rows());
        let out = Tensor::vector(v.row_slice(r).to_vec());
        self.push(Op::Row(m.0, r), out)
    }

    /// Equal-length vectors stacked as the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty(), "stack_rows: no rows");
        let d = self.value(rows[0]).len();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            let v = self.value(r);
            assert_eq!(v.rank(), 1, "stack_rows: need vectors");
            assert_eq!(v.len(), d, "stack_rows: length mismatch");
            data.extend_from_slice(v.data());
        }
        let out = Tensor::from_vec(&[rows.len(), d], data).unwrap();
        self.push(Op::StackRows(rows.iter().map(|v| v.0).collect()), out)
    }

    /// Vector prepended as row 0 of a matrix.
    pub fn prepend_row(&mut self, row: Var, m: Var) -> Var {
        let (vr, vm) = (self.value(row), self.value(m));
        assert_eq!(vr.rank(), 1, "prepend_row: need a vector");
        assert_eq!(vm.rank(), 2, "prepend_row: need a matrix");
        assert_eq!(vr.len(), vm.cols(), "prepend_row: width mismatch");
        let mut data = Vec::with_capacity((vm.rows() + 1) * vm.cols());
        data.extend_from_slice(vr.data());
        data.extend_from_slice(vm.data());
        let out = Tensor::from_vec(&[vm.rows() + 1, vm.cols()], data).unwrap();
        self.push(Op::PrependRow { row: row.0, matrix: m.0 }, out)
    }

    /// Vector repeated as every row of an `[n, d]` matrix.
    pub fn repeat_row(&mut self, x: Var, n: usize) -> Var {
        let v = self.value(x);
        assert_eq!(v.rank(), 1, "repeat_row: need a vector");
        assert!(n > 0, "repeat_row: need at least one row");
        let d = v.len();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(v.data());
        }
        let out = Tensor::from_vec(&[n, d], data).unwrap();
        self.push(Op::RepeatRow { input: x.0, n }, out)
    }

    /// Vectors joined end to end.
    pub fn concat_vec(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_vec: no inputs");
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rank(), 1, "concat_vec: need vectors");
            data.extend_from_slice(v.data());
        }
        let out = Tensor::vector(data);
        self.push(Op::ConcatVec(parts.iter().map(|v| v.0).collect()), out)
    }

    /// Matrices with equal row counts joined side by side.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.rank(), 2, "concat_cols: need matrices");
        assert_eq!(vb.rank(), 2, "concat_cols: need matrices");
        assert_eq!(va.rows(), vb.rows(), "concat_cols: row count mismatch");
        let (r, ca, cb) = (va.rows(), va.cols(), vb.cols());
        let mut data = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            data.extend_from_slice(va.row_slice(i));
            data.extend_from_slice(vb.row_slice(i));
        }
        let out = Tensor::from_vec(&[r, ca + cb], data).unwrap();
        self.push(Op::ConcatCols(a.0, b.0), out)
    }

    /// Contiguous slice `[start, start+len)` of a vector.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x);
        assert_eq!(v.rank(), 1, "slice: need a vector");
        assert!(start + len <= v.len(), "slice: range out of bounds");
        let out = Tensor::vector(v.data()[start..start + len].to_vec());
        self.push(Op::Slice { input: x.0, start }, out)
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().fold(T::zero(), |acc, &v| acc + v);
        self.push(Op::Sum(x.0), Tensor::scalar(total))
    }

    /// Mean of several scalars, as `sum / count`.
    pub fn mean_of(&mut self, parts: &[Var]) -> Var {
        let total = self.add_n(parts);
        self.scalar_mul(total, T::one() / T::from(parts.len()).unwrap())
    }

    /// Gradients of a scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let lv = self.value(loss);
        assert!(lv.is_scalar(), "backward: loss must be a scalar");
        assert!(lv.item().is_finite(), "backward: loss is not finite");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let acc = |grads: &mut [Option<Tensor<T>>], idx: usize, delta: Tensor<T>| {
            match &mut grads[idx] {
                Some(t) => t.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf | Op::Detach => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::AddN(parts) => {
                for &p in parts {
                    acc(grads, p, g.clone());
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let da = Tensor::from_vec(
                    g.shape(),
                    g.data().iter().zip(vb.data().iter()).map(|(&x, &y)| x * y).collect(),
                )
                .unwrap();
                let db = Tensor::from_vec(
                    g.shape(),
                    g.data().iter().zip(va.data().iter()).map(|(&x, &y)| x * y).collect(),
                )
                .unwrap();
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::ScalarMul(x, c) => {
                let c = *c;
                acc(grads, *x, g.map(|v| v * c));
            }
            Op::AddScalar(x) => acc(grads, *x, g.clone()),
            Op::Tanh(x) => {
                let y = &self.nodes[i].value;
                let d = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(y.data().iter())
                        .map(|(&gv, &yv)| gv * (T::one() - yv * yv))
                        .collect(),
                )
                .unwrap();
                acc(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[i].value;
                let d = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(y.data().iter())
                        .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
                        .collect(),
                )
                .unwrap();
                acc(grads, *x, d);
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                acc(grads, *a, g.matmul(&vb.transpose()).unwrap());
                acc(grads, *b, va.transpose().matmul(g).unwrap());
            }
            Op::MatVec(m, x) => {
                let (vm, vx) = (&self.nodes[*m].value, &self.nodes[*x].value);
                acc(grads, *m, Tensor::outer(g, vx));
                acc(grads, *x, Tensor::vecmat(g, vm).unwrap());
            }
            Op::VecMat(x, m) => {
                let (vx, vm) = (&self.nodes[*x].value, &self.nodes[*m].value);
                acc(grads, *x, vm.matvec(g).unwrap());
                acc(grads, *m, Tensor::outer(vx, g));
            }
            Op::EmbedCols { table, ids } => {
                let tab = &self.nodes[*table].value;
                let d = tab.rows();
                let mut dt = Tensor::zeros(tab.shape());
                for (t, &id) in ids.iter().enumerate() {
                    for e in 0..d {
                        let cur = dt.at2(e, id);
                        dt.set2(e, id, cur + g.at2(e, t));
                    }
                }
                acc(grads, *table, dt);
            }
            Op::ConvOverTime { bank, input, width } => {
                let (vb, vi) = (&self.nodes[*bank].value, &self.nodes[*input].value);
                let (nf, dim) = (vb.rows(), vi.rows());
                let t_out = g.cols();
                let mut db = Tensor::zeros(vb.shape());
                let mut di = Tensor::zeros(vi.shape());
                for f in 0..nf {
                    for t in 0..t_out {
                        let gv = g.at2(f, t);
                        if gv == T::zero() {
                            continue;
                        }
                        for o in 0..*width {
                            for e in 0..dim {
                                let cb = db.at2(f, o * dim + e);
                                db.set2(f, o * dim + e, cb + gv * vi.at2(e, t + o));
                                let ci = di.at2(e, t + o);
                                di.set2(e, t + o, ci + gv * vb.at2(f, o * dim + e));
                            }
                        }
                    }
                }
                acc(grads, *bank, db);
                acc(grads, *input, di);
            }
            Op::AddColBroadcast(m, v) => {
                acc(grads, *m, g.clone());
                let (r, c) = (g.rows(), g.cols());
                let mut dv = vec![T::zero(); r];
                for (i, dvi) in dv.iter_mut().enumerate() {
                    for j in 0..c {
                        *dvi += g.at2(i, j);
                    }
                }
                acc(grads, *v, Tensor::vector(dv));
            }
            Op::AddRowBroadcast(m, v) => {
                acc(grads, *m, g.clone());
                let (r, c) = (g.rows(), g.cols());
                let mut dv = vec![T::zero(); c];
                for i in 0..r {
                    for (j, dvj) in dv.iter_mut().enumerate() {
                        *dvj += g.at2(i, j);
                    }
                }
                acc(grads, *v, Tensor::vector(dv));
            }
            Op::MaxOverTime { input, argmax } => {
                let vi = &self.nodes[*input].value;
                let mut d = Tensor::zeros(vi.shape());
                for (f, &t) in argmax.iter().enumerate() {
                    d.set2(f, t, g.data()[f]);
                }
                acc(grads, *input, d);
            }
            Op::Maxout { input, argmax, .. } => {
                let vi = &self.nodes[*input].value;
                let mut d = Tensor::zeros(vi.shape());
                for (grp, &at) in argmax.iter().enumerate() {
                    d.data_mut()[at] = g.data()[grp];
                }
                acc(grads, *input, d);
            }
            Op::Dropout { input, mask } => {
                let d = Tensor::from_vec(
                    g.shape(),
                    g.data().iter().zip(mask.iter()).map(|(&gv, &m)| gv * m).collect(),
                )
                .unwrap();
                acc(grads, *input, d);
            }
            Op::Softmax(x) => {
                let p = &self.nodes[i].value;
                let dot = g
                    .data()
                    .iter()
                    .zip(p.data().iter())
                    .fold(T::zero(), |acc, (&gv, &pv)| acc + gv * pv);
                let d = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(p.data().iter())
                        .map(|(&gv, &pv)| pv * (gv - dot))
                        .collect(),
                )
                .unwrap();
                acc(grads, *x, d);
            }
            Op::CrossEntropy { logits, target, probs } => {
                let gv = g.item();
                let mut d: Vec<T> = probs.iter().map(|&p| gv * p).collect();
                d[*target] -= gv;
                acc(grads, *logits, Tensor::vector(d));
            }
            Op::Row(m, r) => {
                let vm = &self.nodes[*m].value;
                let mut d = Tensor::zeros(vm.shape());
                for j in 0..vm.cols() {
                    d.set2(*r, j, g.data()[j]);
                }
                acc(grads, *m, d);
            }
            Op::StackRows(rows) => {
                for (r, &src) in rows.iter().enumerate() {
                    acc(grads, src, Tensor::vector(g.row_slice(r).to_vec()));
                }
            }
            Op::PrependRow { row, matrix } => {
                let c = g.cols();
                acc(grads, *row, Tensor::vector(g.row_slice(0).to_vec()));
                let dm =
                    Tensor::from_vec(&[g.rows() - 1, c], g.data()[c..].to_vec()).unwrap();
                acc(grads, *matrix, dm);
            }
            Op::RepeatRow { input, n } => {
                let d = g.cols();
                let mut dv = vec![T::zero(); d];
                for r in 0..*n {
                    for (j, dvj) in dv.iter_mut().enumerate() {
                        *dvj += g.at2(r, j);
                    }
                }
                acc(grads, *input, Tensor::vector(dv));
            }
            Op::ConcatVec(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    acc(grads, p, Tensor::vector(g.data()[offset..offset + len].to_vec()));
                    offset += len;
                }
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) =
                    (self.nodes[*a].value.cols(), self.nodes[*b].value.cols());
                let r = g.rows();
                let mut da = Tensor::zeros(&[r, ca]);
                let mut db = Tensor::zeros(&[r, cb]);
                for i in 0..r {
                    let row = g.row_slice(i);
                    da.data_mut()[i * ca..(i + 1) * ca].copy_from_slice(&row[..ca]);
                    db.data_mut()[i * cb..(i + 1) * cb].copy_from_slice(&row[ca..]);
                }
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Slice { input, start } => {
                let vi = &self.nodes[*input].value;
                let mut d = Tensor::zeros(vi.shape());
                d.data_mut()[*start..*start + g.len()].copy_from_slice(g.data());
                acc(grads, *input, d);
            }
            Op::Sum(x) => {
                let vi = &self.nodes[*x].value;
                acc(grads, *x, Tensor::filled(vi.shape(), g.item()));
            }
        }
    }
}

fn softmax_vec<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().cloned().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z = exps.iter().fold(T::zero(), |acc, &e| acc + e);
    exps.iter().map(|&e| e / z).collect()
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Detach => "detach",
        Op::Add(..) => "add",
        Op::AddN(_) => "add_n",
        Op::Mul(..) => "mul",
        Op::ScalarMul(..) => "scalar_mul",
        Op::AddScalar(_) => "add_scalar",
        Op::Tanh(_) => "tanh",
        Op::Sigmoid(_) => "sigmoid",
        Op::MatMul(..) => "matmul",
        Op::MatVec(..) => "matvec",
        Op::VecMat(..) => "vecmat",
        Op::EmbedCols { .. } => "embed_cols",
        Op::ConvOverTime { .. } => "conv_over_time",
        Op::AddColBroadcast(..) => "add_col_broadcast",
        Op::AddRowBroadcast(..) => "add_row_broadcast",
        Op::MaxOverTime { .. } => "max_over_time",
        Op::Maxout { .. } => "maxout",
        Op::Dropout { .. } => "dropout",
        Op::Softmax(_) => "softmax",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Row(..) => "row",
        Op::StackRows(_) => "stack_rows",
        Op::PrependRow { .. } => "prepend_row",
        Op::RepeatRow { .. } => "repeat_row",
        Op::ConcatVec(_) => "concat_vec",
        Op::ConcatCols(..) => "concat_cols",
        Op::Slice { .. } => "slice",
        Op::Sum(_) => "sum",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-9
    }

    #[test]
    fn cross_entropy_uniform_two_way() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
        let loss = tape.cross_entropy(logits, 0);
        assert!(close(tape.value(loss).item(), (2.0f64).ln()));
        let grads = tape.backward(loss);
        let d = grads.get(logits).unwrap();
        assert!(close(d.data()[0], -0.5));
        assert!(close(d.data()[1], 0.5));
    }

    #[test]
    fn cross_entropy_stable_on_extreme_logits() {
        let mut tape = Tape::<f32>::new();
        let logits = tape.leaf(Tensor::vector(vec![1000.0, -1000.0, 0.0]));
        let loss = tape.cross_entropy(logits, 1);
        assert!(tape.value(loss).item().is_finite());
        let grads = tape.backward(loss);
        assert!(grads.get(logits).unwrap().all_finite());
    }

    #[test]
    fn maxout_picks_group_maximum() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::vector(vec![3.0, -1.0]));
        let y = tape.maxout(x, 2);
        assert_eq!(tape.value(y).data(), &[3.0]);
        let loss = tape.sum(y);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn maxout_tie_routes_to_lowest_index() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::vector(vec![2.0, 2.0, 5.0, 1.0]));
        let y = tape.maxout(x, 2);
        assert_eq!(tape.value(y).data(), &[2.0, 5.0]);
        let loss = tape.sum(y);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn softmax_sums_to_one_and_backward_is_zero_sum() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::vector(vec![0.3, -1.2, 2.5, 0.0]));
        let p = tape.softmax(x);
        let total: f64 = tape.value(p).data().iter().sum();
        assert!(close(total, 1.0));
        let first = tape.row_like_first(p);
        let grads = tape.backward(first);
        let gsum: f64 = grads.get(x).unwrap().data().iter().sum();
        assert!(gsum.abs() < 1e-12);
    }

    #[test]
    fn matmul_gradient_matches_hand_result() {
        // f = sum(A.B): dA = ones . B^T, dB = A^T . ones.
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.leaf(Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let c = tape.matmul(a, b);
        let loss = tape.sum(c);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(a).unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn conv_over_time_hand_example() {
        // dim 1, width 2: out[t] = 10*x[t] + 20*x[t+1].
        let mut tape = Tape::<f64>::new();
        let bank = tape.leaf(Tensor::matrix(1, 2, vec![10.0, 20.0]).unwrap());
        let input = tape.leaf(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let out = tape.conv_over_time(bank, input, 2);
        assert_eq!(tape.value(out).shape(), &[1, 2]);
        assert_eq!(tape.value(out).data(), &[50.0, 80.0]);
        let loss = tape.sum(out);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(bank).unwrap().data(), &[3.0, 5.0]);
        assert_eq!(grads.get(input).unwrap().data(), &[10.0, 30.0, 20.0]);
    }

    #[test]
    fn max_over_time_tie_routes_to_lowest_index() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::matrix(1, 3, vec![7.0, 7.0, 1.0]).unwrap());
        let y = tape.max_over_time(x);
        assert_eq!(tape.value(y).data(), &[7.0]);
        let loss = tape.sum(y);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn dropout_identity_cases_record_no_node() {
        let mut tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert_eq!(tape.dropout(x, 0.5, false, &mut rng), x);
        assert_eq!(tape.dropout(x, 0.0, true, &mut rng), x);
    }

    #[test]
    fn dropout_scales_kept_entries() {
        let mut tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = tape.leaf(Tensor::vector(vec![1.0; 64]));
        let y = tape.dropout(x, 0.5, true, &mut rng);
        for &v in tape.value(y).data() {
            assert!(v == 0.0 || close(v, 2.0));
        }
        let loss = tape.sum(y);
        let grads = tape.backward(loss);
        let dy = tape.value(y).clone();
        assert_eq!(grads.get(x).unwrap().data(), dy.data());
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::vector(vec![2.0]));
        let d = tape.detach(x);
        let y = tape.mul(d, d);
        let loss = tape.sum(y);
        let grads = tape.backward(loss);
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(d).unwrap().data(), &[4.0]);
    }

    #[test]
    fn embed_cols_gathers_and_scatters() {
        let mut tape = Tape::<f64>::new();
        // Table [2, 3]: column j is [j+1, 10*(j+1)].
        let table = tape
            .leaf(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 10.0, 20.0, 30.0]).unwrap());
        let e = tape.embed_cols(table, &[2, 0, 2]);
        assert_eq!(tape.value(e).data(), &[3.0, 1.0, 3.0, 30.0, 10.0, 30.0]);
        let loss = tape.sum(e);
        let grads = tape.backward(loss);
        // Column 2 used twice, column 1 never.
        assert_eq!(grads.get(table).unwrap().data(), &[1.0, 0.0, 2.0, 1.0, 0.0, 2.0]);
    }

    #[test]
    fn gru_style_gate_from_zero_inputs_halves_state() {
        // With all weights and inputs zero, z = sigmoid(0) = 0.5 and the
        // candidate is 0, so the blended state from h = 1 is 0.5.
        let mut tape = Tape::<f64>::new();
        let h = tape.leaf(Tensor::vector(vec![1.0, 1.0]));
        let zeros = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
        let z = tape.sigmoid(zeros);
        let h_tilde = tape.tanh(zeros);
        let neg_z = tape.scalar_mul(z, -1.0);
        let one_minus_z = tape.add_scalar(neg_z, 1.0);
        let keep = tape.mul(one_minus_z, h);
        let update = tape.mul(z, h_tilde);
        let out = tape.add(keep, update);
        assert_eq!(tape.value(out).data(), &[0.5, 0.5]);
    }

    impl<T: Scalar> Tape<T> {
        /// First entry of a vector, for scalar test losses.
        fn row_like_first(&mut self, v: Var) -> Var {
            self.slice(v, 0, 1)
        }
    }
}
