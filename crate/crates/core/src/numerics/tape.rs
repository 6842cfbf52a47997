//! Reverse-mode differentiation over small matrices.
//!
//! Operations are recorded on a [`Tape`] as they run; [`Tape::backward`]
//! walks the record in reverse and returns adjoints for every node. Only the
//! operations the attention policy needs are provided.

use super::{log_softmax_in_place, ParameterSet};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Row-major matrix value.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(usize),
    Gather(Var, Vec<usize>),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    CausalSoftmax(Var),
    LogSoftmax(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    PickSum(Var, Vec<(usize, usize)>),
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Constant)
    }

    /// Registers parameter tensor `index` of `params` as a leaf. Vectors become `1 x n`.
    pub fn param(&mut self, params: &ParameterSet, index: usize) -> Var {
        let t = params.tensor(index);
        let (rows, cols) = match t.shape() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => panic!("tape parameters must be rank 1 or 2, got {s:?}"),
        };
        self.push(
            Mat {
                rows,
                cols,
                data: t.data().to_vec(),
            },
            Op::Param(index),
        )
    }

    /// Selects rows `ids` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Mat::zeros(ids.len(), t.cols);
        for (r, &id) in ids.iter().enumerate() {
            out.data[r * t.cols..(r + 1) * t.cols]
                .copy_from_slice(&t.data[id * t.cols..(id + 1) * t.cols]);
        }
        self.push(out, Op::Gather(table, ids.to_vec()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols, y.rows, "matmul shape mismatch");
        let mut out = Mat::zeros(x.rows, y.cols);
        for i in 0..x.rows {
            for k in 0..x.cols {
                let xik = x.at(i, k);
                for j in 0..y.cols {
                    *out.at_mut(i, j) += xik * y.at(k, j);
                }
            }
        }
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols, y.cols, "matmul_bt shape mismatch");
        let mut out = Mat::zeros(x.rows, y.rows);
        for i in 0..x.rows {
            for j in 0..y.rows {
                let mut acc = 0.0;
                for k in 0..x.cols {
                    acc += x.at(i, k) * y.at(j, k);
                }
                *out.at_mut(i, j) = acc;
            }
        }
        self.push(out, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!((x.rows, x.cols), (y.rows, y.cols), "add shape mismatch");
        let mut out = x.clone();
        for (o, v) in out.data.iter_mut().zip(&y.data) {
            *o += v;
        }
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!((r.rows, r.cols), (1, x.cols), "add_row shape mismatch");
        let mut out = x.clone();
        for i in 0..x.rows {
            for j in 0..x.cols {
                *out.at_mut(i, j) += r.data[j];
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x *= s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x = x.tanh());
        self.push(out, Op::Tanh(a))
    }

    /// Row-wise softmax of a square score matrix, masking columns `j > i`.
    pub fn causal_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert_eq!(x.rows, x.cols, "causal_softmax needs a square matrix");
        let mut out = Mat::zeros(x.rows, x.cols);
        for i in 0..x.rows {
            let max = (0..=i).map(|j| x.at(i, j)).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..=i {
                let e = (x.at(i, j) - max).exp();
                *out.at_mut(i, j) = e;
                sum += e;
            }
            for j in 0..=i {
                *out.at_mut(i, j) /= sum;
            }
        }
        self.push(out, Op::CausalSoftmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let cols = out.cols;
        for row in out.data.chunks_mut(cols) {
            log_softmax_in_place(row);
        }
        self.push(out, Op::LogSoftmax(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        let mut out = Mat::zeros(x.rows, len);
        for i in 0..x.rows {
            for j in 0..len {
                *out.at_mut(i, j) = x.at(i, start + j);
            }
        }
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.rows, rows, "concat_cols row mismatch");
            for i in 0..rows {
                for j in 0..x.cols {
                    *out.at_mut(i, off + j) = x.at(i, j);
                }
            }
            off += x.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Sum of selected `(row, col)` entries, as a `1 x 1` node.
    pub fn pick_sum(&mut self, a: Var, picks: &[(usize, usize)]) -> Var {
        let x = self.value(a);
        let s = picks.iter().map(|&(r, c)| x.at(r, c)).sum();
        self.push(
            Mat {
                rows: 1,
                cols: 1,
                data: vec![s],
            },
            Op::PickSum(a, picks.to_vec()),
        )
    }

    /// Adjoints of every node with respect to the scalar node `root`.
    pub fn backward(&self, root: Var) -> Vec<Mat> {
        let mut grads: Vec<Mat> = self
            .nodes
            .iter()
            .map(|n| Mat::zeros(n.value.rows, n.value.cols))
            .collect();
        grads[root.0].data.iter_mut().for_each(|g| *g = 1.0);
        for idx in (0..=root.0).rev() {
            let g = std::mem::replace(&mut grads[idx], Mat::zeros(0, 0));
            if g.data.iter().all(|&x| x == 0.0) {
                grads[idx] = g;
                continue;
            }
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant | Op::Param(_) => {}
                Op::Gather(table, ids) => {
                    let cols = g.cols;
                    let tg = &mut grads[table.0];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..cols {
                            tg.data[id * cols + j] += g.data[r * cols + j];
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    // dA = G · Bᵀ, dB = Aᵀ · G
                    for i in 0..x.rows {
                        for k in 0..x.cols {
                            let mut acc = 0.0;
                            for j in 0..y.cols {
                                acc += g.at(i, j) * y.at(k, j);
                            }
                            *grads[a.0].at_mut(i, k) += acc;
                        }
                    }
                    for k in 0..y.rows {
                        for j in 0..y.cols {
                            let mut acc = 0.0;
                            for i in 0..x.rows {
                                acc += x.at(i, k) * g.at(i, j);
                            }
                            *grads[b.0].at_mut(k, j) += acc;
                        }
                    }
                }
                Op::MatMulBt(a, b) => {
                    let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    // C = A Bᵀ: dA = G B, dB = Gᵀ A
                    for i in 0..x.rows {
                        for k in 0..x.cols {
                            let mut acc = 0.0;
                            for j in 0..y.rows {
                                acc += g.at(i, j) * y.at(j, k);
                            }
                            *grads[a.0].at_mut(i, k) += acc;
                        }
                    }
                    for j in 0..y.rows {
                        for k in 0..y.cols {
                            let mut acc = 0.0;
                            for i in 0..x.rows {
                                acc += g.at(i, j) * x.at(i, k);
                            }
                            *grads[b.0].at_mut(j, k) += acc;
                        }
                    }
                }
                Op::Add(a, b) => {
                    for (d, v) in grads[a.0].data.iter_mut().zip(&g.data) {
                        *d += v;
                    }
                    for (d, v) in grads[b.0].data.iter_mut().zip(&g.data) {
                        *d += v;
                    }
                }
                Op::AddRow(a, row) => {
                    for (d, v) in grads[a.0].data.iter_mut().zip(&g.data) {
                        *d += v;
                    }
                    for i in 0..g.rows {
                        for j in 0..g.cols {
                            grads[row.0].data[j] += g.at(i, j);
                        }
                    }
                }
                Op::Scale(a, s) => {
                    for (d, v) in grads[a.0].data.iter_mut().zip(&g.data) {
                        *d += s * v;
                    }
                }
                Op::Tanh(a) => {
                    for ((d, v), y) in grads[a.0].data.iter_mut().zip(&g.data).zip(&node.value.data) {
                        *d += v * (1.0 - y * y);
                    }
                }
                Op::CausalSoftmax(a) => {
                    let y = &node.value;
                    for i in 0..y.rows {
                        let dot: f64 = (0..=i).map(|j| g.at(i, j) * y.at(i, j)).sum();
                        for j in 0..=i {
                            *grads[a.0].at_mut(i, j) += y.at(i, j) * (g.at(i, j) - dot);
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    for i in 0..y.rows {
                        let gsum: f64 = (0..y.cols).map(|j| g.at(i, j)).sum();
                        for j in 0..y.cols {
                            *grads[a.0].at_mut(i, j) += g.at(i, j) - y.at(i, j).exp() * gsum;
                        }
                    }
                }
                Op::SliceCols(a, start) => {
                    for i in 0..g.rows {
                        for j in 0..g.cols {
                            *grads[a.0].at_mut(i, start + j) += g.at(i, j);
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let cols = self.nodes[p.0].value.cols;
                        for i in 0..g.rows {
                            for j in 0..cols {
                                *grads[p.0].at_mut(i, j) += g.at(i, off + j);
                            }
                        }
                        off += cols;
                    }
                }
                Op::PickSum(a, picks) => {
                    let s = g.data[0];
                    for &(r, c) in picks {
                        *grads[a.0].at_mut(r, c) += s;
                    }
                }
            }
            grads[idx] = g;
        }
        grads
    }

    /// Adds `coeff *` the parameter adjoints into `out`.
    pub fn accumulate_param_grads(&self, grads: &[Mat], coeff: f64, out: &mut ParameterSet) {
        for (node, g) in self.nodes.iter().zip(grads) {
            if let Op::Param(index) = node.op {
                let dst = out.tensor_mut(index).data_mut();
                for (d, v) in dst.iter_mut().zip(&g.data) {
                    *d += coeff * v;
                }
            }
        }
    }
}
