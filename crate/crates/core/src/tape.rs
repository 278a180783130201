//! Reverse-mode autodiff on a flat tape of matrix ops.
//!
//! Every network forward (encoder, decoder, bridge, vocoder) is expressed as
//! ops on a [`Tape`]; `backward` walks the tape once and accumulates gradients
//! into named parameter slots. Inference reuses the same forward ops and just
//! never calls `backward`.

use std::collections::HashMap;

use crate::matrix::Matrix;
use crate::scalar::Scalar;

pub type NodeId = usize;

/// How a 1-D convolution pads the time axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvPad {
    /// Left padding only; output at t depends on inputs <= t.
    Causal,
    /// Symmetric zero padding; output length equals input length.
    Same,
}

#[derive(Clone, Debug)]
enum Op<F> {
    Leaf,
    /// Leaf tied to a named parameter; gradients are reported under this name.
    Param(String),
    Add(NodeId, NodeId),
    /// `a [T x C] + row [1 x C]` broadcast over rows.
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, F),
    AddConst(NodeId, F),
    MatMul(NodeId, NodeId),
    /// `a * b^T`
    MatMulNT(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softsign(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Abs(NodeId),
    /// max(x, floor); gradient is zero where the floor is active.
    ClampMin(NodeId, F),
    SoftmaxRows(NodeId),
    /// Split columns in half: x1 * sigmoid(x2).
    Glu(NodeId),
    /// Split columns in half: tanh(x1) * sigmoid(x2).
    GauGate(NodeId),
    Conv1d {
        x: NodeId,
        w: NodeId,
        dilation: usize,
        pad: ConvPad,
    },
    /// Stride-s transposed conv with kernel 2s; input is end-replicated by one
    /// frame and the raw output cropped to exactly `in_rows * stride`.
    ConvTranspose1d {
        x: NodeId,
        w: NodeId,
        stride: usize,
    },
    GatherRows {
        table: NodeId,
        indices: Vec<usize>,
    },
    RepeatRows(NodeId, usize),
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    SumAll(NodeId),
}

struct Node<F> {
    op: Op<F>,
    value: Matrix<F>,
}

pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op<F>, value: Matrix<F>) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Matrix<F> {
        &self.nodes[id].value
    }

    pub fn scalar_value(&self, id: NodeId) -> F {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "node is not a scalar");
        v.data[0]
    }

    pub fn constant(&mut self, value: Matrix<F>) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn param(&mut self, name: &str, value: Matrix<F>) -> NodeId {
        self.push(Op::Param(name.to_string()), value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert!(self.value(a).same_shape(self.value(b)), "add shape mismatch");
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(Op::Add(a, b), v)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let rv = self.value(row);
        assert_eq!(rv.rows, 1);
        assert_eq!(rv.cols, self.value(a).cols, "add_row width mismatch");
        let row_data = rv.data.clone();
        let av = self.value(a);
        let mut v = av.clone();
        for r in 0..v.rows {
            for (x, &b) in v.row_mut(r).iter_mut().zip(row_data.iter()) {
                *x = *x + b;
            }
        }
        self.push(Op::AddRow(a, row), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert!(self.value(a).same_shape(self.value(b)), "sub shape mismatch");
        let bv = self.value(b).data.clone();
        let mut v = self.value(a).clone();
        for (x, b) in v.data.iter_mut().zip(bv) {
            *x = *x - b;
        }
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert!(self.value(a).same_shape(self.value(b)), "mul shape mismatch");
        let bv = self.value(b).data.clone();
        let mut v = self.value(a).clone();
        for (x, b) in v.data.iter_mut().zip(bv) {
            *x = *x * b;
        }
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: NodeId, s: F) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        self.push(Op::Scale(a, s), v)
    }

    pub fn add_const(&mut self, a: NodeId, c: F) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::AddConst(a, c), v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_nt(self.value(b));
        self.push(Op::MatMulNT(a, b), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.tanh());
        self.push(Op::Tanh(a), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let one = F::one();
        let v = self.value(a).map(|x| one / (one + (-x).exp()));
        self.push(Op::Sigmoid(a), v)
    }

    pub fn softsign(&mut self, a: NodeId) -> NodeId {
        let one = F::one();
        let v = self.value(a).map(|x| x / (one + x.abs()));
        self.push(Op::Softsign(a), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| if x > F::zero() { x } else { F::zero() });
        self.push(Op::Relu(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.exp());
        self.push(Op::Exp(a), v)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.ln());
        self.push(Op::Ln(a), v)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.abs());
        self.push(Op::Abs(a), v)
    }

    pub fn clamp_min(&mut self, a: NodeId, floor: F) -> NodeId {
        let v = self.value(a).map(|x| if x < floor { floor } else { x });
        self.push(Op::ClampMin(a, floor), v)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let mut v = av.clone();
        for r in 0..v.rows {
            let row = v.row_mut(r);
            let mx = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                sum = sum + *x;
            }
            for x in row.iter_mut() {
                *x = *x / sum;
            }
        }
        self.push(Op::SoftmaxRows(a), v)
    }

    pub fn glu(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        assert_eq!(av.cols % 2, 0, "glu needs even channel count");
        let half = av.cols / 2;
        let one = F::one();
        let mut v = Matrix::zeros(av.rows, half);
        for r in 0..av.rows {
            let src = av.row(r);
            for c in 0..half {
                let g = one / (one + (-src[half + c]).exp());
                *v.at_mut(r, c) = src[c] * g;
            }
        }
        self.push(Op::Glu(a), v)
    }

    pub fn gau_gate(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        assert_eq!(av.cols % 2, 0, "gau gate needs even channel count");
        let half = av.cols / 2;
        let one = F::one();
        let mut v = Matrix::zeros(av.rows, half);
        for r in 0..av.rows {
            let src = av.row(r);
            for c in 0..half {
                let g = one / (one + (-src[half + c]).exp());
                *v.at_mut(r, c) = src[c].tanh() * g;
            }
        }
        self.push(Op::GauGate(a), v)
    }

    /// `x [T x Cin]` convolved with `w [(K*Cin) x Cout]` along the time axis.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, dilation: usize, pad: ConvPad) -> NodeId {
        let v = conv1d_forward(self.value(x), self.value(w), dilation, pad);
        self.push(Op::Conv1d { x, w, dilation, pad }, v)
    }

    pub fn conv_transpose1d(&mut self, x: NodeId, w: NodeId, stride: usize) -> NodeId {
        let v = conv_transpose_forward(self.value(x), self.value(w), stride);
        self.push(Op::ConvTranspose1d { x, w, stride }, v)
    }

    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> NodeId {
        let tv = self.value(table);
        let mut v = Matrix::zeros(indices.len(), tv.cols);
        for (i, &idx) in indices.iter().enumerate() {
            assert!(idx < tv.rows, "gather index out of range");
            v.row_mut(i).copy_from_slice(tv.row(idx));
        }
        self.push(
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            v,
        )
    }

    pub fn repeat_rows(&mut self, a: NodeId, times: usize) -> NodeId {
        let av = self.value(a);
        let mut v = Matrix::zeros(av.rows * times, av.cols);
        for r in 0..av.rows {
            for t in 0..times {
                v.row_mut(r * times + t).copy_from_slice(av.row(r));
            }
        }
        self.push(Op::RepeatRows(a, times), v)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = self.value(x);
        assert!(start + len <= xv.cols);
        let mut v = Matrix::zeros(xv.rows, len);
        for r in 0..xv.rows {
            v.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        self.push(Op::SliceCols { x, start, len }, v)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: F = self.value(a).data.iter().cloned().sum();
        self.push(Op::SumAll(a), Matrix::from_vec(1, 1, vec![s]))
    }

    // --- composite helpers ---

    /// `x * w + b` with `b` a `[1 x Cout]` row.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let m = self.matmul(x, w);
        self.add_row(m, b)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, F::one() / F::from_usize(n))
    }

    /// Sum of elements divided by an externally supplied count (masked means).
    pub fn sum_div(&mut self, a: NodeId, count: usize) -> NodeId {
        assert!(count > 0, "sum_div by zero count");
        let s = self.sum_all(a);
        self.scale(s, F::one() / F::from_usize(count))
    }

    /// Runs reverse-mode accumulation from a scalar `loss` node and returns
    /// gradients for every named parameter reachable from it.
    pub fn backward(&self, loss: NodeId) -> Gradients<F> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Matrix<F>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Matrix::from_vec(1, 1, vec![F::one()]));

        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(id, &g, &mut grads);
            // park the grad back in case the node itself is a Param
            grads[id] = Some(g);
        }

        let mut by_name: HashMap<String, Matrix<F>> = HashMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                if let Some(g) = &grads[id] {
                    by_name
                        .entry(name.clone())
                        .and_modify(|acc| acc.add_assign(g))
                        .or_insert_with(|| g.clone());
                }
            }
        }
        Gradients { by_name }
    }

    fn backprop_node(&self, id: NodeId, g: &Matrix<F>, grads: &mut [Option<Matrix<F>>]) {
        let acc = |grads: &mut [Option<Matrix<F>>], target: NodeId, delta: Matrix<F>| {
            match &mut grads[target] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[id].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                acc(grads, *a, g.clone());
                let mut rg = Matrix::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (o, &x) in rg.data.iter_mut().zip(g.row(r).iter()) {
                        *o = *o + x;
                    }
                }
                acc(grads, *row, rg);
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let mut ga = g.clone();
                for (x, &b) in ga.data.iter_mut().zip(bv.data.iter()) {
                    *x = *x * b;
                }
                let mut gb = g.clone();
                for (x, &a) in gb.data.iter_mut().zip(av.data.iter()) {
                    *x = *x * a;
                }
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::Scale(a, s) => {
                acc(grads, *a, g.map(|x| x * *s));
            }
            Op::AddConst(a, _) => {
                acc(grads, *a, g.clone());
            }
            Op::MatMul(a, b) => {
                // y = a*b: da = g*b^T, db = a^T*g
                let da = g.matmul_nt(self.value(*b));
                let db = self.value(*a).matmul_tn(g);
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::MatMulNT(a, b) => {
                // y = a*b^T: da = g*b, db = g^T*a
                let da = g.matmul(self.value(*b));
                let db = g.matmul_tn(self.value(*a));
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[id].value;
                let mut ga = g.clone();
                for (x, &t) in ga.data.iter_mut().zip(y.data.iter()) {
                    *x = *x * (F::one() - t * t);
                }
                acc(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[id].value;
                let mut ga = g.clone();
                for (x, &s) in ga.data.iter_mut().zip(y.data.iter()) {
                    *x = *x * s * (F::one() - s);
                }
                acc(grads, *a, ga);
            }
            Op::Softsign(a) => {
                // d/dx [x/(1+|x|)] = 1/(1+|x|)^2
                let xv = self.value(*a);
                let mut ga = g.clone();
                for (x, &xin) in ga.data.iter_mut().zip(xv.data.iter()) {
                    let d = F::one() + xin.abs();
                    *x = *x / (d * d);
                }
                acc(grads, *a, ga);
            }
            Op::Relu(a) => {
                let xv = self.value(*a);
                let mut ga = g.clone();
                for (x, &xin) in ga.data.iter_mut().zip(xv.data.iter()) {
                    if xin <= F::zero() {
                        *x = F::zero();
                    }
                }
                acc(grads, *a, ga);
            }
            Op::Exp(a) => {
                let y = &self.nodes[id].value;
                let mut ga = g.clone();
                for (x, &e) in ga.data.iter_mut().zip(y.data.iter()) {
                    *x = *x * e;
                }
                acc(grads, *a, ga);
            }
            Op::Ln(a) => {
                let xv = self.value(*a);
                let mut ga = g.clone();
                for (x, &xin) in ga.data.iter_mut().zip(xv.data.iter()) {
                    *x = *x / xin;
                }
                acc(grads, *a, ga);
            }
            Op::Abs(a) => {
                let xv = self.value(*a);
                let mut ga = g.clone();
                for (x, &xin) in ga.data.iter_mut().zip(xv.data.iter()) {
                    if xin < F::zero() {
                        *x = -*x;
                    } else if xin == F::zero() {
                        *x = F::zero();
                    }
                }
                acc(grads, *a, ga);
            }
            Op::ClampMin(a, floor) => {
                let xv = self.value(*a);
                let mut ga = g.clone();
                for (x, &xin) in ga.data.iter_mut().zip(xv.data.iter()) {
                    if xin < *floor {
                        *x = F::zero();
                    }
                }
                acc(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[id].value;
                let mut ga = Matrix::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: F = yr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
                    for c in 0..g.cols {
                        *ga.at_mut(r, c) = yr[c] * (gr[c] - dot);
                    }
                }
                acc(grads, *a, ga);
            }
            Op::Glu(a) => {
                let xv = self.value(*a);
                let half = xv.cols / 2;
                let one = F::one();
                let mut ga = Matrix::zeros(xv.rows, xv.cols);
                for r in 0..xv.rows {
                    let src = xv.row(r);
                    let gr = g.row(r);
                    for c in 0..half {
                        let s = one / (one + (-src[half + c]).exp());
                        *ga.at_mut(r, c) = gr[c] * s;
                        *ga.at_mut(r, half + c) = gr[c] * src[c] * s * (one - s);
                    }
                }
                acc(grads, *a, ga);
            }
            Op::GauGate(a) => {
                let xv = self.value(*a);
                let half = xv.cols / 2;
                let one = F::one();
                let mut ga = Matrix::zeros(xv.rows, xv.cols);
                for r in 0..xv.rows {
                    let src = xv.row(r);
                    let gr = g.row(r);
                    for c in 0..half {
                        let t = src[c].tanh();
                        let s = one / (one + (-src[half + c]).exp());
                        *ga.at_mut(r, c) = gr[c] * s * (one - t * t);
                        *ga.at_mut(r, half + c) = gr[c] * t * s * (one - s);
                    }
                }
                acc(grads, *a, ga);
            }
            Op::Conv1d { x, w, dilation, pad } => {
                let (dx, dw) = conv1d_backward(self.value(*x), self.value(*w), *dilation, *pad, g);
                acc(grads, *x, dx);
                acc(grads, *w, dw);
            }
            Op::ConvTranspose1d { x, w, stride } => {
                let (dx, dw) = conv_transpose_backward(self.value(*x), self.value(*w), *stride, g);
                acc(grads, *x, dx);
                acc(grads, *w, dw);
            }
            Op::GatherRows { table, indices } => {
                let tv = self.value(*table);
                let mut dt = Matrix::zeros(tv.rows, tv.cols);
                for (i, &idx) in indices.iter().enumerate() {
                    for (o, &x) in dt.row_mut(idx).iter_mut().zip(g.row(i).iter()) {
                        *o = *o + x;
                    }
                }
                acc(grads, *table, dt);
            }
            Op::RepeatRows(a, times) => {
                let av = self.value(*a);
                let mut ga = Matrix::zeros(av.rows, av.cols);
                for r in 0..av.rows {
                    for t in 0..*times {
                        let src = g.row(r * times + t);
                        for (o, &x) in ga.row_mut(r).iter_mut().zip(src.iter()) {
                            *o = *o + x;
                        }
                    }
                }
                acc(grads, *a, ga);
            }
            Op::SliceCols { x, start, len } => {
                let xv = self.value(*x);
                let mut gx = Matrix::zeros(xv.rows, xv.cols);
                for r in 0..xv.rows {
                    gx.row_mut(r)[*start..*start + *len].copy_from_slice(g.row(r));
                }
                acc(grads, *x, gx);
            }
            Op::SumAll(a) => {
                let av = self.value(*a);
                let s = g.data[0];
                acc(grads, *a, Matrix::from_fn(av.rows, av.cols, |_, _| s));
            }
        }
    }
}

pub struct Gradients<F> {
    by_name: HashMap<String, Matrix<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, name: &str) -> Option<&Matrix<F>> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix<F>)> {
        self.by_name.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Matrix<F>)> {
        self.by_name.iter_mut()
    }

    pub fn into_map(self) -> HashMap<String, Matrix<F>> {
        self.by_name
    }

    pub fn from_map(by_name: HashMap<String, Matrix<F>>) -> Self {
        Gradients { by_name }
    }
}

fn conv_anchor(kernel: usize, pad: ConvPad) -> usize {
    match pad {
        ConvPad::Causal => kernel - 1,
        ConvPad::Same => (kernel - 1) / 2,
    }
}

fn conv1d_forward<F: Scalar>(
    x: &Matrix<F>,
    w: &Matrix<F>,
    dilation: usize,
    pad: ConvPad,
) -> Matrix<F> {
    let cin = x.cols;
    assert_eq!(w.rows % cin, 0, "conv weight rows must be K*Cin");
    let kernel = w.rows / cin;
    let anchor = conv_anchor(kernel, pad) as isize;
    let cout = w.cols;
    let mut out = Matrix::zeros(x.rows, cout);
    for t in 0..x.rows as isize {
        for k in 0..kernel as isize {
            let ti = t + (k - anchor) * dilation as isize;
            if ti < 0 || ti >= x.rows as isize {
                continue;
            }
            let xrow = x.row(ti as usize);
            let orow = out.row_mut(t as usize);
            for (ci, &xv) in xrow.iter().enumerate() {
                if xv == F::zero() {
                    continue;
                }
                let wrow = w.row(k as usize * cin + ci);
                for (o, &wv) in orow.iter_mut().zip(wrow.iter()) {
                    *o = *o + xv * wv;
                }
            }
        }
    }
    out
}

fn conv1d_backward<F: Scalar>(
    x: &Matrix<F>,
    w: &Matrix<F>,
    dilation: usize,
    pad: ConvPad,
    g: &Matrix<F>,
) -> (Matrix<F>, Matrix<F>) {
    let cin = x.cols;
    let kernel = w.rows / cin;
    let anchor = conv_anchor(kernel, pad) as isize;
    let mut dx = Matrix::zeros(x.rows, x.cols);
    let mut dw = Matrix::zeros(w.rows, w.cols);
    for t in 0..x.rows as isize {
        let grow = g.row(t as usize);
        for k in 0..kernel as isize {
            let ti = t + (k - anchor) * dilation as isize;
            if ti < 0 || ti >= x.rows as isize {
                continue;
            }
            let xrow = x.row(ti as usize);
            for ci in 0..cin {
                let wrow = w.row(k as usize * cin + ci);
                let mut acc = F::zero();
                for (&gv, &wv) in grow.iter().zip(wrow.iter()) {
                    acc = acc + gv * wv;
                }
                *dx.at_mut(ti as usize, ci) = dx.at(ti as usize, ci) + acc;
                let xv = xrow[ci];
                if xv != F::zero() {
                    let dwrow = dw.row_mut(k as usize * cin + ci);
                    for (o, &gv) in dwrow.iter_mut().zip(grow.iter()) {
                        *o = *o + xv * gv;
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Contributing padded-input rows for raw output position `p`: t = p/s and
/// p/s - 1 (kernel 2s guarantees exactly these two after cropping).
fn conv_transpose_forward<F: Scalar>(x: &Matrix<F>, w: &Matrix<F>, stride: usize) -> Matrix<F> {
    let cin = x.cols;
    let kernel = 2 * stride;
    assert_eq!(w.rows, kernel * cin, "transposed conv weight rows must be 2s*Cin");
    assert!(x.rows > 0);
    let cout = w.cols;
    let out_rows = x.rows * stride;
    let mut out = Matrix::zeros(out_rows, cout);
    let padded_row = |t: usize| -> &[F] {
        if t < x.rows {
            x.row(t)
        } else {
            x.row(x.rows - 1)
        }
    };
    for o in 0..out_rows {
        let p = o + stride; // raw (uncropped) position
        let t_hi = p / stride;
        for &t in &[t_hi - 1, t_hi] {
            let k = p - t * stride;
            if k >= kernel {
                continue;
            }
            let xrow = padded_row(t);
            let orow = out.row_mut(o);
            for (ci, &xv) in xrow.iter().enumerate() {
                if xv == F::zero() {
                    continue;
                }
                let wrow = w.row(k * cin + ci);
                for (ov, &wv) in orow.iter_mut().zip(wrow.iter()) {
                    *ov = *ov + xv * wv;
                }
            }
        }
    }
    out
}

fn conv_transpose_backward<F: Scalar>(
    x: &Matrix<F>,
    w: &Matrix<F>,
    stride: usize,
    g: &Matrix<F>,
) -> (Matrix<F>, Matrix<F>) {
    let cin = x.cols;
    let kernel = 2 * stride;
    let mut dx = Matrix::zeros(x.rows, x.cols);
    let mut dw = Matrix::zeros(w.rows, w.cols);
    for o in 0..g.rows {
        let p = o + stride;
        let t_hi = p / stride;
        let grow = g.row(o);
        for &t in &[t_hi - 1, t_hi] {
            let k = p - t * stride;
            if k >= kernel {
                continue;
            }
            // replicated end frame folds its gradient into the last real row
            let src_t = t.min(x.rows - 1);
            let xrow = x.row(src_t);
            for ci in 0..cin {
                let wrow = w.row(k * cin + ci);
                let mut acc = F::zero();
                for (&gv, &wv) in grow.iter().zip(wrow.iter()) {
                    acc = acc + gv * wv;
                }
                *dx.at_mut(src_t, ci) = dx.at(src_t, ci) + acc;
                let xv = xrow[ci];
                if xv != F::zero() {
                    let dwrow = dw.row_mut(k * cin + ci);
                    for (ov, &gv) in dwrow.iter_mut().zip(grow.iter()) {
                        *ov = *ov + xv * gv;
                    }
                }
            }
        }
    }
    (dx, dw)
}
