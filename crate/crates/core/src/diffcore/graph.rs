use crate::scalar::{canonical_sum, Scalar};

use super::tensor::{sigmoid_value, Tensor};
use super::DiffError;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<F: Scalar> {
    Leaf,
    Matmul(Var, Var),
    /// Matmul whose reduction axis enumerates support positions. Products are
    /// accumulated in canonical order so the result is bitwise independent of
    /// how the supports were ordered.
    Attend(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    /// Broadcast-add a `[1, n]` row to every row of the first input.
    AddRow(Var, Var),
    SoftmaxRows(Var),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    /// Per-column mean over rows, `[r, c] -> [1, c]`, canonical accumulation.
    ColMean(Var),
    /// Scale row `r` of the first input by element `r` of a `[rows, 1]` vector.
    ScaleRows(Var, Var),
    /// Mean over half-open row ranges of the input.
    PoolRows(Var, Vec<(usize, usize)>),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    /// Cosine similarity along channels between rows of `a` `[ra, c]` and
    /// rows of `b` `[rb, c]`, producing `[rb, ra]`. Zero-norm rows yield 0.
    PairwiseCosine(Var, Var),
    /// Euclidean distance along channels, same layout as `PairwiseCosine`.
    PairwiseL2(Var, Var),
    /// Elementwise binary cross entropy against constant labels, on logits.
    BceLogits(Var, Tensor<F>),
    SmoothL1(Var),
    /// Zero-padded strided unfold of rows into `[out, k * c]` frames.
    UnfoldRows {
        x: Var,
        k: usize,
        stride: usize,
        pad: usize,
    },
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
}

/// Append-only tape of tensor operations. Values are computed eagerly, the
/// ops are replayed in reverse to accumulate gradients.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of the root with respect to `var`. `None` when the root does
    /// not depend on it.
    pub fn wrt(&self, var: Var) -> Option<&Tensor<F>> {
        self.grads[var.0].as_ref()
    }
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<F> {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::Matmul(a, b)))
    }

    pub fn attend(&mut self, att: Var, values: Var) -> Result<Var, DiffError> {
        let (m, k) = self.value(att).dims2()?;
        let (k2, n) = self.value(values).dims2()?;
        if k != k2 {
            return Err(DiffError::shape(
                "attend",
                format!("[{m}, {k}] x [{k2}, {n}]"),
            ));
        }
        let a = self.value(att);
        let v = self.value(values);
        let mut data = vec![F::zero(); m * n];
        let mut buf = Vec::with_capacity(k);
        for i in 0..m {
            for j in 0..n {
                buf.clear();
                for b in 0..k {
                    buf.push(a.at(i, b) * v.at(b, j));
                }
                data[i * n + j] = canonical_sum(&mut buf);
            }
        }
        let value = Tensor::new(&[m, n], data)?;
        Ok(self.push(value, Op::Attend(att, values)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, DiffError> {
        let value = self.value(x).transpose()?;
        Ok(self.push(value, Op::Transpose(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let value = self.value(a).zip(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let value = self.value(a).zip(self.value(b), |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let value = self.value(a).zip(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, k: F) -> Var {
        let value = self.value(x).map(|v| v * k);
        self.push(value, Op::Scale(x, k))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, DiffError> {
        let (r, c) = self.value(x).dims2()?;
        let (br, bc) = self.value(row).dims2()?;
        if br != 1 || bc != c {
            return Err(DiffError::shape(
                "add_row",
                format!("[{r}, {c}] + [{br}, {bc}]"),
            ));
        }
        let xv = self.value(x);
        let rv = self.value(row);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(xv.at(i, j) + rv.at(0, j));
            }
        }
        let value = Tensor::new(&[r, c], data)?;
        Ok(self.push(value, Op::AddRow(x, row)))
    }

    /// `linear(x, w, b) = x w + b` with `x` `[n, in]`, `w` `[in, out]`,
    /// `b` `[1, out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var, DiffError> {
        let xw = self.matmul(x, weight)?;
        self.add_row(xw, bias)
    }

    /// Row-wise softmax with a max-subtraction guard. The denominator is
    /// accumulated in canonical order.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, DiffError> {
        let (r, c) = self.value(x).dims2()?;
        if c == 0 {
            return Err(DiffError::shape("softmax_rows", "zero columns"));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(r * c);
        let mut buf = Vec::with_capacity(c);
        for i in 0..r {
            let row = xv.row(i);
            let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
            buf.clear();
            buf.extend(row.iter().map(|&v| (v - max).exp()));
            let exps = buf.clone();
            let denom = canonical_sum(&mut buf);
            data.extend(exps.iter().map(|&e| e / denom));
        }
        let value = Tensor::new(&[r, c], data)?;
        Ok(self.push(value, Op::SoftmaxRows(x)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(F::zero()));
        self.push(value, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid_value);
        self.push(value, Op::Sigmoid(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let mut acc = F::zero();
        for &v in self.value(x).data() {
            acc += v;
        }
        self.push(Tensor::scalar(acc), Op::Sum(x))
    }

    pub fn col_mean(&mut self, x: Var) -> Result<Var, DiffError> {
        let (r, c) = self.value(x).dims2()?;
        if r == 0 {
            return Err(DiffError::shape("col_mean", "zero rows"));
        }
        let xv = self.value(x);
        let inv = F::one() / F::from_usize(r);
        let mut data = Vec::with_capacity(c);
        let mut buf = Vec::with_capacity(r);
        for j in 0..c {
            buf.clear();
            for i in 0..r {
                buf.push(xv.at(i, j));
            }
            data.push(canonical_sum(&mut buf) * inv);
        }
        let value = Tensor::new(&[1, c], data)?;
        Ok(self.push(value, Op::ColMean(x)))
    }

    pub fn scale_rows(&mut self, x: Var, v: Var) -> Result<Var, DiffError> {
        let (r, c) = self.value(x).dims2()?;
        let (vr, vc) = self.value(v).dims2()?;
        if vr != r || vc != 1 {
            return Err(DiffError::shape(
                "scale_rows",
                format!("[{r}, {c}] rows scaled by [{vr}, {vc}]"),
            ));
        }
        let xv = self.value(x);
        let vv = self.value(v);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let s = vv.at(i, 0);
            data.extend(xv.row(i).iter().map(|&e| e * s));
        }
        let value = Tensor::new(&[r, c], data)?;
        Ok(self.push(value, Op::ScaleRows(x, v)))
    }

    /// Mean-pool half-open row ranges: output row `i` is the mean of input
    /// rows `ranges[i].0 .. ranges[i].1`. An empty range pools to a zero row
    /// (and passes no gradient), so callers can encode "nothing there".
    pub fn pool_rows(&mut self, x: Var, ranges: &[(usize, usize)]) -> Result<Var, DiffError> {
        let (r, c) = self.value(x).dims2()?;
        for &(lo, hi) in ranges {
            if lo > hi || hi > r {
                return Err(DiffError::shape(
                    "pool_rows",
                    format!("range {lo}..{hi} out of {r} rows"),
                ));
            }
        }
        let xv = self.value(x);
        let mut data = vec![F::zero(); ranges.len() * c];
        for (i, &(lo, hi)) in ranges.iter().enumerate() {
            if lo == hi {
                continue;
            }
            let inv = F::one() / F::from_usize(hi - lo);
            let orow = &mut data[i * c..(i + 1) * c];
            for row in lo..hi {
                for (o, &v) in orow.iter_mut().zip(xv.row(row)) {
                    *o += v;
                }
            }
            for o in orow.iter_mut() {
                *o *= inv;
            }
        }
        let value = Tensor::new(&[ranges.len(), c], data)?;
        Ok(self.push(value, Op::PoolRows(x, ranges.to_vec())))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, DiffError> {
        let (r, c) = self.value(x).dims2()?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(DiffError::shape(
                "gather_rows",
                format!("index {bad} out of {r} rows"),
            ));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(xv.row(i));
        }
        let value = Tensor::new(&[idx.len(), c], data)?;
        Ok(self.push(value, Op::GatherRows(x, idx.to_vec())))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var, DiffError> {
        if xs.is_empty() {
            return Err(DiffError::shape("concat_rows", "no inputs"));
        }
        let c = self.value(xs[0]).dims2()?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let (r, xc) = self.value(x).dims2()?;
            if xc != c {
                return Err(DiffError::shape(
                    "concat_rows",
                    format!("column counts differ: {c} vs {xc}"),
                ));
            }
            rows += r;
            data.extend_from_slice(self.value(x).data());
        }
        let value = Tensor::new(&[rows, c], data)?;
        Ok(self.push(value, Op::ConcatRows(xs.to_vec())))
    }

    /// Concatenate along channels: inputs share a row count, output row `i`
    /// is the inputs' rows `i` laid side by side.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var, DiffError> {
        if xs.is_empty() {
            return Err(DiffError::shape("concat_cols", "no inputs"));
        }
        let r = self.value(xs[0]).dims2()?.0;
        let mut cols = 0;
        for &x in xs {
            let (xr, xc) = self.value(x).dims2()?;
            if xr != r {
                return Err(DiffError::shape(
                    "concat_cols",
                    format!("row counts differ: {r} vs {xr}"),
                ));
            }
            cols += xc;
        }
        let mut data = Vec::with_capacity(r * cols);
        for i in 0..r {
            for &x in xs {
                data.extend_from_slice(self.value(x).row(i));
            }
        }
        let value = Tensor::new(&[r, cols], data)?;
        Ok(self.push(value, Op::ConcatCols(xs.to_vec())))
    }

    /// Returns the similarity matrix and the number of zero-norm pairs that
    /// were defined to similarity 0.
    pub fn pairwise_cosine(&mut self, a: Var, b: Var) -> Result<(Var, usize), DiffError> {
        let (ra, c) = self.value(a).dims2()?;
        let (rb, cb) = self.value(b).dims2()?;
        if c != cb {
            return Err(DiffError::shape(
                "pairwise_cosine",
                format!("channel counts differ: {c} vs {cb}"),
            ));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let na: Vec<F> = (0..ra).map(|i| row_norm(av.row(i))).collect();
        let nb: Vec<F> = (0..rb).map(|i| row_norm(bv.row(i))).collect();
        let mut flagged = 0;
        let mut data = Vec::with_capacity(ra * rb);
        for s in 0..rb {
            for r in 0..ra {
                if na[r] == F::zero() || nb[s] == F::zero() {
                    flagged += 1;
                    data.push(F::zero());
                } else {
                    data.push(dot(av.row(r), bv.row(s)) / (na[r] * nb[s]));
                }
            }
        }
        let value = Tensor::new(&[rb, ra], data)?;
        Ok((self.push(value, Op::PairwiseCosine(a, b)), flagged))
    }

    pub fn pairwise_l2(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ra, c) = self.value(a).dims2()?;
        let (rb, cb) = self.value(b).dims2()?;
        if c != cb {
            return Err(DiffError::shape(
                "pairwise_l2",
                format!("channel counts differ: {c} vs {cb}"),
            ));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut data = Vec::with_capacity(ra * rb);
        for s in 0..rb {
            for r in 0..ra {
                let mut acc = F::zero();
                for (&x, &y) in av.row(r).iter().zip(bv.row(s)) {
                    let d = x - y;
                    acc += d * d;
                }
                data.push(acc.sqrt());
            }
        }
        let value = Tensor::new(&[rb, ra], data)?;
        Ok(self.push(value, Op::PairwiseL2(a, b)))
    }

    /// Elementwise binary cross entropy between `sigmoid(logits)` and constant
    /// labels, evaluated in log space for stability.
    pub fn bce_logits(&mut self, logits: Var, labels: &Tensor<F>) -> Result<Var, DiffError> {
        if self.value(logits).shape() != labels.shape() {
            return Err(DiffError::shape(
                "bce_logits",
                format!(
                    "{:?} vs labels {:?}",
                    self.value(logits).shape(),
                    labels.shape()
                ),
            ));
        }
        let value = self.value(logits).zip(labels, |z, y| {
            z.max(F::zero()) - z * y + (F::one() + (-z.abs()).exp()).ln()
        })?;
        Ok(self.push(value, Op::BceLogits(logits, labels.clone())))
    }

    /// Elementwise smooth-L1: `0.5 x^2` inside the unit interval, `|x| - 0.5`
    /// outside.
    pub fn smooth_l1(&mut self, x: Var) -> Var {
        let half = F::from_f64(0.5);
        let value = self.value(x).map(|v| {
            if v.abs() < F::one() {
                half * v * v
            } else {
                v.abs() - half
            }
        });
        self.push(value, Op::SmoothL1(x))
    }

    pub fn unfold_rows(
        &mut self,
        x: Var,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Var, DiffError> {
        let (n, c) = self.value(x).dims2()?;
        if k == 0 || stride == 0 {
            return Err(DiffError::shape("unfold_rows", "zero kernel or stride"));
        }
        if n + 2 * pad < k {
            return Err(DiffError::shape(
                "unfold_rows",
                format!("{n} rows with pad {pad} shorter than kernel {k}"),
            ));
        }
        let out = (n + 2 * pad - k) / stride + 1;
        let xv = self.value(x);
        let mut data = vec![F::zero(); out * k * c];
        for i in 0..out {
            for j in 0..k {
                let src = (i * stride + j) as isize - pad as isize;
                if src < 0 || src >= n as isize {
                    continue;
                }
                let dst = i * k * c + j * c;
                data[dst..dst + c].copy_from_slice(xv.row(src as usize));
            }
        }
        let value = Tensor::new(&[out, k * c], data)?;
        Ok(self.push(value, Op::UnfoldRows { x, k, stride, pad }))
    }

    /// Reverse-mode sweep from a single-valued root. Returns a gradient per
    /// node; leaves the graph intact so values can still be read.
    pub fn backward(&self, root: Var) -> Result<Gradients<F>, DiffError> {
        if self.value(root).len() != 1 {
            return Err(DiffError::NonScalarRoot(self.value(root).shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), F::one()));

        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.accumulate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(
        &self,
        id: usize,
        g: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) -> Result<(), DiffError> {
        let add_to = |grads: &mut [Option<Tensor<F>>], var: Var, delta: Tensor<F>| {
            match &mut grads[var.0] {
                Some(t) => {
                    for (a, &b) in t.data_mut().iter_mut().zip(delta.data()) {
                        *a += b;
                    }
                }
                slot => *slot = Some(delta),
            }
        };

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul(a, b) | Op::Attend(a, b) => {
                let bt = self.value(*b).transpose()?;
                add_to(grads, *a, g.matmul(&bt)?);
                let at = self.value(*a).transpose()?;
                add_to(grads, *b, at.matmul(g)?);
            }
            Op::Transpose(x) => {
                add_to(grads, *x, g.transpose()?);
            }
            Op::Add(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                add_to(grads, *a, g.zip(self.value(*b), |gv, bv| gv * bv)?);
                add_to(grads, *b, g.zip(self.value(*a), |gv, av| gv * av)?);
            }
            Op::Scale(x, k) => {
                let k = *k;
                add_to(grads, *x, g.map(|v| v * k));
            }
            Op::AddRow(x, row) => {
                add_to(grads, *x, g.clone());
                let (r, c) = g.dims2()?;
                let mut acc = vec![F::zero(); c];
                for i in 0..r {
                    for (a, &v) in acc.iter_mut().zip(g.row(i)) {
                        *a += v;
                    }
                }
                add_to(grads, *row, Tensor::new(&[1, c], acc)?);
            }
            Op::SoftmaxRows(x) => {
                let s = &self.nodes[id].value;
                let (r, c) = s.dims2()?;
                let mut data = Vec::with_capacity(r * c);
                for i in 0..r {
                    let dot = g
                        .row(i)
                        .iter()
                        .zip(s.row(i))
                        .fold(F::zero(), |acc, (&gv, &sv)| acc + gv * sv);
                    data.extend(
                        g.row(i)
                            .iter()
                            .zip(s.row(i))
                            .map(|(&gv, &sv)| sv * (gv - dot)),
                    );
                }
                add_to(grads, *x, Tensor::new(&[r, c], data)?);
            }
            Op::Relu(x) => {
                add_to(
                    grads,
                    *x,
                    g.zip(self.value(*x), |gv, xv| {
                        if xv > F::zero() {
                            gv
                        } else {
                            F::zero()
                        }
                    })?,
                );
            }
            Op::Sigmoid(x) => {
                let out = &self.nodes[id].value;
                add_to(
                    grads,
                    *x,
                    g.zip(out, |gv, ov| gv * ov * (F::one() - ov))?,
                );
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                add_to(grads, *x, Tensor::full(self.value(*x).shape(), gv));
            }
            Op::ColMean(x) => {
                let (r, c) = self.value(*x).dims2()?;
                let inv = F::one() / F::from_usize(r);
                let mut data = Vec::with_capacity(r * c);
                for _ in 0..r {
                    data.extend(g.row(0).iter().map(|&v| v * inv));
                }
                add_to(grads, *x, Tensor::new(&[r, c], data)?);
            }
            Op::ScaleRows(x, v) => {
                let xv = self.value(*x);
                let vv = self.value(*v);
                let (r, c) = xv.dims2()?;
                let mut dx = Vec::with_capacity(r * c);
                let mut dv = Vec::with_capacity(r);
                for i in 0..r {
                    let s = vv.at(i, 0);
                    dx.extend(g.row(i).iter().map(|&gv| gv * s));
                    dv.push(
                        g.row(i)
                            .iter()
                            .zip(xv.row(i))
                            .fold(F::zero(), |acc, (&gv, &ev)| acc + gv * ev),
                    );
                }
                add_to(grads, *x, Tensor::new(&[r, c], dx)?);
                add_to(grads, *v, Tensor::column(dv));
            }
            Op::PoolRows(x, ranges) => {
                let (r, c) = self.value(*x).dims2()?;
                let mut dx = vec![F::zero(); r * c];
                for (i, &(lo, hi)) in ranges.iter().enumerate() {
                    if lo == hi {
                        continue;
                    }
                    let inv = F::one() / F::from_usize(hi - lo);
                    for row in lo..hi {
                        let dst = &mut dx[row * c..(row + 1) * c];
                        for (d, &gv) in dst.iter_mut().zip(g.row(i)) {
                            *d += gv * inv;
                        }
                    }
                }
                add_to(grads, *x, Tensor::new(&[r, c], dx)?);
            }
            Op::GatherRows(x, idx) => {
                let (r, c) = self.value(*x).dims2()?;
                let mut dx = vec![F::zero(); r * c];
                for (i, &src) in idx.iter().enumerate() {
                    let dst = &mut dx[src * c..(src + 1) * c];
                    for (d, &gv) in dst.iter_mut().zip(g.row(i)) {
                        *d += gv;
                    }
                }
                add_to(grads, *x, Tensor::new(&[r, c], dx)?);
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let (r, c) = self.value(x).dims2()?;
                    let mut part = Vec::with_capacity(r * c);
                    for i in 0..r {
                        part.extend_from_slice(g.row(offset + i));
                    }
                    offset += r;
                    add_to(grads, x, Tensor::new(&[r, c], part)?);
                }
            }
            Op::ConcatCols(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let (r, c) = self.value(x).dims2()?;
                    let mut part = Vec::with_capacity(r * c);
                    for i in 0..r {
                        part.extend_from_slice(&g.row(i)[offset..offset + c]);
                    }
                    offset += c;
                    add_to(grads, x, Tensor::new(&[r, c], part)?);
                }
            }
            Op::PairwiseCosine(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let out = &self.nodes[id].value;
                let (ra, c) = av.dims2()?;
                let (rb, _) = bv.dims2()?;
                let na: Vec<F> = (0..ra).map(|i| row_norm(av.row(i))).collect();
                let nb: Vec<F> = (0..rb).map(|i| row_norm(bv.row(i))).collect();
                let mut da = vec![F::zero(); ra * c];
                let mut db = vec![F::zero(); rb * c];
                for s in 0..rb {
                    for r in 0..ra {
                        if na[r] == F::zero() || nb[s] == F::zero() {
                            continue;
                        }
                        let gv = g.at(s, r);
                        if gv == F::zero() {
                            continue;
                        }
                        let cos = out.at(s, r);
                        let arow = av.row(r);
                        let brow = bv.row(s);
                        let inv_ab = F::one() / (na[r] * nb[s]);
                        let inv_aa = cos / (na[r] * na[r]);
                        let inv_bb = cos / (nb[s] * nb[s]);
                        let dar = &mut da[r * c..(r + 1) * c];
                        for (j, d) in dar.iter_mut().enumerate() {
                            *d += gv * (brow[j] * inv_ab - arow[j] * inv_aa);
                        }
                        let dbs = &mut db[s * c..(s + 1) * c];
                        for (j, d) in dbs.iter_mut().enumerate() {
                            *d += gv * (arow[j] * inv_ab - brow[j] * inv_bb);
                        }
                    }
                }
                add_to(grads, *a, Tensor::new(&[ra, c], da)?);
                add_to(grads, *b, Tensor::new(&[rb, c], db)?);
            }
            Op::PairwiseL2(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let out = &self.nodes[id].value;
                let (ra, c) = av.dims2()?;
                let (rb, _) = bv.dims2()?;
                let mut da = vec![F::zero(); ra * c];
                let mut db = vec![F::zero(); rb * c];
                for s in 0..rb {
                    for r in 0..ra {
                        let dist = out.at(s, r);
                        if dist == F::zero() {
                            continue;
                        }
                        let gv = g.at(s, r);
                        if gv == F::zero() {
                            continue;
                        }
                        let scale = gv / dist;
                        let arow = av.row(r);
                        let brow = bv.row(s);
                        let dar = &mut da[r * c..(r + 1) * c];
                        let dbs = &mut db[s * c..(s + 1) * c];
                        for j in 0..c {
                            let d = (arow[j] - brow[j]) * scale;
                            dar[j] += d;
                            dbs[j] -= d;
                        }
                    }
                }
                add_to(grads, *a, Tensor::new(&[ra, c], da)?);
                add_to(grads, *b, Tensor::new(&[rb, c], db)?);
            }
            Op::BceLogits(z, labels) => {
                let zv = self.value(*z);
                let mut data = Vec::with_capacity(zv.len());
                for ((&gv, &l), &y) in g.data().iter().zip(zv.data()).zip(labels.data()) {
                    data.push(gv * (sigmoid_value(l) - y));
                }
                add_to(grads, *z, Tensor::new(zv.shape(), data)?);
            }
            Op::SmoothL1(x) => {
                add_to(
                    grads,
                    *x,
                    g.zip(self.value(*x), |gv, xv| {
                        gv * xv.max(-F::one()).min(F::one())
                    })?,
                );
            }
            Op::UnfoldRows { x, k, stride, pad } => {
                let (n, c) = self.value(*x).dims2()?;
                let out = g.rows();
                let mut dx = vec![F::zero(); n * c];
                for i in 0..out {
                    for j in 0..*k {
                        let src = (i * stride + j) as isize - *pad as isize;
                        if src < 0 || src >= n as isize {
                            continue;
                        }
                        let dst = &mut dx[src as usize * c..(src as usize + 1) * c];
                        let grow = &g.row(i)[j * c..(j + 1) * c];
                        for (d, &gv) in dst.iter_mut().zip(grow) {
                            *d += gv;
                        }
                    }
                }
                add_to(grads, *x, Tensor::new(&[n, c], dx)?);
            }
        }
        Ok(())
    }
}

fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

fn row_norm<F: Scalar>(row: &[F]) -> F {
    dot(row, row).sqrt()
}
