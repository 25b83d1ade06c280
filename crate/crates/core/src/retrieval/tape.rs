//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! Every value is a 2-D array; scalars are `1 x 1`. Parameters are read by
//! reference from the slice the tape was created with and their gradients
//! come back in the same layout from [`Tape::backward`].

use ndarray::{s, Array2, Axis};

pub(crate) type Var = usize;

enum Op {
    Param(usize),
    Gather { param: usize, rows: Vec<usize> },
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// Adds a `1 x m` row to every row of `a`.
    AddRow(Var, Var),
    Scale(Var, f64),
    Affine { input: Var, mul: f64 },
    Tanh(Var),
    Relu(Var),
    /// Row-wise softmax; masked-out entries get probability zero.
    Softmax(Var),
    /// `out[i, j] = input[i, index[i * m + j]]`
    Pick { input: Var, index: Vec<usize> },
    SliceCols { input: Var, start: usize },
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    MaxRows { input: Var, argmax: Vec<usize> },
    /// L2 normalization of a `1 x m` row.
    Normalize(Var),
    /// Inner product of two `1 x m` rows.
    Dot(Var, Var),
    /// Binary cross-entropy on a `1 x 1` logit.
    Bce { logit: Var, target: f64 },
}

pub(crate) struct Tape<'p> {
    params: &'p [Array2<f64>],
    ops: Vec<Op>,
    values: Vec<Option<Array2<f64>>>,
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

impl<'p> Tape<'p> {
    pub(crate) fn new(params: &'p [Array2<f64>]) -> Self {
        Self {
            params,
            ops: Vec::with_capacity(256),
            values: Vec::with_capacity(256),
        }
    }

    pub(crate) fn value(&self, v: Var) -> &Array2<f64> {
        match (&self.ops[v], &self.values[v]) {
            (Op::Param(p), _) => &self.params[*p],
            (_, Some(x)) => x,
            _ => unreachable!("non-parameter nodes always hold a value"),
        }
    }

    pub(crate) fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> Var {
        self.ops.push(op);
        self.values.push(Some(value));
        self.ops.len() - 1
    }

    pub(crate) fn param(&mut self, index: usize) -> Var {
        self.ops.push(Op::Param(index));
        self.values.push(None);
        self.ops.len() - 1
    }

    pub(crate) fn gather(&mut self, param: usize, rows: &[usize]) -> Var {
        let table = &self.params[param];
        let value = table.select(Axis(0), rows);
        self.push(Op::Gather { param, rows: rows.to_vec() }, value)
    }

    pub(crate) fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(Op::MatMul(a, b), value)
    }

    pub(crate) fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(Op::MatMulT(a, b), value)
    }

    pub(crate) fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), value)
    }

    pub(crate) fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        self.push(Op::AddRow(a, row), value)
    }

    pub(crate) fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(Op::Scale(a, c), value)
    }

    pub(crate) fn affine(&mut self, input: Var, mul: f64, add: f64) -> Var {
        let value = self.value(input).mapv(|x| mul * x + add);
        self.push(Op::Affine { input, mul }, value)
    }

    pub(crate) fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(Op::Tanh(a), value)
    }

    pub(crate) fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(Op::Relu(a), value)
    }

    pub(crate) fn softmax(&mut self, input: Var, mask: Option<&[bool]>) -> Var {
        let x = self.value(input);
        let cols = x.ncols();
        let mut value = Array2::zeros(x.raw_dim());
        for (i, (row, mut out)) in x.outer_iter().zip(value.outer_iter_mut()).enumerate() {
            let keep = |j: usize| mask.is_none_or(|m| m[i * cols + j]);
            let max = (0..cols).filter(|&j| keep(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in (0..cols).filter(|&j| keep(j)) {
                out[j] = (row[j] - max).exp();
                total += out[j];
            }
            out.mapv_inplace(|v| v / total);
        }
        self.push(Op::Softmax(input), value)
    }

    pub(crate) fn pick(&mut self, input: Var, index: &[usize], cols: usize) -> Var {
        let x = self.value(input);
        let rows = x.nrows();
        let value = Array2::from_shape_fn((rows, cols), |(i, j)| x[[i, index[i * cols + j]]]);
        self.push(Op::Pick { input, index: index.to_vec() }, value)
    }

    pub(crate) fn slice_cols(&mut self, input: Var, start: usize, len: usize) -> Var {
        let value = self.value(input).slice(s![.., start..start + len]).to_owned();
        self.push(Op::SliceCols { input, start }, value)
    }

    pub(crate) fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(Op::ConcatCols(parts.to_vec()), value)
    }

    pub(crate) fn mean_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        self.push(Op::MeanRows(a), value)
    }

    pub(crate) fn max_rows(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let mut argmax = vec![0usize; x.ncols()];
        let mut value = Array2::zeros((1, x.ncols()));
        for (j, col) in x.axis_iter(Axis(1)).enumerate() {
            let (best, v) = col
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            argmax[j] = best;
            value[[0, j]] = v;
        }
        self.push(Op::MaxRows { input, argmax }, value)
    }

    pub(crate) fn normalize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let value = x / norm;
        self.push(Op::Normalize(a), value)
    }

    pub(crate) fn dot(&mut self, a: Var, b: Var) -> Var {
        let d = (self.value(a) * self.value(b)).sum();
        self.push(Op::Dot(a, b), Array2::from_elem((1, 1), d))
    }

    pub(crate) fn bce(&mut self, logit: Var, target: f64) -> Var {
        let z = self.scalar(logit);
        let loss = softplus(z) - target * z;
        self.push(Op::Bce { logit, target }, Array2::from_elem((1, 1), loss))
    }

    /// Gradients of the scalar `output` with respect to every parameter.
    pub(crate) fn backward(&self, output: Var) -> Vec<Array2<f64>> {
        let mut param_grads: Vec<Array2<f64>> = self.params.iter().map(|p| Array2::zeros(p.raw_dim())).collect();
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.ops.len()).map(|_| None).collect();
        grads[output] = Some(Array2::ones((1, 1)));

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v] {
                Some(x) => *x += &g,
                slot => *slot = Some(g),
            }
        }

        for v in (0..=output).rev() {
            let Some(g) = grads[v].take() else { continue };
            match &self.ops[v] {
                Op::Param(p) => param_grads[*p] += &g,
                Op::Gather { param, rows } => {
                    for (r, &row) in rows.iter().enumerate() {
                        let mut dst = param_grads[*param].row_mut(row);
                        dst += &g.row(r);
                    }
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::Affine { input, mul } => acc(&mut grads, *input, g * *mul),
                Op::Tanh(a) => {
                    let y = self.value(v);
                    let ga = &g * &y.mapv(|t| 1.0 - t * t);
                    acc(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let mut ga = g;
                    ga.zip_mut_with(x, |d, &xi| {
                        if xi <= 0.0 {
                            *d = 0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Softmax(input) => {
                    let y = self.value(v);
                    let mut ga = Array2::zeros(y.raw_dim());
                    for ((yr, gr), mut out) in y.outer_iter().zip(g.outer_iter()).zip(ga.outer_iter_mut()) {
                        let inner = yr.dot(&gr);
                        for j in 0..yr.len() {
                            out[j] = yr[j] * (gr[j] - inner);
                        }
                    }
                    acc(&mut grads, *input, ga);
                }
                Op::Pick { input, index } => {
                    let cols = g.ncols();
                    let mut ga = Array2::zeros(self.value(*input).raw_dim());
                    for ((i, j), &d) in g.indexed_iter() {
                        ga[[i, index[i * cols + j]]] += d;
                    }
                    acc(&mut grads, *input, ga);
                }
                Op::SliceCols { input, start } => {
                    let mut ga = Array2::zeros(self.value(*input).raw_dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *input, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(&mut grads, p, g.slice(s![.., offset..offset + w]).to_owned());
                        offset += w;
                    }
                }
                Op::MeanRows(a) => {
                    let n = self.value(*a).nrows();
                    let ga = g.broadcast((n, g.ncols())).expect("row broadcast").to_owned() / n as f64;
                    acc(&mut grads, *a, ga);
                }
                Op::MaxRows { input, argmax } => {
                    let mut ga = Array2::zeros(self.value(*input).raw_dim());
                    for (j, &i) in argmax.iter().enumerate() {
                        ga[[i, j]] += g[[0, j]];
                    }
                    acc(&mut grads, *input, ga);
                }
                Op::Normalize(a) => {
                    let x = self.value(*a);
                    let y = self.value(v);
                    let norm = x.iter().map(|t| t * t).sum::<f64>().sqrt().max(1e-12);
                    let inner = (y * &g).sum();
                    let ga = (&g - &(y * inner)) / norm;
                    acc(&mut grads, *a, ga);
                }
                Op::Dot(a, b) => {
                    let d = g[[0, 0]];
                    let ga = self.value(*b) * d;
                    let gb = self.value(*a) * d;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Bce { logit, target } => {
                    let z = self.scalar(*logit);
                    let d = (sigmoid(z) - target) * g[[0, 0]];
                    acc(&mut grads, *logit, Array2::from_elem((1, 1), d));
                }
            }
        }
        param_grads
    }
}
