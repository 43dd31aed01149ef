//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] records a define-by-run graph of f64 tensor ops; [`Tape::backward`]
//! walks it once in reverse and accumulates gradients. The op set is exactly
//! what the model and losses need: dense linear algebra, convolution, layer
//! norm, row softmax, and elementwise kernels. Everything runs in f64 so
//! analytic gradients can be validated against central finite differences to
//! tight tolerances.

use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, Ix3};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that made it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    MulScalar(Var, f64),
    AddScalar(Var),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Pow(Var, f64),
    ClampMin(Var, f64),
    SoftmaxRows(Var),
    /// Caches the row softmax for the backward pass.
    LogSumExpRows(Var, Array2<f64>),
    Sum(Var),
    Mean(Var),
    RowMeans(Var),
    MeanAxis0(Var),
    AddRowVec(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        cols: Array2<f64>,
        in_shape: (usize, usize, usize),
    },
    LayerNormRows {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Array2<f64>,
        inv_std: Array1<f64>,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Grads {
    slots: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.slots.get(v.0).and_then(|s| s.as_ref())
    }

    /// Gradient of `v`, or zeros of the given shape when `v` is off-path.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> ArrayD<f64> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(shape),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn as2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("expected rank-2 tensor")
}

/// Forces C-contiguous layout so reshapes stay valid.
fn standard(a: ArrayD<f64>) -> ArrayD<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn as1(a: &ArrayD<f64>) -> ndarray::ArrayView1<'_, f64> {
    a.view().into_dimensionality::<Ix1>().expect("expected rank-1 tensor")
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

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar payload of a 1-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1, "scalar() on non-scalar node");
        val.iter().next().copied().unwrap()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn leaf2(&mut self, value: Array2<f64>) -> Var {
        self.leaf(value.into_dyn())
    }

    pub fn leaf1(&mut self, value: Array1<f64>) -> Var {
        self.leaf(value.into_dyn())
    }

    pub fn scalar_leaf(&mut self, value: f64) -> Var {
        self.leaf(ArrayD::from_elem(vec![1], value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = &self.nodes[a.0].value / &self.nodes[b.0].value;
        self.push(v, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(v, Op::MulScalar(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = as2(self.value(a)).dot(&as2(self.value(b)));
        self.push(v.into_dyn(), Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = standard(as2(self.value(a)).t().to_owned().into_dyn());
        self.push(v, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = standard(self.value(a).to_owned())
            .into_shape_with_order(shape.to_vec())
            .expect("reshape: incompatible element count");
        self.push(v, Op::Reshape(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| as2(self.value(*p))).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        self.push(v.into_dyn(), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| as2(self.value(*p))).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        self.push(v.into_dyn(), Op::ConcatCols(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let src = as2(self.value(a));
        let mut out = Array2::zeros((idx.len(), src.ncols()));
        for (i, &r) in idx.iter().enumerate() {
            out.row_mut(i).assign(&src.row(r));
        }
        self.push(out.into_dyn(), Op::GatherRows(a, idx.to_vec()))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::ln);
        self.push(v, Op::Log(a))
    }

    /// Elementwise `a^e`. Gradient assumes a strictly positive base when `e`
    /// is fractional; callers clamp first.
    pub fn pow(&mut self, a: Var, e: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.powf(e));
        self.push(v, Op::Pow(a, e))
    }

    pub fn clamp_min(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(c));
        self.push(v, Op::ClampMin(a, c))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = as2(self.value(a));
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        self.push(out.into_dyn(), Op::SoftmaxRows(a))
    }

    /// Row-wise log-sum-exp, shape (R, 1).
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let x = as2(self.value(a));
        let rows = x.nrows();
        let mut out = Array2::zeros((rows, 1));
        let mut soft = x.to_owned();
        for (i, mut row) in soft.rows_mut().into_iter().enumerate() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            out[[i, 0]] = m + s.ln();
            row.mapv_inplace(|v| v / s);
        }
        self.push(out.into_dyn(), Op::LogSumExpRows(a, soft))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = ArrayD::from_elem(vec![1], self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let v = ArrayD::from_elem(vec![1], self.value(a).sum() / n);
        self.push(v, Op::Mean(a))
    }

    /// (R, C) -> (R, 1) row means.
    pub fn row_means(&mut self, a: Var) -> Var {
        let x = as2(self.value(a));
        let c = x.ncols() as f64;
        let v = x.sum_axis(Axis(1)).insert_axis(Axis(1)) / c;
        self.push(v.into_dyn(), Op::RowMeans(a))
    }

    /// (R, C) -> (1, C) column means.
    pub fn mean_axis0(&mut self, a: Var) -> Var {
        let x = as2(self.value(a));
        let r = x.nrows() as f64;
        let v = x.sum_axis(Axis(0)).insert_axis(Axis(0)) / r;
        self.push(v.into_dyn(), Op::MeanAxis0(a))
    }

    /// Adds a length-C vector to every row of an (R, C) matrix.
    pub fn add_row_vec(&mut self, a: Var, v: Var) -> Var {
        let x = as2(self.value(a));
        let b = as1(self.value(v));
        debug_assert_eq!(x.ncols(), b.len());
        let out = &x + &b;
        self.push(out.into_dyn(), Op::AddRowVec(a, v))
    }

    /// 2-D convolution over a single (Cin, H, W) image via im2col.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix3>().expect("conv2d: x rank 3");
        let wv = self.value(w).view();
        let wshape = wv.shape().to_vec();
        let (c_out, c_in, k) = (wshape[0], wshape[1], wshape[2]);
        debug_assert_eq!(wshape[2], wshape[3], "square kernels only");
        let (ci, h, wid) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        debug_assert_eq!(ci, c_in);
        let h_out = (h + 2 * pad - k) / stride + 1;
        let w_out = (wid + 2 * pad - k) / stride + 1;

        let mut cols = Array2::zeros((c_in * k * k, h_out * w_out));
        for c in 0..c_in {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    for oy in 0..h_out {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..w_out {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix < 0 || ix >= wid as isize {
                                continue;
                            }
                            cols[[row, oy * w_out + ox]] = xv[[c, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }

        let w_mat = wv
            .to_owned()
            .into_shape_with_order((c_out, c_in * k * k))
            .unwrap();
        let mut out = w_mat.dot(&cols);
        let bv = as1(self.value(b));
        for (mut row, &bias) in out.rows_mut().into_iter().zip(bv.iter()) {
            row.mapv_inplace(|v| v + bias);
        }
        let out = out.into_shape_with_order((c_out, h_out, w_out)).unwrap();
        self.push(
            out.into_dyn(),
            Op::Conv2d { x, w, b, stride, pad, cols, in_shape: (c_in, h, wid) },
        )
    }

    /// Row-wise layer norm with learned gain and bias (both length C).
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = as2(self.value(x));
        let g = as1(self.value(gain));
        let b = as1(self.value(bias));
        let rows = xv.nrows();
        let mut normed = xv.to_owned();
        let mut inv_std = Array1::zeros(rows);
        for (i, mut row) in normed.rows_mut().into_iter().enumerate() {
            let mu = row.mean().unwrap();
            let var = row.fold(0.0, |acc, &v| acc + (v - mu) * (v - mu)) / row.len() as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            inv_std[i] = inv;
            row.mapv_inplace(|v| (v - mu) * inv);
        }
        let out = &normed * &g + &b;
        self.push(
            out.into_dyn(),
            Op::LayerNormRows { x, gain, bias, normed, inv_std },
        )
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward() needs a scalar loss");
        let mut slots: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss.0] = Some(ArrayD::from_elem(self.value(loss).shape().to_vec(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(grad) = slots[i].take() else { continue };
            self.propagate(i, &grad, &mut slots);
            slots[i] = Some(grad);
        }
        Grads { slots }
    }

    fn propagate(&self, i: usize, grad: &ArrayD<f64>, slots: &mut [Option<ArrayD<f64>>]) {
        fn acc(slot: &mut Option<ArrayD<f64>>, g: ArrayD<f64>) {
            match slot {
                Some(existing) => *existing += &g,
                None => *slot = Some(g),
            }
        }

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(&mut slots[a.0], grad.clone());
                acc(&mut slots[b.0], grad.clone());
            }
            Op::Sub(a, b) => {
                acc(&mut slots[a.0], grad.clone());
                acc(&mut slots[b.0], grad.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(&mut slots[a.0], grad * &self.nodes[b.0].value);
                acc(&mut slots[b.0], grad * &self.nodes[a.0].value);
            }
            Op::Div(a, b) => {
                let bv = &self.nodes[b.0].value;
                acc(&mut slots[a.0], grad / bv);
                let av = &self.nodes[a.0].value;
                acc(&mut slots[b.0], -(grad * av) / (bv * bv));
            }
            Op::Neg(a) => acc(&mut slots[a.0], grad.mapv(|x| -x)),
            Op::MulScalar(a, c) => acc(&mut slots[a.0], grad.mapv(|x| x * c)),
            Op::AddScalar(a) => acc(&mut slots[a.0], grad.clone()),
            Op::Matmul(a, b) => {
                let g = as2(grad);
                let av = as2(&self.nodes[a.0].value);
                let bv = as2(&self.nodes[b.0].value);
                acc(&mut slots[a.0], g.dot(&bv.t()).into_dyn());
                acc(&mut slots[b.0], av.t().dot(&g).into_dyn());
            }
            Op::Transpose(a) => {
                acc(&mut slots[a.0], standard(as2(grad).t().to_owned().into_dyn()));
            }
            Op::Reshape(a) => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                acc(
                    &mut slots[a.0],
                    standard(grad.to_owned()).into_shape_with_order(shape).unwrap(),
                );
            }
            Op::ConcatRows(parts) => {
                let g = as2(grad);
                let mut off = 0;
                for p in parts {
                    let rows = as2(&self.nodes[p.0].value).nrows();
                    let piece = g.slice(ndarray::s![off..off + rows, ..]).to_owned();
                    acc(&mut slots[p.0], piece.into_dyn());
                    off += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let g = as2(grad);
                let mut off = 0;
                for p in parts {
                    let cols = as2(&self.nodes[p.0].value).ncols();
                    let piece = g.slice(ndarray::s![.., off..off + cols]).to_owned();
                    acc(&mut slots[p.0], piece.into_dyn());
                    off += cols;
                }
            }
            Op::GatherRows(a, idx) => {
                let g = as2(grad);
                let src_shape = as2(&self.nodes[a.0].value).raw_dim();
                let mut dx = Array2::zeros(src_shape);
                for (row, &r) in idx.iter().enumerate() {
                    let mut dst = dx.row_mut(r);
                    dst += &g.row(row);
                }
                acc(&mut slots[a.0], dx.into_dyn());
            }
            Op::Relu(a) => {
                let mask = self.nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                acc(&mut slots[a.0], grad * &mask);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                acc(&mut slots[a.0], grad * &(y * &y.mapv(|v| 1.0 - v)));
            }
            Op::Log(a) => {
                acc(&mut slots[a.0], grad / &self.nodes[a.0].value);
            }
            Op::Pow(a, e) => {
                if *e != 0.0 {
                    let d = self.nodes[a.0].value.mapv(|x| e * x.powf(e - 1.0));
                    acc(&mut slots[a.0], grad * &d);
                }
            }
            Op::ClampMin(a, c) => {
                let mask = self.nodes[a.0].value.mapv(|x| if x > *c { 1.0 } else { 0.0 });
                acc(&mut slots[a.0], grad * &mask);
            }
            Op::SoftmaxRows(a) => {
                let y = as2(&self.nodes[i].value);
                let g = as2(grad);
                let gy = &g * &y;
                let row_dot = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                let dx = &y * &(&g - &row_dot);
                acc(&mut slots[a.0], dx.into_dyn());
            }
            Op::LogSumExpRows(a, soft) => {
                let g = as2(grad);
                let dx = soft * &g;
                acc(&mut slots[a.0], dx.into_dyn());
            }
            Op::Sum(a) => {
                let g0 = grad.iter().next().copied().unwrap();
                let shape = self.nodes[a.0].value.shape().to_vec();
                acc(&mut slots[a.0], ArrayD::from_elem(shape, g0));
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len().max(1) as f64;
                let g0 = grad.iter().next().copied().unwrap() / n;
                let shape = self.nodes[a.0].value.shape().to_vec();
                acc(&mut slots[a.0], ArrayD::from_elem(shape, g0));
            }
            Op::RowMeans(a) => {
                let x = as2(&self.nodes[a.0].value);
                let c = x.ncols() as f64;
                let g = as2(grad);
                let mut dx = Array2::zeros(x.raw_dim());
                for (mut row, gr) in dx.rows_mut().into_iter().zip(g.rows()) {
                    row.fill(gr[0] / c);
                }
                acc(&mut slots[a.0], dx.into_dyn());
            }
            Op::MeanAxis0(a) => {
                let x = as2(&self.nodes[a.0].value);
                let r = x.nrows() as f64;
                let g = as2(grad);
                let mut dx = Array2::zeros(x.raw_dim());
                for mut row in dx.rows_mut() {
                    row.assign(&(&g.row(0) / r));
                }
                acc(&mut slots[a.0], dx.into_dyn());
            }
            Op::AddRowVec(a, v) => {
                acc(&mut slots[a.0], grad.clone());
                let g = as2(grad);
                acc(&mut slots[v.0], g.sum_axis(Axis(0)).into_dyn());
            }
            Op::Conv2d { x, w, b, stride, pad, cols, in_shape } => {
                let wshape = self.nodes[w.0].value.shape().to_vec();
                let (c_out, c_in, k) = (wshape[0], wshape[1], wshape[2]);
                let g3 = standard(grad.to_owned());
                let (h_out, w_out) = (g3.shape()[1], g3.shape()[2]);
                let g_mat = g3
                    .into_shape_with_order((c_out, h_out * w_out))
                    .unwrap()
                    .into_dimensionality::<Ix2>()
                    .unwrap();

                let dw = g_mat.dot(&cols.t());
                acc(
                    &mut slots[w.0],
                    dw.into_shape_with_order((c_out, c_in, k, k)).unwrap().into_dyn(),
                );
                acc(&mut slots[b.0], g_mat.sum_axis(Axis(1)).into_dyn());

                let w_mat = self.nodes[w.0]
                    .value
                    .to_owned()
                    .into_shape_with_order((c_out, c_in * k * k))
                    .unwrap();
                let dcols = w_mat.t().dot(&g_mat);
                let (ci, h, wid) = *in_shape;
                let mut dx = ndarray::Array3::<f64>::zeros((ci, h, wid));
                for c in 0..ci {
                    for ki in 0..k {
                        for kj in 0..k {
                            let row = (c * k + ki) * k + kj;
                            for oy in 0..h_out {
                                let iy = (oy * stride + ki) as isize - *pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for ox in 0..w_out {
                                    let ix = (ox * stride + kj) as isize - *pad as isize;
                                    if ix < 0 || ix >= wid as isize {
                                        continue;
                                    }
                                    dx[[c, iy as usize, ix as usize]] +=
                                        dcols[[row, oy * w_out + ox]];
                                }
                            }
                        }
                    }
                }
                acc(&mut slots[x.0], dx.into_dyn());
            }
            Op::LayerNormRows { x, gain, bias, normed, inv_std } => {
                let g = as2(grad);
                let gn = as1(&self.nodes[gain.0].value);
                acc(&mut slots[gain.0], (&g * normed).sum_axis(Axis(0)).into_dyn());
                acc(&mut slots[bias.0], g.sum_axis(Axis(0)).into_dyn());

                let dxhat = &g * &gn;
                let c = normed.ncols() as f64;
                let mean_dxhat = dxhat.sum_axis(Axis(1)).insert_axis(Axis(1)) / c;
                let mean_dxhat_xhat =
                    (&dxhat * normed).sum_axis(Axis(1)).insert_axis(Axis(1)) / c;
                let mut dx = &dxhat - &mean_dxhat - &(normed * &mean_dxhat_xhat);
                for (mut row, &inv) in dx.rows_mut().into_iter().zip(inv_std.iter()) {
                    row.mapv_inplace(|v| v * inv);
                }
                acc(&mut slots[x.0], dx.into_dyn());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, Array4};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Central-difference check of d(loss)/d(leaf) for a scalar-valued builder.
    fn check_grad<F>(shape: &[usize], build: F, seed: u64)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let base = rand_vec(n, &mut rng);

        let eval = |data: &[f64]| -> f64 {
            let mut t = Tape::new();
            let leaf = t.leaf(ArrayD::from_shape_vec(shape.to_vec(), data.to_vec()).unwrap());
            let loss = build(&mut t, leaf);
            t.scalar(loss)
        };

        let mut t = Tape::new();
        let leaf = t.leaf(ArrayD::from_shape_vec(shape.to_vec(), base.clone()).unwrap());
        let loss = build(&mut t, leaf);
        let grads = t.backward(loss);
        let analytic = grads.get_or_zeros(leaf, shape);

        let h = 1e-6;
        for i in 0..n {
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[i];
            let denom = a.abs().max(fd.abs()).max(1e-4);
            assert!(
                (a - fd).abs() / denom < 1e-4,
                "grad mismatch at {i}: analytic {a}, fd {fd}"
            );
        }
    }

    #[test]
    fn elementwise_ops_gradients() {
        check_grad(&[2, 3], |t, x| {
            let y = t.mul(x, x);
            let z = t.add(y, x);
            let w = t.mul_scalar(z, 0.7);
            let w = t.add_scalar(w, 0.3);
            t.sum(w)
        }, 1);
        check_grad(&[4], |t, x| {
            let s = t.sigmoid(x);
            let r = t.relu(x);
            let m = t.mul(s, r);
            t.mean(m)
        }, 2);
        check_grad(&[3], |t, x| {
            let c = t.clamp_min(x, 0.1);
            let l = t.log(c);
            let n = t.neg(l);
            t.sum(n)
        }, 3);
        check_grad(&[3], |t, x| {
            let s = t.sigmoid(x);
            let p = t.pow(s, 2.5);
            t.sum(p)
        }, 4);
        check_grad(&[2, 2], |t, x| {
            let s = t.sigmoid(x);
            let d = t.div(s, x);
            let d = t.mul(d, d);
            t.sum(d)
        }, 5);
        check_grad(&[2, 3], |t, x| {
            let a = t.sub(x, x);
            let b = t.add(a, x);
            t.mean(b)
        }, 6);
    }

    #[test]
    fn linear_algebra_gradients() {
        check_grad(&[3, 4], |t, x| {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let w = Array2::from_shape_vec((4, 2), rand_vec(8, &mut rng)).unwrap();
            let w = t.leaf2(w);
            let y = t.matmul(x, w);
            let y = t.sigmoid(y);
            t.sum(y)
        }, 7);
        check_grad(&[3, 4], |t, x| {
            let xt = t.transpose(x);
            let prod = t.matmul(xt, x);
            t.sum(prod)
        }, 8);
        check_grad(&[2, 6], |t, x| {
            let r = t.reshape(x, &[3, 4]);
            let s = t.softmax_rows(r);
            let l = t.log(s);
            t.sum(l)
        }, 9);
        check_grad(&[4, 3], |t, x| {
            let g = t.gather_rows(x, &[0, 2, 2, 1]);
            let s = t.sigmoid(g);
            t.sum(s)
        }, 10);
        check_grad(&[3, 2], |t, x| {
            let top = t.gather_rows(x, &[0]);
            let joined = t.concat_rows(&[x, top]);
            let sq = t.mul(joined, joined);
            t.sum(sq)
        }, 11);
        check_grad(&[3, 2], |t, x| {
            let joined = t.concat_cols(&[x, x]);
            let s = t.sigmoid(joined);
            t.sum(s)
        }, 12);
    }

    #[test]
    fn reduction_and_broadcast_gradients() {
        check_grad(&[3, 4], |t, x| {
            let rm = t.row_means(x);
            let sq = t.mul(rm, rm);
            t.sum(sq)
        }, 13);
        check_grad(&[3, 4], |t, x| {
            let cm = t.mean_axis0(x);
            let sq = t.mul(cm, cm);
            t.sum(sq)
        }, 14);
        check_grad(&[3, 4], |t, x| {
            let mut rng = ChaCha8Rng::seed_from_u64(55);
            let v = t.leaf1(Array1::from_vec(rand_vec(4, &mut rng)));
            let y = t.add_row_vec(x, v);
            let s = t.sigmoid(y);
            t.sum(s)
        }, 15);
        check_grad(&[2, 5], |t, x| {
            let lse = t.logsumexp_rows(x);
            t.sum(lse)
        }, 16);
    }

    #[test]
    fn layer_norm_gradients() {
        // wrt input
        check_grad(&[3, 6], |t, x| {
            let mut rng = ChaCha8Rng::seed_from_u64(31);
            let g = t.leaf1(Array1::from_vec(rand_vec(6, &mut rng)));
            let b = t.leaf1(Array1::from_vec(rand_vec(6, &mut rng)));
            let y = t.layer_norm_rows(x, g, b);
            let y = t.sigmoid(y);
            t.sum(y)
        }, 17);
        // wrt gain/bias
        check_grad(&[6], |t, gb| {
            let mut rng = ChaCha8Rng::seed_from_u64(32);
            let x = t.leaf2(Array2::from_shape_vec((3, 6), rand_vec(18, &mut rng)).unwrap());
            let b = t.leaf1(Array1::from_vec(rand_vec(6, &mut rng)));
            let y = t.layer_norm_rows(x, gb, b);
            let y = t.mul(y, y);
            t.sum(y)
        }, 18);
    }

    #[test]
    fn conv2d_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let w_data = rand_vec(2 * 3 * 3 * 3, &mut rng);
        let b_data = rand_vec(2, &mut rng);

        // wrt input, stride 2
        let w_data2 = w_data.clone();
        let b_data2 = b_data.clone();
        check_grad(&[3, 6, 6], move |t, x| {
            let w = t.leaf(
                Array4::from_shape_vec((2, 3, 3, 3), w_data2.clone()).unwrap().into_dyn(),
            );
            let b = t.leaf1(Array1::from_vec(b_data2.clone()));
            let y = t.conv2d(x, w, b, 2, 1);
            let y = t.sigmoid(y);
            t.sum(y)
        }, 19);

        // wrt weights, stride 1
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let x_data = rand_vec(3 * 5 * 5, &mut rng);
        check_grad(&[2, 3, 3, 3], move |t, w| {
            let x = t.leaf(Array3::from_shape_vec((3, 5, 5), x_data.clone()).unwrap().into_dyn());
            let b = t.leaf1(Array1::zeros(2));
            let y = t.conv2d(x, w, b, 1, 1);
            let y = t.mul(y, y);
            t.sum(y)
        }, 20);
    }

    #[test]
    fn conv2d_output_shape() {
        let mut t = Tape::new();
        let x = t.leaf(ArrayD::zeros(vec![3, 64, 64]));
        let w = t.leaf(ArrayD::zeros(vec![8, 3, 3, 3]));
        let b = t.leaf1(Array1::zeros(8));
        let y = t.conv2d(x, w, b, 2, 1);
        assert_eq!(t.value(y).shape(), &[8, 32, 32]);
    }

    #[test]
    fn backward_accumulates_through_shared_nodes() {
        let mut t = Tape::new();
        let x = t.scalar_leaf(3.0);
        let y = t.mul(x, x); // x^2
        let z = t.add(y, x); // x^2 + x
        let loss = t.sum(z);
        let g = t.backward(loss);
        let gx = g.get(x).unwrap().iter().next().copied().unwrap();
        assert!((gx - 7.0).abs() < 1e-12); // d/dx (x^2+x) = 2x+1 = 7
    }
}
