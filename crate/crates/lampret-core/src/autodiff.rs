//! Minimal reverse-mode automatic differentiation over dense `ndarray` arrays.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tape::backward`]
//! replays it in reverse and accumulates gradients for all recorded nodes.
//! Scalars are represented as 1x1 arrays. The op set is exactly what the
//! encoders, objective heads, and task losses need; everything is generic
//! over [`Scalar`] so the same graph code runs in f32 for training and f64
//! for finite-difference verification.

use std::cell::RefCell;
use std::fmt::{Debug, Display};

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Axis, Ix1, Ix2, Ix3, Ix4, ScalarOperand};
use num_traits::Float;



/// Element type of all tape values.
pub trait Scalar: Float + ScalarOperand + Debug + Display + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

impl Var {
    pub fn id(self) -> usize {
        self.id
    }
}

type BackwardFn<F> = Box<dyn Fn(&ArrayD<F>) -> Vec<(usize, ArrayD<F>)>>;

struct Node<F: Scalar> {
    value: ArrayD<F>,
    backward: Option<BackwardFn<F>>,
}

/// Gradients of a scalar loss w.r.t. every tape node.
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient for `v`, zeros if the node does not influence the loss.
    pub fn get(&self, v: Var, tape: &Tape<F>) -> ArrayD<F> {
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => ArrayD::zeros(tape.shape(v)),
        }
    }

    pub fn get_opt(&self, v: Var) -> Option<&ArrayD<F>> {
        self.grads[v.id].as_ref()
    }
}

/// Records a forward computation; single-threaded by construction.
pub struct Tape<F: Scalar> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<F>, backward: Option<BackwardFn<F>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, backward });
        Var {
            id: nodes.len() - 1,
        }
    }

    /// Insert an input node (parameter or constant data).
    pub fn input(&self, value: ArrayD<F>) -> Var {
        self.push(value, None)
    }

    pub fn input2(&self, value: Array2<F>) -> Var {
        self.input(value.into_dyn())
    }

    pub fn scalar(&self, x: F) -> Var {
        self.input(Array2::from_elem((1, 1), x).into_dyn())
    }

    pub fn value(&self, v: Var) -> ArrayD<F> {
        self.nodes.borrow()[v.id].value.clone()
    }

    pub fn value2(&self, v: Var) -> Array2<F> {
        self.value(v).into_dimensionality::<Ix2>().unwrap()
    }

    pub fn scalar_value(&self, v: Var) -> F {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "expected scalar node");
        *val.iter().next().unwrap()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.id].value.shape().to_vec()
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<ArrayD<F>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(ArrayD::ones(nodes[loss.id].value.raw_dim()));
        for id in (0..=loss.id).rev() {
            let g = match grads[id].as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            if let Some(bw) = &nodes[id].backward {
                for (pid, contrib) in bw(&g) {
                    match &mut grads[pid] {
                        Some(acc) => *acc = acc.clone() + contrib,
                        slot => *slot = Some(contrib),
                    }
                }
            }
        }
        Gradients { grads }
    }
}

fn as2<F: Scalar>(a: &ArrayD<F>) -> Array2<F> {
    a.clone().into_dimensionality::<Ix2>().unwrap()
}

// Elementwise and linear-algebra ops.
impl<F: Scalar> Tape<F> {
    pub fn add(&self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.shape(), vb.shape());
        let out = &va + &vb;
        self.push(
            out,
            Some(Box::new(move |g| {
                vec![(a.id, g.clone()), (b.id, g.clone())]
            })),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.push(
            out,
            Some(Box::new(move |g| {
                vec![(a.id, g.clone()), (b.id, g.mapv(|x| -x))]
            })),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let out = &va * &vb;
        self.push(
            out,
            Some(Box::new(move |g| {
                vec![(a.id, g * &vb), (b.id, g * &va)]
            })),
        )
    }

    /// Elementwise multiply by a fixed (non-differentiated) array.
    pub fn mul_const(&self, a: Var, c: ArrayD<F>) -> Var {
        let out = self.value(a) * &c;
        self.push(out, Some(Box::new(move |g| vec![(a.id, g * &c)])))
    }

    pub fn scale(&self, a: Var, s: F) -> Var {
        let out = self.value(a).mapv(|x| x * s);
        self.push(out, Some(Box::new(move |g| vec![(a.id, g.mapv(|x| x * s))])))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let va = as2(&self.value(a));
        let vb = as2(&self.value(b));
        let out = va.dot(&vb).into_dyn();
        self.push(
            out,
            Some(Box::new(move |g| {
                let g2 = as2(g);
                vec![
                    (a.id, g2.dot(&vb.t()).into_dyn()),
                    (b.id, va.t().dot(&g2).into_dyn()),
                ]
            })),
        )
    }

    pub fn transpose(&self, a: Var) -> Var {
        let out = as2(&self.value(a)).t().to_owned().into_dyn();
        self.push(
            out,
            Some(Box::new(move |g| {
                vec![(a.id, as2(g).t().to_owned().into_dyn())]
            })),
        )
    }

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Var {
        let old_shape = self.shape(a);
        let out = self
            .value(a)
            .into_shape_with_order(shape.clone())
            .expect("reshape: element count mismatch");
        self.push(
            out,
            Some(Box::new(move |g| {
                vec![(
                    a.id,
                    g.clone().into_shape_with_order(old_shape.clone()).unwrap(),
                )]
            })),
        )
    }

    /// Add a length-d bias row to every row of an LxD matrix.
    pub fn add_row_broadcast(&self, x: Var, bias: Var) -> Var {
        let vx = as2(&self.value(x));
        let vb = self
            .value(bias)
            .into_dimensionality::<Ix1>()
            .expect("bias must be 1-d");
        assert_eq!(vx.ncols(), vb.len());
        let out = (&vx + &vb).into_dyn();
        self.push(
            out,
            Some(Box::new(move |g| {
                let g2 = as2(g);
                vec![(x.id, g.clone()), (bias.id, g2.sum_axis(Axis(0)).into_dyn())]
            })),
        )
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Var {
        let vx = as2(&self.value(x));
        let (rows, cols) = (vx.nrows(), vx.ncols());
        let out = vx
            .slice(ndarray::s![.., start..start + len])
            .to_owned()
            .into_dyn();
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut gx = Array2::<F>::zeros((rows, cols));
                gx.slice_mut(ndarray::s![.., start..start + len])
                    .assign(&as2(g));
                vec![(x.id, gx.into_dyn())]
            })),
        )
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let values: Vec<Array2<F>> = parts.iter().map(|&p| as2(&self.value(p))).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).unwrap().into_dyn();
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let widths: Vec<usize> = values.iter().map(|v| v.ncols()).collect();
        self.push(
            out,
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let mut offset = 0;
                let mut contribs = Vec::with_capacity(ids.len());
                for (&id, &w) in ids.iter().zip(&widths) {
                    contribs.push((
                        id,
                        g2.slice(ndarray::s![.., offset..offset + w])
                            .to_owned()
                            .into_dyn(),
                    ));
                    offset += w;
                }
                contribs
            })),
        )
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let values: Vec<Array2<F>> = parts.iter().map(|&p| as2(&self.value(p))).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).unwrap().into_dyn();
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let heights: Vec<usize> = values.iter().map(|v| v.nrows()).collect();
        self.push(
            out,
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let mut offset = 0;
                let mut contribs = Vec::with_capacity(ids.len());
                for (&id, &h) in ids.iter().zip(&heights) {
                    contribs.push((
                        id,
                        g2.slice(ndarray::s![offset..offset + h, ..])
                            .to_owned()
                            .into_dyn(),
                    ));
                    offset += h;
                }
                contribs
            })),
        )
    }

    /// Row gather; used for embedding lookups and CLS extraction.
    pub fn gather_rows(&self, table: Var, indices: &[usize]) -> Var {
        let vt = as2(&self.value(table));
        let (rows, cols) = (vt.nrows(), vt.ncols());
        let mut out = Array2::<F>::zeros((indices.len(), cols));
        for (i, &idx) in indices.iter().enumerate() {
            assert!(idx < rows, "gather index {idx} out of bounds ({rows} rows)");
            out.row_mut(i).assign(&vt.row(idx));
        }
        let idx: Vec<usize> = indices.to_vec();
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let mut gt = Array2::<F>::zeros((rows, cols));
                for (i, &j) in idx.iter().enumerate() {
                    let mut row = gt.row_mut(j);
                    row.zip_mut_with(&g2.row(i), |a, &b| *a = *a + b);
                }
                vec![(table.id, gt.into_dyn())]
            })),
        )
    }

    /// Replace rows `indices[i]` of `base` with row i of `rows` (a KxD matrix).
    pub fn replace_rows(&self, base: Var, indices: &[usize], rows: Var) -> Var {
        let mut out = as2(&self.value(base));
        let vr = as2(&self.value(rows));
        assert_eq!(vr.nrows(), indices.len());
        for (i, &idx) in indices.iter().enumerate() {
            out.row_mut(idx).assign(&vr.row(i));
        }
        let idx: Vec<usize> = indices.to_vec();
        let k = vr.nrows();
        let d = vr.ncols();
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let mut gbase = g2.clone();
                let mut grows = Array2::<F>::zeros((k, d));
                for (i, &j) in idx.iter().enumerate() {
                    grows.row_mut(i).assign(&g2.row(j));
                    gbase.row_mut(j).fill(F::zero());
                }
                vec![(base.id, gbase.into_dyn()), (rows.id, grows.into_dyn())]
            })),
        )
    }

    pub fn sum_all(&self, x: Var) -> Var {
        let vx = self.value(x);
        let shape = vx.raw_dim();
        let s = vx.sum();
        self.push(
            Array2::from_elem((1, 1), s).into_dyn(),
            Some(Box::new(move |g| {
                let gv = *g.iter().next().unwrap();
                vec![(x.id, ArrayD::from_elem(shape.clone(), gv))]
            })),
        )
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let n = F::from_f64(self.value(x).len() as f64);
        let s = self.sum_all(x);
        self.scale(s, F::one() / n)
    }

    pub fn mean_rows(&self, x: Var) -> Var {
        let vx = as2(&self.value(x));
        let (rows, cols) = (vx.nrows(), vx.ncols());
        let inv = F::from_f64(1.0 / rows as f64);
        let out = vx.sum_axis(Axis(0)).mapv(|v| v * inv);
        self.push(
            out.insert_axis(Axis(0)).into_dyn(),
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let mut gx = Array2::<F>::zeros((rows, cols));
                for mut row in gx.rows_mut() {
                    row.assign(&g2.row(0));
                }
                vec![(x.id, gx.mapv(|v| v * inv).into_dyn())]
            })),
        )
    }

    pub fn relu(&self, x: Var) -> Var {
        let vx = self.value(x);
        let out = vx.mapv(|v| if v > F::zero() { v } else { F::zero() });
        self.push(
            out,
            Some(Box::new(move |g| {
                let mask = vx.mapv(|v| if v > F::zero() { F::one() } else { F::zero() });
                vec![(x.id, g * &mask)]
            })),
        )
    }

    /// Tanh-approximated GELU (the BERT formulation).
    pub fn gelu(&self, x: Var) -> Var {
        let vx = self.value(x);
        let c = F::from_f64(0.7978845608028654); // sqrt(2/pi)
        let a = F::from_f64(0.044715);
        let half = F::from_f64(0.5);
        let out = vx.mapv(|v| {
            let inner = c * (v + a * v * v * v);
            half * v * (F::one() + inner.tanh())
        });
        self.push(
            out,
            Some(Box::new(move |g| {
                let dv = vx.mapv(|v| {
                    let inner = c * (v + a * v * v * v);
                    let t = inner.tanh();
                    let sech2 = F::one() - t * t;
                    let dinner = c * (F::one() + F::from_f64(3.0) * a * v * v);
                    half * (F::one() + t) + half * v * sech2 * dinner
                });
                vec![(x.id, g * &dv)]
            })),
        )
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let vx = self.value(x);
        let out = vx.mapv(|v| F::one() / (F::one() + (-v).exp()));
        let saved = out.clone();
        self.push(
            out,
            Some(Box::new(move |g| {
                let dv = saved.mapv(|s| s * (F::one() - s));
                vec![(x.id, g * &dv)]
            })),
        )
    }

    /// Elementwise sqrt(x + eps); eps keeps the gradient finite at 0.
    pub fn sqrt_eps(&self, x: Var, eps: F) -> Var {
        let vx = self.value(x);
        let out = vx.mapv(|v| (v + eps).sqrt());
        let saved = out.clone();
        self.push(
            out,
            Some(Box::new(move |g| {
                let half = F::from_f64(0.5);
                let dv = saved.mapv(|s| half / s);
                vec![(x.id, g * &dv)]
            })),
        )
    }

    /// Row softmax over the columns marked valid; invalid columns get exactly
    /// zero probability and zero gradient.
    pub fn softmax_masked(&self, logits: Var, col_valid: &[bool]) -> Var {
        let vl = as2(&self.value(logits));
        assert_eq!(vl.ncols(), col_valid.len());
        let valid = col_valid.to_vec();
        let mut out = Array2::<F>::zeros(vl.raw_dim());
        for (r, row) in vl.rows().into_iter().enumerate() {
            let mut m = F::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if valid[j] && v > m {
                    m = v;
                }
            }
            let mut sum = F::zero();
            for j in 0..row.len() {
                if valid[j] {
                    let e = (row[j] - m).exp();
                    out[[r, j]] = e;
                    sum = sum + e;
                }
            }
            for j in 0..row.len() {
                if valid[j] {
                    out[[r, j]] = out[[r, j]] / sum;
                }
            }
        }
        let saved = out.clone();
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let mut gl = Array2::<F>::zeros(saved.raw_dim());
                for r in 0..saved.nrows() {
                    let mut dot = F::zero();
                    for j in 0..saved.ncols() {
                        dot = dot + g2[[r, j]] * saved[[r, j]];
                    }
                    for j in 0..saved.ncols() {
                        gl[[r, j]] = saved[[r, j]] * (g2[[r, j]] - dot);
                    }
                }
                vec![(logits.id, gl.into_dyn())]
            })),
        )
    }

    /// Per-row layer normalization with learnable gain/bias (1-d, length d).
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: F) -> Var {
        let vx = as2(&self.value(x));
        let vg = self.value(gamma).into_dimensionality::<Ix1>().unwrap();
        let vb = self.value(beta).into_dimensionality::<Ix1>().unwrap();
        let d = vx.ncols();
        assert_eq!(vg.len(), d);
        let mut xhat = Array2::<F>::zeros(vx.raw_dim());
        let mut inv_std = Array1::<F>::zeros(vx.nrows());
        let nd = F::from_f64(d as f64);
        for (r, row) in vx.rows().into_iter().enumerate() {
            let mu = row.sum() / nd;
            let var = row.fold(F::zero(), |acc, &v| acc + (v - mu) * (v - mu)) / nd;
            let istd = F::one() / (var + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..d {
                xhat[[r, j]] = (row[j] - mu) * istd;
            }
        }
        let out = (&xhat * &vg + &vb).into_dyn();
        self.push(
            out,
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let mut gx = Array2::<F>::zeros(xhat.raw_dim());
                let mut ggamma = Array1::<F>::zeros(d);
                let mut gbeta = Array1::<F>::zeros(d);
                for r in 0..xhat.nrows() {
                    let mut mean_dxhat = F::zero();
                    let mut mean_dxhat_xhat = F::zero();
                    for j in 0..d {
                        let dxhat = g2[[r, j]] * vg[j];
                        mean_dxhat = mean_dxhat + dxhat;
                        mean_dxhat_xhat = mean_dxhat_xhat + dxhat * xhat[[r, j]];
                        ggamma[j] = ggamma[j] + g2[[r, j]] * xhat[[r, j]];
                        gbeta[j] = gbeta[j] + g2[[r, j]];
                    }
                    mean_dxhat = mean_dxhat / nd;
                    mean_dxhat_xhat = mean_dxhat_xhat / nd;
                    for j in 0..d {
                        let dxhat = g2[[r, j]] * vg[j];
                        gx[[r, j]] =
                            inv_std[r] * (dxhat - mean_dxhat - xhat[[r, j]] * mean_dxhat_xhat);
                    }
                }
                vec![
                    (x.id, gx.into_dyn()),
                    (gamma.id, ggamma.into_dyn()),
                    (beta.id, gbeta.into_dyn()),
                ]
            })),
        )
    }

    /// Mean cross-entropy of NxC logits against class indices.
    pub fn cross_entropy_mean(&self, logits: Var, targets: &[usize]) -> Var {
        let vl = as2(&self.value(logits));
        let n = vl.nrows();
        assert_eq!(n, targets.len());
        assert!(n > 0, "cross_entropy_mean needs at least one example");
        let mut probs = Array2::<F>::zeros(vl.raw_dim());
        let mut loss = F::zero();
        for (r, row) in vl.rows().into_iter().enumerate() {
            let m = row.fold(F::neg_infinity(), |a, &b| if b > a { b } else { a });
            let mut sum = F::zero();
            for j in 0..row.len() {
                let e = (row[j] - m).exp();
                probs[[r, j]] = e;
                sum = sum + e;
            }
            for j in 0..row.len() {
                probs[[r, j]] = probs[[r, j]] / sum;
            }
            loss = loss - (probs[[r, targets[r]]]).ln();
        }
        let inv_n = F::from_f64(1.0 / n as f64);
        loss = loss * inv_n;
        let tgt: Vec<usize> = targets.to_vec();
        self.push(
            Array2::from_elem((1, 1), loss).into_dyn(),
            Some(Box::new(move |g| {
                let gv = *g.iter().next().unwrap();
                let mut gl = probs.clone();
                for (r, &t) in tgt.iter().enumerate() {
                    gl[[r, t]] = gl[[r, t]] - F::one();
                }
                vec![(logits.id, gl.mapv(|v| v * gv * inv_n).into_dyn())]
            })),
        )
    }

    /// 2-D convolution over an HxWxCin input with a KhxKwxCinxCout kernel.
    /// `same_pad` keeps spatial dims at stride 1; otherwise valid padding.
    pub fn conv2d(&self, input: Var, kernel: Var, bias: Var, stride: usize, same_pad: bool) -> Var {
        let vi = self.value(input).into_dimensionality::<Ix3>().unwrap();
        let vk = self.value(kernel).into_dimensionality::<Ix4>().unwrap();
        let vb = self.value(bias).into_dimensionality::<Ix1>().unwrap();
        let (h, w, cin) = vi.dim();
        let (kh, kw, kcin, cout) = vk.dim();
        assert_eq!(cin, kcin);
        assert_eq!(vb.len(), cout);
        let (ph, pw) = if same_pad {
            assert_eq!(stride, 1, "same padding only supported at stride 1");
            ((kh - 1) / 2, (kw - 1) / 2)
        } else {
            (0, 0)
        };
        let oh = (h + 2 * ph - kh) / stride + 1;
        let ow = (w + 2 * pw - kw) / stride + 1;
        let mut out = Array3::<F>::zeros((oh, ow, cout));
        for oy in 0..oh {
            for ox in 0..ow {
                for oc in 0..cout {
                    let mut acc = vb[oc];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - ph as isize;
                            let ix = (ox * stride + kx) as isize - pw as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ic in 0..cin {
                                acc = acc
                                    + vi[[iy as usize, ix as usize, ic]] * vk[[ky, kx, ic, oc]];
                            }
                        }
                    }
                    out[[oy, ox, oc]] = acc;
                }
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g| {
                let g3 = g.clone().into_dimensionality::<Ix3>().unwrap();
                let mut gi = Array3::<F>::zeros((h, w, cin));
                let mut gk = Array4::<F>::zeros((kh, kw, cin, cout));
                let mut gb = Array1::<F>::zeros(cout);
                for oy in 0..oh {
                    for ox in 0..ow {
                        for oc in 0..cout {
                            let go = g3[[oy, ox, oc]];
                            gb[oc] = gb[oc] + go;
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - ph as isize;
                                    let ix = (ox * stride + kx) as isize - pw as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let (iy, ix) = (iy as usize, ix as usize);
                                    for ic in 0..cin {
                                        gi[[iy, ix, ic]] =
                                            gi[[iy, ix, ic]] + go * vk[[ky, kx, ic, oc]];
                                        gk[[ky, kx, ic, oc]] =
                                            gk[[ky, kx, ic, oc]] + go * vi[[iy, ix, ic]];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![
                    (input.id, gi.into_dyn()),
                    (kernel.id, gk.into_dyn()),
                    (bias.id, gb.into_dyn()),
                ]
            })),
        )
    }
}
