//! Reverse-mode automatic differentiation on a linear tape of dense matrices.
//!
//! Every value is a `DMatrix<f64>`; scalars are 1×1 and vectors are column
//! matrices. Nodes are appended in evaluation order, so the tape is always
//! topologically sorted and [`Tape::backward`] is a single reverse sweep.

pub mod lie;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameterized primitive operations.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Neg,
    /// Multiply by a constant.
    Scale(f64),
    /// Add a constant to every entry.
    Shift(f64),
    /// Matrix (first input) times a 1×1 node (second input).
    ScaleBy,
    /// Elementwise product.
    Mul,
    Matmul,
    Transpose,
    /// 3-vector to its cross-product matrix.
    Hat,
    Sin,
    Cos,
    Sqrt,
    Reciprocal,
    Relu,
    /// Elementwise `atan2(y, x)` of (first, second) input.
    Atan2,
    /// `W X + b 1ᵀ` for inputs (W, X, b), with b a column.
    Affine,
    /// Sum of all entries, 1×1.
    Sum,
    /// Column average, C×L to C×1.
    MeanCols,
    /// Huber loss of the Euclidean norm, or summed per component.
    Huber {
        delta: f64,
        per_component: bool,
    },
    /// Stack inputs vertically.
    ConcatRows,
    Slice {
        row: usize,
        col: usize,
        nrows: usize,
        ncols: usize,
    },
    /// Unfold a C×L signal into (C·K)×L_out patches for a strided,
    /// zero-padded 1-D convolution.
    Im2col {
        kernel: usize,
        stride: usize,
        pad: usize,
    },
}

#[derive(Debug, Clone)]
struct Record {
    prim: Option<Primitive>,
    inputs: Vec<usize>,
    value: DMatrix<f64>,
}

/// A recording of primitive evaluations.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Record>,
}

/// Gradients of a scalar seed with respect to every node on the tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<DMatrix<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&DMatrix<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zero-filled when the seed does not depend on it.
    pub fn wrt(&self, v: Var) -> DMatrix<f64> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                DMatrix::zeros(r, c)
            }
        }
    }
}

pub fn huber_value(x: &DMatrix<f64>, delta: f64, per_component: bool) -> f64 {
    let h = |r: f64| {
        if r <= delta {
            0.5 * r * r
        } else {
            delta * (r - 0.5 * delta)
        }
    };
    if per_component {
        x.iter().map(|v| h(v.abs())).sum()
    } else {
        h(x.norm())
    }
}

pub fn im2col(x: &DMatrix<f64>, kernel: usize, stride: usize, pad: usize) -> DMatrix<f64> {
    let (c, l) = x.shape();
    let l_out = conv_output_len(l, kernel, stride, pad);
    let mut out = DMatrix::zeros(c * kernel, l_out);
    for t in 0..l_out {
        for ch in 0..c {
            for j in 0..kernel {
                let src = (t * stride + j) as isize - pad as isize;
                if src >= 0 && (src as usize) < l {
                    out[(ch * kernel + j, t)] = x[(ch, src as usize)];
                }
            }
        }
    }
    out
}

fn col2im(
    g: &DMatrix<f64>,
    channels: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(channels, len);
    for t in 0..g.ncols() {
        for ch in 0..channels {
            for j in 0..kernel {
                let src = (t * stride + j) as isize - pad as isize;
                if src >= 0 && (src as usize) < len {
                    out[(ch, src as usize)] += g[(ch * kernel + j, t)];
                }
            }
        }
    }
    out
}

pub fn conv_output_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    if len + 2 * pad < kernel {
        0
    } else {
        (len + 2 * pad - kernel) / stride + 1
    }
}

fn shape_err(prim: &Primitive, msg: String) -> Error {
    Error::invalid(format!("{prim:?}: {msg}"))
}

fn same_shape(prim: &Primitive, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            prim,
            format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn is_scalar(m: &DMatrix<f64>) -> bool {
    m.shape() == (1, 1)
}

/// Forward evaluation of one primitive. Shared by recording and replay so
/// both produce bit-identical values.
fn evaluate(prim: &Primitive, xs: &[&DMatrix<f64>]) -> Result<DMatrix<f64>> {
    use Primitive::*;
    let arity = match prim {
        Add | Sub | ScaleBy | Mul | Matmul | Atan2 => 2,
        Affine => 3,
        ConcatRows => xs.len().max(1),
        _ => 1,
    };
    if xs.len() != arity {
        return Err(shape_err(
            prim,
            format!("expected {arity} inputs, got {}", xs.len()),
        ));
    }
    let x = xs[0];
    Ok(match prim {
        Add => {
            same_shape(prim, x, xs[1])?;
            x + xs[1]
        }
        Sub => {
            same_shape(prim, x, xs[1])?;
            x - xs[1]
        }
        Neg => -x,
        Scale(c) => x * *c,
        Shift(c) => x.map(|v| v + c),
        ScaleBy => {
            if !is_scalar(xs[1]) {
                return Err(shape_err(
                    prim,
                    format!("scale must be 1x1, got {:?}", xs[1].shape()),
                ));
            }
            x * xs[1][(0, 0)]
        }
        Mul => {
            same_shape(prim, x, xs[1])?;
            x.component_mul(xs[1])
        }
        Matmul => {
            if x.ncols() != xs[1].nrows() {
                return Err(shape_err(
                    prim,
                    format!("{:?} x {:?}", x.shape(), xs[1].shape()),
                ));
            }
            x * xs[1]
        }
        Transpose => x.transpose(),
        Hat => {
            if x.shape() != (3, 1) {
                return Err(shape_err(
                    prim,
                    format!("expected 3x1, got {:?}", x.shape()),
                ));
            }
            DMatrix::from_row_slice(
                3,
                3,
                &[0.0, -x[2], x[1], x[2], 0.0, -x[0], -x[1], x[0], 0.0],
            )
        }
        Sin => x.map(f64::sin),
        Cos => x.map(f64::cos),
        Sqrt => x.map(f64::sqrt),
        Reciprocal => x.map(|v| 1.0 / v),
        Relu => x.map(|v| v.max(0.0)),
        Atan2 => {
            same_shape(prim, x, xs[1])?;
            x.zip_map(xs[1], f64::atan2)
        }
        Affine => {
            let (w, input, b) = (x, xs[1], xs[2]);
            if w.ncols() != input.nrows() || b.shape() != (w.nrows(), 1) {
                return Err(shape_err(
                    prim,
                    format!(
                        "W {:?}, X {:?}, b {:?}",
                        w.shape(),
                        input.shape(),
                        b.shape()
                    ),
                ));
            }
            let mut out = w * input;
            for mut col in out.column_iter_mut() {
                col += b.column(0);
            }
            out
        }
        Sum => DMatrix::from_element(1, 1, x.sum()),
        MeanCols => {
            if x.ncols() == 0 {
                return Err(shape_err(prim, "no columns".into()));
            }
            DMatrix::from_column_slice(x.nrows(), 1, x.column_mean().as_slice())
        }
        Huber {
            delta,
            per_component,
        } => {
            if !(*delta > 0.0) {
                return Err(shape_err(
                    prim,
                    format!("delta must be positive, got {delta}"),
                ));
            }
            DMatrix::from_element(1, 1, huber_value(x, *delta, *per_component))
        }
        ConcatRows => {
            let cols = x.ncols();
            if xs.iter().any(|m| m.ncols() != cols) {
                return Err(shape_err(prim, "column counts differ".into()));
            }
            let rows: usize = xs.iter().map(|m| m.nrows()).sum();
            let mut out = DMatrix::zeros(rows, cols);
            let mut r = 0;
            for m in xs {
                out.view_mut((r, 0), m.shape()).copy_from(*m);
                r += m.nrows();
            }
            out
        }
        Slice {
            row,
            col,
            nrows,
            ncols,
        } => {
            if row + nrows > x.nrows() || col + ncols > x.ncols() {
                return Err(shape_err(
                    prim,
                    format!("out of bounds for {:?}", x.shape()),
                ));
            }
            x.view((*row, *col), (*nrows, *ncols)).into_owned()
        }
        Im2col {
            kernel,
            stride,
            pad,
        } => {
            if *kernel == 0 || *stride == 0 {
                return Err(shape_err(prim, "kernel and stride must be positive".into()));
            }
            if conv_output_len(x.ncols(), *kernel, *stride, *pad) == 0 {
                return Err(shape_err(
                    prim,
                    format!("signal of length {} too short", x.ncols()),
                ));
            }
            im2col(x, *kernel, *stride, *pad)
        }
    })
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf node. Constants and parameters are both leaves; gradients are
    /// available for any of them.
    pub fn leaf(&mut self, value: DMatrix<f64>) -> Var {
        self.nodes.push(Record {
            prim: None,
            inputs: Vec::new(),
            value,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(DMatrix::from_element(1, 1, v))
    }

    pub fn value(&self, v: Var) -> &DMatrix<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    /// Evaluates `prim` on `inputs` and appends the result.
    pub fn record(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        if let Some(bad) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(Error::invalid(format!(
                "node {} is not on this tape",
                bad.0
            )));
        }
        let values: Vec<&DMatrix<f64>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let value = evaluate(&prim, &values)?;
        self.nodes.push(Record {
            prim: Some(prim),
            inputs: inputs.iter().map(|v| v.0).collect(),
            value,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rec(&mut self, prim: Primitive, inputs: &[Var]) -> Var {
        match self.record(prim, inputs) {
            Ok(v) => v,
            Err(e) => panic!("{e}"),
        }
    }

    // Infallible shorthands for internal graph builders; they panic on shape
    // mismatch. Use `record` for checked construction.

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.rec(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.rec(Primitive::Sub, &[a, b])
    }
    pub fn neg(&mut self, a: Var) -> Var {
        self.rec(Primitive::Neg, &[a])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.rec(Primitive::Scale(c), &[a])
    }
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        self.rec(Primitive::Shift(c), &[a])
    }
    pub fn scale_by(&mut self, m: Var, s: Var) -> Var {
        self.rec(Primitive::ScaleBy, &[m, s])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.rec(Primitive::Mul, &[a, b])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.rec(Primitive::Matmul, &[a, b])
    }
    pub fn transpose(&mut self, a: Var) -> Var {
        self.rec(Primitive::Transpose, &[a])
    }
    pub fn hat(&mut self, a: Var) -> Var {
        self.rec(Primitive::Hat, &[a])
    }
    pub fn sin(&mut self, a: Var) -> Var {
        self.rec(Primitive::Sin, &[a])
    }
    pub fn cos(&mut self, a: Var) -> Var {
        self.rec(Primitive::Cos, &[a])
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.rec(Primitive::Sqrt, &[a])
    }
    pub fn recip(&mut self, a: Var) -> Var {
        self.rec(Primitive::Reciprocal, &[a])
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.rec(Primitive::Relu, &[a])
    }
    pub fn atan2(&mut self, y: Var, x: Var) -> Var {
        self.rec(Primitive::Atan2, &[y, x])
    }
    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Var {
        self.rec(Primitive::Affine, &[w, x, b])
    }
    pub fn sum(&mut self, a: Var) -> Var {
        self.rec(Primitive::Sum, &[a])
    }
    pub fn mean_cols(&mut self, a: Var) -> Var {
        self.rec(Primitive::MeanCols, &[a])
    }
    pub fn huber(&mut self, a: Var, delta: f64, per_component: bool) -> Var {
        self.rec(
            Primitive::Huber {
                delta,
                per_component,
            },
            &[a],
        )
    }
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        self.rec(Primitive::ConcatRows, parts)
    }
    pub fn slice(&mut self, a: Var, row: usize, col: usize, nrows: usize, ncols: usize) -> Var {
        self.rec(
            Primitive::Slice {
                row,
                col,
                nrows,
                ncols,
            },
            &[a],
        )
    }
    pub fn im2col(&mut self, a: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        self.rec(
            Primitive::Im2col {
                kernel,
                stride,
                pad,
            },
            &[a],
        )
    }

    /// `aᵀ b` for column vectors, 1×1.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let at = self.transpose(a);
        self.matmul(at, b)
    }

    /// Re-evaluates the tape with new leaf values (in leaf order) and returns
    /// the value of every node.
    pub fn replay(&self, leaves: &[DMatrix<f64>]) -> Result<Vec<DMatrix<f64>>> {
        let mut out: Vec<DMatrix<f64>> = Vec::with_capacity(self.nodes.len());
        let mut next_leaf = 0;
        for node in &self.nodes {
            let v = match &node.prim {
                None => {
                    let leaf = leaves
                        .get(next_leaf)
                        .ok_or_else(|| Error::invalid("replay: too few leaf values"))?;
                    if leaf.shape() != node.value.shape() {
                        return Err(Error::invalid("replay: leaf shape changed"));
                    }
                    next_leaf += 1;
                    leaf.clone()
                }
                Some(p) => {
                    let xs: Vec<&DMatrix<f64>> = node.inputs.iter().map(|&i| &out[i]).collect();
                    evaluate(p, &xs)?
                }
            };
            out.push(v);
        }
        Ok(out)
    }

    /// Leaf values in recording order, for [`Tape::replay`].
    pub fn leaf_values(&self) -> Vec<DMatrix<f64>> {
        self.nodes
            .iter()
            .filter(|n| n.prim.is_none())
            .map(|n| n.value.clone())
            .collect()
    }

    /// Reverse sweep from a 1×1 `seed`.
    pub fn backward(&self, seed: Var) -> Result<Gradients> {
        let seed_val = &self
            .nodes
            .get(seed.0)
            .ok_or_else(|| Error::invalid("seed is not on this tape"))?
            .value;
        if !is_scalar(seed_val) {
            return Err(Error::invalid(format!(
                "backward seed must be 1x1, got {:?}",
                seed_val.shape()
            )));
        }
        let mut grads: Vec<Option<DMatrix<f64>>> = vec![None; seed.0 + 1];
        grads[seed.0] = Some(DMatrix::from_element(1, 1, 1.0));
        for i in (0..=seed.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(prim) = &node.prim {
                self.pullback(prim, node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn pullback(
        &self,
        prim: &Primitive,
        node: &Record,
        g: &DMatrix<f64>,
        grads: &mut [Option<DMatrix<f64>>],
    ) {
        use Primitive::*;
        let inp = &node.inputs;
        let val = |k: usize| &self.nodes[inp[k]].value;
        let mut acc = |k: usize, d: DMatrix<f64>| {
            let slot = &mut grads[inp[k]];
            match slot {
                Some(existing) => *existing += d,
                None => *slot = Some(d),
            }
        };
        match prim {
            Add => {
                acc(0, g.clone());
                acc(1, g.clone());
            }
            Sub => {
                acc(0, g.clone());
                acc(1, -g);
            }
            Neg => acc(0, -g),
            Scale(c) => acc(0, g * *c),
            Shift(_) => acc(0, g.clone()),
            ScaleBy => {
                let s = val(1)[(0, 0)];
                let ds = g.dot(val(0));
                acc(0, g * s);
                acc(1, DMatrix::from_element(1, 1, ds));
            }
            Mul => {
                let (a, b) = (val(0).clone(), val(1).clone());
                acc(0, g.component_mul(&b));
                acc(1, g.component_mul(&a));
            }
            Matmul => {
                let da = g * val(1).transpose();
                let db = val(0).transpose() * g;
                acc(0, da);
                acc(1, db);
            }
            Transpose => acc(0, g.transpose()),
            Hat => {
                let d = DMatrix::from_column_slice(
                    3,
                    1,
                    &[
                        g[(2, 1)] - g[(1, 2)],
                        g[(0, 2)] - g[(2, 0)],
                        g[(1, 0)] - g[(0, 1)],
                    ],
                );
                acc(0, d);
            }
            Sin => {
                let d = g.component_mul(&val(0).map(f64::cos));
                acc(0, d);
            }
            Cos => {
                let d = -g.component_mul(&val(0).map(f64::sin));
                acc(0, d);
            }
            Sqrt => {
                let d = g.component_mul(&node.value.map(|s| 0.5 / s));
                acc(0, d);
            }
            Reciprocal => {
                let d = -g.component_mul(&node.value.map(|r| r * r));
                acc(0, d);
            }
            Relu => {
                let d = g.zip_map(val(0), |gi, x| if x > 0.0 { gi } else { 0.0 });
                acc(0, d);
            }
            Atan2 => {
                let (y, x) = (val(0).clone(), val(1).clone());
                let r2 = y.zip_map(&x, |a, b| a * a + b * b);
                let dy = g.component_mul(&x.component_div(&r2));
                let dx = -g.component_mul(&y.component_div(&r2));
                acc(0, dy);
                acc(1, dx);
            }
            Affine => {
                let dw = g * val(1).transpose();
                let dx = val(0).transpose() * g;
                let db = DMatrix::from_column_slice(g.nrows(), 1, g.column_sum().as_slice());
                acc(0, dw);
                acc(1, dx);
                acc(2, db);
            }
            Sum => {
                let (r, c) = val(0).shape();
                acc(0, DMatrix::from_element(r, c, g[(0, 0)]));
            }
            MeanCols => {
                let (r, c) = val(0).shape();
                let mut d = DMatrix::zeros(r, c);
                let scaled = g.column(0) / c as f64;
                for mut col in d.column_iter_mut() {
                    col.copy_from(&scaled);
                }
                acc(0, d);
            }
            Huber {
                delta,
                per_component,
            } => {
                let x = val(0);
                let s = g[(0, 0)];
                let d = if *per_component {
                    x.map(|v| {
                        s * if v.abs() <= *delta {
                            v
                        } else {
                            delta * v.signum()
                        }
                    })
                } else {
                    let r = x.norm();
                    if r <= *delta {
                        x * s
                    } else {
                        x * (s * delta / r)
                    }
                };
                acc(0, d);
            }
            ConcatRows => {
                let mut r = 0;
                for k in 0..inp.len() {
                    let rows = val(k).nrows();
                    let part = g.rows(r, rows).into_owned();
                    r += rows;
                    acc(k, part);
                }
            }
            Slice {
                row,
                col,
                nrows,
                ncols,
            } => {
                let (r, c) = val(0).shape();
                let mut d = DMatrix::zeros(r, c);
                d.view_mut((*row, *col), (*nrows, *ncols)).copy_from(g);
                acc(0, d);
            }
            Im2col {
                kernel,
                stride,
                pad,
            } => {
                let (c, l) = val(0).shape();
                acc(0, col2im(g, c, l, *kernel, *stride, *pad));
            }
        }
    }
}

/// Central finite-difference gradient of `f` at `x`, for tests and checks.
pub fn finite_difference<F: FnMut(&DMatrix<f64>) -> f64>(
    mut f: F,
    x: &DMatrix<f64>,
    h: f64,
) -> DMatrix<f64> {
    let mut grad = DMatrix::zeros(x.nrows(), x.ncols());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-8)
    }

    #[test]
    fn matmul_shape() {
        let mut t = Tape::new();
        let a = t.leaf(DMatrix::zeros(2, 3));
        let b = t.leaf(DMatrix::zeros(3, 1));
        let c = t.matmul(a, b);
        assert_eq!(t.value(c).shape(), (2, 1));
        assert!(matches!(
            t.record(Primitive::Matmul, &[a, a]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn huber_at_origin_and_hat_entries() {
        let mut t = Tape::new();
        let z = t.leaf(DMatrix::zeros(3, 1));
        let h = t.huber(z, 1.0, false);
        assert_eq!(t.scalar_value(h), 0.0);
        let v = t.leaf(DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]));
        let w = t.hat(v);
        assert_eq!(t.value(w)[(1, 0)], 3.0);
        assert_eq!(t.value(w), &(-t.value(w).transpose()));
    }

    #[test]
    fn squared_norm_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(DMatrix::from_column_slice(2, 1, &[1.0, 2.0]));
        let f = t.dot(x, x);
        let g = t.backward(f).unwrap();
        assert_eq!(g.wrt(x), DMatrix::from_column_slice(2, 1, &[2.0, 4.0]));
    }

    #[test]
    fn non_scalar_seed_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(DMatrix::zeros(2, 1));
        assert!(matches!(t.backward(x), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn untouched_leaves_get_zero_gradients() {
        let mut t = Tape::new();
        let x = t.leaf(DMatrix::from_element(2, 2, 1.0));
        let y = t.leaf(DMatrix::from_element(3, 1, 1.0));
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert!(g.get(y).is_none());
        assert_eq!(g.wrt(y), DMatrix::zeros(3, 1));
    }

    #[test]
    fn huber_of_linear_form_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..50 {
            let w = random(&mut rng, 4, 5) * 2.0;
            let x0 = random(&mut rng, 5, 1);
            let per_component = trial % 2 == 1;
            let f = |x: &DMatrix<f64>| huber_value(&(&w * x), 1.0, per_component);
            let mut t = Tape::new();
            let wv = t.leaf(w.clone());
            let xv = t.leaf(x0.clone());
            let y = t.matmul(wv, xv);
            let h = t.huber(y, 1.0, per_component);
            let g = t.backward(h).unwrap();
            let fd = finite_difference(f, &x0, 1e-5);
            assert!(rel_err(&g.wrt(xv), &fd) < 1e-6, "trial {trial}");
        }
    }

    /// Builds a scalar from one primitive applied to random inputs, reducing
    /// the output with a fixed random weighting so every output entry matters.
    fn primitive_case(rng: &mut ChaCha8Rng, prim: &Primitive) -> Vec<DMatrix<f64>> {
        use Primitive::*;
        let pos = |m: DMatrix<f64>| m.map(|v| v.abs() + 0.5);
        match prim {
            Add | Sub | Mul | Atan2 => vec![random(rng, 3, 2), random(rng, 3, 2)],
            Neg | Scale(_) | Shift(_) | Transpose | Sin | Cos | Relu | Sum | MeanCols => {
                vec![random(rng, 3, 4)]
            }
            Huber { .. } => vec![random(rng, 6, 1) * 2.0],
            Sqrt | Reciprocal => vec![pos(random(rng, 3, 2))],
            ScaleBy => vec![random(rng, 3, 3), random(rng, 1, 1)],
            Matmul => vec![random(rng, 2, 3), random(rng, 3, 4)],
            Hat => vec![random(rng, 3, 1)],
            Affine => vec![random(rng, 4, 3), random(rng, 3, 5), random(rng, 4, 1)],
            ConcatRows => vec![random(rng, 2, 3), random(rng, 1, 3), random(rng, 4, 3)],
            Slice { .. } => vec![random(rng, 5, 4)],
            Im2col { .. } => vec![random(rng, 3, 11)],
        }
    }

    fn eval_weighted(prim: &Primitive, inputs: &[DMatrix<f64>], weights: &DMatrix<f64>) -> f64 {
        let refs: Vec<&DMatrix<f64>> = inputs.iter().collect();
        evaluate(prim, &refs).unwrap().component_mul(weights).sum()
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        use Primitive::*;
        let prims = vec![
            Add,
            Sub,
            Neg,
            Scale(-1.7),
            Shift(0.3),
            ScaleBy,
            Mul,
            Matmul,
            Transpose,
            Hat,
            Sin,
            Cos,
            Sqrt,
            Reciprocal,
            Relu,
            Atan2,
            Affine,
            Sum,
            MeanCols,
            Huber {
                delta: 1.0,
                per_component: false,
            },
            Huber {
                delta: 0.5,
                per_component: true,
            },
            ConcatRows,
            Slice {
                row: 1,
                col: 1,
                nrows: 3,
                ncols: 2,
            },
            Im2col {
                kernel: 3,
                stride: 2,
                pad: 1,
            },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for prim in &prims {
            for trial in 0..100 {
                let inputs = primitive_case(&mut rng, prim);
                let refs: Vec<&DMatrix<f64>> = inputs.iter().collect();
                let out_shape = evaluate(prim, &refs).unwrap().shape();
                let weights = random(&mut rng, out_shape.0, out_shape.1);

                let mut t = Tape::new();
                let vars: Vec<Var> = inputs.iter().map(|m| t.leaf(m.clone())).collect();
                let y = t.record(prim.clone(), &vars).unwrap();
                let wv = t.leaf(weights.clone());
                let prod = t.mul(y, wv);
                let s = t.sum(prod);
                let grads = t.backward(s).unwrap();

                for (k, v) in vars.iter().enumerate() {
                    let fd = finite_difference(
                        |probe| {
                            let mut xs = inputs.clone();
                            xs[k] = probe.clone();
                            eval_weighted(prim, &xs, &weights)
                        },
                        &inputs[k],
                        1e-6,
                    );
                    let an = grads.wrt(*v);
                    let err = (&an - &fd).norm() / fd.norm().max(1e-6);
                    // relu and huber kinks are measure-zero for random inputs
                    assert!(
                        err < 1e-5,
                        "{prim:?} trial {trial} input {k}: rel err {err:e}"
                    );
                }
            }
        }
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut t = Tape::new();
        let a = t.leaf(random(&mut rng, 3, 3));
        let b = t.leaf(random(&mut rng, 3, 1));
        let c = t.matmul(a, b);
        let d = t.sin(c);
        let e = t.huber(d, 0.1, false);
        let replayed = t.replay(&t.leaf_values()).unwrap();
        assert_eq!(replayed[e.index()].as_slice(), t.value(e).as_slice());
        assert_eq!(replayed.len(), t.len());
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        let mut t = Tape::new();
        let x = t.scalar(3.0);
        let y = t.mul(x, x);
        let z = t.mul(y, x);
        let g = t.backward(z).unwrap();
        assert_eq!(g.wrt(x)[(0, 0)], 27.0);
    }

    #[test]
    fn im2col_layout() {
        let x = DMatrix::from_row_slice(1, 4, &[1.0, 2.0, 3.0, 4.0]);
        let cols = im2col(&x, 3, 1, 1);
        assert_eq!(cols.shape(), (3, 4));
        assert_eq!(cols.column(0).as_slice(), &[0.0, 1.0, 2.0]);
        assert_eq!(cols.column(3).as_slice(), &[3.0, 4.0, 0.0]);
        assert_eq!(conv_output_len(200, 7, 2, 3), 100);
    }
}
