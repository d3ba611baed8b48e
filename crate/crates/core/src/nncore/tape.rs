//! A small reverse-mode differentiation tape over dense matrices.
//!
//! Every node holds a 2-D array (rows are batch items). Operations record
//! their inputs; [`Tape::backward`] walks the nodes in reverse and
//! accumulates adjoints. Derivatives of derivatives are supported simply by
//! building the first derivative out of tape operations.

use ndarray::{concatenate, Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    RowBroadcast(Var, usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    TanhDeriv(Var),
    Exp(Var),
    Square(Var),
    Abs(Var),
    MatMulConst(Var, Array2<f64>),
    WeightCols(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    SumAll(Var),
    SumCols(Var),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of leaf `v`; zeros when the output does not depend on it.
    pub fn wrt(&self, v: Var) -> Array2<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(self.shapes[v.0]),
        }
    }
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

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `x + b` with `b` a single row broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let v = self.value(x) + self.value(b);
        self.push(v, Op::AddRow(x, b))
    }

    /// Repeats row `row` of `x` `rows` times.
    pub fn row_broadcast(&mut self, x: Var, row: usize, rows: usize) -> Var {
        let r = self.value(x).row(row).to_owned();
        let v = r
            .broadcast((rows, r.len()))
            .expect("row broadcast")
            .to_owned();
        self.push(v, Op::RowBroadcast(x, row))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// `x ⊙ c` where `c` is a single column broadcast over the columns of `x`.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Var {
        let v = self.value(x) * self.value(c);
        self.push(v, Op::MulCol(x, c))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x) * s;
        self.push(v, Op::Scale(x, s))
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x) + c;
        self.push(v, Op::Offset(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(f64::tanh);
        self.push(v, Op::Tanh(x))
    }

    /// `1 - h²` for a node `h` holding tanh outputs.
    pub fn tanh_deriv(&mut self, h: Var) -> Var {
        let v = self.value(h).mapv(|y| 1.0 - y * y);
        self.push(v, Op::TanhDeriv(h))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(f64::exp);
        self.push(v, Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|y| y * y);
        self.push(v, Op::Square(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(f64::abs);
        self.push(v, Op::Abs(x))
    }

    /// `x · c` for a constant matrix `c`.
    pub fn matmul_const(&mut self, x: Var, c: &Array2<f64>) -> Var {
        let v = self.value(x).dot(c);
        self.push(v, Op::MatMulConst(x, c.clone()))
    }

    /// Multiplies column `j` of `x` by `w[j]`.
    pub fn weight_cols(&mut self, x: Var, w: &[f64]) -> Var {
        let mut v = self.value(x).clone();
        for (mut col, &wj) in v.columns_mut().into_iter().zip(w) {
            col *= wj;
        }
        self.push(v, Op::WeightCols(x, w.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat rows must agree");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(x))
    }

    /// Row sums as a single column.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let v = self.value(x).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::SumCols(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Reverse sweep from a scalar (1×1) node.
    pub fn backward(&self, out: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<f64>>> = (0..n).map(|_| None).collect();
        grads[out.0] = Some(Array2::ones(self.nodes[out.0].value.dim()));

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(x, b) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *b, gb);
                    acc(&mut grads, *x, g.clone());
                }
                Op::RowBroadcast(x, row) => {
                    let mut gx = Array2::zeros(self.value(*x).dim());
                    gx.row_mut(*row).assign(&g.sum_axis(Axis(0)));
                    acc(&mut grads, *x, gx);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, -&g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MulCol(x, c) => {
                    let gx = &g * self.value(*c);
                    let gc = (&g * self.value(*x)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *c, gc);
                }
                Op::Scale(x, s) => acc(&mut grads, *x, &g * *s),
                Op::Offset(x) => acc(&mut grads, *x, g.clone()),
                Op::Tanh(x) => {
                    let gx = &g * &node.value.mapv(|y| 1.0 - y * y);
                    acc(&mut grads, *x, gx);
                }
                Op::TanhDeriv(h) => {
                    let gh = &g * &self.value(*h).mapv(|y| -2.0 * y);
                    acc(&mut grads, *h, gh);
                }
                Op::Exp(x) => acc(&mut grads, *x, &g * &node.value),
                Op::Square(x) => {
                    let gx = &g * &self.value(*x).mapv(|y| 2.0 * y);
                    acc(&mut grads, *x, gx);
                }
                Op::Abs(x) => {
                    let gx = &g * &self.value(*x).mapv(f64::signum);
                    acc(&mut grads, *x, gx);
                }
                Op::MatMulConst(x, c) => acc(&mut grads, *x, g.dot(&c.t())),
                Op::WeightCols(x, w) => {
                    let mut gx = g.clone();
                    for (mut col, &wj) in gx.columns_mut().into_iter().zip(w) {
                        col *= wj;
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let width = self.value(*p).ncols();
                        let gp = g.slice(ndarray::s![.., start..start + width]).to_owned();
                        acc(&mut grads, *p, gp);
                        start += width;
                    }
                }
                Op::SumAll(x) => {
                    let s = g[[0, 0]];
                    acc(&mut grads, *x, Array2::from_elem(self.value(*x).dim(), s));
                }
                Op::SumCols(x) => {
                    let dim = self.value(*x).dim();
                    let gx = g.broadcast(dim).expect("column broadcast").to_owned();
                    acc(&mut grads, *x, gx);
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.dim()).collect(),
        }
    }
}
