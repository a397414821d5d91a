//! Reverse-mode differentiation over dense matrices.
//!
//! Every value is a `DMatrix` (scalars are 1×1). Nodes are appended in
//! evaluation order, so a single reverse sweep accumulates adjoints.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::cholesky;

type Mat = DMatrix<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Neg(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    /// 1×1 times matrix.
    ScalarMul(Var, Var),
    /// Matrix plus a broadcast 1×1.
    AddScalar(Var, Var),
    /// Square matrix plus a 1×1 times the identity.
    AddDiagScalar(Var, Var),
    /// Row-wise broadcast product of an n×d matrix and a 1×d row.
    MulRow(Var, Var),
    Recip(Var),
    Exp(Var),
    Ln(Var),
    Ln1p(Var),
    Softplus(Var),
    Relu(Var),
    Sqrt(Var),
    Sum(Var),
    ColSum(Var),
    Diag(Var),
    Cholesky(Var),
    SolveLower(Var, Var),
    SolveLowerT(Var, Var),
    SqDist(Var, Var),
    Matern32(Var),
    LowerPos(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Mat,
    op: Op,
    grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of every node after [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Mat {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Mat::zeros(r, c)
            }
        }
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn tril(m: &Mat) -> Mat {
    m.lower_triangle()
}

const SQRT3: f64 = 1.732_050_807_568_877_2;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Mat, op: Op, inputs: &[Var]) -> Var {
        let grad = match op {
            Op::Leaf => true,
            Op::Const => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].grad),
        };
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Const, &[])
    }

    pub fn scalar_const(&mut self, c: f64) -> Var {
        self.constant(Mat::from_element(1, 1, c))
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    fn val(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a) + self.val(b);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a) - self.val(b);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = -self.val(a);
        self.push(v, Op::Neg(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a) * self.val(b);
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.val(a).transpose();
        self.push(v, Op::Transpose(a), &[a])
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a).component_mul(self.val(b));
        self.push(v, Op::Hadamard(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.val(a) * c;
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.val(a).add_scalar(c);
        self.push(v, Op::AddConst(a), &[a])
    }

    pub fn scalar_mul(&mut self, s: Var, a: Var) -> Var {
        let v = self.val(a) * self.scalar(s);
        self.push(v, Op::ScalarMul(s, a), &[s, a])
    }

    pub fn add_scalar(&mut self, a: Var, s: Var) -> Var {
        let v = self.val(a).add_scalar(self.scalar(s));
        self.push(v, Op::AddScalar(a, s), &[a, s])
    }

    pub fn add_diag_scalar(&mut self, a: Var, s: Var) -> Var {
        let mut v = self.val(a).clone();
        let c = self.scalar(s);
        for i in 0..v.nrows().min(v.ncols()) {
            v[(i, i)] += c;
        }
        self.push(v, Op::AddDiagScalar(a, s), &[a, s])
    }

    /// `A + c I` for a constant `c`.
    pub fn add_identity(&mut self, a: Var, c: f64) -> Var {
        let s = self.scalar_const(c);
        self.add_diag_scalar(a, s)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.val(row);
        let v = Mat::from_fn(self.val(a).nrows(), self.val(a).ncols(), |i, j| {
            self.val(a)[(i, j)] * r[(0, j)]
        });
        self.push(v, Op::MulRow(a, row), &[a, row])
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.val(a).map(|x| 1.0 / x);
        self.push(v, Op::Recip(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.val(a).map(f64::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.val(a).map(f64::ln);
        self.push(v, Op::Ln(a), &[a])
    }

    pub fn ln_1p(&mut self, a: Var) -> Var {
        let v = self.val(a).map(f64::ln_1p);
        self.push(v, Op::Ln1p(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.val(a).map(softplus);
        self.push(v, Op::Softplus(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.val(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.val(a).map(f64::sqrt);
        self.push(v, Op::Sqrt(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::from_element(1, 1, self.val(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    /// Column sums as a 1×n row.
    pub fn col_sum(&mut self, a: Var) -> Var {
        let v = self.val(a).row_sum();
        let v = Mat::from_row_slice(1, v.len(), v.as_slice());
        self.push(v, Op::ColSum(a), &[a])
    }

    /// Diagonal of a square matrix as a column.
    pub fn diag(&mut self, a: Var) -> Var {
        let d = self.val(a).diagonal();
        let v = Mat::from_column_slice(d.len(), 1, d.as_slice());
        self.push(v, Op::Diag(a), &[a])
    }

    /// Lower Cholesky factor; extra jitter is added only if plain
    /// factorization fails, and is treated as a constant.
    pub fn cholesky(&mut self, a: Var) -> Result<Var> {
        let f = cholesky(self.val(a), 0.0)?;
        Ok(self.push(f.lower().clone(), Op::Cholesky(a), &[a]))
    }

    /// `L⁻¹ B` for lower-triangular `L`.
    pub fn solve_lower(&mut self, l: Var, b: Var) -> Result<Var> {
        let v = self
            .val(l)
            .solve_lower_triangular(self.val(b))
            .ok_or(Error::SingularMatrix { jitter: 0.0 })?;
        Ok(self.push(v, Op::SolveLower(l, b), &[l, b]))
    }

    /// `L⁻ᵀ B` for lower-triangular `L`.
    pub fn solve_lower_t(&mut self, l: Var, b: Var) -> Result<Var> {
        let v = self
            .val(l)
            .tr_solve_lower_triangular(self.val(b))
            .ok_or(Error::SingularMatrix { jitter: 0.0 })?;
        Ok(self.push(v, Op::SolveLowerT(l, b), &[l, b]))
    }

    /// Pairwise squared distances between rows of `a` and rows of `b`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Var {
        let v = crate::kernels::sq_dist(self.val(a), self.val(b));
        self.push(v, Op::SqDist(a, b), &[a, b])
    }

    /// Matérn-3/2 profile `(1 + √3 r) e^{−√3 r}` of squared distances `r²`.
    pub fn matern32(&mut self, d: Var) -> Var {
        let v = self.val(d).map(|d2| {
            let s = SQRT3 * d2.max(0.0).sqrt();
            (1.0 + s) * (-s).exp()
        });
        self.push(v, Op::Matern32(d), &[d])
    }

    /// Lower triangle of a square matrix with softplus applied to the diagonal.
    pub fn lower_pos(&mut self, a: Var) -> Var {
        let mut v = tril(self.val(a));
        for i in 0..v.nrows() {
            v[(i, i)] = softplus(v[(i, i)]);
        }
        self.push(v, Op::LowerPos(a), &[a])
    }

    /// `Σ ln` of the diagonal, i.e. `½ log|LLᵀ|` for a factor `L`.
    pub fn sum_ln_diag(&mut self, l: Var) -> Var {
        let d = self.diag(l);
        let ln = self.ln(d);
        self.sum(ln)
    }

    /// Adjoints of every node with respect to the scalar `out`.
    pub fn backward(&self, out: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Mat>> = vec![None; n];
        grads[out.0] = Some(Mat::from_element(1, 1, 1.0));
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads, shapes }
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let mut acc = |v: Var, delta: Mat| {
            if !self.nodes[v.0].grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += delta,
                slot => *slot = Some(delta),
            }
        };
        let y = &node.value;
        match node.op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                acc(a, g.clone());
                acc(b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(a, g.clone());
                acc(b, -g);
            }
            Op::Neg(a) => acc(a, -g),
            Op::MatMul(a, b) => {
                acc(a, g * self.val(b).transpose());
                acc(b, self.val(a).transpose() * g);
            }
            Op::Transpose(a) => acc(a, g.transpose()),
            Op::Hadamard(a, b) => {
                acc(a, g.component_mul(self.val(b)));
                acc(b, g.component_mul(self.val(a)));
            }
            Op::Scale(a, c) => acc(a, g * c),
            Op::AddConst(a) => acc(a, g.clone()),
            Op::ScalarMul(s, a) => {
                acc(s, Mat::from_element(1, 1, g.dot(self.val(a))));
                acc(a, g * self.scalar(s));
            }
            Op::AddScalar(a, s) => {
                acc(a, g.clone());
                acc(s, Mat::from_element(1, 1, g.sum()));
            }
            Op::AddDiagScalar(a, s) => {
                acc(a, g.clone());
                acc(s, Mat::from_element(1, 1, g.trace()));
            }
            Op::MulRow(a, row) => {
                let av = self.val(a);
                let r = self.val(row);
                acc(
                    a,
                    Mat::from_fn(g.nrows(), g.ncols(), |i, j| g[(i, j)] * r[(0, j)]),
                );
                let gr = Mat::from_fn(1, g.ncols(), |_, j| {
                    (0..g.nrows()).map(|i| g[(i, j)] * av[(i, j)]).sum()
                });
                acc(row, gr);
            }
            Op::Recip(a) => acc(a, -g.component_mul(&y.component_mul(y))),
            Op::Exp(a) => acc(a, g.component_mul(y)),
            Op::Ln(a) => acc(a, g.component_div(self.val(a))),
            Op::Ln1p(a) => acc(a, g.component_div(&self.val(a).add_scalar(1.0))),
            Op::Softplus(a) => acc(a, g.component_mul(&self.val(a).map(sigmoid))),
            Op::Relu(a) => acc(
                a,
                g.component_mul(&self.val(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 })),
            ),
            Op::Sqrt(a) => acc(a, g.component_div(&(y * 2.0))),
            Op::Sum(a) => {
                let (r, c) = self.val(a).shape();
                acc(a, Mat::from_element(r, c, g[(0, 0)]));
            }
            Op::ColSum(a) => {
                let (r, c) = self.val(a).shape();
                acc(a, Mat::from_fn(r, c, |_, j| g[(0, j)]));
            }
            Op::Diag(a) => {
                let n = self.val(a).nrows();
                acc(
                    a,
                    Mat::from_fn(n, n, |i, j| if i == j { g[(i, 0)] } else { 0.0 }),
                );
            }
            Op::Cholesky(a) => {
                // Ā = sym(L⁻ᵀ Φ(Lᵀ L̄) L⁻¹), Φ = lower triangle with halved diagonal
                let l = y;
                let mut p = tril(&(l.transpose() * g));
                for i in 0..p.nrows() {
                    p[(i, i)] *= 0.5;
                }
                let left = l
                    .tr_solve_lower_triangular(&p)
                    .expect("factor is nonsingular");
                let s = l
                    .tr_solve_lower_triangular(&left.transpose())
                    .expect("factor is nonsingular")
                    .transpose();
                acc(a, (&s + s.transpose()) * 0.5);
            }
            Op::SolveLower(l, b) => {
                let lv = self.val(l);
                let gb = lv
                    .tr_solve_lower_triangular(g)
                    .expect("factor is nonsingular");
                acc(l, -tril(&(&gb * y.transpose())));
                acc(b, gb);
            }
            Op::SolveLowerT(l, b) => {
                let lv = self.val(l);
                let gb = lv.solve_lower_triangular(g).expect("factor is nonsingular");
                acc(l, -tril(&(y * gb.transpose())));
                acc(b, gb);
            }
            Op::SqDist(a, b) => {
                let av = self.val(a);
                let bv = self.val(b);
                let rows = g.column_sum();
                let cols = g.row_sum();
                let ga = (Mat::from_diagonal(&rows) * av - g * bv) * 2.0;
                let gb = (Mat::from_diagonal(&cols.transpose()) * bv - g.transpose() * av) * 2.0;
                acc(a, ga);
                acc(b, gb);
            }
            Op::Matern32(d) => {
                let dv = self.val(d);
                acc(
                    d,
                    Mat::from_fn(g.nrows(), g.ncols(), |i, j| {
                        let s = SQRT3 * dv[(i, j)].max(0.0).sqrt();
                        -1.5 * (-s).exp() * g[(i, j)]
                    }),
                );
            }
            Op::LowerPos(a) => {
                let av = self.val(a);
                let mut ga = tril(g);
                for i in 0..ga.nrows() {
                    ga[(i, i)] *= sigmoid(av[(i, i)]);
                }
                acc(a, ga);
            }
        }
    }
}
