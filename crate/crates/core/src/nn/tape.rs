//! Reverse-mode automatic differentiation over 2-D arrays.

use ndarray::{Array2, Axis, Zip};

use super::NnError;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Neg(Var),
    Scale(Var, f64),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LogSoftmax(Var),
    SumRows(Var),
    Sum(Var),
    Mean(Var),
    Gather(Var, Vec<usize>),
    SelectRows(Var, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// A computation recorded in evaluation order.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of `v`; zeros when nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Array2<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(self.shapes[v.0]),
        }
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize), NnError> {
    let dim = |x: usize, y: usize| match (x, y) {
        _ if x == y => Some(x),
        (1, y) => Some(y),
        (x, 1) => Some(x),
        _ => None,
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(NnError::ShapeMismatch { left: a, right: b }),
    }
}

/// Sums `g` down to `shape` along broadcast axes.
fn reduce_to(g: Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn zip_broadcast(
    a: &Array2<f64>,
    b: &Array2<f64>,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Array2<f64>, NnError> {
    let shape = broadcast_shape(a.dim(), b.dim())?;
    let a = a.broadcast(shape).expect("checked shape");
    let b = b.broadcast(shape).expect("checked shape");
    Ok(Zip::from(&a).and(&b).map_collect(|&x, &y| f(x, y)))
}

pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

pub fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, a: Var, value: Array2<f64>, op: Op) -> Var {
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Array2<f64>, op: Op) -> Var {
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push(value, op, rg)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), v))
    }

    /// A constant copy of `a`'s current value.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.clone();
        self.constant(v)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(NnError::ShapeMismatch {
                left: sa,
                right: sb,
            });
        }
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        Ok(self.binary(a, b, v, Op::MatMul(a, b)))
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, NnError> {
        let v = zip_broadcast(&self.nodes[a.0].value, &self.nodes[b.0].value, f)?;
        Ok(self.binary(a, b, v, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.elementwise(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.elementwise(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.elementwise(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.elementwise(a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.elementwise(a, b, Op::Minimum(a, b), f64::min)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.unary(a, v, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        self.unary(a, v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        self.unary(a, v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::ln);
        self.unary(a, v, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * x);
        self.unary(a, v, Op::Square(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        self.unary(a, v, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| k * x);
        self.unary(a, v, Op::Scale(a, k))
    }

    /// Clips to `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.clamp(lo, hi));
        self.unary(a, v, Op::Clamp(a, lo, hi))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = softmax_rows(&self.nodes[a.0].value);
        self.unary(a, v, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = log_softmax_rows(&self.nodes[a.0].value);
        self.unary(a, v, Op::LogSoftmax(a))
    }

    /// Row sums as an `n x 1` column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.sum_axis(Axis(1)).insert_axis(Axis(1));
        self.unary(a, v, Op::SumRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        self.unary(a, v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let v = Array2::from_elem((1, 1), x.sum() / x.len() as f64);
        self.unary(a, v, Op::Mean(a))
    }

    /// Picks column `idx[r]` of every row `r`, giving an `n x 1` column.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var, NnError> {
        let x = &self.nodes[a.0].value;
        if idx.len() != x.nrows() {
            return Err(NnError::ShapeMismatch {
                left: x.dim(),
                right: (idx.len(), 1),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.ncols()) {
            return Err(NnError::ShapeMismatch {
                left: x.dim(),
                right: (1, bad + 1),
            });
        }
        let v = Array2::from_shape_fn((idx.len(), 1), |(r, _)| x[[r, idx[r]]]);
        Ok(self.unary(a, v, Op::Gather(a, idx.to_vec())))
    }

    /// Rows `idx` of `a`, in order.
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, NnError> {
        let x = &self.nodes[a.0].value;
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.nrows()) {
            return Err(NnError::ShapeMismatch {
                left: x.dim(),
                right: (bad + 1, x.ncols()),
            });
        }
        let v = x.select(Axis(0), idx);
        Ok(self.unary(a, v, Op::SelectRows(a, idx.to_vec())))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NnError> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(NnError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let y = &node.value;
            let val = |v: Var| &self.nodes[v.0].value;
            let mut send = |v: Var, d: Array2<f64>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                let d = reduce_to(d, self.nodes[v.0].value.dim());
                match &mut grads[v.0] {
                    Some(acc) => *acc += &d,
                    slot => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    send(*a, g.dot(&val(*b).t()));
                    send(*b, val(*a).t().dot(&g));
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone());
                    send(*b, -&g);
                }
                Op::Mul(a, b) => {
                    send(
                        *a,
                        zip_broadcast(&g, val(*b), |g, y| g * y).expect("forward shape"),
                    );
                    send(
                        *b,
                        zip_broadcast(&g, val(*a), |g, x| g * x).expect("forward shape"),
                    );
                }
                Op::Div(a, b) => {
                    let inv = val(*b).mapv(|y| 1.0 / y);
                    send(
                        *a,
                        zip_broadcast(&g, &inv, |g, i| g * i).expect("forward shape"),
                    );
                    let t = zip_broadcast(&g, y, |g, q| g * q).expect("forward shape");
                    send(
                        *b,
                        -zip_broadcast(&t, &inv, |t, i| t * i).expect("forward shape"),
                    );
                }
                Op::Minimum(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let pick_a = zip_broadcast(va, vb, |x, y| if x <= y { 1.0 } else { 0.0 })
                        .expect("forward shape");
                    send(*a, &g * &pick_a);
                    send(*b, &g * &pick_a.mapv(|m| 1.0 - m));
                }
                Op::Relu(a) => send(
                    *a,
                    Zip::from(&g)
                        .and(val(*a))
                        .map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 }),
                ),
                Op::Tanh(a) => send(
                    *a,
                    Zip::from(&g).and(y).map_collect(|&g, &t| g * (1.0 - t * t)),
                ),
                Op::Exp(a) => send(*a, &g * y),
                Op::Log(a) => send(*a, Zip::from(&g).and(val(*a)).map_collect(|&g, &x| g / x)),
                Op::Square(a) => send(
                    *a,
                    Zip::from(&g).and(val(*a)).map_collect(|&g, &x| 2.0 * g * x),
                ),
                Op::Neg(a) => send(*a, -&g),
                Op::Scale(a, k) => send(*a, g.mapv(|g| g * k)),
                Op::Clamp(a, lo, hi) => send(
                    *a,
                    Zip::from(&g).and(val(*a)).map_collect(|&g, &x| {
                        if x >= *lo && x <= *hi {
                            g
                        } else {
                            0.0
                        }
                    }),
                ),
                Op::Softmax(a) => {
                    // dx = y * (g - sum(g * y))
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    send(*a, y * &(&g - &dot));
                }
                Op::LogSoftmax(a) => {
                    let p = y.mapv(f64::exp);
                    let gs = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    send(*a, &g - &(&p * &gs));
                }
                Op::SumRows(a) => {
                    let shape = val(*a).dim();
                    send(*a, g.broadcast(shape).expect("column").to_owned());
                }
                Op::Sum(a) => send(*a, Array2::from_elem(val(*a).dim(), g[[0, 0]])),
                Op::Mean(a) => {
                    let x = val(*a);
                    send(*a, Array2::from_elem(x.dim(), g[[0, 0]] / x.len() as f64));
                }
                Op::Gather(a, idx) => {
                    let mut d = Array2::zeros(val(*a).dim());
                    for (r, &c) in idx.iter().enumerate() {
                        d[[r, c]] = g[[r, 0]];
                    }
                    send(*a, d);
                }
                Op::SelectRows(a, idx) => {
                    let mut d = Array2::zeros(val(*a).dim());
                    for (k, &r) in idx.iter().enumerate() {
                        let mut row = d.row_mut(r);
                        row += &g.row(k);
                    }
                    send(*a, d);
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.dim()).collect();
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads, shapes })
    }
}
