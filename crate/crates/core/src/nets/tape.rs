//! Reverse-mode differentiation over a linear tape of 2-D arrays.
//!
//! Every value is an `Array2<f64>`; scalars are `1 x 1`. A [`Var`] is an
//! index into the tape, so graphs are built by ordinary calls and a single
//! backward sweep walks the tape from the end.

use ndarray::{Array2, Axis, Zip};

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    idx: usize,
    tape_id: u64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// `x W + 1 b`
    Linear(Var, Var, Var),
    LeakyRelu(Var, f64),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `(B x k) * (B x 1)` with the column broadcast across `k`
    MulCol(Var, Var),
    /// `(B x k) * (1 x 1)`
    MulScalar(Var, Var),
    Scale(Var, f64),
    AddScalarConst(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Abs(Var),
    Recip(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    RowNorm(Var),
    ConcatCols(Var, Var),
    /// Scalar output whose partial derivatives were computed outside the tape.
    Custom(Vec<(Var, Array2<f64>)>),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

static NEXT_TAPE: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(1);

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    tape_id: u64,
    grads: Vec<Option<Array2<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros if `v` does not influence the output.
    pub fn wrt(&self, v: Var) -> Result<Array2<f64>> {
        if v.tape_id != self.tape_id || v.idx >= self.grads.len() {
            return Err(Error::Autodiff("variable belongs to a different tape".into()));
        }
        Ok(self.grads[v.idx].clone().unwrap_or_else(|| Array2::zeros(self.shapes[v.idx])))
    }
}

fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Autodiff(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, std::sync::atomic::Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            idx: self.nodes.len() - 1,
            tape_id: self.id,
        }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape_id != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Autodiff("variable belongs to a different tape".into()));
        }
        Ok(())
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.idx].value.dim()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.idx].value[[0, 0]]
    }

    /// A leaf: inputs and parameters alike.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), v))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        for v in [x, w, b] {
            self.check(v)?;
        }
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.1 != ws.0 || bs != (1, ws.1) {
            return Err(shape_err("linear", xs, ws));
        }
        let mut out = self.value(x).dot(self.value(w));
        out += self.value(b);
        Ok(self.push(out, Op::Linear(x, w, b)))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).mapv(|v| if v > 0.0 { v } else { slope * v });
        Ok(self.push(out, Op::LeakyRelu(x, slope)))
    }

    fn binary_same(&mut self, a: Var, b: Var, name: &str) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "add")?;
        let out = self.value(a) + self.value(b);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "sub")?;
        let out = self.value(a) - self.value(b);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "mul")?;
        let out = self.value(a) * self.value(b);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        self.check(a)?;
        self.check(c)?;
        let (sa, sc) = (self.shape(a), self.shape(c));
        if sc != (sa.0, 1) {
            return Err(shape_err("mul_col", sa, sc));
        }
        let out = self.value(a) * self.value(c);
        Ok(self.push(out, Op::MulCol(a, c)))
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.check(a)?;
        self.check(s)?;
        if self.shape(s) != (1, 1) {
            return Err(shape_err("mul_scalar", self.shape(a), self.shape(s)));
        }
        let k = self.scalar(s);
        let out = self.value(a) * k;
        Ok(self.push(out, Op::MulScalar(a, s)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a) * k;
        Ok(self.push(out, Op::Scale(a, k)))
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a) + k;
        Ok(self.push(out, Op::AddScalarConst(a)))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).mapv(f64::exp);
        Ok(self.push(out, Op::Exp(a)))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).mapv(f64::ln);
        Ok(self.push(out, Op::Log(a)))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).mapv(|v| v * v);
        Ok(self.push(out, Op::Square(a)))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).mapv(f64::abs);
        Ok(self.push(out, Op::Abs(a)))
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).mapv(|v| 1.0 / v);
        Ok(self.push(out, Op::Recip(a)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        Ok(self.push(out, Op::Sum(a)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::Autodiff("mean of an empty array".into()));
        }
        let out = Array2::from_elem((1, 1), v.sum() / v.len() as f64);
        Ok(self.push(out, Op::Mean(a)))
    }

    /// Row sums, `B x k -> B x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        Ok(self.push(out, Op::SumCols(a)))
    }

    /// Euclidean norm of each row, `B x k -> B x 1`; the derivative at a zero
    /// row is taken as zero.
    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self
            .value(a)
            .map_axis(Axis(1), |r| r.dot(&r).sqrt())
            .insert_axis(Axis(1));
        Ok(self.push(out, Op::RowNorm(a)))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.0 != sb.0 {
            return Err(shape_err("concat_cols", sa, sb));
        }
        let out = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .map_err(|e| Error::Autodiff(e.to_string()))?;
        Ok(self.push(out, Op::ConcatCols(a, b)))
    }

    /// Inserts a scalar computed elsewhere together with its partial
    /// derivatives with respect to existing nodes.
    pub fn custom_scalar(&mut self, value: f64, partials: Vec<(Var, Array2<f64>)>) -> Result<Var> {
        for (v, g) in &partials {
            self.check(*v)?;
            if g.dim() != self.shape(*v) {
                return Err(shape_err("custom_scalar", g.dim(), self.shape(*v)));
            }
        }
        Ok(self.push(Array2::from_elem((1, 1), value), Op::Custom(partials)))
    }

    /// Gradient of the scalar `out` with respect to every earlier node.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        self.check(out)?;
        if self.shape(out) != (1, 1) {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(out)
            )));
        }
        let n = out.idx + 1;
        let mut grads: Vec<Option<Array2<f64>>> = (0..n).map(|_| None).collect();
        grads[out.idx] = Some(Array2::ones((1, 1)));

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.idx] {
                Some(x) => *x += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Linear(x, w, b) => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    acc(&mut grads, *w, xv.t().dot(&g));
                    acc(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *x, g.dot(&wv.t()));
                }
                Op::LeakyRelu(x, slope) => {
                    let mut d = g.clone();
                    Zip::from(&mut d).and(self.value(*x)).for_each(|d, &xv| {
                        if xv <= 0.0 {
                            *d *= slope;
                        }
                    });
                    acc(&mut grads, *x, d);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * self.value(*b));
                    acc(&mut grads, *b, &g * self.value(*a));
                }
                Op::MulCol(a, c) => {
                    acc(&mut grads, *a, &g * self.value(*c));
                    let gc = (&g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *c, gc);
                }
                Op::MulScalar(a, s) => {
                    let k = self.scalar(*s);
                    let gs = (&g * self.value(*a)).sum();
                    acc(&mut grads, *s, Array2::from_elem((1, 1), gs));
                    acc(&mut grads, *a, &g * k);
                }
                Op::Scale(a, k) => acc(&mut grads, *a, &g * *k),
                Op::AddScalarConst(a) => acc(&mut grads, *a, g.clone()),
                Op::Exp(a) => acc(&mut grads, *a, &g * &node.value),
                Op::Log(a) => acc(&mut grads, *a, &g / self.value(*a)),
                Op::Square(a) => acc(&mut grads, *a, &g * &(self.value(*a) * 2.0)),
                Op::Abs(a) => acc(&mut grads, *a, &g * &self.value(*a).mapv(f64::signum)),
                Op::Recip(a) => acc(&mut grads, *a, -(&g * &node.value.mapv(|v| v * v))),
                Op::Sum(a) => acc(&mut grads, *a, Array2::from_elem(self.shape(*a), g[[0, 0]])),
                Op::Mean(a) => {
                    let s = self.shape(*a);
                    acc(&mut grads, *a, Array2::from_elem(s, g[[0, 0]] / (s.0 * s.1) as f64));
                }
                Op::SumCols(a) => {
                    let s = self.shape(*a);
                    acc(&mut grads, *a, g.broadcast(s).expect("column broadcast").to_owned());
                }
                Op::RowNorm(a) => {
                    let av = self.value(*a);
                    let mut d = av.clone();
                    for ((mut row, nrm), gi) in d.outer_iter_mut().zip(node.value.iter()).zip(g.iter()) {
                        if *nrm > 0.0 {
                            row.mapv_inplace(|v| v * gi / nrm);
                        } else {
                            row.fill(0.0);
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::ConcatCols(a, b) => {
                    let ka = self.shape(*a).1;
                    acc(&mut grads, *a, g.slice(ndarray::s![.., ..ka]).to_owned());
                    acc(&mut grads, *b, g.slice(ndarray::s![.., ka..]).to_owned());
                }
                Op::Custom(parts) => {
                    let k = g[[0, 0]];
                    for (v, p) in parts {
                        acc(&mut grads, *v, p * k);
                    }
                }
            }
            grads[i] = Some(g);
        }
        let shapes = self.nodes[..n].iter().map(|nd| nd.value.dim()).collect();
        Ok(Gradients {
            tape_id: self.id,
            grads,
            shapes,
        })
    }
}
