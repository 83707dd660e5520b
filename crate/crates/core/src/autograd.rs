//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied during a forward pass as a
//! node holding the output value, the input node ids and whatever the
//! backward pass needs. Nodes are appended in execution order, so the tape
//! is topologically sorted by construction and [`Tape::backward`] is a
//! single reverse sweep. Gradients reaching a node through several uses
//! are summed.
//!
//! ```
//! use voxseg::autograd::Tape;
//! use voxseg::Tensor;
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, BatchNormSaved, BatchNormState, ConvGeom};
use crate::tensor::{Real, Tensor};
use crate::util::reflect_index;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    BnTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: BatchNormSaved<T>,
    },
    BnEval {
        x: Var,
        gamma: Var,
        beta: Var,
        state: BatchNormState<T>,
        inv_std: Vec<T>,
    },
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Concat(Var, Var),
    PadZ {
        x: Var,
        before: usize,
    },
    Crop {
        x: Var,
        offset: [usize; 3],
    },
    Sum(Var),
    Mean(Var),
    MeanPerSample(Var),
    Bce {
        q: Var,
        p: Var,
        eps: f64,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Clamp applied to predicted probabilities before the logarithms.
pub const BCE_EPS: f64 = 1e-7;

/// Records primitive applications for one forward/backward cycle.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the loss with respect to the tape's differentiable leaves.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf (a parameter or an input under test).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let out = kernels::conv3d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            geom,
        )?;
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(out, rg, Op::Conv { x, w, b, geom }))
    }

    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = kernels::conv_transpose3d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(out, rg, Op::ConvTranspose { x, w, b }))
    }

    pub fn maxpool3d(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = kernels::maxpool3d_forward(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::MaxPool { x, argmax }))
    }

    /// Batch normalization. Train mode uses batch statistics and updates
    /// `state`; eval mode reads `state` only.
    pub fn batchnorm3d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<T>,
        mode: Mode,
    ) -> Result<Var> {
        let rg = self.rg(&[x, gamma, beta]);
        match mode {
            Mode::Train => {
                let (out, saved) =
                    kernels::batchnorm_train_forward(self.value(x), self.value(gamma), self.value(beta), state)?;
                Ok(self.push(out, rg, Op::BnTrain { x, gamma, beta, saved }))
            }
            Mode::Eval => {
                let (out, inv_std) =
                    kernels::batchnorm_eval_forward(self.value(x), self.value(gamma), self.value(beta), state)?;
                let state = state.clone();
                Ok(self.push(
                    out,
                    rg,
                    Op::BnEval {
                        x,
                        gamma,
                        beta,
                        state,
                        inv_std,
                    },
                ))
            }
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::of(slope);
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * s });
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::LeakyRelu(x, s))
    }

    /// Logistic sigmoid, kept strictly inside (0, 1) even where the
    /// exact value rounds to 0 or 1.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        let lo = T::min_positive_value();
        let hi = T::one() - T::epsilon();
        let out = self.value(x).map(|v| {
            let s = T::one() / (T::one() + (-v).exp());
            s.max(lo).min(hi)
        });
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Sigmoid(x))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err!("{what} of {:?} and {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let k = T::of(k);
        let out = self.value(x).map(|v| v * k);
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Scale(x, k))
    }

    /// Concatenates two `[N, C, D, H, W]` tensors along the channel axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let [n, ca, d, h, w] = ta.dims5()?;
        let [nb, cb, db, hb, wb] = tb.dims5()?;
        if (n, d, h, w) != (nb, db, hb, wb) {
            return Err(shape_err!(
                "concat of {:?} and {:?} along channels",
                ta.shape(),
                tb.shape()
            ));
        }
        let plane = d * h * w;
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        for s in 0..n {
            data.extend_from_slice(&ta.data()[s * ca * plane..(s + 1) * ca * plane]);
            data.extend_from_slice(&tb.data()[s * cb * plane..(s + 1) * cb * plane]);
        }
        let out = Tensor::new(&[n, ca + cb, d, h, w], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Concat(a, b)))
    }

    /// Mirror-pads the D axis (no edge repeat: index −1 reads index 1).
    pub fn pad_z_reflect(&mut self, x: Var, before: usize, after: usize) -> Result<Var> {
        let t = self.value(x);
        let [n, c, d, h, w] = t.dims5()?;
        if d < 2 && before + after > 0 {
            return Err(shape_err!("cannot reflect-pad a D extent of {d}"));
        }
        let plane = h * w;
        let od = d + before + after;
        let mut data = Vec::with_capacity(n * c * od * plane);
        for nc in 0..n * c {
            for z in 0..od {
                let src = reflect_index(z as isize - before as isize, d);
                let b = (nc * d + src) * plane;
                data.extend_from_slice(&t.data()[b..b + plane]);
            }
        }
        let out = Tensor::new(&[n, c, od, h, w], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::PadZ { x, before }))
    }

    /// Extracts the spatial box starting at `offset` with extents `size`.
    pub fn crop(&mut self, x: Var, offset: [usize; 3], size: [usize; 3]) -> Result<Var> {
        let t = self.value(x);
        let [n, c, d, h, w] = t.dims5()?;
        if (0..3).any(|i| offset[i] + size[i] > [d, h, w][i] || size[i] == 0) {
            return Err(shape_err!(
                "crop box {offset:?}+{size:?} outside {:?}",
                t.shape()
            ));
        }
        let mut data = Vec::with_capacity(n * c * size.iter().product::<usize>());
        for nc in 0..n * c {
            for z in 0..size[0] {
                for y in 0..size[1] {
                    let b = ((nc * d + offset[0] + z) * h + offset[1] + y) * w + offset[2];
                    data.extend_from_slice(&t.data()[b..b + size[2]]);
                }
            }
        }
        let out = Tensor::new(&[n, c, size[0], size[1], size[2]], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::Crop { x, offset }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v.as_f64()).sum::<f64>();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(T::of(s)), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().map(|v| v.as_f64()).sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(T::of(s)), rg, Op::Mean(x))
    }

    /// Mean over every axis but the first: `[N, ...] -> [N]`.
    pub fn mean_per_sample(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.shape()[0];
        let per = t.len() / n;
        let data = t
            .data()
            .chunks(per)
            .map(|c| T::of(c.iter().map(|v| v.as_f64()).sum::<f64>() / per as f64))
            .collect();
        let out = Tensor::new(&[n], data).expect("per-sample mean shape");
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::MeanPerSample(x))
    }

    /// Mean binary cross-entropy of predictions `q` against (possibly soft)
    /// targets `p`. Predictions are clamped into `[ε, 1−ε]`.
    pub fn bce(&mut self, q: Var, p: Var) -> Result<Var> {
        let (tq, tp) = (self.value(q), self.value(p));
        if tq.shape() != tp.shape() {
            return Err(shape_err!(
                "bce prediction {:?} vs target {:?}",
                tq.shape(),
                tp.shape()
            ));
        }
        let eps = BCE_EPS;
        let total: f64 = tq
            .data()
            .iter()
            .zip(tp.data())
            .map(|(&q, &p)| {
                let q = q.as_f64().clamp(eps, 1.0 - eps);
                let p = p.as_f64();
                -(p * q.ln() + (1.0 - p) * (1.0 - q).ln())
            })
            .sum();
        let loss = total / tq.len() as f64;
        let rg = self.rg(&[q]);
        Ok(self.push(Tensor::scalar(T::of(loss)), rg, Op::Bce { q, p, eps }))
    }

    /// Reverse sweep from a scalar `loss`. Returns the gradients of all
    /// differentiable leaves and clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, g, &mut grads)?;
        }
        self.nodes.clear();
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let cg = kernels::conv3d_backward(val(*x), val(*w), &g, *geom, rg(*x), rg(*w))?;
                if let Some(dx) = cg.dx {
                    accumulate(grads, *x, dx)?;
                }
                if let Some(dw) = cg.dw {
                    accumulate(grads, *w, dw)?;
                }
                if let Some(b) = b.filter(|b| rg(*b)) {
                    accumulate(grads, b, cg.db)?;
                }
            }
            Op::ConvTranspose { x, w, b } => {
                let cg = kernels::conv_transpose3d_backward(val(*x), val(*w), &g, rg(*x), rg(*w))?;
                if let Some(dx) = cg.dx {
                    accumulate(grads, *x, dx)?;
                }
                if let Some(dw) = cg.dw {
                    accumulate(grads, *w, dw)?;
                }
                if let Some(b) = b.filter(|b| rg(*b)) {
                    accumulate(grads, b, cg.db)?;
                }
            }
            Op::MaxPool { x, argmax } => {
                if rg(*x) {
                    accumulate(grads, *x, kernels::maxpool3d_backward(val(*x).shape(), argmax, &g))?;
                }
            }
            Op::BnTrain { x, gamma, beta, saved } => {
                let (dx, dg, db) = kernels::batchnorm_train_backward(&g, val(*gamma), saved)?;
                self.route3(grads, [(*x, dx), (*gamma, dg), (*beta, db)])?;
            }
            Op::BnEval {
                x,
                gamma,
                beta,
                state,
                inv_std,
            } => {
                let (dx, dg, db) = kernels::batchnorm_eval_backward(val(*x), &g, val(*gamma), state, inv_std)?;
                self.route3(grads, [(*x, dx), (*gamma, dg), (*beta, db)])?;
            }
            Op::Relu(x) => {
                let xs = val(*x);
                let dx = zip_map(xs, &g, |xv, gv| if xv > T::zero() { gv } else { T::zero() })?;
                accumulate(grads, *x, dx)?;
            }
            Op::LeakyRelu(x, s) => {
                let xs = val(*x);
                let dx = zip_map(xs, &g, |xv, gv| if xv > T::zero() { gv } else { gv * *s })?;
                accumulate(grads, *x, dx)?;
            }
            Op::Sigmoid(x) => {
                let dx = zip_map(&node.value, &g, |s, gv| gv * s * (T::one() - s))?;
                accumulate(grads, *x, dx)?;
            }
            Op::Add(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, g.clone())?;
                }
                if rg(*b) {
                    accumulate(grads, *b, g)?;
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, g.clone())?;
                }
                if rg(*b) {
                    accumulate(grads, *b, g.map(|v| -v))?;
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, zip_map(val(*b), &g, |bv, gv| bv * gv)?)?;
                }
                if rg(*b) {
                    accumulate(grads, *b, zip_map(val(*a), &g, |av, gv| av * gv)?)?;
                }
            }
            Op::Scale(x, k) => accumulate(grads, *x, g.map(|v| v * *k))?,
            Op::Concat(a, b) => {
                let [n, ca, d, h, w] = val(*a).dims5()?;
                let cb = val(*b).shape()[1];
                let plane = d * h * w;
                let mut da = Vec::with_capacity(n * ca * plane);
                let mut db = Vec::with_capacity(n * cb * plane);
                for s in 0..n {
                    let base = s * (ca + cb) * plane;
                    da.extend_from_slice(&g.data()[base..base + ca * plane]);
                    db.extend_from_slice(&g.data()[base + ca * plane..base + (ca + cb) * plane]);
                }
                if rg(*a) {
                    accumulate(grads, *a, Tensor::new(val(*a).shape(), da)?)?;
                }
                if rg(*b) {
                    accumulate(grads, *b, Tensor::new(val(*b).shape(), db)?)?;
                }
            }
            Op::PadZ { x, before } => {
                let [n, c, d, h, w] = val(*x).dims5()?;
                let od = g.shape()[2];
                let plane = h * w;
                let mut dx = Tensor::zeros(val(*x).shape());
                for nc in 0..n * c {
                    for z in 0..od {
                        let src = reflect_index(z as isize - *before as isize, d);
                        let from = &g.data()[(nc * od + z) * plane..(nc * od + z + 1) * plane];
                        let to = &mut dx.data_mut()[(nc * d + src) * plane..(nc * d + src + 1) * plane];
                        for (t, &f) in to.iter_mut().zip(from) {
                            *t += f;
                        }
                    }
                }
                accumulate(grads, *x, dx)?;
            }
            Op::Crop { x, offset } => {
                let [n, c, d, h, w] = val(*x).dims5()?;
                let [_, _, sd, sh, sw] = g.dims5()?;
                let mut dx = Tensor::zeros(val(*x).shape());
                for nc in 0..n * c {
                    for z in 0..sd {
                        for y in 0..sh {
                            let dst = ((nc * d + offset[0] + z) * h + offset[1] + y) * w + offset[2];
                            let src = ((nc * sd + z) * sh + y) * sw;
                            dx.data_mut()[dst..dst + sw].copy_from_slice(&g.data()[src..src + sw]);
                        }
                    }
                }
                accumulate(grads, *x, dx)?;
            }
            Op::Sum(x) => {
                let gv = g.item();
                accumulate(grads, *x, Tensor::full(val(*x).shape(), gv))?;
            }
            Op::Mean(x) => {
                let n = val(*x).len();
                let gv = g.item() / T::of(n as f64);
                accumulate(grads, *x, Tensor::full(val(*x).shape(), gv))?;
            }
            Op::MeanPerSample(x) => {
                let xs = val(*x);
                let per = xs.len() / xs.shape()[0];
                let inv = T::of(1.0 / per as f64);
                let dx = Tensor::from_fn(xs.shape(), |i| g.data()[i / per] * inv);
                accumulate(grads, *x, dx)?;
            }
            Op::Bce { q, p, eps } => {
                let (tq, tp) = (val(*q), val(*p));
                let m = tq.len() as f64;
                let gv = g.item().as_f64();
                let data = tq
                    .data()
                    .iter()
                    .zip(tp.data())
                    .map(|(&q, &p)| {
                        let q = q.as_f64().clamp(*eps, 1.0 - *eps);
                        T::of(gv * (q - p.as_f64()) / (q * (1.0 - q)) / m)
                    })
                    .collect();
                accumulate(grads, *q, Tensor::new(tq.shape(), data)?)?;
            }
        }
        Ok(())
    }

    fn route3(&self, grads: &mut [Option<Tensor<T>>], items: [(Var, Tensor<T>); 3]) -> Result<()> {
        for (v, g) in items {
            if self.nodes[v.0].requires_grad {
                accumulate(grads, v, g)?;
            }
        }
        Ok(())
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}
