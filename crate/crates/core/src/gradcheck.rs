//! Central finite-difference checks of the tape's analytic gradients.
//!
//! Every check reduces the operation's output to a scalar probe
//! `L = Σ wᵢ·yᵢ` with fixed random weights, differentiates it on the tape,
//! and compares each input element's gradient with
//! `(L(x + h) − L(x − h)) / 2h`, where both probe values are accumulated in
//! 64-bit from the forward pass at the precision under test.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::autograd::{Mode, Tape, Var};
use crate::error::Result;
use crate::kernels::{BatchNormState, ConvGeom, Padding};
use crate::nn::{build_model, Model, ModelConfig};
use crate::tensor::{Real, Tensor};
use crate::util::{mix_seed, rng};

/// Step size and error floor for one precision.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Tolerance {
    pub step: f64,
    /// Step of the whole-model check.
    pub model_step: f64,
    /// Denominator floor of the relative error, as a fraction of the largest
    /// numeric gradient magnitude anywhere in the same check. Without it,
    /// gradients that are zero in exact arithmetic (a bias feeding a
    /// train-mode batchnorm) compare rounding noise against rounding noise.
    pub floor: f64,
    pub bound: f64,
}

impl Tolerance {
    pub fn f32() -> Self {
        Tolerance {
            step: 1e-2,
            model_step: 1e-5,
            floor: 1e-2,
            bound: 1e-2,
        }
    }

    pub fn f64() -> Self {
        Tolerance {
            step: 1e-6,
            model_step: 1e-5,
            floor: 1e-4,
            bound: 1e-4,
        }
    }

    pub fn for_type<T: Real>() -> Self {
        if std::mem::size_of::<T>() == 8 {
            Self::f64()
        } else {
            Self::f32()
        }
    }
}

/// Worst relative error of one check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub seed: u64,
    pub max_rel_error: f64,
    /// `(input index, element)` of the worst element.
    pub worst: (usize, usize),
    pub elements: usize,
}

impl CheckReport {
    pub fn passed(&self, tol: &Tolerance) -> bool {
        self.max_rel_error < tol.bound
    }
}

/// Relative error of `a` against `n` with the floor scaled by `scale`.
pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    let d = (a - n).abs();
    if d == 0.0 {
        return 0.0;
    }
    d / a.abs().max(n.abs()).max(floor)
}

fn worst_of(samples: &[((usize, usize), f64, f64)], floor: f64) -> (f64, (usize, usize)) {
    let scale = samples.iter().fold(0.0f64, |m, s| m.max(s.2.abs()));
    let floor = (floor * scale).max(f64::MIN_POSITIVE);
    samples
        .iter()
        .map(|&(at, a, n)| (relative_error(a, n, floor), at))
        .fold((0.0, (0, 0)), |w, e| if e.0 > w.0 { e } else { w })
}

type Op<'a, T> = dyn Fn(&mut Tape<T>, &[Var]) -> Result<Var> + 'a;

fn probe_weights<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut r = rng(mix_seed(seed, 0x77));
    Tensor::from_fn(shape, |_| T::of(r.random_range(-1.0..1.0)))
}

fn probe<T: Real>(y: &Tensor<T>, w: &Tensor<T>) -> f64 {
    y.data().iter().zip(w.data()).map(|(a, b)| a.as_f64() * b.as_f64()).sum()
}

/// Checks `op` with respect to the inputs flagged in `differentiable`.
pub fn check_op<T: Real>(
    name: &str,
    seed: u64,
    inputs: &[Tensor<T>],
    differentiable: &[bool],
    op: &Op<'_, T>,
    step: f64,
    tol: &Tolerance,
) -> Result<CheckReport> {
    let eval = |xs: &[Tensor<T>]| -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let y = op(&mut tape, &vars)?;
        Ok(tape.value(y).clone())
    };
    let y0 = eval(inputs)?;
    let w = probe_weights::<T>(y0.shape(), seed);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(differentiable)
        .map(|(x, &d)| if d { tape.leaf(x.clone()) } else { tape.constant(x.clone()) })
        .collect();
    let y = op(&mut tape, &vars)?;
    let wv = tape.constant(w.clone());
    let prod = tape.mul(y, wv)?;
    let loss = tape.sum(prod);
    let grads = tape.backward(loss)?;

    let mut samples = Vec::new();
    let mut xs = inputs.to_vec();
    for (k, &d) in differentiable.iter().enumerate() {
        if !d {
            continue;
        }
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for j in 0..inputs[k].len() {
            let orig = inputs[k].data()[j];
            let (up, down) = (T::of(orig.as_f64() + step), T::of(orig.as_f64() - step));
            xs[k].data_mut()[j] = up;
            let lp = probe(&eval(&xs)?, &w);
            xs[k].data_mut()[j] = down;
            let lm = probe(&eval(&xs)?, &w);
            xs[k].data_mut()[j] = orig;
            // divide by the step actually taken after rounding to T
            samples.push(((k, j), analytic.data()[j].as_f64(), (lp - lm) / (up.as_f64() - down.as_f64())));
        }
    }
    let (max_rel_error, worst) = worst_of(&samples, tol.floor);
    Ok(CheckReport {
        name: name.to_string(),
        seed,
        max_rel_error,
        worst,
        elements: samples.len(),
    })
}

fn normal<T: Real>(shape: &[usize], r: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(r);
        T::of(z)
    })
}

/// Values at least `gap` away from zero, either sign.
fn away_from_zero<T: Real>(shape: &[usize], gap: f64, r: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let m = r.random_range(gap..2.0);
        T::of(if r.random_bool(0.5) { m } else { -m })
    })
}

/// Pairwise distinct values spaced 0.1 apart, in random order.
fn distinct<T: Real>(shape: &[usize], r: &mut impl Rng) -> Tensor<T> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(r);
    Tensor::new(shape, v.into_iter().map(|i| T::of(i as f64 * 0.1 - n as f64 * 0.05)).collect()).expect("shape")
}

/// Names of the primitive checks, in execution order.
pub const PRIMITIVES: [&str; 12] = [
    "conv3d_same",
    "conv3d_valid",
    "conv3d_strided",
    "conv_transpose3d",
    "maxpool3d",
    "batchnorm3d_train",
    "relu",
    "leaky_relu",
    "sigmoid",
    "bce_loss",
    "concat_crop",
    "pad_z_reflect",
];

/// Runs primitive `name` at `seed`.
pub fn check_primitive<T: Real>(name: &str, seed: u64, tol: &Tolerance) -> Result<CheckReport> {
    let mut r = rng(mix_seed(seed, crate::util::name_hash(name)));
    let same = ConvGeom::new([3; 3], 1, Padding::Same)?;
    let valid = ConvGeom::new([3; 3], 1, Padding::Valid)?;
    let strided = ConvGeom::new([3; 3], 2, Padding::Same)?;
    let all = |n: usize| vec![true; n];
    let h = tol.step;
    match name {
        "conv3d_same" => {
            let xs = [normal::<T>(&[2, 2, 4, 5, 3], &mut r), normal(&[3, 2, 3, 3, 3], &mut r), normal(&[3], &mut r)];
            check_op(name, seed, &xs, &all(3), &move |t, v| t.conv3d(v[0], v[1], Some(v[2]), same), h, tol)
        }
        "conv3d_valid" => {
            let xs = [normal::<T>(&[1, 2, 5, 6, 4], &mut r), normal(&[2, 2, 3, 3, 3], &mut r), normal(&[2], &mut r)];
            check_op(name, seed, &xs, &all(3), &move |t, v| t.conv3d(v[0], v[1], Some(v[2]), valid), h, tol)
        }
        "conv3d_strided" => {
            let xs = [normal::<T>(&[1, 2, 5, 4, 5], &mut r), normal(&[3, 2, 3, 3, 3], &mut r), normal(&[3], &mut r)];
            check_op(name, seed, &xs, &all(3), &move |t, v| t.conv3d(v[0], v[1], Some(v[2]), strided), h, tol)
        }
        "conv_transpose3d" => {
            let xs = [normal::<T>(&[1, 2, 2, 3, 2], &mut r), normal(&[2, 3, 2, 2, 2], &mut r), normal(&[3], &mut r)];
            check_op(name, seed, &xs, &all(3), &|t, v| t.conv_transpose3d(v[0], v[1], Some(v[2])), h, tol)
        }
        "maxpool3d" => {
            let xs = [distinct::<T>(&[1, 2, 4, 4, 6], &mut r)];
            check_op(name, seed, &xs, &all(1), &|t, v| t.maxpool3d(v[0]), h, tol)
        }
        "batchnorm3d_train" => {
            let xs = [
                normal::<T>(&[2, 3, 3, 4, 2], &mut r).map(|v| v * T::of(2.0) + T::of(0.5)),
                normal(&[3], &mut r),
                normal(&[3], &mut r),
            ];
            check_op(
                name,
                seed,
                &xs,
                &all(3),
                &|t, v| {
                    let mut state = BatchNormState::<T>::new(3);
                    t.batchnorm3d(v[0], v[1], v[2], &mut state, Mode::Train)
                },
                h,
                tol,
            )
        }
        "relu" => {
            let xs = [away_from_zero::<T>(&[4, 15], 0.1, &mut r)];
            check_op(name, seed, &xs, &all(1), &|t, v| Ok(t.relu(v[0])), h, tol)
        }
        "leaky_relu" => {
            let xs = [away_from_zero::<T>(&[4, 15], 0.1, &mut r)];
            check_op(name, seed, &xs, &all(1), &|t, v| Ok(t.leaky_relu(v[0], 0.2)), h, tol)
        }
        "sigmoid" => {
            let xs = [Tensor::from_fn(&[60], |_| T::of(r.random_range(-4.0..4.0)))];
            check_op(name, seed, &xs, &all(1), &|t, v| Ok(t.sigmoid(v[0])), h, tol)
        }
        "bce_loss" => {
            let q = Tensor::from_fn(&[2, 4], |_| T::of(r.random_range(0.05..0.95)));
            let p = Tensor::from_fn(&[2, 4], |_| T::of(r.random_range(0.0..1.0)));
            check_op(name, seed, &[q, p], &[true, false], &|t, v| t.bce(v[0], v[1]), h / 4.0, tol)
        }
        "concat_crop" => {
            let xs = [normal::<T>(&[1, 2, 4, 5, 3], &mut r), normal(&[1, 1, 4, 5, 3], &mut r)];
            check_op(
                name,
                seed,
                &xs,
                &all(2),
                &|t, v| {
                    let c = t.concat(v[0], v[1])?;
                    t.crop(c, [1, 1, 0], [2, 3, 3])
                },
                h,
                tol,
            )
        }
        "pad_z_reflect" => {
            let xs = [normal::<T>(&[1, 2, 3, 2, 2], &mut r)];
            check_op(name, seed, &xs, &all(1), &|t, v| t.pad_z_reflect(v[0], 2, 1), h, tol)
        }
        _ => Err(crate::Error::Config(format!("unknown gradient check {name:?}"))),
    }
}

/// Parameter elements checked per tensor in the whole-model check; smaller
/// tensors are checked in full.
pub const MODEL_SAMPLES_PER_TENSOR: usize = 48;

/// Smallest step the whole-model check refines to.
pub const MODEL_MIN_STEP: f64 = 1e-7;

/// Whole-network check: BCE of a residual U-Net (depth 3, two residual
/// blocks per level) on a 16×16×9 input in train mode. Every parameter
/// tensor is checked, up to [`MODEL_SAMPLES_PER_TENSOR`] random elements each.
///
/// Gradients come from the network at precision `T`; the reference
/// differences come from a 64-bit copy of it, since accumulated rounding in
/// a 32-bit forward pass swamps the small gradients of deep layers. A relu
/// or max-pool kink inside the stencil shows up as disagreement between the
/// differences at `h` and `h/2`; the step is then divided by ten, down to
/// [`MODEL_MIN_STEP`].
pub fn check_model<T: Real>(seed: u64, base_channels: usize, step: f64, tol: &Tolerance) -> Result<CheckReport> {
    use rand::seq::index::sample;

    let cfg = ModelConfig::m3(base_channels).with_input([16, 16, 9]);
    let model = build_model::<T>(&cfg, seed)?;
    let mut r = rng(mix_seed(seed, 0x51));
    let input = Tensor::from_fn(&model.input_dims(1), |_| T::of(r.random_range(0.0..1.0)));
    let target = Tensor::from_fn(&model.output_dims(1), |_| T::of(r.random_range(0.0..1.0)));

    let mut m = model.clone();
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let f = m.forward(&mut tape, x, Mode::Train)?;
    let t = tape.constant(target.clone());
    let loss = tape.bce(f.output, t)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<T>> = (0..model.params().len())
        .map(|k| grads.get(f.params.var(k)).cloned().expect("every parameter reaches the loss"))
        .collect();
    let scale = analytic.iter().map(|g| g.max_abs().as_f64()).fold(0.0, f64::max);
    let floor = (tol.floor * scale).max(f64::MIN_POSITIVE);

    let reference: Model<f64> = model.cast();
    let (input, target) = (input.cast::<f64>(), target.cast::<f64>());
    let loss_at = |k: usize, j: usize, delta: f64| -> Result<f64> {
        let mut m = reference.clone();
        m.params_mut().at_mut(k).value.data_mut()[j] += delta;
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let f = m.forward_with(&mut tape, x, Mode::Train, false)?;
        let t = tape.constant(target.clone());
        let l = tape.bce(f.output, t)?;
        Ok(tape.value(l).item())
    };
    let central = |k: usize, j: usize, h: f64| -> Result<f64> { Ok((loss_at(k, j, h)? - loss_at(k, j, -h)?) / (2.0 * h)) };

    // the reference is 64-bit whatever T is, so it is held to the 64-bit bound
    let agree = Tolerance::f64().bound / 4.0;
    let mut samples = Vec::new();
    for (k, g) in analytic.iter().enumerate() {
        let n = g.len();
        let mut picks = sample(&mut r, n, n.min(MODEL_SAMPLES_PER_TENSOR)).into_vec();
        picks.sort_unstable();
        for j in picks {
            let mut h = step;
            let mut coarse = central(k, j, h)?;
            let numeric = loop {
                let fine = central(k, j, h / 2.0)?;
                if relative_error(coarse, fine, floor) < agree || h / 10.0 < MODEL_MIN_STEP {
                    break fine;
                }
                h /= 10.0;
                coarse = central(k, j, h)?;
            };
            samples.push(((k, j), g.data()[j].as_f64(), numeric));
        }
    }
    let max_rel_error = samples.iter().map(|s| (relative_error(s.1, s.2, floor), s.0));
    let (max_rel_error, worst) = max_rel_error.fold((0.0, (0, 0)), |w, e| if e.0 > w.0 { e } else { w });
    Ok(CheckReport {
        name: format!("model_m3_16x16x9_base{base_channels}"),
        seed,
        max_rel_error,
        worst,
        elements: samples.len(),
    })
}

/// Every primitive on `seeds` seeds plus the whole-model check.
pub fn run_suite<T: Real>(seeds: u64, model_base: usize) -> Result<Vec<CheckReport>> {
    let tol = Tolerance::for_type::<T>();
    let mut out = Vec::new();
    for name in PRIMITIVES {
        for s in 0..seeds {
            out.push(check_primitive::<T>(name, s, &tol)?);
        }
    }
    out.push(check_model::<T>(0, model_base, tol.model_step, &tol)?);
    Ok(out)
}
