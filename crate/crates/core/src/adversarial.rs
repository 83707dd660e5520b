//! Wasserstein critic with weight clipping, used to regularize the
//! segmentation output towards the annotation distribution.

use serde::{Deserialize, Serialize};

use crate::autograd::{Mode, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::kernels::{ConvGeom, Padding};
use crate::nn::{he_normal, BoundParams, Model, ParamStore};
use crate::optim::{adam_step, AdamState, OptimConfig};
use crate::tensor::{Real, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CriticConfig {
    /// Strided convolution stages.
    pub levels: usize,
    pub base_channels: usize,
    pub clip_value: f64,
    pub critic_steps_per_generator_step: usize,
    /// Weight of the adversarial term in the generator loss.
    pub lambda_adv: f64,
    pub learning_rate: f64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        CriticConfig {
            levels: 4,
            base_channels: 8,
            clip_value: 0.01,
            critic_steps_per_generator_step: 5,
            lambda_adv: 0.01,
            learning_rate: 1e-4,
        }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 || self.base_channels < 1 {
            return Err(Error::Config("critic needs at least one level and one channel".into()));
        }
        if !(self.clip_value > 0.0) {
            return Err(Error::Config(format!("clip_value must be > 0, got {}", self.clip_value)));
        }
        if self.critic_steps_per_generator_step < 1 {
            return Err(Error::Config("critic_steps_per_generator_step must be >= 1".into()));
        }
        if !(self.lambda_adv >= 0.0) {
            return Err(Error::Config(format!("lambda_adv must be >= 0, got {}", self.lambda_adv)));
        }
        Ok(())
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            learning_rate: self.learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        }
    }
}

/// Critic: `levels` stride-2 3×3×3 convolutions with leaky relu, a 1×1×1
/// projection to one channel and a global mean. No normalization layers.
#[derive(Clone, Debug)]
pub struct Critic<T: Real = f32> {
    config: CriticConfig,
    params: ParamStore<T>,
    strided: ConvGeom,
    point: ConvGeom,
}

impl<T: Real> Critic<T> {
    pub fn new(config: CriticConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut cin = 2;
        for i in 0..config.levels {
            let c = config.base_channels << i;
            let name = format!("critic.conv{i}.weight");
            params.add(&name, he_normal(&[c, cin, 3, 3, 3], cin * 27, seed, &name))?;
            params.add(format!("critic.conv{i}.bias"), Tensor::zeros(&[c]))?;
            cin = c;
        }
        params.add("critic.out.weight", he_normal(&[1, cin, 1, 1, 1], cin, seed, "critic.out.weight"))?;
        params.add("critic.out.bias", Tensor::zeros(&[1]))?;
        let mut critic = Critic {
            config,
            params,
            strided: ConvGeom::new([3; 3], 2, Padding::Same)?,
            point: ConvGeom::new([1; 3], 1, Padding::Same)?,
        };
        critic.clip();
        Ok(critic)
    }

    pub fn config(&self) -> &CriticConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Clamps every parameter into `[-clip, clip]`.
    pub fn clip(&mut self) {
        let c = T::of(self.config.clip_value);
        for p in self.params.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = v.max(-c).min(c));
        }
    }

    /// Largest absolute parameter value.
    pub fn max_abs_weight(&self) -> f64 {
        self.params.iter().map(|p| p.value.max_abs().as_f64()).fold(0.0, f64::max)
    }

    /// Records the critic on `tape`. `image` and `mask` are `[N, 1, Z, H, W]`;
    /// the result is one score per sample, `[N]`.
    pub fn forward(&self, tape: &mut Tape<T>, p: &BoundParams, image: Var, mask: Var) -> Result<Var> {
        let (si, sm) = (tape.value(image).shape(), tape.value(mask).shape());
        if si != sm || si.len() != 5 || si[1] != 1 {
            return Err(shape_err!("critic needs two aligned [N, 1, Z, H, W] inputs, got {si:?} and {sm:?}"));
        }
        let mut x = tape.concat(image, mask)?;
        for i in 0..self.config.levels {
            x = tape.conv3d(x, p.var(2 * i), Some(p.var(2 * i + 1)), self.strided)?;
            x = tape.leaky_relu(x, LEAKY_SLOPE);
        }
        let l = self.config.levels;
        x = tape.conv3d(x, p.var(2 * l), Some(p.var(2 * l + 1)), self.point)?;
        Ok(tape.mean_per_sample(x))
    }

    /// Scores without recording gradients.
    pub fn score(&self, image: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let (i, m) = (tape.constant(image.clone()), tape.constant(mask.clone()));
        let s = self.forward(&mut tape, &p, i, m)?;
        Ok(tape.value(s).clone())
    }
}

/// Loss terms of one adversarial step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WganReport {
    pub bce: f64,
    /// `−mean(score(fake))` as seen by the generator.
    pub adversarial: f64,
    /// `mean(score(real)) − mean(score(fake))` at the last critic step.
    pub wasserstein: f64,
    pub total: f64,
}

/// Optimizer state for both networks of an adversarial run.
#[derive(Clone, Debug)]
pub struct WganState<T: Real = f32> {
    pub generator: AdamState<T>,
    pub critic: AdamState<T>,
}

fn finite(what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} ({v})")))
    }
}

/// One generator update preceded by `critic_steps_per_generator_step`
/// critic updates on the generator's current prediction. The generator
/// minimizes `bce + λ·(−mean(score(fake)))`; with `λ = 0` the adversarial
/// term is left off the tape entirely. Gradients of the last update stay in
/// the parameter slots.
pub fn wgan_train_step<T: Real>(
    generator: &mut Model<T>,
    critic: &mut Critic<T>,
    state: &mut WganState<T>,
    gen_cfg: &OptimConfig,
    image: &Tensor<T>,
    target: &Tensor<T>,
) -> Result<WganReport> {
    let lambda = critic.config.lambda_adv;
    let mut tape = Tape::new();
    let x = tape.constant(image.clone());
    let fwd = generator.forward(&mut tape, x, Mode::Train)?;
    let pred = fwd.output;
    let fake = tape.value(pred).clone();

    let ccfg = critic.config.optim();
    let mut wasserstein = 0.0;
    for _ in 0..critic.config.critic_steps_per_generator_step {
        let mut ct = Tape::new();
        let cp = critic.params.bind(&mut ct, true);
        let (ci, cr, cf) = (ct.constant(image.clone()), ct.constant(target.clone()), ct.constant(fake.clone()));
        let real = critic.forward(&mut ct, &cp, ci, cr)?;
        let fake_s = critic.forward(&mut ct, &cp, ci, cf)?;
        let (mr, mf) = (ct.mean(real), ct.mean(fake_s));
        let loss = ct.sub(mf, mr)?;
        wasserstein = finite("critic loss", -ct.value(loss).item().as_f64())?;
        let grads = ct.backward(loss)?;
        critic.params.zero_grad();
        critic.params.accumulate(&grads, &cp)?;
        adam_step(&mut critic.params, &mut state.critic, &ccfg)?;
        critic.clip();
    }

    let t = tape.constant(target.clone());
    let bce = tape.bce(pred, t)?;
    let bce_v = finite("bce loss", tape.value(bce).item().as_f64())?;
    let (loss, adversarial) = if lambda > 0.0 {
        let cp = critic.params.bind(&mut tape, false);
        let s = critic.forward(&mut tape, &cp, x, pred)?;
        let m = tape.mean(s);
        let adv = tape.scale(m, -1.0);
        let adv_v = tape.value(adv).item().as_f64();
        let weighted = tape.scale(adv, lambda);
        (tape.add(bce, weighted)?, adv_v)
    } else {
        let adv_v = -critic.score(image, &fake)?.data().iter().map(|v| v.as_f64()).sum::<f64>() / fake.shape()[0] as f64;
        (bce, adv_v)
    };
    let total = finite("generator loss", tape.value(loss).item().as_f64())?;
    let grads = tape.backward(loss)?;
    generator.params_mut().zero_grad();
    generator.params_mut().accumulate(&grads, &fwd.params)?;
    adam_step(generator.params_mut(), &mut state.generator, gen_cfg)?;
    Ok(WganReport {
        bce: bce_v,
        adversarial,
        wasserstein,
        total,
    })
}
