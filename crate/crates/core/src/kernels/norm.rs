use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPS: f64 = 1e-5;

/// Running statistics of one batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T = f32> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn cast<U: Real>(&self) -> BatchNormState<U> {
        BatchNormState {
            running_mean: self.running_mean.iter().map(|v| U::of(v.as_f64())).collect(),
            running_var: self.running_var.iter().map(|v| U::of(v.as_f64())).collect(),
            momentum: self.momentum,
            eps: self.eps,
        }
    }
}

/// Values a train-mode forward pass keeps for its backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

fn check<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<[usize; 5]> {
    let dims = x.dims5()?;
    let c = dims[1];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err!(
            "batchnorm3d affine parameters {:?}/{:?} do not match {c} channels of {:?}",
            gamma.shape(),
            beta.shape(),
            x.shape()
        ));
    }
    Ok(dims)
}

/// Normalizes each channel over (N, D, H, W) with batch statistics and
/// folds them into the running estimates. Moments are accumulated in f64.
pub fn batchnorm_train_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &mut BatchNormState<T>,
) -> Result<(Tensor<T>, BatchNormSaved<T>)> {
    let [n, c, d, h, w] = check(x, gamma, beta)?;
    if state.channels() != c {
        return Err(shape_err!(
            "batchnorm state has {} channels, input has {c}",
            state.channels()
        ));
    }
    let plane = d * h * w;
    let m = n * plane;
    if m < 2 {
        return Err(Error::Config(format!(
            "train-mode batchnorm needs at least 2 values per channel, input {:?}",
            x.shape()
        )));
    }
    let src = x.data();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); c];
    for ch in 0..c {
        let blocks = || (0..n).map(move |s| (s * c + ch) * plane);
        let mut sum = 0.0;
        for b in blocks() {
            sum += src[b..b + plane].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mean = sum / m as f64;
        let mut sq = 0.0;
        for b in blocks() {
            sq += src[b..b + plane]
                .iter()
                .map(|v| {
                    let t = v.as_f64() - mean;
                    t * t
                })
                .sum::<f64>();
        }
        let var = sq / m as f64;
        let istd = 1.0 / (var + state.eps).sqrt();
        inv_std[ch] = T::of(istd);
        let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
        let (mean_t, istd_t) = (T::of(mean), T::of(istd));
        for b in blocks() {
            for i in b..b + plane {
                let xh = (src[i] - mean_t) * istd_t;
                xhat[i] = xh;
                y[i] = g * xh + bt;
            }
        }
        let mo = state.momentum;
        let unbiased = sq / (m - 1) as f64;
        state.running_mean[ch] = T::of((1.0 - mo) * state.running_mean[ch].as_f64() + mo * mean);
        state.running_var[ch] = T::of((1.0 - mo) * state.running_var[ch].as_f64() + mo * unbiased);
    }
    Ok((Tensor::new(x.shape(), y)?, BatchNormSaved { xhat, inv_std }))
}

/// Affine normalization with the running statistics; a pure function.
pub fn batchnorm_eval_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &BatchNormState<T>,
) -> Result<(Tensor<T>, Vec<T>)> {
    let [n, c, d, h, w] = check(x, gamma, beta)?;
    let plane = d * h * w;
    let mut y = x.clone();
    let mut inv_std = Vec::with_capacity(c);
    for ch in 0..c {
        let istd = T::of(1.0 / (state.running_var[ch].as_f64() + state.eps).sqrt());
        inv_std.push(istd);
        let (g, bt, mu) = (gamma.data()[ch], beta.data()[ch], state.running_mean[ch]);
        for s in 0..n {
            let b = (s * c + ch) * plane;
            for v in &mut y.data_mut()[b..b + plane] {
                *v = g * ((*v - mu) * istd) + bt;
            }
        }
    }
    Ok((y, inv_std))
}

/// Backward of the train-mode forward: returns (dx, dgamma, dbeta).
pub fn batchnorm_train_backward<T: Real>(
    dy: &Tensor<T>,
    gamma: &Tensor<T>,
    saved: &BatchNormSaved<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [n, c, d, h, w] = dy.dims5()?;
    let plane = d * h * w;
    let m = (n * plane) as f64;
    let g = dy.data();
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for s in 0..n {
            let b = (s * c + ch) * plane;
            for i in b..b + plane {
                sum_dy += g[i].as_f64();
                sum_dy_xhat += (g[i] * saved.xhat[i]).as_f64();
            }
        }
        dgamma[ch] = T::of(sum_dy_xhat);
        dbeta[ch] = T::of(sum_dy);
        let gm = gamma.data()[ch];
        let scale = gm * saved.inv_std[ch];
        let mean_dy = T::of(sum_dy / m);
        let mean_dy_xhat = T::of(sum_dy_xhat / m);
        for s in 0..n {
            let b = (s * c + ch) * plane;
            for i in b..b + plane {
                dx[i] = scale * (g[i] - mean_dy - saved.xhat[i] * mean_dy_xhat);
            }
        }
    }
    Ok((
        Tensor::new(dy.shape(), dx)?,
        Tensor::new(&[c], dgamma)?,
        Tensor::new(&[c], dbeta)?,
    ))
}

/// Backward of the eval-mode affine map: returns (dx, dgamma, dbeta).
pub fn batchnorm_eval_backward<T: Real>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    gamma: &Tensor<T>,
    state: &BatchNormState<T>,
    inv_std: &[T],
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [n, c, d, h, w] = dy.dims5()?;
    let plane = d * h * w;
    let mut dx = dy.clone();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let scale = gamma.data()[ch] * inv_std[ch];
        let mu = state.running_mean[ch];
        for s in 0..n {
            let b = (s * c + ch) * plane;
            for i in b..b + plane {
                let gy = dy.data()[i];
                dgamma[ch] += gy * (x.data()[i] - mu) * inv_std[ch];
                dbeta[ch] += gy;
                dx.data_mut()[i] = gy * scale;
            }
        }
    }
    Ok((dx, Tensor::new(&[c], dgamma)?, Tensor::new(&[c], dbeta)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i * 7919) % 23) as f64 * 0.3 - 2.0)
    }

    #[test]
    fn train_mode_normalizes() {
        let x = ramp(&[2, 3, 2, 3, 4]);
        let mut st = BatchNormState::new(3);
        let (y, _) = batchnorm_train_forward(&x, &Tensor::ones(&[3]), &Tensor::zeros(&[3]), &mut st).unwrap();
        let plane = 24;
        for ch in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|s| y.data()[(s * 3 + ch) * plane..(s * 3 + ch + 1) * plane].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
        assert!(st.running_var.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let x = ramp(&[1, 2, 2, 2, 2]);
        let beta = Tensor::new(&[2], vec![0.25, -1.5]).unwrap();
        let mut st = BatchNormState::new(2);
        let (y, _) = batchnorm_train_forward(&x, &Tensor::zeros(&[2]), &beta, &mut st).unwrap();
        assert!(y.data()[..8].iter().all(|&v| v == 0.25));
        assert!(y.data()[8..].iter().all(|&v| v == -1.5));
    }

    #[test]
    fn constant_channel_stays_finite() {
        let x = Tensor::<f32>::full(&[1, 1, 2, 2, 2], 4.0);
        let mut st = BatchNormState::new(1);
        let (y, _) = batchnorm_train_forward(&x, &Tensor::ones(&[1]), &Tensor::zeros(&[1]), &mut st).unwrap();
        assert!(y.all_finite());
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_value_rejected_in_train_mode() {
        let x = Tensor::<f32>::full(&[1, 1, 1, 1, 1], 4.0);
        let mut st = BatchNormState::new(1);
        assert!(batchnorm_train_forward(&x, &Tensor::ones(&[1]), &Tensor::zeros(&[1]), &mut st).is_err());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let x = Tensor::<f64>::new(&[1, 1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let mut st = BatchNormState::new(1);
        batchnorm_train_forward(&x, &Tensor::ones(&[1]), &Tensor::zeros(&[1]), &mut st).unwrap();
        assert!((st.running_mean[0] - 0.2).abs() < 1e-12);
        // unbiased variance 2.0
        assert!((st.running_var[0] - (0.9 + 0.2)).abs() < 1e-12);
    }
}
