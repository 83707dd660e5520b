//! Synthetic layered phantoms with dark fluid-like pockets.
//!
//! The background is a stack of horizontal bands along y with gently
//! curved boundaries and distinct mean intensities. Pockets are
//! hypointense ellipsoids placed inside the central bands; their union is
//! the ground-truth mask. Gaussian noise is added and the result clamped
//! to `[0, 1]`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::rng;
use crate::volume::{Dims, MaskVolume, Volume};

const BAND_MEANS: [f32; 6] = [0.25, 0.7, 0.5, 0.85, 0.6, 0.4];
const POCKET_MEAN: f32 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub dims: Dims,
    pub layer_count: usize,
    /// Inclusive range of pocket counts.
    pub pocket_count: [usize; 2],
    /// Range of in-plane (x, y) radii in voxels; the z radius is scaled by
    /// `Z / W` so pockets keep their shape when a volume is resized
    /// isotropically in normalized coordinates.
    pub pocket_radius: [f64; 2],
    pub noise_sigma: f64,
}

impl PhantomSpec {
    /// Defaults scaled to `dims`.
    pub fn new(seed: u64, dims: Dims) -> Self {
        let w = dims.w as f64;
        PhantomSpec {
            seed,
            dims,
            layer_count: 6,
            pocket_count: [1, 3],
            pocket_radius: [(0.08 * w).max(1.5), (0.16 * w).max(2.0)],
            noise_sigma: 0.05,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::Config(format!("phantom dims must be positive, got {}", self.dims)));
        }
        if self.layer_count < 3 {
            return Err(Error::Config("phantoms need at least 3 layers".into()));
        }
        if self.pocket_count[0] > self.pocket_count[1] {
            return Err(Error::Config(format!("empty pocket_count range {:?}", self.pocket_count)));
        }
        let [lo, hi] = self.pocket_radius;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("bad pocket_radius range {:?}", self.pocket_radius)));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Pocket {
    c: [f64; 3],
    r: [f64; 3],
}

impl Pocket {
    fn contains(&self, x: f64, y: f64, z: f64) -> bool {
        let q = [(x - self.c[0]) / self.r[0], (y - self.c[1]) / self.r[1], (z - self.c[2]) / self.r[2]];
        q.iter().map(|v| v * v).sum::<f64>() <= 1.0
    }
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, MaskVolume)> {
    spec.validate()?;
    let d = spec.dims;
    let mut r = rng(spec.seed);
    let (w, h, zn) = (d.w as f64, d.h as f64, d.z as f64);
    let band = h / spec.layer_count as f64;
    let amp = 0.03 * h;
    let phase: f64 = r.random_range(0.0..std::f64::consts::TAU);
    let freq: f64 = r.random_range(0.5..1.5);
    let means: Vec<f32> = (0..spec.layer_count)
        .map(|i| BAND_MEANS[i % BAND_MEANS.len()] + r.random_range(-0.03..0.03))
        .collect();

    // Central region: all bands but the first and last, minus curvature.
    let (y_lo, y_hi) = (band + amp, h - band - amp);
    let n_pockets = r.random_range(spec.pocket_count[0]..=spec.pocket_count[1]);
    let mut pockets = Vec::with_capacity(n_pockets);
    for _ in 0..n_pockets {
        let rxy = |r: &mut rand_chacha::ChaCha8Rng| r.random_range(spec.pocket_radius[0]..=spec.pocket_radius[1]);
        let rx = rxy(&mut r).min(0.5 * (w - 1.0));
        let ry = rxy(&mut r).min(0.5 * (y_hi - y_lo)).max(0.5);
        let rz = (rxy(&mut r) * zn / w).max(1.0).min(0.5 * (zn - 1.0).max(1.0));
        let span = |lo: f64, hi: f64, r: &mut rand_chacha::ChaCha8Rng| {
            if hi > lo {
                r.random_range(lo..hi)
            } else {
                0.5 * (lo + hi)
            }
        };
        let c = [
            span(rx, w - 1.0 - rx, &mut r),
            span(y_lo + ry, y_hi - ry, &mut r),
            span(rz, zn - 1.0 - rz, &mut r),
        ];
        pockets.push(Pocket { c, r: [rx, ry, rz] });
    }

    let noise = Normal::new(0.0, spec.noise_sigma).expect("sigma validated");
    let mut image = Vec::with_capacity(d.len());
    let mut mask = Vec::with_capacity(d.len());
    for z in 0..d.z {
        for y in 0..d.h {
            for x in 0..d.w {
                let (xf, yf, zf) = (x as f64, y as f64, z as f64);
                let shift = amp * (std::f64::consts::TAU * freq * xf / w + phase + 0.3 * zf / zn).sin();
                let b = (((yf - shift) / band).floor().max(0.0) as usize).min(spec.layer_count - 1);
                let inside = pockets.iter().any(|p| p.contains(xf, yf, zf));
                let base = if inside { POCKET_MEAN } else { means[b] };
                let n: f64 = noise.sample(&mut r);
                image.push((base + n as f32).clamp(0.0, 1.0));
                mask.push(if inside { 1.0 } else { 0.0 });
            }
        }
    }
    Ok((Volume::new(d, image)?, MaskVolume::new(d, mask)?))
}
