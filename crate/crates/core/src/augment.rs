//! 3-D augmentation: scale-up, crop, elastic deformation, and the uniform
//! sampler that expands a training set.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resample::{resample_mask_soft, resample_trilinear, sample_nearest, sample_trilinear, threshold_mask, THRESHOLD};
use crate::util::{mix_seed, reflect_index, rng};
use crate::volume::{Dims, MaskVolume, Volume};

pub const MAX_SCALE: f64 = 4.0;
/// Default cap on voxels produced by one scale-up.
pub const DEFAULT_VOXEL_BUDGET: usize = 1 << 25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElasticParams {
    /// Displacement standard deviation in voxels.
    pub sigma: f64,
    /// Control points per axis.
    pub points: usize,
}

impl Default for ElasticParams {
    fn default() -> Self {
        ElasticParams { sigma: 10.0, points: 6 }
    }
}

impl ElasticParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("elastic sigma must be >= 0, got {}", self.sigma)));
        }
        if self.points < 2 {
            return Err(Error::Config(format!("elastic points must be >= 2, got {}", self.points)));
        }
        Ok(())
    }
}

/// Axis-aligned voxel box; the origin may lie outside the source, in which
/// case samples are mirrored back in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    /// (x, y, z) of the first voxel.
    pub origin: [isize; 3],
    /// (W, H, Z) of the box.
    pub size: [usize; 3],
}

impl CropBox {
    pub fn full(d: Dims) -> Self {
        CropBox {
            origin: [0; 3],
            size: d.to_array(),
        }
    }

    pub fn inside(&self, d: Dims) -> bool {
        let ext = d.to_array();
        (0..3).all(|i| self.origin[i] >= 0 && self.origin[i] as usize + self.size[i] <= ext[i])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    ScaleUp,
    Crop,
    Elastic,
    None,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 4] = [AugmentKind::ScaleUp, AugmentKind::Crop, AugmentKind::Elastic, AugmentKind::None];
}

/// One sampled transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentationSpec {
    ScaleUp { factor: f64 },
    Crop { crop: CropBox },
    Elastic { seed: u64, params: ElasticParams },
    None,
}

impl AugmentationSpec {
    pub fn kind(&self) -> AugmentKind {
        match self {
            AugmentationSpec::ScaleUp { .. } => AugmentKind::ScaleUp,
            AugmentationSpec::Crop { .. } => AugmentKind::Crop,
            AugmentationSpec::Elastic { .. } => AugmentKind::Elastic,
            AugmentationSpec::None => AugmentKind::None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub multiplicity: usize,
    pub elastic: ElasticParams,
    pub voxel_budget: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            multiplicity: 16,
            elastic: ElasticParams::default(),
            voxel_budget: DEFAULT_VOXEL_BUDGET,
        }
    }
}

fn min_extent(e: usize) -> usize {
    e.div_ceil(4).max(1)
}

/// Extents of a grid whose x extent is `sx`, with y and z following the
/// source aspect ratios.
fn follow_aspect(sx: usize, d: Dims, lo: [usize; 3], hi: [usize; 3]) -> [usize; 3] {
    let r = |e: usize| (sx as f64 * e as f64 / d.w as f64).round() as usize;
    [sx, r(d.h).clamp(lo[1], hi[1]), r(d.z).clamp(lo[2], hi[2])]
}

/// Scale-up output extents: x is `round(factor·W)` and y, z keep the
/// source aspect ratios to within half a voxel.
pub fn scaled_dims(d: Dims, factor: f64) -> Dims {
    let sx = (factor * d.w as f64).round().max(1.0) as usize;
    Dims::from_array(follow_aspect(sx, d, [1; 3], [usize::MAX; 3]))
}

/// Draws one of the four transforms with equal probability.
pub fn sample_spec(r: &mut ChaCha8Rng, source: Dims, elastic: ElasticParams) -> AugmentationSpec {
    match r.random_range(0..4u32) {
        0 => AugmentationSpec::ScaleUp {
            factor: r.random_range(1.0..=MAX_SCALE),
        },
        1 => {
            let ext = source.to_array();
            let lo = ext.map(min_extent);
            let sx = r.random_range(lo[0]..=ext[0]);
            let size = follow_aspect(sx, source, lo, ext);
            let origin = [0, 1, 2].map(|i| r.random_range(0..=ext[i] - size[i]) as isize);
            AugmentationSpec::Crop {
                crop: CropBox { origin, size },
            }
        }
        2 => AugmentationSpec::Elastic {
            seed: r.random(),
            params: elastic,
        },
        _ => AugmentationSpec::None,
    }
}

/// Checks the sampler invariants of `spec` for a source of extents `d`.
pub fn validate_spec(spec: &AugmentationSpec, d: Dims) -> Result<()> {
    let aspect = |size: [usize; 3]| -> Result<()> {
        for (i, e) in [(1, d.h), (2, d.z)] {
            let exact = size[0] as f64 * e as f64 / d.w as f64;
            if (size[i] as f64 - exact).abs() > 1.0 {
                return Err(Error::Config(format!(
                    "extents {size:?} break the source aspect of {d} by more than one voxel"
                )));
            }
        }
        Ok(())
    };
    match *spec {
        AugmentationSpec::ScaleUp { factor } => {
            if !(1.0..=MAX_SCALE).contains(&factor) {
                return Err(Error::Config(format!("scale factor {factor} outside [1, {MAX_SCALE}]")));
            }
            aspect(scaled_dims(d, factor).to_array())
        }
        AugmentationSpec::Crop { crop } => {
            if !crop.inside(d) {
                return Err(Error::Config(format!("crop {crop:?} leaves the source {d}")));
            }
            for (i, e) in d.to_array().into_iter().enumerate() {
                if crop.size[i] < min_extent(e) || crop.size[i] > e {
                    return Err(Error::Config(format!("crop size {:?} outside [1/4, 1] of {d}", crop.size)));
                }
            }
            aspect(crop.size)
        }
        AugmentationSpec::Elastic { params, .. } => params.validate(),
        AugmentationSpec::None => Ok(()),
    }
}

/// Resamples image and mask onto the grid scaled by `factor`. The mask is
/// interpolated trilinearly and thresholded at 0.5.
pub fn apply_scale_up(image: &Volume, mask: &MaskVolume, factor: f64, budget: usize) -> Result<(Volume, MaskVolume)> {
    if !(1.0..=MAX_SCALE).contains(&factor) {
        return Err(Error::Config(format!("scale factor {factor} outside [1, {MAX_SCALE}]")));
    }
    same_dims(image, mask)?;
    let target = scaled_dims(image.dims(), factor);
    if target == image.dims() {
        return Ok((image.clone(), mask.clone()));
    }
    if target.len() > budget {
        return Err(Error::Budget {
            requested: target.len(),
            limit: budget,
        });
    }
    let m = threshold_mask(&resample_mask_soft(mask, target), THRESHOLD);
    Ok((resample_trilinear(image, target), m))
}

/// Extracts `crop`, mirroring coordinates that fall outside the source.
pub fn apply_crop(image: &Volume, mask: &MaskVolume, crop: CropBox) -> Result<(Volume, MaskVolume)> {
    same_dims(image, mask)?;
    if crop.size.contains(&0) {
        return Err(Error::Config(format!("degenerate crop size {:?}", crop.size)));
    }
    let d = image.dims();
    let out = Dims::from_array(crop.size);
    let axis = |o: isize, n: usize, e: usize| -> Vec<usize> { (0..n).map(|i| reflect_index(o + i as isize, e)).collect() };
    let xs = axis(crop.origin[0], out.w, d.w);
    let ys = axis(crop.origin[1], out.h, d.h);
    let zs = axis(crop.origin[2], out.z, d.z);
    let gather = |src: &[f32]| {
        let mut v = Vec::with_capacity(out.len());
        for &z in &zs {
            for &y in &ys {
                v.extend(xs.iter().map(|&x| src[d.index(x, y, z)]));
            }
        }
        v
    };
    Ok((Volume::new(out, gather(image.voxels()))?, MaskVolume::new(out, gather(mask.voxels()))?))
}

/// Dense displacement field, `[dx, dy, dz]` per voxel, interpolated
/// trilinearly from a `points³` grid of N(0, sigma²) control vectors that
/// spans the volume corner to corner.
pub fn displacement_field(d: Dims, params: ElasticParams, seed: u64) -> Result<Vec<[f32; 3]>> {
    params.validate()?;
    let p = params.points;
    let mut r = rng(seed);
    let normal = Normal::new(0.0, params.sigma).expect("sigma validated");
    let grid: Vec<f32> = (0..p * p * p * 3).map(|_| normal.sample(&mut r) as f32).collect();
    let gdims = Dims::new(p, p, p);
    let comp: Vec<Vec<f32>> = (0..3).map(|c| grid.iter().skip(c).step_by(3).copied().collect()).collect();
    let scale = |e: usize| if e > 1 { (p - 1) as f64 / (e - 1) as f64 } else { 0.0 };
    let (sx, sy, sz) = (scale(d.w), scale(d.h), scale(d.z));
    let mut field = Vec::with_capacity(d.len());
    for z in 0..d.z {
        for y in 0..d.h {
            for x in 0..d.w {
                let (gx, gy, gz) = (x as f64 * sx, y as f64 * sy, z as f64 * sz);
                field.push([0, 1, 2].map(|c| sample_trilinear(&comp[c], gdims, gx, gy, gz)));
            }
        }
    }
    Ok(field)
}

/// Warps the image trilinearly and the mask by nearest neighbour through
/// the same seeded displacement field.
pub fn elastic_deform(image: &Volume, mask: &MaskVolume, params: ElasticParams, seed: u64) -> Result<(Volume, MaskVolume)> {
    same_dims(image, mask)?;
    let d = image.dims();
    let field = displacement_field(d, params, seed)?;
    let mut iv = Vec::with_capacity(d.len());
    let mut mv = Vec::with_capacity(d.len());
    let mut i = 0;
    for z in 0..d.z {
        for y in 0..d.h {
            for x in 0..d.w {
                let [dx, dy, dz] = field[i];
                let (sx, sy, sz) = (x as f64 + dx as f64, y as f64 + dy as f64, z as f64 + dz as f64);
                iv.push(sample_trilinear(image.voxels(), d, sx, sy, sz));
                mv.push(sample_nearest(mask.voxels(), d, sx, sy, sz));
                i += 1;
            }
        }
    }
    Ok((Volume::new(d, iv)?, MaskVolume::new(d, mv)?))
}

pub fn apply_spec(image: &Volume, mask: &MaskVolume, spec: &AugmentationSpec, budget: usize) -> Result<(Volume, MaskVolume)> {
    match *spec {
        AugmentationSpec::ScaleUp { factor } => apply_scale_up(image, mask, factor, budget),
        AugmentationSpec::Crop { crop } => apply_crop(image, mask, crop),
        AugmentationSpec::Elastic { seed, params } => elastic_deform(image, mask, params, seed),
        AugmentationSpec::None => {
            same_dims(image, mask)?;
            Ok((image.clone(), mask.clone()))
        }
    }
}

fn same_dims(image: &Volume, mask: &MaskVolume) -> Result<()> {
    if image.dims() != mask.dims() {
        return Err(Error::Shape(format!("image {} and mask {} differ", image.dims(), mask.dims())));
    }
    Ok(())
}

/// One augmented training pair at network resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedItem {
    pub source: usize,
    pub seed: u64,
    pub spec: AugmentationSpec,
    pub image: Volume,
    /// Soft target: the augmented mask downsampled without thresholding.
    pub target: MaskVolume,
}

/// Expands `sources` into `multiplicity` augmented pairs each, resized to
/// `target`. Item `k` of source `s` uses seed `mix_seed(seed, s·K + k)`, so
/// the result does not depend on processing order.
pub fn build_augmented_dataset(
    sources: &[(Volume, MaskVolume)],
    cfg: &AugmentConfig,
    seed: u64,
    target: Dims,
) -> Result<Vec<AugmentedItem>> {
    build_with(sources, cfg, seed, target, |r, d| sample_spec(r, d, cfg.elastic))
}

/// Same as [`build_augmented_dataset`] with a custom spec sampler.
pub fn build_with(
    sources: &[(Volume, MaskVolume)],
    cfg: &AugmentConfig,
    seed: u64,
    target: Dims,
    mut sampler: impl FnMut(&mut ChaCha8Rng, Dims) -> AugmentationSpec,
) -> Result<Vec<AugmentedItem>> {
    if cfg.multiplicity < 1 {
        return Err(Error::Config("augmentation multiplicity must be >= 1".into()));
    }
    let k = cfg.multiplicity;
    let mut out = Vec::with_capacity(sources.len() * k);
    for (s, (image, mask)) in sources.iter().enumerate() {
        for j in 0..k {
            let item_seed = mix_seed(seed, (s * k + j) as u64);
            let mut r = rng(item_seed);
            let mut attempts = 0;
            let (spec, (img, m)) = loop {
                let spec = sampler(&mut r, image.dims());
                match apply_spec(image, mask, &spec, cfg.voxel_budget) {
                    Ok(pair) => break (spec, pair),
                    Err(Error::Budget { .. }) if attempts < 64 => attempts += 1,
                    Err(e) => return Err(e),
                }
            };
            out.push(AugmentedItem {
                source: s,
                seed: item_seed,
                spec,
                image: resample_trilinear(&img, target),
                target: resample_mask_soft(&m, target),
            });
        }
    }
    Ok(out)
}
