//! Trilinear resampling with mirror boundaries, and probability
//! thresholding.

use crate::util::reflect_coord;
use crate::volume::{Dims, MaskVolume, Volume};

/// Default binarization threshold for probability maps.
pub const THRESHOLD: f32 = 0.5;

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

/// Trilinear sample of a raw voxel grid at continuous voxel coordinates.
/// Coordinates outside the grid are mirrored back inside.
#[inline]
pub fn sample_trilinear(voxels: &[f32], dims: Dims, x: f64, y: f64, z: f64) -> f32 {
    let x = reflect_coord(x, dims.w);
    let y = reflect_coord(y, dims.h);
    let z = reflect_coord(z, dims.z);
    let (x0, y0, z0) = (x.floor() as usize, y.floor() as usize, z.floor() as usize);
    let (x1, y1, z1) = (
        (x0 + 1).min(dims.w - 1),
        (y0 + 1).min(dims.h - 1),
        (z0 + 1).min(dims.z - 1),
    );
    let (tx, ty, tz) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32, (z - z0 as f64) as f32);
    let at = |x, y, z| voxels[dims.index(x, y, z)];
    let c00 = lerp(at(x0, y0, z0), at(x1, y0, z0), tx);
    let c10 = lerp(at(x0, y1, z0), at(x1, y1, z0), tx);
    let c01 = lerp(at(x0, y0, z1), at(x1, y0, z1), tx);
    let c11 = lerp(at(x0, y1, z1), at(x1, y1, z1), tx);
    lerp(lerp(c00, c10, ty), lerp(c01, c11, ty), tz)
}

/// Nearest-neighbour sample with mirrored out-of-range coordinates.
#[inline]
pub fn sample_nearest(voxels: &[f32], dims: Dims, x: f64, y: f64, z: f64) -> f32 {
    let r = |c: f64, n: usize| (reflect_coord(c, n).round() as usize).min(n - 1);
    voxels[dims.index(r(x, dims.w), r(y, dims.h), r(z, dims.z))]
}

/// Resamples raw voxels onto `target` with the half-voxel-centre
/// convention: output voxel `i` maps to source coordinate
/// `(i + 0.5)·S/T − 0.5`.
pub fn resample_voxels(voxels: &[f32], src: Dims, target: Dims) -> Vec<f32> {
    if src == target {
        return voxels.to_vec();
    }
    let map = |n_src: usize, n_dst: usize| -> Vec<f64> {
        let s = n_src as f64 / n_dst as f64;
        (0..n_dst).map(|i| (i as f64 + 0.5) * s - 0.5).collect()
    };
    let (xs, ys, zs) = (map(src.w, target.w), map(src.h, target.h), map(src.z, target.z));
    let mut out = Vec::with_capacity(target.len());
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                out.push(sample_trilinear(voxels, src, x, y, z));
            }
        }
    }
    out
}

/// Trilinear resize. Output values stay within the source value range.
pub fn resample_trilinear(v: &Volume, target: Dims) -> Volume {
    Volume::new(target, resample_voxels(v.voxels(), v.dims(), target)).expect("convex combination stays in range")
}

/// Trilinear resize of a mask without binarizing (soft targets).
pub fn resample_mask_soft(m: &MaskVolume, target: Dims) -> MaskVolume {
    MaskVolume::new(target, resample_voxels(m.voxels(), m.dims(), target)).expect("convex combination stays in range")
}

/// Voxels `>= t` become 1, all others 0.
pub fn threshold(p: &Volume, t: f32) -> MaskVolume {
    threshold_voxels(p.voxels(), p.dims(), t)
}

pub fn threshold_mask(m: &MaskVolume, t: f32) -> MaskVolume {
    threshold_voxels(m.voxels(), m.dims(), t)
}

fn threshold_voxels(v: &[f32], dims: Dims, t: f32) -> MaskVolume {
    MaskVolume::new(dims, v.iter().map(|&x| if x >= t { 1.0 } else { 0.0 }).collect()).expect("binary values")
}
