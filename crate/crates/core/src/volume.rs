//! Scalar volumes and annotation masks.
//!
//! Voxels are stored with x fastest: linear index `(z·H + y)·W + x`, which
//! is also the memory order of a `[1, 1, Z, H, W]` tensor.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Volume extents (width, height, slices).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub w: usize,
    pub h: usize,
    pub z: usize,
}

impl Dims {
    pub const fn new(w: usize, h: usize, z: usize) -> Self {
        Dims { w, h, z }
    }

    pub fn len(&self) -> usize {
        self.w * self.h * self.z
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.h + y) * self.w + x
    }

    pub fn to_array(self) -> [usize; 3] {
        [self.w, self.h, self.z]
    }

    pub fn from_array([w, h, z]: [usize; 3]) -> Self {
        Dims { w, h, z }
    }

    /// Matching `[1, 1, Z, H, W]` tensor shape.
    pub fn tensor_shape(&self) -> [usize; 5] {
        [1, 1, self.z, self.h, self.w]
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.w, self.h, self.z)
    }
}

impl FromStr for Dims {
    type Err = Error;

    /// Parses `W,H,Z` or `WxHxZ`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split([',', 'x', 'X']).map(str::trim).collect();
        let nums: Vec<usize> = parts
            .iter()
            .map(|p| p.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("bad dims {s:?}, expected W,H,Z")))?;
        match nums[..] {
            [w, h, z] if w > 0 && h > 0 && z > 0 => Ok(Dims { w, h, z }),
            _ => Err(Error::Config(format!("bad dims {s:?}, expected three positive extents"))),
        }
    }
}

fn check_len(dims: Dims, n: usize) -> Result<()> {
    if dims.is_empty() {
        return Err(Error::Shape(format!("volume extents must be positive, got {dims}")));
    }
    if dims.len() != n {
        return Err(Error::Shape(format!(
            "volume {dims} needs {} voxels, got {n}",
            dims.len()
        )));
    }
    Ok(())
}

fn check_unit(voxels: &[f32]) -> Result<()> {
    match voxels.iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(i) => Err(Error::Shape(format!(
            "voxel {i} has value {} outside [0, 1]",
            voxels[i]
        ))),
        None => Ok(()),
    }
}

/// Intensity or probability volume with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: Dims,
    voxels: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims, voxels: Vec<f32>) -> Result<Self> {
        check_len(dims, voxels.len())?;
        check_unit(&voxels)?;
        Ok(Volume { dims, voxels })
    }

    pub fn filled(dims: Dims, value: f32) -> Self {
        Volume {
            dims,
            voxels: vec![value.clamp(0.0, 1.0); dims.len()],
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut voxels = Vec::with_capacity(dims.len());
        for z in 0..dims.z {
            for y in 0..dims.h {
                for x in 0..dims.w {
                    voxels.push(f(x, y, z).clamp(0.0, 1.0));
                }
            }
        }
        Volume { dims, voxels }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.dims.index(x, y, z)]
    }

    pub fn mean(&self) -> f64 {
        self.voxels.iter().map(|&v| v as f64).sum::<f64>() / self.voxels.len() as f64
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.voxels
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&self.dims.tensor_shape(), self.voxels.clone()).expect("volume shape")
    }

    /// Reads a `[1, 1, Z, H, W]` tensor back as a volume.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let [n, c, z, h, w] = t.dims5()?;
        if n != 1 || c != 1 {
            return Err(Error::Shape(format!(
                "expected a single-channel [1, 1, Z, H, W] tensor, got {:?}",
                t.shape()
            )));
        }
        Volume::new(Dims::new(w, h, z), t.data().to_vec())
    }
}

/// Annotation mask: crisp (`{0, 1}`) or soft (`[0, 1]`, e.g. averaged
/// annotations or resampled targets).
#[derive(Clone, Debug, PartialEq)]
pub struct MaskVolume {
    dims: Dims,
    voxels: Vec<f32>,
}

impl MaskVolume {
    pub fn new(dims: Dims, voxels: Vec<f32>) -> Result<Self> {
        check_len(dims, voxels.len())?;
        check_unit(&voxels)?;
        Ok(MaskVolume { dims, voxels })
    }

    pub fn empty(dims: Dims) -> Self {
        MaskVolume {
            dims,
            voxels: vec![0.0; dims.len()],
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut voxels = Vec::with_capacity(dims.len());
        for z in 0..dims.z {
            for y in 0..dims.h {
                for x in 0..dims.w {
                    voxels.push(if f(x, y, z) { 1.0 } else { 0.0 });
                }
            }
        }
        MaskVolume { dims, voxels }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f32] {
        &mut self.voxels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.dims.index(x, y, z)]
    }

    pub fn is_crisp(&self) -> bool {
        self.voxels.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Number of voxels equal to 1.
    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v == 1.0).count()
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&self.dims.tensor_shape(), self.voxels.clone()).expect("mask shape")
    }

    /// Reinterprets the mask as an intensity volume (same values).
    pub fn as_volume(&self) -> Volume {
        Volume {
            dims: self.dims,
            voxels: self.voxels.clone(),
        }
    }

    pub fn from_volume(v: Volume) -> Self {
        MaskVolume {
            dims: v.dims,
            voxels: v.voxels,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_parse() {
        assert_eq!("461,381,49".parse::<Dims>().unwrap(), Dims::new(461, 381, 49));
        assert_eq!("32x32x17".parse::<Dims>().unwrap(), Dims::new(32, 32, 17));
        assert!("1,2".parse::<Dims>().is_err());
        assert!("0,2,2".parse::<Dims>().is_err());
    }

    #[test]
    fn linear_index_is_x_fastest() {
        let d = Dims::new(4, 3, 2);
        assert_eq!(d.index(1, 0, 0), 1);
        assert_eq!(d.index(0, 1, 0), 4);
        assert_eq!(d.index(0, 0, 1), 12);
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(Volume::new(Dims::new(1, 1, 2), vec![0.5, 1.5]).is_err());
        assert!(MaskVolume::new(Dims::new(1, 1, 1), vec![f32::NAN]).is_err());
    }
}
