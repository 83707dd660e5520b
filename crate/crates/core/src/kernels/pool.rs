use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

/// 2×2×2 max pooling. Returns the pooled tensor and, per output voxel, the
/// flat input index that won. Ties go to the first voxel in z, y, x scan
/// order within the block.
pub fn maxpool3d_forward<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, d, h, w] = x.dims5()?;
    for (axis, ext) in [("D", d), ("H", h), ("W", w)] {
        if ext % 2 != 0 {
            return Err(shape_err!(
                "maxpool3d needs even extents, axis {axis} has {ext} (input {:?})",
                x.shape()
            ));
        }
    }
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * od * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    let src = x.data();
    for plane in 0..n * c {
        let base = plane * d * h * w;
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + ((2 * z) * h + 2 * y) * w + 2 * xx;
                    for a in 0..2 {
                        for b in 0..2 {
                            for cc in 0..2 {
                                let idx = base + ((2 * z + a) * h + 2 * y + b) * w + 2 * xx + cc;
                                if src[idx] > src[best] {
                                    best = idx;
                                }
                            }
                        }
                    }
                    out.push(src[best]);
                    arg.push(best);
                }
            }
        }
    }
    Ok((Tensor::new(&[n, c, od, oh, ow], out)?, arg))
}

/// Routes each upstream gradient to the winning input voxel.
pub fn maxpool3d_backward<T: Real>(input_shape: &[usize], argmax: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        d[i] += g;
    }
    dx
}
