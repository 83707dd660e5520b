//! 3-D convolution kernels.
//!
//! Forward and backward passes lower the convolution to a matrix product
//! over an im2col buffer. The buffer is built for a band of output
//! z-slices at a time so memory stays bounded for large volumes.
//! Reduction order depends only on the shapes, so results are
//! reproducible bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// Upper bound on im2col buffer elements per band.
const COLS_BUDGET: usize = 1 << 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding that preserves extents at stride 1.
    Same,
    /// No padding; each axis shrinks by `kernel - 1`.
    Valid,
}

/// Kernel extents, stride and zero padding of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: usize,
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn new(kernel: [usize; 3], stride: usize, padding: Padding) -> Result<Self> {
        if stride == 0 || kernel.contains(&0) {
            return Err(Error::Config(format!(
                "kernel {kernel:?} and stride {stride} must be positive"
            )));
        }
        let pad = match padding {
            Padding::Valid => [0; 3],
            Padding::Same => {
                if kernel.iter().any(|k| k % 2 == 0) {
                    return Err(Error::Config(format!(
                        "same padding needs odd kernel extents, got {kernel:?}"
                    )));
                }
                kernel.map(|k| k / 2)
            }
        };
        Ok(ConvGeom {
            kernel,
            stride,
            pad,
        })
    }

    pub fn output_extents(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for axis in 0..3 {
            let padded = input[axis] + 2 * self.pad[axis];
            if padded < self.kernel[axis] {
                return Err(shape_err!(
                    "kernel {:?} does not fit input extents {input:?} (axis {})",
                    self.kernel,
                    ["D", "H", "W"][axis]
                ));
            }
            out[axis] = (padded - self.kernel[axis]) / self.stride + 1;
        }
        Ok(out)
    }
}

struct Layout {
    n: usize,
    cin: usize,
    cout: usize,
    input: [usize; 3],
    output: [usize; 3],
    geom: ConvGeom,
}

impl Layout {
    fn k(&self) -> usize {
        self.cin * self.geom.kernel.iter().product::<usize>()
    }

    fn in_plane(&self) -> usize {
        self.input.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.output.iter().product()
    }

    /// Number of output z-slices processed per im2col band.
    fn band(&self) -> usize {
        let per_slice = self.k() * self.output[1] * self.output[2];
        (COLS_BUDGET / per_slice.max(1)).clamp(1, self.output[0])
    }
}

fn layout<T: Real>(x: &Tensor<T>, w: &Tensor<T>, geom: ConvGeom) -> Result<Layout> {
    let [n, cin, d, h, wd] = x.dims5()?;
    let ws = w.shape();
    if ws.len() != 5 || ws[1] != cin || ws[2..] != geom.kernel[..] {
        return Err(shape_err!(
            "conv3d input {:?} is incompatible with weight {:?} (kernel {:?})",
            x.shape(),
            ws,
            geom.kernel
        ));
    }
    let output = geom.output_extents([d, h, wd])?;
    Ok(Layout {
        n,
        cin,
        cout: ws[0],
        input: [d, h, wd],
        output,
        geom,
    })
}

/// Visits every (column row, output run) pair of the im2col matrix for the
/// band `z0..z1`. The callback receives the destination run of length
/// `Wo` inside the column matrix and the matching input line (or `None`
/// if the run lies entirely in padding), along with the kernel x-offset.
fn for_each_run(
    l: &Layout,
    z0: usize,
    z1: usize,
    mut f: impl FnMut(usize, usize, Option<usize>, usize),
) {
    let [d, h, w] = l.input;
    let [_, ho, wo] = l.output;
    let g = l.geom;
    let p_len = (z1 - z0) * ho * wo;
    let mut row = 0;
    for ci in 0..l.cin {
        let chan = ci * d * h * w;
        for a in 0..g.kernel[0] {
            for b in 0..g.kernel[1] {
                for c in 0..g.kernel[2] {
                    let mut p = row * p_len;
                    for oz in z0..z1 {
                        let iz = (oz * g.stride + a) as isize - g.pad[0] as isize;
                        for oy in 0..ho {
                            let iy = (oy * g.stride + b) as isize - g.pad[1] as isize;
                            let line = if iz < 0 || iz >= d as isize || iy < 0 || iy >= h as isize {
                                None
                            } else {
                                Some(chan + (iz as usize * h + iy as usize) * w)
                            };
                            f(p, c, line, wo);
                            p += wo;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Range of output x positions whose input x lies inside `[0, w)`.
#[inline]
fn valid_x(l: &Layout, c: usize, wo: usize) -> (usize, usize) {
    let s = l.geom.stride as isize;
    let off = c as isize - l.geom.pad[2] as isize;
    let w = l.input[2] as isize;
    // ix = ox * s + off ∈ [0, w)
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let hi = if w - off <= 0 { 0 } else { (w - off + s - 1) / s };
    let lo = (lo as usize).min(wo);
    let hi = (hi as usize).clamp(lo, wo);
    (lo, hi)
}

fn im2col<T: Real>(l: &Layout, x_n: &[T], z0: usize, z1: usize, cols: &mut [T]) {
    let s = l.geom.stride;
    let pw = l.geom.pad[2];
    for_each_run(l, z0, z1, |p, c, line, wo| {
        let run = &mut cols[p..p + wo];
        let Some(start) = line else {
            run.fill(T::zero());
            return;
        };
        let (lo, hi) = valid_x(l, c, wo);
        run[..lo].fill(T::zero());
        run[hi..].fill(T::zero());
        if s == 1 {
            let ix0 = lo + c - pw;
            run[lo..hi].copy_from_slice(&x_n[start + ix0..start + ix0 + (hi - lo)]);
        } else {
            for (ox, v) in run.iter_mut().enumerate().take(hi).skip(lo) {
                *v = x_n[start + ox * s + c - pw];
            }
        }
    });
}

fn col2im<T: Real>(l: &Layout, cols: &[T], z0: usize, z1: usize, dx_n: &mut [T]) {
    let s = l.geom.stride;
    let pw = l.geom.pad[2];
    for_each_run(l, z0, z1, |p, c, line, wo| {
        let Some(start) = line else { return };
        let (lo, hi) = valid_x(l, c, wo);
        let run = &cols[p..p + wo];
        for ox in lo..hi {
            dx_n[start + ox * s + c - pw] += run[ox];
        }
    });
}

/// `y = conv(x, w) + b` over `[N, Cin, D, H, W]` input and
/// `[Cout, Cin, kd, kh, kw]` weight.
pub fn conv3d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeom,
) -> Result<Tensor<T>> {
    let l = layout(x, w, geom)?;
    if let Some(b) = bias {
        if b.shape() != [l.cout] {
            return Err(shape_err!(
                "conv3d bias {:?} does not match {} output channels",
                b.shape(),
                l.cout
            ));
        }
    }
    let [_, ho, wo] = l.output;
    let (k, in_plane, out_plane) = (l.k(), l.in_plane(), l.out_plane());
    let band = l.band();
    let mut y = vec![T::zero(); l.n * l.cout * out_plane];
    let mut cols = vec![T::zero(); k * band * ho * wo];
    for n in 0..l.n {
        let x_n = &x.data()[n * l.cin * in_plane..(n + 1) * l.cin * in_plane];
        let y_n = &mut y[n * l.cout * out_plane..(n + 1) * l.cout * out_plane];
        let mut z0 = 0;
        while z0 < l.output[0] {
            let z1 = (z0 + band).min(l.output[0]);
            let p_len = (z1 - z0) * ho * wo;
            im2col(&l, x_n, z0, z1, &mut cols[..k * p_len]);
            T::gemm(
                l.cout,
                k,
                p_len,
                T::one(),
                w.data(),
                (k, 1),
                &cols[..k * p_len],
                (p_len, 1),
                T::zero(),
                &mut y_n[z0 * ho * wo..],
                (out_plane, 1),
            );
            z0 = z1;
        }
        if let Some(b) = bias {
            for (co, plane) in y_n.chunks_mut(out_plane).enumerate() {
                let bv = b.data()[co];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    let [d, h, wd] = l.output;
    Tensor::new(&[l.n, l.cout, d, h, wd], y)
}

/// Gradients of a convolution given the upstream gradient `dy`.
pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Tensor<T>,
}

pub fn conv3d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    geom: ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> Result<ConvGrads<T>> {
    let l = layout(x, w, geom)?;
    let [_, ho, wo] = l.output;
    let (k, in_plane, out_plane) = (l.k(), l.in_plane(), l.out_plane());
    if dy.shape() != [l.n, l.cout, l.output[0], ho, wo] {
        return Err(shape_err!(
            "conv3d upstream gradient {:?} does not match output",
            dy.shape()
        ));
    }
    let band = l.band();
    let mut cols = vec![T::zero(); k * band * ho * wo];
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    let mut db = vec![T::zero(); l.cout];
    for n in 0..l.n {
        let x_n = &x.data()[n * l.cin * in_plane..(n + 1) * l.cin * in_plane];
        let dy_n = &dy.data()[n * l.cout * out_plane..(n + 1) * l.cout * out_plane];
        for (co, plane) in dy_n.chunks(out_plane).enumerate() {
            db[co] += plane.iter().copied().sum::<T>();
        }
        let mut z0 = 0;
        while z0 < l.output[0] {
            let z1 = (z0 + band).min(l.output[0]);
            let p_len = (z1 - z0) * ho * wo;
            let dy_band = &dy_n[z0 * ho * wo..];
            let cols = &mut cols[..k * p_len];
            if let Some(dw) = dw.as_mut() {
                im2col(&l, x_n, z0, z1, cols);
                T::gemm(
                    l.cout,
                    p_len,
                    k,
                    T::one(),
                    dy_band,
                    (out_plane, 1),
                    cols,
                    (1, p_len),
                    T::one(),
                    dw,
                    (k, 1),
                );
            }
            if let Some(dx) = dx.as_mut() {
                T::gemm(
                    k,
                    l.cout,
                    p_len,
                    T::one(),
                    w.data(),
                    (1, k),
                    dy_band,
                    (out_plane, 1),
                    T::zero(),
                    cols,
                    (p_len, 1),
                );
                let dx_n = &mut dx[n * l.cin * in_plane..(n + 1) * l.cin * in_plane];
                col2im(&l, cols, z0, z1, dx_n);
            }
            z0 = z1;
        }
    }
    Ok(ConvGrads {
        dx: dx.map(|d| Tensor::new(x.shape(), d)).transpose()?,
        dw: dw.map(|d| Tensor::new(w.shape(), d)).transpose()?,
        db: Tensor::new(&[l.cout], db)?,
    })
}

fn transpose_layout<T: Real>(x: &Tensor<T>, w: &Tensor<T>) -> Result<([usize; 5], usize)> {
    let dims = x.dims5()?;
    let ws = w.shape();
    if ws.len() != 5 || ws[0] != dims[1] || ws[2..] != [2, 2, 2] {
        return Err(shape_err!(
            "conv_transpose3d input {:?} is incompatible with weight {:?} (expected [{}, Cout, 2, 2, 2])",
            x.shape(),
            ws,
            dims[1]
        ));
    }
    Ok((dims, ws[1]))
}

/// Stride-2, 2×2×2 transposed convolution: every input voxel scatters its
/// value times the kernel into a disjoint 2×2×2 output block.
pub fn conv_transpose3d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let ([n, c, d, h, wd], cout) = transpose_layout(x, w)?;
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(shape_err!(
                "conv_transpose3d bias {:?} does not match {cout} output channels",
                b.shape()
            ));
        }
    }
    let p = d * h * wd;
    let j = cout * 8;
    let (od, oh, ow) = (2 * d, 2 * h, 2 * wd);
    let out_plane = od * oh * ow;
    let mut y = vec![T::zero(); n * cout * out_plane];
    let mut cols = vec![T::zero(); j * p];
    for s in 0..n {
        let x_s = &x.data()[s * c * p..(s + 1) * c * p];
        T::gemm(j, c, p, T::one(), w.data(), (1, j), x_s, (p, 1), T::zero(), &mut cols, (p, 1));
        let y_s = &mut y[s * cout * out_plane..(s + 1) * cout * out_plane];
        for co in 0..cout {
            let bv = bias.map_or(T::zero(), |b| b.data()[co]);
            let plane = &mut y_s[co * out_plane..(co + 1) * out_plane];
            for tap in 0..8 {
                let (a, b, cc) = (tap >> 2, (tap >> 1) & 1, tap & 1);
                let src = &cols[(co * 8 + tap) * p..(co * 8 + tap + 1) * p];
                for z in 0..d {
                    for yy in 0..h {
                        let row = ((2 * z + a) * oh + 2 * yy + b) * ow + cc;
                        let line = &src[(z * h + yy) * wd..(z * h + yy + 1) * wd];
                        for (xx, &v) in line.iter().enumerate() {
                            plane[row + 2 * xx] = v + bv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, cout, od, oh, ow], y)
}

pub fn conv_transpose3d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
    need_dw: bool,
) -> Result<ConvGrads<T>> {
    let ([n, c, d, h, wd], cout) = transpose_layout(x, w)?;
    let (od, oh, ow) = (2 * d, 2 * h, 2 * wd);
    if dy.shape() != [n, cout, od, oh, ow] {
        return Err(shape_err!(
            "conv_transpose3d upstream gradient {:?} does not match output",
            dy.shape()
        ));
    }
    let p = d * h * wd;
    let j = cout * 8;
    let out_plane = od * oh * ow;
    let mut gathered = vec![T::zero(); j * p];
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    let mut db = vec![T::zero(); cout];
    for s in 0..n {
        let dy_s = &dy.data()[s * cout * out_plane..(s + 1) * cout * out_plane];
        for co in 0..cout {
            let plane = &dy_s[co * out_plane..(co + 1) * out_plane];
            db[co] += plane.iter().copied().sum::<T>();
            for tap in 0..8 {
                let (a, b, cc) = (tap >> 2, (tap >> 1) & 1, tap & 1);
                let dst = &mut gathered[(co * 8 + tap) * p..(co * 8 + tap + 1) * p];
                for z in 0..d {
                    for yy in 0..h {
                        let row = ((2 * z + a) * oh + 2 * yy + b) * ow + cc;
                        let line = &mut dst[(z * h + yy) * wd..(z * h + yy + 1) * wd];
                        for (xx, v) in line.iter_mut().enumerate() {
                            *v = plane[row + 2 * xx];
                        }
                    }
                }
            }
        }
        let x_s = &x.data()[s * c * p..(s + 1) * c * p];
        if let Some(dx) = dx.as_mut() {
            T::gemm(
                c,
                j,
                p,
                T::one(),
                w.data(),
                (j, 1),
                &gathered,
                (p, 1),
                T::zero(),
                &mut dx[s * c * p..(s + 1) * c * p],
                (p, 1),
            );
        }
        if let Some(dw) = dw.as_mut() {
            T::gemm(c, p, j, T::one(), x_s, (p, 1), &gathered, (1, p), T::one(), dw, (j, 1));
        }
    }
    Ok(ConvGrads {
        dx: dx.map(|d| Tensor::new(x.shape(), d)).transpose()?,
        dw: dw.map(|d| Tensor::new(w.shape(), d)).transpose()?,
        db: Tensor::new(&[cout], db)?,
    })
}
