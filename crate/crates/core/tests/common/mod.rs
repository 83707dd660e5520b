//! Independent reference implementations shared by the integration tests.
//! Everything here is deliberately naive: nested loops, sets, sorting.
#![allow(dead_code)]

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxseg::{Dims, MaskVolume, Tensor, Volume};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_tensor(shape: &[usize], r: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

fn at(shape: &[usize], idx: [usize; 5]) -> usize {
    (((idx[0] * shape[1] + idx[1]) * shape[2] + idx[2]) * shape[3] + idx[3]) * shape[4] + idx[4]
}

/// Direct-sum convolution with zero padding. `x` is `[N, Cin, D, H, W]`,
/// `w` is `[Cout, Cin, kd, kh, kw]`; `pad` and `stride` are per axis.
pub fn conv3d_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, stride: usize, pad: [usize; 3]) -> (Vec<usize>, Vec<f64>) {
    let (xs, ws) = (x.shape(), w.shape());
    let out: Vec<usize> = (0..3).map(|a| (xs[a + 2] + 2 * pad[a] - ws[a + 2]) / stride + 1).collect();
    let shape = vec![xs[0], ws[0], out[0], out[1], out[2]];
    let mut y = vec![0.0; shape.iter().product()];
    for n in 0..xs[0] {
        for co in 0..ws[0] {
            for oz in 0..out[0] {
                for oy in 0..out[1] {
                    for ox in 0..out[2] {
                        let mut acc = b.map_or(0.0, |b| b.data()[co]);
                        for ci in 0..xs[1] {
                            for kz in 0..ws[2] {
                                for ky in 0..ws[3] {
                                    for kx in 0..ws[4] {
                                        let iz = (oz * stride + kz) as isize - pad[0] as isize;
                                        let iy = (oy * stride + ky) as isize - pad[1] as isize;
                                        let ix = (ox * stride + kx) as isize - pad[2] as isize;
                                        if iz < 0 || iy < 0 || ix < 0 {
                                            continue;
                                        }
                                        let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                        if iz >= xs[2] || iy >= xs[3] || ix >= xs[4] {
                                            continue;
                                        }
                                        acc += x.data()[at(xs, [n, ci, iz, iy, ix])] * w.data()[at(ws, [co, ci, kz, ky, kx])];
                                    }
                                }
                            }
                        }
                        y[at(&shape, [n, co, oz, oy, ox])] = acc;
                    }
                }
            }
        }
    }
    (shape, y)
}

/// Scatter form of the stride-2 2×2×2 transposed convolution; `w` is
/// `[Cin, Cout, 2, 2, 2]`.
pub fn conv_transpose3d_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> (Vec<usize>, Vec<f64>) {
    let (xs, ws) = (x.shape(), w.shape());
    let shape = vec![xs[0], ws[1], 2 * xs[2], 2 * xs[3], 2 * xs[4]];
    let mut y = vec![0.0; shape.iter().product()];
    for n in 0..shape[0] {
        for co in 0..shape[1] {
            for z in 0..shape[2] {
                for yy in 0..shape[3] {
                    for xx in 0..shape[4] {
                        y[at(&shape, [n, co, z, yy, xx])] = b.map_or(0.0, |b| b.data()[co]);
                    }
                }
            }
        }
    }
    for n in 0..xs[0] {
        for ci in 0..xs[1] {
            for z in 0..xs[2] {
                for yy in 0..xs[3] {
                    for xx in 0..xs[4] {
                        let v = x.data()[at(xs, [n, ci, z, yy, xx])];
                        for co in 0..ws[1] {
                            for a in 0..2 {
                                for bb in 0..2 {
                                    for c in 0..2 {
                                        y[at(&shape, [n, co, 2 * z + a, 2 * yy + bb, 2 * xx + c])] +=
                                            v * w.data()[at(ws, [ci, co, a, bb, c])];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (shape, y)
}

/// Maximum of every disjoint 2×2×2 block.
pub fn maxpool_oracle(x: &Tensor<f64>) -> (Vec<usize>, Vec<f64>) {
    let xs = x.shape();
    let shape = vec![xs[0], xs[1], xs[2] / 2, xs[3] / 2, xs[4] / 2];
    let mut y = Vec::new();
    for n in 0..shape[0] {
        for c in 0..shape[1] {
            for z in 0..shape[2] {
                for yy in 0..shape[3] {
                    for xx in 0..shape[4] {
                        let mut block = Vec::new();
                        for a in 0..2 {
                            for b in 0..2 {
                                for d in 0..2 {
                                    block.push(x.data()[at(xs, [n, c, 2 * z + a, 2 * yy + b, 2 * xx + d])]);
                                }
                            }
                        }
                        y.push(block.into_iter().fold(f64::NEG_INFINITY, f64::max));
                    }
                }
            }
        }
    }
    (shape, y)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Confusion counts by set algebra over voxel indices.
pub struct SetCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

pub fn set_counts(pred: &MaskVolume, gt: &MaskVolume) -> SetCounts {
    let set = |m: &MaskVolume| -> HashSet<usize> { m.voxels().iter().enumerate().filter(|(_, v)| **v == 1.0).map(|(i, _)| i).collect() };
    let (p, g) = (set(pred), set(gt));
    let all: HashSet<usize> = (0..pred.voxels().len()).collect();
    let union: HashSet<usize> = p.union(&g).copied().collect();
    SetCounts {
        tp: p.intersection(&g).count() as u64,
        fp: p.difference(&g).count() as u64,
        fn_: g.difference(&p).count() as u64,
        tn: all.difference(&union).count() as u64,
    }
}

/// Average precision by brute force: for every distinct score `t`, the
/// prediction `{score ≥ t}` is counted from scratch; recall steps are
/// weighted by the precision reached at them.
pub fn ap_oracle(scores: &[f32], truth: &[bool]) -> f64 {
    let positives = truth.iter().filter(|&&t| t).count() as f64;
    let mut thresholds: Vec<f32> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let selected: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
        let tp = selected.iter().filter(|&&i| truth[i]).count() as f64;
        let recall = tp / positives;
        let precision = tp / selected.len() as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

pub fn random_mask(d: Dims, density: f64, r: &mut impl Rng) -> MaskVolume {
    MaskVolume::from_fn(d, |_, _, _| r.random_bool(density))
}

/// Probabilities on a coarse grid of levels so that ties occur.
pub fn random_prob(d: Dims, r: &mut impl Rng) -> Volume {
    let levels = r.random_range(2..40u32);
    Volume::from_fn(d, |_, _, _| r.random_range(0..=levels) as f32 / levels as f32)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).unwrap());
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Worst absolute deviation of each kernel from its oracle over `draws`
/// random shapes and seeds, evaluated at precision `T`.
pub fn kernel_oracle_errors<T: voxseg::Real>(draws: u64) -> Vec<(&'static str, f64)> {
    use voxseg::kernels::{conv3d_forward, conv_transpose3d_forward, maxpool3d_forward, ConvGeom, Padding};
    let as64 = |t: &Tensor<T>| -> Tensor<f64> { t.cast() };
    let (mut conv, mut convt, mut pool) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..draws {
        let mut r = rng(seed);
        let n = r.random_range(1..=2);
        let (cin, cout) = (r.random_range(1..=3), r.random_range(1..=3));
        let k = [r.random_range(0..2) * 2 + 1, r.random_range(0..2) * 2 + 1, r.random_range(0..2) * 2 + 1];
        let padding = if r.random_bool(0.5) { Padding::Same } else { Padding::Valid };
        let stride = r.random_range(1..=2);
        let ext: Vec<usize> = (0..3).map(|a| r.random_range(k[a]..k[a] + 5)).collect();
        let x: Tensor<T> = uniform_tensor(&[n, cin, ext[0], ext[1], ext[2]], &mut r).cast();
        let w: Tensor<T> = uniform_tensor(&[cout, cin, k[0], k[1], k[2]], &mut r).cast();
        let b: Tensor<T> = uniform_tensor(&[cout], &mut r).cast();
        let geom = ConvGeom::new(k, stride, padding).unwrap();
        let y = conv3d_forward(&x, &w, Some(&b), geom).unwrap();
        let (shape, want) = conv3d_oracle(&as64(&x), &as64(&w), Some(&as64(&b)), stride, geom.pad);
        assert_eq!(y.shape(), &shape[..]);
        conv = conv.max(max_abs_diff(as64(&y).data(), &want));

        let ext: Vec<usize> = (0..3).map(|_| r.random_range(1..=4)).collect();
        let x: Tensor<T> = uniform_tensor(&[n, cin, ext[0], ext[1], ext[2]], &mut r).cast();
        let w: Tensor<T> = uniform_tensor(&[cin, cout, 2, 2, 2], &mut r).cast();
        let y = conv_transpose3d_forward(&x, &w, Some(&b)).unwrap();
        let (shape, want) = conv_transpose3d_oracle(&as64(&x), &as64(&w), Some(&as64(&b)));
        assert_eq!(y.shape(), &shape[..]);
        convt = convt.max(max_abs_diff(as64(&y).data(), &want));

        let ext: Vec<usize> = (0..3).map(|_| 2 * r.random_range(1..=4)).collect();
        let x: Tensor<T> = uniform_tensor(&[n, cin, ext[0], ext[1], ext[2]], &mut r).cast();
        let (y, _) = maxpool3d_forward(&x).unwrap();
        let (shape, want) = maxpool_oracle(&as64(&x));
        assert_eq!(y.shape(), &shape[..]);
        pool = pool.max(max_abs_diff(as64(&y).data(), &want));
    }
    vec![("conv3d", conv), ("conv_transpose3d", convt), ("maxpool3d", pool)]
}

/// Outcome of the metrics comparison over random pairs.
#[derive(Debug, Default)]
pub struct MetricsOracleReport {
    pub pairs: usize,
    /// Pairs where any count-based metric differed from set counting.
    pub count_mismatches: usize,
    pub max_ap_error: f64,
    pub max_dice_identity_error: f64,
    /// Pairs whose ground truth was empty, for which AP is undefined.
    pub ap_undefined: usize,
}

pub fn metrics_oracle(pairs: usize, seed: u64) -> MetricsOracleReport {
    use voxseg::metrics::{average_precision, confusion};
    use voxseg::resample::threshold;
    let d = Dims::new(8, 8, 4);
    let mut r = rng(seed);
    let mut rep = MetricsOracleReport {
        pairs,
        ..Default::default()
    };
    let ratio = |a: u64, b: u64| if b == 0 { 1.0 } else { a as f64 / b as f64 };
    for _ in 0..pairs {
        // densities include the empty and full extremes
        let dg = match r.random_range(0..20) {
            0 => 0.0,
            1 => 1.0,
            _ => r.random_range(0.0..1.0),
        };
        let gt = random_mask(d, dg, &mut r);
        let prob = random_prob(d, &mut r);
        let pred = threshold(&prob, r.random_range(0.0..1.0));
        let c = confusion(&pred, &gt).unwrap();
        let o = set_counts(&pred, &gt);
        let jac = ratio(o.tp, o.tp + o.fp + o.fn_);
        let dice = ratio(2 * o.tp, 2 * o.tp + o.fp + o.fn_);
        let precision = ratio(o.tp, o.tp + o.fp);
        let recall = ratio(o.tp, o.tp + o.fn_);
        let avd = (o.tp + o.fp).abs_diff(o.tp + o.fn_);
        let same = (c.tp, c.fp, c.fn_, c.tn) == (o.tp, o.fp, o.fn_, o.tn)
            && c.jaccard() == jac
            && c.dice() == dice
            && c.precision() == precision
            && c.recall() == recall
            && c.avd() == avd;
        if !same {
            rep.count_mismatches += 1;
        }
        rep.max_dice_identity_error = rep.max_dice_identity_error.max((c.dice() - 2.0 * c.jaccard() / (1.0 + c.jaccard())).abs());
        let truth: Vec<bool> = gt.voxels().iter().map(|&v| v == 1.0).collect();
        match average_precision(&prob, &gt) {
            Ok(ap) => rep.max_ap_error = rep.max_ap_error.max((ap - ap_oracle(prob.voxels(), &truth)).abs()),
            Err(_) if truth.iter().all(|t| !t) => rep.ap_undefined += 1,
            Err(e) => panic!("average precision failed: {e}"),
        }
    }
    rep
}

/// One named pass/fail check with a human-readable detail.
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn bits_equal(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// The augmentation invariants, each as a separate check.
pub fn augmentation_checks() -> Vec<Check> {
    use voxseg::augment::*;
    use voxseg::io::{generate_phantom, PhantomSpec};
    use voxseg::resample::sample_trilinear;
    let mut out = Vec::new();
    let d = Dims::new(40, 36, 21);
    let (img, mask) = generate_phantom(&PhantomSpec::new(3, d)).unwrap();

    let (i1, m1) = apply_scale_up(&img, &mask, 1.0, DEFAULT_VOXEL_BUDGET).unwrap();
    let (i2, m2) = apply_crop(&img, &mask, CropBox::full(d)).unwrap();
    let (i3, m3) = elastic_deform(&img, &mask, ElasticParams { sigma: 0.0, points: 6 }, 9).unwrap();
    let ident = [("scale 1", &i1, &m1), ("full crop", &i2, &m2), ("sigma 0", &i3, &m3)]
        .iter()
        .filter(|(_, i, m)| !(bits_equal(i.voxels(), img.voxels()) && bits_equal(m.voxels(), mask.voxels())))
        .map(|(n, _, _)| *n)
        .collect::<Vec<_>>();
    out.push(Check {
        name: "identity transforms bit-exact",
        passed: ident.is_empty(),
        detail: if ident.is_empty() { "scale 1, full crop, sigma 0".into() } else { format!("not identical: {ident:?}") },
    });

    let mut r = rng(2024);
    let mut counts = [0usize; 4];
    for _ in 0..10_000 {
        let k = match sample_spec(&mut r, d, ElasticParams::default()) {
            AugmentationSpec::ScaleUp { .. } => 0,
            AugmentationSpec::Crop { .. } => 1,
            AugmentationSpec::Elastic { .. } => 2,
            AugmentationSpec::None => 3,
        };
        counts[k] += 1;
    }
    let sigma = (10_000.0f64 * 0.25 * 0.75).sqrt();
    let worst = counts.iter().map(|&c| (c as f64 - 2500.0).abs() / sigma).fold(0.0, f64::max);
    out.push(Check {
        name: "kind frequencies uniform",
        passed: worst < 4.0,
        detail: format!("counts {counts:?}, worst {worst:.2} sigma"),
    });

    let mut worst_aspect = 0.0f64;
    let mut outside = 0;
    for (s, src) in [Dims::new(461, 461, 49), Dims::new(40, 36, 21), Dims::new(17, 64, 9), Dims::new(128, 128, 49)].into_iter().enumerate() {
        let mut r = rng(s as u64);
        for _ in 0..2_500 {
            let size = match sample_spec(&mut r, src, ElasticParams::default()) {
                AugmentationSpec::ScaleUp { factor } => scaled_dims(src, factor).to_array(),
                AugmentationSpec::Crop { crop } => {
                    let inside = (0..3).all(|a| crop.origin[a] >= 0 && crop.origin[a] as usize + crop.size[a] <= src.to_array()[a]);
                    outside += usize::from(!inside);
                    crop.size
                }
                _ => continue,
            };
            let ex = size[0] as f64 / src.w as f64;
            worst_aspect = worst_aspect.max((size[1] as f64 - ex * src.h as f64).abs()).max((size[2] as f64 - ex * src.z as f64).abs());
        }
    }
    out.push(Check {
        name: "aspect within one voxel",
        passed: worst_aspect <= 1.0 && outside == 0,
        detail: format!("worst deviation {worst_aspect:.3} voxels, crops outside source {outside}"),
    });

    let mut worst_mirror = 0.0f32;
    for (x, y, z) in [(0.3, 5.0, 4.0), (1.7, 12.5, 8.2), (7.25, 3.0, 0.5), (20.0, 30.1, 19.9)] {
        let at = |p: [f64; 3]| sample_trilinear(img.voxels(), d, p[0], p[1], p[2]);
        worst_mirror = worst_mirror
            .max((at([-x, y, z]) - at([x, y, z])).abs())
            .max((at([x, -y, z]) - at([x, y, z])).abs())
            .max((at([x, y, -z]) - at([x, y, z])).abs());
    }
    let (shifted, _) = apply_crop(&img, &mask, CropBox { origin: [-1, 0, 0], size: [4, 4, 4] }).unwrap();
    let beyond = shifted.get(0, 2, 3) == img.get(1, 2, 3);
    out.push(Check {
        name: "reflection mirror symmetry",
        passed: worst_mirror == 0.0 && beyond,
        detail: format!("max |f(-δ) - f(δ)| {worst_mirror:e}, one voxel beyond x=0 reads x=1: {beyond}"),
    });

    let sources: Vec<(Volume, MaskVolume)> = (0..3).map(|s| generate_phantom(&PhantomSpec::new(50 + s, Dims::new(24, 24, 13))).unwrap()).collect();
    let cfg = AugmentConfig {
        multiplicity: 6,
        ..Default::default()
    };
    let target = Dims::new(16, 16, 9);
    let a = build_augmented_dataset(&sources, &cfg, 77, target).unwrap();
    let b = build_augmented_dataset(&sources, &cfg, 77, target).unwrap();
    let c = build_augmented_dataset(&sources, &cfg, 78, target).unwrap();
    let same = a.len() == b.len()
        && a.iter().zip(&b).all(|(x, y)| {
            x.spec == y.spec && x.seed == y.seed && bits_equal(x.image.voxels(), y.image.voxels()) && bits_equal(x.target.voxels(), y.target.voxels())
        });
    let differs = a.iter().zip(&c).any(|(x, y)| x.spec != y.spec);
    out.push(Check {
        name: "dataset build reproducible",
        passed: same && differs && a.len() == 18,
        detail: format!("{} items, identical rebuild {same}, other seed differs {differs}", a.len()),
    });

    out
}
