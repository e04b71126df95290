//! Independent reference implementations used only by tests.
//!
//! Nothing here calls into the code paths it is used to check: convolutions
//! are direct nested loops, gradients are central differences, votes are
//! brute-force tallies.

#![allow(dead_code)]

use lmscnet::tensor::{self, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Direct 3-axis cross-correlation. `x` is `[B, Cin, D, H, W]`, `w` is
/// `[Cout, Cin, kD, kH, kW]`, per-axis stride/pad/dilation.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_oracle(
    x: &[f64],
    xs: [usize; 5],
    w: &[f64],
    ws: [usize; 5],
    b: &[f64],
    stride: [usize; 3],
    pad: [usize; 3],
    dil: [usize; 3],
) -> (Vec<f64>, [usize; 5]) {
    let [nb, cin, d, h, wd] = xs;
    let [cout, _, kd, kh, kw] = ws;
    let out_ext =
        |n: usize, k: usize, a: usize| (n + 2 * pad[a] - dil[a] * (k - 1) - 1) / stride[a] + 1;
    let (od, oh, ow) = (out_ext(d, kd, 0), out_ext(h, kh, 1), out_ext(wd, kw, 2));
    let mut y = vec![0.0; nb * cout * od * oh * ow];
    for bi in 0..nb {
        for co in 0..cout {
            for z in 0..od {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for a in 0..kd {
                                for p in 0..kh {
                                    for q in 0..kw {
                                        let zz =
                                            (z * stride[0] + a * dil[0]) as isize - pad[0] as isize;
                                        let ii =
                                            (i * stride[1] + p * dil[1]) as isize - pad[1] as isize;
                                        let jj =
                                            (j * stride[2] + q * dil[2]) as isize - pad[2] as isize;
                                        if zz < 0 || ii < 0 || jj < 0 {
                                            continue;
                                        }
                                        let (zz, ii, jj) = (zz as usize, ii as usize, jj as usize);
                                        if zz >= d || ii >= h || jj >= wd {
                                            continue;
                                        }
                                        let xv = x[(((bi * cin + ci) * d + zz) * h + ii) * wd + jj];
                                        let wv = w[(((co * cin + ci) * kd + a) * kh + p) * kw + q];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        y[(((bi * cout + co) * od + z) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
    }
    (y, [nb, cout, od, oh, ow])
}

/// Direct 2D convolution built on the 3-axis oracle with a unit depth.
pub fn conv2d_oracle(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    b: &[f64],
    stride: usize,
    pad: usize,
    dil: usize,
) -> (Vec<f64>, [usize; 4]) {
    let (y, s) = conv3d_oracle(
        x,
        [xs[0], xs[1], 1, xs[2], xs[3]],
        w,
        [ws[0], ws[1], 1, ws[2], ws[3]],
        b,
        [1, stride, stride],
        [0, pad, pad],
        [1, dil, dil],
    );
    (y, [s[0], s[1], s[3], s[4]])
}

/// Direct scatter form of the transposed convolution (`w` is `[Cin, Cout, kH, kW]`).
pub fn conv_transpose2d_oracle(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    b: &[f64],
    stride: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [nb, cin, h, wd] = xs;
    let [_, cout, kh, kw] = ws;
    let (oh, ow) = ((h - 1) * stride + kh, (wd - 1) * stride + kw);
    let mut y = vec![0.0; nb * cout * oh * ow];
    for bi in 0..nb {
        for co in 0..cout {
            for i in 0..oh {
                for j in 0..ow {
                    y[((bi * cout + co) * oh + i) * ow + j] = b[co];
                }
            }
        }
        for ci in 0..cin {
            for i in 0..h {
                for j in 0..wd {
                    let xv = x[((bi * cin + ci) * h + i) * wd + j];
                    for co in 0..cout {
                        for p in 0..kh {
                            for q in 0..kw {
                                let wv = w[((ci * cout + co) * kh + p) * kw + q];
                                y[((bi * cout + co) * oh + i * stride + p) * ow
                                    + j * stride
                                    + q] += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    (y, [nb, cout, oh, ow])
}

/// Window-scan max pooling.
pub fn maxpool2d_oracle(x: &[f64], xs: [usize; 4], k: usize) -> Vec<f64> {
    let [nb, c, h, w] = xs;
    let mut y = Vec::new();
    for plane in 0..nb * c {
        for i in 0..h / k {
            for j in 0..w / k {
                let mut m = f64::NEG_INFINITY;
                for p in 0..k {
                    for q in 0..k {
                        m = m.max(x[plane * h * w + (i * k + p) * w + j * k + q]);
                    }
                }
                y.push(m);
            }
        }
    }
    y
}

/// Softmax + NLL written out per voxel, no shared code with the kernel.
pub fn cross_entropy_oracle(
    logits: &[f64],
    batch: usize,
    classes: usize,
    spatial: usize,
    labels: &[u16],
    weights: &[f64],
    mask: &[bool],
) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for b in 0..batch {
        for s in 0..spatial {
            let pos = b * spatial + s;
            if !mask[pos] {
                continue;
            }
            let z: Vec<f64> = (0..classes)
                .map(|c| logits[(b * classes + c) * spatial + s])
                .collect();
            let denom: f64 = z.iter().map(|v| v.exp()).sum();
            let p = z[labels[pos] as usize].exp() / denom;
            total += -weights[labels[pos] as usize] * p.ln();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Largest relative error between the analytic gradient of
/// `sum(f(inputs) * projection)` and central differences with step `h`.
///
/// Returns one error per input tensor.
pub fn gradient_check<F>(inputs: &[(Vec<f64>, Vec<usize>)], seed: u64, h: f64, f: F) -> Vec<f64>
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    let leaves: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|(d, s)| Tensor::param(d.clone(), s).unwrap())
        .collect();
    let out = f(&leaves);
    let mut r = rng(seed);
    let projection = Tensor::new(random_vec(&mut r, out.numel()), out.shape()).unwrap();
    let objective = |ts: &[Tensor<f64>]| {
        let y = f(ts);
        tensor::sum(&tensor::mul(&y, &projection).unwrap())
    };
    objective(&leaves).backward().unwrap();

    let consts = |data: &[Vec<f64>]| -> Vec<Tensor<f64>> {
        data.iter()
            .zip(inputs)
            .map(|(d, (_, s))| Tensor::new(d.clone(), s).unwrap())
            .collect()
    };
    let base: Vec<Vec<f64>> = inputs.iter().map(|(d, _)| d.clone()).collect();
    let mut errs = Vec::new();
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let mut worst = 0.0f64;
        for i in 0..base[k].len() {
            let mut plus = base.clone();
            plus[k][i] += h;
            let mut minus = base.clone();
            minus[k][i] -= h;
            let fp = objective(&consts(&plus)).item();
            let fm = objective(&consts(&minus)).item();
            let numeric = (fp - fm) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic[i] - numeric).abs() / denom);
        }
        errs.push(worst);
    }
    errs
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub const UNKNOWN: u16 = u16::MAX;

/// Block vote by explicit tally: the most frequent known label, ties to the
/// smallest id, unknown if the block has no known label.
pub fn majority_pool_oracle(labels: &[u16], dims: [usize; 3], f: usize) -> Vec<u16> {
    let [nx, ny, nz] = dims;
    let mut out = Vec::new();
    for bx in 0..nx / f {
        for by in 0..ny / f {
            for bz in 0..nz / f {
                let mut tally = std::collections::BTreeMap::<u16, usize>::new();
                for x in bx * f..bx * f + f {
                    for y in by * f..by * f + f {
                        for z in bz * f..bz * f + f {
                            let l = labels[(x * ny + y) * nz + z];
                            if l != UNKNOWN {
                                *tally.entry(l).or_default() += 1;
                            }
                        }
                    }
                }
                let best = tally.iter().map(|(&l, &c)| (std::cmp::Reverse(c), l)).min();
                out.push(best.map_or(UNKNOWN, |(_, l)| l));
            }
        }
    }
    out
}

/// Set of voxel coordinates hit by points, by per-point floor division.
pub fn bin_points_oracle(
    points: &[[f32; 3]],
    origin: [f64; 3],
    dims: [usize; 3],
    voxel: f64,
) -> std::collections::BTreeSet<[usize; 3]> {
    let mut set = std::collections::BTreeSet::new();
    for p in points {
        let c = [0, 1, 2].map(|a| ((p[a] as f64 - origin[a]) / voxel).floor());
        if (0..3).all(|a| c[a] >= 0.0 && c[a] < dims[a] as f64) {
            set.insert(c.map(|v| v as usize));
        }
    }
    set
}
