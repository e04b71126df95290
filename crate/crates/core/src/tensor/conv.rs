//! Dense 2D/3D convolution and 2D transposed convolution.
//!
//! Everything is expressed on a single 3-axis geometry (`conv2d` uses a unit
//! depth axis). The forward pass lowers chunks of output positions to a
//! column matrix and multiplies by the weight matrix; the transposed
//! convolution is the data-gradient of the matching strided convolution, so
//! the two are exact adjoints of each other up to rounding.

use rayon::prelude::*;

use super::{Op, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Upper bound on elements in one column buffer.
const COLS_BUDGET: usize = 1 << 18;

/// `floor((n + 2p - d(k-1) - 1) / s) + 1`, or `None` when that is below 1.
pub fn conv_output_extent(
    n: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Option<usize> {
    if kernel == 0 || stride == 0 || dilation == 0 {
        return None;
    }
    let span = dilation * (kernel - 1) + 1;
    let padded = n + 2 * pad;
    (padded >= span).then(|| (padded - span) / stride + 1)
}

/// A run of output positions within one output row.
struct Segment {
    j0: usize,
    n: usize,
    d: isize,
    h: isize,
    w: isize,
}

/// Geometry of a convolution from `input` space to `output` space.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub dilation: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    fn new(
        op: &'static str,
        batch: usize,
        cin: usize,
        cout: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
        dilation: [usize; 3],
    ) -> Result<Self> {
        let mut output = [0; 3];
        for a in 0..3 {
            output[a] = conv_output_extent(input[a], kernel[a], stride[a], pad[a], dilation[a]).ok_or_else(|| {
                Error::geometry(
                    op,
                    format!(
                        "axis {a}: extent {} with kernel {}, stride {}, padding {}, dilation {} gives no output",
                        input[a], kernel[a], stride[a], pad[a], dilation[a]
                    ),
                )
            })?;
        }
        Ok(ConvGeom {
            batch,
            cin,
            cout,
            input,
            kernel,
            stride,
            pad,
            dilation,
            output,
        })
    }

    pub fn in_vol(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_vol(&self) -> usize {
        self.output.iter().product()
    }

    pub fn kernel_vol(&self) -> usize {
        self.kernel.iter().product()
    }

    fn rows(&self) -> usize {
        self.cin * self.kernel_vol()
    }

    fn chunks(&self) -> impl Iterator<Item = (usize, usize)> {
        let total = self.out_vol();
        let len = (COLS_BUDGET / self.rows()).clamp(1, total.max(1));
        (0..total)
            .step_by(len)
            .map(move |p0| (p0, (p0 + len).min(total)))
    }

    /// Column matrix `[cin * kvol, p1 - p0]` for output positions `p0..p1`.
    fn im2col<T: Scalar>(&self, x: &[T], p0: usize, p1: usize, cols: &mut [T]) {
        let len = p1 - p0;
        let segs = self.segments(p0, p1);
        let in_vol = self.in_vol();
        let sw = self.stride[2];
        let mut row = 0;
        for ci in 0..self.cin {
            let xc = &x[ci * in_vol..(ci + 1) * in_vol];
            self.for_each_tap(|od, oh, ow| {
                let dst = &mut cols[row * len..(row + 1) * len];
                for s in &segs {
                    let out = &mut dst[s.j0..s.j0 + s.n];
                    match self.tap_span(s, od, oh, ow) {
                        None => out.fill(T::zero()),
                        Some((base, lo, hi)) => {
                            out[..lo].fill(T::zero());
                            out[hi..].fill(T::zero());
                            if sw == 1 {
                                out[lo..hi].copy_from_slice(&xc[base..base + hi - lo]);
                            } else {
                                for i in lo..hi {
                                    out[i] = xc[base + (i - lo) * sw];
                                }
                            }
                        }
                    }
                }
                row += 1;
            });
        }
    }

    /// Scatter-add of a column matrix back to input space (adjoint of `im2col`).
    fn col2im<T: Scalar>(&self, cols: &[T], p0: usize, p1: usize, dx: &mut [T]) {
        let len = p1 - p0;
        let segs = self.segments(p0, p1);
        let in_vol = self.in_vol();
        let sw = self.stride[2];
        let mut row = 0;
        for ci in 0..self.cin {
            let xc = &mut dx[ci * in_vol..(ci + 1) * in_vol];
            self.for_each_tap(|od, oh, ow| {
                let src = &cols[row * len..(row + 1) * len];
                for s in &segs {
                    if let Some((base, lo, hi)) = self.tap_span(s, od, oh, ow) {
                        let inp = &src[s.j0..s.j0 + s.n];
                        for i in lo..hi {
                            xc[base + (i - lo) * sw] += inp[i];
                        }
                    }
                }
                row += 1;
            });
        }
    }

    /// Calls `f(od, oh, ow)` with the dilated offset of every kernel tap, in
    /// weight order.
    fn for_each_tap(&self, mut f: impl FnMut(isize, isize, isize)) {
        for kd in 0..self.kernel[0] {
            for kh in 0..self.kernel[1] {
                for kw in 0..self.kernel[2] {
                    f(
                        (kd * self.dilation[0]) as isize,
                        (kh * self.dilation[1]) as isize,
                        (kw * self.dilation[2]) as isize,
                    );
                }
            }
        }
    }

    /// Splits output positions `p0..p1` into runs that share an output row.
    fn segments(&self, p0: usize, p1: usize) -> Vec<Segment> {
        let [_, oh_n, ow_n] = self.output;
        let mut segs = Vec::new();
        let mut p = p0;
        while p < p1 {
            let ow = p % ow_n;
            let oh = (p / ow_n) % oh_n;
            let od = p / (ow_n * oh_n);
            let n = (ow_n - ow).min(p1 - p);
            segs.push(Segment {
                j0: p - p0,
                n,
                d: (od * self.stride[0]) as isize - self.pad[0] as isize,
                h: (oh * self.stride[1]) as isize - self.pad[1] as isize,
                w: (ow * self.stride[2]) as isize - self.pad[2] as isize,
            });
            p += n;
        }
        segs
    }

    /// For one segment and tap: the half-open range `lo..hi` of segment
    /// elements that land inside the input, and the input offset of `lo`. `None` when the row is entirely out of range.
    #[inline]
    fn tap_span(
        &self,
        s: &Segment,
        od: isize,
        oh: isize,
        ow: isize,
    ) -> Option<(usize, usize, usize)> {
        let [id, ih, iw] = self.input.map(|v| v as isize);
        let (d, h, w0) = (s.d + od, s.h + oh, s.w + ow);
        if d < 0 || d >= id || h < 0 || h >= ih {
            return None;
        }
        let sw = self.stride[2] as isize;
        // smallest i with w0 + i*sw >= 0, and smallest i with w0 + i*sw >= iw
        let first = |bound: isize| -> usize {
            if w0 >= bound {
                0
            } else {
                ((bound - w0 + sw - 1) / sw) as usize
            }
        };
        let lo = first(0).min(s.n);
        let hi = first(iw).min(s.n);
        if lo >= hi {
            return None;
        }
        let at_lo = (d * ih + h) * iw + w0 + lo as isize * sw;
        Some((at_lo as usize, lo, hi))
    }

    /// `out = W * im2col(x)` for one sample; `out` is overwritten.
    pub fn forward_sample<T: Scalar>(&self, x: &[T], w: &[T], out: &mut [T]) {
        let rows = self.rows();
        let out_vol = self.out_vol();
        let mut cols = Vec::new();
        for (p0, p1) in self.chunks() {
            let len = p1 - p0;
            cols.resize(rows * len, T::zero());
            self.im2col(x, p0, p1, &mut cols);
            unsafe {
                T::gemm(
                    self.cout,
                    rows,
                    len,
                    T::one(),
                    w.as_ptr(),
                    rows as isize,
                    1,
                    cols.as_ptr(),
                    len as isize,
                    1,
                    T::zero(),
                    out.as_mut_ptr().add(p0),
                    out_vol as isize,
                    1,
                );
            }
        }
    }

    /// `dx += col2im(W^T * g)` for one sample.
    pub fn backward_data_sample<T: Scalar>(&self, g: &[T], w: &[T], dx: &mut [T]) {
        let rows = self.rows();
        let out_vol = self.out_vol();
        let mut cols = Vec::new();
        for (p0, p1) in self.chunks() {
            let len = p1 - p0;
            cols.resize(rows * len, T::zero());
            unsafe {
                T::gemm(
                    rows,
                    self.cout,
                    len,
                    T::one(),
                    w.as_ptr(),
                    1,
                    rows as isize,
                    g.as_ptr().add(p0),
                    out_vol as isize,
                    1,
                    T::zero(),
                    cols.as_mut_ptr(),
                    len as isize,
                    1,
                );
            }
            self.col2im(&cols, p0, p1, dx);
        }
    }

    /// `dw += g * im2col(x)^T` for one sample.
    pub fn backward_weight_sample<T: Scalar>(&self, x: &[T], g: &[T], dw: &mut [T]) {
        let rows = self.rows();
        let out_vol = self.out_vol();
        let mut cols = Vec::new();
        let mut cols_t = Vec::new();
        for (p0, p1) in self.chunks() {
            let len = p1 - p0;
            cols.resize(rows * len, T::zero());
            cols_t.resize(rows * len, T::zero());
            self.im2col(x, p0, p1, &mut cols);
            // gemm packs B along rows; a row-major [len, rows] copy is
            // much cheaper to pack than the strided view of `cols`.
            transpose(&cols, rows, len, &mut cols_t);
            unsafe {
                T::gemm(
                    self.cout,
                    len,
                    rows,
                    T::one(),
                    g.as_ptr().add(p0),
                    out_vol as isize,
                    1,
                    cols_t.as_ptr(),
                    rows as isize,
                    1,
                    T::one(),
                    dw.as_mut_ptr(),
                    rows as isize,
                    1,
                );
            }
        }
    }
}

/// Row-major `[r, c]` to row-major `[c, r]`, in cache-sized tiles.
fn transpose<T: Copy>(src: &[T], r: usize, c: usize, dst: &mut [T]) {
    const TILE: usize = 32;
    for i0 in (0..r).step_by(TILE) {
        for j0 in (0..c).step_by(TILE) {
            for i in i0..(i0 + TILE).min(r) {
                for j in j0..(j0 + TILE).min(c) {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
    }
}

fn expect_rank<T: Scalar>(op: &'static str, name: &str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.ndim() != rank {
        return Err(Error::dim(op, format!("{name} rank"), rank, t.ndim()));
    }
    Ok(())
}

fn check_bias<T: Scalar>(op: &'static str, bias: &Tensor<T>, channels: usize) -> Result<()> {
    expect_rank(op, "bias", bias, 1)?;
    if bias.shape()[0] != channels {
        return Err(Error::dim(op, "bias channels", channels, bias.shape()[0]));
    }
    Ok(())
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], vol: usize) {
    for sample in out.chunks_mut(bias.len() * vol) {
        for (block, &b) in sample.chunks_mut(vol).zip(bias) {
            block.iter_mut().for_each(|v| *v += b);
        }
    }
}

fn bias_grad<T: Scalar>(g: &[T], channels: usize, vol: usize) -> Vec<T> {
    let mut acc = vec![0.0f64; channels];
    for sample in g.chunks(channels * vol) {
        for (c, block) in sample.chunks(vol).enumerate() {
            acc[c] += block.iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    acc.into_iter().map(T::from_f64_lossy).collect()
}

fn run_conv<T: Scalar>(
    geom: ConvGeom,
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    shape: Vec<usize>,
) -> Tensor<T> {
    let in_stride = geom.cin * geom.in_vol();
    let out_vol = geom.out_vol();
    let mut out = vec![T::zero(); geom.batch * geom.cout * out_vol];
    out.par_chunks_mut(geom.cout * out_vol)
        .zip(x.data().par_chunks(in_stride))
        .for_each(|(o, xs)| geom.forward_sample(xs, w.data(), o));
    add_bias(&mut out, b.data(), out_vol);
    Tensor::from_op(
        out,
        shape,
        Op::Conv(geom),
        vec![x.clone(), w.clone(), b.clone()],
    )
}

/// 2D cross-correlation over `[B, Cin, H, W]` with weight `[Cout, Cin, kH, kW]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Result<Tensor<T>> {
    const OP: &str = "conv2d";
    expect_rank(OP, "input", input, 4)?;
    expect_rank(OP, "weight", weight, 4)?;
    let [b, cin, h, w] = [
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    ];
    let [cout, wcin, kh, kw] = [
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    ];
    if wcin != cin {
        return Err(Error::dim(OP, "input channels", wcin, cin));
    }
    check_bias(OP, bias, cout)?;
    let geom = ConvGeom::new(
        OP,
        b,
        cin,
        cout,
        [1, h, w],
        [1, kh, kw],
        [1, stride, stride],
        [0, padding, padding],
        [1, dilation, dilation],
    )?;
    let shape = vec![b, cout, geom.output[1], geom.output[2]];
    Ok(run_conv(geom, input, weight, bias, shape))
}

/// 3D cross-correlation over `[B, Cin, D, H, W]` with weight `[Cout, Cin, kD, kH, kW]`.
pub fn conv3d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Result<Tensor<T>> {
    const OP: &str = "conv3d";
    expect_rank(OP, "input", input, 5)?;
    expect_rank(OP, "weight", weight, 5)?;
    let s = input.shape();
    let ws = weight.shape();
    if ws[1] != s[1] {
        return Err(Error::dim(OP, "input channels", ws[1], s[1]));
    }
    check_bias(OP, bias, ws[0])?;
    let geom = ConvGeom::new(
        OP,
        s[0],
        s[1],
        ws[0],
        [s[2], s[3], s[4]],
        [ws[2], ws[3], ws[4]],
        [stride; 3],
        [padding; 3],
        [dilation; 3],
    )?;
    let shape = vec![s[0], ws[0], geom.output[0], geom.output[1], geom.output[2]];
    Ok(run_conv(geom, input, weight, bias, shape))
}

/// 2D transposed convolution: `[B, Cin, H, W]` to `[B, Cout, (H-1)s+kH, (W-1)s+kW]`
/// with weight `[Cin, Cout, kH, kW]`.
pub fn conv_transpose2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    const OP: &str = "conv_transpose2d";
    expect_rank(OP, "input", input, 4)?;
    expect_rank(OP, "weight", weight, 4)?;
    if stride == 0 {
        return Err(Error::geometry(OP, "stride must be at least 1"));
    }
    let s = input.shape();
    let ws = weight.shape();
    if ws[0] != s[1] {
        return Err(Error::dim(OP, "input channels", ws[0], s[1]));
    }
    let (cin, cout, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if kh == 0 || kw == 0 || s[2] == 0 || s[3] == 0 {
        return Err(Error::geometry(OP, "empty kernel or input"));
    }
    check_bias(OP, bias, cout)?;
    let big = [1, (s[2] - 1) * stride + kh, (s[3] - 1) * stride + kw];
    // The strided convolution this is the adjoint of: big -> small.
    let geom = ConvGeom::new(
        OP,
        s[0],
        cout,
        cin,
        big,
        [1, kh, kw],
        [1, stride, stride],
        [0; 3],
        [1; 3],
    )?;
    debug_assert_eq!(geom.output, [1, s[2], s[3]]);

    let big_vol = geom.in_vol();
    let small_stride = cin * geom.out_vol();
    let mut out = vec![T::zero(); s[0] * cout * big_vol];
    out.par_chunks_mut(cout * big_vol)
        .zip(input.data().par_chunks(small_stride))
        .for_each(|(o, xs)| geom.backward_data_sample(xs, weight.data(), o));
    add_bias(&mut out, bias.data(), big_vol);
    let shape = vec![s[0], cout, big[1], big[2]];
    Ok(Tensor::from_op(
        out,
        shape,
        Op::ConvTranspose(geom),
        vec![input.clone(), weight.clone(), bias.clone()],
    ))
}

pub(crate) fn conv_backward<T: Scalar>(
    geom: &ConvGeom,
    inputs: &[Tensor<T>],
    g: &[T],
    want: [bool; 3],
) -> Vec<Option<Vec<T>>> {
    let (x, w) = (&inputs[0], &inputs[1]);
    let in_stride = geom.cin * geom.in_vol();
    let out_stride = geom.cout * geom.out_vol();

    let dx = want[0].then(|| {
        let mut dx = vec![T::zero(); x.numel()];
        dx.par_chunks_mut(in_stride)
            .zip(g.par_chunks(out_stride))
            .for_each(|(d, gs)| geom.backward_data_sample(gs, w.data(), d));
        dx
    });
    let dw = want[1].then(|| {
        let mut dw = vec![T::zero(); w.numel()];
        for (xs, gs) in x.data().chunks(in_stride).zip(g.chunks(out_stride)) {
            geom.backward_weight_sample(xs, gs, &mut dw);
        }
        dw
    });
    let db = want[2].then(|| bias_grad(g, geom.cout, geom.out_vol()));
    vec![dx, dw, db]
}

/// `g` lives in the big (conv input) space, `x` in the small (conv output) space.
pub(crate) fn conv_transpose_backward<T: Scalar>(
    geom: &ConvGeom,
    inputs: &[Tensor<T>],
    g: &[T],
    want: [bool; 3],
) -> Vec<Option<Vec<T>>> {
    let (x, w) = (&inputs[0], &inputs[1]);
    let big_stride = geom.cin * geom.in_vol();
    let small_stride = geom.cout * geom.out_vol();

    let dx = want[0].then(|| {
        let mut dx = vec![T::zero(); x.numel()];
        dx.par_chunks_mut(small_stride)
            .zip(g.par_chunks(big_stride))
            .for_each(|(d, gs)| geom.forward_sample(gs, w.data(), d));
        dx
    });
    let dw = want[1].then(|| {
        let mut dw = vec![T::zero(); w.numel()];
        for (gs, xs) in g.chunks(big_stride).zip(x.data().chunks(small_stride)) {
            geom.backward_weight_sample(gs, xs, &mut dw);
        }
        dw
    });
    let db = want[2].then(|| bias_grad(g, geom.cin, geom.in_vol()));
    vec![dx, dw, db]
}
