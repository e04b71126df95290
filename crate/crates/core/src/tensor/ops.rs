use super::{Op, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Elementwise `max(0, x)`; the subgradient at 0 is 0.
pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect();
    Tensor::from_op(data, input.shape().to_vec(), Op::Relu, vec![input.clone()])
}

pub(super) fn relu_backward<T: Scalar>(input: &Tensor<T>, g: &[T]) -> Vec<T> {
    input
        .data()
        .iter()
        .zip(g)
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect()
}

/// Max pooling over `[B, C, H, W]`. Ties resolve to the first element in
/// row-major scan order of the window.
pub fn maxpool2d<T: Scalar>(input: &Tensor<T>, kernel: usize, stride: usize) -> Result<Tensor<T>> {
    const OP: &str = "maxpool2d";
    if input.ndim() != 4 {
        return Err(Error::dim(OP, "input rank", 4, input.ndim()));
    }
    let [b, c, h, w] = [
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    ];
    if kernel == 0 || stride == 0 || h % stride != 0 || w % stride != 0 || h < kernel || w < kernel
    {
        return Err(Error::geometry(
            OP,
            format!("extent {h}x{w} incompatible with kernel {kernel}, stride {stride}"),
        ));
    }
    let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
    let x = input.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + i * stride * w + j * stride;
                for di in 0..kernel {
                    for dj in 0..kernel {
                        let idx = base + (i * stride + di) * w + j * stride + dj;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok(Tensor::from_op(
        out,
        vec![b, c, oh, ow],
        Op::MaxPool { argmax },
        vec![input.clone()],
    ))
}

pub(super) fn maxpool_backward<T: Scalar>(input: &Tensor<T>, argmax: &[usize], g: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); input.numel()];
    for (&idx, &gv) in argmax.iter().zip(g) {
        dx[idx] += gv;
    }
    dx
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis + 1..].iter().product(),
    )
}

/// Stack tensors along `axis`; all other extents must agree.
pub fn concat<T: Scalar>(inputs: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    const OP: &str = "concat";
    let first = inputs
        .first()
        .ok_or_else(|| Error::Data("concat of an empty list".into()))?;
    let rank = first.ndim();
    if axis >= rank {
        return Err(Error::dim(OP, "axis", rank, axis));
    }
    for t in &inputs[1..] {
        if t.ndim() != rank {
            return Err(Error::dim(OP, "rank", rank, t.ndim()));
        }
        for a in (0..rank).filter(|&a| a != axis) {
            if t.shape()[a] != first.shape()[a] {
                return Err(Error::dim(
                    OP,
                    format!("axis {a}"),
                    first.shape()[a],
                    t.shape()[a],
                ));
            }
        }
    }
    let (outer, inner) = outer_inner(first.shape(), axis);
    let total: usize = inputs.iter().map(|t| t.shape()[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for t in inputs {
            let block = t.shape()[axis] * inner;
            data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_op(
        data,
        shape,
        Op::Concat { axis },
        inputs.to_vec(),
    ))
}

pub(super) fn concat_backward<T: Scalar>(
    inputs: &[Tensor<T>],
    axis: usize,
    g: &[T],
) -> Vec<Option<Vec<T>>> {
    let (outer, inner) = outer_inner(inputs[0].shape(), axis);
    let total: usize = inputs.iter().map(|t| t.shape()[axis]).sum();
    let mut grads: Vec<Vec<T>> = inputs
        .iter()
        .map(|t| Vec::with_capacity(t.numel()))
        .collect();
    for o in 0..outer {
        let mut offset = o * total * inner;
        for (t, dst) in inputs.iter().zip(grads.iter_mut()) {
            let block = t.shape()[axis] * inner;
            dst.extend_from_slice(&g[offset..offset + block]);
            offset += block;
        }
    }
    grads
        .into_iter()
        .zip(inputs)
        .map(|(g, t)| t.requires_grad().then_some(g))
        .collect()
}

/// Inverse of [`concat`]: cut `input` along `axis` into pieces of the given sizes.
/// The pieces are constants (no graph).
pub fn split<T: Scalar>(input: &Tensor<T>, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    if axis >= input.ndim() {
        return Err(Error::dim("split", "axis", input.ndim(), axis));
    }
    let total: usize = sizes.iter().sum();
    if total != input.shape()[axis] {
        return Err(Error::dim(
            "split",
            format!("axis {axis}"),
            input.shape()[axis],
            total,
        ));
    }
    let (outer, inner) = outer_inner(input.shape(), axis);
    let mut pieces: Vec<Vec<T>> = sizes
        .iter()
        .map(|s| Vec::with_capacity(outer * s * inner))
        .collect();
    for o in 0..outer {
        let mut offset = o * total * inner;
        for (s, dst) in sizes.iter().zip(pieces.iter_mut()) {
            dst.extend_from_slice(&input.data()[offset..offset + s * inner]);
            offset += s * inner;
        }
    }
    pieces
        .into_iter()
        .zip(sizes)
        .map(|(data, &s)| {
            let mut shape = input.shape().to_vec();
            shape[axis] = s;
            Tensor::new(data, &shape)
        })
        .collect()
}

/// Nearest-neighbour upsampling of `[B, C, H, W]` by an integer factor.
pub fn nearest_upsample2d<T: Scalar>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    const OP: &str = "nearest_upsample2d";
    if input.ndim() != 4 {
        return Err(Error::dim(OP, "input rank", 4, input.ndim()));
    }
    if factor == 0 {
        return Err(Error::geometry(OP, "factor must be at least 1"));
    }
    let [b, c, h, w] = [
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    ];
    let (oh, ow) = (h * factor, w * factor);
    let x = input.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        for i in 0..oh {
            let row = &src[(i / factor) * w..(i / factor + 1) * w];
            for j in 0..ow {
                out.push(row[j / factor]);
            }
        }
    }
    Ok(Tensor::from_op(
        out,
        vec![b, c, oh, ow],
        Op::Upsample { factor },
        vec![input.clone()],
    ))
}

pub(super) fn upsample_backward<T: Scalar>(input: &Tensor<T>, factor: usize, g: &[T]) -> Vec<T> {
    let [_, _, h, w] = [
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    ];
    let (oh, ow) = (h * factor, w * factor);
    let mut dx = vec![T::zero(); input.numel()];
    for (plane, dst) in dx.chunks_mut(h * w).enumerate() {
        let src = &g[plane * oh * ow..(plane + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                dst[(i / factor) * w + j / factor] += src[i * ow + j];
            }
        }
    }
    dx
}

/// Reinterpret the buffer under a new shape with the same element count.
pub fn reshape<T: Scalar>(input: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let numel: usize = shape.iter().product();
    if numel != input.numel() {
        return Err(Error::dim("reshape", "element count", input.numel(), numel));
    }
    Ok(Tensor::from_op(
        input.data().to_vec(),
        shape.to_vec(),
        Op::Reshape,
        vec![input.clone()],
    ))
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for a in (0..shape.len().saturating_sub(1)).rev() {
        s[a] = s[a + 1] * shape[a + 1];
    }
    s
}

/// Gather `src` (shape `src_shape`) into the layout whose axis `a` is source axis `perm[a]`.
fn permute_data<T: Scalar>(src: &[T], src_shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| src_shape[p]).collect();
    let src_strides = strides(src_shape);
    let step: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for a in (0..rank).rev() {
            idx[a] += 1;
            offset += step[a];
            if idx[a] < out_shape[a] {
                break;
            }
            offset -= step[a] * out_shape[a];
            idx[a] = 0;
        }
    }
    (out, out_shape)
}

/// Axis permutation: output axis `a` is input axis `perm[a]`.
pub fn permute<T: Scalar>(input: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let rank = input.ndim();
    let mut seen = vec![false; rank];
    if perm.len() != rank
        || perm
            .iter()
            .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
    {
        return Err(Error::Data(format!(
            "permute: {perm:?} is not a permutation of {rank} axes"
        )));
    }
    let (data, shape) = permute_data(input.data(), input.shape(), perm);
    Ok(Tensor::from_op(
        data,
        shape,
        Op::Permute {
            perm: perm.to_vec(),
        },
        vec![input.clone()],
    ))
}

pub(super) fn permute_backward<T: Scalar>(out_shape: &[usize], perm: &[usize], g: &[T]) -> Vec<T> {
    let mut inverse = vec![0; perm.len()];
    for (a, &p) in perm.iter().enumerate() {
        inverse[p] = a;
    }
    permute_data(g, out_shape, &inverse).0
}

/// Elementwise sum of two tensors of identical shape.
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Data(format!(
            "add: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + y)
        .collect();
    Ok(Tensor::from_op(
        data,
        a.shape().to_vec(),
        Op::Add,
        vec![a.clone(), b.clone()],
    ))
}

/// Elementwise product of two tensors of identical shape.
pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Data(format!(
            "mul: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x * y)
        .collect();
    Ok(Tensor::from_op(
        data,
        a.shape().to_vec(),
        Op::Mul,
        vec![a.clone(), b.clone()],
    ))
}

pub fn scale<T: Scalar>(input: &Tensor<T>, factor: T) -> Tensor<T> {
    let data = input.data().iter().map(|&v| v * factor).collect();
    Tensor::from_op(
        data,
        input.shape().to_vec(),
        Op::Scale(factor),
        vec![input.clone()],
    )
}

/// Sum of all elements, accumulated in `f64`.
pub fn sum<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let total: f64 = input.data().iter().map(|v| v.as_f64()).sum();
    Tensor::from_op(
        vec![T::from_f64_lossy(total)],
        Vec::new(),
        Op::Sum,
        vec![input.clone()],
    )
}
