//! Forward and backward kernels on plain tensors. The [`Graph`](crate::Graph)
//! records calls to these; they are also usable directly for inference.
//!
//! Layouts are fixed: volumes are `[N, C, D, H, W]`, convolution kernels are
//! `[F, C, kd, kh, kw]`, dense weights are `[K, M]`.

use crate::linalg::{gemm, MatRef};
use crate::{Element, Result, Tensor, TensorError};

/// Shape bookkeeping for a 3D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub output: [usize; 3],
    pub stride: usize,
    pub padding: usize,
}

impl Conv3dGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 5 {
            return Err(TensorError::shape("conv3d", "input [N, C, D, H, W]", input));
        }
        if kernel.len() != 5 {
            return Err(TensorError::shape("conv3d", "kernel [F, C, kd, kh, kw]", kernel));
        }
        if kernel[1] != input[1] {
            return Err(TensorError::shape(
                "conv3d",
                format!("kernel with {} input channels", input[1]),
                kernel,
            ));
        }
        if stride == 0 {
            return Err(TensorError::invalid("conv3d", "stride must be at least 1"));
        }
        let mut output = [0; 3];
        for axis in 0..3 {
            let padded = input[2 + axis] + 2 * padding;
            let k = kernel[2 + axis];
            if k == 0 || k > padded {
                return Err(TensorError::shape(
                    "conv3d",
                    format!("kernel extent <= padded input extent {padded} on axis {axis}"),
                    kernel,
                ));
            }
            output[axis] = (padded - k) / stride + 1;
        }
        Ok(Conv3dGeometry {
            batch: input[0],
            in_channels: input[1],
            out_channels: kernel[0],
            input: [input[2], input[3], input[4]],
            kernel: [kernel[2], kernel[3], kernel[4]],
            output,
            stride,
            padding,
        })
    }

    pub fn output_shape(&self) -> [usize; 5] {
        [
            self.batch,
            self.out_channels,
            self.output[0],
            self.output[1],
            self.output[2],
        ]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    fn out_voxels(&self) -> usize {
        self.output.iter().product()
    }

    fn in_voxels(&self) -> usize {
        self.input.iter().product()
    }

    /// Output positions `[lo, hi)` along one axis whose tap at kernel offset
    /// `k` lands inside the unpadded input.
    fn valid(&self, axis: usize, k: usize) -> (usize, usize) {
        let (s, p, n_in, n_out) = (self.stride, self.padding, self.input[axis], self.output[axis]);
        let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
        let hi = if n_in + p > k {
            ((n_in + p - k - 1) / s + 1).min(n_out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// Visit every (patch row, output voxel, input voxel) triple of one sample
    /// in a fixed order. Taps that fall in the padding are reported as `None`.
    fn for_each_tap(&self, mut visit: impl FnMut(usize, usize, Option<usize>)) {
        let [od, oh, ow] = self.output;
        let [d, h, w] = self.input;
        let [kd, kh, kw] = self.kernel;
        let (s, p) = (self.stride, self.padding);
        let mut row = 0;
        for c in 0..self.in_channels {
            let plane = c * d * h * w;
            for a in 0..kd {
                let (zlo, zhi) = self.valid(0, a);
                for b in 0..kh {
                    let (ylo, yhi) = self.valid(1, b);
                    for e in 0..kw {
                        let (xlo, xhi) = self.valid(2, e);
                        for z in 0..od {
                            for y in 0..oh {
                                let base_out = (z * oh + y) * ow;
                                let inside = (zlo..zhi).contains(&z) && (ylo..yhi).contains(&y);
                                if !inside {
                                    for x in 0..ow {
                                        visit(row, base_out + x, None);
                                    }
                                    continue;
                                }
                                let iz = z * s + a - p;
                                let iy = y * s + b - p;
                                let base_in = plane + (iz * h + iy) * w;
                                for x in 0..ow {
                                    let tap = if (xlo..xhi).contains(&x) {
                                        Some(base_in + x * s + e - p)
                                    } else {
                                        None
                                    };
                                    visit(row, base_out + x, tap);
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    fn im2col<T: Element>(&self, sample: &[T], cols: &mut [T]) {
        let v = self.out_voxels();
        self.for_each_tap(|row, o, tap| {
            cols[row * v + o] = tap.map_or(T::zero(), |i| sample[i]);
        });
    }

    fn col2im<T: Element>(&self, cols: &[T], sample_grad: &mut [T]) {
        let v = self.out_voxels();
        self.for_each_tap(|row, o, tap| {
            if let Some(i) = tap {
                sample_grad[i] = sample_grad[i] + cols[row * v + o];
            }
        });
    }
}

/// 3D cross-correlation with zero padding, optional per-filter bias.
pub fn conv3d<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let geo = Conv3dGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [geo.out_channels] {
            return Err(TensorError::shape(
                "conv3d",
                format!("bias [{}]", geo.out_channels),
                b.shape(),
            ));
        }
    }
    let (k, v, f) = (geo.patch_len(), geo.out_voxels(), geo.out_channels);
    let in_len = geo.in_channels * geo.in_voxels();
    let mut out = vec![T::zero(); geo.batch * f * v];
    let mut cols = vec![T::zero(); k * v];
    for n in 0..geo.batch {
        geo.im2col(&input.data()[n * in_len..(n + 1) * in_len], &mut cols);
        let out_n = &mut out[n * f * v..(n + 1) * f * v];
        gemm(
            MatRef::row_major(kernel.data(), f, k),
            MatRef::row_major(&cols, k, v),
            out_n,
            false,
        );
        if let Some(b) = bias {
            for (row, &bf) in out_n.chunks_exact_mut(v).zip(b.data()) {
                row.iter_mut().for_each(|x| *x = *x + bf);
            }
        }
    }
    Ok(Tensor::from_parts(geo.output_shape().to_vec(), out))
}

/// Gradients of [`conv3d`] with respect to input, kernel and bias. The input
/// and kernel gradients are only computed when requested.
pub struct Conv3dGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Option<Tensor<T>>,
    pub bias: Tensor<T>,
}

pub fn conv3d_backward<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    need_input: bool,
    need_kernel: bool,
) -> Result<Conv3dGrads<T>> {
    let geo = Conv3dGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    if grad_out.shape() != geo.output_shape() {
        return Err(TensorError::shape(
            "conv3d_backward",
            format!("{:?}", geo.output_shape()),
            grad_out.shape(),
        ));
    }
    let (k, v, f) = (geo.patch_len(), geo.out_voxels(), geo.out_channels);
    let in_len = geo.in_channels * geo.in_voxels();
    let mut d_input = need_input.then(|| vec![T::zero(); input.len()]);
    let mut d_kernel = need_kernel.then(|| vec![T::zero(); kernel.len()]);
    let mut d_bias = vec![T::zero(); f];
    let mut cols = vec![T::zero(); k * v];
    for n in 0..geo.batch {
        let g_n = &grad_out.data()[n * f * v..(n + 1) * f * v];
        for (acc, row) in d_bias.iter_mut().zip(g_n.chunks_exact(v)) {
            *acc = row.iter().fold(*acc, |s, &x| s + x);
        }
        if let Some(dk) = d_kernel.as_mut() {
            geo.im2col(&input.data()[n * in_len..(n + 1) * in_len], &mut cols);
            gemm(MatRef::row_major(g_n, f, v), MatRef::transposed(&cols, k, v), dk, n > 0);
        }
        if let Some(di) = d_input.as_mut() {
            gemm(
                MatRef::transposed(kernel.data(), f, k),
                MatRef::row_major(g_n, f, v),
                &mut cols,
                false,
            );
            geo.col2im(&cols, &mut di[n * in_len..(n + 1) * in_len]);
        }
    }
    Ok(Conv3dGrads {
        input: d_input.map(|d| Tensor::from_parts(input.shape().to_vec(), d)),
        kernel: d_kernel.map(|d| Tensor::from_parts(kernel.shape().to_vec(), d)),
        bias: Tensor::from_parts(vec![f], d_bias),
    })
}

/// Affine map `input · weight + bias` for `input [N, K]`, `weight [K, M]`.
pub fn dense<T: Element>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k, m) = dense_dims(input, weight, bias)?;
    let mut out = vec![T::zero(); n * m];
    gemm(
        MatRef::row_major(input.data(), n, k),
        MatRef::row_major(weight.data(), k, m),
        &mut out,
        false,
    );
    for row in out.chunks_exact_mut(m) {
        for (x, &b) in row.iter_mut().zip(bias.data()) {
            *x = *x + b;
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

fn dense_dims<T: Element>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (&[n, k], &[k2, m]) = (input.shape(), weight.shape()) else {
        return Err(TensorError::shape(
            "dense",
            "input [N, K] and weight [K, M]",
            input.shape(),
        ));
    };
    if k != k2 {
        return Err(TensorError::shape("dense", format!("weight [{k}, M]"), weight.shape()));
    }
    if bias.shape() != [m] {
        return Err(TensorError::shape("dense", format!("bias [{m}]"), bias.shape()));
    }
    Ok((n, k, m))
}

/// Returns gradients for (input, weight, bias).
pub fn dense_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (&[n, k], &[_, m]) = (input.shape(), weight.shape()) else {
        return Err(TensorError::shape("dense_backward", "rank-2 operands", input.shape()));
    };
    if grad_out.shape() != [n, m] {
        return Err(TensorError::shape(
            "dense_backward",
            format!("[{n}, {m}]"),
            grad_out.shape(),
        ));
    }
    let mut d_in = vec![T::zero(); n * k];
    gemm(
        MatRef::row_major(grad_out.data(), n, m),
        MatRef::transposed(weight.data(), k, m),
        &mut d_in,
        false,
    );
    let mut d_w = vec![T::zero(); k * m];
    gemm(
        MatRef::transposed(input.data(), n, k),
        MatRef::row_major(grad_out.data(), n, m),
        &mut d_w,
        false,
    );
    let mut d_b = vec![T::zero(); m];
    for row in grad_out.data().chunks_exact(m) {
        for (acc, &g) in d_b.iter_mut().zip(row) {
            *acc = *acc + g;
        }
    }
    Ok((
        Tensor::from_parts(vec![n, k], d_in),
        Tensor::from_parts(vec![k, m], d_w),
        Tensor::from_parts(vec![m], d_b),
    ))
}

fn volume_dims(shape: &[usize], op: &'static str) -> Result<[usize; 5]> {
    <[usize; 5]>::try_from(shape).map_err(|_| TensorError::shape(op, "[N, C, D, H, W]", shape))
}

/// Max pooling with cubic window `size` and stride `size`; remainders are
/// dropped. Also returns the flat input index chosen for every output.
pub fn max_pool3d<T: Element>(input: &Tensor<T>, size: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, d, h, w] = volume_dims(input.shape(), "max_pool3d")?;
    if size == 0 || size > d || size > h || size > w {
        return Err(TensorError::shape(
            "max_pool3d",
            format!("extents >= window {size}"),
            input.shape(),
        ));
    }
    let (od, oh, ow) = (d / size, h / size, w / size);
    let src = input.data();
    let mut out = Vec::with_capacity(n * c * od * oh * ow);
    let mut argmax = Vec::with_capacity(out.capacity());
    for plane in 0..n * c {
        let base = plane * d * h * w;
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = base + ((z * size) * h + y * size) * w + x * size;
                    for a in 0..size {
                        for b in 0..size {
                            let row = base + ((z * size + a) * h + y * size + b) * w + x * size;
                            for i in row..row + size {
                                if src[i] > src[best] {
                                    best = i;
                                }
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, od, oh, ow], out), argmax))
}

pub fn max_pool3d_backward<T: Element>(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = Tensor::zeros(input_shape);
    let dst = g.data_mut();
    for (&i, &v) in argmax.iter().zip(grad_out.data()) {
        dst[i] = dst[i] + v;
    }
    g
}

/// Interpolation rule for [`upsample3d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Upsample {
    Nearest,
    /// Half-pixel-centred trilinear interpolation with edge clamping.
    Trilinear,
}

/// Per-output-index (low, high, weight of high) source taps along one axis.
fn axis_taps(n_in: usize, factor: usize, mode: Upsample) -> Vec<(usize, usize, f64)> {
    (0..n_in * factor)
        .map(|o| match mode {
            Upsample::Nearest => (o / factor, o / factor, 0.0),
            Upsample::Trilinear => {
                let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
                let lo = (src.floor() as usize).min(n_in - 1);
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, src - lo as f64)
            }
        })
        .collect()
}

/// Visits each output voxel with the eight (input offset, weight) taps that
/// produce it; for nearest mode only the first tap carries weight.
fn for_each_upsample_tap<T: Element>(
    dims: [usize; 5],
    factor: usize,
    mode: Upsample,
    mut visit: impl FnMut(usize, usize, T),
) {
    let [n, c, d, h, w] = dims;
    let taps = [d, h, w].map(|len| axis_taps(len, factor, mode));
    let (od, oh, ow) = (d * factor, h * factor, w * factor);
    let one = T::one();
    for plane in 0..n * c {
        let ib = plane * d * h * w;
        let ob = plane * od * oh * ow;
        for (z, &(z0, z1, wz)) in taps[0].iter().enumerate() {
            for (y, &(y0, y1, wy)) in taps[1].iter().enumerate() {
                for (x, &(x0, x1, wx)) in taps[2].iter().enumerate() {
                    let o = ob + (z * oh + y) * ow + x;
                    if mode == Upsample::Nearest {
                        visit(o, ib + (z0 * h + y0) * w + x0, one);
                        continue;
                    }
                    let (wz, wy, wx) = (T::from_f64_lossy(wz), T::from_f64_lossy(wy), T::from_f64_lossy(wx));
                    for (iz, fz) in [(z0, one - wz), (z1, wz)] {
                        for (iy, fy) in [(y0, one - wy), (y1, wy)] {
                            for (ix, fx) in [(x0, one - wx), (x1, wx)] {
                                visit(o, ib + (iz * h + iy) * w + ix, fz * fy * fx);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Upsample the three spatial axes by an integer factor.
pub fn upsample3d<T: Element>(input: &Tensor<T>, factor: usize, mode: Upsample) -> Result<Tensor<T>> {
    let dims = volume_dims(input.shape(), "upsample3d")?;
    if factor == 0 {
        return Err(TensorError::invalid("upsample3d", "factor must be at least 1"));
    }
    let [n, c, d, h, w] = dims;
    let shape = vec![n, c, d * factor, h * factor, w * factor];
    let mut out = vec![T::zero(); shape.iter().product()];
    let src = input.data();
    for_each_upsample_tap(dims, factor, mode, |o, i, wt: T| out[o] = out[o] + wt * src[i]);
    Ok(Tensor::from_parts(shape, out))
}

pub fn upsample3d_backward<T: Element>(
    input_shape: &[usize],
    factor: usize,
    mode: Upsample,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let dims = volume_dims(input_shape, "upsample3d_backward")?;
    let mut g = Tensor::zeros(input_shape);
    let dst = g.data_mut();
    let src = grad_out.data();
    for_each_upsample_tap(dims, factor, mode, |o, i, wt: T| dst[i] = dst[i] + wt * src[o]);
    Ok(g)
}

/// Mean over the spatial axes: `[N, C, D, H, W] -> [N, C]`.
pub fn spatial_mean<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, d, h, w] = volume_dims(input.shape(), "spatial_mean")?;
    let vox = d * h * w;
    let scale = T::one() / T::from_usize(vox).unwrap();
    let data = input
        .data()
        .chunks_exact(vox)
        .map(|p| p.iter().fold(T::zero(), |s, &v| s + v) * scale)
        .collect();
    Ok(Tensor::from_parts(vec![n, c], data))
}

pub fn spatial_mean_backward<T: Element>(input_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let vox: usize = input_shape[2..].iter().product();
    let scale = T::one() / T::from_usize(vox).unwrap();
    let mut data = Vec::with_capacity(grad_out.len() * vox);
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g * scale, vox));
    }
    Tensor::from_parts(input_shape.to_vec(), data)
}

fn rows_of<T: Element>(t: &Tensor<T>, op: &'static str) -> Result<usize> {
    match t.shape() {
        [_, m] if *m > 0 => Ok(*m),
        s => Err(TensorError::shape(op, "[N, M] with M > 0", s)),
    }
}

/// Row-wise softmax of a `[N, M]` tensor.
pub fn softmax<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let m = rows_of(input, "softmax")?;
    let mut out = input.data().to_vec();
    for row in out.chunks_exact_mut(m) {
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
        let total = row.iter().fold(T::zero(), |a, &b| a + b);
        row.iter_mut().for_each(|v| *v = *v / total);
    }
    Ok(Tensor::from_parts(input.shape().to_vec(), out))
}

/// Row-wise log-softmax of a `[N, M]` tensor.
pub fn log_softmax<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let m = rows_of(input, "log_softmax")?;
    let mut out = input.data().to_vec();
    for row in out.chunks_exact_mut(m) {
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let lse = max + row.iter().fold(T::zero(), |a, &b| a + (b - max).exp()).ln();
        row.iter_mut().for_each(|v| *v = *v - lse);
    }
    Ok(Tensor::from_parts(input.shape().to_vec(), out))
}

/// Concatenate along `axis`; all other extents must agree.
pub fn concat<T: Element>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
    if axis >= first.rank() {
        return Err(TensorError::invalid("concat", format!("axis {axis} out of range")));
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = 0;
    for p in parts {
        let ok = p.rank() == first.rank()
            && p.shape()
                .iter()
                .enumerate()
                .all(|(i, &e)| i == axis || e == first.shape()[i]);
        if !ok {
            return Err(TensorError::shape(
                "concat",
                format!("{:?} off axis {axis}", first.shape()),
                p.shape(),
            ));
        }
        shape[axis] += p.shape()[axis];
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let chunk = p.len() / outer;
            data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Ok(Tensor::from_parts(shape, data))
}

/// Split a gradient of a concatenation back into per-input pieces.
pub fn concat_backward<T: Element>(shapes: &[Vec<usize>], axis: usize, grad_out: &Tensor<T>) -> Vec<Tensor<T>> {
    let outer: usize = grad_out.shape()[..axis].iter().product();
    let mut pieces: Vec<Vec<T>> = shapes.iter().map(|s| Vec::with_capacity(s.iter().product())).collect();
    let mut offset = 0;
    for _ in 0..outer {
        for (piece, s) in pieces.iter_mut().zip(shapes) {
            let chunk = s.iter().product::<usize>() / outer;
            piece.extend_from_slice(&grad_out.data()[offset..offset + chunk]);
            offset += chunk;
        }
    }
    pieces
        .into_iter()
        .zip(shapes)
        .map(|(d, s)| Tensor::from_parts(s.clone(), d))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Direct six-fold loop used to cross-check the im2col route.
    fn conv_reference(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let geo = Conv3dGeometry::new(x.shape(), k.shape(), stride, pad).unwrap();
        let [n, c, d, h, w]: [usize; 5] = x.shape().try_into().unwrap();
        let [f, _, kd, kh, kw]: [usize; 5] = k.shape().try_into().unwrap();
        let [od, oh, ow] = geo.output;
        let mut out = Tensor::zeros(&geo.output_shape());
        let xd = x.data();
        for b in 0..n {
            for fo in 0..f {
                for z in 0..od {
                    for y in 0..oh {
                        for xo in 0..ow {
                            let mut s = 0.0;
                            for ci in 0..c {
                                for a in 0..kd {
                                    for bb in 0..kh {
                                        for e in 0..kw {
                                            let iz = (z * stride + a) as isize - pad as isize;
                                            let iy = (y * stride + bb) as isize - pad as isize;
                                            let ix = (xo * stride + e) as isize - pad as isize;
                                            if iz < 0
                                                || iy < 0
                                                || ix < 0
                                                || iz >= d as isize
                                                || iy >= h as isize
                                                || ix >= w as isize
                                            {
                                                continue;
                                            }
                                            let xi =
                                                (((b * c + ci) * d + iz as usize) * h + iy as usize) * w + ix as usize;
                                            let ki = (((fo * c + ci) * kd + a) * kh + bb) * kw + e;
                                            s += xd[xi] * k.data()[ki];
                                        }
                                    }
                                }
                            }
                            let oi = (((b * f + fo) * od + z) * oh + y) * ow + xo;
                            out.data_mut()[oi] = s;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Tensor::from_fn(&[1, 1, 3, 4, 5], |i| (i as f64).sin());
        let k = Tensor::ones(&[1, 1, 1, 1, 1]);
        assert_eq!(conv3d(&x, &k, None, 1, 0).unwrap(), x);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4, 4]);
        let k = Tensor::from_fn(&[3, 2, 3, 3, 3], |i| i as f64 * 0.1 - 2.0);
        let y = conv3d(&x, &k, None, 1, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn all_ones_cube_sums_eight_products() {
        let x = Tensor::<f64>::ones(&[1, 1, 2, 2, 2]);
        let k = Tensor::<f64>::ones(&[1, 1, 2, 2, 2]);
        let y = conv3d(&x, &k, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1, 1]);
        assert_eq!(y.data(), &[8.0]);
    }

    #[test]
    fn output_extent_follows_floor_formula() {
        for (s, k, stride, pad) in [(7, 3, 2, 1), (8, 3, 1, 1), (5, 2, 3, 0), (4, 4, 1, 0), (6, 3, 2, 2)] {
            let geo = Conv3dGeometry::new(&[1, 1, s, s, s], &[1, 1, k, k, k], stride, pad).unwrap();
            assert_eq!(geo.output[0], (s + 2 * pad - k) / stride + 1);
        }
        assert!(Conv3dGeometry::new(&[1, 1, 2, 2, 2], &[1, 1, 3, 3, 3], 1, 0).is_err());
        assert!(Conv3dGeometry::new(&[1, 2, 4, 4, 4], &[1, 1, 3, 3, 3], 1, 0).is_err());
        assert!(Conv3dGeometry::new(&[1, 1, 4, 4, 4], &[1, 1, 3, 3, 3], 0, 0).is_err());
    }

    #[test]
    fn im2col_route_matches_direct_loops() {
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)] {
            let x = Tensor::from_fn(&[2, 3, 5, 6, 7], |i| ((i * 37 % 101) as f64 - 50.0) / 25.0);
            let k = Tensor::from_fn(&[4, 3, 3, 2, 3], |i| ((i * 13 % 29) as f64 - 14.0) / 7.0);
            let fast = conv3d(&x, &k, None, stride, pad).unwrap();
            let slow = conv_reference(&x, &k, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn dense_hand_example() {
        let y = dense(
            &t(&[1, 2], &[1.0, 2.0]),
            &t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]),
            &t(&[2], &[1.0, 1.0]),
        )
        .unwrap();
        assert_eq!(y.data(), &[2.0, 3.0]);
        let z = dense(
            &t(&[2, 2], &[0.0; 4]),
            &t(&[2, 3], &[5.0; 6]),
            &t(&[3], &[1.0, 2.0, 3.0]),
        )
        .unwrap();
        assert_eq!(z.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert!(dense(&t(&[1, 3], &[0.0; 3]), &t(&[2, 2], &[0.0; 4]), &t(&[2], &[0.0; 2])).is_err());
    }

    #[test]
    fn max_pool_picks_window_maximum() {
        let x = Tensor::from_fn(&[1, 1, 2, 2, 2], |i| [3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0][i]);
        let (y, idx) = max_pool3d(&x, 2).unwrap();
        assert_eq!(y.data(), &[9.0]);
        assert_eq!(idx, vec![5]);
    }

    #[test]
    fn nearest_upsample_repeats_values() {
        let x = Tensor::from_fn(&[1, 1, 1, 1, 2], |i| i as f64 + 1.0);
        let y = upsample3d(&x, 2, Upsample::Nearest).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2, 4]);
        assert_eq!(&y.data()[..4], &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn trilinear_upsample_preserves_constants_and_interpolates() {
        let c = Tensor::<f64>::full(&[1, 2, 2, 3, 2], 0.7);
        let y = upsample3d(&c, 2, Upsample::Trilinear).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
        let ramp = Tensor::from_fn(&[1, 1, 1, 1, 2], |i| i as f64);
        let y = upsample3d(&ramp, 2, Upsample::Trilinear).unwrap();
        assert_eq!(&y.data()[..4], &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -100.0, 0.0, 100.0, 5.0]);
        let s = softmax(&x).unwrap();
        for row in s.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let ls = log_softmax(&x).unwrap();
        for (a, b) in ls.data().iter().zip(s.data()) {
            assert!((a.exp() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_interleaves_along_axis() {
        let a = t(&[2, 1], &[1.0, 2.0]);
        let b = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let parts = concat_backward(&[vec![2, 1], vec![2, 2]], 1, &c);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
        assert!(concat(&[&a, &t(&[3, 1], &[0.0; 3])], 1).is_err());
    }
}
