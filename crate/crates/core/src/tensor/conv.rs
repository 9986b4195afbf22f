//! 3-D convolution and transposed convolution.
//!
//! Both operators share one geometry: a "big" grid (the convolution input,
//! or the transposed-convolution output) and a "small" grid (the convolution
//! output, or the transposed-convolution input), related by kernel, stride
//! and symmetric zero padding. The fast path lowers to im2col + GEMM; the
//! `*_naive` functions are direct nested loops kept as references.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Geometry of one convolution layer. Extents are `[depth, height, width]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    pub fn new(
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        if kernel.contains(&0) || stride.contains(&0) || in_channels == 0 || out_channels == 0 {
            return Err(Error::InvalidConfig(format!(
                "conv spec needs positive kernel/stride/channels, got k={kernel:?} s={stride:?} c={in_channels}->{out_channels}"
            )));
        }
        Ok(Self {
            kernel,
            stride,
            padding,
            in_channels,
            out_channels,
        })
    }

    /// Isotropic kernel, stride and padding.
    pub fn cube(k: usize, s: usize, p: usize, in_channels: usize, out_channels: usize) -> Self {
        Self::new([k; 3], [s; 3], [p; 3], in_channels, out_channels)
            .expect("cube conv spec must have positive extents")
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Shape of the weight tensor for [`conv3d`]: `[kd, kh, kw, c_in, c_out]`.
    pub fn conv_weight_shape(&self) -> [usize; 5] {
        let [kd, kh, kw] = self.kernel;
        [kd, kh, kw, self.in_channels, self.out_channels]
    }

    /// Shape of the weight tensor for [`conv_transpose3d`]:
    /// `[kd, kh, kw, c_out, c_in]`, i.e. the kernel of the forward
    /// convolution that the transposed convolution is the adjoint of.
    pub fn transpose_weight_shape(&self) -> [usize; 5] {
        let [kd, kh, kw] = self.kernel;
        [kd, kh, kw, self.out_channels, self.in_channels]
    }

    pub fn output_extents(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = conv_output_extent(input[a], self.kernel[a], self.stride[a], self.padding[a])?;
        }
        Ok(out)
    }

    pub fn transpose_output_extents(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] =
                deconv_output_extent(input[a], self.kernel[a], self.stride[a], self.padding[a])?;
        }
        Ok(out)
    }
}

/// Output extent of a strided convolution: `floor((i + 2p - k) / s) + 1`.
pub fn conv_output_extent(i: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    let err = Error::NonPositiveOutput {
        input: i,
        kernel: k,
        stride: s,
        padding: p,
    };
    if i == 0 || k == 0 || s == 0 || i + 2 * p < k {
        return Err(err);
    }
    Ok((i + 2 * p - k) / s + 1)
}

/// Output extent of a transposed convolution: `s(i - 1) + k - 2p`.
pub fn deconv_output_extent(i: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    let err = Error::NonPositiveOutput {
        input: i,
        kernel: k,
        stride: s,
        padding: p,
    };
    if i == 0 || k == 0 || s == 0 {
        return Err(err);
    }
    let full = s * (i - 1) + k;
    if full <= 2 * p {
        return Err(err);
    }
    Ok(full - 2 * p)
}

#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    big: [usize; 3],
    small: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
    c_big: usize,
    c_small: usize,
}

/// Upper bound on the number of f64 values in one im2col block.
const COL_BLOCK: usize = 1 << 19;

impl Geometry {
    fn kc(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.c_big
    }

    fn rows(&self) -> usize {
        self.batch * self.small.iter().product::<usize>()
    }

    fn block_rows(&self) -> usize {
        (COL_BLOCK / self.kc()).max(1)
    }

    /// Big-grid voxel read by kernel tap `tap` of small-grid row `row`, if
    /// it falls inside the grid (outside means zero padding).
    #[inline]
    fn source(&self, row: usize, tap: [usize; 3]) -> Option<usize> {
        let [sd, sh, sw] = self.small;
        let ow = row % sw;
        let oh = (row / sw) % sh;
        let od = (row / (sw * sh)) % sd;
        let b = row / (sw * sh * sd);
        let pos = [od, oh, ow];
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let v = (pos[a] * self.stride[a] + tap[a]) as isize - self.padding[a] as isize;
            if v < 0 || v as usize >= self.big[a] {
                return None;
            }
            idx[a] = v as usize;
        }
        let [bd, bh, bw] = self.big;
        Some(((b * bd + idx[0]) * bh + idx[1]) * bw + idx[2])
    }

    fn taps(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let [kd, kh, kw] = self.kernel;
        (0..kd).flat_map(move |a| (0..kh).flat_map(move |b| (0..kw).map(move |c| [a, b, c])))
    }

    fn im2col(&self, big: &[f64], rows: std::ops::Range<usize>, cols: &mut [f64]) {
        let kc = self.kc();
        let c = self.c_big;
        for (r, row) in rows.enumerate() {
            let dst = &mut cols[r * kc..(r + 1) * kc];
            for (t, tap) in self.taps().enumerate() {
                let slot = &mut dst[t * c..(t + 1) * c];
                match self.source(row, tap) {
                    Some(v) => slot.copy_from_slice(&big[v * c..(v + 1) * c]),
                    None => slot.fill(0.0),
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], rows: std::ops::Range<usize>, big: &mut [f64]) {
        let kc = self.kc();
        let c = self.c_big;
        for (r, row) in rows.enumerate() {
            let src = &cols[r * kc..(r + 1) * kc];
            for (t, tap) in self.taps().enumerate() {
                if let Some(v) = self.source(row, tap) {
                    big[v * c..(v + 1) * c]
                        .iter_mut()
                        .zip(&src[t * c..(t + 1) * c])
                        .for_each(|(d, s)| *d += s);
                }
            }
        }
    }

    /// small = im2col(big) · W, with W viewed as `kc × c_small`.
    fn forward(&self, big: &[f64], w: &[f64], small: &mut [f64]) {
        let (kc, n) = (self.kc(), self.c_small);
        let step = self.block_rows();
        let mut cols = vec![0.0; step.min(self.rows()) * kc];
        let mut r0 = 0;
        while r0 < self.rows() {
            let r1 = (r0 + step).min(self.rows());
            let m = r1 - r0;
            self.im2col(big, r0..r1, &mut cols);
            gemm(
                m,
                kc,
                n,
                (&cols, kc as isize, 1),
                (w, n as isize, 1),
                0.0,
                (&mut small[r0 * n..r1 * n], n as isize),
            );
            r0 = r1;
        }
    }

    /// big += col2im(small · Wᵀ).
    fn backward_data(&self, small: &[f64], w: &[f64], big: &mut [f64]) {
        let (kc, n) = (self.kc(), self.c_small);
        let step = self.block_rows();
        let mut cols = vec![0.0; step.min(self.rows()) * kc];
        let mut r0 = 0;
        while r0 < self.rows() {
            let r1 = (r0 + step).min(self.rows());
            let m = r1 - r0;
            gemm(
                m,
                n,
                kc,
                (&small[r0 * n..r1 * n], n as isize, 1),
                (w, 1, n as isize),
                0.0,
                (&mut cols[..m * kc], kc as isize),
            );
            self.col2im_add(&cols[..m * kc], r0..r1, big);
            r0 = r1;
        }
    }

    /// W_grad += im2col(big)ᵀ · small.
    fn weight_grad(&self, big: &[f64], small: &[f64], gw: &mut [f64]) {
        let (kc, n) = (self.kc(), self.c_small);
        let step = self.block_rows();
        let mut cols = vec![0.0; step.min(self.rows()) * kc];
        let mut r0 = 0;
        while r0 < self.rows() {
            let r1 = (r0 + step).min(self.rows());
            let m = r1 - r0;
            self.im2col(big, r0..r1, &mut cols);
            gemm(
                kc,
                m,
                n,
                (&cols[..m * kc], 1, kc as isize),
                (&small[r0 * n..r1 * n], n as isize, 1),
                1.0,
                (gw, n as isize),
            );
            r0 = r1;
        }
    }
}

/// `C = A·B + beta·C` for row-major C; A and B given as (slice, row stride,
/// column stride).
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    beta: f64,
    c: (&mut [f64], isize),
) {
    debug_assert!(a.0.len() >= m * k && b.0.len() >= k * n && c.0.len() >= m * n);
    // SAFETY: the strides describe m×k, k×n and m×n matrices that lie within
    // the bounds of the given slices (checked above in debug builds and
    // guaranteed by every caller's construction).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.0.as_mut_ptr(),
            c.1,
            1,
        );
    }
}

fn check_weight(weights: &Tensor, expected: [usize; 5]) -> Result<()> {
    if weights.shape() != expected {
        return Err(Error::shape(format!(
            "weights {:?}, expected {expected:?}",
            weights.shape()
        )));
    }
    Ok(())
}

fn check_bias(bias: Option<&Tensor>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.shape() != [channels] => Err(Error::shape(format!(
            "bias {:?}, expected [{channels}]",
            b.shape()
        ))),
        _ => Ok(()),
    }
}

fn conv_geometry(input: &Tensor, weights: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Geometry> {
    let (batch, ext, c) = input.dims5()?;
    if c != spec.in_channels {
        return Err(Error::shape(format!(
            "input has {c} channels, conv expects {}",
            spec.in_channels
        )));
    }
    check_weight(weights, spec.conv_weight_shape())?;
    check_bias(bias, spec.out_channels)?;
    Ok(Geometry {
        batch,
        big: ext,
        small: spec.output_extents(ext)?,
        kernel: spec.kernel,
        stride: spec.stride,
        padding: spec.padding,
        c_big: spec.in_channels,
        c_small: spec.out_channels,
    })
}

fn transpose_geometry(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&Tensor>,
    spec: &ConvSpec,
) -> Result<Geometry> {
    let (batch, ext, c) = input.dims5()?;
    if c != spec.in_channels {
        return Err(Error::shape(format!(
            "input has {c} channels, transposed conv expects {}",
            spec.in_channels
        )));
    }
    check_weight(weights, spec.transpose_weight_shape())?;
    check_bias(bias, spec.out_channels)?;
    Ok(Geometry {
        batch,
        big: spec.transpose_output_extents(ext)?,
        small: ext,
        kernel: spec.kernel,
        stride: spec.stride,
        padding: spec.padding,
        c_big: spec.out_channels,
        c_small: spec.in_channels,
    })
}

fn add_bias(out: &mut [f64], bias: Option<&Tensor>) {
    if let Some(b) = bias {
        let c = b.len();
        for voxel in out.chunks_mut(c) {
            voxel.iter_mut().zip(b.data()).for_each(|(v, bb)| *v += bb);
        }
    }
}

fn channel_sums(t: &Tensor) -> Tensor {
    let c = t.channels();
    let mut sums = vec![0.0; c];
    for voxel in t.data().chunks(c) {
        sums.iter_mut().zip(voxel).for_each(|(s, v)| *s += v);
    }
    Tensor::new(&[c], sums).expect("channel count is positive")
}

/// Cross-correlation with zero padding.
///
/// `input` is `[b, d, h, w, c_in]`, `weights` is `[kd, kh, kw, c_in, c_out]`
/// and `bias` (optional) is `[c_out]`.
pub fn conv3d(input: &Tensor, weights: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    let g = conv_geometry(input, weights, bias, spec)?;
    let mut out = vec![0.0; g.rows() * g.c_small];
    g.forward(input.data(), weights.data(), &mut out);
    add_bias(&mut out, bias);
    let [d, h, w] = g.small;
    Tensor::new(&[g.batch, d, h, w, g.c_small], out)
}

/// Vector-Jacobian product of [`conv3d`] for an upstream gradient shaped
/// like its output.
pub fn conv3d_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
    spec: &ConvSpec,
) -> Result<ConvGrads> {
    let g = conv_geometry(input, weights, None, spec)?;
    let [d, h, w] = g.small;
    if grad_out.shape() != [g.batch, d, h, w, g.c_small] {
        return Err(Error::shape(format!(
            "conv upstream gradient {:?}",
            grad_out.shape()
        )));
    }
    let mut gin = vec![0.0; input.len()];
    g.backward_data(grad_out.data(), weights.data(), &mut gin);
    let mut gw = vec![0.0; weights.len()];
    g.weight_grad(input.data(), grad_out.data(), &mut gw);
    Ok(ConvGrads {
        input: Tensor::new(input.shape(), gin)?,
        weight: Tensor::new(weights.shape(), gw)?,
        bias: channel_sums(grad_out),
    })
}

/// Transposed convolution, the adjoint of [`conv3d`] under the same spec
/// with channel roles swapped.
///
/// `input` is `[b, d, h, w, c_in]`, `weights` is `[kd, kh, kw, c_out, c_in]`
/// and the output extents follow [`deconv_output_extent`].
pub fn conv_transpose3d(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&Tensor>,
    spec: &ConvSpec,
) -> Result<Tensor> {
    let g = transpose_geometry(input, weights, bias, spec)?;
    let [d, h, w] = g.big;
    let mut out = vec![0.0; g.batch * d * h * w * g.c_big];
    g.backward_data(input.data(), weights.data(), &mut out);
    add_bias(&mut out, bias);
    Tensor::new(&[g.batch, d, h, w, g.c_big], out)
}

pub fn conv_transpose3d_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
    spec: &ConvSpec,
) -> Result<ConvGrads> {
    let g = transpose_geometry(input, weights, None, spec)?;
    let [d, h, w] = g.big;
    if grad_out.shape() != [g.batch, d, h, w, g.c_big] {
        return Err(Error::shape(format!(
            "transposed conv upstream gradient {:?}",
            grad_out.shape()
        )));
    }
    let mut gin = vec![0.0; input.len()];
    g.forward(grad_out.data(), weights.data(), &mut gin);
    let mut gw = vec![0.0; weights.len()];
    g.weight_grad(grad_out.data(), input.data(), &mut gw);
    Ok(ConvGrads {
        input: Tensor::new(input.shape(), gin)?,
        weight: Tensor::new(weights.shape(), gw)?,
        bias: channel_sums(grad_out),
    })
}

/// Direct-loop reference for [`conv3d`].
pub fn conv3d_naive(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&Tensor>,
    spec: &ConvSpec,
) -> Result<Tensor> {
    let g = conv_geometry(input, weights, bias, spec)?;
    let [d, h, w] = g.small;
    let (ci, co) = (g.c_big, g.c_small);
    let mut out = Tensor::zeros(&[g.batch, d, h, w, co]);
    let x = input.data();
    let wt = weights.data();
    let o = out.data_mut();
    for row in 0..g.rows() {
        for c in 0..co {
            let mut acc = bias.map_or(0.0, |b| b.data()[c]);
            for (t, tap) in g.taps().enumerate() {
                if let Some(v) = g.source(row, tap) {
                    for k in 0..ci {
                        acc += x[v * ci + k] * wt[(t * ci + k) * co + c];
                    }
                }
            }
            o[row * co + c] = acc;
        }
    }
    Ok(out)
}

/// Direct scatter reference for [`conv_transpose3d`].
pub fn conv_transpose3d_naive(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&Tensor>,
    spec: &ConvSpec,
) -> Result<Tensor> {
    let g = transpose_geometry(input, weights, bias, spec)?;
    let [d, h, w] = g.big;
    let (co, ci) = (g.c_big, g.c_small);
    let mut out = Tensor::zeros(&[g.batch, d, h, w, co]);
    let y = input.data();
    let wt = weights.data();
    let o = out.data_mut();
    for row in 0..g.rows() {
        for (t, tap) in g.taps().enumerate() {
            if let Some(v) = g.source(row, tap) {
                for c in 0..co {
                    for k in 0..ci {
                        o[v * co + c] += y[row * ci + k] * wt[(t * co + c) * ci + k];
                    }
                }
            }
        }
    }
    add_bias(o, bias);
    Ok(out)
}
