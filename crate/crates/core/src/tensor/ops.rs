use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Mode, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the previous running statistic in the moving average.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    /// Softmax over the trailing channel axis.
    SoftmaxChannels,
}

pub fn activation(input: &Tensor, kind: Activation) -> Tensor {
    match kind {
        Activation::Relu => input.map(|v| v.max(0.0)),
        Activation::Sigmoid => input.map(sigmoid),
        Activation::SoftmaxChannels => softmax_channels(input),
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn softmax_channels(input: &Tensor) -> Tensor {
    let c = input.channels();
    let mut out = input.clone();
    for voxel in out.data_mut().chunks_mut(c) {
        let max = voxel.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in voxel.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        voxel.iter_mut().for_each(|v| *v /= total);
    }
    out
}

/// Concatenates tensors along the trailing channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or(Error::EmptyInput)?;
    let lead = &first.shape()[..first.rank() - 1];
    for p in parts {
        if p.rank() != first.rank() || &p.shape()[..p.rank() - 1] != lead {
            return Err(Error::shape(format!(
                "cannot concatenate {:?} with {:?}",
                first.shape(),
                p.shape()
            )));
        }
    }
    let total: usize = parts.iter().map(|p| p.channels()).sum();
    let voxels = first.len() / first.channels();
    let mut data = Vec::with_capacity(voxels * total);
    for v in 0..voxels {
        for p in parts {
            let c = p.channels();
            data.extend_from_slice(&p.data()[v * c..(v + 1) * c]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Tensor::new(&shape, data)
}

/// Channels `start..start + len` of `input`.
pub fn slice_channels(input: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let c = input.channels();
    if len == 0 || start + len > c {
        return Err(Error::shape(format!(
            "channel slice {start}..{} of {c} channels",
            start + len
        )));
    }
    let data = input
        .data()
        .chunks(c)
        .flat_map(|voxel| voxel[start..start + len].iter().copied())
        .collect();
    let mut shape = input.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = len;
    Tensor::new(&shape, data)
}

/// Inverted dropout. Returns the output and the 0/1 keep mask; survivors are
/// scaled by `1 / (1 - rate)`.
pub fn dropout<R: Rng + ?Sized>(
    input: &Tensor,
    rate: f64,
    rng: &mut R,
    mode: Mode,
) -> Result<(Tensor, Tensor)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidRate(rate));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok((input.clone(), Tensor::ones(input.shape())));
    }
    let mask = Tensor::from_fn(input.shape(), |_| {
        if rng.gen::<f64>() < rate {
            0.0
        } else {
            1.0
        }
    });
    let scale = 1.0 / (1.0 - rate);
    let out = input.zip_map(&mask, |x, m| x * m * scale)?;
    Ok((out, mask))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Values saved by the forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    pub mode: Mode,
}

/// Per-channel batch normalization.
///
/// In [`Mode::Train`] the batch statistics (population variance over batch
/// and spatial axes) normalize the input and `stats` moves toward them by
/// exponential moving average; in [`Mode::Infer`] `stats` is used as is.
pub fn batch_norm(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &mut RunningStats,
    mode: Mode,
) -> Result<(Tensor, BatchNormCache)> {
    let c = input.channels();
    if gamma.shape() != [c] || beta.shape() != [c] || stats.mean.len() != c || stats.var.len() != c
    {
        return Err(Error::shape(format!(
            "batch norm over {c} channels with gamma {:?}, beta {:?}, {} running stats",
            gamma.shape(),
            beta.shape(),
            stats.mean.len()
        )));
    }
    let n = input.len() / c;
    let (mean, var) = match mode {
        Mode::Train => {
            if n < 2 {
                return Err(Error::DegenerateBatch(n));
            }
            let mut mean = vec![0.0; c];
            for voxel in input.data().chunks(c) {
                mean.iter_mut().zip(voxel).for_each(|(m, v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            let mut var = vec![0.0; c];
            for voxel in input.data().chunks(c) {
                for ((s, v), m) in var.iter_mut().zip(voxel).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= n as f64);
            for k in 0..c {
                stats.mean[k] = BN_MOMENTUM * stats.mean[k] + (1.0 - BN_MOMENTUM) * mean[k];
                stats.var[k] = BN_MOMENTUM * stats.var[k] + (1.0 - BN_MOMENTUM) * var[k];
            }
            (mean, var)
        }
        Mode::Infer => (stats.mean.clone(), stats.var.clone()),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
    let mut xhat = input.clone();
    for voxel in xhat.data_mut().chunks_mut(c) {
        for k in 0..c {
            voxel[k] = (voxel[k] - mean[k]) * inv_std[k];
        }
    }
    let mut out = xhat.clone();
    for voxel in out.data_mut().chunks_mut(c) {
        for k in 0..c {
            voxel[k] = voxel[k] * gamma.data()[k] + beta.data()[k];
        }
    }
    Ok((out, BatchNormCache { xhat, inv_std, mode }))
}

/// Returns `(grad_input, grad_gamma, grad_beta)`. In training mode the batch
/// statistics are differentiated as functions of the input.
pub fn batch_norm_backward(
    grad_out: &Tensor,
    gamma: &Tensor,
    cache: &BatchNormCache,
) -> Result<(Tensor, Tensor, Tensor)> {
    grad_out.expect_same_shape(&cache.xhat)?;
    let c = grad_out.channels();
    let n = grad_out.len() / c;
    let mut sum_dy = vec![0.0; c];
    let mut sum_dy_xhat = vec![0.0; c];
    for (dy, xh) in grad_out.data().chunks(c).zip(cache.xhat.data().chunks(c)) {
        for k in 0..c {
            sum_dy[k] += dy[k];
            sum_dy_xhat[k] += dy[k] * xh[k];
        }
    }
    let mut gx = grad_out.clone();
    for (g, xh) in gx.data_mut().chunks_mut(c).zip(cache.xhat.data().chunks(c)) {
        for k in 0..c {
            let scale = gamma.data()[k] * cache.inv_std[k];
            g[k] = match cache.mode {
                Mode::Train => {
                    scale * (g[k] - sum_dy[k] / n as f64 - xh[k] * sum_dy_xhat[k] / n as f64)
                }
                Mode::Infer => scale * g[k],
            };
        }
    }
    Ok((
        gx,
        Tensor::new(&[c], sum_dy_xhat)?,
        Tensor::new(&[c], sum_dy)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn activation_examples() {
        let x = Tensor::new(&[2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(activation(&x, Activation::Relu).data(), &[0.0, 2.0]);
        assert_eq!(sigmoid(0.0), 0.5);
        let logits = Tensor::full(&[1, 1, 1, 1, 4], 3.7);
        let p = activation(&logits, Activation::SoftmaxChannels);
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn softmax_sums_to_one_for_extreme_logits() {
        let x = Tensor::new(&[2, 3], vec![1000.0, -1000.0, 0.0, 1e-3, 5.0, -7.0]).unwrap();
        let p = softmax_channels(&x);
        for voxel in p.data().chunks(3) {
            assert!((voxel.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(voxel.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn concat_single_and_four() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::uniform(&[1, 2, 2, 2, 1], 0.0, 1.0, &mut rng);
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
        let parts: Vec<Tensor> = (0..4)
            .map(|_| Tensor::uniform(&[1, 2, 3, 2, 1], 0.0, 1.0, &mut rng))
            .collect();
        let refs: Vec<&Tensor> = parts.iter().collect();
        let cat = concat_channels(&refs).unwrap();
        assert_eq!(cat.shape(), &[1, 2, 3, 2, 4]);
        for (k, p) in parts.iter().enumerate() {
            assert_eq!(&slice_channels(&cat, k, 1).unwrap(), p);
        }
        let bad = Tensor::zeros(&[1, 2, 2, 2, 1]);
        assert!(concat_channels(&[&parts[0], &bad]).is_err());
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::uniform(&[64], -1.0, 1.0, &mut rng);
        let (y, mask) = dropout(&x, 0.0, &mut rng, Mode::Train).unwrap();
        assert_eq!(y, x);
        assert!(mask.data().iter().all(|&m| m == 1.0));
        let (y, _) = dropout(&x, 0.5, &mut rng, Mode::Infer).unwrap();
        assert_eq!(y, x);
        assert!(matches!(
            dropout(&x, 1.0, &mut rng, Mode::Train),
            Err(Error::InvalidRate(_))
        ));
        assert!(dropout(&x, -0.1, &mut rng, Mode::Train).is_err());
    }

    #[test]
    fn dropout_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Tensor::ones(&[100_000]);
        let (y, mask) = dropout(&x, 0.5, &mut rng, Mode::Train).unwrap();
        let kept = mask.sum() / x.len() as f64;
        assert!((kept - 0.5).abs() < 0.01, "survivor fraction {kept}");
        let survivors: Vec<f64> = y.data().iter().copied().filter(|&v| v != 0.0).collect();
        let mean = survivors.iter().sum::<f64>() / survivors.len() as f64;
        assert!((mean - 2.0).abs() < 0.05);
    }

    #[test]
    fn batch_norm_constant_channel_gives_beta() {
        let x = Tensor::full(&[1, 2, 2, 2, 1], 3.0);
        let gamma = Tensor::full(&[1], 1.7);
        let beta = Tensor::full(&[1], -0.4);
        let mut stats = RunningStats::new(1);
        let (y, _) = batch_norm(&x, &gamma, &beta, &mut stats, Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| (v + 0.4).abs() < 1e-12));
    }

    #[test]
    fn batch_norm_train_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::uniform(&[2, 3, 3, 3, 3], -4.0, 9.0, &mut rng);
        let mut stats = RunningStats::new(3);
        let (y, _) = batch_norm(
            &x,
            &Tensor::ones(&[3]),
            &Tensor::zeros(&[3]),
            &mut stats,
            Mode::Train,
        )
        .unwrap();
        for k in 0..3 {
            let ch = slice_channels(&y, k, 1).unwrap();
            let n = ch.len() as f64;
            let mean = ch.sum() / n;
            let var = ch.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() <= 1e-6);
            assert!((var - 1.0).abs() <= 1e-4);
        }
        assert!(stats.mean.iter().any(|&m| m != 0.0));
    }

    #[test]
    fn batch_norm_infer_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::uniform(&[1, 2, 2, 1, 2], -2.0, 2.0, &mut rng);
        let gamma = Tensor::new(&[2], vec![1.5, -0.5]).unwrap();
        let beta = Tensor::new(&[2], vec![0.25, 2.0]).unwrap();
        let mut stats = RunningStats {
            mean: vec![0.3, -1.2],
            var: vec![2.0, 0.7],
        };
        let before = stats.clone();
        let (y, _) = batch_norm(&x, &gamma, &beta, &mut stats, Mode::Infer).unwrap();
        assert_eq!(stats, before);
        for (i, (&out, &inp)) in y.data().iter().zip(x.data()).enumerate() {
            let k = i % 2;
            let expected = (inp - before.mean[k]) / (before.var[k] + BN_EPSILON).sqrt()
                * gamma.data()[k]
                + beta.data()[k];
            assert!((out - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn batch_norm_degenerate_batch() {
        let x = Tensor::ones(&[1, 1, 1, 1, 2]);
        let mut stats = RunningStats::new(2);
        let err = batch_norm(
            &x,
            &Tensor::ones(&[2]),
            &Tensor::zeros(&[2]),
            &mut stats,
            Mode::Train,
        )
        .unwrap_err();
        assert!(matches!(err, Error::DegenerateBatch(1)));
    }
}
