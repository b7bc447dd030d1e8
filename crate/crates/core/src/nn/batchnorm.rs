//! Batch normalization with sub-mini-batch statistics.
//!
//! In training mode the batch is split into consecutive groups of `bn_group`
//! clips and each group is normalized with its own per-channel mean and
//! (biased) variance over `group clips x t x h x w` values. Running statistics
//! move toward the average of the group statistics with momentum 0.1.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> BnParams<T> {
    pub fn new(channels: usize) -> Self {
        BnParams {
            gamma: vec![T::ONE; channels],
            beta: vec![T::ZERO; channels],
            running_mean: vec![T::ZERO; channels],
            running_var: vec![T::ONE; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Moves running statistics toward `stats`.
    pub fn update_running(&mut self, stats: &BnStats<T>) {
        let m = T::from_f64(BN_MOMENTUM);
        let keep = T::ONE - m;
        for c in 0..self.channels() {
            self.running_mean[c] = keep * self.running_mean[c] + m * stats.mean[c];
            self.running_var[c] = keep * self.running_var[c] + m * stats.var[c];
        }
    }
}

/// Group statistics averaged over groups, per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Saved forward state for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    xhat: Vec<T>,
    /// `[groups, channels]`
    inv_std: Vec<T>,
    group: usize,
}

fn split<T: Scalar>(x: &Tensor<T>, channels: usize) -> Result<(usize, usize)> {
    let b = *x.shape.first().ok_or_else(|| Error::Shape("batch norm on a 0-D tensor".into()))?;
    let c = *x.shape.last().unwrap();
    if c != channels {
        return Err(Error::Shape(format!("batch norm expects {channels} channels, got {c}")));
    }
    let per_clip = x.data.len() / b.max(1);
    Ok((b, per_clip / c))
}

/// Training-mode forward. Returns the output, the cache and the averaged
/// group statistics (the caller decides whether to fold them into the
/// running statistics).
pub fn batchnorm_forward_train<T: Scalar>(
    x: &Tensor<T>,
    p: &BnParams<T>,
    bn_group: usize,
) -> Result<(Tensor<T>, BnCache<T>, BnStats<T>)> {
    let c = p.channels();
    let (b, positions) = split(x, c)?;
    if bn_group == 0 || b % bn_group != 0 {
        return Err(Error::BnGroup { group: bn_group, batch: b });
    }
    let groups = b / bn_group;
    let rows = bn_group * positions;
    let count = T::from_f64(rows as f64);
    let eps = T::from_f64(BN_EPS);

    let mut y = vec![T::ZERO; x.data.len()];
    let mut xhat = vec![T::ZERO; x.data.len()];
    let mut inv_std = vec![T::ZERO; groups * c];
    let mut stats = BnStats {
        mean: vec![T::ZERO; c],
        var: vec![T::ZERO; c],
    };
    let mut mean = vec![T::ZERO; c];
    let mut var = vec![T::ZERO; c];
    for g in 0..groups {
        let range = g * rows * c..(g + 1) * rows * c;
        let xs = &x.data[range.clone()];
        mean.iter_mut().for_each(|v| *v = T::ZERO);
        var.iter_mut().for_each(|v| *v = T::ZERO);
        for row in xs.chunks_exact(c) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / count);
        for row in xs.chunks_exact(c) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        var.iter_mut().for_each(|s| *s = *s / count);
        let istd: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
        let xh = &mut xhat[range.clone()];
        let ys = &mut y[range];
        for ((row, xr), yr) in xs.chunks_exact(c).zip(xh.chunks_exact_mut(c)).zip(ys.chunks_exact_mut(c)) {
            for ch in 0..c {
                let n = (row[ch] - mean[ch]) * istd[ch];
                xr[ch] = n;
                yr[ch] = p.gamma[ch] * n + p.beta[ch];
            }
        }
        inv_std[g * c..(g + 1) * c].copy_from_slice(&istd);
        for ch in 0..c {
            stats.mean[ch] += mean[ch];
            stats.var[ch] += var[ch];
        }
    }
    let gcount = T::from_f64(groups as f64);
    stats.mean.iter_mut().for_each(|v| *v = *v / gcount);
    stats.var.iter_mut().for_each(|v| *v = *v / gcount);

    Ok((
        Tensor {
            shape: x.shape.clone(),
            data: y,
        },
        BnCache {
            xhat,
            inv_std,
            group: bn_group,
        },
        stats,
    ))
}

/// Inference-mode forward using running statistics.
pub fn batchnorm_forward_eval<T: Scalar>(x: &Tensor<T>, p: &BnParams<T>) -> Result<Tensor<T>> {
    let c = p.channels();
    split(x, c)?;
    let eps = T::from_f64(BN_EPS);
    let scale: Vec<T> = (0..c).map(|ch| p.gamma[ch] / (p.running_var[ch] + eps).sqrt()).collect();
    let shift: Vec<T> = (0..c).map(|ch| p.beta[ch] - p.running_mean[ch] * scale[ch]).collect();
    let mut y = x.clone();
    for row in y.data.chunks_exact_mut(c) {
        for ch in 0..c {
            row[ch] = row[ch] * scale[ch] + shift[ch];
        }
    }
    Ok(y)
}

/// Mode-dispatching forward; in training mode the running statistics of `p`
/// are updated.
pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    p: &mut BnParams<T>,
    bn_group: usize,
    mode: BnMode,
) -> Result<(Tensor<T>, Option<BnCache<T>>)> {
    match mode {
        BnMode::Train => {
            let (y, cache, stats) = batchnorm_forward_train(x, p, bn_group)?;
            p.update_running(&stats);
            Ok((y, Some(cache)))
        }
        BnMode::Eval => Ok((batchnorm_forward_eval(x, p)?, None)),
    }
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward<T: Scalar>(
    dy: &Tensor<T>,
    p: &BnParams<T>,
    cache: &BnCache<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let c = p.channels();
    if dy.data.len() != cache.xhat.len() {
        return Err(Error::Shape("batch norm gradient does not match cached input".into()));
    }
    let (b, positions) = split(dy, c)?;
    let groups = b / cache.group;
    let rows = cache.group * positions;
    let count = T::from_f64(rows as f64);

    let mut dx = vec![T::ZERO; dy.data.len()];
    let mut dgamma = vec![T::ZERO; c];
    let mut dbeta = vec![T::ZERO; c];
    let mut sum_dy = vec![T::ZERO; c];
    let mut sum_dy_xhat = vec![T::ZERO; c];
    for g in 0..groups {
        let range = g * rows * c..(g + 1) * rows * c;
        let dys = &dy.data[range.clone()];
        let xh = &cache.xhat[range.clone()];
        sum_dy.iter_mut().for_each(|v| *v = T::ZERO);
        sum_dy_xhat.iter_mut().for_each(|v| *v = T::ZERO);
        for (dr, xr) in dys.chunks_exact(c).zip(xh.chunks_exact(c)) {
            for ch in 0..c {
                sum_dy[ch] += dr[ch];
                sum_dy_xhat[ch] += dr[ch] * xr[ch];
            }
        }
        for ch in 0..c {
            dgamma[ch] += sum_dy_xhat[ch];
            dbeta[ch] += sum_dy[ch];
        }
        let istd = &cache.inv_std[g * c..(g + 1) * c];
        let dxs = &mut dx[range];
        for ((dr, xr), out) in dys.chunks_exact(c).zip(xh.chunks_exact(c)).zip(dxs.chunks_exact_mut(c)) {
            for ch in 0..c {
                let k = p.gamma[ch] * istd[ch] / count;
                out[ch] = k * (count * dr[ch] - sum_dy[ch] - xr[ch] * sum_dy_xhat[ch]);
            }
        }
    }
    Ok((
        Tensor {
            shape: dy.shape.clone(),
            data: dx,
        },
        dgamma,
        dbeta,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_input_gives_beta() {
        let mut p = BnParams::<f64>::new(2);
        p.beta = vec![0.3, -1.5];
        p.gamma = vec![2.0, 0.5];
        let x = Tensor::from_vec(&[4, 1, 2, 2, 2], vec![7.0; 32]).unwrap();
        for group in [1, 2, 4] {
            let (y, _, _) = batchnorm_forward_train(&x, &p, group).unwrap();
            for row in y.data.chunks_exact(2) {
                assert_eq!(row, [0.3, -1.5]);
            }
        }
    }

    #[test]
    fn single_group_equals_ungrouped() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_vec(&[4, 2, 3, 3, 3], (0..216).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let p = BnParams::<f64>::new(3);
        let (y, _, _) = batchnorm_forward_train(&x, &p, 4).unwrap();
        // ungrouped reference over the whole batch
        let n = 72.0;
        for ch in 0..3 {
            let vals: Vec<f64> = x.data.iter().skip(ch).step_by(3).cloned().collect();
            let m = vals.iter().sum::<f64>() / n;
            let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n;
            for (i, a) in vals.iter().enumerate() {
                let want = (a - m) / (v + BN_EPS).sqrt();
                assert!((y.data[i * 3 + ch] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn per_half_statistics() {
        // b = 4, group 2: first half around 10 with spread 1, second around -3 with spread 5.
        let mut data = Vec::new();
        for clip in 0..4 {
            for k in 0..8 {
                let base = if clip < 2 { 10.0 } else { -3.0 };
                let spread = if clip < 2 { 1.0 } else { 5.0 };
                data.push(base + spread * ((k as f64 * 0.7 + clip as f64).sin()));
            }
        }
        let x = Tensor::from_vec(&[4, 2, 2, 2, 1], data).unwrap();
        let p = BnParams::<f64>::new(1);
        let (y, _, _) = batchnorm_forward_train(&x, &p, 2).unwrap();
        for half in y.data.chunks_exact(16) {
            let m = half.iter().sum::<f64>() / 16.0;
            let v = half.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-5, "mean {m}");
            assert!((v - 1.0).abs() < 1e-4, "var {v}");
        }
        let (y1, _, _) = batchnorm_forward_train(&x, &p, 4).unwrap();
        assert!(y1.data[..16].iter().sum::<f64>() / 16.0 > 0.5);
    }

    #[test]
    fn bad_group_rejected_and_eval_uses_running() {
        let p = BnParams::<f32>::new(1);
        let x = Tensor::from_vec(&[3, 1, 1, 1, 1], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(
            batchnorm_forward_train(&x, &p, 2),
            Err(Error::BnGroup { group: 2, batch: 3 })
        ));
        let mut p = BnParams::<f32>::new(1);
        let (_, cache) = batchnorm_forward(&x, &mut p, 3, BnMode::Train).unwrap();
        assert!(cache.is_some());
        assert!((p.running_mean[0] - 0.2).abs() < 1e-6);
        let var = 2.0f32 / 3.0;
        assert!((p.running_var[0] - (0.9 + 0.1 * var)).abs() < 1e-6);
        let (y, cache) = batchnorm_forward(&x, &mut p, 3, BnMode::Eval).unwrap();
        assert!(cache.is_none());
        let want = (1.0 - 0.2) / (p.running_var[0] + 1e-5).sqrt();
        assert!((y.data[0] - want).abs() < 1e-6);
    }
}
