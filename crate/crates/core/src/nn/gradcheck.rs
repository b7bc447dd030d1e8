//! Central finite-difference checks of every backward pass, in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::batchnorm::{batchnorm_backward, batchnorm_forward_train, BnParams};
use super::conv::{conv3d_backward, conv3d_forward, Conv3dSpec};
use super::layers;
use super::{ModelConfig, ModelParams, Tensor};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares `analytic` with central differences of `f` around `x`.
pub fn probe(name: &str, x: &[f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<GradReport> {
    let mut worst = 0.0f64;
    let mut buf = x.to_vec();
    for i in 0..x.len() {
        buf[i] = x[i] + FD_STEP;
        let up = f(&buf)?;
        buf[i] = x[i] - FD_STEP;
        let down = f(&buf)?;
        buf[i] = x[i];
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * FD_STEP)));
    }
    Ok(GradReport {
        name: name.to_string(),
        max_rel_err: worst,
        checked: x.len(),
    })
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

fn with(t: &Tensor<f64>, data: &[f64]) -> Tensor<f64> {
    Tensor {
        shape: t.shape.clone(),
        data: data.to_vec(),
    }
}

pub fn check_conv(rng: &mut ChaCha8Rng) -> Result<Vec<GradReport>> {
    let spec = Conv3dSpec {
        c_in: 2,
        c_out: 3,
        kernel: [3, 3, 3],
        stride: [1, 2, 2],
        pad: [1, 1, 1],
    };
    let x = randn(rng, &[2, 3, 5, 5, 2]);
    let w = randn(rng, &spec.weight_shape());
    let y = conv3d_forward(&x, &w, &spec)?;
    let r = randn(rng, &y.shape);
    let (dx, dw) = conv3d_backward(&x, &w, &spec, &r, true)?;
    Ok(vec![
        probe("conv3d.input", &x.data, &dx.expect("requested").data, |v| {
            Ok(dot(&conv3d_forward(&with(&x, v), &w, &spec)?, &r))
        })?,
        probe("conv3d.weight", &w.data, &dw.data, |v| {
            Ok(dot(&conv3d_forward(&x, &with(&w, v), &spec)?, &r))
        })?,
    ])
}

pub fn check_batchnorm(rng: &mut ChaCha8Rng) -> Result<Vec<GradReport>> {
    let x = randn(rng, &[4, 2, 3, 3, 2]);
    let mut p = BnParams::<f64>::new(2);
    p.gamma = vec![1.3, -0.7];
    p.beta = vec![0.2, 0.5];
    let group = 2;
    let (y, cache, _) = batchnorm_forward_train(&x, &p, group)?;
    let r = randn(rng, &y.shape);
    let (dx, dg, db) = batchnorm_backward(&r, &p, &cache)?;
    let mut out = vec![probe("batchnorm.input(group=2)", &x.data, &dx.data, |v| {
        Ok(dot(&batchnorm_forward_train(&with(&x, v), &p, group)?.0, &r))
    })?];
    out.push(probe("batchnorm.gamma", &p.gamma.clone(), &dg, |v| {
        let q = BnParams { gamma: v.to_vec(), ..p.clone() };
        Ok(dot(&batchnorm_forward_train(&x, &q, group)?.0, &r))
    })?);
    out.push(probe("batchnorm.beta", &p.beta.clone(), &db, |v| {
        let q = BnParams { beta: v.to_vec(), ..p.clone() };
        Ok(dot(&batchnorm_forward_train(&x, &q, group)?.0, &r))
    })?);
    Ok(out)
}

pub fn check_relu(rng: &mut ChaCha8Rng) -> Result<Vec<GradReport>> {
    let mut x = randn(rng, &[2, 2, 3, 3, 2]);
    // keep inputs away from the kink
    for v in &mut x.data {
        if v.abs() < 0.05 {
            *v += 0.1f64.copysign(*v);
        }
    }
    let y = layers::relu_forward(&x);
    let r = randn(rng, &y.shape);
    let dx = layers::relu_backward(&y, &r);
    Ok(vec![probe("relu", &x.data, &dx.data, |v| {
        Ok(dot(&layers::relu_forward(&with(&x, v)), &r))
    })?])
}

pub fn check_pool(rng: &mut ChaCha8Rng) -> Result<Vec<GradReport>> {
    let x = randn(rng, &[2, 2, 3, 3, 2]);
    let y = layers::global_avg_pool(&x)?;
    let r = randn(rng, &y.shape);
    let dx = layers::global_avg_pool_backward(&r, &x.shape)?;
    Ok(vec![probe("global_avg_pool", &x.data, &dx.data, |v| {
        Ok(dot(&layers::global_avg_pool(&with(&x, v))?, &r))
    })?])
}

pub fn check_linear_ce(rng: &mut ChaCha8Rng) -> Result<Vec<GradReport>> {
    let x = randn(rng, &[3, 4]);
    let w = randn(rng, &[4, 5]);
    let bias: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels = [0usize, 4, 2];
    let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]| -> Result<f64> {
        Ok(layers::softmax_cross_entropy(&layers::linear_forward(x, w, b)?, &labels)?.0)
    };
    let logits = layers::linear_forward(&x, &w, &bias)?;
    let (_, dlogits) = layers::softmax_cross_entropy(&logits, &labels)?;
    let (dx, dw, db) = layers::linear_backward(&x, &w, &dlogits)?;
    Ok(vec![
        probe("linear+ce.input", &x.data, &dx.data, |v| loss(&with(&x, v), &w, &bias))?,
        probe("linear+ce.weight", &w.data, &dw.data, |v| loss(&x, &with(&w, v), &bias))?,
        probe("linear+ce.bias", &bias, &db, |v| loss(&x, &w, v))?,
    ])
}

/// Every parameter of a small two-layer model, grouped BN included.
pub fn check_model(rng: &mut ChaCha8Rng) -> Result<Vec<GradReport>> {
    let config = ModelConfig {
        in_channels: 1,
        stem_channels: 2,
        stem_kernel: [3, 3, 3],
        stem_stride: [1, 2, 2],
        block_channels: vec![3],
        block_strides: vec![[1, 1, 1]],
        classes: 3,
    };
    let params = ModelParams::<f64>::init(&config, rng)?;
    let x = randn(rng, &[4, 2, 6, 6, 1]);
    let labels = [0usize, 2, 1, 2];
    let group = 2;
    let (logits, cache, _) = params.forward_train(&x, group)?;
    let (_, dlogits) = layers::softmax_cross_entropy(&logits, &labels)?;
    let grads = params.backward(&cache, &dlogits)?;
    let names = ["conv0.weight", "bn0.gamma", "bn0.beta", "conv1.weight", "bn1.gamma", "bn1.beta", "fc.weight", "fc.bias"];
    let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
    let mut out = Vec::new();
    for (k, name) in names.iter().enumerate() {
        let theta = params.param_slices()[k].to_vec();
        out.push(probe(&format!("model.{name}"), &theta, &analytic[k], |v| {
            let mut q = params.clone();
            q.param_slices_mut()[k].copy_from_slice(v);
            q.loss(&x, &labels, group)
        })?);
    }
    Ok(out)
}

/// Runs every check from one seed.
pub fn run_all(seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = check_conv(&mut rng)?;
    out.extend(check_batchnorm(&mut rng)?);
    out.extend(check_relu(&mut rng)?);
    out.extend(check_pool(&mut rng)?);
    out.extend(check_linear_ce(&mut rng)?);
    out.extend(check_model(&mut rng)?);
    Ok(out)
}
