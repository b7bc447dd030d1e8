//! The reference 3D CNN: a `3x7x7` stem with spatial stride 2, a stack of
//! `3x3x3` conv blocks, each conv followed by BN and ReLU, then global average
//! pooling and a single fully connected classifier.
//!
//! Convolutions share weights over `t, h, w` and the classifier sees pooled
//! features, so the same parameters accept every input shape at or above the
//! network minimum.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::batchnorm::{self, BnCache, BnParams, BnStats};
use super::conv::{self, Conv3dSpec};
use super::layers;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stem_kernel: [usize; 3],
    pub stem_stride: [usize; 3],
    pub block_channels: Vec<usize>,
    pub block_strides: Vec<[usize; 3]>,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            stem_channels: 8,
            stem_kernel: [3, 7, 7],
            stem_stride: [1, 2, 2],
            block_channels: vec![8, 16],
            block_strides: vec![[1, 1, 1], [1, 2, 2]],
            classes: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::config(format!("model.{key}"), msg));
        if self.in_channels == 0 || self.stem_channels == 0 {
            return bad("stem_channels", "channel counts must be >= 1");
        }
        if self.classes < 2 {
            return bad("classes", "need at least 2 classes");
        }
        if self.block_channels.len() != self.block_strides.len() {
            return bad("block_strides", "need one stride per block");
        }
        if self.block_channels.contains(&0) {
            return bad("block_channels", "channel counts must be >= 1");
        }
        let strides = std::iter::once(&self.stem_stride).chain(&self.block_strides);
        if strides.flatten().any(|&s| s == 0) || self.stem_kernel.contains(&0) {
            return bad("stem_stride", "strides and kernels must be >= 1");
        }
        Ok(())
    }

    pub fn conv_specs(&self) -> Vec<Conv3dSpec> {
        let mut specs = vec![Conv3dSpec {
            c_in: self.in_channels,
            c_out: self.stem_channels,
            kernel: self.stem_kernel,
            stride: self.stem_stride,
            pad: self.stem_kernel.map(|k| k / 2),
        }];
        let mut c_in = self.stem_channels;
        for (&c_out, &stride) in self.block_channels.iter().zip(&self.block_strides) {
            specs.push(Conv3dSpec {
                c_in,
                c_out,
                kernel: [3, 3, 3],
                stride,
                pad: [1, 1, 1],
            });
            c_in = c_out;
        }
        specs
    }

    pub fn feature_channels(&self) -> usize {
        *self.block_channels.last().unwrap_or(&self.stem_channels)
    }

    /// Smallest accepted `(t, h, w)`: the product of strides per axis.
    pub fn min_input(&self) -> (usize, usize, usize) {
        let mut m = [1usize; 3];
        for s in std::iter::once(&self.stem_stride).chain(&self.block_strides) {
            for d in 0..3 {
                m[d] *= s[d];
            }
        }
        (m[0], m[1], m[2])
    }

    /// Forward multiply-accumulates for a batch of `[b, t, h, w]`.
    pub fn forward_macs(&self, b: usize, t: usize, h: usize, w: usize) -> Result<u64> {
        let mut dims = [t, h, w];
        let mut total = 0u64;
        for spec in self.conv_specs() {
            total += spec.macs(b, dims)?;
            dims = spec.output_dims(dims)?;
        }
        Ok(total + (b * self.feature_channels() * self.classes) as u64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub specs: Vec<Conv3dSpec>,
    pub convs: Vec<Tensor<T>>,
    pub bns: Vec<BnParams<T>>,
    pub fc_w: Tensor<T>,
    pub fc_b: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub convs: Vec<Tensor<T>>,
    pub bn_gamma: Vec<Vec<T>>,
    pub bn_beta: Vec<Vec<T>>,
    pub fc_w: Tensor<T>,
    pub fc_b: Vec<T>,
}

impl<T: Scalar> Gradients<T> {
    /// Flat views in [`ModelParams::param_slices`] order.
    pub fn slices(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for i in 0..self.convs.len() {
            out.push(&self.convs[i].data);
            out.push(&self.bn_gamma[i]);
            out.push(&self.bn_beta[i]);
        }
        out.push(&self.fc_w.data);
        out.push(&self.fc_b);
        out
    }
}

struct LayerCache<T> {
    input: Tensor<T>,
    bn: BnCache<T>,
    output: Tensor<T>,
}

/// Logits, the cache for [`ModelParams::backward`] and per-layer group statistics.
pub type TrainForward<T> = (Tensor<T>, ForwardCache<T>, Vec<BnStats<T>>);

pub struct ForwardCache<T> {
    layers: Vec<LayerCache<T>>,
    features: Tensor<T>,
    last_shape: Vec<usize>,
}

impl<T: Scalar> ModelParams<T> {
    /// He-normal conv weights, small normal classifier, identity BN.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let specs = config.conv_specs();
        let mut normal = |n: usize, std: f64| -> Vec<T> {
            let d = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| T::from_f64(d.sample(rng))).collect()
        };
        let convs = specs
            .iter()
            .map(|s| {
                let shape = s.weight_shape();
                Tensor::from_vec(&shape, normal(shape.iter().product(), (2.0 / s.fan_in() as f64).sqrt()))
            })
            .collect::<Result<Vec<_>>>()?;
        let feat = config.feature_channels();
        let fc_w = Tensor::from_vec(&[feat, config.classes], normal(feat * config.classes, (1.0 / feat as f64).sqrt()))?;
        Ok(ModelParams {
            config: config.clone(),
            bns: specs.iter().map(|s| BnParams::new(s.c_out)).collect(),
            specs,
            convs,
            fc_w,
            fc_b: vec![T::ZERO; config.classes],
        })
    }

    pub fn param_slices(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for (w, bn) in self.convs.iter().zip(&self.bns) {
            out.push(&w.data);
            out.push(&bn.gamma);
            out.push(&bn.beta);
        }
        out.push(&self.fc_w.data);
        out.push(&self.fc_b);
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for (w, bn) in self.convs.iter_mut().zip(self.bns.iter_mut()) {
            out.push(&mut w.data);
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
        }
        out.push(&mut self.fc_w.data);
        out.push(&mut self.fc_b);
        out
    }

    pub fn num_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let v = |x: &[T]| x.iter().map(|a| U::from_f64(a.to_f64())).collect::<Vec<U>>();
        ModelParams {
            config: self.config.clone(),
            specs: self.specs.clone(),
            convs: self.convs.iter().map(|t| t.cast()).collect(),
            bns: self
                .bns
                .iter()
                .map(|b| BnParams {
                    gamma: v(&b.gamma),
                    beta: v(&b.beta),
                    running_mean: v(&b.running_mean),
                    running_var: v(&b.running_var),
                })
                .collect(),
            fc_w: self.fc_w.cast(),
            fc_b: v(&self.fc_b),
        }
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [_, t, h, w, c] = x.dims5()?;
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "model expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let (mt, mh, mw) = self.config.min_input();
        if t < mt || h < mh || w < mw {
            return Err(Error::Shape(format!(
                "input {t}x{h}x{w} is below the network minimum {mt}x{mh}x{mw}"
            )));
        }
        Ok(())
    }

    /// Training-mode forward. Running statistics are not touched; the
    /// per-layer group statistics are returned instead.
    pub fn forward_train(&self, x: &Tensor<T>, bn_group: usize) -> Result<TrainForward<T>> {
        self.check_input(x)?;
        let mut layers = Vec::with_capacity(self.specs.len());
        let mut stats = Vec::with_capacity(self.specs.len());
        let mut h = x.clone();
        for ((spec, w), bn) in self.specs.iter().zip(&self.convs).zip(&self.bns) {
            let z = conv::conv3d_forward(&h, w, spec)?;
            let (n, cache, s) = batchnorm::batchnorm_forward_train(&z, bn, bn_group)?;
            let out = layers::relu_forward(&n);
            stats.push(s);
            layers.push(LayerCache {
                input: std::mem::replace(&mut h, out.clone()),
                bn: cache,
                output: out,
            });
        }
        let last_shape = h.shape.clone();
        let features = layers::global_avg_pool(&h)?;
        let logits = layers::linear_forward(&features, &self.fc_w, &self.fc_b)?;
        Ok((
            logits,
            ForwardCache {
                layers,
                features,
                last_shape,
            },
            stats,
        ))
    }

    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: &Tensor<T>) -> Result<Gradients<T>> {
        let (dfeat, fc_w, fc_b) = layers::linear_backward(&cache.features, &self.fc_w, dlogits)?;
        let mut dh = layers::global_avg_pool_backward(&dfeat, &cache.last_shape)?;
        let n = self.specs.len();
        let mut convs = vec![None; n];
        let mut bn_gamma = vec![Vec::new(); n];
        let mut bn_beta = vec![Vec::new(); n];
        for i in (0..n).rev() {
            let lc = &cache.layers[i];
            let dn = layers::relu_backward(&lc.output, &dh);
            let (dz, dg, db) = batchnorm::batchnorm_backward(&dn, &self.bns[i], &lc.bn)?;
            let (dx, dw) = conv::conv3d_backward(&lc.input, &self.convs[i], &self.specs[i], &dz, i > 0)?;
            convs[i] = Some(dw);
            bn_gamma[i] = dg;
            bn_beta[i] = db;
            if let Some(dx) = dx {
                dh = dx;
            }
        }
        Ok(Gradients {
            convs: convs.into_iter().map(|c| c.expect("every layer visited")).collect(),
            bn_gamma,
            bn_beta,
            fc_w,
            fc_b,
        })
    }

    /// Mean training-mode loss without side effects.
    pub fn loss(&self, x: &Tensor<T>, labels: &[usize], bn_group: usize) -> Result<T> {
        let (logits, _, _) = self.forward_train(x, bn_group)?;
        Ok(layers::softmax_cross_entropy(&logits, labels)?.0)
    }

    /// Inference-mode logits using BN running statistics.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for ((spec, w), bn) in self.specs.iter().zip(&self.convs).zip(&self.bns) {
            let z = conv::conv3d_forward(&h, w, spec)?;
            h = layers::relu_forward(&batchnorm::batchnorm_forward_eval(&z, bn)?);
        }
        let features = layers::global_avg_pool(&h)?;
        layers::linear_forward(&features, &self.fc_w, &self.fc_b)
    }

    pub fn apply_bn_stats(&mut self, stats: &[BnStats<T>]) {
        for (bn, s) in self.bns.iter_mut().zip(stats) {
            bn.update_running(s);
        }
    }
}

/// Training step forward/backward: mean cross-entropy loss and gradients.
/// BN running statistics of `params` are updated.
pub fn model_forward_backward<T: Scalar>(
    params: &mut ModelParams<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    bn_group: usize,
) -> Result<(T, Gradients<T>)> {
    let (logits, cache, stats) = params.forward_train(batch, bn_group)?;
    let (loss, dlogits) = layers::softmax_cross_entropy(&logits, labels)?;
    let grads = params.backward(&cache, &dlogits)?;
    params.apply_bn_stats(&stats);
    Ok((loss, grads))
}
