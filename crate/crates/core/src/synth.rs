//! Procedural moving-blob videos and the mini-batch sampler.
//!
//! Each video is a Gaussian blob translating with constant velocity on a
//! torus, plus i.i.d. Gaussian noise. The class is `(direction, speed)`, so
//! a model needs both appearance and motion to tell classes apart.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::clipbin;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::par;
use crate::sampling_grid::{self, Clip, SpanPolicy};
use crate::schedule::IterationRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_videos: usize,
    /// Evenly spaced headings, starting at +x.
    pub directions: usize,
    /// Pixels per frame, one class per (direction, speed).
    pub speeds: Vec<f64>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Standard deviation of the blob, in pixels.
    pub blob_radius: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_videos: 2000,
            directions: 4,
            speeds: vec![0.5, 2.5],
            frames: 32,
            height: 64,
            width: 64,
            blob_radius: 4.0,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn classes(&self) -> usize {
        self.directions * self.speeds.len()
    }

    /// `label = speed_index * directions + direction_index`.
    pub fn velocity(&self, label: usize) -> (f64, f64) {
        let dir = label % self.directions;
        let speed = self.speeds[label / self.directions];
        let angle = 2.0 * PI * dir as f64 / self.directions as f64;
        (speed * angle.cos(), speed * angle.sin())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::config(format!("data.{key}"), msg));
        if self.classes() < 2 {
            return bad("speeds", "need at least 2 classes (directions x speeds)");
        }
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return bad("frames", "source dims must be >= 1");
        }
        if !(self.blob_radius.is_finite() && self.blob_radius > 0.0) {
            return bad("blob_radius", "must be > 0");
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad("noise", "must be finite and >= 0");
        }
        if self.speeds.iter().any(|s| !s.is_finite()) {
            return bad("speeds", "must be finite");
        }
        Ok(())
    }

    /// Requires every scheduled temporal span to fit in the source.
    pub fn check_fits(&self, max_t_span: f64) -> Result<()> {
        if max_t_span > self.frames as f64 + 1e-9 {
            return Err(Error::config(
                "data.frames",
                format!("{} frames cannot hold a scheduled span of {max_t_span}", self.frames),
            ));
        }
        Ok(())
    }
}

fn torus_delta(a: f64, b: f64, period: f64) -> f64 {
    let d = (a - b).rem_euclid(period);
    d.min(period - d)
}

/// Video `index`: deterministic given `(spec.seed, index)`.
pub fn generate_video(spec: &SynthSpec, index: usize) -> (Clip, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let label = rng.random_range(0..spec.classes());
    let (vx, vy) = spec.velocity(label);
    let (h, w) = (spec.height as f64, spec.width as f64);
    let x0 = rng.random_range(0.0..w);
    let y0 = rng.random_range(0.0..h);
    let noise = Normal::new(0.0, spec.noise).expect("validated noise");
    let inv = 1.0 / (2.0 * spec.blob_radius * spec.blob_radius);
    let mut data = Vec::with_capacity(spec.frames * spec.height * spec.width);
    for f in 0..spec.frames {
        let cx = x0 + vx * f as f64;
        let cy = y0 + vy * f as f64;
        let gx: Vec<f64> = (0..spec.width)
            .map(|x| (-torus_delta(x as f64, cx, w).powi(2) * inv).exp())
            .collect();
        for y in 0..spec.height {
            let gy = (-torus_delta(y as f64, cy, h).powi(2) * inv).exp();
            for &g in &gx {
                let n = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                data.push((gy * g + n) as f32);
            }
        }
    }
    let clip = Clip::new(spec.frames, spec.height, spec.width, 1, data).expect("finite by construction");
    (clip, label)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub videos: Vec<Clip>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Index {
    spec: SynthSpec,
    files: Vec<String>,
    labels: Vec<usize>,
}

impl SynthDataset {
    pub fn generate(spec: &SynthSpec) -> Result<Self> {
        spec.validate()?;
        let (videos, labels) = par::map_indexed(spec.num_videos, |i| generate_video(spec, i))
            .into_iter()
            .unzip();
        Ok(SynthDataset {
            spec: spec.clone(),
            videos,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn source_shape(&self) -> (usize, usize, usize) {
        (self.spec.frames, self.spec.height, self.spec.width)
    }

    /// One CLIPBIN file per video plus `index.json`.
    pub fn dump(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let files: Vec<String> = (0..self.len()).map(|i| format!("{i:06}.clb")).collect();
        for (name, clip) in files.iter().zip(&self.videos) {
            clipbin::save(dir.join(name), clip)?;
        }
        let index = Index {
            spec: self.spec.clone(),
            files,
            labels: self.labels.clone(),
        };
        fs::write(dir.join("index.json"), serde_json::to_vec_pretty(&index)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index: Index = serde_json::from_slice(&fs::read(dir.join("index.json"))?)?;
        if index.files.len() != index.labels.len() {
            return Err(Error::Format("index.json: files and labels differ in length".into()));
        }
        let videos = index
            .files
            .iter()
            .map(|f| clipbin::load(dir.join(f)))
            .collect::<Result<Vec<_>>>()?;
        let classes = index.spec.classes();
        if let Some(&l) = index.labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Format(format!("index.json: label {l} out of range")));
        }
        Ok(SynthDataset {
            spec: index.spec,
            videos,
            labels: index.labels,
        })
    }
}

/// The batch RNG for iteration `iter` of a run seeded with `seed`.
pub fn batch_rng(seed: u64, iter: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iter as u64);
    rng
}

/// Draws `record.shape.b` videos with replacement, one random training grid
/// each, and resamples them into a `[b, t, h, w, 1]` batch.
pub fn next_batch(data: &SynthDataset, record: &IterationRecord, seed: u64) -> Result<(Tensor<f32>, Vec<usize>)> {
    if data.is_empty() {
        return Err(Error::config("data.num_videos", "dataset is empty"));
    }
    let s = record.shape;
    let mut rng = batch_rng(seed, record.iter);
    let mut picks = Vec::with_capacity(s.b);
    for _ in 0..s.b {
        let v = rng.random_range(0..data.len());
        let grid = sampling_grid::draw_training_grid(
            data.source_shape(),
            (s.t, s.h, s.w),
            &record.sample_ranges,
            SpanPolicy::Clamp,
            &mut rng,
        )?;
        picks.push((v, grid));
    }
    let per_clip = s.t * s.h * s.w;
    let mut out = vec![0f32; s.b * per_clip];
    let mut failure = std::sync::Mutex::new(None);
    par::for_each_chunk_mut(&mut out, per_clip, |i, dst| {
        let (v, grid) = &picks[i];
        match sampling_grid::resample(&data.videos[*v], grid) {
            Ok(clip) if clip.data.len() == dst.len() => dst.copy_from_slice(&clip.data),
            Ok(clip) => {
                let msg = format!("grid produced {:?}, expected {}x{}x{}", clip.dims(), s.t, s.h, s.w);
                failure.lock().unwrap().get_or_insert(Error::Shape(msg));
            }
            Err(e) => {
                failure.lock().unwrap().get_or_insert(e);
            }
        }
    });
    if let Some(e) = failure.get_mut().unwrap().take() {
        return Err(e);
    }
    let labels = picks.iter().map(|(v, _)| data.labels[*v]).collect();
    Ok((Tensor::from_vec(&[s.b, s.t, s.h, s.w, 1], out)?, labels))
}
