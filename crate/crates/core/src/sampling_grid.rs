//! Sampling grids and the spatiotemporal resampler.
//!
//! A grid is a span and a stride per dimension, plus an offset that positions
//! it inside the source clip. Dividing span by stride gives the number of
//! sample points, so two grids with different spans can produce the same data
//! shape. Temporal samples use the nearest source frame; spatial samples are
//! bilinear with pixel centers on integer coordinates and edge clamping.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack for `span / stride` so that a stride computed as `span / n` still
/// yields exactly `n` samples after floating-point division.
const COUNT_EPS: f64 = 1e-9;
/// Slack for the in-bounds check on grids built from real-valued spans.
const BOUNDS_EPS: f64 = 1e-6;

/// A dense clip, `frames x height x width x channels`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Clip {
    pub fn new(frames: usize, height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "clip dims must be >= 1, got {frames}x{height}x{width}x{channels}"
            )));
        }
        let expected = frames * height * width * channels;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "clip {frames}x{height}x{width}x{channels} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format(format!("non-finite clip value at index {i}")));
        }
        Ok(Clip {
            frames,
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(frames: usize, height: usize, width: usize, channels: usize, value: f32) -> Self {
        Clip {
            frames,
            height,
            width,
            channels,
            data: vec![value; frames * height * width * channels],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.frames, self.height, self.width, self.channels)
    }

    #[inline]
    pub fn index(&self, f: usize, y: usize, x: usize, c: usize) -> usize {
        ((f * self.height + y) * self.width + x) * self.channels + c
    }

    pub fn frame(&self, f: usize) -> &[f32] {
        let n = self.height * self.width * self.channels;
        &self.data[f * n..(f + 1) * n]
    }
}

/// A concrete sampling grid over one source clip.
///
/// Spans are real-valued: a randomized spatial grid resizes a crop by a
/// non-integer factor, so its span is generally fractional.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub t_span: f64,
    pub t_stride: f64,
    pub t_offset: f64,
    pub s_span_h: f64,
    pub s_span_w: f64,
    pub s_stride_h: f64,
    pub s_stride_w: f64,
    pub s_offset_y: f64,
    pub s_offset_x: f64,
}

fn sample_count(span: f64, stride: f64) -> usize {
    if !(span > 0.0 && stride > 0.0) {
        return 0;
    }
    (span / stride + COUNT_EPS).floor() as usize
}

impl GridSpec {
    /// Stride 1, full span, zero offset: reproduces the source exactly.
    pub fn identity(frames: usize, height: usize, width: usize) -> Self {
        GridSpec {
            t_span: frames as f64,
            t_stride: 1.0,
            t_offset: 0.0,
            s_span_h: height as f64,
            s_span_w: width as f64,
            s_stride_h: 1.0,
            s_stride_w: 1.0,
            s_offset_y: 0.0,
            s_offset_x: 0.0,
        }
    }

    /// Output `(frames, height, width)`; depends only on the grid.
    pub fn output_shape(&self) -> (usize, usize, usize) {
        (
            sample_count(self.t_span, self.t_stride),
            sample_count(self.s_span_h, self.s_stride_h),
            sample_count(self.s_span_w, self.s_stride_w),
        )
    }

    /// Checks that the grid lies inside a `frames x height x width` source.
    pub fn check_bounds(&self, frames: usize, height: usize, width: usize) -> Result<()> {
        let axes = [
            ("temporal", self.t_offset, self.t_span, self.t_stride, frames),
            ("vertical", self.s_offset_y, self.s_span_h, self.s_stride_h, height),
            ("horizontal", self.s_offset_x, self.s_span_w, self.s_stride_w, width),
        ];
        for (name, offset, span, stride, extent) in axes {
            let finite = offset.is_finite() && span.is_finite() && stride.is_finite();
            if !finite || offset < 0.0 || span <= 0.0 || stride <= 0.0 {
                return Err(Error::GridOutOfBounds(format!(
                    "{name} axis: offset {offset}, span {span}, stride {stride}"
                )));
            }
            if offset + span > extent as f64 + BOUNDS_EPS {
                return Err(Error::GridOutOfBounds(format!(
                    "{name} axis: offset {offset} + span {span} exceeds source extent {extent}"
                )));
            }
        }
        Ok(())
    }
}

/// Randomized span ranges for training grids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSampleRanges {
    pub short_side_min: f64,
    pub short_side_max: f64,
    pub t_stride_min: f64,
    pub t_stride_max: f64,
}

impl GridSampleRanges {
    pub fn validate(&self) -> Result<()> {
        let pairs = [
            ("short_side", self.short_side_min, self.short_side_max),
            ("t_stride", self.t_stride_min, self.t_stride_max),
        ];
        for (name, lo, hi) in pairs {
            if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && hi > 0.0) {
                return Err(Error::InvalidRanges(format!(
                    "{name} bounds must be positive and finite, got [{lo}, {hi}]"
                )));
            }
            if lo > hi {
                return Err(Error::InvalidRanges(format!("{name}: min {lo} > max {hi}")));
            }
        }
        if self.t_stride_min.ceil() > self.t_stride_max.floor() {
            return Err(Error::InvalidRanges(format!(
                "t_stride [{}, {}] contains no integer",
                self.t_stride_min, self.t_stride_max
            )));
        }
        Ok(())
    }
}

/// What to do when a drawn span does not fit in the source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanPolicy {
    /// Shrink the span to the source extent and recompute the stride.
    #[default]
    Clamp,
    Reject,
}

/// Resamples `clip` on `grid`.
pub fn resample(clip: &Clip, grid: &GridSpec) -> Result<Clip> {
    grid.check_bounds(clip.frames, clip.height, clip.width)?;
    let (out_t, out_h, out_w) = grid.output_shape();
    if out_t == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::InvalidGrid(format!(
            "grid produces empty output {out_t}x{out_h}x{out_w}"
        )));
    }

    let frames: Vec<usize> = (0..out_t)
        .map(|k| {
            let pos = (grid.t_offset + k as f64 * grid.t_stride).round();
            (pos.max(0.0) as usize).min(clip.frames - 1)
        })
        .collect();
    let rows: Vec<Tap> = (0..out_h)
        .map(|i| Tap::new(grid.s_offset_y + i as f64 * grid.s_stride_h, clip.height))
        .collect();
    let cols: Vec<Tap> = (0..out_w)
        .map(|j| Tap::new(grid.s_offset_x + j as f64 * grid.s_stride_w, clip.width))
        .collect();

    let c = clip.channels;
    let mut data = Vec::with_capacity(out_t * out_h * out_w * c);
    for &f in &frames {
        let src = clip.frame(f);
        for row in &rows {
            let r0 = &src[row.lo * clip.width * c..(row.lo + 1) * clip.width * c];
            let r1 = &src[row.hi * clip.width * c..(row.hi + 1) * clip.width * c];
            for col in &cols {
                for ch in 0..c {
                    let a = r0[col.lo * c + ch] as f64;
                    let b = r0[col.hi * c + ch] as f64;
                    let p = r1[col.lo * c + ch] as f64;
                    let q = r1[col.hi * c + ch] as f64;
                    let top = (1.0 - col.w) * a + col.w * b;
                    let bottom = (1.0 - col.w) * p + col.w * q;
                    data.push(((1.0 - row.w) * top + row.w * bottom) as f32);
                }
            }
        }
    }
    Ok(Clip {
        frames: out_t,
        height: out_h,
        width: out_w,
        channels: c,
        data,
    })
}

/// Two neighbouring source indices and the weight of the upper one.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    w: f64,
}

impl Tap {
    fn new(pos: f64, extent: usize) -> Self {
        let last = extent - 1;
        let pos = pos.max(0.0);
        if pos >= last as f64 {
            return Tap { lo: last, hi: last, w: 0.0 };
        }
        let lo = pos.floor() as usize;
        Tap {
            lo,
            hi: lo + 1,
            w: pos - lo as f64,
        }
    }
}

/// Draws a randomized training grid producing exactly `target` = `(t, h, w)`
/// from a `source` = `(frames, height, width)` clip.
///
/// Spatially the source is conceptually resized so its shorter side equals a
/// scale drawn uniformly from `[short_side_min, short_side_max]` (aspect ratio
/// preserved), then a target-sized crop is taken at a uniform position.
/// Temporally an integer stride is drawn uniformly from
/// `{ceil(t_stride_min), ..., floor(t_stride_max)}` with span `t * stride` at a
/// uniform integer start frame.
pub fn draw_training_grid<R: Rng + ?Sized>(
    source: (usize, usize, usize),
    target: (usize, usize, usize),
    ranges: &GridSampleRanges,
    policy: SpanPolicy,
    rng: &mut R,
) -> Result<GridSpec> {
    let (frames, height, width) = source;
    let (t, h, w) = target;
    if t == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidGrid(format!("target {t}x{h}x{w} has a zero dim")));
    }
    if frames == 0 || height == 0 || width == 0 {
        return Err(Error::Shape(format!("source {frames}x{height}x{width} has a zero dim")));
    }
    ranges.validate()?;

    // Spatial.
    let scale = uniform(rng, ranges.short_side_min, ranges.short_side_max);
    let ratio = height.min(width) as f64 / scale;
    let span_h = fit_span(h as f64 * ratio, height, policy, "height")?;
    let span_w = fit_span(w as f64 * ratio, width, policy, "width")?;
    let offset_y = uniform(rng, 0.0, (height as f64 - span_h).max(0.0));
    let offset_x = uniform(rng, 0.0, (width as f64 - span_w).max(0.0));

    // Temporal.
    let lo = ranges.t_stride_min.ceil() as u64;
    let hi = ranges.t_stride_max.floor() as u64;
    let stride = rng.random_range(lo..=hi) as f64;
    let (t_span, t_stride) = {
        let span = t as f64 * stride;
        if span <= frames as f64 {
            (span, stride)
        } else {
            let span = fit_span(span, frames, policy, "frames")?;
            (span, span / t as f64)
        }
    };
    let max_start = (frames as f64 - t_span + BOUNDS_EPS).floor().max(0.0) as u64;
    let t_offset = rng.random_range(0..=max_start) as f64;

    Ok(GridSpec {
        t_span,
        t_stride,
        t_offset,
        s_span_h: span_h,
        s_span_w: span_w,
        s_stride_h: span_h / h as f64,
        s_stride_w: span_w / w as f64,
        s_offset_y: offset_y,
        s_offset_x: offset_x,
    })
}

/// Deterministic test-time grid: short side resized to `short_side`, a
/// centered `h x w` crop, and `t` frames at `t_stride` starting at `t_start`.
pub fn center_grid(
    source: (usize, usize, usize),
    target: (usize, usize, usize),
    short_side: f64,
    t_stride: f64,
    t_start: f64,
) -> Result<GridSpec> {
    let (frames, height, width) = source;
    let (t, h, w) = target;
    let ratio = height.min(width) as f64 / short_side;
    let span_h = fit_span(h as f64 * ratio, height, SpanPolicy::Clamp, "height")?;
    let span_w = fit_span(w as f64 * ratio, width, SpanPolicy::Clamp, "width")?;
    let mut t_span = t as f64 * t_stride;
    let mut stride = t_stride;
    if t_span > frames as f64 {
        t_span = frames as f64;
        stride = t_span / t as f64;
    }
    let t_offset = t_start.clamp(0.0, frames as f64 - t_span);
    Ok(GridSpec {
        t_span,
        t_stride: stride,
        t_offset,
        s_span_h: span_h,
        s_span_w: span_w,
        s_stride_h: span_h / h as f64,
        s_stride_w: span_w / w as f64,
        s_offset_y: (height as f64 - span_h) / 2.0,
        s_offset_x: (width as f64 - span_w) / 2.0,
    })
}

fn fit_span(span: f64, extent: usize, policy: SpanPolicy, axis: &str) -> Result<f64> {
    if span <= extent as f64 {
        return Ok(span);
    }
    match policy {
        SpanPolicy::Clamp => Ok(extent as f64),
        SpanPolicy::Reject => Err(Error::SourceTooSmall(format!(
            "{axis} span {span:.3} exceeds source extent {extent}"
        ))),
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo >= hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}
