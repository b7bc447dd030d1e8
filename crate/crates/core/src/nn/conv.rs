//! 3D convolution (cross-correlation, zero padding), channels-last.
//!
//! Weights are laid out `[kt, kh, kw, c_in, c_out]` so the innermost loop runs
//! over contiguous output channels.

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv3dSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl Conv3dSpec {
    pub fn weight_shape(&self) -> [usize; 5] {
        [self.kernel[0], self.kernel[1], self.kernel[2], self.c_in, self.c_out]
    }

    pub fn fan_in(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.c_in
    }

    /// Output `[t, h, w]` for an input of `[t, h, w]`.
    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for d in 0..3 {
            let padded = input[d] + 2 * self.pad[d];
            if padded < self.kernel[d] {
                return Err(Error::Shape(format!(
                    "axis {d}: input {} with padding {} is smaller than kernel {}",
                    input[d], self.pad[d], self.kernel[d]
                )));
            }
            out[d] = (padded - self.kernel[d]) / self.stride[d] + 1;
        }
        Ok(out)
    }

    /// Multiply-accumulates of one forward pass on `input` with `batch` clips.
    pub fn macs(&self, batch: usize, input: [usize; 3]) -> Result<u64> {
        let o = self.output_dims(input)?;
        Ok(batch as u64 * o.iter().map(|&v| v as u64).product::<u64>() * self.fan_in() as u64 * self.c_out as u64)
    }
}

struct Geometry {
    n: usize,
    it: usize,
    ih: usize,
    iw: usize,
    ot: usize,
    oh: usize,
    ow: usize,
}

fn geometry<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, spec: &Conv3dSpec) -> Result<Geometry> {
    let [n, it, ih, iw, c] = x.dims5()?;
    if c != spec.c_in {
        return Err(Error::Shape(format!("conv expects {} input channels, got {c}", spec.c_in)));
    }
    if w.shape != spec.weight_shape() {
        return Err(Error::Shape(format!(
            "conv weight shape {:?} does not match {:?}",
            w.shape,
            spec.weight_shape()
        )));
    }
    let [ot, oh, ow] = spec.output_dims([it, ih, iw])?;
    Ok(Geometry { n, it, ih, iw, ot, oh, ow })
}

/// Valid `(kernel index, input index)` pairs for output position `o`.
#[inline]
fn taps(o: usize, stride: usize, pad: usize, k: usize, extent: usize) -> impl Iterator<Item = (usize, usize)> {
    let start = o * stride;
    // input index is start + kk - pad, kept inside [0, extent)
    let lo = pad.saturating_sub(start);
    let hi = k.min((extent + pad).saturating_sub(start));
    (lo..hi.max(lo)).map(move |kk| (kk, start + kk - pad))
}

/// The valid taps of [`taps`] as `(first kernel index, first input index, count)`.
#[inline]
fn run(o: usize, stride: usize, pad: usize, k: usize, extent: usize) -> Option<(usize, usize, usize)> {
    let start = o * stride;
    let lo = pad.saturating_sub(start);
    let hi = k.min((extent + pad).saturating_sub(start));
    (hi > lo).then(|| (lo, start + lo - pad, hi - lo))
}

/// Copies the receptive fields of output frame `ot` of clip `xn` into
/// `patch`, one row of `kt*kh*kw*cin` values per output position (zero where
/// the kernel overhangs the padding). Row layout matches the weight layout.
fn gather<T: Scalar>(xn: &[T], ot: usize, g: &Geometry, spec: &Conv3dSpec, patch: &mut [T]) {
    let cin = spec.c_in;
    let [kt, kh, kw] = spec.kernel;
    let kdim = kt * kh * kw * cin;
    patch.fill(T::ZERO);
    for oh in 0..g.oh {
        for ow in 0..g.ow {
            let row = &mut patch[(oh * g.ow + ow) * kdim..][..kdim];
            for (a, it) in taps(ot, spec.stride[0], spec.pad[0], kt, g.it) {
                for (b, ih) in taps(oh, spec.stride[1], spec.pad[1], kh, g.ih) {
                    // valid width taps are contiguous in both layouts
                    let Some((c, iw, len)) = run(ow, spec.stride[2], spec.pad[2], kw, g.iw) else { continue };
                    let xoff = ((it * g.ih + ih) * g.iw + iw) * cin;
                    let koff = ((a * kh + b) * kw + c) * cin;
                    row[koff..koff + len * cin].copy_from_slice(&xn[xoff..xoff + len * cin]);
                }
            }
        }
    }
}

/// Adjoint of [`gather`]: adds patch rows back onto the clip gradient.
fn scatter_add<T: Scalar>(dxn: &mut [T], ot: usize, g: &Geometry, spec: &Conv3dSpec, patch: &[T]) {
    let cin = spec.c_in;
    let [kt, kh, kw] = spec.kernel;
    let kdim = kt * kh * kw * cin;
    for oh in 0..g.oh {
        for ow in 0..g.ow {
            let row = &patch[(oh * g.ow + ow) * kdim..][..kdim];
            for (a, it) in taps(ot, spec.stride[0], spec.pad[0], kt, g.it) {
                for (b, ih) in taps(oh, spec.stride[1], spec.pad[1], kh, g.ih) {
                    let Some((c, iw, len)) = run(ow, spec.stride[2], spec.pad[2], kw, g.iw) else { continue };
                    let xoff = ((it * g.ih + ih) * g.iw + iw) * cin;
                    let koff = ((a * kh + b) * kw + c) * cin;
                    for (d, &v) in dxn[xoff..xoff + len * cin].iter_mut().zip(&row[koff..koff + len * cin]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding, channels-last.
pub fn conv3d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, spec: &Conv3dSpec) -> Result<Tensor<T>> {
    let g = geometry(x, w, spec)?;
    let cout = spec.c_out;
    let kdim = spec.fan_in();
    let rows = g.oh * g.ow;
    let clip_in = g.it * g.ih * g.iw * spec.c_in;
    let mut out = Tensor::zeros(&[g.n, g.ot, g.oh, g.ow, cout]);

    par::for_each_chunk_mut(&mut out.data, rows * cout, |idx, out_slice| {
        let (n, ot) = (idx / g.ot, idx % g.ot);
        let mut patch = vec![T::ZERO; rows * kdim];
        gather(&x.data[n * clip_in..(n + 1) * clip_in], ot, &g, spec, &mut patch);
        T::gemm(rows, kdim, cout, &patch, false, &w.data, false, T::ZERO, out_slice);
    });
    Ok(out)
}

/// Returns `(dx, dw)`; `dx` is skipped when `need_dx` is false.
///
/// Each clip produces its own `dw` partial; partials are summed in clip order
/// so the result does not depend on scheduling.
pub fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &Conv3dSpec,
    dy: &Tensor<T>,
    need_dx: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>)> {
    let g = geometry(x, w, spec)?;
    let cout = spec.c_out;
    if dy.shape != [g.n, g.ot, g.oh, g.ow, cout] {
        return Err(Error::Shape(format!(
            "conv upstream gradient shape {:?} does not match output {:?}",
            dy.shape,
            [g.n, g.ot, g.oh, g.ow, cout]
        )));
    }
    let kdim = spec.fan_in();
    let rows = g.oh * g.ow;
    let clip_in = g.it * g.ih * g.iw * spec.c_in;
    let clip_out = g.ot * rows * cout;
    let wlen = w.data.len();

    let mut dx = if need_dx { vec![T::ZERO; x.data.len()] } else { vec![T::ZERO; g.n] };
    let dx_chunk = if need_dx { clip_in } else { 1 };
    let mut partials = vec![T::ZERO; g.n * wlen];

    par::for_each_chunk_pair_mut(&mut partials, wlen, &mut dx, dx_chunk, |n, dw, dxn| {
        let xn = &x.data[n * clip_in..(n + 1) * clip_in];
        let mut patch = vec![T::ZERO; rows * kdim];
        for ot in 0..g.ot {
            let d = &dy.data[n * clip_out + ot * rows * cout..][..rows * cout];
            gather(xn, ot, &g, spec, &mut patch);
            // dw += patch^T d
            T::gemm(kdim, rows, cout, &patch, true, d, false, T::ONE, dw);
            if need_dx {
                // dpatch = d w^T
                T::gemm(rows, cout, kdim, d, false, &w.data, true, T::ZERO, &mut patch);
                scatter_add(dxn, ot, &g, spec, &patch);
            }
        }
    });

    let mut dw = Tensor::zeros(&w.shape);
    for p in partials.chunks_exact(wlen) {
        for (d, &v) in dw.data.iter_mut().zip(p) {
            *d += v;
        }
    }
    let dx = need_dx.then(|| Tensor {
        shape: x.shape.clone(),
        data: dx,
    });
    Ok((dx, dw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct nested-loop convolution with explicit zero-padding checks.
    fn reference(x: &Tensor<f64>, w: &Tensor<f64>, s: &Conv3dSpec) -> Tensor<f64> {
        let [n, t, h, wd, ci] = x.dims5().unwrap();
        let [ot, oh, ow] = s.output_dims([t, h, wd]).unwrap();
        let co = s.c_out;
        let mut out = Tensor::zeros(&[n, ot, oh, ow, co]);
        for b in 0..n {
            for a in 0..ot {
                for y in 0..oh {
                    for z in 0..ow {
                        for o in 0..co {
                            let mut acc = 0.0;
                            for i in 0..s.kernel[0] {
                                for j in 0..s.kernel[1] {
                                    for k in 0..s.kernel[2] {
                                        let ti = (a * s.stride[0] + i) as isize - s.pad[0] as isize;
                                        let yi = (y * s.stride[1] + j) as isize - s.pad[1] as isize;
                                        let zi = (z * s.stride[2] + k) as isize - s.pad[2] as isize;
                                        if ti < 0 || yi < 0 || zi < 0 || ti >= t as isize || yi >= h as isize || zi >= wd as isize {
                                            continue;
                                        }
                                        for c in 0..ci {
                                            let xv = x.data[(((b * t + ti as usize) * h + yi as usize) * wd + zi as usize) * ci + c];
                                            let wv = w.data[(((i * s.kernel[1] + j) * s.kernel[2] + k) * ci + c) * co + o];
                                            acc += xv * wv;
                                        }
                                    }
                                }
                            }
                            out.data[(((b * ot + a) * oh + y) * ow + z) * co + o] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn pointwise_identity_kernel() {
        let spec = Conv3dSpec { c_in: 1, c_out: 1, kernel: [1, 1, 1], stride: [1, 1, 1], pad: [0, 0, 0] };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random(&[2, 3, 4, 5, 1], &mut rng);
        let w = Tensor::from_vec(&[1, 1, 1, 1, 1], vec![1.0]).unwrap();
        assert_eq!(conv3d_forward(&x, &w, &spec).unwrap(), x);
    }

    #[test]
    fn ones_kernel_counts_interior() {
        let spec = Conv3dSpec { c_in: 3, c_out: 2, kernel: [3, 3, 3], stride: [1, 1, 1], pad: [1, 1, 1] };
        let x = Tensor::from_vec(&[1, 4, 4, 4, 3], vec![1.0f64; 192]).unwrap();
        let w = Tensor::from_vec(&spec.weight_shape(), vec![1.0; 27 * 6]).unwrap();
        let y = conv3d_forward(&x, &w, &spec).unwrap();
        let interior = ((4 + 1) * 4 + 1) * 2;
        assert_eq!(y.data[interior], 27.0 * 3.0);
        assert_eq!(y.data[0], 8.0 * 3.0); // corner sees 2x2x2 taps
    }

    #[test]
    fn matches_reference_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let specs = [
            Conv3dSpec { c_in: 1, c_out: 1, kernel: [3, 3, 3], stride: [1, 1, 1], pad: [1, 1, 1] },
            Conv3dSpec { c_in: 1, c_out: 3, kernel: [3, 3, 3], stride: [1, 2, 2], pad: [1, 1, 1] },
            Conv3dSpec { c_in: 2, c_out: 3, kernel: [2, 3, 1], stride: [2, 1, 1], pad: [0, 1, 0] },
        ];
        for spec in specs {
            let x = random(&[2, 4, 4, 4, spec.c_in], &mut rng);
            let w = random(&spec.weight_shape(), &mut rng);
            let got = conv3d_forward(&x, &w, &spec).unwrap();
            let want = reference(&x, &w, &spec);
            assert_eq!(got.shape, want.shape);
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_adjoint_of_reference() {
        // <dy, conv(x)> is bilinear, so dx and dw are exact adjoints of the
        // reference operator: check them against unit-vector probes.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = Conv3dSpec { c_in: 2, c_out: 2, kernel: [3, 3, 3], stride: [1, 2, 2], pad: [1, 1, 1] };
        let x = random(&[2, 3, 5, 4, 2], &mut rng);
        let w = random(&spec.weight_shape(), &mut rng);
        let y = reference(&x, &w, &spec);
        let dy = random(&y.shape, &mut rng);
        let (dx, dw) = conv3d_backward(&x, &w, &spec, &dy, true).unwrap();
        let dx = dx.unwrap();
        let dot = |a: &Tensor<f64>, b: &Tensor<f64>| a.data.iter().zip(&b.data).map(|(p, q)| p * q).sum::<f64>();
        for i in (0..x.len()).step_by(7) {
            let mut e = Tensor::zeros(&x.shape);
            e.data[i] = 1.0;
            assert!((dot(&dy, &reference(&e, &w, &spec)) - dx.data[i]).abs() < 1e-12);
        }
        for i in (0..w.len()).step_by(5) {
            let mut e = Tensor::zeros(&w.shape);
            e.data[i] = 1.0;
            assert!((dot(&dy, &reference(&x, &e, &spec)) - dw.data[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_underflow_is_an_error() {
        let spec = Conv3dSpec { c_in: 1, c_out: 1, kernel: [3, 7, 7], stride: [1, 2, 2], pad: [0, 0, 0] };
        let x = Tensor::<f32>::zeros(&[1, 2, 8, 8, 1]);
        let w = Tensor::zeros(&spec.weight_shape());
        assert!(matches!(conv3d_forward(&x, &w, &spec), Err(Error::Shape(_))));
    }
}
