use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| if v > T::ZERO { v } else { T::ZERO }).collect(),
    }
}

/// Gradient through ReLU given the forward *output* `y`.
pub fn relu_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    Tensor {
        shape: dy.shape.clone(),
        data: y
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&o, &g)| if o > T::ZERO { g } else { T::ZERO })
            .collect(),
    }
}

/// Mean over `t, h, w`: `[b, t, h, w, c] -> [b, c]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, t, h, w, c] = x.dims5()?;
    let positions = t * h * w;
    let scale = T::ONE / T::from_f64(positions as f64);
    let mut out = vec![T::ZERO; b * c];
    for (n, clip) in x.data.chunks_exact(positions * c).enumerate() {
        let o = &mut out[n * c..(n + 1) * c];
        for row in clip.chunks_exact(c) {
            for (acc, &v) in o.iter_mut().zip(row) {
                *acc += v;
            }
        }
        o.iter_mut().for_each(|v| *v *= scale);
    }
    Tensor::from_vec(&[b, c], out)
}

pub fn global_avg_pool_backward<T: Scalar>(dy: &Tensor<T>, input_shape: &[usize]) -> Result<Tensor<T>> {
    let [b, c] = dy.dims2()?;
    let positions: usize = input_shape[1..4].iter().product();
    if input_shape[0] != b || input_shape[4] != c {
        return Err(Error::Shape(format!(
            "pool gradient {:?} does not match input {input_shape:?}",
            dy.shape
        )));
    }
    let scale = T::ONE / T::from_f64(positions as f64);
    let mut dx = Vec::with_capacity(b * positions * c);
    for n in 0..b {
        let g: Vec<T> = dy.data[n * c..(n + 1) * c].iter().map(|&v| v * scale).collect();
        for _ in 0..positions {
            dx.extend_from_slice(&g);
        }
    }
    Tensor::from_vec(input_shape, dx)
}

/// `y = x W + bias` with `x: [b, in]`, `W: [in, out]`.
pub fn linear_forward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &[T]) -> Result<Tensor<T>> {
    let [b, cin] = x.dims2()?;
    let [win, cout] = weight.dims2()?;
    if win != cin || bias.len() != cout {
        return Err(Error::Shape(format!(
            "linear layer {:?} + bias {} cannot take input {:?}",
            weight.shape,
            bias.len(),
            x.shape
        )));
    }
    let mut y = Vec::with_capacity(b * cout);
    for row in x.data.chunks_exact(cin) {
        let mut acc = bias.to_vec();
        for (i, &xv) in row.iter().enumerate() {
            for (a, &wv) in acc.iter_mut().zip(&weight.data[i * cout..(i + 1) * cout]) {
                *a += xv * wv;
            }
        }
        y.extend(acc);
    }
    Tensor::from_vec(&[b, cout], y)
}

/// Returns `(dx, dW, dbias)`.
pub fn linear_backward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, dy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    let [b, cin] = x.dims2()?;
    let [_, cout] = weight.dims2()?;
    if dy.shape != [b, cout] {
        return Err(Error::Shape(format!("linear gradient {:?} vs output [{b}, {cout}]", dy.shape)));
    }
    let mut dx = vec![T::ZERO; b * cin];
    let mut dw = vec![T::ZERO; cin * cout];
    let mut db = vec![T::ZERO; cout];
    for n in 0..b {
        let g = &dy.data[n * cout..(n + 1) * cout];
        let xr = &x.data[n * cin..(n + 1) * cin];
        for (d, &v) in db.iter_mut().zip(g) {
            *d += v;
        }
        for i in 0..cin {
            let wr = &weight.data[i * cout..(i + 1) * cout];
            dx[n * cin + i] = wr.iter().zip(g).map(|(&w, &gv)| w * gv).sum();
            for (d, &gv) in dw[i * cout..(i + 1) * cout].iter_mut().zip(g) {
                *d += xr[i] * gv;
            }
        }
    }
    Ok((
        Tensor::from_vec(&[b, cin], dx)?,
        Tensor::from_vec(&[cin, cout], dw)?,
        db,
    ))
}

/// Row-wise softmax of `[b, classes]` logits.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, k] = logits.dims2()?;
    let mut out = logits.clone();
    for row in out.data.chunks_exact_mut(k) {
        let m = row.iter().fold(row[0], |a, &b| a.max(b));
        let mut z = T::ZERO;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v = *v / z);
    }
    Ok(out)
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let [b, k] = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Shape(format!("label {bad} out of range for {k} classes")));
    }
    let inv_b = T::ONE / T::from_f64(b as f64);
    let mut grad = logits.clone();
    let mut loss = T::ZERO;
    for (row, &label) in grad.data.chunks_exact_mut(k).zip(labels) {
        let m = row.iter().fold(row[0], |a, &b| a.max(b));
        let picked = row[label];
        let mut z = T::ZERO;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        // -log softmax = log z + m - logit
        loss += z.ln() + m - picked;
        row.iter_mut().for_each(|v| *v = *v / z);
        row[label] -= T::ONE;
        row.iter_mut().for_each(|v| *v *= inv_b);
    }
    Ok((loss * inv_b, grad))
}
