//! Fused neural-network operations with hand-written backward passes.

use std::sync::Arc;

use super::{BackwardFn, Tensor};
use crate::error::{Error, Result};

/// (channels, elements per channel per sample)
fn channel_layout(op: &'static str, shape: &[usize], per_channel: &Tensor) -> Result<(usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::invalid_shape(op, shape, "expected [N, C, ...]"));
    }
    let channels = shape[1];
    if per_channel.shape() != [channels] {
        return Err(Error::ShapeMismatch {
            op,
            lhs: shape.to_vec(),
            rhs: per_channel.shape().to_vec(),
        });
    }
    Ok((channels, shape[2..].iter().product()))
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::ShapeMismatch {
            op: "labels",
            lhs: vec![rows, classes],
            rhs: vec![labels.len()],
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(())
}

fn rows_of(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [n, k] => Ok((*n, *k)),
        s => Err(Error::invalid_shape(op, s, "expected [N, K]")),
    }
}

/// Per-row numerically stable softmax.
pub(crate) fn softmax_rows(x: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, dst) in x.chunks(k).zip(out.chunks_mut(k)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            total += *d;
        }
        dst.iter_mut().for_each(|d| *d /= total);
    }
    out
}

impl Tensor {
    /// Batch normalization with batch statistics. Returns the output plus the
    /// per-channel batch mean and biased variance.
    pub fn batch_norm_train(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
        let (channels, inner) = channel_layout("batch_norm", self.shape(), gamma)?;
        channel_layout("batch_norm", self.shape(), beta)?;
        let n = self.shape()[0];
        let m = n * inner;
        if m < 2 {
            return Err(Error::invalid_shape(
                "batch_norm",
                self.shape(),
                "training mode needs at least 2 values per channel",
            ));
        }
        let x = self.data();
        let chan = |i: usize| (i / inner) % channels;

        let mut mean = vec![0.0; channels];
        for (i, v) in x.iter().enumerate() {
            mean[chan(i)] += v;
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        let mut var = vec![0.0; channels];
        for (i, v) in x.iter().enumerate() {
            let d = v - mean[chan(i)];
            var[chan(i)] += d * d;
        }
        var.iter_mut().for_each(|v| *v /= m as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();

        let xhat: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(i, v)| (v - mean[chan(i)]) * inv_std[chan(i)])
            .collect();
        let (g, b) = (gamma.data(), beta.data());
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, xh)| g[chan(i)] * xh + b[chan(i)])
            .collect();

        let (need_x, need_g, need_b) = (self.requires_grad(), gamma.requires_grad(), beta.requires_grad());
        let backward: Option<BackwardFn> = (need_x || need_g || need_b).then(|| {
            let gamma = Arc::clone(&gamma.0.data);
            Box::new(move |up: &[f64]| {
                let chan = |i: usize| (i / inner) % channels;
                let mut sum_g = vec![0.0; channels];
                let mut sum_gx = vec![0.0; channels];
                for (i, gi) in up.iter().enumerate() {
                    sum_g[chan(i)] += gi;
                    sum_gx[chan(i)] += gi * xhat[i];
                }
                let dx = need_x.then(|| {
                    let mf = m as f64;
                    up.iter()
                        .enumerate()
                        .map(|(i, gi)| {
                            let c = chan(i);
                            // dxhat = g * gamma, sums scale by gamma as well
                            gamma[c] * inv_std[c] / mf * (mf * gi - sum_g[c] - xhat[i] * sum_gx[c])
                        })
                        .collect()
                });
                vec![dx, need_g.then_some(sum_gx), need_b.then_some(sum_g)]
            }) as BackwardFn
        });
        let t = Tensor::from_op(
            "batch_norm",
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            backward,
        );
        Ok((t, mean, var))
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Tensor> {
        let (channels, inner) = channel_layout("batch_norm", self.shape(), gamma)?;
        channel_layout("batch_norm", self.shape(), beta)?;
        if running_mean.len() != channels || running_var.len() != channels {
            return Err(Error::invalid_shape(
                "batch_norm",
                self.shape(),
                "running statistics length differs from channel count",
            ));
        }
        let chan = move |i: usize| (i / inner) % channels;
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xhat: Vec<f64> = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - running_mean[chan(i)]) * inv_std[chan(i)])
            .collect();
        let (g, b) = (gamma.data(), beta.data());
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, xh)| g[chan(i)] * xh + b[chan(i)])
            .collect();
        let (need_x, need_g, need_b) = (self.requires_grad(), gamma.requires_grad(), beta.requires_grad());
        let backward: Option<BackwardFn> = (need_x || need_g || need_b).then(|| {
            let gamma = Arc::clone(&gamma.0.data);
            Box::new(move |up: &[f64]| {
                let mut sum_g = vec![0.0; channels];
                let mut sum_gx = vec![0.0; channels];
                for (i, gi) in up.iter().enumerate() {
                    sum_g[chan(i)] += gi;
                    sum_gx[chan(i)] += gi * xhat[i];
                }
                let dx = need_x.then(|| {
                    up.iter()
                        .enumerate()
                        .map(|(i, gi)| gi * gamma[chan(i)] * inv_std[chan(i)])
                        .collect()
                });
                vec![dx, need_g.then_some(sum_gx), need_b.then_some(sum_g)]
            }) as BackwardFn
        });
        Ok(Tensor::from_op(
            "batch_norm",
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            backward,
        ))
    }

    /// `x` where positive, `slope[c] * x` otherwise. `slope` holds one value
    /// per channel or a single shared value.
    pub fn prelu(&self, slope: &Tensor) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(Error::invalid_shape("prelu", shape, "expected [N, C, ...]"));
        }
        let shared = slope.numel() == 1;
        let (channels, inner) = if shared {
            (1, shape[1..].iter().product())
        } else {
            channel_layout("prelu", shape, slope)?
        };
        let chan = move |i: usize| (i / inner) % channels;
        let x = Arc::clone(&self.0.data);
        let a = slope.data();
        let out = x
            .iter()
            .enumerate()
            .map(|(i, &v)| if v > 0.0 { v } else { a[chan(i)] * v })
            .collect();
        let (need_x, need_a) = (self.requires_grad(), slope.requires_grad());
        let backward: Option<BackwardFn> = (need_x || need_a).then(|| {
            let a = Arc::clone(&slope.0.data);
            Box::new(move |g: &[f64]| {
                let dx = need_x.then(|| {
                    g.iter()
                        .zip(x.iter())
                        .enumerate()
                        .map(|(i, (gi, &v))| if v > 0.0 { *gi } else { gi * a[chan(i)] })
                        .collect()
                });
                let da = need_a.then(|| {
                    let mut da = vec![0.0; channels];
                    for (i, (gi, &v)) in g.iter().zip(x.iter()).enumerate() {
                        if v <= 0.0 {
                            da[chan(i)] += gi * v;
                        }
                    }
                    da
                });
                vec![dx, da]
            }) as BackwardFn
        });
        Ok(Tensor::from_op(
            "prelu",
            shape.to_vec(),
            out,
            vec![self.clone(), slope.clone()],
            backward,
        ))
    }

    /// `[N, C*r*r, H, W] -> [N, C, r*H, r*W]` with
    /// `out[n, c, r*y + dy, r*x + dx] = in[n, c*r*r + dy*r + dx, y, x]`.
    pub fn pixel_shuffle(&self, r: usize) -> Result<Tensor> {
        let [n, cin, h, w] = *self.shape() else {
            return Err(Error::invalid_shape("pixel_shuffle", self.shape(), "expected [N, C, H, W]"));
        };
        if r == 0 || cin % (r * r) != 0 {
            return Err(Error::invalid_shape(
                "pixel_shuffle",
                self.shape(),
                format!("channels not divisible by r^2 = {}", r * r),
            ));
        }
        let c = cin / (r * r);
        let (oh, ow) = (h * r, w * r);
        let mut src = Vec::with_capacity(self.numel());
        for s in 0..n {
            for ch in 0..c {
                for oy in 0..oh {
                    let (y, dy) = (oy / r, oy % r);
                    for ox in 0..ow {
                        let (x, dx) = (ox / r, ox % r);
                        let ic = ch * r * r + dy * r + dx;
                        src.push(((s * cin + ic) * h + y) * w + x);
                    }
                }
            }
        }
        let data = self.data();
        let out = src.iter().map(|&i| data[i]).collect();
        let backward: Option<BackwardFn> = self.requires_grad().then(|| {
            Box::new(move |g: &[f64]| {
                let mut dx = vec![0.0; g.len()];
                for (gi, &i) in g.iter().zip(&src) {
                    dx[i] = *gi;
                }
                vec![Some(dx)]
            }) as BackwardFn
        });
        Ok(Tensor::from_op(
            "pixel_shuffle",
            vec![n, c, oh, ow],
            out,
            vec![self.clone()],
            backward,
        ))
    }

    /// Row-wise softmax of `[N, K]` logits.
    pub fn softmax(&self) -> Result<Tensor> {
        let (_, k) = rows_of("softmax", self)?;
        let y = softmax_rows(self.data(), k);
        let backward: Option<BackwardFn> = self.requires_grad().then(|| {
            let y = y.clone();
            Box::new(move |g: &[f64]| {
                let mut dx = vec![0.0; g.len()];
                for ((gr, yr), dr) in g.chunks(k).zip(y.chunks(k)).zip(dx.chunks_mut(k)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = yi * (gi - dot);
                    }
                }
                vec![Some(dx)]
            }) as BackwardFn
        });
        Ok(Tensor::from_op("softmax", self.shape().to_vec(), y, vec![self.clone()], backward))
    }

    /// Summed cross-entropy of `[N, K]` logits against class indices via the
    /// log-sum-exp form. Also returns the row probabilities.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<(Tensor, Vec<f64>)> {
        let (n, k) = rows_of("softmax_cross_entropy", self)?;
        check_labels(labels, n, k)?;
        let x = self.data();
        let mut loss = 0.0;
        for (row, &l) in x.chunks(k).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[l];
        }
        let probs = softmax_rows(x, k);
        let backward: Option<BackwardFn> = self.requires_grad().then(|| {
            let probs = probs.clone();
            let labels = labels.to_vec();
            Box::new(move |g: &[f64]| {
                let mut dx: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                for (row, &l) in labels.iter().enumerate() {
                    dx[row * k + l] -= g[0];
                }
                vec![Some(dx)]
            }) as BackwardFn
        });
        let t = Tensor::from_op(
            "softmax_cross_entropy",
            Vec::new(),
            vec![loss],
            vec![self.clone()],
            backward,
        );
        Ok((t, probs))
    }

    /// `out[n] = self[n, labels[n]]` for `[N, K]` input.
    pub fn gather_rows(&self, labels: &[usize]) -> Result<Tensor> {
        let (n, k) = rows_of("gather_rows", self)?;
        check_labels(labels, n, k)?;
        let out = labels
            .iter()
            .enumerate()
            .map(|(row, &l)| self.data()[row * k + l])
            .collect();
        let backward: Option<BackwardFn> = self.requires_grad().then(|| {
            let labels = labels.to_vec();
            Box::new(move |g: &[f64]| {
                let mut dx = vec![0.0; n * k];
                for (row, &l) in labels.iter().enumerate() {
                    dx[row * k + l] = g[row];
                }
                vec![Some(dx)]
            }) as BackwardFn
        });
        Ok(Tensor::from_op("gather_rows", vec![n], out, vec![self.clone()], backward))
    }
}
