use std::sync::Arc;

use super::{gemm, BackwardFn, Tensor};
use crate::error::{Error, Result};

/// Zero padding added around each spatial plane.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn uniform(p: usize) -> Self {
        Padding {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOpts {
    pub stride: usize,
    pub padding: Padding,
}

impl Conv2dOpts {
    pub fn new(stride: usize, padding: Padding) -> Self {
        Conv2dOpts { stride, padding }
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    top: usize,
    left: usize,
}

impl Geometry {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn plane(&self) -> usize {
        self.ho * self.wo
    }

    /// Valid output columns `[lo, hi)` for kernel column `kx` and the
    /// input column of `lo`.
    fn ox_range(&self, kx: usize) -> (usize, usize, usize) {
        let s = self.stride;
        let lo = self.left.saturating_sub(kx).div_ceil(s);
        let last = (self.w - 1 + self.left).checked_sub(kx).map_or(0, |v| v / s + 1);
        let hi = last.min(self.wo);
        let ix0 = (lo * s + kx).saturating_sub(self.left);
        (lo, hi.max(lo), ix0)
    }

    /// Calls `f(row, col, input_index, len)` for every run of in-bounds
    /// im2col entries. Consecutive columns of a run read inputs `stride`
    /// apart. Rows index `(ci, ky, kx)`, columns index `(n, oy, ox)`.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        for ci in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let (lo, hi, ix0) = self.ox_range(kx);
                    if lo == hi {
                        continue;
                    }
                    for n in 0..self.n {
                        let in_base = (n * self.cin + ci) * self.h * self.w;
                        for oy in 0..self.ho {
                            let iy = (oy * self.stride + ky) as isize - self.top as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let col = n * self.plane() + oy * self.wo + lo;
                            f(row, col, in_base + iy as usize * self.w + ix0, hi - lo);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let cols = self.n * self.plane();
        let s = self.stride;
        let mut out = vec![0.0; self.k() * cols];
        self.for_each_run(|row, col, idx, len| {
            let dst = &mut out[row * cols + col..row * cols + col + len];
            if s == 1 {
                dst.copy_from_slice(&x[idx..idx + len]);
            } else {
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = x[idx + j * s];
                }
            }
        });
        out
    }

    fn col2im(&self, dcols: &[f64]) -> Vec<f64> {
        let cols = self.n * self.plane();
        let s = self.stride;
        let mut dx = vec![0.0; self.n * self.cin * self.h * self.w];
        self.for_each_run(|row, col, idx, len| {
            let src = &dcols[row * cols + col..row * cols + col + len];
            for (j, v) in src.iter().enumerate() {
                dx[idx + j * s] += v;
            }
        });
        dx
    }

    /// Visits every (n, co, ci, ky, kx, oy) combination that touches the
    /// input, passing output offset, input offset and run length. Used by
    /// the direct (im2col-free) path.
    fn for_each_direct(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        for n in 0..self.n {
            for co in 0..self.cout {
                let out_base = (n * self.cout + co) * self.plane();
                for ci in 0..self.cin {
                    let in_base = (n * self.cin + ci) * self.h * self.w;
                    for ky in 0..self.kh {
                        for kx in 0..self.kw {
                            let wi = ((co * self.cin + ci) * self.kh + ky) * self.kw + kx;
                            let (lo, hi, ix0) = self.ox_range(kx);
                            if lo == hi {
                                continue;
                            }
                            for oy in 0..self.ho {
                                let iy = (oy * self.stride + ky) as isize - self.top as isize;
                                if iy < 0 || iy >= self.h as isize {
                                    continue;
                                }
                                let o = out_base + oy * self.wo + lo;
                                f(wi, o, in_base + iy as usize * self.w + ix0, hi - lo);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Few channel pairs make im2col mostly copying; convolve directly.
    fn prefers_direct(&self) -> bool {
        self.cin * self.cout <= 64
    }
}

/// Floor convention: trailing input rows a stride cannot reach are ignored.
fn output_extent(extent: usize, before: usize, after: usize, kernel: usize, stride: usize) -> Option<usize> {
    let padded = extent + before + after;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl Tensor {
    /// 2-D cross-correlation. `self` is `[N, Cin, H, W]`, `kernel` is
    /// `[Cout, Cin, kh, kw]`, `bias` is `[Cout]`.
    pub fn conv2d(&self, kernel: &Tensor, bias: Option<&Tensor>, opts: Conv2dOpts) -> Result<Tensor> {
        let (xs, ks) = (self.shape(), kernel.shape());
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs.to_vec(),
                rhs: ks.to_vec(),
            });
        }
        if let Some(b) = bias {
            if b.shape() != [ks[0]] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: ks.to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let p = opts.padding;
        let ho = output_extent(xs[2], p.top, p.bottom, ks[2], opts.stride);
        let wo = output_extent(xs[3], p.left, p.right, ks[3], opts.stride);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(Error::invalid_shape(
                "conv2d",
                xs,
                format!(
                    "no valid output position for kernel {}x{}, stride {}, padding {:?}",
                    ks[2], ks[3], opts.stride, p
                ),
            ));
        };
        let geo = Geometry {
            n: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ks[0],
            kh: ks[2],
            kw: ks[3],
            ho,
            wo,
            stride: opts.stride,
            top: p.top,
            left: p.left,
        };
        let (k, plane, cols_n) = (geo.k(), geo.plane(), geo.n * geo.plane());
        let direct = geo.prefers_direct();
        let stride = geo.stride;
        let mut out = vec![0.0; geo.n * geo.cout * plane];
        let cols = if direct {
            let (x, w) = (self.data(), kernel.data());
            geo.for_each_direct(|wi, o, i, len| {
                let wv = w[wi];
                let dst = &mut out[o..o + len];
                if stride == 1 {
                    for (d, xv) in dst.iter_mut().zip(&x[i..i + len]) {
                        *d += wv * xv;
                    }
                } else {
                    for (j, d) in dst.iter_mut().enumerate() {
                        *d += wv * x[i + j * stride];
                    }
                }
            });
            if let Some(b) = bias {
                for (chunk, co) in out.chunks_mut(plane).zip((0..geo.cout).cycle()) {
                    let bv = b.data()[co];
                    chunk.iter_mut().for_each(|v| *v += bv);
                }
            }
            None
        } else {
            let cols = geo.im2col(self.data());
            let mut tmp = vec![0.0; geo.cout * cols_n];
            gemm(geo.cout, k, cols_n, kernel.data(), false, &cols, false, 0.0, &mut tmp);
            for co in 0..geo.cout {
                let b = bias.map_or(0.0, |b| b.data()[co]);
                for n in 0..geo.n {
                    let src = &tmp[co * cols_n + n * plane..co * cols_n + (n + 1) * plane];
                    let dst = &mut out[(n * geo.cout + co) * plane..(n * geo.cout + co + 1) * plane];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = s + b;
                    }
                }
            }
            Some(cols)
        };

        let need_x = self.requires_grad();
        let need_k = kernel.requires_grad();
        let need_b = bias.is_some_and(Tensor::requires_grad);
        let has_bias = bias.is_some();
        let backward: Option<BackwardFn> = (need_x || need_k || need_b).then(|| {
            let weights = Arc::clone(&kernel.0.data);
            let input = (direct && need_k).then(|| Arc::clone(&self.0.data));
            let cols = if need_k { cols } else { None };
            Box::new(move |g: &[f64]| {
                let db = need_b.then(|| {
                    let mut db = vec![0.0; geo.cout];
                    for (chunk, co) in g.chunks(plane).zip((0..geo.cout).cycle()) {
                        db[co] += chunk.iter().sum::<f64>();
                    }
                    db
                });
                let (dx, dk) = if direct {
                    let dk = input.as_ref().map(|x| {
                        let mut dk = vec![0.0; geo.cout * k];
                        geo.for_each_direct(|wi, o, i, len| {
                            let go = &g[o..o + len];
                            dk[wi] += if stride == 1 {
                                go.iter().zip(&x[i..i + len]).map(|(a, b)| a * b).sum::<f64>()
                            } else {
                                go.iter().enumerate().map(|(j, a)| a * x[i + j * stride]).sum::<f64>()
                            };
                        });
                        dk
                    });
                    let dx = need_x.then(|| {
                        let mut dx = vec![0.0; geo.n * geo.cin * geo.h * geo.w];
                        geo.for_each_direct(|wi, o, i, len| {
                            let wv = weights[wi];
                            let go = &g[o..o + len];
                            if stride == 1 {
                                for (d, gv) in dx[i..i + len].iter_mut().zip(go) {
                                    *d += wv * gv;
                                }
                            } else {
                                for (j, gv) in go.iter().enumerate() {
                                    dx[i + j * stride] += wv * gv;
                                }
                            }
                        });
                        dx
                    });
                    (dx, dk)
                } else {
                    // [N, Cout, P] -> [Cout, N*P]
                    let mut gp = vec![0.0; geo.cout * cols_n];
                    for n in 0..geo.n {
                        for co in 0..geo.cout {
                            let src = &g[(n * geo.cout + co) * plane..(n * geo.cout + co + 1) * plane];
                            gp[co * cols_n + n * plane..co * cols_n + (n + 1) * plane].copy_from_slice(src);
                        }
                    }
                    let dk = cols.as_ref().map(|cols| {
                        let mut dk = vec![0.0; geo.cout * k];
                        gemm(geo.cout, cols_n, k, &gp, false, cols, true, 0.0, &mut dk);
                        dk
                    });
                    let dx = need_x.then(|| {
                        let mut dcols = vec![0.0; k * cols_n];
                        gemm(k, geo.cout, cols_n, &weights, true, &gp, false, 0.0, &mut dcols);
                        geo.col2im(&dcols)
                    });
                    (dx, dk)
                };
                let mut grads = vec![dx, dk];
                if has_bias {
                    grads.push(db);
                }
                grads
            }) as BackwardFn
        });
        let mut parents = vec![self.clone(), kernel.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(
            "conv2d",
            vec![geo.n, geo.cout, ho, wo],
            out,
            parents,
            backward,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct seven-loop cross-correlation.
    fn naive_conv(x: &Tensor, k: &Tensor, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
        let [n, cin, h, w] = x.shape().try_into().unwrap();
        let [cout, _, kh, kw] = k.shape().try_into().unwrap();
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * cout * ho * wo];
        for s in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x.data()[((s * cin + ci) * h + iy as usize) * w + ix as usize]
                                        * k.data()[((co * cin + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((s * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn unit_kernel_is_identity() {
        let x = Tensor::new(&[1, 1, 3, 3], (0..9).map(f64::from).collect()).unwrap();
        let k = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let y = x.conv2d(&k, None, Conv2dOpts::new(1, Padding::default())).unwrap();
        assert_eq!(y.data(), x.data());
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn ones_sum_to_nine() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = x.conv2d(&k, None, Conv2dOpts::new(1, Padding::default())).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn strided_padded_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[2, 3, 8, 8], &mut rng);
        let k = random(&[4, 3, 3, 3], &mut rng);
        let b: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias = Tensor::new(&[4], b.clone()).unwrap();
        let y = x
            .conv2d(&k, Some(&bias), Conv2dOpts::new(2, Padding::uniform(1)))
            .unwrap();
        assert_eq!(y.shape(), &[2, 4, 4, 4]);
        for (a, e) in y.data().iter().zip(naive_conv(&x, &k, &b, 2, 1)) {
            assert!((a - e).abs() < 1e-10);
        }
    }

    /// (cin, cout, size, kernel, stride, pad): the first three take the
    /// direct path, the rest go through im2col.
    const CASES: [(usize, usize, usize, usize, usize, usize); 6] = [
        (1, 4, 7, 9, 1, 4),
        (3, 2, 8, 3, 2, 1),
        (4, 1, 5, 5, 1, 2),
        (3, 30, 8, 3, 2, 1),
        (9, 8, 5, 3, 1, 1),
        (8, 9, 7, 5, 2, 2),
    ];

    #[test]
    fn both_paths_match_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (cin, cout, size, ks, stride, pad) in CASES {
            let x = random(&[2, cin, size, size], &mut rng);
            let k = random(&[cout, cin, ks, ks], &mut rng);
            let b: Vec<f64> = (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let bias = Tensor::new(&[cout], b.clone()).unwrap();
            let y = x.conv2d(&k, Some(&bias), Conv2dOpts::new(stride, Padding::uniform(pad))).unwrap();
            let expected = naive_conv(&x, &k, &b, stride, pad);
            assert_eq!(y.numel(), expected.len());
            for (a, e) in y.data().iter().zip(expected) {
                assert!((a - e).abs() < 1e-10, "case {cin}->{cout} k{ks} s{stride}");
            }
        }
    }

    #[test]
    fn both_paths_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for (cin, cout, size, ks, stride, pad) in CASES {
            let x = random(&[1, cin, size.min(6), size.min(6)], &mut rng);
            let k = random(&[cout, cin, ks.min(3), ks.min(3)], &mut rng);
            let b = random(&[cout], &mut rng);
            let opts = Conv2dOpts::new(stride, Padding::uniform(pad.min(1)));
            let r = crate::gradcheck::grad_check_many(
                |t| Ok(t[0].conv2d(&t[1], Some(&t[2]), opts)?.square().sum()),
                &[x, k, b],
                1e-4,
                1e-3,
            )
            .unwrap();
            assert!(r.passed(), "case {cin}->{cout}: {r:?}");
        }
    }

    #[test]
    fn kernel_larger_than_padded_input_is_an_error() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        let k = Tensor::zeros(&[1, 1, 5, 5]);
        let err = x.conv2d(&k, None, Conv2dOpts::new(1, Padding::default()));
        assert!(matches!(err, Err(Error::InvalidShape { op: "conv2d", .. })));
    }

    #[test]
    fn output_extents_follow_floor_rule() {
        assert_eq!(output_extent(28, 1, 1, 3, 2), Some(14));
        assert_eq!(output_extent(7, 1, 1, 3, 2), Some(4));
        assert_eq!(output_extent(8, 1, 1, 3, 1), Some(8));
        assert_eq!(output_extent(8, 0, 0, 3, 0), None);
    }
}
