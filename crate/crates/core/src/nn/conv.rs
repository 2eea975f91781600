//! 2-D convolution via im2col + GEMM.

use super::Scalar;
use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array4, ArrayView4};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Unfold `x` (N,C,H,W) into a (C*k*k, N*Ho*Wo) matrix with zero padding.
/// Row index is `(c*k + ki)*k + kj`; column index is `(n*Ho + ho)*Wo + wo`.
pub fn im2col<S: Scalar>(x: &ArrayView4<S>, k: usize, stride: usize, pad: usize) -> Array2<S> {
    let (n, c, h, w) = x.dim();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut cols = Array2::<S>::zeros((c * k * k, n * ho * wo));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let r = (ci * k + ki) * k + kj;
                let mut row = cols.row_mut(r);
                let row = row.as_slice_mut().unwrap();
                for ni in 0..n {
                    for oi in 0..ho {
                        let hi = (oi * stride + ki) as isize - pad as isize;
                        if hi < 0 || hi >= h as isize {
                            continue;
                        }
                        let xrow = x.slice(s![ni, ci, hi as usize, ..]);
                        let xrow = xrow.to_slice().unwrap();
                        let base = (ni * ho + oi) * wo;
                        if stride == 1 {
                            // contiguous span of valid output columns
                            let lo = pad.saturating_sub(kj);
                            let hi_excl = (w + pad - kj).min(wo);
                            if lo < hi_excl {
                                let src = lo + kj - pad;
                                row[base + lo..base + hi_excl]
                                    .copy_from_slice(&xrow[src..src + (hi_excl - lo)]);
                            }
                        } else {
                            for oj in 0..wo {
                                let wi = (oj * stride + kj) as isize - pad as isize;
                                if wi >= 0 && wi < w as isize {
                                    row[base + oj] = xrow[wi as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold a column-gradient matrix back onto the input, accumulating overlaps.
pub fn col2im<S: Scalar>(
    gcols: &Array2<S>,
    shape: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<S> {
    let (n, c, h, w) = shape;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut gx = Array4::<S>::zeros(shape);
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let r = (ci * k + ki) * k + kj;
                let row = gcols.row(r);
                let row = row.to_slice().unwrap();
                for ni in 0..n {
                    for oi in 0..ho {
                        let hi = (oi * stride + ki) as isize - pad as isize;
                        if hi < 0 || hi >= h as isize {
                            continue;
                        }
                        let mut xrow = gx.slice_mut(s![ni, ci, hi as usize, ..]);
                        let xrow = xrow.as_slice_mut().unwrap();
                        let base = (ni * ho + oi) * wo;
                        for oj in 0..wo {
                            let wi = (oj * stride + kj) as isize - pad as isize;
                            if wi >= 0 && wi < w as isize {
                                xrow[wi as usize] = xrow[wi as usize] + row[base + oj];
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// 3x3 (or kxk) convolution layer with bias.
#[derive(Debug, Clone)]
pub struct Conv2d<S: Scalar> {
    pub w: Array4<S>, // (Cout, Cin, k, k)
    pub b: Array1<S>,
    pub stride: usize,
    pub pad: usize,
}

impl<S: Scalar> Conv2d<S> {
    pub fn new<R: Rng>(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let dist = Normal::new(0.0, std).unwrap();
        let w = Array4::from_shape_fn((cout, cin, k, k), |_| S::from_f64(dist.sample(rng)));
        Conv2d {
            w,
            b: Array1::zeros(cout),
            stride,
            pad,
        }
    }

    fn dims(&self) -> (usize, usize, usize) {
        let (cout, cin, k, _) = self.w.dim();
        (cout, cin, k)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (_, _, k) = self.dims();
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    fn gemm_forward(&self, cols: &Array2<S>, n: usize, ho: usize, wo: usize) -> Array4<S> {
        let (cout, cin, k) = self.dims();
        let w2 = self.w.view().into_shape((cout, cin * k * k)).unwrap();
        let y2 = w2.dot(cols); // (cout, n*ho*wo)
        let mut y = Array4::<S>::zeros((n, cout, ho, wo));
        for ni in 0..n {
            for co in 0..cout {
                let src = y2.slice(s![co, ni * ho * wo..(ni + 1) * ho * wo]);
                let src = src.to_slice().unwrap();
                let bias = self.b[co];
                let mut dst = y.slice_mut(s![ni, co, .., ..]);
                let dst = dst.as_slice_mut().unwrap();
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = v + bias;
                }
            }
        }
        y
    }

    pub fn forward(&self, x: &ArrayView4<S>) -> Array4<S> {
        let (n, _, h, w) = x.dim();
        let (_, _, k) = self.dims();
        let (ho, wo) = self.out_hw(h, w);
        let cols = im2col(x, k, self.stride, self.pad);
        self.gemm_forward(&cols, n, ho, wo)
    }

    /// Forward pass that keeps the unfolded input for parameter gradients.
    pub fn forward_train(&self, x: &ArrayView4<S>) -> (Array4<S>, Array2<S>) {
        let (n, _, h, w) = x.dim();
        let (_, _, k) = self.dims();
        let (ho, wo) = self.out_hw(h, w);
        let cols = im2col(x, k, self.stride, self.pad);
        let y = self.gemm_forward(&cols, n, ho, wo);
        (y, cols)
    }

    fn gout_matrix(gout: &ArrayView4<S>) -> Array2<S> {
        let (n, cout, ho, wo) = gout.dim();
        let mut g2 = Array2::<S>::zeros((cout, n * ho * wo));
        for ni in 0..n {
            for co in 0..cout {
                let src = gout.slice(s![ni, co, .., ..]);
                let src = src.to_slice().unwrap();
                let mut dst = g2.slice_mut(s![co, ni * ho * wo..(ni + 1) * ho * wo]);
                dst.as_slice_mut().unwrap().copy_from_slice(src);
            }
        }
        g2
    }

    /// Gradient with respect to the input only (used on frozen models).
    pub fn backward_data(
        &self,
        gout: &ArrayView4<S>,
        in_shape: (usize, usize, usize, usize),
    ) -> Array4<S> {
        let (cout, cin, k) = self.dims();
        let g2 = Self::gout_matrix(gout);
        let w2 = self.w.view().into_shape((cout, cin * k * k)).unwrap();
        let gcols = w2.t().dot(&g2);
        col2im(&gcols, in_shape, k, self.stride, self.pad)
    }

    /// Accumulate parameter gradients and return the input gradient.
    pub fn backward(
        &self,
        cols: &Array2<S>,
        gout: &ArrayView4<S>,
        in_shape: (usize, usize, usize, usize),
        gw: &mut Array4<S>,
        gb: &mut Array1<S>,
    ) -> Array4<S> {
        let (cout, cin, k) = self.dims();
        let g2 = Self::gout_matrix(gout);
        {
            let mut gw2 = gw.view_mut().into_shape((cout, cin * k * k)).unwrap();
            general_mat_mul(S::one(), &g2, &cols.t(), S::one(), &mut gw2);
        }
        for co in 0..cout {
            gb[co] = gb[co] + g2.row(co).iter().copied().sum::<S>();
        }
        let w2 = self.w.view().into_shape((cout, cin * k * k)).unwrap();
        let gcols = w2.t().dot(&g2);
        col2im(&gcols, in_shape, k, self.stride, self.pad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution as an oracle.
    fn conv_naive(x: &Array4<f64>, w: &Array4<f64>, b: &[f64], pad: usize) -> Array4<f64> {
        let (n, cin, h, wd) = x.dim();
        let (cout, _, k, _) = w.dim();
        let ho = h + 2 * pad - k + 1;
        let wo = wd + 2 * pad - k + 1;
        let mut y = Array4::<f64>::zeros((n, cout, ho, wo));
        for ni in 0..n {
            for co in 0..cout {
                for oi in 0..ho {
                    for oj in 0..wo {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let hi = oi as isize + ki as isize - pad as isize;
                                    let wi = oj as isize + kj as isize - pad as isize;
                                    if hi >= 0 && hi < h as isize && wi >= 0 && wi < wd as isize {
                                        acc += x[[ni, ci, hi as usize, wi as usize]]
                                            * w[[co, ci, ki, kj]];
                                    }
                                }
                            }
                        }
                        y[[ni, co, oi, oj]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn forward_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::<f64>::new(3, 5, 3, 1, 1, &mut rng);
        let x = Array4::from_shape_fn((2, 3, 7, 6), |(a, b, c, d)| {
            ((a * 131 + b * 31 + c * 7 + d) as f64).sin()
        });
        let y = conv.forward(&x.view());
        let y_ref = conv_naive(&x, &conv.w, conv.b.as_slice().unwrap(), 1);
        let max = (&y - &y_ref).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max < 1e-12, "max diff {max}");
    }

    #[test]
    fn backward_data_is_adjoint_of_forward() {
        // <conv(x), g> == <x, conv_backward_data(g)> for zero bias.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv2d::<f64>::new(2, 4, 3, 1, 1, &mut rng);
        conv.b.fill(0.0);
        let x = Array4::from_shape_fn((1, 2, 6, 6), |(_, b, c, d)| {
            ((b * 17 + c * 5 + d) as f64).cos()
        });
        let g = Array4::from_shape_fn((1, 4, 6, 6), |(_, b, c, d)| {
            ((b * 13 + c * 3 + d * 2) as f64).sin()
        });
        let y = conv.forward(&x.view());
        let gx = conv.backward_data(&g.view(), x.dim());
        let lhs: f64 = (&y * &g).sum();
        let rhs: f64 = (&x * &gx).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut conv = Conv2d::<f64>::new(2, 3, 3, 1, 1, &mut rng);
        let x = Array4::from_shape_fn((1, 2, 5, 5), |(_, b, c, d)| {
            ((b * 11 + c * 3 + d) as f64).sin() * 0.5
        });
        // loss = sum(y^2)/2, so dL/dy = y
        let (y, cols) = conv.forward_train(&x.view());
        let mut gw = Array4::zeros(conv.w.dim());
        let mut gb = Array1::zeros(conv.b.len());
        conv.backward(&cols, &y.view(), x.dim(), &mut gw, &mut gb);
        let h = 1e-6;
        for &idx in &[(0usize, 0usize, 0usize, 0usize), (2, 1, 2, 2), (1, 0, 1, 2)] {
            let orig = conv.w[idx];
            conv.w[idx] = orig + h;
            let lp: f64 = conv.forward(&x.view()).mapv(|v| v * v / 2.0).sum();
            conv.w[idx] = orig - h;
            let lm: f64 = conv.forward(&x.view()).mapv(|v| v * v / 2.0).sum();
            conv.w[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (fd - gw[idx]).abs() < 1e-6 * (1.0 + fd.abs()),
                "fd {fd} grad {}",
                gw[idx]
            );
        }
    }
}
