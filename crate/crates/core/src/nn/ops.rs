//! Stateless tensor ops: activations, pooling, resampling, channel plumbing.

use super::Scalar;
use ndarray::{s, Array2, Array4, ArrayView2, ArrayView4, Axis};

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// x * sigmoid(x)
pub fn silu<S: Scalar>(x: &ArrayView4<S>) -> Array4<S> {
    x.mapv(|v| v * sigmoid(v))
}

pub fn silu2<S: Scalar>(x: &ArrayView2<S>) -> Array2<S> {
    x.mapv(|v| v * sigmoid(v))
}

pub fn silu2_backward<S: Scalar>(x_pre: &ArrayView2<S>, gout: &ArrayView2<S>) -> Array2<S> {
    let mut gx = gout.to_owned();
    gx.zip_mut_with(x_pre, |g, &x| {
        let sg = sigmoid(x);
        *g = *g * (sg * (S::one() + x * (S::one() - sg)));
    });
    gx
}

/// Gradient of silu given the pre-activation input.
pub fn silu_backward<S: Scalar>(x_pre: &ArrayView4<S>, gout: &ArrayView4<S>) -> Array4<S> {
    let mut gx = gout.to_owned();
    gx.zip_mut_with(x_pre, |g, &x| {
        let sg = sigmoid(x);
        *g = *g * (sg * (S::one() + x * (S::one() - sg)));
    });
    gx
}

/// 2x2 average pooling, stride 2. Requires even spatial dims.
pub fn avg_pool2<S: Scalar>(x: &ArrayView4<S>) -> Array4<S> {
    let (n, c, h, w) = x.dim();
    let quarter = S::from_f64(0.25);
    let mut y = Array4::<S>::zeros((n, c, h / 2, w / 2));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h / 2 {
                for j in 0..w / 2 {
                    let v = x[[ni, ci, 2 * i, 2 * j]]
                        + x[[ni, ci, 2 * i, 2 * j + 1]]
                        + x[[ni, ci, 2 * i + 1, 2 * j]]
                        + x[[ni, ci, 2 * i + 1, 2 * j + 1]];
                    y[[ni, ci, i, j]] = v * quarter;
                }
            }
        }
    }
    y
}

pub fn avg_pool2_backward<S: Scalar>(gout: &ArrayView4<S>) -> Array4<S> {
    let (n, c, h, w) = gout.dim();
    let quarter = S::from_f64(0.25);
    let mut gx = Array4::<S>::zeros((n, c, h * 2, w * 2));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let g = gout[[ni, ci, i, j]] * quarter;
                    gx[[ni, ci, 2 * i, 2 * j]] = g;
                    gx[[ni, ci, 2 * i, 2 * j + 1]] = g;
                    gx[[ni, ci, 2 * i + 1, 2 * j]] = g;
                    gx[[ni, ci, 2 * i + 1, 2 * j + 1]] = g;
                }
            }
        }
    }
    gx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<S: Scalar>(x: &ArrayView4<S>) -> Array4<S> {
    let (n, c, h, w) = x.dim();
    let mut y = Array4::<S>::zeros((n, c, h * 2, w * 2));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = x[[ni, ci, i, j]];
                    y[[ni, ci, 2 * i, 2 * j]] = v;
                    y[[ni, ci, 2 * i, 2 * j + 1]] = v;
                    y[[ni, ci, 2 * i + 1, 2 * j]] = v;
                    y[[ni, ci, 2 * i + 1, 2 * j + 1]] = v;
                }
            }
        }
    }
    y
}

pub fn upsample2_backward<S: Scalar>(gout: &ArrayView4<S>) -> Array4<S> {
    let (n, c, h, w) = gout.dim();
    let mut gx = Array4::<S>::zeros((n, c, h / 2, w / 2));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h / 2 {
                for j in 0..w / 2 {
                    gx[[ni, ci, i, j]] = gout[[ni, ci, 2 * i, 2 * j]]
                        + gout[[ni, ci, 2 * i, 2 * j + 1]]
                        + gout[[ni, ci, 2 * i + 1, 2 * j]]
                        + gout[[ni, ci, 2 * i + 1, 2 * j + 1]];
                }
            }
        }
    }
    gx
}

/// (N,C,H,W) -> (N,C) spatial mean.
pub fn global_avg_pool<S: Scalar>(x: &ArrayView4<S>) -> Array2<S> {
    let (n, c, h, w) = x.dim();
    let inv = S::from_f64(1.0 / (h * w) as f64);
    let mut y = Array2::<S>::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            y[[ni, ci]] = x.slice(s![ni, ci, .., ..]).iter().copied().sum::<S>() * inv;
        }
    }
    y
}

pub fn global_avg_pool_backward<S: Scalar>(
    gout: &ArrayView2<S>,
    hw: (usize, usize),
) -> Array4<S> {
    let (n, c) = gout.dim();
    let (h, w) = hw;
    let inv = S::from_f64(1.0 / (h * w) as f64);
    let mut gx = Array4::<S>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            gx.slice_mut(s![ni, ci, .., ..]).fill(gout[[ni, ci]] * inv);
        }
    }
    gx
}

pub fn concat_channels<S: Scalar>(a: &ArrayView4<S>, b: &ArrayView4<S>) -> Array4<S> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("channel concat shape mismatch")
}

/// Inverse of `concat_channels` for gradients.
pub fn split_channels<S: Scalar>(g: &ArrayView4<S>, c_first: usize) -> (Array4<S>, Array4<S>) {
    let ga = g.slice(s![.., ..c_first, .., ..]).to_owned();
    let gb = g.slice(s![.., c_first.., .., ..]).to_owned();
    (ga, gb)
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows<S: Scalar>(z: &ArrayView2<S>) -> Array2<S> {
    let mut p = z.to_owned();
    for mut row in p.rows_mut() {
        let m = row.iter().copied().fold(S::neg_infinity(), |a, b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.iter().copied().sum::<S>();
        row.mapv_inplace(|v| v / s);
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn pool_and_upsample_are_adjoint() {
        let x = Array4::from_shape_fn((1, 2, 4, 4), |(_, c, i, j)| {
            ((c * 16 + i * 4 + j) as f64).sin()
        });
        let g = Array4::from_shape_fn((1, 2, 2, 2), |(_, c, i, j)| {
            ((c * 4 + i * 2 + j) as f64).cos()
        });
        let lhs: f64 = (&avg_pool2(&x.view()) * &g).sum();
        let rhs: f64 = (&x * &avg_pool2_backward(&g.view())).sum();
        assert!((lhs - rhs).abs() < 1e-12);

        let lhs: f64 = (&upsample2(&g.view()) * &x).sum();
        let rhs: f64 = (&g * &upsample2_backward(&x.view())).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn silu_gradient_matches_finite_differences() {
        let x = Array4::from_shape_fn((1, 1, 2, 3), |(_, _, i, j)| (i as f64) - 0.7 * (j as f64));
        let g = Array4::<f64>::ones((1, 1, 2, 3));
        let gx = silu_backward(&x.view(), &g.view());
        let h = 1e-6;
        for idx in [(0, 0, 0, 0), (0, 0, 1, 2)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (silu(&xp.view()).sum() - silu(&xm.view()).sum()) / (2.0 * h);
            assert!((fd - gx[idx]).abs() < 1e-8);
        }
    }
}
