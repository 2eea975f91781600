//! Fully connected layer.

use super::Scalar;
use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone)]
pub struct Linear<S: Scalar> {
    pub w: Array2<S>, // (out, in)
    pub b: Array1<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new<R: Rng>(din: usize, dout: usize, rng: &mut R) -> Self {
        let std = (1.0 / din as f64).sqrt();
        let dist = Normal::new(0.0, std).unwrap();
        Linear {
            w: Array2::from_shape_fn((dout, din), |_| S::from_f64(dist.sample(rng))),
            b: Array1::zeros(dout),
        }
    }

    /// x: (N, in) -> (N, out)
    pub fn forward(&self, x: &ArrayView2<S>) -> Array2<S> {
        let mut y = x.dot(&self.w.t());
        for mut row in y.rows_mut() {
            row += &self.b;
        }
        y
    }

    pub fn backward_data(&self, gout: &ArrayView2<S>) -> Array2<S> {
        gout.dot(&self.w)
    }

    pub fn backward(
        &self,
        x: &ArrayView2<S>,
        gout: &ArrayView2<S>,
        gw: &mut Array2<S>,
        gb: &mut Array1<S>,
    ) -> Array2<S> {
        general_mat_mul(S::one(), &gout.t(), x, S::one(), gw);
        for g in gout.rows() {
            *gb += &g;
        }
        gout.dot(&self.w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forward_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lin = Linear::<f64>::new(3, 2, &mut rng);
        let x = array![[0.3, -0.2, 0.9], [1.0, 0.5, -0.4]];
        let y = lin.forward(&x.view());
        // loss = sum(y), dL/dy = 1
        let gout = Array2::<f64>::ones(y.dim());
        let mut gw = Array2::zeros(lin.w.dim());
        let mut gb = Array1::zeros(lin.b.len());
        let gx = lin.backward(&x.view(), &gout.view(), &mut gw, &mut gb);
        // dL/dx[n][j] = sum over outputs o of w[o][j]
        for i in 0..2 {
            for j in 0..3 {
                let expect = lin.w[[0, j]] + lin.w[[1, j]];
                assert!((gx[[i, j]] - expect).abs() < 1e-12);
            }
        }
        // dL/dw[o][j] = sum_n x[n][j]
        for o in 0..2 {
            for j in 0..3 {
                let expect = x[[0, j]] + x[[1, j]];
                assert!((gw[[o, j]] - expect).abs() < 1e-12);
            }
        }
        assert!((gb[0] - 2.0).abs() < 1e-12);
    }
}
