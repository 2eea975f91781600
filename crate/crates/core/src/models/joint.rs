//! Joint classifier: forward-noise the input, denoise it back, classify.
//!
//! Gradients traverse the whole map. During steering the forward noise is
//! frozen and the reverse chain runs its deterministic variant, so the map
//! is an ordinary differentiable function of the input; with `t_star = 0`
//! it degenerates to the bare classifier.

use crate::error::{Error, Result};
use crate::models::classifier::{Classifier, ClassifierNet};
use crate::models::denoiser::{Denoiser, DenoiserDataCache, DenoiserNet};
use crate::models::schedule::{ddpm_forward, reverse_from_eps, DiffusionSchedule};
use crate::nn::{softmax_rows, Scalar};
use crate::rng::derive_rng;
use crate::tensor::{self, ImageTensor};
use ndarray::{Array2, Array4, ArrayView4};
use serde::{Deserialize, Serialize};

/// How the denoised image is produced inside the joint classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiseMode {
    /// Deterministic reverse updates from t* down to 0.
    FullChain,
    /// One-call algebraic estimate of x0 from x_{t*}.
    SingleShot,
}

impl Default for DenoiseMode {
    fn default() -> Self {
        DenoiseMode::FullChain
    }
}

/// Per-sample evaluation of the joint map under a target-class loss.
pub struct JointEval<S: Scalar> {
    /// -log p(target) per sample.
    pub losses: Vec<f64>,
    /// Softmax probabilities (N, K).
    pub probs: Array2<S>,
    /// Per-sample gradient of its own loss w.r.t. the [0,1] input.
    pub grad: Array4<S>,
}

/// Generic core over raw networks; instantiated at f64 for gradient checks.
pub struct JointCore<'a, S: Scalar> {
    pub classifier: &'a ClassifierNet<S>,
    pub denoiser: &'a DenoiserNet<S>,
    pub schedule: &'a DiffusionSchedule<S>,
    pub t_star: usize,
    pub mode: DenoiseMode,
}

impl<'a, S: Scalar> JointCore<'a, S> {
    fn check(&self, xs01: &ArrayView4<S>, eps: &ArrayView4<S>) -> Result<()> {
        if self.t_star > self.schedule.t_steps() {
            return Err(Error::input(format!(
                "t_star {} exceeds schedule length {}",
                self.t_star,
                self.schedule.t_steps()
            )));
        }
        if self.t_star > 0 && xs01.dim() != eps.dim() {
            return Err(Error::input("frozen noise shape mismatch"));
        }
        Ok(())
    }

    /// Denoised model-range reconstruction plus the caches for backward.
    #[allow(clippy::type_complexity)]
    fn denoise_forward(
        &self,
        xm: &Array4<S>,
        eps: &ArrayView4<S>,
    ) -> Result<(Array4<S>, Vec<(usize, DenoiserDataCache<S>)>)> {
        let n = xm.dim().0;
        let ts_star = vec![self.t_star; n];
        let mut x = ddpm_forward(&xm.view(), &ts_star, eps, self.schedule)?;
        let mut caches = Vec::new();
        match self.mode {
            DenoiseMode::FullChain => {
                for t in (1..=self.t_star).rev() {
                    let ts = vec![t; n];
                    let (eps_hat, cache) = self.denoiser.forward_data(&x.view(), &ts);
                    if !eps_hat.iter().all(|v| v.is_finite()) {
                        return Err(Error::Numerical(format!(
                            "non-finite denoiser output at step {t}"
                        )));
                    }
                    x = reverse_from_eps(&x.view(), &eps_hat.view(), t, self.schedule, None)?;
                    caches.push((t, cache));
                }
            }
            DenoiseMode::SingleShot => {
                let t = self.t_star;
                let ts = vec![t; n];
                let (eps_hat, cache) = self.denoiser.forward_data(&x.view(), &ts);
                let ab = self.schedule.alpha_bar(t);
                let c1 = (S::one() - ab).sqrt();
                let c0 = ab.sqrt();
                let mut x0 = Array4::<S>::zeros(x.raw_dim());
                ndarray::Zip::from(&mut x0)
                    .and(&x)
                    .and(&eps_hat)
                    .for_each(|o, &xt, &e| *o = (xt - c1 * e) / c0);
                x = x0;
                caches.push((t, cache));
            }
        }
        Ok((x, caches))
    }

    /// Backpropagate a gradient on the denoised output to the [0,1] input.
    fn denoise_backward(
        &self,
        caches: &[(usize, DenoiserDataCache<S>)],
        mut g: Array4<S>,
    ) -> Array4<S> {
        match self.mode {
            DenoiseMode::FullChain => {
                for (t, cache) in caches.iter().rev() {
                    let c1 = S::one() / self.schedule.alpha(*t).sqrt();
                    let c2 = self.schedule.beta(*t)
                        / (S::one() - self.schedule.alpha_bar(*t)).sqrt();
                    let back = self.denoiser.backward_data(cache, &g.view());
                    ndarray::Zip::from(&mut g).and(&back).for_each(|gi, &b| {
                        *gi = c1 * (*gi - c2 * b);
                    });
                }
                let c0 = self.schedule.alpha_bar(self.t_star).sqrt();
                g.mapv_inplace(|v| v * c0);
            }
            DenoiseMode::SingleShot => {
                let (t, cache) = &caches[0];
                let c1 = (S::one() - self.schedule.alpha_bar(*t)).sqrt();
                let back = self.denoiser.backward_data(cache, &g.view());
                // d x0/d xm = sqrt(ab) * (I - c1 J)/sqrt(ab) = I - c1 J
                ndarray::Zip::from(&mut g).and(&back).for_each(|gi, &b| {
                    *gi = *gi - c1 * b;
                });
            }
        }
        // [0,1] -> [-1,1] boundary
        g.mapv_inplace(|v| v + v);
        g
    }

    /// Logits of the joint map; `eps` is the frozen forward noise.
    pub fn logits(&self, xs01: &ArrayView4<S>, eps: &ArrayView4<S>) -> Result<Array2<S>> {
        self.check(xs01, eps)?;
        let xm = xs01.mapv(|v| v + v - S::one());
        if self.t_star == 0 {
            return Ok(self.classifier.logits(&xm.view()));
        }
        let (x0, _) = self.denoise_forward(&xm, eps)?;
        Ok(self.classifier.logits(&x0.view()))
    }

    /// Per-sample target cross-entropy, probabilities and input gradients.
    pub fn loss_grad(
        &self,
        xs01: &ArrayView4<S>,
        eps: &ArrayView4<S>,
        targets: &[usize],
    ) -> Result<JointEval<S>> {
        self.check(xs01, eps)?;
        let n = xs01.dim().0;
        if targets.len() != n {
            return Err(Error::input("one target per sample required"));
        }
        let xm = xs01.mapv(|v| v + v - S::one());
        let (x0, caches) = if self.t_star == 0 {
            (xm, Vec::new())
        } else {
            self.denoise_forward(&xm, eps)?
        };
        let (logits, ccache) = self.classifier.forward_data(&x0.view());
        let probs = softmax_rows(&logits.view());
        let mut losses = Vec::with_capacity(n);
        let mut glogits = probs.clone();
        for (i, &y) in targets.iter().enumerate() {
            if y >= glogits.dim().1 {
                return Err(Error::input(format!("target class {y} out of range")));
            }
            losses.push(-probs[[i, y]].to_f64().max(1e-300).ln());
            glogits[[i, y]] = glogits[[i, y]] - S::one();
        }
        let g = self.classifier.backward_data(&ccache, &glogits.view());
        let grad = if self.t_star == 0 {
            let mut g = g;
            g.mapv_inplace(|v| v + v);
            g
        } else {
            self.denoise_backward(&caches, g)
        };
        if !grad.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite joint gradient".to_string()));
        }
        Ok(JointEval {
            losses,
            probs,
            grad,
        })
    }
}

/// User-facing joint classifier over trained models.
#[derive(Clone, Copy)]
pub struct JointClassifier<'a> {
    pub classifier: &'a Classifier,
    pub denoiser: &'a Denoiser,
    pub t_star: usize,
    pub mode: DenoiseMode,
}

impl<'a> JointClassifier<'a> {
    pub fn new(classifier: &'a Classifier, denoiser: &'a Denoiser, t_star: usize) -> Self {
        JointClassifier {
            classifier,
            denoiser,
            t_star,
            mode: DenoiseMode::FullChain,
        }
    }

    pub fn core(&self) -> JointCore<'_, f32> {
        JointCore {
            classifier: &self.classifier.net,
            denoiser: &self.denoiser.net,
            schedule: &self.denoiser.schedule,
            t_star: self.t_star,
            mode: self.mode,
        }
    }

    /// Frozen forward noise for a batch; one independent stream per id.
    pub fn frozen_noise(&self, n: usize, ids: &[u64], seed: u64) -> Array4<f32> {
        let (c, h, w) = self.classifier.image_shape;
        let mut eps = Array4::zeros((n, c, h, w));
        for (i, &id) in ids.iter().enumerate() {
            let mut rng = derive_rng(seed, "joint-eps", id);
            eps.index_axis_mut(ndarray::Axis(0), i)
                .assign(&tensor::randn3((c, h, w), &mut rng));
        }
        eps
    }

    /// Logits for one [0,1] image with noise frozen under `seed`.
    pub fn joint_classify(&self, x01: &ImageTensor, seed: u64) -> Result<Vec<f32>> {
        if x01.dim() != self.classifier.image_shape {
            return Err(Error::input(format!(
                "image shape {:?} does not match model input {:?}",
                x01.dim(),
                self.classifier.image_shape
            )));
        }
        let xb = tensor::single_batch(&x01.view());
        let eps = self.frozen_noise(1, &[0], seed);
        let z = self.core().logits(&xb.view(), &eps.view())?;
        Ok(z.row(0).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::classifier::ClassifierNet;
    use crate::models::denoiser::DenoiserNet;
    use ndarray::Array4;

    fn tiny_setup() -> (
        ClassifierNet<f64>,
        DenoiserNet<f64>,
        DiffusionSchedule<f64>,
    ) {
        let mut rng = derive_rng(5, "t", 0);
        let cnet = ClassifierNet::<f64>::new(&[4, 4, 4, 4], 2, &mut rng);
        let dnet = DenoiserNet::<f64>::new(4, 8, 16, 16, &mut rng);
        let sched = DiffusionSchedule::<f64>::linear(40, 1e-3, 0.2).unwrap();
        (cnet, dnet, sched)
    }

    #[test]
    fn t_star_zero_equals_bare_classifier() {
        let (cnet, dnet, sched) = tiny_setup();
        let joint = JointCore {
            classifier: &cnet,
            denoiser: &dnet,
            schedule: &sched,
            t_star: 0,
            mode: DenoiseMode::FullChain,
        };
        let x = Array4::from_shape_fn((2, 3, 32, 32), |(n, c, i, j)| {
            0.5 + 0.1 * ((n + c + i + j) as f64 * 0.3).sin()
        });
        let eps = Array4::zeros(x.dim());
        let zj = joint.logits(&x.view(), &eps.view()).unwrap();
        let xm = x.mapv(|v| 2.0 * v - 1.0);
        let zf = cnet.logits(&xm.view());
        let max = (&zj - &zf).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert_eq!(max, 0.0);
    }

    #[test]
    fn joint_gradient_matches_finite_differences() {
        let (cnet, dnet, sched) = tiny_setup();
        for mode in [DenoiseMode::FullChain, DenoiseMode::SingleShot] {
            let joint = JointCore {
                classifier: &cnet,
                denoiser: &dnet,
                schedule: &sched,
                t_star: 6,
                mode,
            };
            let x = Array4::from_shape_fn((1, 3, 32, 32), |(_, c, i, j)| {
                0.5 + 0.2 * ((c * 3 + i + 2 * j) as f64 * 0.21).sin()
            });
            let mut rng = derive_rng(6, "eps", 0);
            let eps = Array4::from_shape_simple_fn(x.dim(), || {
                use rand_distr::Distribution;
                rand_distr::StandardNormal.sample(&mut rng)
            });
            let targets = [1usize];
            let eval = joint.loss_grad(&x.view(), &eps.view(), &targets).unwrap();
            let h = 1e-5;
            for idx in [(0, 0, 4, 7), (0, 2, 20, 13)] {
                let mut xp = x.clone();
                xp[idx] += h;
                let mut xm_ = x.clone();
                xm_[idx] -= h;
                let lp = joint.loss_grad(&xp.view(), &eps.view(), &targets).unwrap().losses[0];
                let lm = joint.loss_grad(&xm_.view(), &eps.view(), &targets).unwrap().losses[0];
                let fd = (lp - lm) / (2.0 * h);
                let got = eval.grad[idx];
                let rel = (fd - got).abs() / fd.abs().max(got.abs()).max(1e-12);
                assert!(rel < 1e-3, "mode {mode:?} rel {rel} fd {fd} got {got}");
            }
        }
    }

    #[test]
    fn t_star_above_schedule_is_input_error() {
        let (cnet, dnet, sched) = tiny_setup();
        let joint = JointCore {
            classifier: &cnet,
            denoiser: &dnet,
            schedule: &sched,
            t_star: 41,
            mode: DenoiseMode::FullChain,
        };
        let x = Array4::from_elem((1, 3, 32, 32), 0.5);
        let eps = Array4::zeros(x.dim());
        assert!(matches!(
            joint.logits(&x.view(), &eps.view()),
            Err(Error::Input(_))
        ));
    }
}
