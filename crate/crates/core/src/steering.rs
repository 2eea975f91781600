//! Counterfactual generation by projected sign-gradient steering.
//!
//! Each iteration descends the target-class loss of the (diffusion-
//! regularized) joint classifier, optionally plus a soft cross-entropy
//! penalty that anchors the spurious logits to the clean image's, or an
//! l1 proximity term. Iterates stay inside an l-infinity ball around the
//! original image and inside the valid pixel range; both constraints are
//! hard clamps applied every step.

use crate::causal::SpuriousChannel;
use crate::error::{Error, Result};
use crate::models::joint::{JointClassifier, JointEval};
use crate::nn::softmax_rows;
use crate::rng::derive_rng;
use crate::tensor::{self, ImageTensor};
use ndarray::{Array2, Array4, ArrayView2, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

pub use crate::models::joint::DenoiseMode;

fn default_mode() -> DenoiseMode {
    DenoiseMode::FullChain
}

/// Knobs of the sign-gradient scheme. `step_size` is the per-step magnitude;
/// `spurious_weight` is the penalty coefficient of the steering objective
/// (the paper overloads one symbol for both).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SteeringConfig {
    pub step_size: f32,
    pub ball_radius: f32,
    pub iterations: usize,
    pub spurious_weight: f64,
    pub l1_weight: f64,
    /// Forward-noise level t* of the joint classifier; 0 disables diffusion.
    pub noise_level: usize,
    #[serde(default = "default_mode")]
    pub denoise_mode: DenoiseMode,
    /// Redraw the forward noise every iteration instead of freezing it.
    #[serde(default)]
    pub resample_noise: bool,
    /// Anchor the penalty to the previous iterate instead of the original.
    #[serde(default)]
    pub reanchor_spurious: bool,
    pub seed: u64,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        SteeringConfig {
            step_size: 2.0 / 255.0,
            ball_radius: 0.12,
            iterations: 50,
            spurious_weight: 0.5,
            l1_weight: 0.001,
            noise_level: 60,
            denoise_mode: DenoiseMode::FullChain,
            resample_noise: false,
            reanchor_spurious: false,
            seed: 0,
        }
    }
}

impl SteeringConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) {
            return Err(Error::config("step_size", "must be > 0"));
        }
        if !(self.ball_radius > 0.0) {
            return Err(Error::config("ball_radius", "must be > 0"));
        }
        if self.spurious_weight < 0.0 {
            return Err(Error::config("spurious_weight", "must be >= 0"));
        }
        if self.l1_weight < 0.0 {
            return Err(Error::config("l1_weight", "must be >= 0"));
        }
        Ok(())
    }
}

/// Per-iteration record of one steered sample.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CETrace {
    pub class_loss: Vec<f64>,
    pub spurious_penalty: Vec<f64>,
    pub linf_dist: Vec<f32>,
    pub target_prob: Vec<f64>,
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    z.iter().map(|v| v - lse).collect()
}

/// Soft cross-entropy between two logit vectors:
/// L_S(z, z') = -Σ_k softmax(z)_k · log softmax(z')_k.
pub fn soft_cross_entropy(z: &[f64], z_prime: &[f64]) -> Result<f64> {
    Ok(soft_cross_entropy_grad(z, z_prime)?.0)
}

/// Loss plus its gradient with respect to the second argument:
/// dL/dz' = softmax(z') - softmax(z).
pub fn soft_cross_entropy_grad(z: &[f64], z_prime: &[f64]) -> Result<(f64, Vec<f64>)> {
    if z.len() != z_prime.len() {
        return Err(Error::input(format!(
            "logit lengths differ: {} vs {}",
            z.len(),
            z_prime.len()
        )));
    }
    let lp = log_softmax(z);
    let lq = log_softmax(z_prime);
    let p: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
    let q: Vec<f64> = lq.iter().map(|v| v.exp()).collect();
    let loss = -p.iter().zip(&lq).map(|(pi, lqi)| pi * lqi).sum::<f64>();
    let grad = q.iter().zip(&p).map(|(qi, pi)| qi - pi).collect();
    Ok((loss, grad))
}

/// Row-wise soft cross-entropy for f32 logit matrices; returns per-sample
/// losses and the gradient w.r.t. `z_prime`.
fn soft_ce_rows(z: &ArrayView2<f32>, z_prime: &ArrayView2<f32>) -> (Vec<f64>, Array2<f32>) {
    let p = softmax_rows(z);
    let q = softmax_rows(z_prime);
    let n = z.dim().0;
    let mut losses = Vec::with_capacity(n);
    for i in 0..n {
        let zi: Vec<f64> = z_prime.row(i).iter().map(|&v| v as f64).collect();
        let lq = log_softmax(&zi);
        let loss = -p
            .row(i)
            .iter()
            .zip(&lq)
            .map(|(&pi, lqi)| pi as f64 * lqi)
            .sum::<f64>();
        losses.push(loss);
    }
    (losses, &q - &p)
}

// ---------------------------------------------------------------------------
// Model abstractions
// ---------------------------------------------------------------------------

/// Anything that yields a target-class loss and its input gradient. The
/// iteration index lets implementations resample frozen noise when asked.
pub trait TargetModel: Sync {
    fn loss_grad(
        &self,
        xs01: &ArrayView4<f32>,
        targets: &[usize],
        iteration: usize,
    ) -> Result<JointEval<f32>>;
}

/// A spurious channel usable as a steering penalty.
pub trait SpuriousPenalty: Sync {
    fn logits(&self, xs01: &ArrayView4<f32>) -> Result<Array2<f32>>;
    /// Per-sample soft-CE against `anchors`, plus gradient w.r.t. the input.
    fn penalty_grad(
        &self,
        xs01: &ArrayView4<f32>,
        anchors: &ArrayView2<f32>,
    ) -> Result<(Vec<f64>, Array4<f32>)>;
}

/// Joint classifier with frozen per-sample forward noise.
pub struct FrozenJoint<'a> {
    pub joint: JointClassifier<'a>,
    ids: Vec<u64>,
    seed: u64,
    resample: bool,
    eps: Array4<f32>,
}

impl<'a> FrozenJoint<'a> {
    pub fn new(joint: JointClassifier<'a>, ids: &[u64], seed: u64, resample: bool) -> Self {
        let eps = joint.frozen_noise(ids.len(), ids, seed);
        FrozenJoint {
            joint,
            ids: ids.to_vec(),
            seed,
            resample,
            eps,
        }
    }

    fn noise_for(&self, iteration: usize) -> Array4<f32> {
        if !self.resample {
            return self.eps.clone();
        }
        let (c, h, w) = self.joint.classifier.image_shape;
        let mut eps = Array4::zeros((self.ids.len(), c, h, w));
        for (i, &id) in self.ids.iter().enumerate() {
            let mut rng = derive_rng(self.seed, "joint-eps-iter", id ^ ((iteration as u64) << 32));
            eps.index_axis_mut(Axis(0), i)
                .assign(&tensor::randn3((c, h, w), &mut rng));
        }
        eps
    }
}

impl TargetModel for FrozenJoint<'_> {
    fn loss_grad(
        &self,
        xs01: &ArrayView4<f32>,
        targets: &[usize],
        iteration: usize,
    ) -> Result<JointEval<f32>> {
        let eps = self.noise_for(iteration);
        self.joint.core().loss_grad(xs01, &eps.view(), targets)
    }
}

impl SpuriousPenalty for SpuriousChannel<'_> {
    fn logits(&self, xs01: &ArrayView4<f32>) -> Result<Array2<f32>> {
        self.core().logits(xs01)
    }

    fn penalty_grad(
        &self,
        xs01: &ArrayView4<f32>,
        anchors: &ArrayView2<f32>,
    ) -> Result<(Vec<f64>, Array4<f32>)> {
        let core = self.core();
        let (z, cache) = core.logits_with_cache(xs01)?;
        let (losses, dz) = soft_ce_rows(anchors, &z.view());
        let grad = core.backward_to_input(&cache, &dz.view());
        Ok((losses, grad))
    }
}

// ---------------------------------------------------------------------------
// The projected sign-gradient driver
// ---------------------------------------------------------------------------

fn sgn(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// x_next = clamp(x_tau - step*sgn(g)) onto (ball around x0) ∩ [0,1].
fn project_step(
    x0: &ArrayView4<f32>,
    x_tau: &ArrayView4<f32>,
    grad: &ArrayView4<f32>,
    step: f32,
    radius: f32,
) -> Array4<f32> {
    let mut out = Array4::zeros(x0.raw_dim());
    ndarray::Zip::from(&mut out)
        .and(x0)
        .and(x_tau)
        .and(grad)
        .for_each(|o, &x0i, &xt, &g| {
            let cand = xt - step * sgn(g);
            let lo = (x0i - radius).max(0.0);
            let hi = (x0i + radius).min(1.0);
            *o = cand.clamp(lo, hi);
        });
    out
}

fn check_ball(x0: &ArrayView4<f32>, x_tau: &ArrayView4<f32>, radius: f32) -> Result<()> {
    let max = tensor::max_abs_diff4(x0, x_tau);
    if max > radius + 1e-6 {
        return Err(Error::input(format!(
            "iterate lies outside the ball: {max} > {radius}"
        )));
    }
    Ok(())
}

struct StepOutcome {
    x_next: Array4<f32>,
    class_loss: Vec<f64>,
    penalty: Vec<f64>,
    target_prob: Vec<f64>,
}

/// One full steering update for a batch.
#[allow(clippy::too_many_arguments)]
fn batch_step<M: TargetModel, P: SpuriousPenalty + ?Sized>(
    x0: &ArrayView4<f32>,
    x_tau: &ArrayView4<f32>,
    targets: &[usize],
    model: &M,
    penalty: Option<(&P, f64)>,
    anchors: Option<&Array2<f32>>,
    l1_weight: f64,
    cfg: &SteeringConfig,
    iteration: usize,
) -> Result<StepOutcome> {
    let eval = model.loss_grad(x_tau, targets, iteration)?;
    let mut grad = eval.grad;
    let mut penalty_losses = vec![0.0; targets.len()];
    if let Some((chan, w)) = penalty {
        if w > 0.0 {
            let anchors = anchors.expect("anchors required when penalty is active");
            let (pl, pg) = chan.penalty_grad(x_tau, &anchors.view())?;
            let wf = w as f32;
            ndarray::Zip::from(&mut grad).and(&pg).for_each(|g, &p| {
                *g += wf * p;
            });
            penalty_losses = pl;
        }
    }
    if l1_weight > 0.0 {
        let lw = l1_weight as f32;
        ndarray::Zip::from(&mut grad)
            .and(x_tau)
            .and(x0)
            .for_each(|g, &xt, &x0i| {
                *g += lw * sgn(xt - x0i);
            });
    }
    if !grad.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite gradient at iteration {iteration}"
        )));
    }
    let x_next = project_step(x0, x_tau, &grad.view(), cfg.step_size, cfg.ball_radius);
    let target_prob = targets
        .iter()
        .enumerate()
        .map(|(i, &y)| eval.probs[[i, y]] as f64)
        .collect();
    Ok(StepOutcome {
        x_next,
        class_loss: eval.losses,
        penalty: penalty_losses,
        target_prob,
    })
}

/// Run the full steering loop on a batch. `penalty` carries the spurious
/// channel and its weight; `l1_weight` adds the proximity term. Weight zero
/// short-circuits to the plain targeted scheme, bit-exactly.
pub fn steer_batch<M: TargetModel, P: SpuriousPenalty + ?Sized>(
    xs0: &Array4<f32>,
    targets: &[usize],
    model: &M,
    penalty: Option<(&P, f64)>,
    l1_weight: f64,
    cfg: &SteeringConfig,
) -> Result<(Array4<f32>, Vec<CETrace>)> {
    cfg.validate()?;
    if targets.len() != xs0.dim().0 {
        return Err(Error::input("one target per sample required"));
    }
    let n = targets.len();
    let mut traces = vec![CETrace::default(); n];
    let mut x = xs0.clone();
    if cfg.iterations == 0 {
        return Ok((x, traces));
    }
    let active_penalty = matches!(penalty, Some((_, w)) if w > 0.0);
    let mut anchors = if active_penalty {
        let (chan, _) = penalty.unwrap();
        Some(chan.logits(&xs0.view())?)
    } else {
        None
    };
    for tau in 0..cfg.iterations {
        if cfg.reanchor_spurious && active_penalty && tau > 0 {
            let (chan, _) = penalty.unwrap();
            anchors = Some(chan.logits(&x.view())?);
        }
        let out = batch_step(
            &xs0.view(),
            &x.view(),
            targets,
            model,
            penalty,
            anchors.as_ref(),
            l1_weight,
            cfg,
            tau,
        )?;
        x = out.x_next;
        for i in 0..n {
            traces[i].class_loss.push(out.class_loss[i]);
            traces[i].spurious_penalty.push(out.penalty[i]);
            traces[i].target_prob.push(out.target_prob[i]);
            let d = tensor::max_abs_diff(&xs0.index_axis(Axis(0), i), &x.index_axis(Axis(0), i));
            traces[i].linf_dist.push(d);
        }
    }
    Ok((x, traces))
}

/// Disabled penalty marker for plain targeted runs.
pub struct NoPenalty;

impl SpuriousPenalty for NoPenalty {
    fn logits(&self, _xs01: &ArrayView4<f32>) -> Result<Array2<f32>> {
        Err(Error::input("NoPenalty has no logits"))
    }
    fn penalty_grad(
        &self,
        _xs01: &ArrayView4<f32>,
        _anchors: &ArrayView2<f32>,
    ) -> Result<(Vec<f64>, Array4<f32>)> {
        Err(Error::input("NoPenalty has no gradient"))
    }
}

// ---------------------------------------------------------------------------
// Single-image operations
// ---------------------------------------------------------------------------

/// One targeted step: x_{τ+1} = Π(x_τ - step · sgn(∇ L(F(x_τ), y'))).
pub fn targeted_pgd_step<M: TargetModel>(
    x0: &ImageTensor,
    x_tau: &ImageTensor,
    target: usize,
    model: &M,
    cfg: &SteeringConfig,
) -> Result<ImageTensor> {
    cfg.validate()?;
    let x0b = tensor::single_batch(&x0.view());
    let xtb = tensor::single_batch(&x_tau.view());
    check_ball(&x0b.view(), &xtb.view(), cfg.ball_radius)?;
    let out = batch_step::<M, NoPenalty>(
        &x0b.view(),
        &xtb.view(),
        &[target],
        model,
        None,
        None,
        0.0,
        cfg,
        0,
    )?;
    Ok(tensor::from_single_batch(out.x_next))
}

/// One causally-guided step: the gradient additionally carries
/// spurious_weight · ∇ L_S(z_anchor, z(x_τ)).
pub fn causal_pgd_step<M: TargetModel, P: SpuriousPenalty>(
    x0: &ImageTensor,
    x_tau: &ImageTensor,
    target: usize,
    model: &M,
    z_anchor: &[f32],
    channel: &P,
    cfg: &SteeringConfig,
) -> Result<ImageTensor> {
    cfg.validate()?;
    let x0b = tensor::single_batch(&x0.view());
    let xtb = tensor::single_batch(&x_tau.view());
    check_ball(&x0b.view(), &xtb.view(), cfg.ball_radius)?;
    let anchors = Array2::from_shape_vec((1, z_anchor.len()), z_anchor.to_vec())
        .map_err(|e| Error::input(e.to_string()))?;
    let out = batch_step(
        &x0b.view(),
        &xtb.view(),
        &[target],
        model,
        Some((channel, cfg.spurious_weight)),
        Some(&anchors),
        0.0,
        cfg,
        0,
    )?;
    Ok(tensor::from_single_batch(out.x_next))
}

/// Full causally-guided generation for one image.
pub fn generate_counterfactual<M: TargetModel, P: SpuriousPenalty>(
    x: &ImageTensor,
    target: usize,
    model: &M,
    channel: &P,
    cfg: &SteeringConfig,
) -> Result<(ImageTensor, CETrace)> {
    let xb = tensor::single_batch(&x.view());
    let (out, mut traces) = steer_batch(
        &xb,
        &[target],
        model,
        Some((channel, cfg.spurious_weight)),
        0.0,
        cfg,
    )?;
    Ok((tensor::from_single_batch(out), traces.remove(0)))
}

/// l1-regularized targeted generation for one image (λ overrides config).
pub fn generate_l1_counterfactual<M: TargetModel>(
    x: &ImageTensor,
    target: usize,
    model: &M,
    lambda: f64,
    cfg: &SteeringConfig,
) -> Result<ImageTensor> {
    if lambda < 0.0 {
        return Err(Error::config("l1_weight", "must be >= 0"));
    }
    let xb = tensor::single_batch(&x.view());
    let (out, _) = steer_batch::<M, NoPenalty>(&xb, &[target], model, None, lambda, cfg)?;
    Ok(tensor::from_single_batch(out))
}
