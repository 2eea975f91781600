//! Noise-prediction network and its training loop.
//!
//! A two-level U-shaped CNN sized for 32x32 inputs: encoder at full and half
//! resolution, nearest-neighbour upsampling, one skip connection, and a
//! sinusoidal step embedding injected as a per-channel bias at each level.

use crate::error::{Error, Result};
use crate::models::schedule::{ddpm_forward, reverse_from_eps, DiffusionSchedule, ScheduleSpec};
use crate::nn::{
    avg_pool2, avg_pool2_backward, concat_channels, silu, silu2, silu2_backward, silu_backward,
    split_channels, upsample2, upsample2_backward, Adam, Conv2d, Linear, Scalar,
};
use crate::rng::derive_rng;
use crate::synthspur::LabeledSample;
use crate::tensor::{self, ImageTensor};
use ndarray::{s, Array1, Array2, Array4, ArrayView2, ArrayView4, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Sinusoidal embedding of integer steps, one row per sample.
pub fn step_embedding<S: Scalar>(ts: &[usize], dim: usize) -> Array2<S> {
    let half = dim / 2;
    let mut out = Array2::<S>::zeros((ts.len(), dim));
    for (i, &t) in ts.iter().enumerate() {
        for k in 0..half {
            let freq = (-(10000f64.ln()) * k as f64 / (half.max(2) - 1) as f64).exp();
            let arg = t as f64 * freq;
            out[[i, 2 * k]] = S::from_f64(arg.sin());
            out[[i, 2 * k + 1]] = S::from_f64(arg.cos());
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct DenoiserNet<S: Scalar> {
    pub t_fc: Linear<S>,
    pub t_b1: Linear<S>,
    pub t_b2: Linear<S>,
    pub e1a: Conv2d<S>,
    pub e1b: Conv2d<S>,
    pub e2a: Conv2d<S>,
    pub e2b: Conv2d<S>,
    pub d1: Conv2d<S>,
    pub out: Conv2d<S>,
    pub emb_dim: usize,
}

/// Pre-activation caches: enough for input gradients.
pub struct DenoiserDataCache<S: Scalar> {
    p1: Array4<S>,
    p2: Array4<S>,
    p3: Array4<S>,
    p4: Array4<S>,
    p5: Array4<S>,
    in_dim: (usize, usize, usize, usize),
}

/// Full caches for parameter gradients.
pub struct DenoiserTrainCache<S: Scalar> {
    emb: Array2<S>,
    ph: Array2<S>,
    h: Array2<S>,
    cols1a: Array2<S>,
    cols1b: Array2<S>,
    cols2a: Array2<S>,
    cols2b: Array2<S>,
    cols_d1: Array2<S>,
    cols_out: Array2<S>,
    data: DenoiserDataCache<S>,
    a1: Array4<S>,
    q: Array4<S>,
    a2: Array4<S>,
    cat: Array4<S>,
    a3: Array4<S>,
}

#[derive(Debug, Clone)]
pub struct DenoiserGrads<S: Scalar> {
    pub t_fc: (Array2<S>, Array1<S>),
    pub t_b1: (Array2<S>, Array1<S>),
    pub t_b2: (Array2<S>, Array1<S>),
    pub convs: Vec<(Array4<S>, Array1<S>)>, // e1a, e1b, e2a, e2b, d1, out
}

impl<S: Scalar> DenoiserGrads<S> {
    pub fn zeros_like(net: &DenoiserNet<S>) -> Self {
        let lz = |l: &Linear<S>| (Array2::zeros(l.w.dim()), Array1::zeros(l.b.len()));
        let cz = |c: &Conv2d<S>| (Array4::zeros(c.w.dim()), Array1::zeros(c.b.len()));
        DenoiserGrads {
            t_fc: lz(&net.t_fc),
            t_b1: lz(&net.t_b1),
            t_b2: lz(&net.t_b2),
            convs: vec![
                cz(&net.e1a),
                cz(&net.e1b),
                cz(&net.e2a),
                cz(&net.e2b),
                cz(&net.d1),
                cz(&net.out),
            ],
        }
    }

    pub fn add_assign(&mut self, o: &Self) {
        self.t_fc.0 += &o.t_fc.0;
        self.t_fc.1 += &o.t_fc.1;
        self.t_b1.0 += &o.t_b1.0;
        self.t_b1.1 += &o.t_b1.1;
        self.t_b2.0 += &o.t_b2.0;
        self.t_b2.1 += &o.t_b2.1;
        for (a, b) in self.convs.iter_mut().zip(&o.convs) {
            a.0 += &b.0;
            a.1 += &b.1;
        }
    }
}

/// Add a per-(sample, channel) bias to a feature map.
fn add_channel_bias<S: Scalar>(x: &mut Array4<S>, bias: &ArrayView2<S>) {
    let (n, c, _, _) = x.dim();
    for ni in 0..n {
        for ci in 0..c {
            let b = bias[[ni, ci]];
            x.slice_mut(s![ni, ci, .., ..]).mapv_inplace(|v| v + b);
        }
    }
}

/// Reduce a feature-map gradient to the per-(sample, channel) bias gradient.
fn channel_bias_grad<S: Scalar>(g: &ArrayView4<S>) -> Array2<S> {
    let (n, c, _, _) = g.dim();
    let mut out = Array2::<S>::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            out[[ni, ci]] = g.slice(s![ni, ci, .., ..]).iter().copied().sum();
        }
    }
    out
}

impl<S: Scalar> DenoiserNet<S> {
    pub fn new<R: Rng>(c1: usize, c2: usize, emb_dim: usize, hidden: usize, rng: &mut R) -> Self {
        DenoiserNet {
            t_fc: Linear::new(emb_dim, hidden, rng),
            t_b1: Linear::new(hidden, c1, rng),
            t_b2: Linear::new(hidden, c2, rng),
            e1a: Conv2d::new(3, c1, 3, 1, 1, rng),
            e1b: Conv2d::new(c1, c1, 3, 1, 1, rng),
            e2a: Conv2d::new(c1, c2, 3, 1, 1, rng),
            e2b: Conv2d::new(c2, c2, 3, 1, 1, rng),
            d1: Conv2d::new(c1 + c2, c1, 3, 1, 1, rng),
            out: Conv2d::new(c1, 3, 3, 1, 1, rng),
            emb_dim,
        }
    }

    pub fn channels(&self) -> (usize, usize) {
        (self.e1a.w.dim().0, self.e2a.w.dim().0)
    }

    fn time_biases(&self, ts: &[usize]) -> (Array2<S>, Array2<S>, Array2<S>, Array2<S>, Array2<S>) {
        let emb = step_embedding::<S>(ts, self.emb_dim);
        let ph = self.t_fc.forward(&emb.view());
        let h = silu2(&ph.view());
        let b1 = self.t_b1.forward(&h.view());
        let b2 = self.t_b2.forward(&h.view());
        (emb, ph, h, b1, b2)
    }

    /// ε̂(x_t, t); input and output are (N,3,H,W), H and W even.
    pub fn forward(&self, x: &ArrayView4<S>, ts: &[usize]) -> Array4<S> {
        self.forward_data(x, ts).0
    }

    pub fn forward_data(&self, x: &ArrayView4<S>, ts: &[usize]) -> (Array4<S>, DenoiserDataCache<S>) {
        let (_, _, _, b1, b2) = self.time_biases(ts);
        let mut p1 = self.e1a.forward(x);
        add_channel_bias(&mut p1, &b1.view());
        let a1 = silu(&p1.view());
        let p2 = self.e1b.forward(&a1.view());
        let h1 = silu(&p2.view());
        let q = avg_pool2(&h1.view());
        let mut p3 = self.e2a.forward(&q.view());
        add_channel_bias(&mut p3, &b2.view());
        let a2 = silu(&p3.view());
        let p4 = self.e2b.forward(&a2.view());
        let h2 = silu(&p4.view());
        let u = upsample2(&h2.view());
        let cat = concat_channels(&h1.view(), &u.view());
        let p5 = self.d1.forward(&cat.view());
        let a3 = silu(&p5.view());
        let eps = self.out.forward(&a3.view());
        (
            eps,
            DenoiserDataCache {
                p1,
                p2,
                p3,
                p4,
                p5,
                in_dim: x.dim(),
            },
        )
    }

    pub fn forward_train(&self, x: &ArrayView4<S>, ts: &[usize]) -> (Array4<S>, DenoiserTrainCache<S>) {
        let (emb, ph, h, b1, b2) = self.time_biases(ts);
        let (mut p1, cols1a) = self.e1a.forward_train(x);
        add_channel_bias(&mut p1, &b1.view());
        let a1 = silu(&p1.view());
        let (p2, cols1b) = self.e1b.forward_train(&a1.view());
        let h1 = silu(&p2.view());
        let q = avg_pool2(&h1.view());
        let (mut p3, cols2a) = self.e2a.forward_train(&q.view());
        add_channel_bias(&mut p3, &b2.view());
        let a2 = silu(&p3.view());
        let (p4, cols2b) = self.e2b.forward_train(&a2.view());
        let h2 = silu(&p4.view());
        let u = upsample2(&h2.view());
        let cat = concat_channels(&h1.view(), &u.view());
        let (p5, cols_d1) = self.d1.forward_train(&cat.view());
        let a3 = silu(&p5.view());
        let (eps, cols_out) = self.out.forward_train(&a3.view());
        (
            eps,
            DenoiserTrainCache {
                emb,
                ph,
                h,
                cols1a,
                cols1b,
                cols2a,
                cols2b,
                cols_d1,
                cols_out,
                data: DenoiserDataCache {
                    p1,
                    p2,
                    p3,
                    p4,
                    p5,
                    in_dim: x.dim(),
                },
                a1,
                q,
                a2,
                cat,
                a3,
            },
        )
    }

    /// Input gradient with frozen parameters (the steering path).
    pub fn backward_data(&self, cache: &DenoiserDataCache<S>, geps: &ArrayView4<S>) -> Array4<S> {
        let (c1, _) = self.channels();
        let ga3 = self.out.backward_data(geps, cache.p5.dim());
        let gp5 = silu_backward(&cache.p5.view(), &ga3.view());
        let (n, _, h, w) = cache.p5.dim();
        let c2 = self.e2a.w.dim().0;
        let gcat = self.d1.backward_data(&gp5.view(), (n, c1 + c2, h, w));
        let (gh1_a, gu) = split_channels(&gcat.view(), c1);
        let gh2 = upsample2_backward(&gu.view());
        let gp4 = silu_backward(&cache.p4.view(), &gh2.view());
        let ga2 = self.e2b.backward_data(&gp4.view(), cache.p3.dim());
        let gp3 = silu_backward(&cache.p3.view(), &ga2.view());
        let (nq, _, hq, wq) = cache.p3.dim();
        let gq = self.e2a.backward_data(&gp3.view(), (nq, c1, hq, wq));
        let gh1_b = avg_pool2_backward(&gq.view());
        let gh1 = &gh1_a + &gh1_b;
        let gp2 = silu_backward(&cache.p2.view(), &gh1.view());
        let ga1 = self.e1b.backward_data(&gp2.view(), cache.p1.dim());
        let gp1 = silu_backward(&cache.p1.view(), &ga1.view());
        self.e1a.backward_data(&gp1.view(), cache.in_dim)
    }

    /// Full backward pass accumulating parameter gradients.
    pub fn backward(
        &self,
        cache: &DenoiserTrainCache<S>,
        geps: &ArrayView4<S>,
        grads: &mut DenoiserGrads<S>,
    ) -> Array4<S> {
        let (c1, c2) = self.channels();
        let d = &cache.data;
        let ga3 = {
            let (gw, gb) = &mut grads.convs[5];
            self.out.backward(
                &cache.cols_out,
            geps,
            cache.a3.dim(),
                gw,
                gb,
            )
        };
        let gp5 = silu_backward(&d.p5.view(), &ga3.view());
        let gcat = {
            let (gw, gb) = &mut grads.convs[4];
            self.d1.backward(
                &cache.cols_d1,
            &gp5.view(),
            cache.cat.dim(),
                gw,
                gb,
            )
        };
        let (gh1_a, gu) = split_channels(&gcat.view(), c1);
        let gh2 = upsample2_backward(&gu.view());
        let gp4 = silu_backward(&d.p4.view(), &gh2.view());
        let ga2 = {
            let (gw, gb) = &mut grads.convs[3];
            self.e2b.backward(
                &cache.cols2b,
            &gp4.view(),
            cache.a2.dim(),
                gw,
                gb,
            )
        };
        let gp3 = silu_backward(&d.p3.view(), &ga2.view());
        let gb2 = channel_bias_grad(&gp3.view());
        let gq = {
            let (gw, gb) = &mut grads.convs[2];
            self.e2a.backward(
                &cache.cols2a,
            &gp3.view(),
            cache.q.dim(),
                gw,
                gb,
            )
        };
        let gh1_b = avg_pool2_backward(&gq.view());
        let gh1 = &gh1_a + &gh1_b;
        let gp2 = silu_backward(&d.p2.view(), &gh1.view());
        let ga1 = {
            let (gw, gb) = &mut grads.convs[1];
            self.e1b.backward(
                &cache.cols1b,
            &gp2.view(),
            cache.a1.dim(),
                gw,
                gb,
            )
        };
        let gp1 = silu_backward(&d.p1.view(), &ga1.view());
        let gb1 = channel_bias_grad(&gp1.view());
        let gx = {
            let (gw, gb) = &mut grads.convs[0];
            self.e1a.backward(
                &cache.cols1a,
            &gp1.view(),
            d.in_dim,
                gw,
                gb,
            )
        };
        // time-embedding path
        let gh_1 = self.t_b1.backward(
            &cache.h.view(),
            &gb1.view(),
            &mut grads.t_b1.0,
            &mut grads.t_b1.1,
        );
        let gh_2 = self.t_b2.backward(
            &cache.h.view(),
            &gb2.view(),
            &mut grads.t_b2.0,
            &mut grads.t_b2.1,
        );
        let gh = &gh_1 + &gh_2;
        let gph = silu2_backward(&cache.ph.view(), &gh.view());
        self.t_fc.backward(
            &cache.emb.view(),
            &gph.view(),
            &mut grads.t_fc.0,
            &mut grads.t_fc.1,
        );
        let _ = c2;
        gx
    }

    pub fn apply_grads(&mut self, grads: &DenoiserGrads<S>, opt: &mut Adam<S>) {
        opt.begin_step();
        opt.update("t_fc.w", &mut self.t_fc.w, &grads.t_fc.0, true);
        opt.update("t_fc.b", &mut self.t_fc.b, &grads.t_fc.1, false);
        opt.update("t_b1.w", &mut self.t_b1.w, &grads.t_b1.0, true);
        opt.update("t_b1.b", &mut self.t_b1.b, &grads.t_b1.1, false);
        opt.update("t_b2.w", &mut self.t_b2.w, &grads.t_b2.0, true);
        opt.update("t_b2.b", &mut self.t_b2.b, &grads.t_b2.1, false);
        let names = ["e1a", "e1b", "e2a", "e2b", "d1", "out"];
        let convs: [&mut Conv2d<S>; 6] = [
            &mut self.e1a,
            &mut self.e1b,
            &mut self.e2a,
            &mut self.e2b,
            &mut self.d1,
            &mut self.out,
        ];
        for ((conv, name), g) in convs.into_iter().zip(names).zip(&grads.convs) {
            opt.update(&format!("{name}.w"), &mut conv.w, &g.0, true);
            opt.update(&format!("{name}.b"), &mut conv.b, &g.1, false);
        }
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DdpmTrainConfig {
    pub schedule: ScheduleSpec,
    pub channels: (usize, usize),
    pub emb_dim: usize,
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for DdpmTrainConfig {
    fn default() -> Self {
        DdpmTrainConfig {
            schedule: ScheduleSpec::default(),
            channels: (12, 24),
            emb_dim: 32,
            hidden: 32,
            steps: 2500,
            batch_size: 32,
            learning_rate: 2e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DdpmReport {
    pub holdout_eps_mse: f64,
    pub zero_predictor_mse: f64,
    pub final_train_loss: f64,
}

/// Trained noise predictor with its schedule embedded.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub net: DenoiserNet<f32>,
    pub schedule: DiffusionSchedule<f32>,
    pub config: DdpmTrainConfig,
    pub image_shape: (usize, usize, usize),
    pub report: DdpmReport,
}

impl Denoiser {
    pub fn t_steps(&self) -> usize {
        self.schedule.t_steps()
    }
}

/// One reverse update through a trained denoiser. `noise_rng` supplies the
/// stochastic term; pass `None` for the deterministic variant (σ_t = 0).
pub fn ddpm_reverse_step(
    x_t: &ArrayView4<f32>,
    t: usize,
    schedule: &DiffusionSchedule<f32>,
    net: &DenoiserNet<f32>,
    noise: Option<&ArrayView4<f32>>,
) -> Result<Array4<f32>> {
    let ts = vec![t; x_t.dim().0];
    let eps_hat = net.forward(x_t, &ts);
    if !eps_hat.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical(format!(
            "denoiser produced non-finite output at step {t}"
        )));
    }
    reverse_from_eps(x_t, &eps_hat.view(), t, schedule, noise)
}

/// Run the reverse chain from `from_t` down to 1, starting at `x_from`.
/// Stochastic draws come from `rng`; deterministic when `stochastic=false`.
pub fn reverse_chain(
    x_from: &ArrayView4<f32>,
    from_t: usize,
    schedule: &DiffusionSchedule<f32>,
    net: &DenoiserNet<f32>,
    stochastic: bool,
    rng: &mut impl Rng,
) -> Result<Array4<f32>> {
    let mut x = x_from.to_owned();
    for t in (1..=from_t).rev() {
        let noise = if stochastic {
            Some(tensor::randn4(x.dim(), rng))
        } else {
            None
        };
        x = ddpm_reverse_step(&x.view(), t, schedule, net, noise.as_ref().map(|n| n.view()).as_ref())?;
    }
    Ok(x)
}

/// ε-prediction MSE of the net over a fixed evaluation set.
fn eps_mse(
    net: &DenoiserNet<f32>,
    xs: &Array4<f32>,
    schedule: &DiffusionSchedule<f32>,
    seed: u64,
) -> Result<f64> {
    let n = xs.dim().0;
    let mut rng = derive_rng(seed, "ddpm-holdout", 0);
    let mut se = 0.0f64;
    let mut count = 0usize;
    let chunk = 32;
    for start in (0..n).step_by(chunk) {
        let end = (start + chunk).min(n);
        let xb = xs.slice(s![start..end, .., .., ..]).to_owned();
        let ts: Vec<usize> = (start..end)
            .map(|_| rng.gen_range(1..=schedule.t_steps()))
            .collect();
        let eps = tensor::randn4(xb.dim(), &mut rng);
        let xt = ddpm_forward(&xb.view(), &ts, &eps.view(), schedule)?;
        let pred = net.forward(&xt.view(), &ts);
        se += pred
            .iter()
            .zip(eps.iter())
            .map(|(&p, &e)| ((p - e) as f64).powi(2))
            .sum::<f64>();
        count += eps.len();
    }
    Ok(se / count as f64)
}

/// Train the ε-predictor. The last 10% of `train` is held out for the
/// ε-MSE report; divergence raises a training error with the step index.
pub fn train_ddpm(
    train: &[LabeledSample],
    schedule_spec: &ScheduleSpec,
    cfg: &DdpmTrainConfig,
) -> Result<Denoiser> {
    if train.is_empty() {
        return Err(Error::input("train set must be non-empty"));
    }
    let schedule = DiffusionSchedule::<f32>::from_spec(schedule_spec)?;
    let shape = train[0].image.dim();
    let imgs: Vec<ImageTensor> = train
        .iter()
        .map(|s| tensor::to_model_range(&s.image.view()))
        .collect();
    let xs = tensor::batch_of(&imgs);
    let n_hold = (imgs.len() / 10).max(1);
    let n_train = imgs.len() - n_hold;
    let (c1, c2) = cfg.channels;
    let mut rng = derive_rng(cfg.seed, "ddpm-init", 0);
    let mut net = DenoiserNet::<f32>::new(c1, c2, cfg.emb_dim, cfg.hidden, &mut rng);
    let mut opt = Adam::<f32>::new(cfg.learning_rate, 0.0);
    const MICRO: usize = 8;
    let mut last_loss = 0.0f64;
    for step in 0..cfg.steps {
        let mut srng = derive_rng(cfg.seed, "ddpm-step", step as u64);
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| srng.gen_range(0..n_train))
            .collect();
        let ts: Vec<usize> = (0..cfg.batch_size)
            .map(|_| srng.gen_range(1..=schedule.t_steps()))
            .collect();
        let noise_seed: u64 = srng.gen();
        let micro_jobs: Vec<(Vec<usize>, Vec<usize>, u64)> = idx
            .chunks(MICRO)
            .zip(ts.chunks(MICRO))
            .enumerate()
            .map(|(k, (ix, tt))| (ix.to_vec(), tt.to_vec(), noise_seed.wrapping_add(k as u64)))
            .collect();
        let results: Vec<(DenoiserGrads<f32>, f64, usize)> = micro_jobs
            .par_iter()
            .map(|(ix, tt, nseed)| {
                let mut mb = Array4::zeros((ix.len(), shape.0, shape.1, shape.2));
                for (k, &i) in ix.iter().enumerate() {
                    mb.index_axis_mut(Axis(0), k)
                        .assign(&xs.index_axis(Axis(0), i));
                }
                let mut nrng = derive_rng(*nseed, "ddpm-noise", 0);
                let eps = tensor::randn4(mb.dim(), &mut nrng);
                let xt = ddpm_forward(&mb.view(), tt, &eps.view(), &schedule).expect("valid steps");
                let (pred, cache) = net.forward_train(&xt.view(), tt);
                // loss = mean((pred - eps)^2); d/dpred = 2 (pred - eps)/numel
                let numel = pred.len() as f64;
                let diff = &pred - &eps;
                let loss = diff.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / numel;
                let geps = diff.mapv(|v| v * (2.0 / numel as f64) as f32);
                let mut grads = DenoiserGrads::zeros_like(&net);
                net.backward(&cache, &geps.view(), &mut grads);
                (grads, loss, pred.len())
            })
            .collect();
        let mut total = DenoiserGrads::zeros_like(&net);
        let mut loss_num = 0.0f64;
        let mut numel_total = 0usize;
        for (g, l, ne) in &results {
            numel_total += ne;
            loss_num += l * *ne as f64;
            // rescale each micro grad (normalized by its own numel) later
            let mut g = g.clone();
            let f = *ne as f32;
            g.t_fc.0.mapv_inplace(|v| v * f);
            g.t_fc.1.mapv_inplace(|v| v * f);
            g.t_b1.0.mapv_inplace(|v| v * f);
            g.t_b1.1.mapv_inplace(|v| v * f);
            g.t_b2.0.mapv_inplace(|v| v * f);
            g.t_b2.1.mapv_inplace(|v| v * f);
            for (gw, gb) in g.convs.iter_mut() {
                gw.mapv_inplace(|v| v * f);
                gb.mapv_inplace(|v| v * f);
            }
            total.add_assign(&g);
        }
        let inv = 1.0 / numel_total as f32;
        total.t_fc.0.mapv_inplace(|v| v * inv);
        total.t_fc.1.mapv_inplace(|v| v * inv);
        total.t_b1.0.mapv_inplace(|v| v * inv);
        total.t_b1.1.mapv_inplace(|v| v * inv);
        total.t_b2.0.mapv_inplace(|v| v * inv);
        total.t_b2.1.mapv_inplace(|v| v * inv);
        for (gw, gb) in total.convs.iter_mut() {
            gw.mapv_inplace(|v| v * inv);
            gb.mapv_inplace(|v| v * inv);
        }
        last_loss = loss_num / numel_total as f64;
        if !last_loss.is_finite() {
            return Err(Error::Training {
                epoch: step,
                msg: format!("non-finite diffusion loss {last_loss}"),
            });
        }
        net.apply_grads(&total, &mut opt);
    }
    let holdout = xs.slice(s![n_train.., .., .., ..]).to_owned();
    let holdout_eps_mse = eps_mse(&net, &holdout, &schedule, cfg.seed)?;
    Ok(Denoiser {
        net,
        schedule,
        config: cfg.clone(),
        image_shape: shape,
        report: DdpmReport {
            holdout_eps_mse,
            zero_predictor_mse: 1.0,
            final_train_loss: last_loss,
        },
    })
}

/// Draw unconditional samples by running the full reverse chain from pure
/// noise. Returns [0,1] images plus the pre-clamp value range for audit.
pub fn sample_unconditional(
    denoiser: &Denoiser,
    n: usize,
    stochastic: bool,
    seed: u64,
) -> Result<(Vec<ImageTensor>, (f32, f32))> {
    let (c, h, w) = denoiser.image_shape;
    let mut rng = derive_rng(seed, "uncond-sample", 0);
    let x_t = tensor::randn4((n, c, h, w), &mut rng);
    let x0 = reverse_chain(
        &x_t.view(),
        denoiser.t_steps(),
        &denoiser.schedule,
        &denoiser.net,
        stochastic,
        &mut rng,
    )?;
    // pre-clamp range in [0,1] display units
    let lo = x0.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = x0.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let range = ((lo + 1.0) * 0.5, (hi + 1.0) * 0.5);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let img = x0.index_axis(Axis(0), i).to_owned();
        let mut img01 = tensor::from_model_range(&img.view());
        tensor::clamp01(&mut img01);
        out.push(img01);
    }
    Ok((out, range))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn denoiser_output_preserves_shape() {
        let mut rng = derive_rng(0, "t", 0);
        let net = DenoiserNet::<f32>::new(6, 12, 16, 16, &mut rng);
        let x = Array4::<f32>::from_elem((2, 3, 32, 32), 0.1);
        let y = net.forward(&x.view(), &[3, 77]);
        assert_eq!(y.dim(), x.dim());
    }

    #[test]
    fn degenerate_beta_step_is_identity() {
        // At beta ~ 0, alpha ~ 1: x_{t-1} = x_t - 0 * eps_hat = x_t.
        let mut s = DiffusionSchedule::<f32>::linear(200, 1e-4, 0.035).unwrap();
        // fabricate the degenerate step
        let t = 10;
        s.betas[t - 1] = 0.0;
        s.alphas[t - 1] = 1.0;
        let mut rng = derive_rng(1, "t", 0);
        let net = DenoiserNet::<f32>::new(4, 8, 16, 16, &mut rng);
        let x = Array4::<f32>::from_shape_fn((1, 3, 32, 32), |(_, c, i, j)| {
            0.01 * ((c + i + j) as f32)
        });
        let y = ddpm_reverse_step(&x.view(), t, &s, &net, None).unwrap();
        let max = tensor::max_abs_diff4(&x.view(), &y.view());
        assert_eq!(max, 0.0);
    }

    #[test]
    fn stochastic_reverse_is_reproducible_under_seed() {
        let s = DiffusionSchedule::<f32>::linear(200, 1e-4, 0.035).unwrap();
        let mut rng = derive_rng(2, "t", 0);
        let net = DenoiserNet::<f32>::new(4, 8, 16, 16, &mut rng);
        let x = Array4::<f32>::from_elem((1, 3, 32, 32), 0.3);
        let mut r1 = derive_rng(7, "rev", 0);
        let mut r2 = derive_rng(7, "rev", 0);
        let y1 = reverse_chain(&x.view(), 5, &s, &net, true, &mut r1).unwrap();
        let y2 = reverse_chain(&x.view(), 5, &s, &net, true, &mut r2).unwrap();
        assert_eq!(y1, y2);
    }

    #[test]
    fn input_gradient_matches_finite_differences_f64() {
        let mut rng = derive_rng(3, "t", 0);
        let net = DenoiserNet::<f64>::new(4, 8, 16, 16, &mut rng);
        let x = Array4::from_shape_fn((1, 3, 16, 16), |(_, c, i, j)| {
            0.2 * ((c * 5 + i * 3 + j) as f64 * 0.37).sin()
        });
        let ts = [7usize];
        // loss = sum(eps_hat^2)/2 so that dL/deps = eps_hat
        let (y, cache) = net.forward_data(&x.view(), &ts);
        let gx = net.backward_data(&cache, &y.view());
        let h = 1e-6;
        for idx in [(0, 0, 3, 4), (0, 2, 10, 15), (0, 1, 0, 0)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let lp: f64 = net.forward(&xp.view(), &ts).mapv(|v| v * v / 2.0).sum();
            let lm: f64 = net.forward(&xm.view(), &ts).mapv(|v| v * v / 2.0).sum();
            let fd = (lp - lm) / (2.0 * h);
            let rel = (fd - gx[idx]).abs() / fd.abs().max(gx[idx].abs()).max(1e-12);
            assert!(rel < 1e-6, "rel {rel}");
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences_f64() {
        let mut rng = derive_rng(4, "t", 0);
        let mut net = DenoiserNet::<f64>::new(4, 8, 16, 16, &mut rng);
        let x = Array4::from_shape_fn((2, 3, 16, 16), |(n, c, i, j)| {
            0.2 * ((n * 11 + c * 5 + i * 3 + j) as f64 * 0.29).cos()
        });
        let ts = [3usize, 120];
        let (y, cache) = net.forward_train(&x.view(), &ts);
        let mut grads = DenoiserGrads::zeros_like(&net);
        net.backward(&cache, &y.view(), &mut grads);
        let loss = |n: &DenoiserNet<f64>| n.forward(&x.view(), &ts).mapv(|v| v * v / 2.0).sum();
        let h = 1e-6;
        // a conv weight
        let orig = net.d1.w[[0, 1, 1, 1]];
        net.d1.w[[0, 1, 1, 1]] = orig + h;
        let lp = loss(&net);
        net.d1.w[[0, 1, 1, 1]] = orig - h;
        let lm = loss(&net);
        net.d1.w[[0, 1, 1, 1]] = orig;
        let fd = (lp - lm) / (2.0 * h);
        let got = grads.convs[4].0[[0, 1, 1, 1]];
        assert!((fd - got).abs() / fd.abs().max(1e-9) < 1e-5, "{fd} vs {got}");
        // a time-mlp weight (exercises the bias-injection path)
        let orig = net.t_b1.w[[2, 3]];
        net.t_b1.w[[2, 3]] = orig + h;
        let lp = loss(&net);
        net.t_b1.w[[2, 3]] = orig - h;
        let lm = loss(&net);
        net.t_b1.w[[2, 3]] = orig;
        let fd = (lp - lm) / (2.0 * h);
        let got = grads.t_b1.0[[2, 3]];
        assert!((fd - got).abs() / fd.abs().max(1e-9) < 1e-5, "{fd} vs {got}");
    }
}
