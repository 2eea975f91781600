//! The explained classifier: a small convolutional feature extractor and a
//! linear head. The head's weight matrix is public because the causal stage
//! projects the representation against its row space.

use crate::error::{Error, Result};
use crate::nn::{
    avg_pool2, avg_pool2_backward, global_avg_pool, global_avg_pool_backward, silu, silu_backward,
    softmax_rows, Adam, Conv2d, Linear, Scalar,
};
use crate::rng::derive_rng;
use crate::synthspur::LabeledSample;
use crate::tensor::{self, ImageTensor};
use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayView4, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Conv blocks (conv, silu, 2x2 avg-pool) followed by global average pooling
/// into a D-dim representation, plus a linear head.
#[derive(Debug, Clone)]
pub struct ClassifierNet<S: Scalar> {
    pub convs: Vec<Conv2d<S>>,
    pub head: Linear<S>,
}

/// Per-layer activation caches from a training-mode forward pass.
pub struct ClassifierCache<S: Scalar> {
    inputs: Vec<Array4<S>>,
    cols: Vec<Array2<S>>,
    preacts: Vec<Array4<S>>,
    feat_hw: (usize, usize),
    pub features: Array2<S>,
}

/// Activation caches sufficient for input gradients only.
pub struct ClassifierDataCache<S: Scalar> {
    in_shapes: Vec<(usize, usize, usize, usize)>,
    preacts: Vec<Array4<S>>,
    feat_hw: (usize, usize),
    pub features: Array2<S>,
}

#[derive(Debug, Clone)]
pub struct ClassifierGrads<S: Scalar> {
    pub convs: Vec<(Array4<S>, Array1<S>)>,
    pub head: (Array2<S>, Array1<S>),
}

impl<S: Scalar> ClassifierGrads<S> {
    pub fn zeros_like(net: &ClassifierNet<S>) -> Self {
        ClassifierGrads {
            convs: net
                .convs
                .iter()
                .map(|c| (Array4::zeros(c.w.dim()), Array1::zeros(c.b.len())))
                .collect(),
            head: (
                Array2::zeros(net.head.w.dim()),
                Array1::zeros(net.head.b.len()),
            ),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.convs.iter_mut().zip(&other.convs) {
            a.0 += &b.0;
            a.1 += &b.1;
        }
        self.head.0 += &other.head.0;
        self.head.1 += &other.head.1;
    }

    pub fn scale(&mut self, f: S) {
        for (gw, gb) in self.convs.iter_mut() {
            gw.mapv_inplace(|v| v * f);
            gb.mapv_inplace(|v| v * f);
        }
        self.head.0.mapv_inplace(|v| v * f);
        self.head.1.mapv_inplace(|v| v * f);
    }
}

impl<S: Scalar> ClassifierNet<S> {
    /// `channels` lists the output width of each block; input is RGB.
    pub fn new<R: Rng>(channels: &[usize], classes: usize, rng: &mut R) -> Self {
        let mut convs = Vec::new();
        let mut cin = 3;
        for &cout in channels {
            convs.push(Conv2d::new(cin, cout, 3, 1, 1, rng));
            cin = cout;
        }
        let head = Linear::new(cin, classes, rng);
        ClassifierNet { convs, head }
    }

    pub fn feature_dim(&self) -> usize {
        self.head.w.dim().1
    }

    pub fn classes(&self) -> usize {
        self.head.w.dim().0
    }

    /// Representation φ(x): (N, D). Input is model-range [-1,1].
    pub fn features(&self, x: &ArrayView4<S>) -> Array2<S> {
        let mut h = x.to_owned();
        for conv in &self.convs {
            let pre = conv.forward(&h.view());
            h = avg_pool2(&silu(&pre.view()).view());
        }
        global_avg_pool(&h.view())
    }

    pub fn logits(&self, x: &ArrayView4<S>) -> Array2<S> {
        self.head.forward(&self.features(x).view())
    }

    pub fn forward_train(&self, x: &ArrayView4<S>) -> (Array2<S>, ClassifierCache<S>) {
        let mut inputs = Vec::new();
        let mut cols = Vec::new();
        let mut preacts = Vec::new();
        let mut h = x.to_owned();
        for conv in &self.convs {
            inputs.push(h.clone());
            let (pre, c) = conv.forward_train(&h.view());
            cols.push(c);
            h = avg_pool2(&silu(&pre.view()).view());
            preacts.push(pre);
        }
        let (_, _, fh, fw) = h.dim();
        let features = global_avg_pool(&h.view());
        let logits = self.head.forward(&features.view());
        (
            logits,
            ClassifierCache {
                inputs,
                cols,
                preacts,
                feat_hw: (fh, fw),
                features,
            },
        )
    }

    pub fn forward_data(&self, x: &ArrayView4<S>) -> (Array2<S>, ClassifierDataCache<S>) {
        let mut in_shapes = Vec::new();
        let mut preacts = Vec::new();
        let mut h = x.to_owned();
        for conv in &self.convs {
            in_shapes.push(h.dim());
            let pre = conv.forward(&h.view());
            h = avg_pool2(&silu(&pre.view()).view());
            preacts.push(pre);
        }
        let (_, _, fh, fw) = h.dim();
        let features = global_avg_pool(&h.view());
        let logits = self.head.forward(&features.view());
        (
            logits,
            ClassifierDataCache {
                in_shapes,
                preacts,
                feat_hw: (fh, fw),
                features,
            },
        )
    }

    /// Full backward pass: accumulates parameter grads, returns input grad.
    pub fn backward(
        &self,
        cache: &ClassifierCache<S>,
        glogits: &ArrayView2<S>,
        grads: &mut ClassifierGrads<S>,
    ) -> Array4<S> {
        let gfeat = self.head.backward(
            &cache.features.view(),
            glogits,
            &mut grads.head.0,
            &mut grads.head.1,
        );
        let mut g = global_avg_pool_backward(&gfeat.view(), cache.feat_hw);
        for i in (0..self.convs.len()).rev() {
            let gact = avg_pool2_backward(&g.view());
            let gpre = silu_backward(&cache.preacts[i].view(), &gact.view());
            let (gw, gb) = &mut grads.convs[i];
            g = self.convs[i].backward(&cache.cols[i], &gpre.view(), cache.inputs[i].dim(), gw, gb);
        }
        g
    }

    /// Input gradient only (frozen parameters).
    pub fn backward_data(
        &self,
        cache: &ClassifierDataCache<S>,
        glogits: &ArrayView2<S>,
    ) -> Array4<S> {
        let gfeat = self.head.backward_data(glogits);
        self.backward_data_from_features(cache, &gfeat.view())
    }

    /// Input gradient from a gradient on the representation φ(x).
    pub fn backward_data_from_features(
        &self,
        cache: &ClassifierDataCache<S>,
        gfeat: &ArrayView2<S>,
    ) -> Array4<S> {
        let mut g = global_avg_pool_backward(gfeat, cache.feat_hw);
        for i in (0..self.convs.len()).rev() {
            let gact = avg_pool2_backward(&g.view());
            let gpre = silu_backward(&cache.preacts[i].view(), &gact.view());
            g = self.convs[i].backward_data(&gpre.view(), cache.in_shapes[i]);
        }
        g
    }

    pub fn apply_grads(&mut self, grads: &ClassifierGrads<S>, opt: &mut Adam<S>) {
        opt.begin_step();
        for (i, conv) in self.convs.iter_mut().enumerate() {
            opt.update(&format!("conv{i}.w"), &mut conv.w, &grads.convs[i].0, true);
            opt.update(&format!("conv{i}.b"), &mut conv.b, &grads.convs[i].1, false);
        }
        opt.update("head.w", &mut self.head.w, &grads.head.0, true);
        opt.update("head.b", &mut self.head.b, &grads.head.1, false);
    }
}

/// Mean cross-entropy and per-sample probability-space logit gradients
/// (already divided by N).
pub fn softmax_ce_loss_grad<S: Scalar>(
    logits: &ArrayView2<S>,
    targets: &[usize],
) -> (f64, Array2<S>) {
    let n = targets.len();
    let p = softmax_rows(logits);
    let mut loss = 0.0f64;
    let mut g = p.clone();
    let inv_n = S::from_f64(1.0 / n as f64);
    for (i, &y) in targets.iter().enumerate() {
        loss -= p[[i, y]].to_f64().max(1e-300).ln();
        g[[i, y]] = g[[i, y]] - S::one();
    }
    g.mapv_inplace(|v| v * inv_n);
    (loss / n as f64, g)
}

// ---------------------------------------------------------------------------
// Trained classifier wrapper
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClassifierTrainConfig {
    pub channels: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            channels: vec![16, 32, 64, 64],
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

/// Trained, immutable classifier `f`.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub net: ClassifierNet<f32>,
    pub config: ClassifierTrainConfig,
    pub image_shape: (usize, usize, usize),
    pub train_curve: Vec<EpochStats>,
}

impl Classifier {
    fn check_shape(&self, x: &ImageTensor) -> Result<()> {
        if x.dim() != self.image_shape {
            return Err(Error::input(format!(
                "image shape {:?} does not match classifier input {:?}",
                x.dim(),
                self.image_shape
            )));
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.net.classes()
    }

    pub fn feature_dim(&self) -> usize {
        self.net.feature_dim()
    }

    /// Logits for one [0,1] image.
    pub fn classify(&self, x: &ImageTensor) -> Result<Vec<f32>> {
        self.check_shape(x)?;
        let xm = tensor::single_batch(&tensor::to_model_range(&x.view()).view());
        let z = self.net.logits(&xm.view());
        Ok(z.row(0).to_vec())
    }

    pub fn predict(&self, x: &ImageTensor) -> Result<usize> {
        Ok(argmax(&self.classify(x)?))
    }

    pub fn probs_f64(&self, x: &ImageTensor) -> Result<Vec<f64>> {
        let z = self.classify(x)?;
        Ok(softmax_f64(&z))
    }

    /// Logits for a batch of [0,1] images, chunked to bound memory.
    pub fn classify_batch(&self, xs01: &[ImageTensor]) -> Result<Array2<f32>> {
        for x in xs01 {
            self.check_shape(x)?;
        }
        let k = self.classes();
        let mut out = Array2::zeros((xs01.len(), k));
        let chunk = 64;
        let results: Vec<(usize, Array2<f32>)> = xs01
            .par_chunks(chunk)
            .enumerate()
            .map(|(ci, imgs)| {
                let xm: Vec<ImageTensor> = imgs
                    .iter()
                    .map(|x| tensor::to_model_range(&x.view()))
                    .collect();
                let batch = tensor::batch_of(&xm);
                (ci, self.net.logits(&batch.view()))
            })
            .collect();
        for (ci, z) in results {
            out.slice_mut(ndarray::s![ci * chunk..ci * chunk + z.dim().0, ..])
                .assign(&z);
        }
        Ok(out)
    }

    /// Representation φ(x) of one [0,1] image.
    pub fn representation(&self, x: &ImageTensor) -> Result<Array1<f32>> {
        self.check_shape(x)?;
        let xm = tensor::single_batch(&tensor::to_model_range(&x.view()).view());
        Ok(self.net.features(&xm.view()).row(0).to_owned())
    }
}

pub fn argmax(v: &[f32]) -> usize {
    v.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap()
}

pub fn softmax_f64(z: &[f32]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = z.iter().map(|&v| ((v as f64) - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Convert samples to a model-range NCHW tensor and label vector.
pub fn samples_to_tensors(samples: &[LabeledSample]) -> (Array4<f32>, Vec<usize>) {
    let imgs: Vec<ImageTensor> = samples
        .iter()
        .map(|s| tensor::to_model_range(&s.image.view()))
        .collect();
    (tensor::batch_of(&imgs), samples.iter().map(|s| s.label).collect())
}

/// Accuracy of `net` on model-range inputs.
pub fn accuracy(net: &ClassifierNet<f32>, xs: &Array4<f32>, ys: &[usize]) -> f64 {
    let n = ys.len();
    let chunk = 128;
    let hits: usize = (0..n)
        .step_by(chunk)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&start| {
            let end = (start + chunk).min(n);
            let z = net.logits(&xs.slice(ndarray::s![start..end, .., .., ..]));
            (start..end)
                .filter(|&i| {
                    let row = z.row(i - start);
                    let pred = row
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .unwrap()
                        .0;
                    pred == ys[i]
                })
                .count()
        })
        .sum();
    hits as f64 / n as f64
}

/// Fit a classifier net on pre-converted tensors. Used for the explained
/// classifier and for the attribute probes.
pub fn fit_classifier_net(
    xs: &Array4<f32>,
    ys: &[usize],
    val_xs: &Array4<f32>,
    val_ys: &[usize],
    classes: usize,
    cfg: &ClassifierTrainConfig,
) -> Result<(ClassifierNet<f32>, Vec<EpochStats>)> {
    let mut rng = derive_rng(cfg.seed, "classifier-init", 0);
    let mut net = ClassifierNet::<f32>::new(&cfg.channels, classes, &mut rng);
    let mut opt = Adam::<f32>::new(cfg.learning_rate, cfg.weight_decay);
    let n = ys.len();
    let mut curve = Vec::new();
    const MICRO: usize = 16;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut erng = derive_rng(cfg.seed, "classifier-epoch", epoch as u64);
        for i in (1..n).rev() {
            let j = erng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let micro_results: Vec<(ClassifierGrads<f32>, f64)> = batch
                .par_chunks(MICRO)
                .map(|micro| {
                    let imgs: Vec<_> = micro
                        .iter()
                        .map(|&i| xs.index_axis(Axis(0), i).to_owned())
                        .collect();
                    let mut mb = Array4::zeros((imgs.len(), imgs[0].dim().0, imgs[0].dim().1, imgs[0].dim().2));
                    for (k, img) in imgs.iter().enumerate() {
                        mb.index_axis_mut(Axis(0), k).assign(img);
                    }
                    let targets: Vec<usize> = micro.iter().map(|&i| ys[i]).collect();
                    let (logits, cache) = net.forward_train(&mb.view());
                    let (loss, glogits) = softmax_ce_loss_grad(&logits.view(), &targets);
                    let mut grads = ClassifierGrads::zeros_like(&net);
                    net.backward(&cache, &glogits.view(), &mut grads);
                    // normalize micro grads (already /micro-n) to batch scale
                    grads.scale(micro.len() as f32 / batch.len() as f32);
                    (grads, loss * micro.len() as f64)
                })
                .collect();
            let mut total = ClassifierGrads::zeros_like(&net);
            let mut loss_sum = 0.0;
            for (g, l) in &micro_results {
                total.add_assign(g);
                loss_sum += l;
            }
            let batch_loss = loss_sum / batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    msg: format!("non-finite loss {batch_loss}"),
                });
            }
            net.apply_grads(&total, &mut opt);
            epoch_loss += batch_loss;
            batches += 1;
        }
        let val_acc = accuracy(&net, val_xs, val_ys);
        curve.push(EpochStats {
            epoch,
            train_loss: epoch_loss / batches.max(1) as f64,
            val_accuracy: val_acc,
        });
    }
    Ok((net, curve))
}

/// Train the explained classifier `f` on labeled samples.
pub fn train_classifier(
    train: &[LabeledSample],
    val: &[LabeledSample],
    cfg: &ClassifierTrainConfig,
) -> Result<Classifier> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::input("train and val sets must be non-empty"));
    }
    let classes = train.iter().map(|s| s.label).max().unwrap() + 1;
    let shape = train[0].image.dim();
    if shape.1 % 16 != 0 || shape.2 % 16 != 0 {
        return Err(Error::config(
            "image_size",
            "classifier blocks require dimensions divisible by 16",
        ));
    }
    let (xs, ys) = samples_to_tensors(train);
    let (vxs, vys) = samples_to_tensors(val);
    let (net, curve) = fit_classifier_net(&xs, &ys, &vxs, &vys, classes, cfg)?;
    Ok(Classifier {
        net,
        config: cfg.clone(),
        image_shape: shape,
        train_curve: curve,
    })
}
