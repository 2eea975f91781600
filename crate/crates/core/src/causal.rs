//! Causal/spurious decomposition of the classifier's representation.
//!
//! The causal subspace is the row space of the trained linear head: it is
//! exactly what the final decision reads. Its orthogonal complement is
//! representation content invisible to the head yet present in φ(x); an
//! auxiliary head `g` trained to predict the label from that complement
//! defines the spurious penalty used during steering.

use crate::error::{Error, Result};
use crate::models::classifier::{Classifier, ClassifierDataCache, ClassifierNet};
use crate::nn::{silu2, silu2_backward, Adam, Linear, Scalar};
use crate::rng::derive_rng;
use crate::synthspur::LabeledSample;
use crate::tensor::{self, ImageTensor};
use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayView4};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Orthonormal basis of the causal subspace; P_C = B Bᵀ, P_S = I - P_C.
/// The basis is kept in f64 so the projector identities hold to far better
/// than the contracted 1e-6.
#[derive(Debug, Clone)]
pub struct FactorProjection {
    /// (D, r), orthonormal columns.
    pub basis: Array2<f64>,
}

impl FactorProjection {
    /// Orthonormalize the rows of the head weight matrix (modified
    /// Gram-Schmidt). Near-dependent rows are dropped with a warning.
    pub fn fit(classifier: &Classifier) -> Result<Self> {
        let w = &classifier.net.head.w; // (K, D)
        let (k, d) = w.dim();
        let mut basis: Vec<Array1<f64>> = Vec::new();
        for i in 0..k {
            let mut v: Array1<f64> = w.row(i).mapv(|x| x as f64);
            let norm0 = v.dot(&v).sqrt();
            for b in &basis {
                let proj = v.dot(b);
                v = &v - &(b * proj);
            }
            let norm = v.dot(&v).sqrt();
            if norm <= 1e-9 * norm0.max(1e-30) || norm == 0.0 {
                log::warn!(
                    "head row {i} is linearly dependent; causal basis reduced to rank {}",
                    basis.len()
                );
                continue;
            }
            basis.push(v / norm);
        }
        if basis.is_empty() {
            return Err(Error::Numerical(
                "classifier head has rank zero; no causal subspace".to_string(),
            ));
        }
        let r = basis.len();
        let mut b = Array2::<f64>::zeros((d, r));
        for (j, v) in basis.iter().enumerate() {
            b.column_mut(j).assign(v);
        }
        Ok(FactorProjection { basis: b })
    }

    pub fn dim(&self) -> usize {
        self.basis.dim().0
    }

    pub fn rank(&self) -> usize {
        self.basis.dim().1
    }

    /// Dense P_C = B Bᵀ.
    pub fn p_causal(&self) -> Array2<f64> {
        self.basis.dot(&self.basis.t())
    }

    /// Dense P_S = I - B Bᵀ.
    pub fn p_spurious(&self) -> Array2<f64> {
        let mut p = -self.p_causal();
        for i in 0..self.dim() {
            p[[i, i]] += 1.0;
        }
        p
    }

    /// Decompose r into (causal, spurious) parts with c + s = r exactly.
    pub fn extract_factors(&self, r: &ArrayView1<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
        if r.len() != self.dim() {
            return Err(Error::input(format!(
                "representation dim {} does not match projection dim {}",
                r.len(),
                self.dim()
            )));
        }
        let coeffs = self.basis.t().dot(r);
        let c = self.basis.dot(&coeffs);
        let s = r - &c;
        Ok((c, s))
    }

    /// Spurious parts of a batch of representations: S = R - (R B) Bᵀ.
    pub fn spurious_batch_f32(&self, feats: &ArrayView2<f32>) -> Array2<f32> {
        let b32 = self.basis_f32();
        let coeffs = feats.dot(&b32);
        let proj = coeffs.dot(&b32.t());
        feats - &proj
    }

    pub fn basis_f32(&self) -> Array2<f32> {
        self.basis.mapv(|v| v as f32)
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in self.basis.iter() {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Serialized form of a projection.
#[derive(Debug, Serialize, Deserialize)]
pub struct ProjectionCheckpoint {
    pub dim: usize,
    pub rank: usize,
    pub data: Vec<f64>,
    pub checksum: String,
}

impl ProjectionCheckpoint {
    pub fn from_model(p: &FactorProjection) -> Self {
        ProjectionCheckpoint {
            dim: p.dim(),
            rank: p.rank(),
            data: p.basis.iter().copied().collect(),
            checksum: p.checksum(),
        }
    }

    pub fn into_model(self) -> Result<FactorProjection> {
        let basis = Array2::from_shape_vec((self.dim, self.rank), self.data)
            .map_err(|e| Error::input(e.to_string()))?;
        let p = FactorProjection { basis };
        if p.checksum() != self.checksum {
            return Err(Error::input("projection checksum mismatch"));
        }
        Ok(p)
    }
}

// ---------------------------------------------------------------------------
// Spurious head g
// ---------------------------------------------------------------------------

/// g: spurious vector -> label logits. Linear by default; one hidden layer
/// when configured.
#[derive(Debug, Clone)]
pub struct SpuriousHeadNet<S: Scalar> {
    pub hidden: Option<Linear<S>>,
    pub out: Linear<S>,
}

impl<S: Scalar> SpuriousHeadNet<S> {
    pub fn new<R: Rng>(din: usize, classes: usize, hidden: Option<usize>, rng: &mut R) -> Self {
        match hidden {
            None => SpuriousHeadNet {
                hidden: None,
                out: Linear::new(din, classes, rng),
            },
            Some(h) => SpuriousHeadNet {
                hidden: Some(Linear::new(din, h, rng)),
                out: Linear::new(h, classes, rng),
            },
        }
    }

    pub fn in_dim(&self) -> usize {
        self.hidden
            .as_ref()
            .map(|l| l.w.dim().1)
            .unwrap_or_else(|| self.out.w.dim().1)
    }

    pub fn classes(&self) -> usize {
        self.out.w.dim().0
    }

    pub fn forward(&self, s: &ArrayView2<S>) -> Array2<S> {
        match &self.hidden {
            None => self.out.forward(s),
            Some(h) => {
                let pre = h.forward(s);
                self.out.forward(&silu2(&pre.view()).view())
            }
        }
    }

    /// Input gradient with frozen parameters.
    pub fn backward_data(&self, s: &ArrayView2<S>, gout: &ArrayView2<S>) -> Array2<S> {
        match &self.hidden {
            None => self.out.backward_data(gout),
            Some(h) => {
                let pre = h.forward(s);
                let gh = self.out.backward_data(gout);
                let gpre = silu2_backward(&pre.view(), &gh.view());
                h.backward_data(&gpre.view())
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SpuriousHeadConfig {
    pub hidden: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for SpuriousHeadConfig {
    fn default() -> Self {
        SpuriousHeadConfig {
            hidden: None,
            epochs: 60,
            batch_size: 128,
            learning_rate: 1e-2,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

/// Trained auxiliary classifier with its training diagnostics.
#[derive(Debug, Clone)]
pub struct SpuriousHead {
    pub net: SpuriousHeadNet<f32>,
    pub config: SpuriousHeadConfig,
    pub train_accuracy: f64,
    pub chance: f64,
    /// True when the spurious channel carries no label signal; the steering
    /// penalty is then effectively inert.
    pub at_chance: bool,
}

/// Representations φ(x) for a sample set, batched.
pub fn features_of(classifier: &Classifier, samples: &[LabeledSample]) -> Array2<f32> {
    let n = samples.len();
    let d = classifier.feature_dim();
    let mut feats = Array2::zeros((n, d));
    let chunk = 128;
    for start in (0..n).step_by(chunk) {
        let end = (start + chunk).min(n);
        let imgs: Vec<ImageTensor> = samples[start..end]
            .iter()
            .map(|s| tensor::to_model_range(&s.image.view()))
            .collect();
        let batch = tensor::batch_of(&imgs);
        let f = classifier.net.features(&batch.view());
        feats.slice_mut(ndarray::s![start..end, ..]).assign(&f);
    }
    feats
}

/// Train g to predict the label from s = P_S φ(x) on the given split.
pub fn train_spurious_head(
    dataset: &[LabeledSample],
    classifier: &Classifier,
    projection: &FactorProjection,
    cfg: &SpuriousHeadConfig,
) -> Result<SpuriousHead> {
    if dataset.is_empty() {
        return Err(Error::input("dataset must be non-empty"));
    }
    if projection.dim() != classifier.feature_dim() {
        return Err(Error::input(format!(
            "projection dim {} does not match classifier feature dim {}",
            projection.dim(),
            classifier.feature_dim()
        )));
    }
    let feats = features_of(classifier, dataset);
    let svecs = projection.spurious_batch_f32(&feats.view());
    let labels: Vec<usize> = dataset.iter().map(|s| s.label).collect();
    let classes = classifier.classes();
    let mut rng = derive_rng(cfg.seed, "g-init", 0);
    let mut net = SpuriousHeadNet::<f32>::new(projection.dim(), classes, cfg.hidden, &mut rng);
    let mut opt = Adam::<f32>::new(cfg.learning_rate, cfg.weight_decay);
    let n = labels.len();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut erng = derive_rng(cfg.seed, "g-epoch", epoch as u64);
        for i in (1..n).rev() {
            let j = erng.gen_range(0..=i);
            order.swap(i, j);
        }
        for batch in order.chunks(cfg.batch_size) {
            let mut sb = Array2::zeros((batch.len(), projection.dim()));
            for (k, &i) in batch.iter().enumerate() {
                sb.row_mut(k).assign(&svecs.row(i));
            }
            let targets: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (loss, glogits) = {
                let z = net.forward(&sb.view());
                crate::models::classifier::softmax_ce_loss_grad(&z.view(), &targets)
            };
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    msg: format!("non-finite spurious-head loss {loss}"),
                });
            }
            opt.begin_step();
            match &mut net.hidden {
                None => {
                    let mut gw = Array2::zeros(net.out.w.dim());
                    let mut gb = Array1::zeros(net.out.b.len());
                    net.out
                        .backward(&sb.view(), &glogits.view(), &mut gw, &mut gb);
                    opt.update("out.w", &mut net.out.w, &gw, true);
                    opt.update("out.b", &mut net.out.b, &gb, false);
                }
                Some(hid) => {
                    let pre = hid.forward(&sb.view());
                    let act = silu2(&pre.view());
                    let mut gw2 = Array2::zeros(net.out.w.dim());
                    let mut gb2 = Array1::zeros(net.out.b.len());
                    let gact = net
                        .out
                        .backward(&act.view(), &glogits.view(), &mut gw2, &mut gb2);
                    let gpre = silu2_backward(&pre.view(), &gact.view());
                    let mut gw1 = Array2::zeros(hid.w.dim());
                    let mut gb1 = Array1::zeros(hid.b.len());
                    hid.backward(&sb.view(), &gpre.view(), &mut gw1, &mut gb1);
                    opt.update("out.w", &mut net.out.w, &gw2, true);
                    opt.update("out.b", &mut net.out.b, &gb2, false);
                    opt.update("hidden.w", &mut hid.w, &gw1, true);
                    opt.update("hidden.b", &mut hid.b, &gb1, false);
                }
            }
        }
    }
    // accuracy on the training split
    let z = net.forward(&svecs.view());
    let hits = (0..n)
        .filter(|&i| {
            z.row(i)
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
                == labels[i]
        })
        .count();
    let train_accuracy = hits as f64 / n as f64;
    let chance = 1.0 / classes as f64;
    let at_chance = train_accuracy <= chance + 0.02;
    if at_chance {
        log::warn!(
            "spurious channel empty: g accuracy {train_accuracy:.3} vs chance {chance:.3}; steering penalty will be inert"
        );
    }
    Ok(SpuriousHead {
        net,
        config: cfg.clone(),
        train_accuracy,
        chance,
        at_chance,
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SpuriousHeadCheckpoint {
    pub config: SpuriousHeadConfig,
    pub in_dim: usize,
    pub classes: usize,
    pub train_accuracy: f64,
    pub chance: f64,
    pub at_chance: bool,
    pub params: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl SpuriousHeadCheckpoint {
    pub fn from_model(h: &SpuriousHead) -> Self {
        let mut params = Vec::new();
        if let Some(hid) = &h.net.hidden {
            params.push((
                "hidden.w".to_string(),
                hid.w.shape().to_vec(),
                hid.w.iter().copied().collect(),
            ));
            params.push(("hidden.b".to_string(), vec![hid.b.len()], hid.b.to_vec()));
        }
        params.push((
            "out.w".to_string(),
            h.net.out.w.shape().to_vec(),
            h.net.out.w.iter().copied().collect(),
        ));
        params.push((
            "out.b".to_string(),
            vec![h.net.out.b.len()],
            h.net.out.b.to_vec(),
        ));
        SpuriousHeadCheckpoint {
            config: h.config.clone(),
            in_dim: h.net.in_dim(),
            classes: h.net.classes(),
            train_accuracy: h.train_accuracy,
            chance: h.chance,
            at_chance: h.at_chance,
            params,
        }
    }

    pub fn into_model(self) -> Result<SpuriousHead> {
        let mut rng = derive_rng(0, "load", 0);
        let mut net =
            SpuriousHeadNet::<f32>::new(self.in_dim, self.classes, self.config.hidden, &mut rng);
        for (name, shape, data) in &self.params {
            let target: &mut Linear<f32> = match name.split('.').next().unwrap() {
                "hidden" => net.hidden.as_mut().ok_or_else(|| {
                    Error::input("checkpoint has hidden layer but config does not")
                })?,
                _ => &mut net.out,
            };
            if name.ends_with(".w") {
                if shape != target.w.shape() {
                    return Err(Error::input(format!("shape mismatch for {name}")));
                }
                target.w.as_slice_mut().unwrap().copy_from_slice(data);
            } else {
                target.b.as_slice_mut().unwrap().copy_from_slice(data);
            }
        }
        Ok(SpuriousHead {
            net,
            config: self.config,
            train_accuracy: self.train_accuracy,
            chance: self.chance,
            at_chance: self.at_chance,
        })
    }
}

// ---------------------------------------------------------------------------
// The assembled spurious channel
// ---------------------------------------------------------------------------

/// Generic core: φ -> P_S -> g, differentiable end-to-end.
pub struct SpuriousChannelCore<'a, S: Scalar> {
    pub extractor: &'a ClassifierNet<S>,
    pub basis: Array2<S>,
    pub head: &'a SpuriousHeadNet<S>,
}

pub struct ChannelCache<S: Scalar> {
    clf: ClassifierDataCache<S>,
    svecs: Array2<S>,
}

impl<'a, S: Scalar> SpuriousChannelCore<'a, S> {
    fn check(&self) -> Result<()> {
        if self.head.in_dim() != self.basis.dim().0 {
            return Err(Error::input(format!(
                "g input dim {} does not match representation dim {}",
                self.head.in_dim(),
                self.basis.dim().0
            )));
        }
        Ok(())
    }

    /// z = g(P_S φ(x)) for a [0,1] batch, with caches for backward.
    pub fn logits_with_cache(&self, xs01: &ArrayView4<S>) -> Result<(Array2<S>, ChannelCache<S>)> {
        self.check()?;
        let xm = xs01.mapv(|v| v + v - S::one());
        let (_, clf) = self.extractor.forward_data(&xm.view());
        let feats = clf.features.clone();
        let coeffs = feats.dot(&self.basis);
        let proj = coeffs.dot(&self.basis.t());
        let svecs = &feats - &proj;
        let z = self.head.forward(&svecs.view());
        Ok((z, ChannelCache { clf, svecs }))
    }

    pub fn logits(&self, xs01: &ArrayView4<S>) -> Result<Array2<S>> {
        Ok(self.logits_with_cache(xs01)?.0)
    }

    /// Pull a gradient on z back to the [0,1] input.
    pub fn backward_to_input(&self, cache: &ChannelCache<S>, dz: &ArrayView2<S>) -> Array4<S> {
        let ds = self.head.backward_data(&cache.svecs.view(), dz);
        // P_S is symmetric: dfeat = ds - (ds B) Bᵀ
        let coeffs = ds.dot(&self.basis);
        let proj = coeffs.dot(&self.basis.t());
        let dfeat = &ds - &proj;
        let mut g = self
            .extractor
            .backward_data_from_features(&cache.clf, &dfeat.view());
        g.mapv_inplace(|v| v + v);
        g
    }
}

/// f32 channel over trained artifacts.
pub struct SpuriousChannel<'a> {
    pub classifier: &'a Classifier,
    pub projection: &'a FactorProjection,
    pub head: &'a SpuriousHead,
}

impl<'a> SpuriousChannel<'a> {
    pub fn core(&self) -> SpuriousChannelCore<'_, f32> {
        SpuriousChannelCore {
            extractor: &self.classifier.net,
            basis: self.projection.basis_f32(),
            head: &self.head.net,
        }
    }

    /// z = g(P_S φ(x)) for one [0,1] image.
    pub fn spurious_logits(&self, x: &ImageTensor) -> Result<Vec<f32>> {
        let xb = tensor::single_batch(&x.view());
        let z = self.core().logits(&xb.view())?;
        Ok(z.row(0).to_vec())
    }

    /// Anchor logits for a batch (computed once, before steering).
    pub fn anchors(&self, xs01: &Array4<f32>) -> Result<Array2<f32>> {
        self.core().logits(&xs01.view())
    }
}

/// Free-function form mirroring the operation signature.
pub fn spurious_logits(
    classifier: &Classifier,
    projection: &FactorProjection,
    head: &SpuriousHead,
    x: &ImageTensor,
) -> Result<Vec<f32>> {
    SpuriousChannel {
        classifier,
        projection,
        head,
    }
    .spurious_logits(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::classifier::{train_classifier, ClassifierTrainConfig};
    use crate::synthspur::{generate_dataset, FactorSpec};

    fn tiny_classifier(seed: u64) -> Classifier {
        let data = generate_dataset(&FactorSpec::default(), 48, seed).unwrap();
        let cfg = ClassifierTrainConfig {
            epochs: 1,
            channels: vec![4, 4, 4, 8],
            seed,
            ..Default::default()
        };
        train_classifier(&data[..40], &data[40..], &cfg).unwrap()
    }

    /// Projector built through a different route: P = Wᵀ(WWᵀ)⁻¹W via
    /// nalgebra, valid for full-rank W.
    fn oracle_projector(w: &ndarray::Array2<f32>) -> Array2<f64> {
        let (k, d) = w.dim();
        let wm = nalgebra::DMatrix::<f64>::from_fn(k, d, |i, j| w[[i, j]] as f64);
        let gram = &wm * wm.transpose();
        let inv = gram.try_inverse().expect("full-rank head");
        let p = wm.transpose() * inv * wm;
        Array2::from_shape_fn((d, d), |(i, j)| p[(i, j)])
    }

    #[test]
    fn projectors_satisfy_idempotence_orthogonality_completeness() {
        let clf = tiny_classifier(41);
        let proj = FactorProjection::fit(&clf).unwrap();
        let d = proj.dim();
        assert!(proj.rank() <= 2);
        let pc = proj.p_causal();
        let ps = proj.p_spurious();
        let id = Array2::<f64>::eye(d);
        let err = |m: &Array2<f64>| m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(err(&(&pc.dot(&pc) - &pc)) < 1e-6);
        assert!(err(&(&ps.dot(&ps) - &ps)) < 1e-6);
        assert!(err(&pc.dot(&ps)) < 1e-6);
        assert!(err(&(&(&pc + &ps) - &id)) < 1e-6);
        // rank of P_S is D - rank(W)
        let trace: f64 = (0..d).map(|i| ps[[i, i]]).sum();
        assert!((trace - (d - proj.rank()) as f64).abs() < 1e-6);
    }

    #[test]
    fn extraction_matches_independent_oracle() {
        let clf = tiny_classifier(42);
        let proj = FactorProjection::fit(&clf).unwrap();
        let p_oracle = oracle_projector(&clf.net.head.w);
        let d = proj.dim();
        let mut rng = derive_rng(7, "r", 0);
        for _ in 0..5 {
            let r = Array1::from_shape_simple_fn(d, || rng.gen_range(-1.0..1.0));
            let (c, s) = proj.extract_factors(&r.view()).unwrap();
            let c_oracle = p_oracle.dot(&r);
            let max = (&c - &c_oracle).iter().fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(max < 1e-6, "oracle mismatch {max}");
            // completeness and orthogonality
            let recon = &c + &s;
            assert!((&recon - &r).iter().all(|v| v.abs() < 1e-12));
            let dot = c.dot(&s).abs();
            let norm2 = r.dot(&r);
            assert!(dot <= 1e-6 * norm2.max(1e-12));
        }
    }

    #[test]
    fn extract_edge_cases() {
        let clf = tiny_classifier(43);
        let proj = FactorProjection::fit(&clf).unwrap();
        let d = proj.dim();
        // r = 0 -> (0, 0)
        let z = Array1::<f64>::zeros(d);
        let (c, s) = proj.extract_factors(&z.view()).unwrap();
        assert!(c.iter().all(|&v| v == 0.0) && s.iter().all(|&v| v == 0.0));
        // r in the head row space -> s = 0
        let r: Array1<f64> = clf.net.head.w.row(0).mapv(|x| x as f64);
        let (c, s) = proj.extract_factors(&r.view()).unwrap();
        let snorm = s.dot(&s).sqrt();
        assert!(snorm < 1e-6 * r.dot(&r).sqrt().max(1e-12), "snorm {snorm}");
        assert!((&c - &r).iter().all(|v| v.abs() < 1e-6));
        // wrong length -> input error
        let bad = Array1::<f64>::zeros(d + 1);
        assert!(matches!(
            proj.extract_factors(&bad.view()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn spurious_logits_shape_and_dim_mismatch() {
        let clf = tiny_classifier(44);
        let proj = FactorProjection::fit(&clf).unwrap();
        let data = generate_dataset(&FactorSpec::default(), 64, 45).unwrap();
        let head = train_spurious_head(
            &data,
            &clf,
            &proj,
            &SpuriousHeadConfig {
                epochs: 2,
                ..Default::default()
            },
        )
        .unwrap();
        let z = spurious_logits(&clf, &proj, &head, &data[0].image).unwrap();
        assert_eq!(z.len(), 2);
        // mismatched g
        let mut rng = derive_rng(0, "x", 0);
        let bad_head = SpuriousHead {
            net: SpuriousHeadNet::<f32>::new(proj.dim() + 3, 2, None, &mut rng),
            config: SpuriousHeadConfig::default(),
            train_accuracy: 0.0,
            chance: 0.5,
            at_chance: true,
        };
        assert!(matches!(
            spurious_logits(&clf, &proj, &bad_head, &data[0].image),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn channel_gradient_matches_finite_differences_f64() {
        let mut rng = derive_rng(46, "t", 0);
        let cnet = ClassifierNet::<f64>::new(&[4, 4, 4, 8], 2, &mut rng);
        let head = SpuriousHeadNet::<f64>::new(8, 2, None, &mut rng);
        let mut b = Array2::<f64>::zeros((8, 1));
        b[[0, 0]] = 0.6;
        b[[3, 0]] = 0.8;
        let channel = SpuriousChannelCore {
            extractor: &cnet,
            basis: b,
            head: &head,
        };
        let x = Array4::from_shape_fn((1, 3, 32, 32), |(_, c, i, j)| {
            0.5 + 0.2 * ((c * 5 + i * 2 + j) as f64 * 0.17).sin()
        });
        // scalar objective: z_0
        let (z, cache) = channel.logits_with_cache(&x.view()).unwrap();
        let mut dz = Array2::<f64>::zeros(z.dim());
        dz[[0, 0]] = 1.0;
        let gx = channel.backward_to_input(&cache, &dz.view());
        let h = 1e-5;
        for idx in [(0, 0, 3, 4), (0, 2, 29, 18)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let zp = channel.logits(&xp.view()).unwrap()[[0, 0]];
            let zm = channel.logits(&xm.view()).unwrap()[[0, 0]];
            let fd = (zp - zm) / (2.0 * h);
            let rel = (fd - gx[idx]).abs() / fd.abs().max(gx[idx].abs()).max(1e-12);
            assert!(rel < 1e-4, "rel {rel}");
        }
    }

    #[test]
    fn head_checkpoint_roundtrip() {
        let clf = tiny_classifier(48);
        let proj = FactorProjection::fit(&clf).unwrap();
        let data = generate_dataset(&FactorSpec::default(), 32, 49).unwrap();
        let head = train_spurious_head(
            &data,
            &clf,
            &proj,
            &SpuriousHeadConfig {
                epochs: 1,
                ..Default::default()
            },
        )
        .unwrap();
        let cp = SpuriousHeadCheckpoint::from_model(&head);
        let back =
            serde_json::from_str::<SpuriousHeadCheckpoint>(&serde_json::to_string(&cp).unwrap())
                .unwrap()
                .into_model()
                .unwrap();
        let z1 = spurious_logits(&clf, &proj, &head, &data[0].image).unwrap();
        let z2 = spurious_logits(&clf, &proj, &back, &data[0].image).unwrap();
        assert_eq!(z1, z2);
        // projection checkpoint roundtrip
        let pc = ProjectionCheckpoint::from_model(&proj);
        let proj2 =
            serde_json::from_str::<ProjectionCheckpoint>(&serde_json::to_string(&pc).unwrap())
                .unwrap()
                .into_model()
                .unwrap();
        assert_eq!(proj.basis, proj2.basis);
    }
}
