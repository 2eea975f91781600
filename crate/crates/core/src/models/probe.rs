//! Attribute probes: small classifiers that recover the causal and spurious
//! factor values from arbitrary images. They back the attribute oracle for
//! counterfactual images, which carry no construction-time metadata.
//!
//! Probes are trained on decorrelated data (ρ = 1/|S|) so neither can lean
//! on the other factor.

use crate::error::{Error, Result};
use crate::models::classifier::{fit_classifier_net, samples_to_tensors, ClassifierNet, ClassifierTrainConfig};
use crate::rng::derive_seed;
use crate::synthspur::{
    generate_dataset, AttributeOracle, FactorSpec, LabeledSample, ATTR_CAUSAL, ATTR_SPURIOUS,
};
use crate::tensor::{self, ImageTensor};
use ndarray::Array4;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ProbeTrainConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub channels: Vec<usize>,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        ProbeTrainConfig {
            n_train: 2048,
            n_val: 512,
            channels: vec![8, 16, 32, 32],
            epochs: 6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeAgreement {
    pub shape_accuracy: f64,
    pub hue_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct AttributeProbes {
    pub shape_net: ClassifierNet<f32>,
    pub hue_net: ClassifierNet<f32>,
    pub image_shape: (usize, usize, usize),
    pub agreement: ProbeAgreement,
    pub config: ProbeTrainConfig,
}

impl AttributeProbes {
    fn predict(&self, net: &ClassifierNet<f32>, image: &ImageTensor) -> Result<usize> {
        if image.dim() != self.image_shape {
            return Err(Error::input(format!(
                "probe input shape {:?} does not match {:?}",
                image.dim(),
                self.image_shape
            )));
        }
        let xm = tensor::single_batch(&tensor::to_model_range(&image.view()).view());
        let z = net.logits(&xm.view());
        Ok(z.row(0)
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0)
    }

    pub fn shape_of(&self, image: &ImageTensor) -> Result<usize> {
        self.predict(&self.shape_net, image)
    }

    pub fn hue_of(&self, image: &ImageTensor) -> Result<usize> {
        self.predict(&self.hue_net, image)
    }
}

impl AttributeOracle for AttributeProbes {
    fn attribute_names(&self) -> Vec<String> {
        vec![ATTR_CAUSAL.to_string(), ATTR_SPURIOUS.to_string()]
    }

    fn attributes(&self, image: &ImageTensor) -> Result<BTreeMap<String, usize>> {
        let mut m = BTreeMap::new();
        m.insert(ATTR_CAUSAL.to_string(), self.shape_of(image)?);
        m.insert(ATTR_SPURIOUS.to_string(), self.hue_of(image)?);
        Ok(m)
    }
}

fn agreement(
    probes: &AttributeProbes,
    samples: &[LabeledSample],
) -> Result<ProbeAgreement> {
    let mut shape_hits = 0usize;
    let mut hue_hits = 0usize;
    for s in samples {
        if probes.shape_of(&s.image)? == s.causal_attr {
            shape_hits += 1;
        }
        if probes.hue_of(&s.image)? == s.spurious_attr {
            hue_hits += 1;
        }
    }
    Ok(ProbeAgreement {
        shape_accuracy: shape_hits as f64 / samples.len() as f64,
        hue_accuracy: hue_hits as f64 / samples.len() as f64,
    })
}

/// Train both probes on freshly generated decorrelated data.
pub fn train_probes(spec: &FactorSpec, cfg: &ProbeTrainConfig) -> Result<AttributeProbes> {
    let mut decor = spec.clone();
    decor.correlation = 1.0 / spec.spurious_values as f64;
    let train = generate_dataset(&decor, cfg.n_train, derive_seed(cfg.seed, "probe-train", 0))?;
    let val = generate_dataset(&decor, cfg.n_val, derive_seed(cfg.seed, "probe-val", 0))?;
    let (xs, _) = samples_to_tensors(&train);
    let (vxs, _) = samples_to_tensors(&val);
    let fit = |labels: &dyn Fn(&LabeledSample) -> usize,
               classes: usize,
               xs: &Array4<f32>,
               vxs: &Array4<f32>,
               seed: u64|
     -> Result<ClassifierNet<f32>> {
        let ys: Vec<usize> = train.iter().map(|s| labels(s)).collect();
        let vys: Vec<usize> = val.iter().map(|s| labels(s)).collect();
        let ccfg = ClassifierTrainConfig {
            channels: cfg.channels.clone(),
            epochs: cfg.epochs,
            batch_size: 64,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            seed,
        };
        Ok(fit_classifier_net(xs, &ys, vxs, &vys, classes, &ccfg)?.0)
    };
    let shape_net = fit(
        &|s| s.causal_attr,
        spec.causal_classes,
        &xs,
        &vxs,
        derive_seed(cfg.seed, "probe-shape", 0),
    )?;
    let hue_net = fit(
        &|s| s.spurious_attr,
        spec.spurious_values,
        &xs,
        &vxs,
        derive_seed(cfg.seed, "probe-hue", 0),
    )?;
    let mut probes = AttributeProbes {
        shape_net,
        hue_net,
        image_shape: train[0].image.dim(),
        agreement: ProbeAgreement {
            shape_accuracy: 0.0,
            hue_accuracy: 0.0,
        },
        config: cfg.clone(),
    };
    probes.agreement = agreement(&probes, &val)?;
    Ok(probes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probes_recover_construction_attributes() {
        let spec = FactorSpec::default();
        let cfg = ProbeTrainConfig {
            seed: 1,
            ..Default::default()
        };
        let probes = train_probes(&spec, &cfg).unwrap();
        assert!(
            probes.agreement.shape_accuracy >= 0.99,
            "shape probe agreement {}",
            probes.agreement.shape_accuracy
        );
        assert!(
            probes.agreement.hue_accuracy >= 0.99,
            "hue probe agreement {}",
            probes.agreement.hue_accuracy
        );
        // oracle interface
        let sample = generate_dataset(&spec, 4, 99).unwrap().remove(2);
        let attrs = probes.attributes(&sample.image).unwrap();
        assert_eq!(attrs[ATTR_CAUSAL], sample.causal_attr);
        assert_eq!(attrs[ATTR_SPURIOUS], sample.spurious_attr);
    }
}
