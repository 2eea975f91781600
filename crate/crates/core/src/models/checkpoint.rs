//! Checkpoint files and the model registry.
//!
//! Checkpoints are JSON with exact f32 parameter payloads and the training
//! config embedded. A `registry.json` in the models directory maps model
//! names to files and content hashes.

use crate::error::{Error, Result};
use crate::models::classifier::{Classifier, ClassifierNet, ClassifierTrainConfig, EpochStats};
use crate::models::denoiser::{DdpmReport, DdpmTrainConfig, Denoiser, DenoiserNet};
use crate::models::probe::{AttributeProbes, ProbeAgreement, ProbeTrainConfig};
use crate::models::schedule::DiffusionSchedule;
use crate::nn::{Conv2d, Linear};
use crate::rng::derive_rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamBlob {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub type ParamMap = BTreeMap<String, ParamBlob>;

fn conv_params(name: &str, c: &Conv2d<f32>, map: &mut ParamMap) {
    map.insert(
        format!("{name}.w"),
        ParamBlob {
            shape: c.w.shape().to_vec(),
            data: c.w.iter().copied().collect(),
        },
    );
    map.insert(
        format!("{name}.b"),
        ParamBlob {
            shape: vec![c.b.len()],
            data: c.b.to_vec(),
        },
    );
}

fn linear_params(name: &str, l: &Linear<f32>, map: &mut ParamMap) {
    map.insert(
        format!("{name}.w"),
        ParamBlob {
            shape: l.w.shape().to_vec(),
            data: l.w.iter().copied().collect(),
        },
    );
    map.insert(
        format!("{name}.b"),
        ParamBlob {
            shape: vec![l.b.len()],
            data: l.b.to_vec(),
        },
    );
}

fn take<'m>(map: &'m ParamMap, name: &str) -> Result<&'m ParamBlob> {
    map.get(name)
        .ok_or_else(|| Error::input(format!("checkpoint missing parameter `{name}`")))
}

fn load_conv(name: &str, c: &mut Conv2d<f32>, map: &ParamMap) -> Result<()> {
    let w = take(map, &format!("{name}.w"))?;
    if w.shape != c.w.shape() {
        return Err(Error::input(format!("shape mismatch for {name}.w")));
    }
    c.w.as_slice_mut().unwrap().copy_from_slice(&w.data);
    let b = take(map, &format!("{name}.b"))?;
    c.b.as_slice_mut().unwrap().copy_from_slice(&b.data);
    Ok(())
}

fn load_linear(name: &str, l: &mut Linear<f32>, map: &ParamMap) -> Result<()> {
    let w = take(map, &format!("{name}.w"))?;
    if w.shape != l.w.shape() {
        return Err(Error::input(format!("shape mismatch for {name}.w")));
    }
    l.w.as_slice_mut().unwrap().copy_from_slice(&w.data);
    let b = take(map, &format!("{name}.b"))?;
    l.b.as_slice_mut().unwrap().copy_from_slice(&b.data);
    Ok(())
}

pub fn classifier_net_params(net: &ClassifierNet<f32>) -> ParamMap {
    let mut map = ParamMap::new();
    for (i, c) in net.convs.iter().enumerate() {
        conv_params(&format!("conv{i}"), c, &mut map);
    }
    linear_params("head", &net.head, &mut map);
    map
}

pub fn load_classifier_net(
    channels: &[usize],
    classes: usize,
    map: &ParamMap,
) -> Result<ClassifierNet<f32>> {
    let mut rng = derive_rng(0, "load", 0);
    let mut net = ClassifierNet::<f32>::new(channels, classes, &mut rng);
    for i in 0..net.convs.len() {
        load_conv(&format!("conv{i}"), &mut net.convs[i], map)?;
    }
    load_linear("head", &mut net.head, map)?;
    Ok(net)
}

pub fn denoiser_net_params(net: &DenoiserNet<f32>) -> ParamMap {
    let mut map = ParamMap::new();
    linear_params("t_fc", &net.t_fc, &mut map);
    linear_params("t_b1", &net.t_b1, &mut map);
    linear_params("t_b2", &net.t_b2, &mut map);
    conv_params("e1a", &net.e1a, &mut map);
    conv_params("e1b", &net.e1b, &mut map);
    conv_params("e2a", &net.e2a, &mut map);
    conv_params("e2b", &net.e2b, &mut map);
    conv_params("d1", &net.d1, &mut map);
    conv_params("out", &net.out, &mut map);
    map
}

pub fn load_denoiser_net(cfg: &DdpmTrainConfig, map: &ParamMap) -> Result<DenoiserNet<f32>> {
    let mut rng = derive_rng(0, "load", 0);
    let mut net = DenoiserNet::<f32>::new(
        cfg.channels.0,
        cfg.channels.1,
        cfg.emb_dim,
        cfg.hidden,
        &mut rng,
    );
    load_linear("t_fc", &mut net.t_fc, map)?;
    load_linear("t_b1", &mut net.t_b1, map)?;
    load_linear("t_b2", &mut net.t_b2, map)?;
    load_conv("e1a", &mut net.e1a, map)?;
    load_conv("e1b", &mut net.e1b, map)?;
    load_conv("e2a", &mut net.e2a, map)?;
    load_conv("e2b", &mut net.e2b, map)?;
    load_conv("d1", &mut net.d1, map)?;
    load_conv("out", &mut net.out, map)?;
    Ok(net)
}

// ---------------------------------------------------------------------------
// Checkpoint payloads
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct ClassifierCheckpoint {
    pub config: ClassifierTrainConfig,
    pub classes: usize,
    pub image_shape: (usize, usize, usize),
    pub train_curve: Vec<EpochStats>,
    pub params: ParamMap,
}

impl ClassifierCheckpoint {
    pub fn from_model(c: &Classifier) -> Self {
        ClassifierCheckpoint {
            config: c.config.clone(),
            classes: c.classes(),
            image_shape: c.image_shape,
            train_curve: c.train_curve.clone(),
            params: classifier_net_params(&c.net),
        }
    }

    pub fn into_model(self) -> Result<Classifier> {
        let net = load_classifier_net(&self.config.channels, self.classes, &self.params)?;
        Ok(Classifier {
            net,
            config: self.config,
            image_shape: self.image_shape,
            train_curve: self.train_curve,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DenoiserCheckpoint {
    pub config: DdpmTrainConfig,
    pub image_shape: (usize, usize, usize),
    pub report: DdpmReport,
    pub params: ParamMap,
}

impl DenoiserCheckpoint {
    pub fn from_model(d: &Denoiser) -> Self {
        DenoiserCheckpoint {
            config: d.config.clone(),
            image_shape: d.image_shape,
            report: d.report.clone(),
            params: denoiser_net_params(&d.net),
        }
    }

    pub fn into_model(self) -> Result<Denoiser> {
        let net = load_denoiser_net(&self.config, &self.params)?;
        let schedule = DiffusionSchedule::<f32>::from_spec(&self.config.schedule)?;
        Ok(Denoiser {
            net,
            schedule,
            config: self.config,
            image_shape: self.image_shape,
            report: self.report,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ProbesCheckpoint {
    pub config: ProbeTrainConfig,
    pub image_shape: (usize, usize, usize),
    pub shape_classes: usize,
    pub hue_classes: usize,
    pub agreement: ProbeAgreement,
    pub shape_params: ParamMap,
    pub hue_params: ParamMap,
}

impl ProbesCheckpoint {
    pub fn from_model(p: &AttributeProbes) -> Self {
        ProbesCheckpoint {
            config: p.config.clone(),
            image_shape: p.image_shape,
            shape_classes: p.shape_net.classes(),
            hue_classes: p.hue_net.classes(),
            agreement: p.agreement.clone(),
            shape_params: classifier_net_params(&p.shape_net),
            hue_params: classifier_net_params(&p.hue_net),
        }
    }

    pub fn into_model(self) -> Result<AttributeProbes> {
        Ok(AttributeProbes {
            shape_net: load_classifier_net(
                &self.config.channels,
                self.shape_classes,
                &self.shape_params,
            )?,
            hue_net: load_classifier_net(&self.config.channels, self.hue_classes, &self.hue_params)?,
            image_shape: self.image_shape,
            agreement: self.agreement,
            config: self.config,
        })
    }
}

// ---------------------------------------------------------------------------
// Registry
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub file: String,
    pub sha256: String,
}

/// `registry.json`: model name -> checkpoint file + content hash.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ModelRegistry {
    pub entries: BTreeMap<String, RegistryEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl ModelRegistry {
    pub fn path(dir: &Path) -> PathBuf {
        dir.join("registry.json")
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = Self::path(dir);
        if !p.exists() {
            return Ok(ModelRegistry::default());
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?)
    }

    fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(Self::path(dir), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn contains(dir: &Path, name: &str) -> bool {
        ModelRegistry::load(dir)
            .map(|r| r.entries.contains_key(name))
            .unwrap_or(false)
    }
}

/// Serialize a checkpoint under `name` and record it in the registry.
pub fn store<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let file = format!("{name}.json");
    let bytes = serde_json::to_vec(value)?;
    std::fs::write(dir.join(&file), &bytes)?;
    let mut reg = ModelRegistry::load(dir)?;
    reg.entries.insert(
        name.to_string(),
        RegistryEntry {
            file,
            sha256: sha256_hex(&bytes),
        },
    );
    reg.save(dir)
}

/// Load a checkpoint by registry name and verify its hash.
pub fn fetch<T: DeserializeOwned>(dir: &Path, name: &str) -> Result<T> {
    let reg = ModelRegistry::load(dir)?;
    let entry = reg.entries.get(name).ok_or_else(|| Error::MissingArtifact {
        name: name.to_string(),
        hint: format!("no entry in {}", ModelRegistry::path(dir).display()),
    })?;
    let bytes = std::fs::read(dir.join(&entry.file)).map_err(|_| Error::MissingArtifact {
        name: name.to_string(),
        hint: format!("file {} not found", entry.file),
    })?;
    if sha256_hex(&bytes) != entry.sha256 {
        return Err(Error::input(format!(
            "checkpoint `{name}` does not match its registry hash"
        )));
    }
    Ok(serde_json::from_slice(&bytes)?)
}
