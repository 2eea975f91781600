//! Synthetic spurious-correlation dataset.
//!
//! Each image is a single filled shape on a colored background. The shape
//! class is the causal factor and fully determines the label; the background
//! hue is the spurious factor and agrees with the label-aligned hue with a
//! controllable probability. Shape edits are spatially local, hue edits are
//! global, which is exactly the asymmetry the generation and evaluation
//! stages probe.

use crate::error::{Error, Result};
use crate::rng::{derive_rng, derive_seed};
use crate::tensor::{self, ImageTensor};
use ndarray::Array3;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

fn default_noise() -> f32 {
    0.02
}

/// Generating-process description.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FactorSpec {
    /// Number of causal classes K (shape classes).
    pub causal_classes: usize,
    /// Number of spurious values (background hues).
    pub spurious_values: usize,
    /// Probability that the spurious value agrees with the label-aligned one.
    pub correlation: f64,
    /// Pixels per side.
    pub image_size: usize,
    /// Image channels; the renderer is RGB.
    pub channels: usize,
    /// Uniform pixel noise amplitude in [0,1] units.
    #[serde(default = "default_noise")]
    pub noise_amplitude: f32,
}

impl Default for FactorSpec {
    fn default() -> Self {
        FactorSpec {
            causal_classes: 2,
            spurious_values: 2,
            correlation: 0.95,
            image_size: 32,
            channels: 3,
            noise_amplitude: default_noise(),
        }
    }
}

impl FactorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.causal_classes < 2 {
            return Err(Error::config("causal_classes", "must be >= 2"));
        }
        if self.spurious_values < 2 {
            return Err(Error::config("spurious_values", "must be >= 2"));
        }
        let lo = 1.0 / self.spurious_values as f64;
        if !(self.correlation >= lo && self.correlation <= 1.0) {
            return Err(Error::config(
                "correlation",
                format!("must lie in [{lo:.4}, 1.0]"),
            ));
        }
        if self.image_size < 16 {
            return Err(Error::config("image_size", "must be >= 16"));
        }
        if self.channels != 3 {
            return Err(Error::config("channels", "renderer supports exactly 3"));
        }
        if !(0.0..=0.2).contains(&self.noise_amplitude) {
            return Err(Error::config("noise_amplitude", "must lie in [0, 0.2]"));
        }
        Ok(())
    }

    /// The spurious value that co-occurs with class `label` at rate ρ.
    pub fn aligned_spurious(&self, label: usize) -> usize {
        label % self.spurious_values
    }
}

/// One generated image with its construction-time factors.
#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub image: ImageTensor,
    pub label: usize,
    pub causal_attr: usize,
    pub spurious_attr: usize,
}

/// Ground-truth factor values recorded at construction time.
pub fn attribute_oracle(sample: &LabeledSample) -> (usize, usize) {
    (sample.causal_attr, sample.spurious_attr)
}

/// Attribute names used across dataset metadata and the CD metric.
pub const ATTR_CAUSAL: &str = "shape";
pub const ATTR_SPURIOUS: &str = "hue";

/// Maps an image to named attribute values. Generated samples carry metadata;
/// arbitrary images (counterfactuals) need a trained probe implementation.
pub trait AttributeOracle: Sync {
    fn attribute_names(&self) -> Vec<String>;
    fn attributes(&self, image: &ImageTensor) -> Result<BTreeMap<String, usize>>;
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

/// Background color for a spurious value: a small opposing shift on the red
/// and blue channels around a neutral base. Hues are deliberately close so a
/// bounded l-infinity perturbation can cross between them.
pub fn background_color(spec: &FactorSpec, spurious: usize) -> [f32; 3] {
    let d = 0.08f32;
    let theta = 2.0 * std::f32::consts::PI * spurious as f32 / spec.spurious_values as f32;
    let base = [0.50f32, 0.45, 0.50];
    [
        base[0] + d * theta.cos(),
        base[1] + d * theta.sin() * 0.5,
        base[2] - d * theta.cos(),
    ]
}

const SHAPE_COLOR: [f32; 3] = [0.92, 0.92, 0.90];

/// Geometry jitter and noise stream for one sample; pairs that share params
/// differ only through the factor being intervened on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RenderParams {
    pub center_x: f32,
    pub center_y: f32,
    pub radius: f32,
    pub noise_seed: u64,
}

impl RenderParams {
    pub fn sample(spec: &FactorSpec, rng: &mut impl Rng) -> Self {
        let s = spec.image_size as f32;
        let jitter = s / 10.0;
        let base_r = s * 0.28;
        RenderParams {
            center_x: s / 2.0 + rng.gen_range(-jitter..=jitter),
            center_y: s / 2.0 + rng.gen_range(-jitter..=jitter),
            radius: base_r + rng.gen_range(-s / 32.0..=s / 16.0),
            noise_seed: rng.gen(),
        }
    }
}

/// Point-in-shape test for causal class `c`, in centered unit coordinates.
fn inside_shape(causal: usize, dx: f32, dy: f32) -> bool {
    match causal % 4 {
        // disc
        0 => dx * dx + dy * dy <= 1.0,
        // cross (plus sign)
        1 => (dx.abs() <= 0.34 && dy.abs() <= 1.0) || (dy.abs() <= 0.34 && dx.abs() <= 1.0),
        // triangle (upward)
        2 => (-1.0..=1.0).contains(&dy) && dx.abs() <= (1.0 - (dy + 1.0) / 2.0),
        // square
        _ => dx.abs() <= 0.85 && dy.abs() <= 0.85,
    }
}

/// Render one image; 2x2 supersampled coverage gives soft edges. Output is
/// quantized to the 1/255 grid so PNG round trips are bit-exact.
pub fn render(
    spec: &FactorSpec,
    causal: usize,
    spurious: usize,
    params: &RenderParams,
) -> ImageTensor {
    let n = spec.image_size;
    let bg = background_color(spec, spurious);
    let mut img = Array3::<f32>::zeros((3, n, n));
    for i in 0..n {
        for j in 0..n {
            let mut cov = 0.0f32;
            for (si, sj) in [(0.25f32, 0.25f32), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let y = i as f32 + si;
                let x = j as f32 + sj;
                let dx = (x - params.center_x) / params.radius;
                let dy = (y - params.center_y) / params.radius;
                if inside_shape(causal, dx, dy) {
                    cov += 0.25;
                }
            }
            for ch in 0..3 {
                img[[ch, i, j]] = bg[ch] * (1.0 - cov) + SHAPE_COLOR[ch] * cov;
            }
        }
    }
    if spec.noise_amplitude > 0.0 {
        let mut nrng = derive_rng(params.noise_seed, "render-noise", 0);
        let amp = spec.noise_amplitude;
        for v in img.iter_mut() {
            *v += nrng.gen_range(-amp..=amp);
        }
    }
    tensor::quantize_u8(&mut img);
    img
}

/// Draw the spurious value: agree with the aligned one at rate ρ, otherwise
/// uniform over the remaining values.
fn draw_spurious(spec: &FactorSpec, label: usize, rng: &mut impl Rng) -> usize {
    let aligned = spec.aligned_spurious(label);
    if rng.gen_bool(spec.correlation) {
        aligned
    } else {
        let k = rng.gen_range(0..spec.spurious_values - 1);
        if k >= aligned {
            k + 1
        } else {
            k
        }
    }
}

/// Generate `n` samples. Classes are assigned round-robin for exact balance;
/// everything else comes from per-sample streams of `seed`.
pub fn generate_dataset(spec: &FactorSpec, n: usize, seed: u64) -> Result<Vec<LabeledSample>> {
    spec.validate()?;
    if n < 1 {
        return Err(Error::config("n", "must be >= 1"));
    }
    let samples: Vec<LabeledSample> = (0..n)
        .into_par_iter()
        .map(|i| {
            let causal = i % spec.causal_classes;
            let mut rng = derive_rng(seed, "sample", i as u64);
            let spurious = draw_spurious(spec, causal, &mut rng);
            let params = RenderParams::sample(spec, &mut rng);
            LabeledSample {
                image: render(spec, causal, spurious, &params),
                label: causal,
                causal_attr: causal,
                spurious_attr: spurious,
            }
        })
        .collect();
    Ok(samples)
}

/// Render an intervention pair differing only in the chosen factor.
/// Returns (base image, intervened image).
pub fn intervention_pair(
    spec: &FactorSpec,
    causal: usize,
    spurious: usize,
    flip_causal: bool,
    seed: u64,
) -> (ImageTensor, ImageTensor) {
    let mut rng = derive_rng(seed, "intervention", 0);
    let params = RenderParams::sample(spec, &mut rng);
    let base = render(spec, causal, spurious, &params);
    let (c2, s2) = if flip_causal {
        ((causal + 1) % spec.causal_classes, spurious)
    } else {
        (causal, (spurious + 1) % spec.spurious_values)
    };
    let other = render(spec, c2, s2, &params);
    (base, other)
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

/// Stratified three-way split; disjoint, exhaustive, deterministic, and
/// class-balanced (each class is partitioned with the same fractions).
pub fn split_indices(
    labels: &[usize],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let (fa, fb, fc) = fractions;
    if fa <= 0.0 || fb <= 0.0 || fc <= 0.0 {
        return Err(Error::config("fractions", "all must be positive"));
    }
    if (fa + fb + fc - 1.0).abs() > 1e-9 {
        return Err(Error::config("fractions", "must sum to 1"));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut parts = (Vec::new(), Vec::new(), Vec::new());
    for (&class, idxs) in &by_class {
        let mut idxs = idxs.clone();
        let mut rng = derive_rng(seed, "split", class as u64);
        // Fisher-Yates
        for i in (1..idxs.len()).rev() {
            let j = rng.gen_range(0..=i);
            idxs.swap(i, j);
        }
        let n = idxs.len();
        let na = ((fa * n as f64).round() as usize).min(n);
        let nb = ((fb * n as f64).round() as usize).min(n - na);
        parts.0.extend_from_slice(&idxs[..na]);
        parts.1.extend_from_slice(&idxs[na..na + nb]);
        parts.2.extend_from_slice(&idxs[na + nb..]);
    }
    parts.0.sort_unstable();
    parts.1.sort_unstable();
    parts.2.sort_unstable();
    Ok(parts)
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleMeta {
    pub file: String,
    pub label: usize,
    pub causal_attr: usize,
    pub spurious_attr: usize,
}

/// Manifest written next to the per-image PNG files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub spec: FactorSpec,
    pub split_sizes: BTreeMap<String, usize>,
    pub splits: BTreeMap<String, Vec<SampleMeta>>,
    pub checksum: String,
}

/// Named splits of loaded samples.
#[derive(Debug, Clone)]
pub struct StoredDataset {
    pub manifest: DatasetManifest,
    pub splits: BTreeMap<String, Vec<LabeledSample>>,
}

impl StoredDataset {
    pub fn split(&self, name: &str) -> Result<&[LabeledSample]> {
        self.splits
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::input(format!("dataset has no split `{name}`")))
    }
}

fn checksum_samples(splits: &BTreeMap<String, Vec<LabeledSample>>) -> String {
    let mut hasher = Sha256::new();
    for (name, samples) in splits {
        hasher.update(name.as_bytes());
        for s in samples {
            hasher.update((s.label as u64).to_le_bytes());
            hasher.update((s.causal_attr as u64).to_le_bytes());
            hasher.update((s.spurious_attr as u64).to_le_bytes());
            for v in s.image.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
    }
    let d = hasher.finalize();
    d.iter().map(|b| format!("{b:02x}")).collect()
}

/// Write named splits as PNG files plus `manifest.json`.
pub fn save_dataset(
    dir: &Path,
    spec: &FactorSpec,
    seed: u64,
    splits: &BTreeMap<String, Vec<LabeledSample>>,
) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir.join("images"))?;
    let mut meta_splits = BTreeMap::new();
    let mut sizes = BTreeMap::new();
    for (name, samples) in splits {
        let mut metas = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            let file = format!("images/{name}_{i:05}.png");
            tensor::save_png(&dir.join(&file), &s.image.view())?;
            metas.push(SampleMeta {
                file,
                label: s.label,
                causal_attr: s.causal_attr,
                spurious_attr: s.spurious_attr,
            });
        }
        sizes.insert(name.clone(), samples.len());
        meta_splits.insert(name.clone(), metas);
    }
    let manifest = DatasetManifest {
        seed,
        spec: spec.clone(),
        split_sizes: sizes,
        splits: meta_splits,
        checksum: checksum_samples(splits),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}

/// Load a dataset directory and verify its checksum.
pub fn load_dataset(dir: &Path) -> Result<StoredDataset> {
    let manifest_path = dir.join("manifest.json");
    let json = std::fs::read_to_string(&manifest_path).map_err(|_| Error::MissingArtifact {
        name: manifest_path.display().to_string(),
        hint: "generate the dataset first".into(),
    })?;
    let manifest: DatasetManifest = serde_json::from_str(&json)?;
    let mut splits = BTreeMap::new();
    for (name, metas) in &manifest.splits {
        let mut samples = Vec::with_capacity(metas.len());
        for m in metas {
            samples.push(LabeledSample {
                image: tensor::load_png(&dir.join(&m.file))?,
                label: m.label,
                causal_attr: m.causal_attr,
                spurious_attr: m.spurious_attr,
            });
        }
        splits.insert(name.clone(), samples);
    }
    let check = checksum_samples(&splits);
    if check != manifest.checksum {
        return Err(Error::input(format!(
            "dataset checksum mismatch in {}: stored {}, recomputed {check}",
            dir.display(),
            manifest.checksum
        )));
    }
    Ok(StoredDataset { manifest, splits })
}

/// Empirical rate at which the spurious value agrees with the aligned one.
pub fn spurious_agreement(samples: &[LabeledSample], spec: &FactorSpec) -> f64 {
    let agree = samples
        .iter()
        .filter(|s| s.spurious_attr == spec.aligned_spurious(s.label))
        .count();
    agree as f64 / samples.len() as f64
}

/// The canonical dataset layout used by the pipeline. Train and val are
/// carved from a correlated pool; test is generated decorrelated
/// (ρ = 1/|S|) so spurious reliance is measurable.
pub fn build_standard_dataset(
    spec: &FactorSpec,
    n_pool: usize,
    n_test: usize,
    seed: u64,
) -> Result<BTreeMap<String, Vec<LabeledSample>>> {
    let pool = generate_dataset(spec, n_pool, derive_seed(seed, "pool", 0))?;
    let labels: Vec<usize> = pool.iter().map(|s| s.label).collect();
    let (tr, va, te_cor) = split_indices(&labels, (0.8, 0.1, 0.1), derive_seed(seed, "split", 0))?;
    let mut decor_spec = spec.clone();
    decor_spec.correlation = 1.0 / spec.spurious_values as f64;
    let test = generate_dataset(&decor_spec, n_test, derive_seed(seed, "test", 0))?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| pool[i].clone()).collect::<Vec<_>>();
    let mut splits = BTreeMap::new();
    splits.insert("train".to_string(), pick(&tr));
    splits.insert("val".to_string(), pick(&va));
    splits.insert("test_correlated".to_string(), pick(&te_cor));
    splits.insert("test".to_string(), test);
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn degenerate_correlation_always_agrees() {
        let spec = FactorSpec {
            correlation: 1.0,
            ..Default::default()
        };
        let data = generate_dataset(&spec, 100, 1).unwrap();
        assert!(data
            .iter()
            .all(|s| s.spurious_attr == spec.aligned_spurious(s.label)));
    }

    #[test]
    fn agreement_rate_tracks_correlation() {
        let spec = FactorSpec {
            correlation: 0.5,
            noise_amplitude: 0.0,
            ..Default::default()
        };
        let data = generate_dataset(&spec, 10_000, 2).unwrap();
        let rate = spurious_agreement(&data, &spec);
        assert!((0.485..=0.515).contains(&rate), "rate {rate}");
    }

    #[test]
    fn agreement_is_strictly_increasing_in_correlation() {
        let mut rates = Vec::new();
        for rho in [0.5, 0.75, 0.95] {
            let spec = FactorSpec {
                correlation: rho,
                ..Default::default()
            };
            let data = generate_dataset(&spec, 10_000, 3).unwrap();
            rates.push(spurious_agreement(&data, &spec));
        }
        assert!(rates[0] < rates[1] && rates[1] < rates[2], "{rates:?}");
        // spurious value alone predicts the label at ~rho
        assert!((rates[2] - 0.95).abs() <= 3.0 / (10_000f64).sqrt());
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = FactorSpec::default();
        let a = generate_dataset(&spec, 50, 9).unwrap();
        let b = generate_dataset(&spec, 50, 9).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.spurious_attr, y.spurious_attr);
        }
    }

    #[test]
    fn labels_follow_causal_attr_and_pixels_in_range() {
        let data = generate_dataset(&FactorSpec::default(), 64, 4).unwrap();
        for s in &data {
            assert_eq!(s.label, s.causal_attr);
            assert!(s.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        let (c, s) = attribute_oracle(&data[0]);
        assert_eq!((c, s), (data[0].causal_attr, data[0].spurious_attr));
    }

    #[test]
    fn invalid_specs_are_rejected_with_field_names() {
        let bad = FactorSpec {
            correlation: 0.2,
            ..Default::default()
        };
        match generate_dataset(&bad, 10, 0) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "correlation"),
            other => panic!("expected config error, got {other:?}"),
        }
        let bad = FactorSpec {
            causal_classes: 1,
            ..Default::default()
        };
        assert!(matches!(
            generate_dataset(&bad, 10, 0),
            Err(Error::Config { field, .. }) if field == "causal_classes"
        ));
    }

    #[test]
    fn split_is_a_balanced_partition() {
        let labels: Vec<usize> = (0..1000).map(|i| i % 2).collect();
        let (a, b, c) = split_indices(&labels, (0.8, 0.1, 0.1), 5).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (800, 100, 100));
        let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
        // determinism
        let again = split_indices(&labels, (0.8, 0.1, 0.1), 5).unwrap();
        assert_eq!((a, b, c), again);
        // class balance within 2%
        let (a, _, _) = split_indices(&labels, (0.5, 0.25, 0.25), 6).unwrap();
        let ones = a.iter().filter(|&&i| labels[i] == 1).count() as f64;
        assert!((ones / a.len() as f64 - 0.5).abs() <= 0.02);
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let labels = vec![0usize; 10];
        assert!(matches!(
            split_indices(&labels, (0.5, 0.2, 0.2), 0),
            Err(Error::Config { field, .. }) if field == "fractions"
        ));
    }

    #[test]
    fn save_load_roundtrip_preserves_pixels_and_checksum() {
        let dir = tempdir().unwrap();
        let spec = FactorSpec::default();
        let data = generate_dataset(&spec, 12, 7).unwrap();
        let mut splits = BTreeMap::new();
        splits.insert("train".to_string(), data.clone());
        let manifest = save_dataset(dir.path(), &spec, 7, &splits).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.manifest.checksum, manifest.checksum);
        for (orig, back) in data.iter().zip(loaded.split("train").unwrap()) {
            assert_eq!(orig.image, back.image);
        }
    }

    #[test]
    fn intervention_pairs_touch_only_the_intervened_factor() {
        let spec = FactorSpec {
            noise_amplitude: 0.0,
            ..Default::default()
        };
        let (base, hue_flip) = intervention_pair(&spec, 0, 0, false, 11);
        // background differs, shape geometry identical
        assert_ne!(base, hue_flip);
        let (base2, shape_flip) = intervention_pair(&spec, 0, 0, true, 11);
        assert_eq!(base, base2);
        // corner pixel is background in both: identical under causal flip
        assert_eq!(base2[[0, 0, 0]], shape_flip[[0, 0, 0]]);
    }
}
