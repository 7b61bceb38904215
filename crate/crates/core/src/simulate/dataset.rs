use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{add_noise, rasterize_phantom, sample_phantom, Phantom, PhantomSpec};
use crate::binio::{self, BlobReader};
use crate::error::{Error, Result};
use crate::fem::{simulate_voltages, ContactImpedances, CurrentPatternSet, FemModel, PatternKind};
use crate::mesh::Mesh;

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Per-electrode contact impedance drawn from `N(mean, std)` (Ω·m).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImpedanceModel {
    pub mean: f64,
    pub std: f64,
}

impl Default for ImpedanceModel {
    fn default() -> Self {
        Self {
            mean: 5e-6,
            std: 0.5e-6,
        }
    }
}

impl ImpedanceModel {
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<ContactImpedances> {
        if self.std == 0.0 {
            return ContactImpedances::uniform(n, self.mean);
        }
        let dist = Normal::new(self.mean, self.std)
            .map_err(|e| Error::Config(format!("contact impedance distribution: {e}")))?;
        let values = (0..n)
            .map(|_| loop {
                let z: f64 = dist.sample(rng);
                if z > 0.0 {
                    break z;
                }
            })
            .collect();
        ContactImpedances::new(values)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_samples: usize,
    pub nu: f64,
    #[serde(default)]
    pub impedance: ImpedanceModel,
    pub seed: u64,
    pub phantom: PhantomSpec,
    /// Permit the forward and inverse mesh to coincide (inverse crime).
    #[serde(default)]
    pub allow_same_mesh: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSample {
    pub index: usize,
    pub phantom: Phantom,
    /// Truth rasterized on the inverse mesh.
    pub sigma_true: DVector<f64>,
    /// Noisy voltages.
    pub voltages: DVector<f64>,
    pub clean: DVector<f64>,
    pub nu: f64,
    pub z: Vec<f64>,
    /// RNG attempt that produced the sample (> 0 after a forward failure).
    pub attempt: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub forward_mesh_hash: String,
    pub inverse_mesh_hash: String,
    pub n_electrodes: usize,
    pub n_patterns: usize,
    pub pattern_kind: PatternKind,
    pub amplitude: f64,
    pub samples: Vec<DatasetSample>,
}

/// Independent RNG stream for sample `index`, attempt `attempt`.
pub fn sample_rng(seed: u64, index: usize, attempt: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((attempt as u64) << 32) | index as u64);
    rng
}

/// Clean voltages of `phantom` on `model`'s mesh.
pub fn forward_voltages(
    model: &FemModel,
    mesh: &Mesh,
    phantom: &Phantom,
    z: &ContactImpedances,
    patterns: &CurrentPatternSet,
) -> Result<DVector<f64>> {
    let sigma = rasterize_phantom(phantom, mesh)?;
    simulate_voltages(model, sigma.values(), z, patterns)
}

const MAX_SAMPLE_ATTEMPTS: u32 = 16;

pub fn build_dataset(
    config: &DatasetConfig,
    forward_mesh: &Mesh,
    inverse_mesh: &Mesh,
    patterns: &CurrentPatternSet,
) -> Result<Dataset> {
    let fwd_hash = forward_mesh.content_hash();
    let inv_hash = inverse_mesh.content_hash();
    if fwd_hash == inv_hash && !config.allow_same_mesh {
        return Err(Error::Config(
            "forward and inverse meshes are identical (inverse crime); set allow_same_mesh to override".into(),
        ));
    }
    if !(config.nu >= 0.0) {
        return Err(Error::Config(format!("noise level must be >= 0, got {}", config.nu)));
    }
    let l = forward_mesh.n_electrodes();
    if inverse_mesh.n_electrodes() != l || patterns.n_electrodes() != l {
        return Err(Error::Config("forward mesh, inverse mesh and patterns disagree on L".into()));
    }
    let model = FemModel::new(forward_mesh)?;
    let domain = &forward_mesh.domain.curve;
    let mut samples = Vec::with_capacity(config.n_samples);
    let mut regenerated = 0;
    for index in 0..config.n_samples {
        let mut attempt = 0;
        let sample = loop {
            let mut rng = sample_rng(config.seed, index, attempt);
            let phantom = sample_phantom(&mut rng, &config.phantom, domain);
            let z = config.impedance.sample(l, &mut rng)?;
            match forward_voltages(&model, forward_mesh, &phantom, &z, patterns) {
                Ok(clean) => {
                    let voltages = add_noise(&clean, l, config.nu, &mut rng);
                    break DatasetSample {
                        index,
                        sigma_true: rasterize_phantom(&phantom, inverse_mesh)?.into_values(),
                        phantom,
                        voltages,
                        clean,
                        nu: config.nu,
                        z: z.values().to_vec(),
                        attempt,
                    };
                }
                Err(e) if attempt + 1 < MAX_SAMPLE_ATTEMPTS => {
                    log::warn!("sample {index}: forward solve failed ({e}); redrawing");
                    regenerated += 1;
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        };
        samples.push(sample);
    }
    if regenerated > 0 {
        log::warn!("{regenerated} samples were regenerated after forward failures");
    }
    Ok(Dataset {
        config: config.clone(),
        forward_mesh_hash: fwd_hash,
        inverse_mesh_hash: inv_hash,
        n_electrodes: l,
        n_patterns: patterns.n_patterns(),
        pattern_kind: patterns.kind(),
        amplitude: patterns.amplitude(),
        samples,
    })
}

#[derive(Serialize, Deserialize)]
struct SampleMeta {
    index: usize,
    phantom: Phantom,
    nu: f64,
    z: Vec<f64>,
    attempt: u32,
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    format: String,
    format_version: u32,
    config: DatasetConfig,
    forward_mesh_hash: String,
    inverse_mesh_hash: String,
    n_electrodes: usize,
    n_patterns: usize,
    pattern_kind: PatternKind,
    amplitude: f64,
    n_elements: usize,
    samples: Vec<SampleMeta>,
    content_hash: String,
}

impl Dataset {
    pub fn n_elements(&self) -> usize {
        self.samples.first().map_or(0, |s| s.sigma_true.len())
    }

    fn blob(&self) -> Vec<u8> {
        let mut blob = Vec::new();
        for s in &self.samples {
            binio::put_f64s(&mut blob, s.sigma_true.as_slice());
            binio::put_f64s(&mut blob, s.voltages.as_slice());
            binio::put_f64s(&mut blob, s.clean.as_slice());
        }
        blob
    }

    fn manifest(&self, blob: &[u8]) -> DatasetManifest {
        DatasetManifest {
            format: "gcnm-dataset".into(),
            format_version: DATASET_FORMAT_VERSION,
            config: self.config.clone(),
            forward_mesh_hash: self.forward_mesh_hash.clone(),
            inverse_mesh_hash: self.inverse_mesh_hash.clone(),
            n_electrodes: self.n_electrodes,
            n_patterns: self.n_patterns,
            pattern_kind: self.pattern_kind,
            amplitude: self.amplitude,
            n_elements: self.n_elements(),
            samples: self
                .samples
                .iter()
                .map(|s| SampleMeta {
                    index: s.index,
                    phantom: s.phantom.clone(),
                    nu: s.nu,
                    z: s.z.clone(),
                    attempt: s.attempt,
                })
                .collect(),
            content_hash: binio::sha256_hex(blob),
        }
    }

    /// Identity of the full dataset content (manifest and arrays).
    pub fn fingerprint(&self) -> String {
        let blob = self.blob();
        let mut bytes = serde_json::to_vec(&self.manifest(&blob)).expect("manifest serializes");
        bytes.extend_from_slice(&blob);
        binio::sha256_hex(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let blob = self.blob();
        binio::write_bytes(&binio::sidecar_path(path), &blob)?;
        binio::write_json(path, &self.manifest(&blob))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: DatasetManifest = binio::read_json(path)?;
        if m.format != "gcnm-dataset" || m.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Format(format!("{} is not a dataset file", path.display())));
        }
        let blob = std::fs::read(binio::sidecar_path(path))?;
        if binio::sha256_hex(&blob) != m.content_hash {
            return Err(Error::Lineage(format!(
                "dataset arrays for {} do not match the manifest hash",
                path.display()
            )));
        }
        let kl = m.n_electrodes * m.n_patterns;
        let mut r = BlobReader::new(&blob);
        let mut samples = Vec::with_capacity(m.samples.len());
        for meta in m.samples {
            samples.push(DatasetSample {
                index: meta.index,
                phantom: meta.phantom,
                sigma_true: DVector::from_vec(r.f64s(m.n_elements)?),
                voltages: DVector::from_vec(r.f64s(kl)?),
                clean: DVector::from_vec(r.f64s(kl)?),
                nu: meta.nu,
                z: meta.z,
                attempt: meta.attempt,
            });
        }
        r.finish()?;
        Ok(Self {
            config: m.config,
            forward_mesh_hash: m.forward_mesh_hash,
            inverse_mesh_hash: m.inverse_mesh_hash,
            n_electrodes: m.n_electrodes,
            n_patterns: m.n_patterns,
            pattern_kind: m.pattern_kind,
            amplitude: m.amplitude,
            samples,
        })
    }

    /// Seeded split into (train, validation) sample positions; the
    /// validation part holds `round(fraction·n)` samples.
    pub fn split(&self, validation_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
        let n = self.samples.len();
        let n_val = (validation_fraction * n as f64).round() as usize;
        if n_val == 0 || n_val >= n {
            return Err(Error::Config(format!(
                "validation fraction {validation_fraction} leaves an empty split of {n} samples"
            )));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            idx.swap(i, j);
        }
        let val = idx[..n_val].to_vec();
        let mut train = idx[n_val..].to_vec();
        let mut val_sorted = val;
        train.sort_unstable();
        val_sorted.sort_unstable();
        Ok((train, val_sorted))
    }
}
