use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::PatternKind;
use crate::binio::{self, BlobReader};
use crate::error::{Error, Result};

pub const FRAME_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseMetadata {
    /// Relative noise level ν (0 for clean data).
    pub level: f64,
    /// RNG seed of the noise draw, if simulated.
    pub seed: Option<u64>,
}

/// One absolute-imaging measurement: all `L` electrode voltages for each of
/// `K` patterns, pattern-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementFrame {
    pub n_electrodes: usize,
    pub n_patterns: usize,
    pub pattern_kind: PatternKind,
    /// Current amplitude (mA).
    pub amplitude: f64,
    pub mesh_hash: String,
    pub noise: NoiseMetadata,
    #[serde(skip)]
    pub voltages: DVector<f64>,
}

#[derive(Serialize, Deserialize)]
struct FrameHeader {
    format: String,
    format_version: u32,
    n_electrodes: usize,
    n_patterns: usize,
    pattern_kind: PatternKind,
    amplitude: f64,
    current_unit: String,
    voltage_unit: String,
    mesh_hash: String,
    noise: NoiseMetadata,
    content_hash: String,
}

impl MeasurementFrame {
    pub fn new(
        n_electrodes: usize,
        pattern_kind: PatternKind,
        amplitude: f64,
        mesh_hash: String,
        noise: NoiseMetadata,
        voltages: DVector<f64>,
    ) -> Result<Self> {
        if n_electrodes == 0 || voltages.len() % n_electrodes != 0 {
            return Err(Error::usage(format!(
                "{} voltages do not split into patterns of {n_electrodes} electrodes",
                voltages.len()
            )));
        }
        Ok(Self {
            n_electrodes,
            n_patterns: voltages.len() / n_electrodes,
            pattern_kind,
            amplitude,
            mesh_hash,
            noise,
            voltages,
        })
    }

    /// Writes the JSON header at `path` and the voltages to its `.bin` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut blob = Vec::with_capacity(8 * self.voltages.len());
        binio::put_f64s(&mut blob, self.voltages.as_slice());
        binio::write_bytes(&binio::sidecar_path(path), &blob)?;
        binio::write_json(
            path,
            &FrameHeader {
                format: "gcnm-frame".into(),
                format_version: FRAME_FORMAT_VERSION,
                n_electrodes: self.n_electrodes,
                n_patterns: self.n_patterns,
                pattern_kind: self.pattern_kind,
                amplitude: self.amplitude,
                current_unit: "mA".into(),
                voltage_unit: "mV".into(),
                mesh_hash: self.mesh_hash.clone(),
                noise: self.noise.clone(),
                content_hash: binio::sha256_hex(&blob),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let h: FrameHeader = binio::read_json(path)?;
        if h.format != "gcnm-frame" || h.format_version != FRAME_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "{} is not a version {FRAME_FORMAT_VERSION} measurement frame",
                path.display()
            )));
        }
        if h.current_unit != "mA" || h.voltage_unit != "mV" {
            return Err(Error::Format(format!(
                "unsupported units {}/{}",
                h.current_unit, h.voltage_unit
            )));
        }
        let blob = std::fs::read(binio::sidecar_path(path))?;
        if binio::sha256_hex(&blob) != h.content_hash {
            return Err(Error::Lineage(format!(
                "voltage sidecar for {} does not match its header hash",
                path.display()
            )));
        }
        let mut r = BlobReader::new(&blob);
        let v = r.f64s(h.n_electrodes * h.n_patterns)?;
        r.finish()?;
        Ok(Self {
            n_electrodes: h.n_electrodes,
            n_patterns: h.n_patterns,
            pattern_kind: h.pattern_kind,
            amplitude: h.amplitude,
            mesh_hash: h.mesh_hash,
            noise: h.noise,
            voltages: DVector::from_vec(v),
        })
    }
}
