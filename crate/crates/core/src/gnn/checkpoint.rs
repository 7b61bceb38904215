use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{BlockSchedule, GcnBlockParams, GcnLayerParams, ParameterSet};
use crate::binio::{self, BlobReader};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

const FORMAT_TAG: &str = "gcnm-blocks";

/// Manifest of a list of blocks. The parameters live in the `.bin` sidecar,
/// block by block, each layer as `W` (column-major) then `b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockCheckpoint {
    pub format: String,
    pub format_version: u32,
    pub schedule: BlockSchedule,
    pub n_blocks: usize,
    pub seed: u64,
    /// Model-level fields (λ, training configuration, dataset hash, ...).
    pub metadata: serde_json::Value,
    pub content_hash: String,
}

fn blob_of(blocks: &[GcnBlockParams]) -> Vec<u8> {
    let mut blob = Vec::new();
    for b in blocks {
        for s in b.slices() {
            binio::put_f64s(&mut blob, s);
        }
    }
    blob
}

pub fn save_blocks(path: &Path, blocks: &[GcnBlockParams], seed: u64, metadata: serde_json::Value) -> Result<BlockCheckpoint> {
    let schedule = blocks
        .first()
        .map(|b| b.schedule.clone())
        .ok_or_else(|| Error::usage("cannot checkpoint an empty block list"))?;
    if blocks.iter().any(|b| b.schedule != schedule) {
        return Err(Error::usage("all checkpointed blocks must share one schedule"));
    }
    for b in blocks {
        b.check()?;
    }
    let blob = blob_of(blocks);
    let manifest = BlockCheckpoint {
        format: FORMAT_TAG.into(),
        format_version: CHECKPOINT_FORMAT_VERSION,
        schedule,
        n_blocks: blocks.len(),
        seed,
        metadata,
        content_hash: binio::sha256_hex(&blob),
    };
    binio::write_bytes(&binio::sidecar_path(path), &blob)?;
    binio::write_json(path, &manifest)?;
    Ok(manifest)
}

pub fn load_blocks(path: &Path) -> Result<(BlockCheckpoint, Vec<GcnBlockParams>)> {
    let m: BlockCheckpoint = binio::read_json(path)?;
    if m.format != FORMAT_TAG || m.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Format(format!("{} is not a block checkpoint", path.display())));
    }
    let schedule = BlockSchedule::new(m.schedule.widths.clone()).map_err(|e| Error::Format(e.to_string()))?;
    let blob = std::fs::read(binio::sidecar_path(path))?;
    if binio::sha256_hex(&blob) != m.content_hash {
        return Err(Error::Lineage(format!(
            "parameters of {} do not match the manifest hash",
            path.display()
        )));
    }
    let mut r = BlobReader::new(&blob);
    let mut blocks = Vec::with_capacity(m.n_blocks);
    for _ in 0..m.n_blocks {
        let layers = schedule
            .widths
            .windows(2)
            .map(|w| {
                Ok(GcnLayerParams {
                    w: DMatrix::from_vec(w[0], w[1], r.f64s(w[0] * w[1])?),
                    b: DVector::from_vec(r.f64s(w[1])?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        blocks.push(GcnBlockParams {
            schedule: schedule.clone(),
            layers,
        });
    }
    r.finish()?;
    Ok((m, blocks))
}
