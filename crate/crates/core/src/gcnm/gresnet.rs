use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::fit::{fit, FitReport};
use super::{check_lineage, derived_seed, GcnmTrainConfig, ReconSetup};
use crate::error::{Error, Result};
use crate::gnn::{
    block_backward, block_forward_features, init_params, load_blocks, mse_loss, save_blocks,
    BlockCache, BlockSchedule, GcnBlockParams,
};
use crate::mesh::{Mesh, PropagationOperator};
use crate::recon::{clamp_sigma, lm_update, run_iterations, ReconResult, StepOutput, StopFallback, StopPolicy};
use crate::simulate::Dataset;

pub const GRESNET_BLOCKS: usize = 5;

/// Post-processing network: `h ← h + block(h)` five times, starting from the
/// first LM iterate.
#[derive(Clone, Debug, PartialEq)]
pub struct GResNetModel {
    pub blocks: Vec<GcnBlockParams>,
    pub lambda: f64,
    pub seed: u64,
}

impl GResNetModel {
    pub fn zeros(lambda: f64) -> Self {
        Self {
            blocks: vec![GcnBlockParams::zeros(&BlockSchedule::residual()); GRESNET_BLOCKS],
            lambda,
            seed: 0,
        }
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({ "kind": "gresnet", "lambda": self.lambda, "extra": extra });
        save_blocks(path, &self.blocks, self.seed, meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (ck, blocks) = load_blocks(path)?;
        if ck.metadata.get("kind").and_then(|k| k.as_str()) != Some("gresnet") {
            return Err(Error::Format(format!("{} is not a GResNet checkpoint", path.display())));
        }
        if blocks.len() != GRESNET_BLOCKS || ck.schedule.n_inputs() != 1 {
            return Err(Error::Format(format!(
                "a GResNet has {GRESNET_BLOCKS} one-input blocks, the checkpoint has {}",
                blocks.len()
            )));
        }
        let lambda = ck
            .metadata
            .get("lambda")
            .and_then(|l| l.as_f64())
            .ok_or_else(|| Error::Format("GResNet checkpoint lacks λ".into()))?;
        Ok(Self { blocks, lambda, seed: ck.seed })
    }
}

/// Per-block caches of one residual forward pass.
pub struct GResNetCache {
    blocks: Vec<BlockCache>,
}

pub fn gresnet_forward(
    s: &PropagationOperator,
    x1: &DVector<f64>,
    blocks: &[GcnBlockParams],
) -> Result<(DVector<f64>, GResNetCache)> {
    if x1.len() != s.dim() {
        return Err(Error::usage("GResNet input does not match the graph"));
    }
    let mut h = x1.clone();
    let mut caches = Vec::with_capacity(blocks.len());
    for b in blocks {
        if b.schedule.n_inputs() != 1 {
            return Err(Error::usage("GResNet blocks take one input feature"));
        }
        let (out, cache) = block_forward_features(s, DMatrix::from_column_slice(h.len(), 1, h.as_slice()), b)?;
        caches.push(cache);
        h += out;
    }
    Ok((h, GResNetCache { blocks: caches }))
}

/// Parameter gradients of all blocks and the gradient of the input.
pub fn gresnet_backward(
    cache: &GResNetCache,
    s: &PropagationOperator,
    blocks: &[GcnBlockParams],
    dy: &DVector<f64>,
) -> Result<(Vec<GcnBlockParams>, DVector<f64>)> {
    if cache.blocks.len() != blocks.len() {
        return Err(Error::usage("GResNet cache has the wrong number of blocks"));
    }
    let mut d = dy.clone();
    let mut grads = Vec::with_capacity(blocks.len());
    for (c, b) in cache.blocks.iter().zip(blocks).rev() {
        let g = block_backward(c, s, b, &d)?;
        d += g.d_input.column(0);
        grads.push(g.params);
    }
    grads.reverse();
    Ok((grads, d))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GResNetReport {
    pub n_train: usize,
    pub n_val: usize,
    pub fit: FitReport,
    pub dropped: Vec<usize>,
}

/// End-to-end training on `σ_1 = clamp(σ_0 + δσ_0)`. Uses the λ, fit, split
/// and seed fields of `cfg`; the block schedule is the one-input variant of
/// `cfg.schedule`.
pub fn train_gresnet(
    ds: &Dataset,
    setup: &ReconSetup,
    mesh: &Mesh,
    cfg: &GcnmTrainConfig,
) -> Result<(GResNetModel, GResNetReport)> {
    check_lineage(ds, mesh)?;
    let (train_idx, val_idx) = ds.split(cfg.validation_fraction, cfg.seed)?;
    let mut inputs = Vec::new();
    let mut truth = Vec::new();
    let (mut train, mut val, mut dropped) = (Vec::new(), Vec::new(), Vec::new());
    let mut all: Vec<(usize, bool)> = train_idx.iter().map(|&i| (i, false)).collect();
    all.extend(val_idx.iter().map(|&i| (i, true)));
    all.sort_unstable();
    for (i, is_val) in all {
        let s = &ds.samples[i];
        let x1 = setup
            .initial_iterate(&s.voltages)
            .and_then(|x0| Ok(clamp_sigma(&(&x0 + setup.lm_delta(&x0, &s.voltages, cfg.lambda)?))));
        match x1 {
            Ok(x1) => {
                if is_val {
                    val.push(inputs.len());
                } else {
                    train.push(inputs.len());
                }
                inputs.push(x1);
                truth.push(s.sigma_true.clone());
            }
            Err(e) => {
                log::warn!("sample {i}: {e}; dropped");
                dropped.push(i);
            }
        }
    }
    let mut widths = cfg.schedule.widths.clone();
    widths[0] = 1;
    let schedule = BlockSchedule::new(widths)?;
    let init: Vec<GcnBlockParams> = (0..GRESNET_BLOCKS)
        .map(|b| init_params(derived_seed(cfg.seed ^ 0x6e5e, b), &schedule))
        .collect();
    let s = &setup.operator;
    let (blocks, report) = fit(
        init,
        &train,
        &val,
        &cfg.fit,
        derived_seed(cfg.seed ^ 0x6e5e, GRESNET_BLOCKS),
        |p, i| {
            let (y, cache) = gresnet_forward(s, &inputs[i], p)?;
            let (l, dy) = mse_loss(&y, &truth[i])?;
            Ok((l, gresnet_backward(&cache, s, p, &dy)?.0))
        },
        |p, i| mse_loss(&gresnet_forward(s, &inputs[i], p)?.0, &truth[i]).map(|r| r.0),
    )?;
    log::info!(
        "GResNet: validation loss {:.4e} after {} epochs",
        report.best_val_loss,
        report.epochs
    );
    let model = GResNetModel {
        blocks,
        lambda: cfg.lambda,
        seed: cfg.seed,
    };
    Ok((
        model,
        GResNetReport {
            n_train: train.len(),
            n_val: val.len(),
            fit: report,
            dropped,
        },
    ))
}

/// One LM update from the best constant fit (no line search), then the
/// residual network. Reported as a single iteration.
pub fn gresnet_reconstruct(
    setup: &ReconSetup,
    v: &DVector<f64>,
    model: &GResNetModel,
    scale: f64,
) -> Result<ReconResult> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Config(format!("scale must be positive, got {scale}")));
    }
    let ctx = setup.context(v, model.lambda);
    let sigma0 = setup.initial_iterate(v)?;
    let policy = StopPolicy {
        patience: 0,
        fallback: StopFallback::Last,
    };
    run_iterations(&ctx, sigma0, 1, policy, |_, sigma, u, j| {
        let delta = lm_update(j, u, v, model.lambda)?;
        let x1 = clamp_sigma(&(sigma + &delta));
        let (y, _) = gresnet_forward(&setup.operator, &(x1 * scale), &model.blocks)?;
        Ok(StepOutput {
            next: y / scale,
            delta,
            step: None,
        })
    })
}
