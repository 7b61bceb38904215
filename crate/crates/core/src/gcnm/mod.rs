//! Graph Convolutional Newton-type Method: one trained block per iteration,
//! fed with the current iterate and its LM update, plus the graph residual
//! network baseline.
//!
//! Blocks are trained one after another. Block `k` sees the iterates produced
//! by the best parameters of blocks `0..k`, so truncating training at `k`
//! leaves the earlier blocks untouched.

mod fit;
mod gresnet;

pub use fit::{FitConfig, FitReport};
pub use gresnet::{
    gresnet_backward, gresnet_forward, gresnet_reconstruct, train_gresnet, GResNetModel,
    GResNetReport, GRESNET_BLOCKS,
};

use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{
    forward_and_jacobian, ContactImpedances, CurrentPatternSet, FemModel, DEFAULT_CONTACT_IMPEDANCE,
};
use crate::gnn::{
    block_apply, block_backward, block_forward, init_params, load_blocks, mse_loss, save_blocks,
    BlockSchedule, GcnBlockParams,
};
use crate::mesh::{element_adjacency, normalized_adjacency, Mesh, PropagationOperator};
use crate::recon::{
    best_constant_fit, clamp_sigma, lm_update, run_iterations, IterationContext, ObjectiveSpec,
    ReconResult, StepOutput, StopPolicy, DEFAULT_CONSTANT_INTERVAL,
};
use crate::simulate::Dataset;

/// Everything a learned reconstruction needs on one inverse mesh.
pub struct ReconSetup {
    pub model: FemModel,
    pub operator: PropagationOperator,
    pub patterns: CurrentPatternSet,
    /// Contact impedances assumed during reconstruction.
    pub z: ContactImpedances,
    pub constant_interval: (f64, f64),
}

impl ReconSetup {
    /// Uniform default contact impedance and the default constant-fit interval.
    pub fn new(mesh: &Mesh, patterns: CurrentPatternSet) -> Result<Self> {
        Ok(Self {
            model: FemModel::new(mesh)?,
            operator: normalized_adjacency(&element_adjacency(mesh)),
            z: ContactImpedances::uniform(mesh.n_electrodes(), DEFAULT_CONTACT_IMPEDANCE)?,
            patterns,
            constant_interval: DEFAULT_CONSTANT_INTERVAL,
        })
    }

    fn context<'a>(&'a self, v: &'a DVector<f64>, lambda: f64) -> IterationContext<'a> {
        IterationContext {
            model: &self.model,
            patterns: &self.patterns,
            z: &self.z,
            v,
            spec: ObjectiveSpec::lm(lambda),
            tv: None,
        }
    }

    /// `σ_0`: the best constant fit, as a field.
    pub fn initial_iterate(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        let fit = best_constant_fit(&self.model, &self.patterns, v, &self.z, self.constant_interval)?;
        Ok(DVector::from_element(self.model.n_elements(), fit.sigma))
    }

    /// LM update at `sigma` (one forward solve and one Jacobian).
    pub fn lm_delta(&self, sigma: &DVector<f64>, v: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
        let (sol, j) = forward_and_jacobian(&self.model, sigma, &self.z, &self.patterns)?;
        lm_update(&j, &sol.voltages, v, lambda)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GcnmTrainConfig {
    pub k_max: usize,
    /// λ_LM of the δσ inputs.
    pub lambda: f64,
    pub fit: FitConfig,
    pub validation_fraction: f64,
    pub seed: u64,
    pub schedule: BlockSchedule,
}

impl Default for GcnmTrainConfig {
    fn default() -> Self {
        Self {
            k_max: 10,
            lambda: 0.1,
            fit: FitConfig::default(),
            validation_fraction: 0.2,
            seed: 0,
            schedule: BlockSchedule::standard(),
        }
    }
}

/// Inputs and targets of one block: `(σ_k, δσ_k, σ_true)` per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct IterateDataset {
    pub sigma: Vec<DVector<f64>>,
    pub delta: Vec<DVector<f64>>,
    pub truth: Vec<DVector<f64>>,
    pub lambda: f64,
    /// Positions into the sample vectors.
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl IterateDataset {
    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    /// Validation loss of the zero network (which predicts 0 everywhere).
    pub fn zero_baseline(&self) -> f64 {
        self.val
            .iter()
            .map(|&i| self.truth[i].norm_squared() / self.truth[i].len() as f64)
            .sum::<f64>()
            / self.val.len().max(1) as f64
    }
}

/// Trains one block on `data`, starting from Glorot weights drawn from `seed`.
pub fn train_block(
    data: &IterateDataset,
    s: &PropagationOperator,
    schedule: &BlockSchedule,
    cfg: &FitConfig,
    seed: u64,
) -> Result<(GcnBlockParams, FitReport)> {
    if schedule.n_inputs() != 2 {
        return Err(Error::Config("GCNM blocks take two input features".into()));
    }
    let init = init_params(seed, schedule);
    fit::fit(
        init,
        &data.train,
        &data.val,
        cfg,
        seed ^ 0x5eed_5eed_5eed_5eed,
        |p, i| {
            let (y, cache) = block_forward(s, &data.sigma[i], &data.delta[i], p)?;
            let (l, dy) = mse_loss(&y, &data.truth[i])?;
            Ok((l, block_backward(&cache, s, p, &dy)?.params))
        },
        |p, i| mse_loss(&block_apply(s, &data.sigma[i], &data.delta[i], p)?, &data.truth[i]).map(|r| r.0),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcnmModel {
    pub blocks: Vec<GcnBlockParams>,
    pub lambda: f64,
    /// Fingerprint of the training graph (informational).
    pub train_graph: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub block: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub zero_baseline: f64,
    pub fit: FitReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcnmTrainingReport {
    pub blocks: Vec<BlockReport>,
    /// Dataset indices of samples dropped after a forward failure.
    pub dropped: Vec<usize>,
}

/// Live samples and their current iterates.
struct Iterates {
    /// Dataset index of each live sample.
    index: Vec<usize>,
    sigma: Vec<DVector<f64>>,
    truth: Vec<DVector<f64>>,
    is_val: Vec<bool>,
}

fn keep_flagged<T>(v: &mut Vec<T>, keep: &[bool]) {
    let mut flags = keep.iter();
    v.retain(|_| *flags.next().unwrap());
}

impl Iterates {
    fn retain(&mut self, keep: &[bool]) {
        keep_flagged(&mut self.index, keep);
        keep_flagged(&mut self.sigma, keep);
        keep_flagged(&mut self.truth, keep);
        keep_flagged(&mut self.is_val, keep);
    }
}

fn derived_seed(seed: u64, k: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64 + 1);
    rng.random()
}

pub(crate) fn check_lineage(ds: &Dataset, mesh: &Mesh) -> Result<()> {
    if ds.inverse_mesh_hash != mesh.content_hash() {
        return Err(Error::Lineage(
            "the dataset was not rasterized on this inverse mesh".into(),
        ));
    }
    Ok(())
}

/// Sequential GCNM training. `resume` holds already trained leading blocks
/// (they are reused, not retrained); `on_block` is called after every block
/// with all blocks so far, e.g. to checkpoint.
pub fn train_gcnm_with(
    ds: &Dataset,
    setup: &ReconSetup,
    mesh: &Mesh,
    cfg: &GcnmTrainConfig,
    resume: &[GcnBlockParams],
    mut on_block: impl FnMut(&[GcnBlockParams], &BlockReport) -> Result<()>,
) -> Result<(GcnmModel, GcnmTrainingReport)> {
    check_lineage(ds, mesh)?;
    if cfg.k_max == 0 {
        return Err(Error::Config("k_max must be at least 1".into()));
    }
    if resume.len() > cfg.k_max {
        return Err(Error::Config(format!(
            "{} blocks to resume from but k_max = {}",
            resume.len(),
            cfg.k_max
        )));
    }
    let (train_idx, val_idx) = ds.split(cfg.validation_fraction, cfg.seed)?;
    let mut is_val = vec![false; ds.samples.len()];
    for &i in &val_idx {
        is_val[i] = true;
    }
    let mut dropped = Vec::new();
    let mut it = Iterates {
        index: Vec::new(),
        sigma: Vec::new(),
        truth: Vec::new(),
        is_val: Vec::new(),
    };
    for i in train_idx.iter().chain(&val_idx).copied().collect::<std::collections::BTreeSet<_>>() {
        let s = &ds.samples[i];
        match setup.initial_iterate(&s.voltages) {
            Ok(sigma0) => {
                it.index.push(i);
                it.sigma.push(sigma0);
                it.truth.push(s.sigma_true.clone());
                it.is_val.push(is_val[i]);
            }
            Err(e) => {
                log::warn!("sample {i}: constant fit failed ({e}); dropped");
                dropped.push(i);
            }
        }
    }

    let mut blocks: Vec<GcnBlockParams> = Vec::with_capacity(cfg.k_max);
    let mut reports = Vec::with_capacity(cfg.k_max);
    for k in 0..cfg.k_max {
        let mut delta = Vec::with_capacity(it.sigma.len());
        let mut keep = Vec::with_capacity(it.sigma.len());
        for (n, sigma) in it.sigma.iter().enumerate() {
            match setup.lm_delta(sigma, &ds.samples[it.index[n]].voltages, cfg.lambda) {
                Ok(d) => {
                    delta.push(d);
                    keep.push(true);
                }
                Err(e) => {
                    log::warn!("sample {} at block {k}: {e}; dropped", it.index[n]);
                    dropped.push(it.index[n]);
                    keep.push(false);
                }
            }
        }
        it.retain(&keep);
        let data = IterateDataset {
            train: (0..it.index.len()).filter(|&n| !it.is_val[n]).collect(),
            val: (0..it.index.len()).filter(|&n| it.is_val[n]).collect(),
            sigma: std::mem::take(&mut it.sigma),
            delta,
            truth: it.truth.clone(),
            lambda: cfg.lambda,
        };
        if data.val.is_empty() || data.train.is_empty() {
            return Err(Error::Config(format!(
                "block {k}: a split is empty after dropping failed samples"
            )));
        }
        let (params, fit) = match resume.get(k) {
            Some(p) => {
                let loss = mean_loss(&data, &setup.operator, p)?;
                let fit = FitReport {
                    epochs: 0,
                    best_epoch: 0,
                    best_val_loss: loss,
                    train_loss_at_best: None,
                    initial_val_loss: loss,
                    history: Vec::new(),
                };
                (p.clone(), fit)
            }
            None => train_block(&data, &setup.operator, &cfg.schedule, &cfg.fit, derived_seed(cfg.seed, k))?,
        };
        let report = BlockReport {
            block: k,
            n_train: data.train.len(),
            n_val: data.val.len(),
            zero_baseline: data.zero_baseline(),
            fit,
        };
        log::info!(
            "block {k}: validation loss {:.4e} (zero network {:.4e}) after {} epochs",
            report.fit.best_val_loss,
            report.zero_baseline,
            report.fit.epochs
        );
        it.sigma = data
            .sigma
            .iter()
            .zip(&data.delta)
            .map(|(x, d)| block_apply(&setup.operator, x, d, &params).map(|y| clamp_sigma(&y)))
            .collect::<Result<_>>()?;
        blocks.push(params);
        on_block(&blocks, &report)?;
        reports.push(report);
    }
    let model = GcnmModel {
        blocks,
        lambda: cfg.lambda,
        train_graph: setup.operator.source().to_string(),
        seed: cfg.seed,
    };
    Ok((model, GcnmTrainingReport { blocks: reports, dropped }))
}

pub fn train_gcnm(
    ds: &Dataset,
    setup: &ReconSetup,
    mesh: &Mesh,
    cfg: &GcnmTrainConfig,
) -> Result<(GcnmModel, GcnmTrainingReport)> {
    train_gcnm_with(ds, setup, mesh, cfg, &[], |_, _| Ok(()))
}

fn mean_loss(data: &IterateDataset, s: &PropagationOperator, p: &GcnBlockParams) -> Result<f64> {
    let mut total = 0.0;
    for &i in &data.val {
        total += mse_loss(&block_apply(s, &data.sigma[i], &data.delta[i], p)?, &data.truth[i])?.0;
    }
    Ok(total / data.val.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcnmOptions {
    /// Replaces the model's λ for the δσ inputs.
    pub lambda_override: Option<f64>,
    /// Inputs are multiplied by this factor and outputs divided by it.
    pub scale: f64,
}

impl Default for GcnmOptions {
    fn default() -> Self {
        Self {
            lambda_override: None,
            scale: 1.0,
        }
    }
}

impl GcnmOptions {
    fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::Config(format!("scale must be positive, got {}", self.scale)));
        }
        if let Some(l) = self.lambda_override {
            if !(l >= 0.0) {
                return Err(Error::Config(format!("λ override must be >= 0, got {l}")));
            }
        }
        Ok(())
    }
}

/// `σ_{k+1} = block_k([σ_k, δσ_k])` from the best constant fit, stopping at
/// `σ_k` once the next 3 objectives all exceed `F(σ_k)`; otherwise the last
/// block's output.
pub fn gcnm_reconstruct(
    setup: &ReconSetup,
    v: &DVector<f64>,
    model: &GcnmModel,
    opts: GcnmOptions,
) -> Result<ReconResult> {
    opts.validate()?;
    if model.blocks.is_empty() {
        return Err(Error::Config("the GCNM model has no blocks".into()));
    }
    let lambda = opts.lambda_override.unwrap_or(model.lambda);
    let ctx = setup.context(v, lambda);
    let sigma0 = setup.initial_iterate(v)?;
    let c = opts.scale;
    run_iterations(&ctx, sigma0, model.blocks.len(), StopPolicy::learned(), |k, sigma, u, j| {
        let delta = lm_update(j, u, v, lambda)?;
        let y = block_apply(&setup.operator, &(sigma * c), &(&delta * c), &model.blocks[k])?;
        Ok(StepOutput {
            next: y / c,
            delta,
            step: None,
        })
    })
}

#[derive(Serialize, Deserialize)]
struct GcnmMeta {
    kind: String,
    lambda: f64,
    train_graph: String,
    #[serde(default)]
    extra: serde_json::Value,
}

impl GcnmModel {
    /// Block checkpoint plus model fields; `extra` is stored verbatim.
    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = GcnmMeta {
            kind: "gcnm".into(),
            lambda: self.lambda,
            train_graph: self.train_graph.clone(),
            extra,
        };
        save_blocks(path, &self.blocks, self.seed, serde_json::to_value(meta)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (ck, blocks) = load_blocks(path)?;
        let kind = ck.metadata.get("kind").and_then(|k| k.as_str()).unwrap_or("unknown");
        if kind != "gcnm" {
            return Err(Error::Format(format!("{} holds a {kind} model, not gcnm", path.display())));
        }
        let meta: GcnmMeta = serde_json::from_value(ck.metadata)?;
        if blocks.is_empty() || ck.schedule.n_inputs() != 2 {
            return Err(Error::Format("a GCNM checkpoint needs at least one two-input block".into()));
        }
        Ok(Self {
            blocks,
            lambda: meta.lambda,
            train_graph: meta.train_graph,
            seed: ck.seed,
        })
    }

    /// The first `k` blocks.
    pub fn truncated(&self, k: usize) -> Self {
        Self {
            blocks: self.blocks[..k.min(self.blocks.len())].to_vec(),
            ..self.clone()
        }
    }
}
