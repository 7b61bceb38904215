use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{
    best_constant_fit, clamp_sigma, line_search, lm_update, objective, relative_voltage_error,
    tv_update, ObjectiveSpec, Regularizer, TvOperator,
};
use crate::binio::{self, BlobReader};
use crate::error::{Error, Result};
use crate::fem::{
    forward_and_jacobian, simulate_voltages, ConductivityField, ContactImpedances,
    CurrentPatternSet, FemModel,
};

/// Everything needed to evaluate `F` on one measurement frame.
#[derive(Clone, Copy)]
pub struct IterationContext<'a> {
    pub model: &'a FemModel,
    pub patterns: &'a CurrentPatternSet,
    pub z: &'a ContactImpedances,
    pub v: &'a DVector<f64>,
    pub spec: ObjectiveSpec,
    pub tv: Option<&'a TvOperator>,
}

impl IterationContext<'_> {
    /// `F(σ)` with a fresh forward solve.
    pub fn evaluate(&self, sigma: &DVector<f64>) -> Result<f64> {
        let u = simulate_voltages(self.model, sigma, self.z, self.patterns)?;
        objective(&u, self.v, sigma, &self.spec, self.tv)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterateRecord {
    pub sigma: DVector<f64>,
    pub voltages: DVector<f64>,
    pub objective: f64,
    pub re_v: f64,
    /// Update computed at this iterate (absent for the last one).
    pub delta: Option<DVector<f64>>,
    /// Accepted line-search step, when a line search was used.
    pub step: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    ObjectiveRule,
    MaxIterations,
    Error,
}

/// What to return when the objective rule never fires.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopFallback {
    MinObjective,
    Last,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopPolicy {
    /// Stop at `σ_k` once this many following objectives all exceed `F(σ_k)`.
    pub patience: usize,
    pub fallback: StopFallback,
}

impl StopPolicy {
    pub fn classic() -> Self {
        Self {
            patience: 3,
            fallback: StopFallback::MinObjective,
        }
    }

    pub fn learned() -> Self {
        Self {
            patience: 3,
            fallback: StopFallback::Last,
        }
    }
}

/// First `k` whose next `patience` objectives all exceed `F_k`.
pub fn select_by_stopping_rule(objectives: &[f64], patience: usize) -> Option<usize> {
    if patience == 0 {
        return None;
    }
    (0..objectives.len().saturating_sub(patience))
        .find(|&k| objectives[k + 1..=k + patience].iter().all(|&f| f > objectives[k]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconResult {
    pub sigma_rec: ConductivityField,
    /// Index of `σ_rec` in `history`, i.e. the number of updates it took.
    pub rec_index: usize,
    pub history: Vec<IterateRecord>,
    pub stop_reason: StopReason,
    /// Set when a forward solve failed mid-run; the result is partial.
    pub error: Option<String>,
}

impl ReconResult {
    pub fn iterations(&self) -> usize {
        self.rec_index
    }

    pub fn rec(&self) -> &IterateRecord {
        &self.history[self.rec_index]
    }

    pub fn objectives(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.objective).collect()
    }
}

/// One update produced by a method at iterate `k`.
pub struct StepOutput {
    pub next: DVector<f64>,
    pub delta: DVector<f64>,
    pub step: Option<f64>,
}

/// Generic iterate loop: evaluates `U`, `J` and `F` at every iterate, asks
/// `step` for the next one, and applies the stopping rule. At most
/// `max_updates` updates are made.
pub fn run_iterations<S>(
    ctx: &IterationContext<'_>,
    sigma0: DVector<f64>,
    max_updates: usize,
    policy: StopPolicy,
    mut step: S,
) -> Result<ReconResult>
where
    S: FnMut(usize, &DVector<f64>, &DVector<f64>, &DMatrix<f64>) -> Result<StepOutput>,
{
    ctx.spec.validate()?;
    let mut history: Vec<IterateRecord> = Vec::with_capacity(max_updates + 1);
    let mut sigma = clamp_sigma(&sigma0);
    let mut error = None;
    let mut stopped_at = None;
    for k in 0..=max_updates {
        let last = k == max_updates;
        let evaluated = if last {
            simulate_voltages(ctx.model, &sigma, ctx.z, ctx.patterns).map(|u| (u, None))
        } else {
            forward_and_jacobian(ctx.model, &sigma, ctx.z, ctx.patterns).map(|(s, j)| (s.voltages, Some(j)))
        };
        let (u, j) = match evaluated {
            Ok(x) => x,
            Err(e) if !history.is_empty() => {
                error = Some(format!("forward solve at iterate {k} failed: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let f = objective(&u, ctx.v, &sigma, &ctx.spec, ctx.tv)?;
        history.push(IterateRecord {
            re_v: relative_voltage_error(&u, ctx.v),
            sigma: sigma.clone(),
            voltages: u,
            objective: f,
            delta: None,
            step: None,
        });
        let objs: Vec<f64> = history.iter().map(|r| r.objective).collect();
        // Earlier candidates were rejected on previous passes.
        if let Some(c) = select_by_stopping_rule(&objs, policy.patience) {
            stopped_at = Some(c);
            break;
        }
        let Some(j) = j else { break };
        let rec = history.last_mut().unwrap();
        match step(k, &rec.sigma, &rec.voltages, &j) {
            Ok(out) => {
                rec.delta = Some(out.delta);
                rec.step = out.step;
                sigma = clamp_sigma(&out.next);
            }
            Err(e) => {
                error = Some(format!("update at iterate {k} failed: {e}"));
                break;
            }
        }
    }
    let (rec_index, stop_reason) = match stopped_at {
        Some(k) => (k, StopReason::ObjectiveRule),
        None => {
            let idx = match policy.fallback {
                StopFallback::Last => history.len() - 1,
                StopFallback::MinObjective => history
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.objective.total_cmp(&b.1.objective))
                    .map(|(i, _)| i)
                    .unwrap(),
            };
            let reason = if error.is_some() { StopReason::Error } else { StopReason::MaxIterations };
            (idx, reason)
        }
    };
    let sigma_rec = ConductivityField::with_hash(
        ctx.model.mesh_hash().to_string(),
        ctx.model.n_elements(),
        history[rec_index].sigma.clone(),
    )?;
    Ok(ReconResult {
        sigma_rec,
        rec_index,
        history,
        stop_reason,
        error,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassicMethod {
    Lm,
    Tv,
}

/// LM or smoothed-TV Gauss-Newton from the best constant fit, with line
/// search, for at most `max_iters` updates.
pub fn iterate_classic(
    ctx: &IterationContext<'_>,
    method: ClassicMethod,
    max_iters: usize,
    policy: StopPolicy,
    constant_interval: (f64, f64),
) -> Result<ReconResult> {
    if max_iters == 0 {
        return Err(Error::Config("max_iters must be at least 1".into()));
    }
    let spec = ctx.spec;
    spec.validate()?;
    if method == ClassicMethod::Tv && (spec.kind != Regularizer::SmoothedTv || ctx.tv.is_none()) {
        return Err(Error::Config(
            "TV reconstruction needs a smoothed-TV objective and a TV operator".into(),
        ));
    }
    let fit = best_constant_fit(ctx.model, ctx.patterns, ctx.v, ctx.z, constant_interval)?;
    let sigma0 = DVector::from_element(ctx.model.n_elements(), fit.sigma);
    run_iterations(ctx, sigma0, max_iters, policy, |_, sigma, u, j| {
        let delta = match method {
            ClassicMethod::Lm => lm_update(j, u, ctx.v, spec.lambda_lm)?,
            ClassicMethod::Tv => tv_update(
                j,
                u,
                ctx.v,
                sigma,
                ctx.tv.expect("checked above"),
                spec.lambda_tv,
                spec.gamma,
            )?,
        };
        let ls = line_search(sigma, &delta, |s| ctx.evaluate(s))?;
        Ok(StepOutput {
            next: ls.sigma,
            delta,
            step: Some(ls.step),
        })
    })
}

pub const RECON_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct IterateSummary {
    objective: f64,
    re_v: f64,
    step: Option<f64>,
    has_delta: bool,
}

#[derive(Serialize, Deserialize)]
struct ReconHeader {
    format: String,
    format_version: u32,
    mesh_hash: String,
    n_elements: usize,
    n_voltages: usize,
    rec_index: usize,
    stop_reason: StopReason,
    error: Option<String>,
    iterates: Vec<IterateSummary>,
    content_hash: String,
}

impl ReconResult {
    /// JSON summary at `path`; σ, U and δσ of every iterate in the sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut blob = Vec::new();
        for r in &self.history {
            binio::put_f64s(&mut blob, r.sigma.as_slice());
            binio::put_f64s(&mut blob, r.voltages.as_slice());
            if let Some(d) = &r.delta {
                binio::put_f64s(&mut blob, d.as_slice());
            }
        }
        binio::write_bytes(&binio::sidecar_path(path), &blob)?;
        let header = ReconHeader {
            format: "gcnm-recon".into(),
            format_version: RECON_FORMAT_VERSION,
            mesh_hash: self.sigma_rec.mesh_hash().to_string(),
            n_elements: self.sigma_rec.len(),
            n_voltages: self.history[0].voltages.len(),
            rec_index: self.rec_index,
            stop_reason: self.stop_reason,
            error: self.error.clone(),
            iterates: self
                .history
                .iter()
                .map(|r| IterateSummary {
                    objective: r.objective,
                    re_v: r.re_v,
                    step: r.step,
                    has_delta: r.delta.is_some(),
                })
                .collect(),
            content_hash: binio::sha256_hex(&blob),
        };
        binio::write_json(path, &header)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let h: ReconHeader = binio::read_json(path)?;
        if h.format != "gcnm-recon" || h.format_version != RECON_FORMAT_VERSION {
            return Err(Error::Format(format!("{} is not a reconstruction file", path.display())));
        }
        let blob = std::fs::read(binio::sidecar_path(path))?;
        if binio::sha256_hex(&blob) != h.content_hash {
            return Err(Error::Lineage(format!(
                "reconstruction sidecar for {} does not match its header",
                path.display()
            )));
        }
        let mut rd = BlobReader::new(&blob);
        let mut history = Vec::with_capacity(h.iterates.len());
        for it in &h.iterates {
            let sigma = DVector::from_vec(rd.f64s(h.n_elements)?);
            let voltages = DVector::from_vec(rd.f64s(h.n_voltages)?);
            let delta = if it.has_delta {
                Some(DVector::from_vec(rd.f64s(h.n_elements)?))
            } else {
                None
            };
            history.push(IterateRecord {
                sigma,
                voltages,
                objective: it.objective,
                re_v: it.re_v,
                delta,
                step: it.step,
            });
        }
        rd.finish()?;
        if h.rec_index >= history.len() {
            return Err(Error::Format("reconstruction index out of range".into()));
        }
        let sigma_rec =
            ConductivityField::with_hash(h.mesh_hash, h.n_elements, history[h.rec_index].sigma.clone())?;
        Ok(Self {
            sigma_rec,
            rec_index: h.rec_index,
            history,
            stop_reason: h.stop_reason,
            error: h.error,
        })
    }
}
