//! Variational reconstruction: objective, best constant fit,
//! Levenberg-Marquardt and smoothed-TV Gauss-Newton updates, a grid line
//! search, and the iterate loop with its objective-based stopping rule.

mod iterate;
mod tv;

pub use iterate::{
    iterate_classic, run_iterations, select_by_stopping_rule, ClassicMethod, IterateRecord,
    IterationContext, ReconResult, StepOutput, StopFallback, StopPolicy, StopReason,
};
pub use tv::{build_tv_matrix, TvOperator};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{simulate_voltages, ContactImpedances, CurrentPatternSet, FemModel};

/// Lower bound applied to σ (S/m) before every forward solve.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Default search interval (S/m) of [`best_constant_fit`].
pub const DEFAULT_CONSTANT_INTERVAL: (f64, f64) = (0.01, 10.0);

/// Candidate step lengths, largest first.
pub const LINE_SEARCH_STEPS: [f64; 7] = [1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125, 0.015625];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    None,
    SmoothedTv,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub kind: Regularizer,
    pub lambda_lm: f64,
    pub lambda_tv: f64,
    pub gamma: f64,
}

impl ObjectiveSpec {
    /// Unregularized data fit with LM damping `lambda`.
    pub fn lm(lambda: f64) -> Self {
        Self {
            kind: Regularizer::None,
            lambda_lm: lambda,
            lambda_tv: 0.0,
            gamma: 1e-8,
        }
    }

    pub fn tv(lambda: f64, gamma: f64) -> Self {
        Self {
            kind: Regularizer::SmoothedTv,
            lambda_lm: 0.0,
            lambda_tv: lambda,
            gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_lm >= 0.0) || !(self.lambda_tv >= 0.0) {
            return Err(Error::Config("regularization weights must be >= 0".into()));
        }
        if self.kind == Regularizer::SmoothedTv && !(self.gamma > 0.0) {
            return Err(Error::Config("smoothed TV needs gamma > 0".into()));
        }
        Ok(())
    }
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        Self::lm(10.0)
    }
}

pub fn clamp_sigma(sigma: &DVector<f64>) -> DVector<f64> {
    sigma.map(|s| if s.is_nan() { SIGMA_FLOOR } else { s.max(SIGMA_FLOOR) })
}

/// `F = ½‖U−V‖² + R(σ)`.
pub fn objective(
    u: &DVector<f64>,
    v: &DVector<f64>,
    sigma: &DVector<f64>,
    spec: &ObjectiveSpec,
    tv: Option<&TvOperator>,
) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::usage(format!(
            "simulated ({}) and measured ({}) voltages differ in length",
            u.len(),
            v.len()
        )));
    }
    let fit = 0.5 * (u - v).norm_squared();
    match spec.kind {
        Regularizer::None => Ok(fit),
        Regularizer::SmoothedTv => {
            let tv = tv.ok_or_else(|| Error::usage("smoothed TV objective needs a TV operator"))?;
            if tv.n_elements() != sigma.len() {
                return Err(Error::usage("TV operator and σ differ in element count"));
            }
            Ok(fit + tv.penalty(sigma, spec.lambda_tv, spec.gamma))
        }
    }
}

/// `‖U−V‖ / ‖V‖`.
pub fn relative_voltage_error(u: &DVector<f64>, v: &DVector<f64>) -> f64 {
    (u - v).norm() / v.norm()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstantFit {
    pub sigma: f64,
    /// Data misfit `‖U(σ)−V‖²` at the optimum.
    pub misfit: f64,
    /// The minimizer lies at an end of the search interval.
    pub at_endpoint: bool,
    pub evaluations: usize,
}

/// Golden-section search (in log σ) for the constant conductivity that best
/// fits `v`, to relative tolerance 1e-3.
pub fn best_constant_fit(
    model: &FemModel,
    patterns: &CurrentPatternSet,
    v: &DVector<f64>,
    z: &ContactImpedances,
    interval: (f64, f64),
) -> Result<ConstantFit> {
    let (lo, hi) = interval;
    if !(lo > 0.0) || !(hi > lo) || !hi.is_finite() {
        return Err(Error::Config(format!(
            "constant-fit interval must be positive and nondegenerate, got ({lo}, {hi})"
        )));
    }
    let m = model.n_elements();
    let mut evaluations = 0;
    let mut misfit = |log_c: f64| -> Result<f64> {
        evaluations += 1;
        let u = simulate_voltages(model, &DVector::from_element(m, log_c.exp()), z, patterns)?;
        if u.len() != v.len() {
            return Err(Error::usage("measured voltages do not match the pattern set"));
        }
        Ok((u - v).norm_squared())
    };
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo.ln(), hi.ln());
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let mut f1 = misfit(x1)?;
    let mut f2 = misfit(x2)?;
    // An interval of width δ in log σ is a relative tolerance of about δ.
    while b - a > 1e-3 {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = misfit(x1)?;
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = misfit(x2)?;
        }
    }
    let (x, f) = if f1 <= f2 { (x1, f1) } else { (x2, f2) };
    let tol = 2e-3;
    let at_endpoint = x - lo.ln() < tol || hi.ln() - x < tol;
    if at_endpoint {
        log::warn!(
            "best constant fit {:.4e} S/m lies at the end of the search interval ({lo}, {hi})",
            x.exp()
        );
    }
    Ok(ConstantFit {
        sigma: x.exp(),
        misfit: f,
        at_endpoint,
        evaluations,
    })
}

fn spd_solve(a: DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let n = a.nrows();
    let scale = a.diagonal().amax();
    let fail = || Error::numerical(format!("{what} ({n}×{n}) is not positive definite"));
    let chol = a.cholesky().ok_or_else(fail)?;
    // Zero pivots slip through the factorization as rounding noise.
    let tiny = chol.l_dirty().diagonal().iter().any(|&d| d * d <= n as f64 * f64::EPSILON * scale);
    if tiny {
        return Err(fail());
    }
    Ok(chol.solve(b))
}

/// `δσ = −(JᵀJ + λI)⁻¹ Jᵀ(U−V)`.
///
/// With `λ > 0` and fewer measurements than elements the equivalent
/// `−Jᵀ(JJᵀ + λI)⁻¹(U−V)` is factored instead, which is far smaller.
pub fn lm_update(
    j: &DMatrix<f64>,
    u: &DVector<f64>,
    v: &DVector<f64>,
    lambda: f64,
) -> Result<DVector<f64>> {
    if j.nrows() != u.len() || u.len() != v.len() {
        return Err(Error::usage(format!(
            "Jacobian has {} rows for {} simulated and {} measured voltages",
            j.nrows(),
            u.len(),
            v.len()
        )));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("λ_LM must be >= 0, got {lambda}")));
    }
    let r = u - v;
    let (kl, m) = j.shape();
    if lambda > 0.0 && kl < m {
        let mut g = j * j.transpose();
        for i in 0..kl {
            g[(i, i)] += lambda;
        }
        let y = spd_solve(g, &r, "LM dual system")?;
        Ok(-(j.tr_mul(&y)))
    } else {
        let mut g = j.transpose() * j;
        for i in 0..m {
            g[(i, i)] += lambda;
        }
        Ok(-spd_solve(g, &j.tr_mul(&r), "LM normal matrix")?)
    }
}

/// `δσ = −(JᵀJ + λ𝓛ᵀE⁻¹𝓛)⁻¹ (Jᵀ(U−V) + λ𝓛ᵀE⁻¹𝓛σ)` with
/// `E = diag(sqrt((𝓛σ)² + γ))`.
pub fn tv_update(
    j: &DMatrix<f64>,
    u: &DVector<f64>,
    v: &DVector<f64>,
    sigma: &DVector<f64>,
    tv: &TvOperator,
    lambda: f64,
    gamma: f64,
) -> Result<DVector<f64>> {
    if j.nrows() != u.len() || u.len() != v.len() || j.ncols() != sigma.len() {
        return Err(Error::usage("TV update: inconsistent Jacobian, voltage or σ sizes"));
    }
    if tv.n_elements() != sigma.len() {
        return Err(Error::usage("TV operator and σ differ in element count"));
    }
    if !(gamma > 0.0) || !(lambda >= 0.0) {
        return Err(Error::Config(format!(
            "TV needs γ > 0 and λ >= 0 (got γ = {gamma}, λ = {lambda})"
        )));
    }
    let g = tv.apply(sigma);
    let inv_e: Vec<f64> = g.iter().map(|x| 1.0 / (x * x + gamma).sqrt()).collect();
    let mut a = j.transpose() * j;
    tv.add_weighted_gram(&mut a, &inv_e, lambda);
    let mut b = j.tr_mul(&(u - v));
    let eg: Vec<f64> = g.iter().zip(&inv_e).map(|(x, d)| lambda * x * d).collect();
    let lt = tv.matrix().tr_mul_vec(&eg);
    for (bi, li) in b.iter_mut().zip(lt) {
        *bi += li;
    }
    Ok(-spd_solve(a, &b, "TV normal matrix")?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LineSearchOutcome {
    pub step: f64,
    pub objective: f64,
    /// `clamp(σ + step·δσ)`.
    pub sigma: DVector<f64>,
}

/// Picks the step in [`LINE_SEARCH_STEPS`] minimizing `F(clamp(σ + sδσ))`;
/// ties go to the larger step. Evaluator failures count as `+∞`.
pub fn line_search<F>(sigma: &DVector<f64>, delta: &DVector<f64>, mut evaluator: F) -> Result<LineSearchOutcome>
where
    F: FnMut(&DVector<f64>) -> Result<f64>,
{
    if sigma.len() != delta.len() {
        return Err(Error::usage("σ and δσ differ in length"));
    }
    let mut best: Option<LineSearchOutcome> = None;
    for &s in &LINE_SEARCH_STEPS {
        let cand = clamp_sigma(&(sigma + delta * s));
        let f = match evaluator(&cand) {
            Ok(f) if f.is_finite() => f,
            Ok(_) => continue,
            Err(e) => {
                log::debug!("line search step {s}: {e}");
                continue;
            }
        };
        if best.as_ref().is_none_or(|b| f < b.objective) {
            best = Some(LineSearchOutcome {
                step: s,
                objective: f,
                sigma: cand,
            });
        }
    }
    best.ok_or_else(|| Error::numerical("line search: every candidate step gave a non-finite objective"))
}
