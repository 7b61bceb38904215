//! Phantoms, measurement noise, datasets and the evaluation metrics.

pub mod cases;
mod dataset;
mod phantom;

pub use dataset::{
    build_dataset, forward_voltages, sample_rng, Dataset, DatasetConfig, DatasetSample, ImpedanceModel,
    DATASET_FORMAT_VERSION,
};
pub use phantom::{
    domain_outline, rasterize_phantom, sample_phantom, Inclusion, InclusionShape, Phantom,
    PhantomSpec, TargetKind,
};

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `v_p ← v_p + ν·mean(|v_p|)·ε_p` for every pattern block of `n_electrodes`
/// entries, with `ε_p` standard normal.
pub fn add_noise<R: Rng + ?Sized>(v: &DVector<f64>, n_electrodes: usize, nu: f64, rng: &mut R) -> DVector<f64> {
    assert!(n_electrodes > 0 && v.len() % n_electrodes == 0, "voltages do not split into patterns");
    let mut out = v.clone();
    if nu == 0.0 {
        return out;
    }
    for block in out.as_mut_slice().chunks_mut(n_electrodes) {
        let scale = nu * block.iter().map(|x| x.abs()).sum::<f64>() / n_electrodes as f64;
        for x in block {
            let e: f64 = rng.sample(StandardNormal);
            *x += scale * e;
        }
    }
    out
}

/// `20·log10(‖clean‖ / ‖noisy − clean‖)`; `+∞` when there is no noise.
pub fn snr_estimate(clean: &DVector<f64>, noisy: &DVector<f64>) -> f64 {
    assert_eq!(clean.len(), noisy.len());
    let n = (noisy - clean).norm();
    if n == 0.0 {
        f64::INFINITY
    } else {
        20.0 * (clean.norm() / n).log10()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mse_sigma: f64,
    /// Dynamic range in percent; `None` when the truth is constant.
    pub dynamic_range: Option<f64>,
    pub re_sigma_l1: f64,
    pub re_v_l2: f64,
    pub iterations: usize,
}

pub fn metrics(
    sigma_rec: &DVector<f64>,
    sigma_true: &DVector<f64>,
    u_rec: &DVector<f64>,
    v: &DVector<f64>,
    iterations: usize,
) -> Result<MetricsReport> {
    if sigma_rec.len() != sigma_true.len() || u_rec.len() != v.len() {
        return Err(Error::usage("metrics: fields or voltages differ in length"));
    }
    let d = sigma_rec - sigma_true;
    let true_range = sigma_true.max() - sigma_true.min();
    Ok(MetricsReport {
        mse_sigma: d.norm_squared() / d.len() as f64,
        dynamic_range: (true_range > 0.0)
            .then(|| 100.0 * (sigma_rec.max() - sigma_rec.min()) / true_range),
        re_sigma_l1: d.lp_norm(1) / sigma_true.lp_norm(1),
        re_v_l2: (u_rec - v).norm() / v.norm(),
        iterations,
    })
}

/// Sample means of a set of reports, in the column layout of the results
/// table: iterations, MSE_σ, RE_σ^ℓ1, RE_V^ℓ2, DR(%).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub n_samples: usize,
    pub iterations: f64,
    pub mse_sigma: f64,
    pub re_sigma_l1: f64,
    pub re_v_l2: f64,
    /// Mean over samples with a defined dynamic range.
    pub dynamic_range: Option<f64>,
}

impl MetricsSummary {
    pub fn of(reports: &[MetricsReport]) -> Self {
        let n = reports.len().max(1) as f64;
        let mean = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let drs: Vec<f64> = reports.iter().filter_map(|r| r.dynamic_range).collect();
        Self {
            n_samples: reports.len(),
            iterations: mean(&|r| r.iterations as f64),
            mse_sigma: mean(&|r| r.mse_sigma),
            re_sigma_l1: mean(&|r| r.re_sigma_l1),
            re_v_l2: mean(&|r| r.re_v_l2),
            dynamic_range: (!drs.is_empty()).then(|| drs.iter().sum::<f64>() / drs.len() as f64),
        }
    }
}

/// Per-sample metrics row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub case: String,
    pub method: String,
    pub sample: usize,
    pub report: MetricsReport,
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "nan".into(), |v| format!("{v:.1}"))
}

/// One row per (case, method, sample).
pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["case", "method", "sample", "its", "mse_sigma", "re_sigma_l1", "re_v_l2", "dr_percent"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.case.clone(),
            r.method.clone(),
            r.sample.to_string(),
            r.report.iterations.to_string(),
            format!("{:.6e}", r.report.mse_sigma),
            format!("{:.6e}", r.report.re_sigma_l1),
            format!("{:.6e}", r.report.re_v_l2),
            fmt_opt(r.report.dynamic_range),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Aggregate table: one row per (case, method) with the means.
pub fn write_summary_csv(path: &Path, rows: &[(String, String, MetricsSummary)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["case", "method", "n", "its", "mse_sigma", "re_sigma_l1", "re_v_l2", "dr_percent"])
        .map_err(csv_err)?;
    for (case, method, s) in rows {
        w.write_record([
            case.clone(),
            method.clone(),
            s.n_samples.to_string(),
            format!("{:.1}", s.iterations),
            format!("{:.2e}", s.mse_sigma),
            format!("{:.2e}", s.re_sigma_l1),
            format!("{:.2e}", s.re_v_l2),
            fmt_opt(s.dynamic_range),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Human-readable table of summaries.
pub fn print_summary_table(mut out: impl Write, rows: &[(String, String, MetricsSummary)]) -> std::io::Result<()> {
    writeln!(out, "{:<6} {:<10} {:>5} {:>10} {:>10} {:>10} {:>8}", "case", "method", "its", "MSE_σ", "RE_σ", "RE_V", "DR%")?;
    for (case, method, s) in rows {
        writeln!(
            out,
            "{:<6} {:<10} {:>5.1} {:>10.2e} {:>10.2e} {:>10.2e} {:>8}",
            case,
            method,
            s.iterations,
            s.mse_sigma,
            s.re_sigma_l1,
            s.re_v_l2,
            fmt_opt(s.dynamic_range)
        )?;
    }
    Ok(())
}
