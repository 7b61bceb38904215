//! The six simulated evaluation scenarios and a runner that reconstructs
//! every sample with a set of methods.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{build_dataset, metrics, Dataset, DatasetConfig, ImpedanceModel, MetricsRow, MetricsSummary, PhantomSpec};
use crate::error::{Error, Result};
use crate::fem::{adjacent_patterns, CurrentPatternSet};
use crate::gcnm::{gcnm_reconstruct, gresnet_reconstruct, GResNetModel, GcnmModel, GcnmOptions, ReconSetup};
use crate::mesh::{ArcLength, BoundaryCurve, Mesh, MeshSpec};
use crate::recon::{build_tv_matrix, iterate_classic, ClassicMethod, IterationContext, ObjectiveSpec, ReconResult, StopPolicy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaseConfig {
    pub n_electrodes: usize,
    /// mm
    pub electrode_width: f64,
    /// Pattern amplitude (mA).
    pub amplitude: f64,
    /// Radius of the training circle (mm).
    pub circle_radius: f64,
    pub chest_perimeter: f64,
    /// Semi-axes of the reconstruction oval (mm).
    pub oval: (f64, f64),
    pub inverse_elements: usize,
    pub forward_elements: usize,
    pub mesh_seed: u64,
    pub n_samples: usize,
    pub l_shape_samples: usize,
    pub nu: f64,
    pub noise_levels: Vec<f64>,
    /// Standard deviation of the electrode shift (mm).
    pub electrode_shift: f64,
    pub seed: u64,
    pub impedance: ImpedanceModel,
    pub lm_lambda: f64,
    pub tv_lambda: f64,
    pub tv_gamma: f64,
    pub max_iters: usize,
    /// λ used by the GCNM2 variant.
    pub gcnm2_lambda: f64,
}

impl Default for CaseConfig {
    fn default() -> Self {
        Self {
            n_electrodes: 16,
            electrode_width: 25.0,
            amplitude: 2.0,
            circle_radius: 140.0,
            chest_perimeter: 900.0,
            oval: (170.0, 110.0),
            inverse_elements: 1000,
            forward_elements: 1250,
            mesh_seed: 1,
            n_samples: 25,
            l_shape_samples: 10,
            nu: 0.005,
            noise_levels: vec![0.0, 0.005, 0.01, 0.02],
            electrode_shift: 1.0,
            seed: 1000,
            impedance: ImpedanceModel::default(),
            lm_lambda: 10.0,
            tv_lambda: 0.005,
            tv_gamma: 1e-8,
            max_iters: 20,
            gcnm2_lambda: 5.0,
        }
    }
}

impl CaseConfig {
    pub fn patterns(&self) -> Result<CurrentPatternSet> {
        adjacent_patterns(self.n_electrodes, self.amplitude)
    }

    fn spec(&self, curve: BoundaryCurve, elements: usize, seed: u64) -> MeshSpec {
        MeshSpec::new(curve, self.n_electrodes, self.electrode_width, elements, seed)
    }

    /// Inverse mesh of the training distribution (a circle).
    pub fn training_mesh(&self) -> Result<Mesh> {
        self.spec(BoundaryCurve::Circle { radius: self.circle_radius }, self.inverse_elements, self.mesh_seed)
            .generate()
    }

    /// Distinct forward mesh for the training circle.
    pub fn training_forward_mesh(&self) -> Result<Mesh> {
        self.spec(
            BoundaryCurve::Circle { radius: self.circle_radius },
            self.forward_elements,
            self.mesh_seed + 1,
        )
        .generate()
    }
}

/// One sample set of a case: data simulated on `forward_mesh`, truth and
/// reconstruction on `inverse_mesh`.
#[derive(Clone, Debug)]
pub struct CaseData {
    pub id: u8,
    pub label: String,
    pub forward_mesh: Mesh,
    pub inverse_mesh: Mesh,
    pub dataset: Dataset,
}

/// Equally spaced centres shifted by `N(0, sd)`, one draw per electrode.
pub fn shifted_electrode_centers(curve: &BoundaryCurve, n: usize, sd: f64, seed: u64) -> Result<Vec<f64>> {
    let p = ArcLength::new(curve).perimeter();
    let normal = Normal::new(0.0, sd).map_err(|e| Error::Config(format!("electrode shift: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|i| p * i as f64 / n as f64 + normal.sample(&mut rng)).collect())
}

/// `(forward, inverse)` meshes of case `id`.
pub fn case_meshes(id: u8, cfg: &CaseConfig) -> Result<(Mesh, Mesh)> {
    let chest = BoundaryCurve::chest(cfg.chest_perimeter);
    let (fwd_seed, inv_seed) = (cfg.mesh_seed + 1, cfg.mesh_seed);
    match id {
        1 | 5 | 6 => Ok((cfg.training_forward_mesh()?, cfg.training_mesh()?)),
        2 => Ok((
            cfg.spec(chest.clone(), cfg.forward_elements, fwd_seed).generate()?,
            cfg.spec(chest, cfg.inverse_elements, inv_seed).generate()?,
        )),
        3 => {
            let centers = shifted_electrode_centers(&chest, cfg.n_electrodes, cfg.electrode_shift, cfg.seed ^ 0x5417)?;
            Ok((
                cfg.spec(chest.clone(), cfg.forward_elements, fwd_seed)
                    .with_electrode_centers(centers)
                    .generate()?,
                cfg.spec(chest, cfg.inverse_elements, inv_seed).generate()?,
            ))
        }
        4 => {
            let oval = BoundaryCurve::Ellipse { semi_x: cfg.oval.0, semi_y: cfg.oval.1 };
            Ok((
                cfg.spec(chest, cfg.forward_elements, fwd_seed).generate()?,
                cfg.spec(oval, cfg.inverse_elements, inv_seed).generate()?,
            ))
        }
        _ => Err(Error::Config(format!("unknown case {id}; cases are 1 to 6"))),
    }
}

/// Simulates the sample sets of case `id`. Case 6 yields one set per noise
/// level; every other case yields one.
pub fn case_datasets(id: u8, cfg: &CaseConfig) -> Result<Vec<CaseData>> {
    let (fwd, inv) = case_meshes(id, cfg)?;
    let patterns = cfg.patterns()?;
    let base = DatasetConfig {
        n_samples: cfg.n_samples,
        nu: cfg.nu,
        impedance: cfg.impedance,
        seed: cfg.seed + id as u64,
        phantom: PhantomSpec::test_cases(),
        allow_same_mesh: false,
    };
    let runs: Vec<(String, DatasetConfig)> = match id {
        5 => vec![(
            "5".into(),
            DatasetConfig {
                n_samples: cfg.l_shape_samples,
                phantom: PhantomSpec::l_shape(),
                ..base
            },
        )],
        6 => cfg
            .noise_levels
            .iter()
            .map(|&nu| (format!("6@{nu}"), DatasetConfig { nu, ..base.clone() }))
            .collect(),
        _ => vec![(id.to_string(), base)],
    };
    runs.into_iter()
        .map(|(label, dc)| {
            Ok(CaseData {
                id,
                label,
                dataset: build_dataset(&dc, &fwd, &inv, &patterns)?,
                forward_mesh: fwd.clone(),
                inverse_mesh: inv.clone(),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Lm,
    Tv,
    Gcnm,
    /// GCNM with the case configuration's λ override.
    Gcnm2,
    Gresnet,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Lm, Method::Tv, Method::Gcnm, Method::Gcnm2, Method::Gresnet];

    pub fn name(self) -> &'static str {
        match self {
            Method::Lm => "LM",
            Method::Tv => "TV",
            Method::Gcnm => "GCNM",
            Method::Gcnm2 => "GCNM2",
            Method::Gresnet => "GResNet",
        }
    }
}

/// Trained models available to the runner.
#[derive(Clone, Copy, Debug, Default)]
pub struct Models<'a> {
    pub gcnm: Option<&'a GcnmModel>,
    pub gresnet: Option<&'a GResNetModel>,
}

/// Shared per-mesh state for reconstructing many samples.
pub struct Reconstructor {
    pub setup: ReconSetup,
    tv: crate::recon::TvOperator,
    cfg: CaseConfig,
}

impl Reconstructor {
    pub fn new(mesh: &Mesh, cfg: &CaseConfig) -> Result<Self> {
        Ok(Self {
            setup: ReconSetup::new(mesh, cfg.patterns()?)?,
            tv: build_tv_matrix(mesh),
            cfg: cfg.clone(),
        })
    }

    /// `None` when the method needs a model that is not available.
    pub fn run(&self, method: Method, v: &nalgebra::DVector<f64>, models: Models<'_>) -> Result<Option<ReconResult>> {
        let s = &self.setup;
        let classic = |m: ClassicMethod, spec: ObjectiveSpec| {
            let ctx = IterationContext {
                model: &s.model,
                patterns: &s.patterns,
                z: &s.z,
                v,
                spec,
                tv: Some(&self.tv),
            };
            iterate_classic(&ctx, m, self.cfg.max_iters, StopPolicy::classic(), s.constant_interval)
        };
        Ok(match method {
            Method::Lm => Some(classic(ClassicMethod::Lm, ObjectiveSpec::lm(self.cfg.lm_lambda))?),
            Method::Tv => Some(classic(ClassicMethod::Tv, ObjectiveSpec::tv(self.cfg.tv_lambda, self.cfg.tv_gamma))?),
            Method::Gcnm | Method::Gcnm2 => match models.gcnm {
                None => None,
                Some(m) => {
                    let opts = GcnmOptions {
                        lambda_override: (method == Method::Gcnm2).then_some(self.cfg.gcnm2_lambda),
                        ..GcnmOptions::default()
                    };
                    Some(gcnm_reconstruct(s, v, m, opts)?)
                }
            },
            Method::Gresnet => match models.gresnet {
                None => None,
                Some(m) => Some(gresnet_reconstruct(s, v, m, 1.0)?),
            },
        })
    }
}

/// Reconstructs every sample of `case` with every method in `methods`.
/// Methods without a model are skipped with a warning.
pub fn evaluate_case(case: &CaseData, methods: &[Method], models: Models<'_>, cfg: &CaseConfig) -> Result<Vec<MetricsRow>> {
    if case.dataset.inverse_mesh_hash != case.inverse_mesh.content_hash() {
        return Err(Error::Lineage(format!("case {} data belongs to another inverse mesh", case.label)));
    }
    let rec = Reconstructor::new(&case.inverse_mesh, cfg)?;
    let mut rows = Vec::new();
    for &method in methods {
        for s in &case.dataset.samples {
            let Some(r) = rec.run(method, &s.voltages, models)? else {
                log::warn!("case {}: no model for {}, skipped", case.label, method.name());
                break;
            };
            if let Some(e) = &r.error {
                log::warn!("case {} sample {} {}: {e}", case.label, s.index, method.name());
            }
            rows.push(MetricsRow {
                case: case.label.clone(),
                method: method.name().into(),
                sample: s.index,
                report: metrics(r.sigma_rec.values(), &s.sigma_true, &r.rec().voltages, &s.voltages, r.iterations())?,
            });
        }
    }
    Ok(rows)
}

/// Means per `(case, method)`, in order of first appearance.
pub fn summarize(rows: &[MetricsRow]) -> Vec<(String, String, MetricsSummary)> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in rows {
        let k = (r.case.clone(), r.method.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(c, m)| {
            let reports: Vec<_> = rows
                .iter()
                .filter(|r| r.case == c && r.method == m)
                .map(|r| r.report)
                .collect();
            let s = MetricsSummary::of(&reports);
            (c, m, s)
        })
        .collect()
}
