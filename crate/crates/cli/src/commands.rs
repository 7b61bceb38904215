use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gcnm_core::fem::{adjacent_patterns, trig_patterns, ConductivityField, CurrentPatternSet, PatternKind};
use gcnm_core::gcnm::{
    gcnm_reconstruct, gresnet_reconstruct, train_gcnm_with, train_gresnet, GResNetModel, GcnmModel, GcnmOptions,
    ReconSetup,
};
use gcnm_core::mesh::Mesh;
use gcnm_core::recon::ReconResult;
use gcnm_core::render::render_png;
use gcnm_core::simulate::cases::{case_datasets, case_meshes, evaluate_case, summarize, Method, Models, Reconstructor};
use gcnm_core::simulate::{
    build_dataset, metrics, print_summary_table, snr_estimate, write_metrics_csv, write_summary_csv, Dataset,
    DatasetConfig,
};
use gcnm_core::Error;

use crate::config::RunConfig;
use crate::{Cli, Command, ModelKind, ReconMethod, TrainArgs};

const DEFAULT_OUTPUT_ROOT: &str = "gcnm-runs";

/// Artifact locations under the output root.
struct Layout {
    root: PathBuf,
}

impl Layout {
    fn mesh(&self, case: u8, role: &str) -> PathBuf {
        self.root.join("meshes").join(format!("case{case}-{role}.json"))
    }

    fn dataset(&self) -> PathBuf {
        self.root.join("data").join("train.json")
    }

    fn model(&self, kind: ModelKind) -> PathBuf {
        let name = match kind {
            ModelKind::Gcnm => "gcnm",
            ModelKind::Gresnet => "gresnet",
        };
        self.root.join("models").join(format!("{name}.json"))
    }

    fn recon(&self, method: ReconMethod, sample: usize) -> PathBuf {
        self.root.join("recon").join(format!("{}-{sample}.json", method_of(method).name().to_lowercase()))
    }

    fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
}

fn method_of(m: ReconMethod) -> Method {
    match m {
        ReconMethod::Lm => Method::Lm,
        ReconMethod::Tv => Method::Tv,
        ReconMethod::Gcnm => Method::Gcnm,
        ReconMethod::Gcnm2 => Method::Gcnm2,
        ReconMethod::Gresnet => Method::Gresnet,
    }
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::Config(format!("{} does not exist; {hint}", path.display())).into());
    }
    Ok(())
}

fn load_mesh(path: &Path) -> Result<Mesh> {
    require(path, "run `gcnm mesh` first")?;
    Mesh::load(path).with_context(|| format!("loading mesh {}", path.display()))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    require(path, "run `gcnm simulate` first")?;
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn dataset_patterns(ds: &Dataset) -> Result<CurrentPatternSet> {
    Ok(match ds.pattern_kind {
        PatternKind::Adjacent => adjacent_patterns(ds.n_electrodes, ds.amplitude)?,
        PatternKind::Trigonometric => trig_patterns(ds.n_electrodes, ds.amplitude)?,
        PatternKind::Custom => bail!(Error::Config("datasets with custom patterns cannot be reconstructed here".into())),
    })
}

fn check_dataset_mesh(ds: &Dataset, mesh: &Mesh) -> Result<()> {
    if ds.inverse_mesh_hash != mesh.content_hash() {
        return Err(Error::Lineage(format!(
            "dataset was rasterized on inverse mesh {} but the mesh given hashes to {}",
            &ds.inverse_mesh_hash[..12.min(ds.inverse_mesh_hash.len())],
            &mesh.content_hash()[..12]
        ))
        .into());
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(root) = &cli.output_root {
        cfg.output_root = Some(root.clone());
    }
    let layout = Layout {
        root: cfg.output_root.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT)),
    };
    if let Some(t) = cli.threads {
        if t == 0 {
            bail!(Error::Config("--threads must be at least 1".into()));
        }
    }
    if cli.deterministic {
        log::info!("deterministic mode: all reductions are sequential");
    }
    match &cli.command {
        Command::Mesh { case, elements } => cmd_mesh(&mut cfg, &layout, *case, *elements),
        Command::Simulate { n_samples, seed, nu } => {
            if let Some(n) = n_samples {
                cfg.simulate.n_samples = *n;
            }
            if let Some(s) = seed {
                cfg.simulate.seed = *s;
            }
            if let Some(nu) = nu {
                cfg.simulate.nu = *nu;
            }
            cmd_simulate(&cfg, &layout)
        }
        Command::Train { model, opts } => cmd_train(&mut cfg, &layout, *model, opts),
        Command::Reconstruct {
            method,
            dataset,
            mesh,
            sample,
            lambda,
            scale,
            model,
        } => cmd_reconstruct(
            &cfg,
            &layout,
            *method,
            dataset.as_deref(),
            mesh.as_deref(),
            model.as_deref(),
            *sample,
            *lambda,
            *scale,
        ),
        Command::Evaluate { cases, methods, n_samples } => {
            if let Some(n) = n_samples {
                cfg.cases.n_samples = *n;
                cfg.cases.l_shape_samples = cfg.cases.l_shape_samples.min(*n);
            }
            cmd_evaluate(&cfg, &layout, cases, methods.as_deref())
        }
        Command::Render {
            recon,
            dataset,
            sample,
            truth,
            mesh,
            out,
        } => cmd_render(&cfg, &layout, recon.as_deref(), dataset.as_deref(), *sample, *truth, mesh.as_deref(), out),
    }
}

fn cmd_mesh(cfg: &mut RunConfig, layout: &Layout, case: u8, elements: Option<usize>) -> Result<()> {
    if let Some(n) = elements {
        cfg.cases.inverse_elements = n;
        cfg.cases.forward_elements = n + n / 4;
    }
    let (fwd, inv) = case_meshes(case, &cfg.cases)?;
    for (role, m) in [("forward", &fwd), ("inverse", &inv)] {
        let path = layout.mesh(case, role);
        m.save(&path)?;
        println!(
            "case {case} {role} mesh: {} elements, {} nodes, {} electrodes, perimeter {:.1} mm -> {}",
            m.n_elements(),
            m.n_nodes(),
            m.n_electrodes(),
            m.boundary_length(),
            path.display()
        );
    }
    cfg.write_resolved(&layout.root.join("meshes"), &format!("case{case}-mesh"))?;
    Ok(())
}

fn cmd_simulate(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    let fwd = load_mesh(&layout.mesh(1, "forward"))?;
    let inv = load_mesh(&layout.mesh(1, "inverse"))?;
    let s = &cfg.simulate;
    let dc = DatasetConfig {
        n_samples: s.n_samples,
        nu: s.nu,
        impedance: cfg.cases.impedance,
        seed: s.seed,
        phantom: s.phantom.clone(),
        allow_same_mesh: false,
    };
    let ds = build_dataset(&dc, &fwd, &inv, &cfg.cases.patterns()?)?;
    let path = layout.dataset();
    ds.save(&path)?;
    let snr: Vec<f64> = ds
        .samples
        .iter()
        .map(|x| snr_estimate(&x.clean, &x.voltages))
        .filter(|x| x.is_finite())
        .collect();
    let mean_snr = if snr.is_empty() { f64::INFINITY } else { snr.iter().sum::<f64>() / snr.len() as f64 };
    println!(
        "{} samples, ν = {}, mean SNR {:.1} dB -> {}",
        ds.samples.len(),
        s.nu,
        mean_snr,
        path.display()
    );
    cfg.write_resolved(path.parent().unwrap(), "simulate")?;
    Ok(())
}

fn cmd_train(cfg: &mut RunConfig, layout: &Layout, kind: ModelKind, a: &TrainArgs) -> Result<()> {
    let t = &mut cfg.train;
    if let Some(k) = a.k_max {
        t.k_max = k;
    }
    if let Some(e) = a.max_epochs {
        t.fit.max_epochs = e;
    }
    if let Some(p) = a.patience {
        t.fit.patience = p;
    }
    if let Some(s) = a.seed {
        t.seed = s;
    }
    let mesh = load_mesh(&layout.mesh(1, "inverse"))?;
    let ds = load_dataset(&layout.dataset())?;
    check_dataset_mesh(&ds, &mesh)?;
    let setup = ReconSetup::new(&mesh, dataset_patterns(&ds)?)?;
    let path = layout.model(kind);
    let meta = serde_json::json!({ "dataset": ds.fingerprint(), "mesh": mesh.content_hash() });
    match kind {
        ModelKind::Gcnm => {
            let resume = if a.resume && path.exists() {
                let m = GcnmModel::load(&path)?;
                if m.lambda != cfg.train.lambda || m.seed != cfg.train.seed {
                    bail!(Error::Lineage(format!(
                        "{} was trained with λ = {}, seed {}; the configuration asks for λ = {}, seed {}",
                        path.display(),
                        m.lambda,
                        m.seed,
                        cfg.train.lambda,
                        cfg.train.seed
                    )));
                }
                println!("resuming from {} trained blocks", m.blocks.len());
                m.blocks
            } else {
                Vec::new()
            };
            let train_graph = setup.operator.source().to_string();
            let tc = cfg.train.clone();
            let (model, report) = train_gcnm_with(&ds, &setup, &mesh, &tc, &resume, |blocks, r| {
                println!(
                    "block {}: validation MSE {:.4e} (zero network {:.4e}) after {} epochs",
                    r.block, r.fit.best_val_loss, r.zero_baseline, r.fit.epochs
                );
                let partial = GcnmModel {
                    blocks: blocks.to_vec(),
                    lambda: tc.lambda,
                    train_graph: train_graph.clone(),
                    seed: tc.seed,
                };
                partial.save(&path, meta.clone())
            })?;
            model.save(&path, meta)?;
            write_report(&path, &report)?;
        }
        ModelKind::Gresnet => {
            let (model, report) = train_gresnet(&ds, &setup, &mesh, &cfg.train)?;
            println!(
                "GResNet: validation MSE {:.4e} (input {:.4e}) after {} epochs",
                report.fit.best_val_loss, report.fit.initial_val_loss, report.fit.epochs
            );
            model.save(&path, meta)?;
            write_report(&path, &report)?;
        }
    }
    println!("model -> {}", path.display());
    cfg.write_resolved(path.parent().unwrap(), &format!("train-{kind:?}").to_lowercase())?;
    Ok(())
}

fn write_report(model_path: &Path, report: &impl serde::Serialize) -> Result<()> {
    let p = model_path.with_extension("report.json");
    std::fs::write(&p, serde_json::to_string_pretty(report)?)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_reconstruct(
    cfg: &RunConfig,
    layout: &Layout,
    method: ReconMethod,
    dataset: Option<&Path>,
    mesh: Option<&Path>,
    model: Option<&Path>,
    sample: usize,
    lambda: Option<f64>,
    scale: Option<f64>,
) -> Result<()> {
    let model_path = |kind| model.map(Path::to_path_buf).unwrap_or_else(|| layout.model(kind));
    let mesh = load_mesh(&mesh.map(Path::to_path_buf).unwrap_or_else(|| layout.mesh(1, "inverse")))?;
    let ds = load_dataset(&dataset.map(Path::to_path_buf).unwrap_or_else(|| layout.dataset()))?;
    check_dataset_mesh(&ds, &mesh)?;
    let s = ds
        .samples
        .get(sample)
        .ok_or_else(|| Error::Config(format!("sample {sample} out of range (dataset has {})", ds.samples.len())))?;
    let mut cases = cfg.cases.clone();
    cases.n_electrodes = ds.n_electrodes;
    cases.amplitude = ds.amplitude;
    if ds.pattern_kind != PatternKind::Adjacent {
        bail!(Error::Config("only adjacent-pattern datasets are supported".into()));
    }
    if scale.is_some() && matches!(method, ReconMethod::Lm | ReconMethod::Tv) {
        bail!(Error::Config("--scale applies to the learned methods only".into()));
    }
    let rec = Reconstructor::new(&mesh, &cases)?;
    let result: ReconResult = match method {
        ReconMethod::Lm | ReconMethod::Tv => {
            if let Some(l) = lambda {
                cases.lm_lambda = l;
                cases.tv_lambda = l;
            }
            let rec = Reconstructor::new(&mesh, &cases)?;
            rec.run(method_of(method), &s.voltages, Models::default())?.expect("classical methods need no model")
        }
        ReconMethod::Gcnm | ReconMethod::Gcnm2 => {
            let model = GcnmModel::load(&model_path(ModelKind::Gcnm))?;
            let override_lambda = match (method, lambda) {
                (_, Some(l)) => Some(l),
                (ReconMethod::Gcnm2, None) => Some(cases.gcnm2_lambda),
                _ => None,
            };
            let opts = GcnmOptions {
                lambda_override: override_lambda,
                scale: scale.unwrap_or(1.0),
            };
            gcnm_reconstruct(&rec.setup, &s.voltages, &model, opts)?
        }
        ReconMethod::Gresnet => {
            if lambda.is_some() {
                bail!(Error::Config("GResNet has no λ override".into()));
            }
            let model = GResNetModel::load(&model_path(ModelKind::Gresnet))?;
            gresnet_reconstruct(&rec.setup, &s.voltages, &model, scale.unwrap_or(1.0))?
        }
    };
    let m = metrics(result.sigma_rec.values(), &s.sigma_true, &result.rec().voltages, &s.voltages, result.iterations())?;
    let path = layout.recon(method, sample);
    result.save(&path)?;
    println!(
        "{} sample {sample}: its {}, MSE_σ {:.3e}, RE_σ {:.3e}, RE_V {:.3e}, DR {} ({:?}) -> {}",
        method_of(method).name(),
        m.iterations,
        m.mse_sigma,
        m.re_sigma_l1,
        m.re_v_l2,
        m.dynamic_range.map_or("n/a".into(), |d| format!("{d:.1}%")),
        result.stop_reason,
        path.display()
    );
    cfg.write_resolved(path.parent().unwrap(), "reconstruct")?;
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, layout: &Layout, cases: &[u8], methods: Option<&[ReconMethod]>) -> Result<()> {
    let gcnm = match GcnmModel::load(&layout.model(ModelKind::Gcnm)) {
        Ok(m) => Some(m),
        Err(e) => {
            log::warn!("no GCNM model ({e}); GCNM rows skipped");
            None
        }
    };
    let gresnet = match GResNetModel::load(&layout.model(ModelKind::Gresnet)) {
        Ok(m) => Some(m),
        Err(e) => {
            log::warn!("no GResNet model ({e}); GResNet rows skipped");
            None
        }
    };
    let models = Models {
        gcnm: gcnm.as_ref(),
        gresnet: gresnet.as_ref(),
    };
    let mut rows = Vec::new();
    for &id in cases {
        let chosen: Vec<Method> = match methods {
            Some(ms) => ms.iter().map(|&m| method_of(m)).collect(),
            None => Method::ALL
                .into_iter()
                .filter(|&m| m != Method::Gcnm2 || id == 6)
                .collect(),
        };
        for case in case_datasets(id, &cfg.cases)? {
            log::info!("case {}: {} samples", case.label, case.dataset.samples.len());
            rows.extend(evaluate_case(&case, &chosen, models, &cfg.cases)?);
        }
    }
    let dir = layout.eval();
    std::fs::create_dir_all(&dir)?;
    write_metrics_csv(&dir.join("metrics.csv"), &rows)?;
    let summary = summarize(&rows);
    write_summary_csv(&dir.join("summary.csv"), &summary)?;
    print_summary_table(std::io::stdout().lock(), &summary)?;
    println!("metrics -> {}", dir.display());
    cfg.write_resolved(&dir, "evaluate")?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_render(
    cfg: &RunConfig,
    layout: &Layout,
    recon: Option<&Path>,
    dataset: Option<&Path>,
    sample: usize,
    truth_only: bool,
    mesh: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let mesh = load_mesh(&mesh.map(Path::to_path_buf).unwrap_or_else(|| layout.mesh(1, "inverse")))?;
    let truth = match dataset {
        Some(p) => {
            let ds = load_dataset(p)?;
            check_dataset_mesh(&ds, &mesh)?;
            let s = ds
                .samples
                .get(sample)
                .ok_or_else(|| Error::Config(format!("sample {sample} out of range")))?;
            Some(ConductivityField::new(&mesh, s.sigma_true.clone())?)
        }
        None => None,
    };
    let field = if truth_only {
        truth
            .clone()
            .ok_or_else(|| Error::Config("--truth needs --dataset".into()))?
    } else {
        let p = recon.ok_or_else(|| Error::Config("give --recon or --truth".into()))?;
        ReconResult::load(p)
            .with_context(|| format!("loading reconstruction {}", p.display()))?
            .sigma_rec
    };
    let img = render_png(out, &field, &mesh, &cfg.render, truth.as_ref())?;
    println!("{}x{} image {} -> {}", img.width, img.height, &img.content_hash()[..16], out.display());
    if let Some(dir) = out.parent() {
        cfg.write_resolved(if dir.as_os_str().is_empty() { Path::new(".") } else { dir }, "render")?;
    }
    Ok(())
}
