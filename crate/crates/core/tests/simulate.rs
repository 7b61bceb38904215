use gcnm_core::fem::{adjacent_patterns, simulate_voltages, ContactImpedances, FemModel};
use gcnm_core::mesh::{generate_disk_mesh, BoundaryCurve, Mesh};
use gcnm_core::simulate::{
    add_noise, build_dataset, metrics, rasterize_phantom, sample_phantom, snr_estimate,
    write_metrics_csv, write_summary_csv, Dataset, DatasetConfig, ImpedanceModel, Inclusion,
    InclusionShape, MetricsReport, MetricsRow, MetricsSummary, Phantom, PhantomSpec,
};
use gcnm_core::Error;
use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const RADIUS: f64 = 140.0;

fn circle() -> BoundaryCurve {
    BoundaryCurve::Circle { radius: RADIUS }
}

fn desk_meshes() -> (Mesh, Mesh) {
    let fwd = generate_disk_mesh(RADIUS, 16, 25.0, 1250, 2).unwrap();
    let inv = generate_disk_mesh(RADIUS, 16, 25.0, 1000, 1).unwrap();
    (fwd, inv)
}

fn disk_voltages() -> DVector<f64> {
    let mesh = generate_disk_mesh(RADIUS, 16, 25.0, 400, 3).unwrap();
    let model = FemModel::new(&mesh).unwrap();
    let z = ContactImpedances::uniform(16, 5e-6).unwrap();
    let phantom = Phantom {
        background: 0.41,
        inclusions: vec![Inclusion {
            shape: InclusionShape::Ellipse { center: [20.0, -30.0], semi_axes: [30.0, 20.0], rotation: 0.4 },
            conductivity: 0.8,
        }],
    };
    let sigma = rasterize_phantom(&phantom, &mesh).unwrap();
    simulate_voltages(&model, sigma.values(), &z, &adjacent_patterns(16, 2.0).unwrap()).unwrap()
}

#[test]
fn phantom_draws_respect_table_ranges() {
    let spec = PhantomSpec::training();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut counts = [0usize; 5];
    for _ in 0..10_000 {
        let p = sample_phantom(&mut rng, &spec, &circle());
        assert!((0.40..=0.43).contains(&p.background), "{}", p.background);
        counts[p.inclusions.len()] += 1;
        for inc in &p.inclusions {
            let c = inc.conductivity;
            assert!((0.15..=0.25).contains(&c) || (0.65..=0.95).contains(&c), "{c}");
        }
    }
    assert_eq!(counts[0], 0);
    for &c in &counts[1..] {
        // Uniform over 1..=4: 2500 expected, sd ≈ 43.
        assert!((2300..=2700).contains(&c), "{counts:?}");
    }
}

#[test]
fn phantom_inclusions_lie_inside_and_are_seeded() {
    let spec = PhantomSpec::test_cases();
    for seed in 0..200 {
        let a = sample_phantom(&mut ChaCha8Rng::seed_from_u64(seed), &spec, &circle());
        let b = sample_phantom(&mut ChaCha8Rng::seed_from_u64(seed), &spec, &circle());
        assert_eq!(a, b);
        assert!((1..=3).contains(&a.inclusions.len()));
        for inc in &a.inclusions {
            for p in inc.shape.outline(64) {
                assert!(p[0].hypot(p[1]) <= RADIUS, "seed {seed}: {p:?}");
            }
            if let InclusionShape::Ellipse { semi_axes, .. } = inc.shape {
                assert!(semi_axes.iter().all(|s| (15.0..=35.0).contains(s)));
            }
        }
    }
    let l = sample_phantom(&mut ChaCha8Rng::seed_from_u64(3), &PhantomSpec::l_shape(), &circle());
    assert_eq!(l.inclusions.len(), 1);
    assert!(matches!(&l.inclusions[0].shape, InclusionShape::Polygon { vertices } if vertices.len() == 6));
}

#[test]
fn rasterize_trivial_cases() {
    let mesh = generate_disk_mesh(RADIUS, 16, 25.0, 300, 1).unwrap();
    let f = rasterize_phantom(&Phantom::homogeneous(0.41), &mesh).unwrap();
    assert!(f.values().iter().all(|&s| s == 0.41));
    let cover = Phantom {
        background: 0.41,
        inclusions: vec![Inclusion {
            shape: InclusionShape::Ellipse { center: [0.0, 0.0], semi_axes: [200.0, 200.0], rotation: 0.0 },
            conductivity: 0.9,
        }],
    };
    let f = rasterize_phantom(&cover, &mesh).unwrap();
    assert!(f.values().iter().all(|&s| s == 0.9));
    assert_eq!(f.mesh_hash(), mesh.content_hash());
}

#[test]
fn rasterized_area_matches_inclusion_area() {
    let (_, mesh) = desk_meshes();
    let disk = Phantom {
        background: 0.41,
        inclusions: vec![Inclusion {
            shape: InclusionShape::Ellipse { center: [0.0, 0.0], semi_axes: [35.0, 35.0], rotation: 0.0 },
            conductivity: 0.2,
        }],
    };
    let f = rasterize_phantom(&disk, &mesh).unwrap();
    let tagged: f64 = (0..mesh.n_elements())
        .filter(|&e| f.values()[e] == 0.2)
        .map(|e| mesh.element_area(e))
        .sum();
    let fraction = tagged / mesh.total_area();
    let ratio = (35.0f64 / RADIUS).powi(2);
    assert!((fraction - ratio).abs() < 0.05 * ratio, "{fraction} vs {ratio}");
}

#[test]
fn noise_trivial_cases() {
    let v = disk_voltages();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert_eq!(add_noise(&v, 16, 0.0, &mut rng), v);
    assert_eq!(snr_estimate(&v, &v), f64::INFINITY);
    let noisy = &v + &v / 10.0;
    assert!((snr_estimate(&v, &noisy) - 20.0).abs() < 1e-12);
}

#[test]
fn noise_has_the_stated_scale_and_zero_mean() {
    let v = disk_voltages();
    let l = 16;
    let trials = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = v.len();
    let mut sum = vec![0.0; n];
    let mut sq = vec![0.0; n];
    for _ in 0..trials {
        let d = add_noise(&v, l, 0.005, &mut rng) - &v;
        for i in 0..n {
            sum[i] += d[i];
            sq[i] += d[i] * d[i];
        }
    }
    for (p, block) in v.as_slice().chunks(l).enumerate() {
        let expected = 0.005 * block.iter().map(|x| x.abs()).sum::<f64>() / l as f64;
        let mut pooled = 0.0;
        for i in p * l..(p + 1) * l {
            pooled += sq[i] / trials as f64;
            let se = expected / (trials as f64).sqrt();
            assert!((sum[i] / trials as f64).abs() < 3.0 * se + 1e-18, "bias at {i}");
        }
        let std = (pooled / l as f64).sqrt();
        assert!((std / expected - 1.0).abs() < 0.05, "pattern {p}: {std} vs {expected}");
    }
}

#[test]
fn snr_anchors() {
    let v = disk_voltages();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for (nu, target) in [(0.005, 51.0), (0.02, 39.0)] {
        let mean = (0..100).map(|_| snr_estimate(&v, &add_noise(&v, 16, nu, &mut rng))).sum::<f64>() / 100.0;
        assert!((mean - target).abs() <= 3.0, "ν = {nu}: {mean} dB");
    }
}

fn config(n: usize, nu: f64) -> DatasetConfig {
    DatasetConfig {
        n_samples: n,
        nu,
        impedance: ImpedanceModel::default(),
        seed: 2024,
        phantom: PhantomSpec::training(),
        allow_same_mesh: false,
    }
}

#[test]
fn dataset_is_deterministic_and_round_trips() {
    let (fwd, inv) = desk_meshes();
    let pats = adjacent_patterns(16, 2.0).unwrap();
    let a = build_dataset(&config(6, 0.005), &fwd, &inv, &pats).unwrap();
    let b = build_dataset(&config(6, 0.005), &fwd, &inv, &pats).unwrap();
    assert_eq!(a, b);
    let dir = tempfile::tempdir().unwrap();
    let (pa, pb) = (dir.path().join("a.json"), dir.path().join("b.json"));
    a.save(&pa).unwrap();
    b.save(&pb).unwrap();
    assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    assert_eq!(std::fs::read(pa.with_extension("bin")).unwrap(), std::fs::read(pb.with_extension("bin")).unwrap());
    let back = Dataset::load(&pa).unwrap();
    assert_eq!(back, a);
    assert_eq!(back.fingerprint(), a.fingerprint());

    for s in &a.samples {
        assert_eq!(s.voltages.len(), 15 * 16);
        assert_eq!(s.sigma_true.len(), inv.n_elements());
        assert_eq!(s.sigma_true, rasterize_phantom(&s.phantom, &inv).unwrap().into_values());
        assert!(s.z.iter().all(|&z| z > 0.0));
    }
    let other = build_dataset(&DatasetConfig { seed: 7, ..config(6, 0.005) }, &fwd, &inv, &pats).unwrap();
    assert_ne!(other.fingerprint(), a.fingerprint());

    let mut bytes = std::fs::read(pa.with_extension("bin")).unwrap();
    bytes[100] ^= 1;
    std::fs::write(pa.with_extension("bin"), bytes).unwrap();
    assert!(matches!(Dataset::load(&pa), Err(Error::Lineage(_))));
}

#[test]
fn dataset_refuses_inverse_crime() {
    let (_, inv) = desk_meshes();
    let pats = adjacent_patterns(16, 2.0).unwrap();
    assert!(matches!(build_dataset(&config(2, 0.0), &inv, &inv, &pats), Err(Error::Config(_))));
    let allowed = DatasetConfig { allow_same_mesh: true, ..config(2, 0.0) };
    let d = build_dataset(&allowed, &inv, &inv, &pats).unwrap();
    // Same mesh and no noise: V is U(σ_true) exactly.
    let model = FemModel::new(&inv).unwrap();
    for s in &d.samples {
        let z = ContactImpedances::new(s.z.clone()).unwrap();
        assert_eq!(simulate_voltages(&model, &s.sigma_true, &z, &pats).unwrap(), s.voltages);
    }
}

#[test]
fn cross_mesh_discrepancy_is_bounded() {
    let (fwd, inv) = desk_meshes();
    let pats = adjacent_patterns(16, 2.0).unwrap();
    let d = build_dataset(&config(8, 0.0), &fwd, &inv, &pats).unwrap();
    let model = FemModel::new(&inv).unwrap();
    for s in &d.samples {
        assert_eq!(s.voltages, s.clean);
        let z = ContactImpedances::new(s.z.clone()).unwrap();
        let u = simulate_voltages(&model, &s.sigma_true, &z, &pats).unwrap();
        let re = (&u - &s.voltages).norm() / s.voltages.norm();
        assert!(re < 0.02, "sample {}: {re}", s.index);
    }
}

#[test]
fn dataset_split_is_seeded() {
    let (fwd, inv) = desk_meshes();
    let pats = adjacent_patterns(16, 2.0).unwrap();
    let d = build_dataset(&config(10, 0.005), &fwd, &inv, &pats).unwrap();
    let (train, val) = d.split(0.2, 3).unwrap();
    assert_eq!((train.len(), val.len()), (8, 2));
    assert_eq!(d.split(0.2, 3).unwrap(), (train.clone(), val.clone()));
    let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..10).collect::<Vec<_>>());
    assert!(matches!(d.split(0.0, 3), Err(Error::Config(_))));
}

#[test]
fn impedance_draws_follow_the_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let m = ImpedanceModel::default();
    let draws: Vec<f64> = (0..2000).flat_map(|_| m.sample(16, &mut rng).unwrap().values().to_vec()).collect();
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let sd = (draws.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((mean / 5e-6 - 1.0).abs() < 0.01, "{mean}");
    assert!((sd / 0.5e-6 - 1.0).abs() < 0.05, "{sd}");
}

#[test]
fn metrics_identities() {
    let sigma = DVector::from_vec(vec![0.2, 0.4, 0.9, 0.41]);
    let v = DVector::from_vec(vec![1.0, -2.0, 3.0]);
    let r = metrics(&sigma, &sigma, &v, &v, 4).unwrap();
    assert_eq!(
        r,
        MetricsReport { mse_sigma: 0.0, dynamic_range: Some(100.0), re_sigma_l1: 0.0, re_v_l2: 0.0, iterations: 4 }
    );
    let r2 = metrics(&(&sigma * 2.0), &sigma, &v, &v, 0).unwrap();
    assert_eq!(r2.dynamic_range, Some(200.0));
    assert_eq!(r2.re_sigma_l1, 1.0);
    let flat = DVector::from_element(4, 0.4);
    assert_eq!(metrics(&sigma, &flat, &v, &v, 0).unwrap().dynamic_range, None);
    assert!(matches!(metrics(&sigma, &v, &v, &v, 0), Err(Error::Usage(_))));
}

#[test]
fn metrics_match_independent_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let m = 500;
    let rec: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..1.0)).collect();
    let tru: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..1.0)).collect();
    let u: Vec<f64> = (0..256).map(|_| rng.random_range(-5.0..5.0)).collect();
    let v: Vec<f64> = (0..256).map(|_| rng.random_range(-5.0..5.0)).collect();
    let r = metrics(
        &DVector::from_vec(rec.clone()),
        &DVector::from_vec(tru.clone()),
        &DVector::from_vec(u.clone()),
        &DVector::from_vec(v.clone()),
        7,
    )
    .unwrap();
    let mut mse = 0.0;
    let mut l1 = 0.0;
    let mut l1t = 0.0;
    for i in 0..m {
        mse += (rec[i] - tru[i]) * (rec[i] - tru[i]);
        l1 += (rec[i] - tru[i]).abs();
        l1t += tru[i].abs();
    }
    mse /= m as f64;
    let max = |x: &[f64]| x.iter().cloned().fold(f64::MIN, f64::max);
    let min = |x: &[f64]| x.iter().cloned().fold(f64::MAX, f64::min);
    let dr = 100.0 * (max(&rec) - min(&rec)) / (max(&tru) - min(&tru));
    let num: f64 = u.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let den: f64 = v.iter().map(|b| b * b).sum::<f64>().sqrt();
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs();
    assert!(close(r.mse_sigma, mse));
    assert!(close(r.dynamic_range.unwrap(), dr));
    assert!(close(r.re_sigma_l1, l1 / l1t));
    assert!(close(r.re_v_l2, num / den));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_are_scale_covariant(
        rec in prop::collection::vec(0.05f64..1.0, 3..40),
        c in 0.1f64..10.0,
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tru: DVector<f64> = DVector::from_fn(rec.len(), |_, _| rng.random_range(0.05..1.0));
        let rec = DVector::from_vec(rec);
        let v = DVector::from_element(4, 1.0);
        let a = metrics(&rec, &tru, &v, &v, 0).unwrap();
        let b = metrics(&(&rec * c), &(&tru * c), &v, &v, 0).unwrap();
        prop_assert!((b.mse_sigma - c * c * a.mse_sigma).abs() <= 1e-12 * (c * c * a.mse_sigma).max(1e-300));
        prop_assert!((b.re_sigma_l1 - a.re_sigma_l1).abs() <= 1e-12 * a.re_sigma_l1.max(1e-300));
        prop_assert!((b.dynamic_range.unwrap() - a.dynamic_range.unwrap()).abs() <= 1e-10 * a.dynamic_range.unwrap());
    }
}

#[test]
fn metrics_csv_layout() {
    let report = MetricsReport { mse_sigma: 1.71e-3, dynamic_range: Some(92.5), re_sigma_l1: 0.08, re_v_l2: 9.44e-3, iterations: 5 };
    let rows = vec![
        MetricsRow { case: "1".into(), method: "gcnm".into(), sample: 0, report },
        MetricsRow { case: "1".into(), method: "gcnm".into(), sample: 1, report: MetricsReport { dynamic_range: None, ..report } },
    ];
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.csv");
    write_metrics_csv(&p, &rows).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "case,method,sample,its,mse_sigma,re_sigma_l1,re_v_l2,dr_percent");
    assert_eq!(lines.len(), 3);
    assert!(lines[2].ends_with(",nan"));

    let summary = MetricsSummary::of(&[rows[0].report, rows[1].report]);
    assert_eq!(summary.dynamic_range, Some(92.5));
    assert_eq!(summary.iterations, 5.0);
    let p2 = dir.path().join("s.csv");
    write_summary_csv(&p2, &[("1".into(), "gcnm".into(), summary)]).unwrap();
    let text = std::fs::read_to_string(&p2).unwrap();
    assert_eq!(text.lines().nth(1).unwrap(), "1,gcnm,2,5.0,1.71e-3,8.00e-2,9.44e-3,92.5");
}
