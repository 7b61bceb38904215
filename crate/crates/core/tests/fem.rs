mod common;

use gcnm_core::fem::{
    adjacent_patterns, assemble_system, forward_and_jacobian, jacobian, simulate_voltages,
    solve_forward, trig_patterns, ConductivityField, ContactImpedances, CurrentPatternSet,
    FemModel, MeasurementFrame, NoiseMetadata,
};
use gcnm_core::mesh::{generate_disk_mesh, BoundaryCurve, Mesh, MeshSpec};
use gcnm_core::Error;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn z(l: usize) -> ContactImpedances {
    ContactImpedances::uniform(l, 5e-6).unwrap()
}

fn random_sigma(m: usize, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DVector::from_fn(m, |_, _| rng.random_range(0.05..0.8))
}

/// `V[k][p]`: measured difference on pair `(p, p+1)` under adjacent drive `k`.
fn tetrapolar(u: &DVector<f64>, l: usize) -> DMatrix<f64> {
    DMatrix::from_fn(l - 1, l - 1, |k, p| u[k * l + p] - u[k * l + p + 1])
}

fn check_reciprocity(mesh: &Mesh, sigma: &DVector<f64>) {
    let l = mesh.n_electrodes();
    let model = FemModel::new(mesh).unwrap();
    let u = simulate_voltages(&model, sigma, &z(l), &adjacent_patterns(l, 1.0).unwrap()).unwrap();
    let v = tetrapolar(&u, l);
    let scale = v.amax();
    for k in 0..l - 1 {
        for p in 0..l - 1 {
            let rel = (v[(k, p)] - v[(p, k)]).abs() / scale;
            assert!(rel < 1e-8, "reciprocity ({k},{p}): {rel:e}");
        }
    }
}

#[test]
fn homogeneous_disk_reciprocity() {
    let mesh = generate_disk_mesh(140.0, 16, 20.0, 800, 2).unwrap();
    check_reciprocity(&mesh, &DVector::from_element(mesh.n_elements(), 0.3));
}

#[test]
fn system_matrix_is_symmetric() {
    let mesh = generate_disk_mesh(140.0, 8, 20.0, 200, 2).unwrap();
    let sigma = ConductivityField::constant(&mesh, 0.3).unwrap();
    let a = assemble_system(&mesh, &sigma, &z(8)).unwrap().to_dense();
    assert_eq!(a.nrows(), mesh.n_nodes() + 7);
    let asym = (&a - a.transpose()).amax();
    assert!(asym < 1e-12 * a.amax());
    // positive definite after grounding
    assert!(a.cholesky().is_some());
}

#[test]
fn stiffness_block_is_linear_in_sigma() {
    let mesh = generate_disk_mesh(140.0, 8, 20.0, 200, 2).unwrap();
    let s1 = ConductivityField::new(&mesh, random_sigma(mesh.n_elements(), 1)).unwrap();
    let s2 = ConductivityField::new(&mesh, s1.values() * 2.0).unwrap();
    let k1 = assemble_system(&mesh, &s1, &z(8)).unwrap().stiffness_block();
    let k2 = assemble_system(&mesh, &s2, &z(8)).unwrap().stiffness_block();
    assert_eq!(k1.indices, k2.indices);
    for (a, b) in k1.values.iter().zip(&k2.values) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn voltages_are_pattern_major_and_sum_to_zero() {
    let mesh = generate_disk_mesh(140.0, 16, 20.0, 600, 4).unwrap();
    let model = FemModel::new(&mesh).unwrap();
    let sigma = random_sigma(mesh.n_elements(), 3);
    let p = adjacent_patterns(16, 2.0).unwrap();
    let sys = model.assemble(&sigma, &z(16)).unwrap();
    let sol = solve_forward(&sys, &p).unwrap();
    assert_eq!(sol.voltages.len(), 15 * 16);
    for k in 0..15 {
        let u = sol.pattern_voltages(k, 16);
        let s: f64 = u.iter().sum();
        let m = u.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(s.abs() < 1e-10 * m, "pattern {k}: sum {s:e}");
        // drive electrode k sits at the highest potential
        assert!(u[k] > u[k + 1]);
        assert_eq!(u.iter().copied().fold(f64::MIN, f64::max), u[k]);
    }
}

#[test]
fn currents_scale_voltages_exactly() {
    let mesh = generate_disk_mesh(140.0, 16, 20.0, 400, 5).unwrap();
    let model = FemModel::new(&mesh).unwrap();
    let sigma = random_sigma(mesh.n_elements(), 9);
    let p = trig_patterns(16, 0.2).unwrap();
    let u1 = simulate_voltages(&model, &sigma, &z(16), &p).unwrap();
    let u4 = simulate_voltages(&model, &sigma, &z(16), &p.scaled(4.0)).unwrap();
    // scaling by a power of two is exact in floating point
    assert_eq!(&u1 * 4.0, u4);
    let u3 = simulate_voltages(&model, &sigma, &z(16), &p.scaled(3.0)).unwrap();
    assert!((u3 - &u1 * 3.0).amax() < 1e-12 * u1.amax() * 3.0);
}

#[test]
fn uniform_sigma_increase_lowers_drive_voltages() {
    let mesh = generate_disk_mesh(140.0, 16, 20.0, 600, 6).unwrap();
    let model = FemModel::new(&mesh).unwrap();
    let p = adjacent_patterns(16, 2.0).unwrap();
    let m = mesh.n_elements();
    let mut prev = f64::INFINITY;
    for s in [0.1, 0.2, 0.4, 0.8] {
        let u = simulate_voltages(&model, &DVector::from_element(m, s), &z(16), &p).unwrap();
        let drive: f64 = (0..15).map(|k| (u[k * 16 + k] - u[k * 16 + k + 1]).abs()).sum();
        assert!(drive < prev, "σ = {s}: {drive} !< {prev}");
        prev = drive;
    }
}

#[test]
fn mesh_refinement_converges() {
    let l = 16;
    let p = adjacent_patterns(l, 2.0).unwrap();
    let mut sols = Vec::new();
    for target in [8000, 32000] {
        let mesh = MeshSpec::new(BoundaryCurve::Circle { radius: 140.0 }, l, 25.0, target, 1)
            .with_edge_refinement(32.0)
            .generate()
            .unwrap();
        let model = FemModel::new(&mesh).unwrap();
        let sigma = DVector::from_element(mesh.n_elements(), 0.3);
        sols.push(simulate_voltages(&model, &sigma, &z(l), &p).unwrap());
    }
    for w in sols.windows(2) {
        let rel = (&w[1] - &w[0]).norm() / w[1].norm();
        assert!(rel < 0.01, "successive refinement change {rel:e}");
    }
}

/// Central differences with step `1e-6·σ_i`.
fn fd_jacobian(model: &FemModel, sigma: &DVector<f64>, zz: &ContactImpedances, p: &CurrentPatternSet) -> DMatrix<f64> {
    let m = sigma.len();
    let u0 = simulate_voltages(model, sigma, zz, p).unwrap();
    let mut jac = DMatrix::zeros(u0.len(), m);
    for i in 0..m {
        let h = 1e-6 * sigma[i];
        let mut sp = sigma.clone();
        sp[i] += h;
        let mut sm = sigma.clone();
        sm[i] -= h;
        let d = (simulate_voltages(model, &sp, zz, p).unwrap() - simulate_voltages(model, &sm, zz, p).unwrap())
            / (2.0 * h);
        jac.set_column(i, &d);
    }
    jac
}

#[test]
fn adjoint_jacobian_matches_central_differences() {
    let mesh = generate_disk_mesh(140.0, 8, 30.0, 200, 3).unwrap();
    assert!(mesh.n_elements() <= 300);
    let model = FemModel::new(&mesh).unwrap();
    let sigma = random_sigma(mesh.n_elements(), 4);
    let zz = z(8);
    let p = adjacent_patterns(8, 2.0).unwrap();
    let (_, j) = forward_and_jacobian(&model, &sigma, &zz, &p).unwrap();
    let fd = fd_jacobian(&model, &sigma, &zz, &p);
    let frob = (&j - &fd).norm() / fd.norm();
    assert!(frob < 1e-4, "relative Frobenius error {frob:e}");
    // entry-wise, relative to the entry with a floor at 1% of the largest
    // (FD rounding is ~ε·|A|/h, and contact terms dominate |A| near electrodes)
    let floor = 1e-2 * fd.amax();
    let worst = j
        .iter()
        .zip(fd.iter())
        .map(|(a, b)| (a - b).abs() / b.abs().max(floor))
        .fold(0.0, f64::max);
    assert!(worst < 1e-4, "max relative entry error {worst:e}");
}

#[test]
fn jacobian_is_deterministic() {
    let mesh = generate_disk_mesh(140.0, 8, 30.0, 200, 3).unwrap();
    let model = FemModel::new(&mesh).unwrap();
    let sigma = random_sigma(mesh.n_elements(), 5);
    let p = adjacent_patterns(8, 2.0).unwrap();
    let (_, a) = forward_and_jacobian(&model, &sigma, &z(8), &p).unwrap();
    let (_, b) = forward_and_jacobian(&model, &sigma.clone(), &z(8), &p).unwrap();
    assert_eq!(a, b);
}

#[test]
fn jacobian_respects_rotational_symmetry() {
    let l = 16;
    let mesh = common::polar_disk(140.0, l, 6, 1);
    mesh.validate().unwrap();
    let rot = common::rotation_map(&mesh, l);
    let model = FemModel::new(&mesh).unwrap();
    let sigma = DVector::from_element(mesh.n_elements(), 0.3);
    let p = adjacent_patterns(l, 2.0).unwrap();
    let (_, j) = forward_and_jacobian(&model, &sigma, &z(l), &p).unwrap();
    let scale = j.amax();
    let mut worst = 0.0f64;
    // pattern k, electrode e, element i  ↔  pattern k+1, electrode e+1, rot(i)
    for k in 0..l - 2 {
        for e in 0..l {
            let e2 = (e + 1) % l;
            for i in 0..mesh.n_elements() {
                let d = (j[(k * l + e, i)] - j[((k + 1) * l + e2, rot[i])]).abs();
                worst = worst.max(d / scale);
            }
        }
    }
    assert!(worst < 1e-6, "symmetry defect {worst:e}");
}

#[test]
fn mismatched_solution_is_a_usage_error() {
    let mesh = generate_disk_mesh(140.0, 8, 30.0, 200, 3).unwrap();
    let model = FemModel::new(&mesh).unwrap();
    let p = adjacent_patterns(8, 2.0).unwrap();
    let s1 = model.assemble(&random_sigma(mesh.n_elements(), 1), &z(8)).unwrap();
    let s2 = model.assemble(&random_sigma(mesh.n_elements(), 2), &z(8)).unwrap();
    let sol = solve_forward(&s1, &p).unwrap();
    assert!(matches!(jacobian(&s2, &sol), Err(Error::Usage(_))));
    assert!(matches!(
        solve_forward(&s1, &adjacent_patterns(9, 1.0).unwrap()),
        Err(Error::Usage(_))
    ));
}

#[test]
fn measurement_frame_round_trip_is_bit_exact() {
    let mesh = generate_disk_mesh(140.0, 8, 30.0, 200, 3).unwrap();
    let model = FemModel::new(&mesh).unwrap();
    let p = trig_patterns(8, 0.2).unwrap();
    let u = simulate_voltages(&model, &random_sigma(mesh.n_elements(), 8), &z(8), &p).unwrap();
    let frame = MeasurementFrame::new(
        8,
        p.kind(),
        p.amplitude(),
        mesh.content_hash(),
        NoiseMetadata { level: 0.005, seed: Some(11) },
        u,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("frame.json");
    frame.save(&path).unwrap();
    let back = MeasurementFrame::load(&path).unwrap();
    assert_eq!(back, frame);
    assert_eq!(back.n_patterns, 7);

    let bin = path.with_extension("bin");
    let mut bytes = std::fs::read(&bin).unwrap();
    bytes[3] ^= 1;
    std::fs::write(&bin, bytes).unwrap();
    assert!(matches!(MeasurementFrame::load(&path), Err(Error::Lineage(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn reciprocity_holds_for_random_sigma(seed in 0u64..1000) {
        let mesh = generate_disk_mesh(140.0, 8, 25.0, 250, seed).unwrap();
        check_reciprocity(&mesh, &random_sigma(mesh.n_elements(), seed));
    }

    #[test]
    fn electrode_voltages_sum_to_zero(seed in 0u64..1000, zval in 1e-6f64..1e-4) {
        let mesh = generate_disk_mesh(140.0, 8, 25.0, 250, seed).unwrap();
        let model = FemModel::new(&mesh).unwrap();
        let zz = ContactImpedances::uniform(8, zval).unwrap();
        let u = simulate_voltages(&model, &random_sigma(mesh.n_elements(), seed + 1), &zz,
            &trig_patterns(8, 0.2).unwrap()).unwrap();
        for k in 0..7 {
            let s: f64 = u.rows(k * 8, 8).sum();
            prop_assert!(s.abs() < 1e-10 * u.amax());
        }
    }
}
