//! Shared fixtures for the benchmarks: a desk-scale disk mesh with 16
//! electrodes and a representative conductivity.

use gcnm_core::fem::{adjacent_patterns, ContactImpedances, CurrentPatternSet, FemModel, DEFAULT_CONTACT_IMPEDANCE};
use gcnm_core::mesh::{generate_disk_mesh, Mesh};
use nalgebra::DVector;

pub struct Fixture {
    pub mesh: Mesh,
    pub model: FemModel,
    pub patterns: CurrentPatternSet,
    pub z: ContactImpedances,
    pub sigma: DVector<f64>,
}

pub fn fixture(elements: usize) -> Fixture {
    let mesh = generate_disk_mesh(140.0, 16, 25.0, elements, 1).expect("mesh");
    let model = FemModel::new(&mesh).expect("model");
    let sigma = DVector::from_fn(mesh.n_elements(), |e, _| {
        let c = mesh.centroid(e);
        if c[0].hypot(c[1] - 40.0) < 30.0 { 0.8 } else { 0.41 }
    });
    Fixture {
        patterns: adjacent_patterns(16, 2.0).expect("patterns"),
        z: ContactImpedances::uniform(16, DEFAULT_CONTACT_IMPEDANCE).expect("impedances"),
        mesh,
        model,
        sigma,
    }
}
