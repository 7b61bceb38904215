//! Complete electrode model (CEM) forward solver on P1 triangles with
//! element-wise constant conductivity, and the adjoint Jacobian of the
//! electrode voltages.
//!
//! Units at the module boundary: geometry in mm, conductivity in S/m,
//! contact impedance in Ω·m, currents in mA. Internally lengths are converted
//! to metres, so the assembled matrix is in siemens and solving it against
//! currents in mA yields potentials in mV. The 2D domain is a slab whose
//! thickness is the electrode height; injected currents are spread over it.
//!
//! The constraint `Σ U_ℓ = 0` is built in by expanding the electrode
//! potentials in the basis `n_j = e_1 − e_{j+1}`, `j = 1..L−1`. The reduced
//! system is symmetric positive definite and is factored once per
//! conductivity; the same factor serves all current patterns and all adjoint
//! (measurement) solves of the Jacobian.

mod measurement;
mod patterns;

pub use measurement::{MeasurementFrame, NoiseMetadata, FRAME_FORMAT_VERSION};
pub use patterns::{adjacent_patterns, trig_patterns, CurrentPatternSet, PatternKind};

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::sparse::{reverse_cuthill_mckee, CsrMatrix, EnvelopeCholesky, EnvelopeMatrix};

/// Default contact impedance (Ω·m) assumed at every electrode for reconstruction.
pub const DEFAULT_CONTACT_IMPEDANCE: f64 = 5e-6;

/// Slab thickness (mm) of the 2D model when the mesh records no electrode height.
pub const DEFAULT_SLAB_THICKNESS: f64 = 20.0;

const MM: f64 = 1e-3;

/// Element-wise conductivity (S/m) tied to a specific mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct ConductivityField {
    values: DVector<f64>,
    mesh_hash: String,
}

impl ConductivityField {
    pub fn new(mesh: &Mesh, values: DVector<f64>) -> Result<Self> {
        Self::with_hash(mesh.content_hash(), mesh.n_elements(), values)
    }

    pub fn with_hash(mesh_hash: String, n_elements: usize, values: DVector<f64>) -> Result<Self> {
        if values.len() != n_elements {
            return Err(Error::usage(format!(
                "conductivity has {} values for {n_elements} elements",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Domain(format!(
                "conductivity must be positive and finite (element {i} = {})",
                values[i]
            )));
        }
        Ok(Self { values, mesh_hash })
    }

    pub fn constant(mesh: &Mesh, value: f64) -> Result<Self> {
        Self::new(mesh, DVector::from_element(mesh.n_elements(), value))
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn into_values(self) -> DVector<f64> {
        self.values
    }

    pub fn mesh_hash(&self) -> &str {
        &self.mesh_hash
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Per-electrode contact impedances (Ω·m).
#[derive(Clone, Debug, PartialEq)]
pub struct ContactImpedances(Vec<f64>);

impl ContactImpedances {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(l) = values.iter().position(|&z| !(z > 0.0) || !z.is_finite()) {
            return Err(Error::Domain(format!(
                "contact impedance must be positive (electrode {l} = {})",
                values[l]
            )));
        }
        Ok(Self(values))
    }

    pub fn uniform(n_electrodes: usize, z: f64) -> Result<Self> {
        Self::new(vec![z; n_electrodes])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

struct ElectrodeEdge {
    a: usize,
    b: usize,
    /// metres
    length: f64,
}

struct ModelData {
    mesh_hash: String,
    n_nodes: usize,
    n_electrodes: usize,
    elements: Vec<[usize; 3]>,
    /// Upper triangle of the P1 stiffness of each element: 00 01 02 11 12 22.
    element_stiffness: Vec<[f64; 6]>,
    electrode_edges: Vec<Vec<ElectrodeEdge>>,
    /// metres
    electrode_lengths: Vec<f64>,
    /// metres
    thickness: f64,
    /// `pos[node]` = row of the node in the reordered system.
    pos: Vec<usize>,
    perm: Vec<usize>,
    profile: Vec<usize>,
}

/// σ-independent geometry cache for one mesh: element stiffness matrices,
/// electrode boundary terms, and the bandwidth-reducing unknown ordering.
#[derive(Clone)]
pub struct FemModel {
    data: Arc<ModelData>,
}

impl std::fmt::Debug for FemModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FemModel")
            .field("mesh_hash", &self.data.mesh_hash)
            .field("n_nodes", &self.data.n_nodes)
            .field("n_electrodes", &self.data.n_electrodes)
            .finish()
    }
}

/// Analytic P1 stiffness of a triangle (scale invariant in 2D).
pub fn p1_stiffness(p: [[f64; 2]; 3]) -> [[f64; 3]; 3] {
    let b = [p[1][1] - p[2][1], p[2][1] - p[0][1], p[0][1] - p[1][1]];
    let c = [p[2][0] - p[1][0], p[0][0] - p[2][0], p[1][0] - p[0][0]];
    let area2 = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
    let mut k = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            k[i][j] = (b[i] * b[j] + c[i] * c[j]) / (2.0 * area2);
        }
    }
    k
}

impl FemModel {
    pub fn new(mesh: &Mesh) -> Result<Self> {
        let n = mesh.n_nodes();
        let l = mesh.n_electrodes();
        if l < 2 {
            return Err(Error::Config("the forward model needs at least 2 electrodes".into()));
        }
        let element_stiffness = mesh
            .elements
            .iter()
            .map(|el| {
                let k = p1_stiffness(el.map(|v| mesh.nodes[v]));
                [k[0][0], k[0][1], k[0][2], k[1][1], k[1][2], k[2][2]]
            })
            .collect();
        let electrode_edges: Vec<Vec<ElectrodeEdge>> = mesh
            .electrodes
            .iter()
            .map(|arc| {
                arc.edges
                    .iter()
                    .map(|&[a, b]| ElectrodeEdge {
                        a,
                        b,
                        length: crate::mesh::dist(mesh.nodes[a], mesh.nodes[b]) * MM,
                    })
                    .collect()
            })
            .collect();
        let electrode_lengths = electrode_edges
            .iter()
            .map(|edges: &Vec<ElectrodeEdge>| edges.iter().map(|e| e.length).sum())
            .collect();

        let thickness = mesh.domain.electrode_height.unwrap_or(DEFAULT_SLAB_THICKNESS) * MM;
        if !(thickness > 0.0) || !thickness.is_finite() {
            return Err(Error::Config(format!(
                "electrode height must be positive, got {thickness} m"
            )));
        }

        let mut adj = vec![Vec::new(); n];
        for el in &mesh.elements {
            for i in 0..3 {
                for j in 0..3 {
                    if i != j {
                        adj[el[i]].push(el[j]);
                    }
                }
            }
        }
        for a in &mut adj {
            a.sort_unstable();
            a.dedup();
        }
        let perm = reverse_cuthill_mckee(&adj);
        let mut pos = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            pos[old] = new;
        }

        let dim = n + l - 1;
        let mut profile: Vec<usize> = (0..dim).collect();
        for (v, nbrs) in adj.iter().enumerate() {
            let r = pos[v];
            for &u in nbrs {
                profile[r] = profile[r].min(pos[u]);
            }
        }
        let first_electrode_min = electrode_edges[0]
            .iter()
            .flat_map(|e| [pos[e.a], pos[e.b]])
            .min()
            .unwrap_or(0);
        for j in 0..l - 1 {
            let other = electrode_edges[j + 1]
                .iter()
                .flat_map(|e| [pos[e.a], pos[e.b]])
                .min()
                .unwrap_or(n);
            let r = n + j;
            // β rows couple to each other through the dense electrode block.
            profile[r] = first_electrode_min.min(other).min(n);
        }

        Ok(Self {
            data: Arc::new(ModelData {
                mesh_hash: mesh.content_hash(),
                n_nodes: n,
                n_electrodes: l,
                elements: mesh.elements.clone(),
                element_stiffness,
                electrode_edges,
                electrode_lengths,
                thickness,
                pos,
                perm,
                profile,
            }),
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.data.n_nodes
    }

    pub fn n_elements(&self) -> usize {
        self.data.elements.len()
    }

    pub fn n_electrodes(&self) -> usize {
        self.data.n_electrodes
    }

    pub fn mesh_hash(&self) -> &str {
        &self.data.mesh_hash
    }

    /// Thickness of the 2D slab (m); injected currents are spread over it.
    pub fn thickness(&self) -> f64 {
        self.data.thickness
    }

    /// Dimension of the reduced system, `N + L − 1`.
    pub fn system_dim(&self) -> usize {
        self.data.n_nodes + self.data.n_electrodes - 1
    }

    /// Stored entries of the envelope (lower triangle).
    pub fn envelope_size(&self) -> usize {
        let p = &self.data.profile;
        p.iter().enumerate().map(|(i, &f)| i - f + 1).sum()
    }

    /// Cached 3×3 stiffness of element `e`.
    pub fn element_stiffness(&self, e: usize) -> [[f64; 3]; 3] {
        let k = self.data.element_stiffness[e];
        [[k[0], k[1], k[2]], [k[1], k[3], k[4]], [k[2], k[4], k[5]]]
    }

    /// Assembles the reduced CEM system for `sigma` and `z`.
    pub fn assemble(&self, sigma: &DVector<f64>, z: &ContactImpedances) -> Result<FemSystem> {
        let d = &*self.data;
        if sigma.len() != d.elements.len() {
            return Err(Error::usage(format!(
                "conductivity has {} values for {} elements",
                sigma.len(),
                d.elements.len()
            )));
        }
        if z.len() != d.n_electrodes {
            return Err(Error::usage(format!(
                "{} contact impedances for {} electrodes",
                z.len(),
                d.n_electrodes
            )));
        }
        if let Some(i) = sigma.iter().position(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Domain(format!(
                "conductivity must be positive (element {i} = {})",
                sigma[i]
            )));
        }
        let z = ContactImpedances::new(z.values().to_vec())?;

        let n = d.n_nodes;
        let mut env = EnvelopeMatrix::with_profile(d.profile.clone());
        let pos = &d.pos;
        let add_sym = |env: &mut EnvelopeMatrix, i: usize, j: usize, v: f64| {
            if i >= j {
                env.add_lower(i, j, v);
            } else {
                env.add_lower(j, i, v);
            }
        };
        for (e, el) in d.elements.iter().enumerate() {
            let k = self.element_stiffness(e);
            let s = sigma[e];
            for a in 0..3 {
                let ra = pos[el[a]];
                for b in 0..=a {
                    let rb = pos[el[b]];
                    let v = s * k[a][b];
                    if ra == rb {
                        env.add_lower(ra, ra, v);
                    } else {
                        // Each unordered pair appears once in this loop.
                        add_sym(&mut env, ra, rb, v);
                    }
                }
            }
        }
        let ele = &d.electrode_edges;
        let lens = &d.electrode_lengths;
        let zs = z.values();
        // Node-node contact mass and node-electrode coupling per electrode.
        let mut coupling: Vec<Vec<(usize, f64)>> = Vec::with_capacity(ele.len());
        for (l, edges) in ele.iter().enumerate() {
            let inv_z = 1.0 / zs[l];
            let mut c: Vec<(usize, f64)> = Vec::new();
            for edge in edges {
                let (ra, rb) = (pos[edge.a], pos[edge.b]);
                let h = edge.length;
                env.add_lower(ra, ra, inv_z * h / 3.0);
                env.add_lower(rb, rb, inv_z * h / 3.0);
                add_sym(&mut env, ra, rb, inv_z * h / 6.0);
                c.push((ra, -inv_z * h / 2.0));
                c.push((rb, -inv_z * h / 2.0));
            }
            coupling.push(c);
        }
        let l_count = d.n_electrodes;
        for j in 0..l_count - 1 {
            let r = n + j;
            // column j of A_uU · B = A_uU[:, 0] − A_uU[:, j+1]
            for &(row, v) in &coupling[0] {
                env.add_lower(r, row, v);
            }
            for &(row, v) in &coupling[j + 1] {
                env.add_lower(r, row, -v);
            }
            let d0 = lens[0] / zs[0];
            for i in 0..=j {
                let mut v = d0;
                if i == j {
                    v += lens[j + 1] / zs[j + 1];
                }
                env.add_lower(r, n + i, v);
            }
        }
        Ok(FemSystem {
            model: self.clone(),
            sigma: sigma.clone(),
            z,
            matrix: env,
        })
    }
}

/// Assembled reduced CEM system for one conductivity and set of contact
/// impedances.
#[derive(Clone, Debug)]
pub struct FemSystem {
    model: FemModel,
    sigma: DVector<f64>,
    z: ContactImpedances,
    matrix: EnvelopeMatrix,
}

/// Convenience wrapper building the geometry cache on the fly.
pub fn assemble_system(
    mesh: &Mesh,
    sigma: &ConductivityField,
    z: &ContactImpedances,
) -> Result<FemSystem> {
    FemModel::new(mesh)?.assemble(sigma.values(), z)
}

impl FemSystem {
    pub fn model(&self) -> &FemModel {
        &self.model
    }

    pub fn sigma(&self) -> &DVector<f64> {
        &self.sigma
    }

    pub fn contact_impedances(&self) -> &ContactImpedances {
        &self.z
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    /// Dense copy of the full symmetric system in original unknown order
    /// (nodes, then the `L − 1` reduced electrode unknowns).
    pub fn to_dense(&self) -> DMatrix<f64> {
        let dmat = self.model.system_dim();
        let n = self.model.n_nodes();
        let orig = |r: usize| if r < n { self.model.data.perm[r] } else { r };
        let mut m = DMatrix::zeros(dmat, dmat);
        for i in 0..dmat {
            for j in 0..=i {
                let v = self.matrix.get_lower(i, j);
                if v != 0.0 {
                    let (oi, oj) = (orig(i), orig(j));
                    m[(oi, oj)] = v;
                    m[(oj, oi)] = v;
                }
            }
        }
        m
    }

    /// The σ-weighted stiffness block `Σ_i σ_i K_i` (nodes × nodes).
    pub fn stiffness_block(&self) -> CsrMatrix {
        let n = self.model.n_nodes();
        let mut trip = Vec::with_capacity(9 * self.model.n_elements());
        for (e, el) in self.model.data.elements.iter().enumerate() {
            let k = self.model.element_stiffness(e);
            for a in 0..3 {
                for b in 0..3 {
                    trip.push((el[a], el[b], self.sigma[e] * k[a][b]));
                }
            }
        }
        CsrMatrix::from_triplets(n, n, &trip)
    }

    /// Cholesky solve followed by two steps of iterative refinement with
    /// compensated residuals, so the result is accurate well beyond
    /// `cond(A)·ε`.
    fn solve_refined(&self, factor: &EnvelopeCholesky, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        factor.solve_in_place(&mut x);
        for _ in 0..2 {
            let mut r = self.matrix.residual_compensated(&x, b);
            factor.solve_in_place(&mut r);
            x.iter_mut().zip(&r).for_each(|(xi, di)| *xi += di);
        }
        x
    }

    fn factor(&self) -> Result<EnvelopeCholesky> {
        self.matrix.clone().factor().map_err(|e| {
            Error::numerical(format!(
                "CEM system (dim {}, σ ∈ [{:.3e}, {:.3e}]) could not be factored: {e}",
                self.dim(),
                self.sigma.min(),
                self.sigma.max()
            ))
        })
    }
}

/// Potentials and electrode voltages for every current pattern, plus the
/// factorization reused by the adjoint Jacobian.
#[derive(Clone, Debug)]
pub struct ForwardSolution {
    /// Nodal potentials, `N × K` (mV).
    pub potentials: DMatrix<f64>,
    /// Electrode voltages stacked pattern-major, length `K·L` (mV).
    pub voltages: DVector<f64>,
    factor: Arc<EnvelopeCholesky>,
    mesh_hash: String,
    sigma: DVector<f64>,
}

impl ForwardSolution {
    pub fn n_patterns(&self) -> usize {
        self.potentials.ncols()
    }

    /// Electrode voltages of pattern `k` (length `L`).
    pub fn pattern_voltages(&self, k: usize, n_electrodes: usize) -> &[f64] {
        &self.voltages.as_slice()[k * n_electrodes..(k + 1) * n_electrodes]
    }
}

fn reduced_rhs(model: &FemModel, currents: &[f64]) -> Vec<f64> {
    let n = model.n_nodes();
    let l = model.n_electrodes();
    let mut b = vec![0.0; n + l - 1];
    for j in 0..l - 1 {
        b[n + j] = currents[0] - currents[j + 1];
    }
    b
}

/// Unpacks a reduced solution into nodal potentials (original order) and `U = Bβ`.
fn unpack(model: &FemModel, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = model.n_nodes();
    let l = model.n_electrodes();
    let pos = &model.data.pos;
    let u = (0..n).map(|v| x[pos[v]]).collect();
    let beta = &x[n..];
    let mut big_u = vec![0.0; l];
    big_u[0] = beta.iter().sum();
    for j in 0..l - 1 {
        big_u[j + 1] = -beta[j];
    }
    (u, big_u)
}

pub fn solve_forward(system: &FemSystem, patterns: &CurrentPatternSet) -> Result<ForwardSolution> {
    let model = system.model();
    let l = model.n_electrodes();
    if patterns.n_electrodes() != l {
        return Err(Error::usage(format!(
            "patterns drive {} electrodes but the mesh has {l}",
            patterns.n_electrodes()
        )));
    }
    let factor = system.factor()?;
    let k = patterns.n_patterns();
    let mut potentials = DMatrix::zeros(model.n_nodes(), k);
    let mut voltages = DVector::zeros(k * l);
    let currents = patterns.currents();
    for p in 0..k {
        let row: Vec<f64> = currents.row(p).iter().map(|c| c / model.thickness()).collect();
        let x = system.solve_refined(&factor, &reduced_rhs(model, &row));
        let (u, big_u) = unpack(model, &x);
        potentials.column_mut(p).copy_from_slice(&u);
        voltages.as_mut_slice()[p * l..(p + 1) * l].copy_from_slice(&big_u);
    }
    if !voltages.iter().all(|v| v.is_finite()) {
        return Err(Error::numerical("forward solve produced non-finite voltages"));
    }
    Ok(ForwardSolution {
        potentials,
        voltages,
        factor: Arc::new(factor),
        mesh_hash: model.mesh_hash().to_string(),
        sigma: system.sigma.clone(),
    })
}

/// `∂U_ℓ^{(k)}/∂σ_i = −∫_{T_i} ∇u^{(k)}·∇w^{(ℓ)}`, where `w^{(ℓ)}` solves the
/// CEM problem driven by a unit current on electrode `ℓ` (the measurement
/// functional of `U_ℓ` in the reduced basis). Rows are ordered like
/// [`ForwardSolution::voltages`].
pub fn jacobian(system: &FemSystem, solution: &ForwardSolution) -> Result<DMatrix<f64>> {
    let model = system.model();
    if solution.mesh_hash != model.mesh_hash()
        || solution.sigma.len() != system.sigma.len()
        || solution.sigma != system.sigma
    {
        return Err(Error::usage(
            "forward solution was not produced from this system",
        ));
    }
    let d = &*model.data;
    let n = d.n_nodes;
    let l = d.n_electrodes;
    let k = solution.n_patterns();
    let m = d.elements.len();

    let mut adjoint = DMatrix::zeros(n, l);
    for e in 0..l {
        let mut unit = vec![0.0; l];
        unit[e] = 1.0;
        let mut x = reduced_rhs(model, &unit);
        solution.factor.solve_in_place(&mut x);
        let (w, _) = unpack(model, &x);
        adjoint.column_mut(e).copy_from_slice(&w);
    }

    let mut jac = DMatrix::zeros(k * l, m);
    let u = &solution.potentials;
    let mut ku = vec![0.0; 3 * k];
    for (i, el) in d.elements.iter().enumerate() {
        let st = model.element_stiffness(i);
        for p in 0..k {
            for a in 0..3 {
                ku[3 * p + a] = (0..3).map(|b| st[a][b] * u[(el[b], p)]).sum();
            }
        }
        let mut col = jac.column_mut(i);
        for p in 0..k {
            for e in 0..l {
                let v: f64 = (0..3).map(|a| ku[3 * p + a] * adjoint[(el[a], e)]).sum();
                col[p * l + e] = -v;
            }
        }
    }
    Ok(jac)
}

/// Forward solve plus Jacobian at `sigma`, the unit of work of every
/// Newton-type iteration.
pub fn forward_and_jacobian(
    model: &FemModel,
    sigma: &DVector<f64>,
    z: &ContactImpedances,
    patterns: &CurrentPatternSet,
) -> Result<(ForwardSolution, DMatrix<f64>)> {
    let system = model.assemble(sigma, z)?;
    let sol = solve_forward(&system, patterns)?;
    let jac = jacobian(&system, &sol)?;
    Ok((sol, jac))
}

/// Electrode voltages only.
pub fn simulate_voltages(
    model: &FemModel,
    sigma: &DVector<f64>,
    z: &ContactImpedances,
    patterns: &CurrentPatternSet,
) -> Result<DVector<f64>> {
    let system = model.assemble(sigma, z)?;
    Ok(solve_forward(&system, patterns)?.voltages)
}
