//! Mesh files: a JSON header plus a little-endian binary sidecar
//! (`float64` nodes, `int32` elements, boundary edges and electrode edges),
//! or a single pure-JSON document for small meshes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DomainDescriptor, ElectrodeArc, Mesh};
use crate::binio::{self, BlobReader};
use crate::error::{Error, Result};

pub const MESH_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshHeader {
    pub format: String,
    pub format_version: u32,
    pub n_nodes: usize,
    pub n_elements: usize,
    pub n_boundary_edges: usize,
    /// Edge count of each electrode arc, in electrode order.
    pub electrode_edge_counts: Vec<usize>,
    pub domain: DomainDescriptor,
    /// SHA-256 of the sidecar bytes.
    pub content_hash: String,
}

#[derive(Serialize, Deserialize)]
struct JsonMesh {
    format: String,
    format_version: u32,
    #[serde(flatten)]
    mesh: Mesh,
}

pub(crate) fn encode_blob(mesh: &Mesh) -> Vec<u8> {
    let mut buf = Vec::new();
    binio::put_f64s(
        &mut buf,
        &mesh.nodes.iter().flat_map(|p| [p[0], p[1]]).collect::<Vec<_>>(),
    );
    binio::put_i32s(&mut buf, mesh.elements.iter().flatten().copied());
    binio::put_i32s(&mut buf, mesh.boundary_edges.iter().flatten().copied());
    for arc in &mesh.electrodes {
        binio::put_i32s(&mut buf, arc.edges.iter().flatten().copied());
    }
    buf
}

impl Mesh {
    pub fn header(&self) -> MeshHeader {
        MeshHeader {
            format: "gcnm-mesh".into(),
            format_version: MESH_FORMAT_VERSION,
            n_nodes: self.n_nodes(),
            n_elements: self.n_elements(),
            n_boundary_edges: self.boundary_edges.len(),
            electrode_edge_counts: self.electrodes.iter().map(|a| a.edges.len()).collect(),
            domain: self.domain.clone(),
            content_hash: self.content_hash(),
        }
    }

    /// Writes `path` (JSON header) and its `.bin` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let blob = encode_blob(self);
        binio::write_bytes(&binio::sidecar_path(path), &blob)?;
        binio::write_json(path, &self.header())
    }

    pub fn load(path: &Path) -> Result<Mesh> {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        if value.get("nodes").is_some() {
            return Self::from_json_value(value);
        }
        let header: MeshHeader = serde_json::from_value(value)?;
        if header.format_version != MESH_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported mesh format version {}",
                header.format_version
            )));
        }
        let blob = std::fs::read(binio::sidecar_path(path))?;
        if binio::sha256_hex(&blob) != header.content_hash {
            return Err(Error::Lineage(format!(
                "mesh sidecar for {} does not match its header hash",
                path.display()
            )));
        }
        let mut r = BlobReader::new(&blob);
        let coords = r.f64s(2 * header.n_nodes)?;
        let el = r.i32s(3 * header.n_elements)?;
        let be = r.i32s(2 * header.n_boundary_edges)?;
        let mut electrodes = Vec::with_capacity(header.electrode_edge_counts.len());
        for &count in &header.electrode_edge_counts {
            let e = r.i32s(2 * count)?;
            electrodes.push(ElectrodeArc {
                edges: e.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
            });
        }
        r.finish()?;
        let mesh = Mesh {
            nodes: coords.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
            elements: el.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            boundary_edges: be.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
            electrodes,
            domain: header.domain,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    /// Single-document JSON variant.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&JsonMesh {
            format: "gcnm-mesh".into(),
            format_version: MESH_FORMAT_VERSION,
            mesh: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Mesh> {
        Self::from_json_value(serde_json::from_str(text)?)
    }

    fn from_json_value(value: serde_json::Value) -> Result<Mesh> {
        let doc: JsonMesh = serde_json::from_value(value)?;
        if doc.format_version != MESH_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported mesh format version {}",
                doc.format_version
            )));
        }
        doc.mesh.validate()?;
        Ok(doc.mesh)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        binio::write_bytes(path, self.to_json()?.as_bytes())
    }
}
