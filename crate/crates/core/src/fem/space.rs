//! Taylor-Hood (P2-P1) degree-of-freedom management.
//!
//! Scalar P2 nodes are vertices followed by edge midpoints. Velocity vectors
//! are stored interleaved: component `c` of node `s` sits at `2 s + c`.
//! Pressure is P1 on the vertices with the zero-mean constraint handled by a
//! Lagrange multiplier at the solver level.

use super::mesh::{generate_mesh, Mesh};
use super::FemError;

#[derive(Debug, Clone)]
pub struct FeSpaces {
    pub mesh: Mesh,
    /// Scalar P2 node count: vertices + edges.
    pub n_scalar: usize,
    /// P1 pressure dof count: vertices.
    pub n_pressure: usize,
    /// Scalar nodes on the Dirichlet boundary.
    pub dirichlet: Vec<bool>,
    /// Scalar node -> free scalar index (interior nodes only).
    pub free_index: Vec<Option<usize>>,
    /// Free scalar index -> scalar node.
    pub free_nodes: Vec<usize>,
    /// Coordinates of every scalar node.
    pub node_coords: Vec<[f64; 2]>,
}

pub fn build_spaces(m: usize) -> Result<FeSpaces, FemError> {
    Ok(FeSpaces::new(generate_mesh(m)?))
}

impl FeSpaces {
    pub fn new(mesh: Mesh) -> Self {
        let nv = mesh.n_vertices();
        let ne = mesh.n_edges();
        let n_scalar = nv + ne;
        let mut dirichlet = vec![false; n_scalar];
        let mut node_coords = vec![[0.0; 2]; n_scalar];
        for v in 0..nv {
            dirichlet[v] = mesh.boundary_vertex[v];
            node_coords[v] = mesh.vertices[v];
        }
        for e in 0..ne {
            dirichlet[nv + e] = mesh.boundary_edge[e];
            node_coords[nv + e] = mesh.edge_midpoint(e);
        }
        let mut free_index = vec![None; n_scalar];
        let mut free_nodes = Vec::new();
        for s in 0..n_scalar {
            if !dirichlet[s] {
                free_index[s] = Some(free_nodes.len());
                free_nodes.push(s);
            }
        }
        FeSpaces {
            mesh,
            n_scalar,
            n_pressure: nv,
            dirichlet,
            free_index,
            free_nodes,
            node_coords,
        }
    }

    /// Scalar P2 nodes of a triangle in local order `[v0, v1, v2, e01, e12, e02]`.
    pub fn element_nodes(&self, t: usize) -> [usize; 6] {
        let nv = self.mesh.n_vertices();
        let tri = &self.mesh.triangles[t];
        [
            tri.v[0],
            tri.v[1],
            tri.v[2],
            nv + tri.e[0],
            nv + tri.e[1],
            nv + tri.e[2],
        ]
    }

    pub fn n_velocity(&self) -> usize {
        2 * self.n_scalar
    }

    pub fn n_free_scalar(&self) -> usize {
        self.free_nodes.len()
    }

    /// Total saddle-system size: free velocity dofs, pressure dofs, multiplier.
    pub fn n_system(&self) -> usize {
        2 * self.n_free_scalar() + self.n_pressure + 1
    }

    /// Nodal interpolation of a vector field, interleaved layout.
    pub fn interpolate_velocity(&self, f: impl Fn(f64, f64) -> [f64; 2]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_velocity()];
        for (s, xy) in self.node_coords.iter().enumerate() {
            let v = f(xy[0], xy[1]);
            out[2 * s] = v[0];
            out[2 * s + 1] = v[1];
        }
        out
    }

    /// Nodal interpolation of a scalar P1 pressure field.
    pub fn interpolate_pressure(&self, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        (0..self.n_pressure)
            .map(|v| f(self.mesh.vertices[v][0], self.mesh.vertices[v][1]))
            .collect()
    }

    /// Nodal interpolation of a scalar P2 field.
    pub fn interpolate_scalar(&self, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.node_coords.iter().map(|xy| f(xy[0], xy[1])).collect()
    }
}
