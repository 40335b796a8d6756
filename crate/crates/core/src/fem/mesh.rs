//! Structured triangulation of the unit square.
//!
//! `m` subdivisions per side, every square cut along the lower-left to
//! upper-right diagonal. All orderings are fixed so assembly is bit-for-bit
//! reproducible.

use std::io::Write;
use std::path::Path;

use super::FemError;

#[derive(Debug, Clone, Copy)]
pub struct Triangle {
    /// Vertex ids, counterclockwise.
    pub v: [usize; 3],
    /// Edge ids: `e[0]` joins `v0,v1`, `e[1]` joins `v1,v2`, `e[2]` joins `v0,v2`.
    pub e: [usize; 3],
}

#[derive(Debug, Clone)]
pub struct Mesh {
    pub m: usize,
    pub vertices: Vec<[f64; 2]>,
    /// Endpoint vertex ids per edge.
    pub edges: Vec<[usize; 2]>,
    pub triangles: Vec<Triangle>,
    pub boundary_vertex: Vec<bool>,
    pub boundary_edge: Vec<bool>,
}

/// Builds the `m x m` right-diagonal mesh. Requires `m >= 2`.
pub fn generate_mesh(m: usize) -> Result<Mesh, FemError> {
    if m < 2 {
        return Err(FemError::MeshTooSmall(m));
    }
    let h = 1.0 / m as f64;
    let vid = |i: usize, j: usize| j * (m + 1) + i;

    let mut vertices = Vec::with_capacity((m + 1) * (m + 1));
    let mut boundary_vertex = Vec::with_capacity((m + 1) * (m + 1));
    for j in 0..=m {
        for i in 0..=m {
            vertices.push([i as f64 * h, j as f64 * h]);
            boundary_vertex.push(i == 0 || i == m || j == 0 || j == m);
        }
    }

    // Edge ids: horizontals, then verticals, then diagonals.
    let n_h = m * (m + 1);
    let n_v = (m + 1) * m;
    let he = |i: usize, j: usize| j * m + i;
    let ve = |i: usize, j: usize| n_h + j * (m + 1) + i;
    let de = |i: usize, j: usize| n_h + n_v + j * m + i;

    let mut edges = vec![[0usize; 2]; n_h + n_v + m * m];
    let mut boundary_edge = vec![false; edges.len()];
    for j in 0..=m {
        for i in 0..m {
            edges[he(i, j)] = [vid(i, j), vid(i + 1, j)];
            boundary_edge[he(i, j)] = j == 0 || j == m;
        }
    }
    for j in 0..m {
        for i in 0..=m {
            edges[ve(i, j)] = [vid(i, j), vid(i, j + 1)];
            boundary_edge[ve(i, j)] = i == 0 || i == m;
        }
    }
    for j in 0..m {
        for i in 0..m {
            edges[de(i, j)] = [vid(i, j), vid(i + 1, j + 1)];
        }
    }

    let mut triangles = Vec::with_capacity(2 * m * m);
    for j in 0..m {
        for i in 0..m {
            // Lower triangle (a, b, c), upper triangle (a, c, d) of the cell
            // with corners a=(i,j), b=(i+1,j), c=(i+1,j+1), d=(i,j+1).
            triangles.push(Triangle {
                v: [vid(i, j), vid(i + 1, j), vid(i + 1, j + 1)],
                e: [he(i, j), ve(i + 1, j), de(i, j)],
            });
            triangles.push(Triangle {
                v: [vid(i, j), vid(i + 1, j + 1), vid(i, j + 1)],
                e: [de(i, j), he(i, j + 1), ve(i, j)],
            });
        }
    }

    Ok(Mesh {
        m,
        vertices,
        edges,
        triangles,
        boundary_vertex,
        boundary_edge,
    })
}

impl Mesh {
    /// Grid spacing `1/m`.
    pub fn h(&self) -> f64 {
        1.0 / self.m as f64
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Signed area of a triangle (positive for the fixed orientation).
    pub fn triangle_area(&self, t: &Triangle) -> f64 {
        let [a, b, c] = t.v.map(|v| self.vertices[v]);
        0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
    }

    pub fn edge_midpoint(&self, e: usize) -> [f64; 2] {
        let [a, b] = self.edges[e].map(|v| self.vertices[v]);
        [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]
    }

    /// Debug dump: vertices and triangles as two CSV tables.
    pub fn dump_csv(&self, dir: &Path) -> std::io::Result<()> {
        let mut vf = std::fs::File::create(dir.join("mesh_vertices.csv"))?;
        writeln!(vf, "id,x,y,boundary")?;
        for (i, v) in self.vertices.iter().enumerate() {
            writeln!(vf, "{},{},{},{}", i, v[0], v[1], self.boundary_vertex[i] as u8)?;
        }
        let mut tf = std::fs::File::create(dir.join("mesh_triangles.csv"))?;
        writeln!(tf, "id,v0,v1,v2")?;
        for (i, t) in self.triangles.iter().enumerate() {
            writeln!(tf, "{},{},{},{}", i, t.v[0], t.v[1], t.v[2])?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn m_too_small_is_rejected() {
        assert!(generate_mesh(1).is_err());
        assert!(generate_mesh(0).is_err());
    }

    #[test]
    fn counts_for_m2() {
        let mesh = generate_mesh(2).unwrap();
        assert_eq!(mesh.n_vertices(), 9);
        assert_eq!(mesh.n_edges(), 16);
        assert_eq!(mesh.triangles.len(), 8);
    }

    #[test]
    fn h_matches_subdivision() {
        assert_relative_eq!(generate_mesh(8).unwrap().h(), 0.125);
    }

    #[test]
    fn areas_sum_to_one_and_are_positive() {
        for m in [2, 5, 8] {
            let mesh = generate_mesh(m).unwrap();
            let mut total = 0.0;
            for t in &mesh.triangles {
                let a = mesh.triangle_area(t);
                assert!(a > 0.0);
                total += a;
            }
            assert_relative_eq!(total, 1.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn edges_are_consistent_with_triangles() {
        let mesh = generate_mesh(4).unwrap();
        for t in &mesh.triangles {
            let pairs = [(t.v[0], t.v[1]), (t.v[1], t.v[2]), (t.v[0], t.v[2])];
            for (k, (a, b)) in pairs.into_iter().enumerate() {
                let e = mesh.edges[t.e[k]];
                assert!(
                    (e[0] == a && e[1] == b) || (e[0] == b && e[1] == a),
                    "edge {k} of triangle {t:?} mismatched"
                );
            }
        }
    }

    #[test]
    fn boundary_flags() {
        let mesh = generate_mesh(3).unwrap();
        let nb = mesh.boundary_vertex.iter().filter(|&&b| b).count();
        assert_eq!(nb, 4 * 3); // 4m boundary vertices
        let nbe = mesh.boundary_edge.iter().filter(|&&b| b).count();
        assert_eq!(nbe, 4 * 3); // 4m boundary edges
    }
}
