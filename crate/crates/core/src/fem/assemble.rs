//! Operator assembly and norms for the Taylor-Hood pair.
//!
//! All element loops run in a fixed order with the degree-5 rule from
//! [`super::quadrature`], so every assembled matrix is reproducible
//! bit-for-bit on the same mesh. The convection operator is built in the
//! exactly skew form `N = (C - C^T) / 2`, which makes `v^T N v = 0` hold to
//! roundoff for every coefficient vector, boundary data included.

use super::quadrature::{p1_values, p2_gradients, p2_values, TRI_QUAD};
use super::space::FeSpaces;
use super::sparse::{scatter_into_pattern, CsrBuilder, SparseMatrix};

/// Per-element geometry: physical quadrature weights and P2/P1 gradients.
struct ElementGeometry {
    nodes: [usize; 6],
    verts: [usize; 3],
    /// Physical quadrature weight per point.
    wq: [f64; 7],
    /// Physical coordinates per point.
    xq: [[f64; 2]; 7],
    /// Physical P2 gradients per point.
    grad: [[[f64; 2]; 6]; 7],
}

fn element_geometry(spaces: &FeSpaces, t: usize) -> ElementGeometry {
    let tri = &spaces.mesh.triangles[t];
    let [a, b, c] = tri.v.map(|v| spaces.mesh.vertices[v]);
    let j00 = b[0] - a[0];
    let j10 = b[1] - a[1];
    let j01 = c[0] - a[0];
    let j11 = c[1] - a[1];
    let det = j00 * j11 - j01 * j10;
    let area = 0.5 * det;

    let mut wq = [0.0; 7];
    let mut xq = [[0.0; 2]; 7];
    let mut grad = [[[0.0; 2]; 6]; 7];
    for (q, (l, w)) in TRI_QUAD.iter().enumerate() {
        wq[q] = w * area;
        xq[q] = [
            l[0] * a[0] + l[1] * b[0] + l[2] * c[0],
            l[0] * a[1] + l[1] * b[1] + l[2] * c[1],
        ];
        let gr = p2_gradients(*l);
        for i in 0..6 {
            grad[q][i] = [
                (j11 * gr[i][0] - j10 * gr[i][1]) / det,
                (-j01 * gr[i][0] + j00 * gr[i][1]) / det,
            ];
        }
    }
    ElementGeometry {
        nodes: spaces.element_nodes(t),
        verts: tri.v,
        wq,
        xq,
        grad,
    }
}

/// Scalar P2 mass, stiffness, velocity-pressure divergence, P1 pressure mass
/// and the pressure integrals used for the zero-mean constraint.
#[derive(Debug, Clone)]
pub struct Operators {
    pub mass: SparseMatrix,
    pub stiffness: SparseMatrix,
    /// `B[q, 2 s + c] = (psi_q, d_c phi_s)`; rows are pressure dofs.
    pub divergence: SparseMatrix,
    pub pressure_mass: SparseMatrix,
    /// `int psi_q` per pressure dof.
    pub pressure_integral: Vec<f64>,
}

pub fn assemble_operators(spaces: &FeSpaces) -> Operators {
    Operators {
        mass: assemble_mass(spaces),
        stiffness: assemble_stiffness(spaces),
        divergence: assemble_divergence(spaces),
        pressure_mass: assemble_pressure_mass(spaces),
        pressure_integral: assemble_pressure_integral(spaces),
    }
}

pub fn assemble_mass(spaces: &FeSpaces) -> SparseMatrix {
    let n = spaces.n_scalar;
    let mut bld = CsrBuilder::new(n, n);
    for t in 0..spaces.mesh.triangles.len() {
        let geo = element_geometry(spaces, t);
        let mut local = [[0.0; 6]; 6];
        for (q, (l, _)) in TRI_QUAD.iter().enumerate() {
            let vals = p2_values(*l);
            for i in 0..6 {
                for j in 0..6 {
                    local[i][j] += geo.wq[q] * vals[i] * vals[j];
                }
            }
        }
        for i in 0..6 {
            for j in 0..6 {
                bld.add(geo.nodes[i], geo.nodes[j], local[i][j]);
            }
        }
    }
    bld.build()
}

pub fn assemble_stiffness(spaces: &FeSpaces) -> SparseMatrix {
    let n = spaces.n_scalar;
    let mut bld = CsrBuilder::new(n, n);
    for t in 0..spaces.mesh.triangles.len() {
        let geo = element_geometry(spaces, t);
        let mut local = [[0.0; 6]; 6];
        for q in 0..7 {
            for i in 0..6 {
                for j in 0..6 {
                    local[i][j] += geo.wq[q]
                        * (geo.grad[q][i][0] * geo.grad[q][j][0]
                            + geo.grad[q][i][1] * geo.grad[q][j][1]);
                }
            }
        }
        for i in 0..6 {
            for j in 0..6 {
                bld.add(geo.nodes[i], geo.nodes[j], local[i][j]);
            }
        }
    }
    bld.build()
}

pub fn assemble_divergence(spaces: &FeSpaces) -> SparseMatrix {
    let mut bld = CsrBuilder::new(spaces.n_pressure, spaces.n_velocity());
    for t in 0..spaces.mesh.triangles.len() {
        let geo = element_geometry(spaces, t);
        for (q, (l, _)) in TRI_QUAD.iter().enumerate() {
            let pv = p1_values(*l);
            for p in 0..3 {
                for s in 0..6 {
                    for c in 0..2 {
                        bld.add(
                            geo.verts[p],
                            2 * geo.nodes[s] + c,
                            geo.wq[q] * pv[p] * geo.grad[q][s][c],
                        );
                    }
                }
            }
        }
    }
    bld.build()
}

pub fn assemble_pressure_mass(spaces: &FeSpaces) -> SparseMatrix {
    let n = spaces.n_pressure;
    let mut bld = CsrBuilder::new(n, n);
    for t in 0..spaces.mesh.triangles.len() {
        let geo = element_geometry(spaces, t);
        for (q, (l, _)) in TRI_QUAD.iter().enumerate() {
            let pv = p1_values(*l);
            for i in 0..3 {
                for j in 0..3 {
                    bld.add(geo.verts[i], geo.verts[j], geo.wq[q] * pv[i] * pv[j]);
                }
            }
        }
    }
    bld.build()
}

fn assemble_pressure_integral(spaces: &FeSpaces) -> Vec<f64> {
    let mut out = vec![0.0; spaces.n_pressure];
    for t in 0..spaces.mesh.triangles.len() {
        let geo = element_geometry(spaces, t);
        for (q, (l, _)) in TRI_QUAD.iter().enumerate() {
            let pv = p1_values(*l);
            for i in 0..3 {
                out[geo.verts[i]] += geo.wq[q] * pv[i];
            }
        }
    }
    out
}

/// Skew-form convection matrix `N(w) = (C(w) - C(w)^T) / 2` with
/// `C[i, j] = ((w . grad) phi_j, phi_i)`, on scalar P2 nodes. Acting on each
/// velocity component with the same matrix realizes the vector operator.
pub fn assemble_convection(spaces: &FeSpaces, w: &[f64]) -> SparseMatrix {
    assert_eq!(w.len(), spaces.n_velocity());
    let n = spaces.n_scalar;
    let mut bld = CsrBuilder::new(n, n);
    for t in 0..spaces.mesh.triangles.len() {
        let geo = element_geometry(spaces, t);
        let mut local = [[0.0; 6]; 6];
        for (q, (l, _)) in TRI_QUAD.iter().enumerate() {
            let vals = p2_values(*l);
            let mut wx = 0.0;
            let mut wy = 0.0;
            for i in 0..6 {
                wx += w[2 * geo.nodes[i]] * vals[i];
                wy += w[2 * geo.nodes[i] + 1] * vals[i];
            }
            for i in 0..6 {
                for j in 0..6 {
                    local[i][j] += geo.wq[q]
                        * (wx * geo.grad[q][j][0] + wy * geo.grad[q][j][1])
                        * vals[i];
                }
            }
        }
        for i in 0..6 {
            for j in 0..6 {
                bld.add(geo.nodes[i], geo.nodes[j], 0.5 * (local[i][j] - local[j][i]));
            }
        }
    }
    bld.build()
}

/// Convection values scattered into an existing scalar pattern (the mass
/// pattern); avoids re-sorting triplets on every time step.
pub fn assemble_convection_into(spaces: &FeSpaces, w: &[f64], target: &mut SparseMatrix) {
    assert_eq!(w.len(), spaces.n_velocity());
    target.values.fill(0.0);
    for t in 0..spaces.mesh.triangles.len() {
        let geo = element_geometry(spaces, t);
        let mut local = [[0.0; 6]; 6];
        for (q, (l, _)) in TRI_QUAD.iter().enumerate() {
            let vals = p2_values(*l);
            let mut wx = 0.0;
            let mut wy = 0.0;
            for i in 0..6 {
                wx += w[2 * geo.nodes[i]] * vals[i];
                wy += w[2 * geo.nodes[i] + 1] * vals[i];
            }
            for i in 0..6 {
                for j in 0..6 {
                    local[i][j] += geo.wq[q]
                        * (wx * geo.grad[q][j][0] + wy * geo.grad[q][j][1])
                        * vals[i];
                }
            }
        }
        for i in 0..6 {
            for j in 0..6 {
                scatter_into_pattern(
                    target,
                    geo.nodes[i],
                    geo.nodes[j],
                    0.5 * (local[i][j] - local[j][i]),
                )
                .expect("convection shares the mass pattern");
            }
        }
    }
}

/// Action `r[i] = b(w, u, phi_i)` of the skew trilinear form on every
/// velocity test function, without forming the matrix.
pub fn convection_apply(spaces: &FeSpaces, w: &[f64], u: &[f64]) -> Vec<f64> {
    assert_eq!(w.len(), spaces.n_velocity());
    assert_eq!(u.len(), spaces.n_velocity());
    let mut out = vec![0.0; spaces.n_velocity()];
    for t in 0..spaces.mesh.triangles.len() {
        let geo = element_geometry(spaces, t);
        for (q, (l, _)) in TRI_QUAD.iter().enumerate() {
            let vals = p2_values(*l);
            let mut wv = [0.0; 2];
            let mut uv = [0.0; 2];
            let mut ug = [[0.0; 2]; 2]; // ug[c][d] = d u_c / d x_d
            for i in 0..6 {
                for c in 0..2 {
                    let wc = w[2 * geo.nodes[i] + c];
                    let uc = u[2 * geo.nodes[i] + c];
                    wv[c] += wc * vals[i];
                    uv[c] += uc * vals[i];
                    ug[c][0] += uc * geo.grad[q][i][0];
                    ug[c][1] += uc * geo.grad[q][i][1];
                }
            }
            for i in 0..6 {
                for c in 0..2 {
                    let w_dot_grad_u = wv[0] * ug[c][0] + wv[1] * ug[c][1];
                    let w_dot_grad_phi =
                        wv[0] * geo.grad[q][i][0] + wv[1] * geo.grad[q][i][1];
                    out[2 * geo.nodes[i] + c] +=
                        0.5 * geo.wq[q] * (w_dot_grad_u * vals[i] - w_dot_grad_phi * uv[c]);
                }
            }
        }
    }
    out
}

/// Skew trilinear form `b(u, v, w) = ((u.grad) v, w) + ((div u) v, w) / 2`,
/// evaluated in the exactly skew realization.
pub fn trilinear_b(spaces: &FeSpaces, u: &[f64], v: &[f64], w: &[f64]) -> f64 {
    let action = convection_apply(spaces, u, v);
    w.iter().zip(&action).map(|(a, b)| a * b).sum()
}

/// Load vector `(f, phi_i)` for a stationary vector field `f`.
pub fn assemble_load(spaces: &FeSpaces, f: impl Fn(f64, f64) -> [f64; 2]) -> Vec<f64> {
    let mut out = vec![0.0; spaces.n_velocity()];
    for t in 0..spaces.mesh.triangles.len() {
        let geo = element_geometry(spaces, t);
        for (q, (l, _)) in TRI_QUAD.iter().enumerate() {
            let vals = p2_values(*l);
            let fv = f(geo.xq[q][0], geo.xq[q][1]);
            for i in 0..6 {
                for c in 0..2 {
                    out[2 * geo.nodes[i] + c] += geo.wq[q] * fv[c] * vals[i];
                }
            }
        }
    }
    out
}

impl Operators {
    /// `|u|_{L^2}` of an interleaved velocity vector.
    pub fn velocity_l2(&self, u: &[f64]) -> f64 {
        self.mass.bilinear_interleaved2(u, u).max(0.0).sqrt()
    }

    /// `|grad u|^2` of an interleaved velocity vector.
    pub fn velocity_grad_sq(&self, u: &[f64]) -> f64 {
        self.stiffness.bilinear_interleaved2(u, u).max(0.0)
    }

    /// Full `H^1` norm (L2 part plus gradient part).
    pub fn velocity_h1(&self, u: &[f64]) -> f64 {
        (self.mass.bilinear_interleaved2(u, u) + self.velocity_grad_sq(u))
            .max(0.0)
            .sqrt()
    }

    /// `|p|_{L^2}` of a pressure vector.
    pub fn pressure_l2(&self, p: &[f64]) -> f64 {
        self.pressure_mass.bilinear(p, p).max(0.0).sqrt()
    }

    pub fn pressure_mean(&self, p: &[f64]) -> f64 {
        let total: f64 = self.pressure_integral.iter().sum();
        let m: f64 = self.pressure_integral.iter().zip(p).map(|(a, b)| a * b).sum();
        m / total
    }

    /// Shifts a pressure vector to zero mean.
    pub fn pressure_zero_mean(&self, p: &[f64]) -> Vec<f64> {
        let mean = self.pressure_mean(p);
        p.iter().map(|v| v - mean).collect()
    }

    /// Divergence residual `|B u|` in the Euclidean norm of pressure test rows.
    pub fn divergence_residual(&self, u: &[f64]) -> f64 {
        let r = self.divergence.matvec(u);
        r.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Quadrature evaluation of velocity error norms against an analytic field:
/// returns `(|u - u_h|_{L^2}, |u - u_h|_{H^1})` with the full H1 norm.
pub fn velocity_error_norms(
    spaces: &FeSpaces,
    u_h: &[f64],
    exact: &dyn Fn(f64, f64) -> [f64; 2],
    exact_grad: &dyn Fn(f64, f64) -> [[f64; 2]; 2],
) -> (f64, f64) {
    let mut l2 = 0.0;
    let mut h1 = 0.0;
    for t in 0..spaces.mesh.triangles.len() {
        let geo = element_geometry(spaces, t);
        for (q, (l, _)) in TRI_QUAD.iter().enumerate() {
            let vals = p2_values(*l);
            let mut uv = [0.0; 2];
            let mut ug = [[0.0; 2]; 2];
            for i in 0..6 {
                for c in 0..2 {
                    let uc = u_h[2 * geo.nodes[i] + c];
                    uv[c] += uc * vals[i];
                    ug[c][0] += uc * geo.grad[q][i][0];
                    ug[c][1] += uc * geo.grad[q][i][1];
                }
            }
            let ex = exact(geo.xq[q][0], geo.xq[q][1]);
            let exg = exact_grad(geo.xq[q][0], geo.xq[q][1]);
            for c in 0..2 {
                l2 += geo.wq[q] * (ex[c] - uv[c]).powi(2);
                for d in 0..2 {
                    h1 += geo.wq[q] * (exg[c][d] - ug[c][d]).powi(2);
                }
            }
        }
    }
    (l2.sqrt(), (l2 + h1).sqrt())
}

/// Quadrature evaluation of `|p - p_h|_{L^2}` for a P1 pressure vector.
pub fn pressure_error_l2(
    spaces: &FeSpaces,
    p_h: &[f64],
    exact: &dyn Fn(f64, f64) -> f64,
) -> f64 {
    let mut acc = 0.0;
    for t in 0..spaces.mesh.triangles.len() {
        let geo = element_geometry(spaces, t);
        for (q, (l, _)) in TRI_QUAD.iter().enumerate() {
            let pv = p1_values(*l);
            let mut ph = 0.0;
            for i in 0..3 {
                ph += p_h[geo.verts[i]] * pv[i];
            }
            let ex = exact(geo.xq[q][0], geo.xq[q][1]);
            acc += geo.wq[q] * (ex - ph).powi(2);
        }
    }
    acc.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::space::build_spaces;
    use approx::assert_relative_eq;

    #[test]
    fn mass_total_is_domain_area() {
        let sp = build_spaces(4).unwrap();
        let m = assemble_mass(&sp);
        let total: f64 = m.values.iter().sum();
        assert_relative_eq!(total, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn stiffness_kernel_contains_constants() {
        let sp = build_spaces(4).unwrap();
        let k = assemble_stiffness(&sp);
        let ones = vec![1.0; sp.n_scalar];
        let r = k.matvec(&ones);
        for v in r {
            assert!(v.abs() <= 1e-13);
        }
    }

    #[test]
    fn divergence_of_linear_solenoidal_field_vanishes() {
        let sp = build_spaces(4).unwrap();
        let b = assemble_divergence(&sp);
        let u = sp.interpolate_velocity(|x, y| [x, -y]);
        let r = b.matvec(&u);
        for v in r {
            assert!(v.abs() <= 1e-13, "residual {v}");
        }
    }

    #[test]
    fn convection_is_exactly_skew() {
        let sp = build_spaces(3).unwrap();
        // Non-solenoidal transport with nonzero boundary values on purpose.
        let w = sp.interpolate_velocity(|x, y| [x * x + 0.3 * y, (x - y).cos()]);
        let n = assemble_convection(&sp, &w);
        let v = sp.interpolate_velocity(|x, y| [(3.0 * x).sin() + y, x * y * y + 1.0]);
        let quad = n.bilinear_interleaved2(&v, &v);
        let scale: f64 = n.values.iter().map(|x| x.abs()).fold(0.0, f64::max)
            * v.iter().map(|x| x * x).sum::<f64>();
        assert!(quad.abs() <= 1e-12 * scale.max(1.0), "v^T N v = {quad}");
        // Zero transport gives the zero matrix.
        let z = assemble_convection(&sp, &vec![0.0; sp.n_velocity()]);
        assert!(z.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn convection_matrix_matches_matrix_free_action() {
        let sp = build_spaces(3).unwrap();
        let w = sp.interpolate_velocity(|x, y| [y - 0.2, x + 0.1]);
        let u = sp.interpolate_velocity(|x, y| [x * y, x - y * y]);
        let n = assemble_convection(&sp, &w);
        let mut via_matrix = vec![0.0; sp.n_velocity()];
        n.apply_interleaved2(&u, &mut via_matrix);
        let direct = convection_apply(&sp, &w, &u);
        for (a, b) in via_matrix.iter().zip(&direct) {
            assert_relative_eq!(a, b, max_relative = 1e-11, epsilon = 1e-13);
        }
    }

    #[test]
    fn trilinear_matches_independent_quadrature_for_polynomials() {
        // u, v, w are P2-representable, so the integrand is degree 5 and the
        // independent oracle (assembled on a finer mesh) is exact too.
        let sp = build_spaces(3).unwrap();
        let uf = |x: f64, y: f64| [x + 2.0 * y, x - y];
        let vf = |x: f64, y: f64| [x * y, x * x - 0.5 * y];
        let wf = |x: f64, y: f64| [1.0 - y * y, x * y + 0.25];
        let u = sp.interpolate_velocity(uf);
        let v = sp.interpolate_velocity(vf);
        let w = sp.interpolate_velocity(wf);
        let value = trilinear_b(&sp, &u, &v, &w);

        let fine = build_spaces(12).unwrap();
        let value_fine = trilinear_b(
            &fine,
            &fine.interpolate_velocity(uf),
            &fine.interpolate_velocity(vf),
            &fine.interpolate_velocity(wf),
        );
        assert_relative_eq!(value, value_fine, max_relative = 1e-11);
    }

    #[test]
    fn l2_norm_of_separable_sine_field() {
        // int sin^2(pi x) sin^2(pi y) = 1/4, so the L2 norm of the scalar
        // field placed in one component tends to 1/2.
        let pi = std::f64::consts::PI;
        let mut prev_err = f64::INFINITY;
        for m in [8, 16] {
            let sp = build_spaces(m).unwrap();
            let ops = assemble_operators(&sp);
            let u = sp.interpolate_velocity(|x, y| [(pi * x).sin() * (pi * y).sin(), 0.0]);
            let err = (ops.velocity_l2(&u) - 0.5).abs();
            assert!(err < prev_err);
            assert!(err <= 0.5 * (1.0 / m as f64).powi(2) * 40.0);
            prev_err = err;
        }
    }

    #[test]
    fn norms_trivial_cases() {
        let sp = build_spaces(4).unwrap();
        let ops = assemble_operators(&sp);
        let zero = vec![0.0; sp.n_velocity()];
        assert_eq!(ops.velocity_l2(&zero), 0.0);
        assert_eq!(ops.velocity_h1(&zero), 0.0);
        // Constant pressure shifted to zero mean has zero norm.
        let p = vec![3.7; sp.n_pressure];
        let shifted = ops.pressure_zero_mean(&p);
        assert!(ops.pressure_l2(&shifted) <= 1e-13);
    }

    #[test]
    fn interpolation_exact_for_p2_polynomials() {
        let sp = build_spaces(4).unwrap();
        let exact = |x: f64, y: f64| [1.0 + x + y + x * y, x * x - y * y];
        let grad = |x: f64, y: f64| [[1.0 + y, 1.0 + x], [2.0 * x, -2.0 * y]];
        let u = sp.interpolate_velocity(exact);
        let (l2, h1) = velocity_error_norms(&sp, &u, &exact, &grad);
        assert!(l2 <= 1e-13 && h1 <= 1e-12, "l2 {l2} h1 {h1}");
        // Constants are exact as well.
        let c = sp.interpolate_velocity(|_, _| [2.0, -1.0]);
        let (l2c, _) = velocity_error_norms(&sp, &c, &|_, _| [2.0, -1.0], &|_, _| [[0.0; 2]; 2]);
        assert!(l2c <= 1e-14);
    }

    #[test]
    fn interpolation_defect_is_third_order() {
        let pi = std::f64::consts::PI;
        let exact = move |x: f64, y: f64| [(pi * x).sin() * (pi * y).sin(), (pi * x).cos()];
        let grad = move |x: f64, y: f64| {
            [
                [
                    pi * (pi * x).cos() * (pi * y).sin(),
                    pi * (pi * x).sin() * (pi * y).cos(),
                ],
                [-pi * (pi * x).sin(), 0.0],
            ]
        };
        let mut errs = Vec::new();
        for m in [4, 8, 16] {
            let sp = build_spaces(m).unwrap();
            let u = sp.interpolate_velocity(exact);
            let (l2, _) = velocity_error_norms(&sp, &u, &exact, &grad);
            errs.push(l2);
        }
        for w in errs.windows(2) {
            let slope = (w[0] / w[1]).log2();
            assert!((2.7..=3.3).contains(&slope), "slope {slope}");
        }
    }

    #[test]
    fn assembly_is_bit_for_bit_deterministic() {
        let sp = build_spaces(5).unwrap();
        let w = sp.interpolate_velocity(|x, y| [x - y, x * y]);
        let a1 = assemble_mass(&sp);
        let a2 = assemble_mass(&sp);
        assert_eq!(a1.values, a2.values);
        let n1 = assemble_convection(&sp, &w);
        let n2 = assemble_convection(&sp, &w);
        assert_eq!(n1.values, n2.values);
        assert!(n1.same_pattern(&a1));
        assert!(assemble_stiffness(&sp).same_pattern(&a1));
    }
}
