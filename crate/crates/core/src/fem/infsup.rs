//! Discrete inf-sup sanity check.
//!
//! The proxy is the smallest nonzero eigenvalue of the pressure Schur
//! complement `B M^-1 B^T q = sigma M_p q` on the zero-mean pressure
//! subspace, with `B` and the velocity mass `M` restricted to the free
//! (interior) velocity dofs. The constant-pressure eigenvalue is zero and is
//! skipped; the next one is bounded away from zero uniformly in the mesh for
//! an inf-sup stable pair.

use nalgebra::DMatrix;

use super::assemble::Operators;
use super::solver::lu_factor;
use super::space::FeSpaces;
use super::sparse::{CsrBuilder, SparseMatrix};
use super::FemError;

fn restrict_scalar_to_free(spaces: &FeSpaces, a: &SparseMatrix) -> SparseMatrix {
    let nf = spaces.n_free_scalar();
    let mut bld = CsrBuilder::new(nf, nf);
    for (fi, &node_i) in spaces.free_nodes.iter().enumerate() {
        let (cols, vals) = a.row(node_i);
        for (j, v) in cols.iter().zip(vals) {
            if let Some(fj) = spaces.free_index[*j] {
                bld.add(fi, fj, *v);
            }
        }
    }
    bld.build()
}

/// Smallest nonzero generalized eigenvalue of the Schur complement proxy.
pub fn inf_sup_proxy(spaces: &FeSpaces, ops: &Operators) -> Result<f64, FemError> {
    let nf = spaces.n_free_scalar();
    let np = spaces.n_pressure;
    let mass_ff = restrict_scalar_to_free(spaces, &ops.mass);
    let mass_lu = lu_factor(&mass_ff)?;

    // Columns of M^-1 B^T, one component at a time.
    let mut minv_bt_x = vec![vec![0.0; nf]; np];
    let mut minv_bt_y = vec![vec![0.0; nf]; np];
    for q in 0..np {
        let (cols, vals) = ops.divergence.row(q);
        let mut bx = vec![0.0; nf];
        let mut by = vec![0.0; nf];
        for (col, v) in cols.iter().zip(vals) {
            let node = col / 2;
            if let Some(fj) = spaces.free_index[node] {
                if col % 2 == 0 {
                    bx[fj] = *v;
                } else {
                    by[fj] = *v;
                }
            }
        }
        minv_bt_x[q] = mass_lu.solve(&bx);
        minv_bt_y[q] = mass_lu.solve(&by);
    }

    // Dense S[q, r] = B_q M^-1 B_r^T summed over both components.
    let mut s = DMatrix::<f64>::zeros(np, np);
    for q in 0..np {
        let (cols, vals) = ops.divergence.row(q);
        for r in 0..np {
            let mut acc = 0.0;
            for (col, v) in cols.iter().zip(vals) {
                let node = col / 2;
                if let Some(fj) = spaces.free_index[node] {
                    let x = if col % 2 == 0 {
                        minv_bt_x[r][fj]
                    } else {
                        minv_bt_y[r][fj]
                    };
                    acc += v * x;
                }
            }
            s[(q, r)] = acc;
        }
    }
    // Enforce exact symmetry against roundoff before factorizing.
    for q in 0..np {
        for r in (q + 1)..np {
            let avg = 0.5 * (s[(q, r)] + s[(r, q)]);
            s[(q, r)] = avg;
            s[(r, q)] = avg;
        }
    }

    let mut mp = DMatrix::<f64>::zeros(np, np);
    for q in 0..np {
        let (cols, vals) = ops.pressure_mass.row(q);
        for (r, v) in cols.iter().zip(vals) {
            mp[(q, *r)] = *v;
        }
    }
    let chol = mp
        .cholesky()
        .ok_or_else(|| FemError::Solver("pressure mass not SPD".into()))?;
    // Transform to a standard symmetric problem L^-1 S L^-T.
    let l = chol.l();
    let linv_s = l.clone().solve_lower_triangular(&s).unwrap();
    let reduced = l
        .solve_lower_triangular(&linv_s.transpose())
        .unwrap()
        .transpose();
    let sym = 0.5 * (&reduced + reduced.transpose());
    let eigen = sym.symmetric_eigen();
    let mut vals: Vec<f64> = eigen.eigenvalues.iter().cloned().collect();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let max = vals.last().cloned().unwrap_or(0.0).abs().max(1e-300);
    // Skip the constant-pressure zero mode.
    vals.into_iter()
        .find(|v| *v > 1e-8 * max)
        .ok_or_else(|| FemError::Solver("no nonzero Schur eigenvalue found".into()))
}
