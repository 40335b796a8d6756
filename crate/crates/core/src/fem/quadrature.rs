//! Triangle quadrature and reference shape functions.
//!
//! One rule everywhere: the 7-point degree-5 rule, which integrates the
//! convection integrand (P2 * grad P2 * P2, degree 5) exactly; mass (degree 4)
//! and stiffness (degree 2) are then exact as well.

/// Barycentric points and weights of the degree-5 rule; weights sum to 1 and
/// are scaled by the reference-triangle area (1/2) on use.
pub const TRI_QUAD: [([f64; 3], f64); 7] = {
    // (6 - sqrt(15)) / 21 and friends, written out to full f64 precision.
    const A1: f64 = 0.059715871789769820;
    const B1: f64 = 0.470142064105115090;
    const W1: f64 = 0.132394152788506180;
    const A2: f64 = 0.797426985353087320;
    const B2: f64 = 0.101286507323456340;
    const W2: f64 = 0.125939180544827150;
    [
        ([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], 0.225),
        ([A1, B1, B1], W1),
        ([B1, A1, B1], W1),
        ([B1, B1, A1], W1),
        ([A2, B2, B2], W2),
        ([B2, A2, B2], W2),
        ([B2, B2, A2], W2),
    ]
};

/// P2 values at a barycentric point, local order
/// `[v0, v1, v2, e01, e12, e02]`.
pub fn p2_values(l: [f64; 3]) -> [f64; 6] {
    [
        l[0] * (2.0 * l[0] - 1.0),
        l[1] * (2.0 * l[1] - 1.0),
        l[2] * (2.0 * l[2] - 1.0),
        4.0 * l[0] * l[1],
        4.0 * l[1] * l[2],
        4.0 * l[0] * l[2],
    ]
}

/// P2 reference gradients (d/dxi, d/deta) at a barycentric point.
pub fn p2_gradients(l: [f64; 3]) -> [[f64; 2]; 6] {
    // grad lambda = [(-1,-1), (1,0), (0,1)]
    let g = [[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]];
    let mut out = [[0.0; 2]; 6];
    for d in 0..2 {
        out[0][d] = (4.0 * l[0] - 1.0) * g[0][d];
        out[1][d] = (4.0 * l[1] - 1.0) * g[1][d];
        out[2][d] = (4.0 * l[2] - 1.0) * g[2][d];
        out[3][d] = 4.0 * (l[0] * g[1][d] + l[1] * g[0][d]);
        out[4][d] = 4.0 * (l[1] * g[2][d] + l[2] * g[1][d]);
        out[5][d] = 4.0 * (l[0] * g[2][d] + l[2] * g[0][d]);
    }
    out
}

/// P1 values at a barycentric point (the barycentric coordinates themselves).
pub fn p1_values(l: [f64; 3]) -> [f64; 3] {
    l
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn weights_sum_to_one() {
        let s: f64 = TRI_QUAD.iter().map(|(_, w)| w).sum();
        assert_relative_eq!(s, 1.0, max_relative = 1e-15);
    }

    #[test]
    fn rule_is_exact_to_degree_five() {
        // On the reference triangle, int xi^p eta^q = p! q! / (p + q + 2)!.
        let factorial = |n: usize| (1..=n).product::<usize>() as f64;
        for p in 0..=5usize {
            for q in 0..=(5 - p) {
                let exact = factorial(p) * factorial(q) / factorial(p + q + 2);
                let approx: f64 = TRI_QUAD
                    .iter()
                    .map(|(l, w)| 0.5 * w * l[1].powi(p as i32) * l[2].powi(q as i32))
                    .sum();
                assert_relative_eq!(approx, exact, max_relative = 1e-13);
            }
        }
    }

    #[test]
    fn p2_partition_of_unity() {
        for (l, _) in TRI_QUAD {
            let vals = p2_values(l);
            assert_relative_eq!(vals.iter().sum::<f64>(), 1.0, max_relative = 1e-14);
            let grads = p2_gradients(l);
            for d in 0..2 {
                let s: f64 = grads.iter().map(|g| g[d]).sum();
                assert_relative_eq!(s, 0.0, epsilon = 1e-14);
            }
        }
    }
}
