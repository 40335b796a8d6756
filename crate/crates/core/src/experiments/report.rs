//! Error bookkeeping and CSV output shared by the experiment runners.

use std::io::Write;
use std::path::Path;

/// Observed convergence rate between a coarse and a fine error.
pub fn rate(e_coarse: f64, e_fine: f64) -> f64 {
    (e_coarse / e_fine).log2()
}

/// The three tracked error norms of one ensemble member.
#[derive(Debug, Clone, Copy, Default)]
pub struct MemberErrors {
    /// `max_n |u(t_n) - u^h_n|_{L^2}`.
    pub velocity_inf_l2: f64,
    /// `max_n |u(t_n) - u^h_n|_{H^1}`.
    pub velocity_inf_h1: f64,
    /// Discrete `L^2(0,T; L^2)` pressure error.
    pub pressure_l2: f64,
}

/// Per-member errors of one run with ensemble averages and maxima.
#[derive(Debug, Clone, Default)]
pub struct ErrorReport {
    pub members: Vec<MemberErrors>,
}

impl ErrorReport {
    pub fn average(&self) -> MemberErrors {
        let j = self.members.len().max(1) as f64;
        let mut avg = MemberErrors::default();
        for m in &self.members {
            avg.velocity_inf_l2 += m.velocity_inf_l2;
            avg.velocity_inf_h1 += m.velocity_inf_h1;
            avg.pressure_l2 += m.pressure_l2;
        }
        avg.velocity_inf_l2 /= j;
        avg.velocity_inf_h1 /= j;
        avg.pressure_l2 /= j;
        avg
    }

    pub fn max(&self) -> MemberErrors {
        let mut mx = MemberErrors::default();
        for m in &self.members {
            mx.velocity_inf_l2 = mx.velocity_inf_l2.max(m.velocity_inf_l2);
            mx.velocity_inf_h1 = mx.velocity_inf_h1.max(m.velocity_inf_h1);
            mx.pressure_l2 = mx.pressure_l2.max(m.pressure_l2);
        }
        mx
    }
}

/// Writes a UTF-8 CSV with a header row.
pub fn write_csv(
    path: &Path,
    header: &str,
    rows: impl IntoIterator<Item = String>,
) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{header}")?;
    for row in rows {
        writeln!(f, "{row}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rate_trivial_values() {
        assert_relative_eq!(rate(4.0e-3, 1.0e-3), 2.0);
        assert_relative_eq!(rate(1e-5, 1e-5), 0.0);
        // Published pair from the theta = 2/3 averages.
        assert_relative_eq!(rate(3.3456e-3, 8.0196e-4), 2.0607, epsilon = 1e-4);
    }

    #[test]
    fn averages_below_maxima() {
        let rep = ErrorReport {
            members: vec![
                MemberErrors {
                    velocity_inf_l2: 1.0,
                    velocity_inf_h1: 4.0,
                    pressure_l2: 0.5,
                },
                MemberErrors {
                    velocity_inf_l2: 3.0,
                    velocity_inf_h1: 2.0,
                    pressure_l2: 1.5,
                },
            ],
        };
        let avg = rep.average();
        let mx = rep.max();
        assert_relative_eq!(avg.velocity_inf_l2, 2.0);
        assert!(avg.velocity_inf_l2 <= mx.velocity_inf_l2);
        assert!(avg.velocity_inf_h1 <= mx.velocity_inf_h1);
        assert!(avg.pressure_l2 <= mx.pressure_l2);
    }
}
