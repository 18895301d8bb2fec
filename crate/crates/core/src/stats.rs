//! Small statistics helpers shared by the Monte Carlo checks.

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Sample mean and standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl MeanSe {
    pub fn of(xs: &[f64]) -> MeanSe {
        let n = xs.len();
        if n == 0 {
            return MeanSe { mean: f64::NAN, se: f64::NAN, n };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        if n == 1 {
            return MeanSe { mean, se: 0.0, n };
        }
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        MeanSe { mean, se: (var / n as f64).sqrt(), n }
    }

    /// Two-sided normal interval at `z` standard errors.
    pub fn interval(&self, z: f64) -> (f64, f64) {
        (self.mean - z * self.se, self.mean + z * self.se)
    }

    pub fn overlaps(&self, other: &MeanSe, z: f64) -> bool {
        let (a0, a1) = self.interval(z);
        let (b0, b1) = other.interval(z);
        a0 <= b1 && b0 <= a1
    }
}

/// Upper tail probability of a chi-square statistic.
pub fn chi_square_sf(stat: f64, dof: f64) -> f64 {
    let d = ChiSquared::new(dof).expect("positive degrees of freedom");
    1.0 - d.cdf(stat)
}

/// Pearson statistic of observed counts against expected counts.
pub fn pearson(observed: &[u64], expected: &[f64]) -> f64 {
    observed
        .iter()
        .zip(expected)
        .map(|(&o, &e)| (o as f64 - e).powi(2) / e)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_se_basic() {
        let m = MeanSe::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        assert!((m.se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert!(m.overlaps(&MeanSe { mean: 3.0, se: 0.1, n: 4 }, 1.96));
    }

    #[test]
    fn chi_square_tail() {
        // median of chi^2_2 is 2 ln 2
        assert!((chi_square_sf(2.0 * 2f64.ln(), 2.0) - 0.5).abs() < 1e-12);
    }
}
