//! Linearity of intensity editing: FLIE over expression coefficients and the
//! pixel-space LIE proxy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exprgen::ExpressionVector;
use crate::synthworld::Frame;

/// Floor on `|mean|` in every coefficient of variation.
pub const CV_EPS: f64 = 1e-8;

/// Population coefficient of variation `σ/max(|μ|, ε)`; a zero spread gives 0.
/// Flooring rather than adding keeps the ratio exactly scale-free whenever
/// `|μ| ≥ ε`.
pub fn coefficient_of_variation(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd == 0.0 {
        0.0
    } else {
        sd / mean.abs().max(CV_EPS)
    }
}

/// Generated clips and their extracted expressions, one entry per intensity.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryReport {
    pub intensities: Vec<f64>,
    pub level_means: Vec<ExpressionVector>,
    pub per_frame: Vec<Vec<ExpressionVector>>,
    #[serde(skip)]
    pub clips: Vec<Vec<Frame>>,
}

impl TrajectoryReport {
    pub fn validate(&self) -> Result<()> {
        if self.intensities.len() != self.level_means.len() {
            return Err(Error::Dimension {
                op: "trajectory report",
                left: vec![self.intensities.len()],
                right: vec![self.level_means.len()],
            });
        }
        if self.intensities.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("trajectory intensities must be strictly increasing"));
        }
        Ok(())
    }
}

fn require_levels(n: usize) -> Result<()> {
    if n < 3 {
        return Err(Error::config(format!(
            "linearity metrics need at least 3 intensity levels, got {n}"
        )));
    }
    Ok(())
}

/// Sum over coefficients `j` of the coefficient of variation, across adjacent
/// level pairs `i`, of `mean_i[j] − mean_{i−1}[j]`.
pub fn flie(level_means: &[ExpressionVector]) -> Result<f64> {
    require_levels(level_means.len())?;
    let k = level_means[0].len();
    if let Some(m) = level_means.iter().find(|m| m.len() != k) {
        return Err(Error::Dimension {
            op: "flie",
            left: vec![k],
            right: vec![m.len()],
        });
    }
    let mut total = 0.0;
    for j in 0..k {
        let diffs: Vec<f64> = level_means.windows(2).map(|w| w[1][j] - w[0][j]).collect();
        total += coefficient_of_variation(&diffs);
    }
    Ok(total)
}

pub fn flie_report(report: &TrajectoryReport) -> Result<f64> {
    report.validate()?;
    flie(&report.level_means)
}

fn pixel_mse(a: &Frame, b: &Frame) -> Result<f64> {
    a.check_same_shape(b, "pixel mse")?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
}

/// Distance between two clips: mean pixel MSE over aligned frames.
pub fn clip_distance(a: &[Frame], b: &[Frame]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Dimension {
            op: "clip distance",
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        total += pixel_mse(x, y)?;
    }
    Ok(total / a.len() as f64)
}

/// Coefficient of variation of the distances between adjacent levels.
pub fn lie_from_distances(distances: &[f64]) -> f64 {
    coefficient_of_variation(distances)
}

pub fn lie(clips: &[Vec<Frame>]) -> Result<f64> {
    require_levels(clips.len())?;
    let d = clips
        .windows(2)
        .map(|w| clip_distance(&w[0], &w[1]))
        .collect::<Result<Vec<_>>>()?;
    Ok(lie_from_distances(&d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn flie_examples() {
        let affine: Vec<Vec<f64>> = (0..5).map(|i| vec![0.5 + 0.3 * i as f64, -1.0 * i as f64]).collect();
        assert!(flie(&affine).unwrap() < 1e-9);
        // level means with adjacent differences [1, 1, 2]
        let means = vec![vec![0.0], vec![1.0], vec![2.0], vec![4.0]];
        assert!((flie(&means).unwrap() - 0.353_553_4).abs() < 1e-6);
        assert!(matches!(flie(&means[..2]), Err(Error::Config(_))));
    }

    #[test]
    fn lie_examples() {
        let f = Tensor::filled(&[1, 4, 4], 0.3);
        let same = vec![vec![f.clone()], vec![f.clone()], vec![f.clone()]];
        assert_eq!(lie(&same).unwrap(), 0.0);
        assert_eq!(lie_from_distances(&[1.0, 1.0, 1.0]), 0.0);
        assert!((lie_from_distances(&[1.0, 2.0, 3.0]) - 0.408_248_3).abs() < 1e-6);
        assert!(lie(&same[..2]).is_err());
    }

    #[test]
    fn flie_is_scale_invariant() {
        let means = vec![vec![0.1, 2.0], vec![0.4, 2.5], vec![0.5, 3.7], vec![1.1, 3.9]];
        let scaled: Vec<Vec<f64>> = means.iter().map(|m| m.iter().map(|v| 3.7 * v).collect()).collect();
        let (a, b) = (flie(&means).unwrap(), flie(&scaled).unwrap());
        assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn report_requires_increasing_levels() {
        let r = TrajectoryReport {
            intensities: vec![0.0, 0.5, 0.5],
            level_means: vec![vec![0.0]; 3],
            ..Default::default()
        };
        assert!(flie_report(&r).is_err());
    }
}
