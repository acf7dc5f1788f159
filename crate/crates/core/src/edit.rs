//! Intensity editing in expression space: a direction from the neutral
//! reference toward the target emotion, walked by an intensity `k ∈ [0,1]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exprgen::{write_expression_csv, EmotionLabel, ExpressionVector};

/// Norm below which a non-neutral direction is rejected.
pub const DEGENERATE_NORM: f64 = 1e-9;

/// Which way the editing direction points.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignConvention {
    /// `d = e_y − e_n`, so `k = 1` lands on the target.
    #[default]
    Corrected,
    /// `d = e_n − e_y` as the equation is printed; `k = 1` gives `2·e_n − e_y`.
    Literal,
}

/// Editing direction together with the anchors it was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct EditDirection {
    pub label: EmotionLabel,
    pub d: ExpressionVector,
    pub convention: SignConvention,
    neutral: ExpressionVector,
    target: ExpressionVector,
}

impl EditDirection {
    pub fn neutral(&self) -> &[f64] {
        &self.neutral
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    pub fn norm(&self) -> f64 {
        self.d.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn edit_direction(
    e_n: &[f64],
    e_y: &[f64],
    label: EmotionLabel,
    convention: SignConvention,
) -> Result<EditDirection> {
    if e_n.len() != e_y.len() {
        return Err(Error::Dimension {
            op: "edit_direction",
            left: vec![e_n.len()],
            right: vec![e_y.len()],
        });
    }
    let d: ExpressionVector = match convention {
        SignConvention::Corrected => e_y.iter().zip(e_n).map(|(y, n)| y - n).collect(),
        SignConvention::Literal => e_n.iter().zip(e_y).map(|(n, y)| n - y).collect(),
    };
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            location: format!("editing direction for {label}"),
        });
    }
    let dir = EditDirection {
        label,
        d,
        convention,
        neutral: e_n.to_vec(),
        target: e_y.to_vec(),
    };
    let norm = dir.norm();
    if !label.is_neutral() && norm < DEGENERATE_NORM {
        return Err(Error::DegenerateDirection {
            label: label.to_string(),
            norm,
        });
    }
    Ok(dir)
}

fn check_intensity(k: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&k) {
        return Err(Error::Range {
            what: "intensity k",
            value: k,
            range: "[0, 1]",
        });
    }
    Ok(())
}

/// `e_n + k·d`. When `e_n` is the direction's own neutral anchor and the
/// convention is corrected, `k = 1` returns the target anchor exactly.
pub fn apply_intensity(e_n: &[f64], dir: &EditDirection, k: f64) -> Result<ExpressionVector> {
    check_intensity(k)?;
    if e_n.len() != dir.d.len() {
        return Err(Error::Dimension {
            op: "apply_intensity",
            left: vec![dir.d.len()],
            right: vec![e_n.len()],
        });
    }
    let at_target = k == 1.0 && dir.convention == SignConvention::Corrected;
    Ok(e_n
        .iter()
        .zip(&dir.d)
        .enumerate()
        .map(|(j, (n, d))| {
            if at_target && n.to_bits() == dir.neutral[j].to_bits() {
                dir.target[j]
            } else {
                n + k * d
            }
        })
        .collect())
}

/// Componentwise mean over frames.
pub fn mean_expression(frames: &[ExpressionVector]) -> Result<ExpressionVector> {
    let first = frames
        .first()
        .ok_or_else(|| Error::config("mean of an empty expression sequence"))?;
    let mut mean = vec![0.0; first.len()];
    for f in frames {
        if f.len() != mean.len() {
            return Err(Error::Dimension {
                op: "mean_expression",
                left: vec![mean.len()],
                right: vec![f.len()],
            });
        }
        mean.iter_mut().zip(f).for_each(|(m, v)| *m += v);
    }
    let n = frames.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// `n` evenly spaced intensities from 0 to 1 inclusive.
pub fn uniform_intensities(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

/// One sequence of `frames` vectors per intensity. Frame `i` walks from the
/// neutral sequence's frame toward the target sequence's frame; the shorter
/// input is padded by repeating its last frame.
pub fn build_trajectory(
    neutral: &[ExpressionVector],
    target: &[ExpressionVector],
    intensities: &[f64],
    frames: usize,
    label: EmotionLabel,
    convention: SignConvention,
) -> Result<Vec<Vec<ExpressionVector>>> {
    if intensities.is_empty() {
        return Err(Error::config("trajectory needs at least one intensity"));
    }
    if neutral.is_empty() || target.is_empty() || frames == 0 {
        return Err(Error::config("trajectory needs non-empty reference sequences and frames"));
    }
    for &k in intensities {
        check_intensity(k)?;
    }
    if intensities.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::config("trajectory intensities must be sorted ascending"));
    }
    let dirs = (0..frames)
        .map(|i| {
            let n = &neutral[i.min(neutral.len() - 1)];
            let t = &target[i.min(target.len() - 1)];
            edit_direction(n, t, label, convention)
        })
        .collect::<Result<Vec<_>>>()?;
    intensities
        .iter()
        .map(|&k| {
            dirs.iter()
                .map(|d| apply_intensity(d.neutral(), d, k))
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

/// Writes one CSV per intensity level as `level_XX.csv` plus `levels.csv`
/// mapping level index to `k`.
pub fn write_trajectory(dir: &Path, intensities: &[f64], levels: &[Vec<ExpressionVector>]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = String::from("level,k\n");
    for (i, (k, seq)) in intensities.iter().zip(levels).enumerate() {
        write_expression_csv(&dir.join(format!("level_{i:02}.csv")), seq)?;
        index.push_str(&format!("{i},{k}\n"));
    }
    let p = dir.join("levels.csv");
    std::fs::write(&p, index).map_err(|e| Error::io(&p, e))
}
