use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Expression coefficients of one frame.
pub type ExpressionVector = Vec<f64>;

/// Sanity bound on generated coefficients.
pub const EXPRESSION_CLAMP: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionLabel {
    Neutral,
    Angry,
    Contempt,
    Disgusted,
    Fear,
    Happy,
    Sad,
    Surprised,
}

impl EmotionLabel {
    pub const ALL: [EmotionLabel; 8] = [
        EmotionLabel::Neutral,
        EmotionLabel::Angry,
        EmotionLabel::Contempt,
        EmotionLabel::Disgusted,
        EmotionLabel::Fear,
        EmotionLabel::Happy,
        EmotionLabel::Sad,
        EmotionLabel::Surprised,
    ];

    pub const COUNT: usize = 8;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL.get(i).copied().ok_or(Error::Range {
            what: "emotion label index",
            value: i as f64,
            range: "0..8",
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            EmotionLabel::Neutral => "neutral",
            EmotionLabel::Angry => "angry",
            EmotionLabel::Contempt => "contempt",
            EmotionLabel::Disgusted => "disgusted",
            EmotionLabel::Fear => "fear",
            EmotionLabel::Happy => "happy",
            EmotionLabel::Sad => "sad",
            EmotionLabel::Surprised => "surprised",
        }
    }

    pub fn is_neutral(self) -> bool {
        self == EmotionLabel::Neutral
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmotionLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|l| l.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::config(format!("unknown emotion label `{s}`")))
    }
}

/// A labeled sequence of expression vectors with uniform dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpressionSequence {
    pub frames: Vec<ExpressionVector>,
    pub label: EmotionLabel,
}

impl ExpressionSequence {
    pub fn new(frames: Vec<ExpressionVector>, label: EmotionLabel) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::config("expression sequence must have at least one frame"));
        }
        let k = frames[0].len();
        if k == 0 {
            return Err(Error::config("expression vectors must be non-empty"));
        }
        for (i, f) in frames.iter().enumerate() {
            if f.len() != k {
                return Err(Error::Dimension {
                    op: "expression sequence",
                    left: vec![k],
                    right: vec![i, f.len()],
                });
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    location: format!("expression sequence frame {i}"),
                });
            }
        }
        Ok(ExpressionSequence { frames, label })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.frames[0].len()
    }

    /// Row-major `[N×K]` copy.
    pub fn flat(&self) -> Vec<f64> {
        self.frames.iter().flatten().copied().collect()
    }

    /// Writes `frame,psi_0,…` rows to `path` and the label to `path` + `.label`.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        write_expression_csv(path, &self.frames)?;
        let side = label_sidecar(path);
        std::fs::write(&side, format!("{}\n", self.label)).map_err(|e| Error::io(&side, e))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let frames = read_expression_csv(path)?;
        let side = label_sidecar(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        Self::new(frames, text.parse()?)
    }
}

fn label_sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".label");
    s.into()
}

pub fn write_expression_csv(path: &Path, frames: &[ExpressionVector]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let k = frames.first().map_or(0, |f| f.len());
    let run = |w: &mut std::io::BufWriter<std::fs::File>| -> std::io::Result<()> {
        write!(w, "frame")?;
        for j in 0..k {
            write!(w, ",psi_{j}")?;
        }
        writeln!(w)?;
        for (i, f) in frames.iter().enumerate() {
            write!(w, "{i}")?;
            for v in f {
                write!(w, ",{v:e}")?;
            }
            writeln!(w)?;
        }
        w.flush()
    };
    run(&mut w).map_err(|e| Error::io(path, e))
}

/// Reads rows written by [`write_expression_csv`]; the first column is the frame index.
pub fn read_expression_csv(path: &Path) -> Result<Vec<ExpressionVector>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if n == 0 || line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .skip(1)
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        out.push(row);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_round_trip_through_names_and_indices() {
        for (i, l) in EmotionLabel::ALL.iter().enumerate() {
            assert_eq!(l.index(), i);
            assert_eq!(EmotionLabel::from_index(i).unwrap(), *l);
            assert_eq!(l.name().parse::<EmotionLabel>().unwrap(), *l);
        }
        assert!("bored".parse::<EmotionLabel>().is_err());
        assert!(EmotionLabel::from_index(8).is_err());
    }

    #[test]
    fn sequence_rejects_ragged_frames() {
        assert!(ExpressionSequence::new(vec![], EmotionLabel::Sad).is_err());
        assert!(ExpressionSequence::new(vec![vec![1.0], vec![1.0, 2.0]], EmotionLabel::Sad).is_err());
        assert!(ExpressionSequence::new(vec![vec![f64::NAN]], EmotionLabel::Sad).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("seq.csv");
        let s = ExpressionSequence::new(
            vec![vec![0.1, -2.5e-17], vec![1.0 / 3.0, 7.0]],
            EmotionLabel::Fear,
        )
        .unwrap();
        s.save_csv(&p).unwrap();
        assert_eq!(ExpressionSequence::load_csv(&p).unwrap(), s);
    }
}
