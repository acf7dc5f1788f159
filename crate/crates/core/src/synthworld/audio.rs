//! Synthetic stand-in for a pretrained audio encoder.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seed::rng_for;

pub const AUDIO_DIM: usize = 8;

/// Standard deviation of the noise added to the mouth channel of the features.
const MOUTH_FEATURE_NOISE: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioTrack {
    /// One `AUDIO_DIM` vector per frame; channel 0 carries the mouth signal.
    pub features: Vec<Vec<f64>>,
    pub mouth_open: Vec<f64>,
}

impl AudioTrack {
    pub fn new(features: Vec<Vec<f64>>, mouth_open: Vec<f64>) -> Result<Self> {
        if features.len() != mouth_open.len() || features.is_empty() {
            return Err(Error::Dimension {
                op: "audio track",
                left: vec![features.len()],
                right: vec![mouth_open.len()],
            });
        }
        if let Some(f) = features.iter().find(|f| f.len() != AUDIO_DIM) {
            return Err(Error::Dimension {
                op: "audio features",
                left: vec![AUDIO_DIM],
                right: vec![f.len()],
            });
        }
        Ok(AudioTrack { features, mouth_open })
    }

    pub fn len(&self) -> usize {
        self.mouth_open.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mouth_open.is_empty()
    }

    /// Columns `frame,mouth_open,a0..a7`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let run = |w: &mut std::io::BufWriter<std::fs::File>| -> std::io::Result<()> {
            write!(w, "frame,mouth_open")?;
            for j in 0..AUDIO_DIM {
                write!(w, ",a{j}")?;
            }
            writeln!(w)?;
            for (i, (f, m)) in self.features.iter().zip(&self.mouth_open).enumerate() {
                write!(w, "{i},{m:e}")?;
                for v in f {
                    write!(w, ",{v:e}")?;
                }
                writeln!(w)?;
            }
            w.flush()
        };
        run(&mut w).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let (mut feats, mut mouth) = (Vec::new(), Vec::new());
        for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if n == 0 || line.trim().is_empty() {
                continue;
            }
            let vals = line
                .split(',')
                .skip(1)
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
            if vals.len() != AUDIO_DIM + 1 {
                return Err(Error::format(path, format!("line {}: expected {} values", n + 1, AUDIO_DIM + 1)));
            }
            mouth.push(vals[0]);
            feats.push(vals[1..].to_vec());
        }
        AudioTrack::new(feats, mouth).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Syllable-like pulse train with attack/decay envelopes, plus slowly varying
/// nuisance channels.
pub fn synth_audio(frames: usize, seed: u64) -> Result<AudioTrack> {
    if frames == 0 {
        return Err(Error::config("audio track needs at least one frame"));
    }
    let mut rng = rng_for(seed, &[0xa0d10]);
    let mut drive = vec![0.0; frames];
    let mut next = rng.random_range(0..4usize);
    while next < frames {
        let amp = rng.random_range(0.5..1.0);
        let attack = 2usize;
        let decay = rng.random_range(2.0..4.0);
        for (i, d) in drive.iter_mut().enumerate().skip(next) {
            let dt = (i - next) as f64;
            let env = if i - next < attack {
                (dt + 1.0) / attack as f64
            } else {
                (-(dt - attack as f64 + 1.0) / decay).exp()
            };
            if env < 1e-3 {
                break;
            }
            *d += amp * env;
        }
        next += rng.random_range(4..9usize);
    }
    // light three-tap smoothing, then clamp into range
    let mouth_open: Vec<f64> = (0..frames)
        .map(|i| {
            let prev = drive[i.saturating_sub(1)];
            let nxt = drive[(i + 1).min(frames - 1)];
            (0.25 * prev + 0.5 * drive[i] + 0.25 * nxt).clamp(0.0, 1.0)
        })
        .collect();

    let rho: f64 = 0.9;
    let mut state = [0.0f64; AUDIO_DIM - 1];
    for s in state.iter_mut() {
        *s = rng.sample(StandardNormal);
    }
    let mut features = Vec::with_capacity(frames);
    for &m in &mouth_open {
        let mut f = Vec::with_capacity(AUDIO_DIM);
        f.push(m + MOUTH_FEATURE_NOISE * rng.sample::<f64, _>(StandardNormal));
        for s in state.iter_mut() {
            *s = rho * *s + (1.0 - rho * rho).sqrt() * rng.sample::<f64, _>(StandardNormal);
            f.push(0.3 * *s);
        }
        features.push(f);
    }
    AudioTrack::new(features, mouth_open)
}
