//! On-disk synthetic corpus.
//!
//! Layout under the corpus root:
//!
//! ```text
//! manifest.toml
//! index.tsv                      shard path identity clip frames [label level]
//! masks/lip.pgm, masks/eye.pgm
//! <identity>/<label>/<level>/<clip>/   labeled clips
//! unlabeled/<identity>/<clip>/         unlabeled clips
//! ```
//!
//! Each clip directory holds `frames.bin` (one `[N×1×S×S]` tensor in the
//! little-endian tensor format), `frames/NNNN.pgm`, `audio.csv`, `expr.csv`
//! (ground-truth coefficients) and `clip.json`.

use std::io::BufRead;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::audio::{synth_audio, AudioTrack};
use super::face::{emotion_prototypes, make_face_basis, FaceBasis, Frame, Prototypes};
use super::pgm::write_pgm;
use crate::error::{Error, Result};
use crate::exprgen::{read_expression_csv, write_expression_csv, EmotionLabel, ExpressionVector};
use crate::numerics::Tensor;
use crate::parallel::map_indexed;
use crate::seed::{derive_seed, rng_for};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusManifest {
    pub seed: u64,
    pub identities: usize,
    pub labels: Vec<EmotionLabel>,
    /// Intensity levels; level `l` scales the prototype by `l/levels`.
    pub levels: usize,
    pub clips_per_cell: usize,
    pub frames_per_clip: usize,
    pub fps: f64,
    pub image_size: usize,
    pub expr_dim: usize,
    pub unlabeled_clips: usize,
    pub unlabeled_frames: usize,
    /// Per-coefficient standard deviation of the slow per-frame wander.
    pub wander: f64,
    /// Standard deviation of the fast prototype-mixing coefficients in the
    /// unlabeled shard.
    pub unlabeled_wander: f64,
    pub write_pgm: bool,
}

impl Default for CorpusManifest {
    fn default() -> Self {
        CorpusManifest {
            seed: 7,
            identities: 2,
            labels: EmotionLabel::ALL.to_vec(),
            levels: 3,
            clips_per_cell: 1,
            frames_per_clip: 24,
            fps: 30.0,
            image_size: 32,
            expr_dim: 50,
            unlabeled_clips: 8,
            unlabeled_frames: 24,
            wander: 0.03,
            unlabeled_wander: 0.5,
            write_pgm: true,
        }
    }
}

impl CorpusManifest {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("identities", self.identities),
            ("labels", self.labels.len()),
            ("levels", self.levels),
            ("clips_per_cell", self.clips_per_cell),
            ("frames_per_clip", self.frames_per_clip),
            ("expr_dim", self.expr_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("manifest field `{name}` must be at least 1")));
            }
        }
        if self.unlabeled_clips > 0 && self.unlabeled_frames == 0 {
            return Err(Error::config("unlabeled_frames must be at least 1"));
        }
        for (name, v) in [
            ("fps", self.fps),
            ("wander", self.wander),
            ("unlabeled_wander", self.unlabeled_wander),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("manifest field `{name}` must be finite and >= 0")));
            }
        }
        if self.fps == 0.0 {
            return Err(Error::config("fps must be positive"));
        }
        let mut seen = self.labels.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.labels.len() {
            return Err(Error::config("manifest labels must be distinct"));
        }
        Ok(())
    }

    pub fn intensity(&self, level: usize) -> f64 {
        level as f64 / self.levels as f64
    }

    pub fn basis(&self, identity: usize) -> Result<FaceBasis> {
        make_face_basis(self.seed, identity as u64, self.expr_dim, self.image_size)
    }

    pub fn prototypes(&self) -> Result<Prototypes> {
        emotion_prototypes(self.expr_dim, self.seed)
    }

    pub fn clip_specs(&self) -> Vec<ClipSpec> {
        let mut out = Vec::new();
        for identity in 0..self.identities {
            for &label in &self.labels {
                for level in 1..=self.levels {
                    for clip in 0..self.clips_per_cell {
                        out.push(ClipSpec {
                            identity,
                            label: Some(label),
                            level: Some(level),
                            clip,
                        });
                    }
                }
            }
        }
        for clip in 0..self.unlabeled_clips {
            out.push(ClipSpec {
                identity: clip % self.identities,
                label: None,
                level: None,
                clip,
            });
        }
        out
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialise manifest: {e}")))
    }
}

/// Coordinates of one clip. Unlabeled clips have neither label nor level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClipSpec {
    pub identity: usize,
    pub label: Option<EmotionLabel>,
    pub level: Option<usize>,
    pub clip: usize,
}

impl ClipSpec {
    pub fn is_labeled(&self) -> bool {
        self.label.is_some()
    }

    pub fn rel_path(&self) -> PathBuf {
        let id = format!("id{:02}", self.identity);
        let clip = format!("clip{:03}", self.clip);
        match (self.label, self.level) {
            (Some(l), Some(lv)) => [id, l.to_string(), format!("level{lv}"), clip].iter().collect(),
            _ => ["unlabeled".to_string(), id, clip].iter().collect(),
        }
    }

    fn seed(&self, base: u64) -> u64 {
        let label = self.label.map_or(u64::MAX, |l| l.index() as u64);
        let level = self.level.map_or(u64::MAX, |l| l as u64);
        derive_seed(base, &[0xc11b, self.identity as u64, label, level, self.clip as u64])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ClipMeta {
    identity: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    label: Option<EmotionLabel>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    level: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    intensity: Option<f64>,
    clip: usize,
    frames: usize,
    fps: f64,
    image_size: usize,
    expr_dim: usize,
    seed: u64,
}

/// A clip held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipData {
    pub spec: ClipSpec,
    pub frames: Vec<Frame>,
    /// Ground-truth coefficients used to render each frame.
    pub psi: Vec<ExpressionVector>,
    pub audio: AudioTrack,
}

impl ClipData {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Stationary AR(1) sequence of `n` vectors of dimension `k`.
fn ar1<R: Rng>(rng: &mut R, n: usize, k: usize, rho: f64, std: f64) -> Vec<Vec<f64>> {
    let innov = (1.0 - rho * rho).sqrt();
    let mut state: Vec<f64> = (0..k).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 {
            for s in state.iter_mut() {
                *s = rho * *s + innov * std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        out.push(state.clone());
    }
    out
}

const LABELED_WANDER_RHO: f64 = 0.8;
const UNLABELED_WANDER_RHO: f64 = 0.3;

/// Expression trajectory, audio and rendered frames for one clip.
pub fn synth_clip(
    manifest: &CorpusManifest,
    basis: &FaceBasis,
    protos: &Prototypes,
    spec: ClipSpec,
) -> Result<ClipData> {
    let seed = spec.seed(manifest.seed);
    let mut rng = rng_for(seed, &[1]);
    let k = manifest.expr_dim;
    let (n, psi) = match (spec.label, spec.level) {
        (Some(label), Some(level)) => {
            let n = manifest.frames_per_clip;
            let centre: Vec<f64> = protos
                .get(label)
                .iter()
                .map(|p| manifest.intensity(level) * p)
                .collect();
            let wander = ar1(&mut rng, n, k, LABELED_WANDER_RHO, manifest.wander);
            let psi: Vec<ExpressionVector> = wander
                .into_iter()
                .map(|w| w.iter().zip(&centre).map(|(a, c)| a + c).collect())
                .collect();
            (n, psi)
        }
        _ => {
            // fast mixing within the span of the emotion prototypes, plus slow isotropic wander
            let n = manifest.unlabeled_frames;
            let coefs = ar1(&mut rng, n, EmotionLabel::COUNT - 1, UNLABELED_WANDER_RHO, manifest.unlabeled_wander);
            let iso = ar1(&mut rng, n, k, LABELED_WANDER_RHO, manifest.wander);
            let psi: Vec<ExpressionVector> = coefs
                .iter()
                .zip(&iso)
                .map(|(c, w)| {
                    let mut v = w.clone();
                    for (ci, (_, p)) in c.iter().zip(protos.iter().skip(1)) {
                        v.iter_mut().zip(p).for_each(|(x, y)| *x += ci * y);
                    }
                    v
                })
                .collect();
            (n, psi)
        }
    };
    let audio = synth_audio(n, derive_seed(seed, &[2]))?;
    let frames = psi
        .iter()
        .zip(&audio.mouth_open)
        .map(|(p, &m)| basis.render(p, m))
        .collect::<Result<Vec<_>>>()?;
    Ok(ClipData {
        spec,
        frames,
        psi,
        audio,
    })
}

/// Counts written by [`gen_corpus`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusSummary {
    pub labeled_clips: usize,
    pub unlabeled_clips: usize,
    pub frames: usize,
}

fn write_clip(root: &Path, manifest: &CorpusManifest, clip: &ClipData) -> Result<()> {
    let dir = root.join(clip.spec.rel_path());
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let s = manifest.image_size;
    let stack = Tensor::new(
        vec![clip.len(), 1, s, s],
        clip.frames.iter().flat_map(|f| f.data().iter().copied()).collect(),
    )?;
    let bin = dir.join("frames.bin");
    let mut buf = Vec::new();
    stack.write_to(&mut buf).map_err(|e| Error::io(&bin, e))?;
    std::fs::write(&bin, buf).map_err(|e| Error::io(&bin, e))?;
    if manifest.write_pgm {
        let fdir = dir.join("frames");
        std::fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
        for (i, f) in clip.frames.iter().enumerate() {
            write_pgm(&fdir.join(format!("{i:04}.pgm")), f.data(), s, s)?;
        }
    }
    clip.audio.write_csv(&dir.join("audio.csv"))?;
    write_expression_csv(&dir.join("expr.csv"), &clip.psi)?;
    let meta = ClipMeta {
        identity: clip.spec.identity,
        label: clip.spec.label,
        level: clip.spec.level,
        intensity: clip.spec.level.map(|l| manifest.intensity(l)),
        clip: clip.spec.clip,
        frames: clip.len(),
        fps: manifest.fps,
        image_size: s,
        expr_dim: manifest.expr_dim,
        seed: manifest.seed,
    };
    let json = dir.join("clip.json");
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::format(&json, e.to_string()))?;
    std::fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))
}

pub const INDEX_HEADER: &str = "shard\tpath\tidentity\tclip\tframes\tlabel\tlevel";

/// Generates the corpus under `root`. Clips are synthesised in parallel when
/// `threads > 0`; output bytes do not depend on the thread count.
pub fn gen_corpus(manifest: &CorpusManifest, root: &Path, threads: usize) -> Result<CorpusSummary> {
    manifest.validate()?;
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let bases = (0..manifest.identities)
        .map(|i| manifest.basis(i))
        .collect::<Result<Vec<_>>>()?;
    let protos = manifest.prototypes()?;
    let specs = manifest.clip_specs();
    let results = map_indexed(specs.len(), threads, |i| -> Result<usize> {
        let spec = specs[i];
        let clip = synth_clip(manifest, &bases[spec.identity], &protos, spec)?;
        write_clip(root, manifest, &clip)?;
        Ok(clip.len())
    })?;
    let lengths = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut index = String::from(INDEX_HEADER);
    index.push('\n');
    for (spec, n) in specs.iter().zip(&lengths) {
        let path = spec.rel_path().to_string_lossy().replace('\\', "/");
        match (spec.label, spec.level) {
            (Some(l), Some(lv)) => index.push_str(&format!(
                "labeled\t{path}\t{}\t{}\t{n}\t{l}\t{lv}\n",
                spec.identity, spec.clip
            )),
            _ => index.push_str(&format!("unlabeled\t{path}\t{}\t{}\t{n}\n", spec.identity, spec.clip)),
        }
    }
    let ipath = root.join("index.tsv");
    std::fs::write(&ipath, index).map_err(|e| Error::io(&ipath, e))?;
    let mpath = root.join("manifest.toml");
    std::fs::write(&mpath, manifest.to_toml()?).map_err(|e| Error::io(&mpath, e))?;
    let mdir = root.join("masks");
    std::fs::create_dir_all(&mdir).map_err(|e| Error::io(&mdir, e))?;
    let masks = bases[0].masks();
    let s = manifest.image_size;
    write_pgm(&mdir.join("lip.pgm"), masks.lip.data(), s, s)?;
    write_pgm(&mdir.join("eye.pgm"), masks.eye.data(), s, s)?;

    let labeled = specs.iter().filter(|s| s.is_labeled()).count();
    let summary = CorpusSummary {
        labeled_clips: labeled,
        unlabeled_clips: specs.len() - labeled,
        frames: lengths.iter().sum(),
    };
    log::info!(
        "corpus at {}: {} labeled clips, {} unlabeled clips, {} frames",
        root.display(),
        summary.labeled_clips,
        summary.unlabeled_clips,
        summary.frames
    );
    Ok(summary)
}

/// One row of `index.tsv`.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexEntry {
    pub path: PathBuf,
    pub spec: ClipSpec,
    pub frames: usize,
}

/// A corpus opened from disk.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub root: PathBuf,
    pub manifest: CorpusManifest,
    pub entries: Vec<IndexEntry>,
}

impl Corpus {
    pub fn open(root: &Path) -> Result<Self> {
        let mpath = root.join("manifest.toml");
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: CorpusManifest =
            toml::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
        manifest.validate()?;
        let ipath = root.join("index.tsv");
        let file = std::fs::File::open(&ipath).map_err(|e| Error::io(&ipath, e))?;
        let mut entries = Vec::new();
        for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&ipath, e))?;
            if n == 0 || line.trim().is_empty() {
                continue;
            }
            entries.push(parse_index_row(&line).map_err(|r| Error::format(&ipath, format!("line {}: {r}", n + 1)))?);
        }
        Ok(Corpus {
            root: root.to_path_buf(),
            manifest,
            entries,
        })
    }

    pub fn labeled(&self) -> impl Iterator<Item = &IndexEntry> {
        self.entries.iter().filter(|e| e.spec.is_labeled())
    }

    pub fn unlabeled(&self) -> impl Iterator<Item = &IndexEntry> {
        self.entries.iter().filter(|e| !e.spec.is_labeled())
    }

    /// Loads frames and audio from disk, plus the stored ground-truth
    /// coefficients. Training code must not read those coefficients; it
    /// extracts its own from the frames.
    pub fn load_clip(&self, entry: &IndexEntry) -> Result<ClipData> {
        let dir = self.root.join(&entry.path);
        let bin = dir.join("frames.bin");
        let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let stack = Tensor::read_from(&mut bytes.as_slice()).map_err(|e| Error::format(&bin, e.to_string()))?;
        let s = self.manifest.image_size;
        if stack.rank() != 4 || stack.shape()[1..] != [1, s, s] || stack.shape()[0] != entry.frames {
            return Err(Error::format(&bin, format!("unexpected frame stack shape {:?}", stack.shape())));
        }
        let p = s * s;
        let frames = stack
            .data()
            .chunks_exact(p)
            .map(|c| Tensor::new(vec![1, s, s], c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let audio = AudioTrack::read_csv(&dir.join("audio.csv"))?;
        let psi = read_expression_csv(&dir.join("expr.csv"))?;
        if audio.len() != frames.len() || psi.len() != frames.len() {
            return Err(Error::format(&dir, "frame, audio and expression counts differ"));
        }
        Ok(ClipData {
            spec: entry.spec,
            frames,
            psi,
            audio,
        })
    }
}

fn parse_index_row(line: &str) -> std::result::Result<IndexEntry, String> {
    let f: Vec<&str> = line.split('\t').collect();
    let num = |s: &str| s.parse::<usize>().map_err(|e| format!("bad number `{s}`: {e}"));
    match (f.first().copied(), f.len()) {
        (Some("labeled"), 7) => Ok(IndexEntry {
            path: PathBuf::from(f[1]),
            spec: ClipSpec {
                identity: num(f[2])?,
                clip: num(f[3])?,
                label: Some(f[5].parse().map_err(|e: Error| e.to_string())?),
                level: Some(num(f[6])?),
            },
            frames: num(f[4])?,
        }),
        (Some("unlabeled"), 5) => Ok(IndexEntry {
            path: PathBuf::from(f[1]),
            spec: ClipSpec {
                identity: num(f[2])?,
                clip: num(f[3])?,
                label: None,
                level: None,
            },
            frames: num(f[4])?,
        }),
        _ => Err(format!("unrecognised row `{line}`")),
    }
}

/// Lists every file under `root` with its bytes, sorted by relative path.
pub fn snapshot_dir(root: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) -> Result<()> {
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(base, &path, out)?;
            } else {
                let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                out.push((path.strip_prefix(base).unwrap_or(&path).to_path_buf(), bytes));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, root, &mut out)?;
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusManifest {
        CorpusManifest {
            identities: 2,
            labels: vec![EmotionLabel::Neutral, EmotionLabel::Happy],
            levels: 3,
            frames_per_clip: 6,
            unlabeled_clips: 2,
            unlabeled_frames: 5,
            image_size: 16,
            expr_dim: 10,
            ..CorpusManifest::default()
        }
    }

    #[test]
    fn enumeration_matches_manifest_counts() {
        let m = CorpusManifest::default();
        let specs = m.clip_specs();
        assert_eq!(specs.iter().filter(|s| s.is_labeled()).count(), 48);
        assert_eq!(specs.iter().filter(|s| !s.is_labeled()).count(), m.unlabeled_clips);
    }

    #[test]
    fn written_corpus_round_trips_and_has_exact_file_counts() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("corpus");
        let m = small();
        let summary = gen_corpus(&m, &root, 0).unwrap();
        assert_eq!(summary.labeled_clips, 12);
        assert_eq!(summary.unlabeled_clips, 2);
        let corpus = Corpus::open(&root).unwrap();
        assert_eq!(corpus.manifest, m);
        assert_eq!(corpus.entries.len(), 14);
        let pgms = snapshot_dir(&root)
            .unwrap()
            .iter()
            .filter(|(p, _)| p.starts_with("id00") || p.starts_with("id01") || p.starts_with("unlabeled"))
            .filter(|(p, _)| p.extension().is_some_and(|e| e == "pgm"))
            .count();
        assert_eq!(pgms, 12 * 6 + 2 * 5);

        let bases: Vec<_> = (0..2).map(|i| m.basis(i).unwrap()).collect();
        let protos = m.prototypes().unwrap();
        for e in &corpus.entries {
            let loaded = corpus.load_clip(e).unwrap();
            let fresh = synth_clip(&m, &bases[e.spec.identity], &protos, e.spec).unwrap();
            assert_eq!(loaded, fresh);
        }
        let un = corpus.unlabeled().next().unwrap();
        let json = std::fs::read_to_string(root.join(&un.path).join("clip.json")).unwrap();
        assert!(!json.contains("label"));
    }

    #[test]
    fn generation_is_byte_identical_across_runs_and_thread_counts() {
        let dir = tempfile::tempdir().unwrap();
        let m = small();
        gen_corpus(&m, &dir.path().join("a"), 0).unwrap();
        gen_corpus(&m, &dir.path().join("b"), 3).unwrap();
        assert_eq!(
            snapshot_dir(&dir.path().join("a")).unwrap(),
            snapshot_dir(&dir.path().join("b")).unwrap()
        );
    }

    #[test]
    fn top_level_clip_mean_is_near_the_prototype() {
        let m = CorpusManifest {
            labels: vec![EmotionLabel::Happy],
            unlabeled_clips: 0,
            ..CorpusManifest::default()
        };
        let basis = m.basis(0).unwrap();
        let protos = m.prototypes().unwrap();
        let spec = ClipSpec {
            identity: 0,
            label: Some(EmotionLabel::Happy),
            level: Some(3),
            clip: 0,
        };
        let clip = synth_clip(&m, &basis, &protos, spec).unwrap();
        let mut mean = vec![0.0; m.expr_dim];
        for f in &clip.frames {
            let (psi, _) = basis.extract_expression(f).unwrap();
            mean.iter_mut().zip(&psi).for_each(|(a, b)| *a += b / clip.len() as f64);
        }
        let err = mean
            .iter()
            .zip(protos.get(EmotionLabel::Happy))
            .fold(0.0f64, |a, (x, p)| a.max((x - p).abs()));
        assert!(err < 0.1, "{err}");
    }

    #[test]
    fn invalid_manifests_are_rejected() {
        let mut m = small();
        m.levels = 0;
        assert!(m.validate().is_err());
        let mut m = small();
        m.labels = vec![EmotionLabel::Sad, EmotionLabel::Sad];
        assert!(m.validate().is_err());
    }
}
