use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::format::{read_sequence, write_sequence};
use super::motion::{synthesize_sequence, AnnotatedSequence, MotionSequence, NUM_GENERATORS};
use crate::config::{join_list, parse, parse_list};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

/// Synthetic benchmark settings.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    /// Generator ids of the action classes; class `i` of the dataset is `classes[i]`.
    pub classes: Vec<usize>,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub joints: usize,
    pub min_clips: usize,
    pub max_clips: usize,
    pub min_clip_len: usize,
    pub transition_len: usize,
    pub label_fraction: f64,
    /// Half-width of the uniform per-sequence, per-joint offset.
    pub subject_offset: f64,
    /// Per-sequence, per-joint gain drawn from `1 +- subject_gain`.
    pub subject_gain: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            classes: vec![0, 1, 2, 3],
            train_count: 200,
            val_count: 0,
            test_count: 50,
            min_len: 120,
            max_len: 120,
            joints: 24,
            min_clips: 2,
            max_clips: 4,
            min_clip_len: 16,
            transition_len: 6,
            label_fraction: 0.1,
            subject_offset: 0.5,
            subject_gain: 0.3,
        }
    }
}

impl GeneratorConfig {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::InvalidArgument(
                "at least two action classes are required".into(),
            ));
        }
        if let Some(&c) = self.classes.iter().find(|&&c| c >= NUM_GENERATORS) {
            return Err(Error::InvalidArgument(format!("unknown action generator {c}")));
        }
        let unique: HashSet<_> = self.classes.iter().collect();
        if unique.len() != self.classes.len() {
            return Err(Error::InvalidArgument("action classes must be distinct".into()));
        }
        if !(0.0..=1.0).contains(&self.label_fraction) {
            return Err(Error::InvalidArgument(format!(
                "label fraction {} outside [0, 1]",
                self.label_fraction
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::InvalidArgument("sequence length range is empty".into()));
        }
        if self.min_clips == 0 || self.min_clips > self.max_clips || self.min_clip_len == 0 {
            return Err(Error::InvalidArgument("clip count range is empty".into()));
        }
        let worst = self.max_clips * self.min_clip_len + (self.max_clips - 1) * self.transition_len;
        if worst > self.min_len {
            return Err(Error::InvalidArgument(format!(
                "{} clips of at least {} frames do not fit in {} frames",
                self.max_clips, self.min_clip_len, self.min_len
            )));
        }
        if self.joints == 0 || self.train_count == 0 {
            return Err(Error::InvalidArgument("joints and train_count must be positive".into()));
        }
        if !(self.subject_offset >= 0.0) || !(0.0..1.0).contains(&self.subject_gain) {
            return Err(Error::InvalidArgument(
                "subject_offset must be non-negative and subject_gain in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    /// Flat `data.key` view, in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("data.classes".into(), join_list(&self.classes)),
            ("data.train_count".into(), self.train_count.to_string()),
            ("data.val_count".into(), self.val_count.to_string()),
            ("data.test_count".into(), self.test_count.to_string()),
            ("data.min_len".into(), self.min_len.to_string()),
            ("data.max_len".into(), self.max_len.to_string()),
            ("data.joints".into(), self.joints.to_string()),
            ("data.min_clips".into(), self.min_clips.to_string()),
            ("data.max_clips".into(), self.max_clips.to_string()),
            ("data.min_clip_len".into(), self.min_clip_len.to_string()),
            ("data.transition_len".into(), self.transition_len.to_string()),
            ("data.label_fraction".into(), self.label_fraction.to_string()),
            ("data.subject_offset".into(), self.subject_offset.to_string()),
            ("data.subject_gain".into(), self.subject_gain.to_string()),
        ]
    }

    /// Applies one `data.key` setting. Returns `Ok(false)` for keys outside
    /// the `data.` section.
    pub fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "data.classes" => self.classes = parse_list(key, v)?,
            "data.train_count" => self.train_count = parse(key, v)?,
            "data.val_count" => self.val_count = parse(key, v)?,
            "data.test_count" => self.test_count = parse(key, v)?,
            "data.min_len" => self.min_len = parse(key, v)?,
            "data.max_len" => self.max_len = parse(key, v)?,
            "data.joints" => self.joints = parse(key, v)?,
            "data.min_clips" => self.min_clips = parse(key, v)?,
            "data.max_clips" => self.max_clips = parse(key, v)?,
            "data.min_clip_len" => self.min_clip_len = parse(key, v)?,
            "data.transition_len" => self.transition_len = parse(key, v)?,
            "data.label_fraction" => self.label_fraction = parse(key, v)?,
            "data.subject_offset" => self.subject_offset = parse(key, v)?,
            "data.subject_gain" => self.subject_gain = parse(key, v)?,
            k if k.starts_with("data.") => return Err(Error::Config(format!("unknown key `{k}`"))),
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Per-joint affine change `gain * v + offset` standing in for subject
/// differences in body shape and posture.
fn apply_subject(seq: &mut AnnotatedSequence, offset: f64, gain: f64, seed: u64) -> Result<()> {
    if offset == 0.0 && gain == 0.0 {
        return Ok(());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5b1e_c7a0);
    let j = seq.sequence.joints();
    let params: Vec<(f64, f64)> = (0..j)
        .map(|_| {
            let g = 1.0 + if gain > 0.0 { rng.random_range(-gain..gain) } else { 0.0 };
            let o = if offset > 0.0 {
                rng.random_range(-offset..offset)
            } else {
                0.0
            };
            (g, o)
        })
        .collect();
    let values: Vec<f32> = seq
        .sequence
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let (g, o) = params[i % j];
            (g * v as f64 + o) as f32
        })
        .collect();
    let (t, rate) = (seq.sequence.num_frames(), seq.sequence.frame_rate());
    seq.sequence = MotionSequence::new(t, j, values, rate)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Path relative to the manifest's directory.
    pub path: PathBuf,
    pub split: Split,
    pub labeled: bool,
}

/// Line-oriented list of `path split labeled(0|1)` records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn labeled_train_count(&self) -> usize {
        self.split(Split::Train).filter(|e| e.labeled).count()
    }

    /// Marks exactly `ceil(fraction * train_count)` train entries as labeled,
    /// chosen by a seeded shuffle.
    pub fn relabel(&mut self, fraction: f64, seed: u64) -> Result<()> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::InvalidArgument(format!(
                "label fraction {fraction} outside [0, 1]"
            )));
        }
        let mut train: Vec<usize> = (0..self.entries.len())
            .filter(|&i| self.entries[i].split == Split::Train)
            .collect();
        let k = labeled_count(fraction, train.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1abe_1ed0);
        train.shuffle(&mut rng);
        for (rank, &i) in train.iter().enumerate() {
            self.entries[i].labeled = rank < k;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# seed {}\n", self.seed);
        for e in &self.entries {
            s.push_str(&format!("{} {} {}\n", e.path.display(), e.split, u8::from(e.labeled)));
        }
        s
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut seed = 0;
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("seed ") {
                    seed = v
                        .trim()
                        .parse()
                        .map_err(|_| Error::format(origin, "bad seed comment"))?;
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [path, split, labeled] = fields[..] else {
                return Err(Error::format(
                    origin,
                    format!("line {}: expected `path split labeled`", i + 1),
                ));
            };
            let split: Split = split.parse().map_err(|e: Error| Error::format(origin, e.to_string()))?;
            let labeled = match labeled {
                "0" => false,
                "1" => true,
                _ => return Err(Error::format(origin, format!("line {}: labeled must be 0 or 1", i + 1))),
            };
            if !seen.insert(path.to_string()) {
                return Err(Error::format(origin, format!("line {}: `{path}` listed twice", i + 1)));
            }
            entries.push(ManifestEntry {
                path: PathBuf::from(path),
                split,
                labeled,
            });
        }
        Ok(Self { seed, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

pub fn labeled_count(fraction: f64, train_count: usize) -> usize {
    // tolerate representation error such as 0.1 * 200 = 20.000000000000004
    let exact = fraction * train_count as f64;
    let k = (exact - 1e-9).ceil().max(0.0) as usize;
    k.min(train_count)
}

/// Manifest plus the generated sequences, in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedDataset {
    pub manifest: DatasetManifest,
    pub sequences: Vec<AnnotatedSequence>,
    pub num_classes: usize,
}

fn random_partition<R: Rng>(rng: &mut R, total: usize, parts: usize, min_part: usize) -> Vec<usize> {
    let slack = total - parts * min_part;
    let mut cuts: Vec<usize> = (0..parts - 1).map(|_| rng.random_range(0..=slack)).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(parts);
    let mut prev = 0;
    for &c in cuts.iter().chain(std::iter::once(&slack)) {
        out.push(min_part + c - prev);
        prev = c;
    }
    out
}

/// Generates a seeded synthetic benchmark. Action labels are dataset class
/// indices `0..classes.len()`; background is `classes.len()`.
pub fn build_dataset(cfg: &GeneratorConfig, seed: u64) -> Result<GeneratedDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    let mut sequences = Vec::new();
    let splits = [
        (Split::Train, cfg.train_count),
        (Split::Val, cfg.val_count),
        (Split::Test, cfg.test_count),
    ];
    let mut index = 0;
    for (split, count) in splits {
        for _ in 0..count {
            let len = rng.random_range(cfg.min_len..=cfg.max_len);
            let max_fit = (cfg.min_clips..=cfg.max_clips)
                .rev()
                .find(|&n| n * cfg.min_clip_len + (n - 1) * cfg.transition_len <= len)
                .expect("validated");
            let n = rng.random_range(cfg.min_clips..=max_fit);
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                loop {
                    let c = rng.random_range(0..cfg.num_classes());
                    if i == 0 || labels[i - 1] != c {
                        labels.push(c);
                        break;
                    }
                }
            }
            let durations = random_partition(&mut rng, len - (n - 1) * cfg.transition_len, n, cfg.min_clip_len);
            let generators: Vec<usize> = labels.iter().map(|&l| cfg.classes[l]).collect();
            let seq_seed = rng.random::<u64>();
            let mut seq = synthesize_sequence(&generators, &durations, cfg.transition_len, cfg.joints, seq_seed)?;
            apply_subject(&mut seq, cfg.subject_offset, cfg.subject_gain, seq_seed)?;
            for (seg, &l) in seq.segments.iter_mut().zip(&labels) {
                seg.label = l;
            }
            entries.push(ManifestEntry {
                path: PathBuf::from(format!("data/seq_{index:05}.bids")),
                split,
                labeled: split != Split::Train,
            });
            sequences.push(seq);
            index += 1;
        }
    }
    let mut manifest = DatasetManifest { seed, entries };
    manifest.relabel(cfg.label_fraction, seed)?;
    Ok(GeneratedDataset {
        manifest,
        sequences,
        num_classes: cfg.num_classes(),
    })
}

impl GeneratedDataset {
    /// Writes every sequence and `manifest.txt` under `dir`; returns the manifest path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let data_dir = dir.join("data");
        std::fs::create_dir_all(&data_dir).map_err(|e| Error::io(&data_dir, e))?;
        for (entry, seq) in self.manifest.entries.iter().zip(&self.sequences) {
            write_sequence(&dir.join(&entry.path), seq)?;
        }
        let path = dir.join("manifest.txt");
        self.manifest.save(&path)?;
        Ok(path)
    }

    pub fn split(&self, split: Split) -> Vec<(&ManifestEntry, &AnnotatedSequence)> {
        self.manifest
            .entries
            .iter()
            .zip(&self.sequences)
            .filter(|(e, _)| e.split == split)
            .collect()
    }
}

/// Sequences of a manifest file, read from paths relative to its directory.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub sequences: Vec<AnnotatedSequence>,
}

impl LoadedDataset {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let sequences = manifest
            .entries
            .iter()
            .map(|e| read_sequence(&root.join(&e.path)))
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = sequences.first() {
            let j = first.sequence.joints();
            if sequences.iter().any(|s| s.sequence.joints() != j) {
                return Err(Error::Shape("sequences in one dataset must share J".into()));
            }
        }
        Ok(Self { manifest, sequences })
    }

    pub fn from_generated(g: &GeneratedDataset) -> Self {
        Self {
            manifest: g.manifest.clone(),
            sequences: g.sequences.clone(),
        }
    }

    pub fn joints(&self) -> usize {
        self.sequences.first().map_or(0, |s| s.sequence.joints())
    }

    pub fn split(&self, split: Split) -> Vec<&AnnotatedSequence> {
        self.manifest
            .entries
            .iter()
            .zip(&self.sequences)
            .filter(|(e, _)| e.split == split)
            .map(|(_, s)| s)
            .collect()
    }

    pub fn labeled_train(&self) -> Vec<&AnnotatedSequence> {
        self.manifest
            .entries
            .iter()
            .zip(&self.sequences)
            .filter(|(e, _)| e.split == Split::Train && e.labeled)
            .map(|(_, s)| s)
            .collect()
    }

    /// Highest segment label plus one.
    pub fn inferred_num_classes(&self) -> usize {
        self.sequences
            .iter()
            .flat_map(|s| s.segments.iter().map(|g| g.label + 1))
            .max()
            .unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            train_count: 20,
            test_count: 5,
            joints: 4,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn full_fraction_labels_everything() {
        let cfg = GeneratorConfig {
            label_fraction: 1.0,
            ..small()
        };
        let d = build_dataset(&cfg, 3).unwrap();
        assert_eq!(d.manifest.labeled_train_count(), 20);
    }

    #[test]
    fn tenth_of_two_hundred_is_twenty() {
        assert_eq!(labeled_count(0.1, 200), 20);
        assert_eq!(labeled_count(0.15, 10), 2);
        assert_eq!(labeled_count(0.0, 10), 0);
        let mut m = DatasetManifest {
            seed: 0,
            entries: (0..200)
                .map(|i| ManifestEntry {
                    path: PathBuf::from(format!("{i}")),
                    split: Split::Train,
                    labeled: false,
                })
                .collect(),
        };
        m.relabel(0.1, 5).unwrap();
        assert_eq!(m.labeled_train_count(), 20);
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = build_dataset(&small(), 11).unwrap();
        let b = build_dataset(&small(), 11).unwrap();
        assert_eq!(a, b);
        let c = build_dataset(&small(), 12).unwrap();
        assert_ne!(a.sequences, c.sequences);
    }

    #[test]
    fn bad_fraction_is_rejected() {
        let cfg = GeneratorConfig {
            label_fraction: 1.5,
            ..small()
        };
        assert!(build_dataset(&cfg, 0).is_err());
        let cfg = GeneratorConfig {
            classes: vec![0],
            ..small()
        };
        assert!(build_dataset(&cfg, 0).is_err());
    }

    #[test]
    fn generated_sequences_respect_config() {
        let cfg = small();
        let d = build_dataset(&cfg, 1).unwrap();
        assert_eq!(d.manifest.count(Split::Train), 20);
        assert_eq!(d.manifest.count(Split::Test), 5);
        for s in &d.sequences {
            assert_eq!(s.num_frames(), 120);
            assert!(s.segments.len() >= cfg.min_clips && s.segments.len() <= cfg.max_clips);
            assert!(s
                .segments
                .iter()
                .all(|g| g.label < cfg.num_classes() && g.len() >= cfg.min_clip_len));
            assert!(s.segments.windows(2).all(|w| w[0].label != w[1].label));
        }
    }

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let d = build_dataset(&small(), 2).unwrap();
        let path = d.write(dir.path()).unwrap();
        let loaded = LoadedDataset::load(&path).unwrap();
        assert_eq!(loaded.manifest, d.manifest);
        assert_eq!(loaded.sequences, d.sequences);
        assert_eq!(loaded.labeled_train().len(), 2);
    }

    #[test]
    fn manifest_rejects_duplicates_and_bad_flags() {
        let p = Path::new("m");
        assert!(DatasetManifest::parse("a train 1\na test 1\n", p).is_err());
        assert!(DatasetManifest::parse("a train 2\n", p).is_err());
        assert!(DatasetManifest::parse("a holdout 1\n", p).is_err());
        let m = DatasetManifest::parse("# seed 9\na train 1\nb test 0\n", p).unwrap();
        assert_eq!(m.seed, 9);
        assert_eq!(m.entries.len(), 2);
    }
}
