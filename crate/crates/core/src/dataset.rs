//! Pairs annotated intervals with motion, merges instructions that share an
//! interval, and assigns a seeded 90/10 train/test split.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{self, CoordSystem, MotionClip};

/// Joins instructions that were given for the same interval.
pub const SEPARATOR: &str = " ; ";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub video_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator: Option<String>,
}

/// Field-level problems with an annotation record.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FieldError {
    pub field: &'static str,
    pub message: String,
}

impl AnnotationRecord {
    pub fn check(&self) -> std::result::Result<(), Vec<FieldError>> {
        let mut errs = Vec::new();
        if self.video_id.trim().is_empty() {
            errs.push(FieldError {
                field: "video_id",
                message: "video id must not be empty".into(),
            });
        }
        if !(self.start_s >= 0.0) || !self.start_s.is_finite() {
            errs.push(FieldError {
                field: "start_s",
                message: "start must be a non-negative number of seconds".into(),
            });
        }
        if !self.end_s.is_finite() {
            errs.push(FieldError {
                field: "end_s",
                message: "end must be a finite number of seconds".into(),
            });
        } else if !(self.start_s < self.end_s) {
            errs.push(FieldError {
                field: "end_s",
                message: "start must precede end".into(),
            });
        }
        if self.instruction.trim().is_empty() {
            errs.push(FieldError {
                field: "instruction",
                message: "instruction must not be empty".into(),
            });
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }

    fn key(&self) -> GroupKey {
        GroupKey {
            video_id: self.video_id.clone(),
            start_s: self.start_s,
            end_s: self.end_s,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct GroupKey {
    video_id: String,
    start_s: f64,
    end_s: f64,
}

impl Eq for GroupKey {}

impl Ord for GroupKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.video_id
            .cmp(&other.video_id)
            .then(self.start_s.total_cmp(&other.start_s))
            .then(self.end_s.total_cmp(&other.end_s))
    }
}

impl PartialOrd for GroupKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedExample {
    pub example_id: String,
    pub clip: MotionClip,
    pub instruction: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub examples: Vec<PairedExample>,
    pub seed: u64,
    pub separator: String,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &PairedExample> {
        self.examples.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// A manifest holding only the examples of one split.
    pub fn only(&self, split: Split) -> DatasetManifest {
        DatasetManifest {
            examples: self.split(split).cloned().collect(),
            seed: self.seed,
            separator: self.separator.clone(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// The coordinate tag shared by every clip, or `None` when mixed or empty.
    pub fn coord(&self) -> Option<CoordSystem> {
        let first = self.examples.first()?.clip.coord;
        self.examples
            .iter()
            .all(|e| e.clip.coord == first)
            .then_some(first)
    }

    /// Re-expresses every clip in `coord`. Local clips cannot return to World.
    pub fn in_coord(&self, coord: CoordSystem) -> Result<DatasetManifest> {
        let mut out = self.clone();
        for e in &mut out.examples {
            match (e.clip.coord, coord) {
                (CoordSystem::Local, CoordSystem::World) => {
                    return Err(Error::AlreadyLocal {
                        clip_id: e.clip.clip_id.clone(),
                    })
                }
                (CoordSystem::World, CoordSystem::Local) => e.clip = skeleton::world_to_local(&e.clip)?,
                _ => {}
            }
        }
        Ok(out)
    }

    pub fn manifest_lines(&self) -> Vec<ManifestLine> {
        self.examples
            .iter()
            .map(|e| ManifestLine {
                clip_path: format!("clips/{}.json", e.example_id),
                instruction: e.instruction.clone(),
                split: e.split,
            })
            .collect()
    }

    /// Writes `clips/<example_id>.json` and `manifest.jsonl` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let clip_dir = dir.join("clips");
        std::fs::create_dir_all(&clip_dir).map_err(|e| Error::io(&clip_dir, e))?;
        for ex in &self.examples {
            ex.clip
                .save(&clip_dir.join(format!("{}.json", ex.example_id)))?;
        }
        let path = dir.join("manifest.jsonl");
        let mut out = Vec::new();
        for line in self.manifest_lines() {
            serde_json::to_writer(&mut out, &line).map_err(|e| Error::json(&path, e))?;
            out.push(b'\n');
        }
        let mut file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        file.write_all(&out).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<DatasetManifest> {
        let path = dir.join("manifest.jsonl");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut examples = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let line: ManifestLine =
                serde_json::from_str(line).map_err(|e| Error::json(&path, e))?;
            let clip = MotionClip::load(&dir.join(&line.clip_path))?;
            examples.push(PairedExample {
                example_id: clip.clip_id.clone(),
                clip,
                instruction: line.instruction,
                split: line.split,
            });
        }
        Ok(DatasetManifest {
            examples,
            seed: 0,
            separator: SEPARATOR.to_string(),
        })
    }
}

/// One line of `manifest.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestLine {
    pub clip_path: String,
    pub instruction: String,
    pub split: Split,
}

pub fn merge_instructions(records: &[AnnotationRecord]) -> Result<String> {
    let first = records.first().ok_or(Error::EmptyGroup)?;
    let key = first.key();
    if records.iter().any(|r| r.key() != key) {
        return Err(Error::MismatchedKeys);
    }
    Ok(records
        .iter()
        .map(|r| r.instruction.as_str())
        .collect::<Vec<_>>()
        .join(SEPARATOR))
}

/// `train = ceil(0.9 n)`, `test = n - train`.
pub fn split_counts(n: usize) -> (usize, usize) {
    let train = (9 * n).div_ceil(10);
    (train, n - train)
}

pub fn build_dataset(
    clips: &[MotionClip],
    annotations: &[AnnotationRecord],
    seed: u64,
) -> Result<DatasetManifest> {
    let by_id: HashMap<&str, &MotionClip> =
        clips.iter().map(|c| (c.clip_id.as_str(), c)).collect();

    let mut groups: BTreeMap<GroupKey, Vec<AnnotationRecord>> = BTreeMap::new();
    for rec in annotations {
        rec.check().map_err(|errs| Error::InvalidAnnotation {
            video_id: rec.video_id.clone(),
            start_s: rec.start_s,
            end_s: rec.end_s,
            reason: errs
                .iter()
                .map(|e| e.message.as_str())
                .collect::<Vec<_>>()
                .join("; "),
        })?;
        if !by_id.contains_key(rec.video_id.as_str()) {
            return Err(Error::UnknownVideo(rec.video_id.clone()));
        }
        groups.entry(rec.key()).or_default().push(rec.clone());
    }

    let mut per_video: HashMap<String, usize> = HashMap::new();
    let mut examples = Vec::with_capacity(groups.len());
    for (key, records) in &groups {
        let source = by_id[key.video_id.as_str()];
        skeleton::ensure_valid(source)?;
        let segment = skeleton::clip_by_time(source, key.start_s, key.end_s).map_err(|e| {
            Error::InvalidAnnotation {
                video_id: key.video_id.clone(),
                start_s: key.start_s,
                end_s: key.end_s,
                reason: e.to_string(),
            }
        })?;
        let ordinal = per_video.entry(key.video_id.clone()).or_default();
        let example_id = format!("{}-{:03}", key.video_id, *ordinal);
        *ordinal += 1;
        let mut clip = skeleton::ensure_local(&segment);
        clip.clip_id = example_id.clone();
        examples.push(PairedExample {
            example_id,
            clip,
            instruction: merge_instructions(records)?,
            split: Split::Train,
        });
    }

    assign_splits(&mut examples, seed);
    Ok(DatasetManifest {
        examples,
        seed,
        separator: SEPARATOR.to_string(),
    })
}

/// Seeded uniform shuffle; the first `ceil(0.9 n)` shuffled examples train.
pub fn assign_splits(examples: &mut [PairedExample], seed: u64) {
    let (train, _) = split_counts(examples.len());
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    for (rank, &i) in order.iter().enumerate() {
        examples[i].split = if rank < train {
            Split::Train
        } else {
            Split::Test
        };
    }
}

pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn save_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let text = serde_json::to_string_pretty(records).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
