//! Motion clips: 22-joint skeleton frames, validation, root-relative
//! conversion and time-based clipping.
//!
//! Joints follow the first 22 entries of the SMPL kinematic tree with the
//! pelvis at index 0. Positions are meters, times are seconds, and the
//! vertical axis is `z`.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_JOINTS: usize = 22;

/// Values per flattened frame (joint-major, then x, y, z).
pub const FRAME_DIM: usize = NUM_JOINTS * 3;

pub const ROOT: usize = 0;

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "pelvis",
    "left_hip",
    "right_hip",
    "spine1",
    "left_knee",
    "right_knee",
    "spine2",
    "left_ankle",
    "right_ankle",
    "spine3",
    "left_foot",
    "right_foot",
    "neck",
    "left_collar",
    "right_collar",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
];

/// Parent of each joint in the kinematic tree; the root has none.
pub const PARENTS: [Option<usize>; NUM_JOINTS] = [
    None,
    Some(0),
    Some(0),
    Some(0),
    Some(1),
    Some(2),
    Some(3),
    Some(4),
    Some(5),
    Some(6),
    Some(7),
    Some(8),
    Some(9),
    Some(9),
    Some(9),
    Some(12),
    Some(13),
    Some(14),
    Some(16),
    Some(17),
    Some(18),
    Some(19),
];

pub type Joint = [f64; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Frame {
    pub joints: Vec<Joint>,
}

impl Frame {
    pub fn new(joints: Vec<Joint>) -> Self {
        Frame { joints }
    }

    pub fn root(&self) -> Joint {
        self.joints[ROOT]
    }

    /// Joint-major flattening: `[j0.x, j0.y, j0.z, j1.x, ...]`.
    pub fn flatten(&self) -> impl Iterator<Item = f64> + '_ {
        self.joints.iter().flat_map(|j| j.iter().copied())
    }

    fn root_relative(&self) -> Frame {
        let [rx, ry, rz] = self.root();
        Frame {
            joints: self
                .joints
                .iter()
                .map(|&[x, y, z]| [x - rx, y - ry, z - rz])
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoordSystem {
    World,
    Local,
}

impl fmt::Display for CoordSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CoordSystem::World => "world",
            CoordSystem::Local => "local",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionClip {
    pub clip_id: String,
    pub fps: f64,
    pub coord: CoordSystem,
    pub frames: Vec<Frame>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    NoFrames,
    JointCount { frame: usize, found: usize },
    NonFinite { frame: usize, joint: usize },
    NonPositiveFps(f64),
    LocalRootNotAtOrigin { frame: usize, root: Joint },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoFrames => write!(f, "clip has no frames"),
            Violation::JointCount { frame, found } => {
                write!(f, "frame {frame}: expected {NUM_JOINTS} joints, found {found}")
            }
            Violation::NonFinite { frame, joint } => {
                write!(f, "frame {frame}: joint {joint} has a non-finite coordinate")
            }
            Violation::NonPositiveFps(fps) => write!(f, "fps must be positive, got {fps}"),
            Violation::LocalRootNotAtOrigin { frame, root } => write!(
                f,
                "frame {frame}: local clip has root at ({}, {}, {}) instead of the origin",
                root[0], root[1], root[2]
            ),
        }
    }
}

/// Checks every clip invariant and reports all violations found.
pub fn validate(clip: &MotionClip) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    if !(clip.fps > 0.0) || !clip.fps.is_finite() {
        out.push(Violation::NonPositiveFps(clip.fps));
    }
    if clip.frames.is_empty() {
        out.push(Violation::NoFrames);
    }
    for (i, frame) in clip.frames.iter().enumerate() {
        if frame.joints.len() != NUM_JOINTS {
            out.push(Violation::JointCount {
                frame: i,
                found: frame.joints.len(),
            });
        }
        if let Some(j) = frame
            .joints
            .iter()
            .position(|p| p.iter().any(|v| !v.is_finite()))
        {
            out.push(Violation::NonFinite { frame: i, joint: j });
        }
        if clip.coord == CoordSystem::Local {
            if let Some(&root) = frame.joints.first() {
                if root != [0.0; 3] {
                    out.push(Violation::LocalRootNotAtOrigin { frame: i, root });
                }
            }
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

pub(crate) fn ensure_valid(clip: &MotionClip) -> Result<()> {
    validate(clip).map_err(|v| Error::InvalidClip {
        clip_id: clip.clip_id.clone(),
        details: v
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("; "),
    })
}

/// Subtracts each frame's root position from all of its joints.
pub fn world_to_local(clip: &MotionClip) -> Result<MotionClip> {
    if clip.coord == CoordSystem::Local {
        return Err(Error::AlreadyLocal {
            clip_id: clip.clip_id.clone(),
        });
    }
    Ok(MotionClip {
        clip_id: clip.clip_id.clone(),
        fps: clip.fps,
        coord: CoordSystem::Local,
        frames: clip.frames.iter().map(Frame::root_relative).collect(),
    })
}

/// Returns the clip in local coordinates, converting only if needed.
pub fn ensure_local(clip: &MotionClip) -> MotionClip {
    match clip.coord {
        CoordSystem::Local => clip.clone(),
        CoordSystem::World => world_to_local(clip).expect("world clip converts"),
    }
}

/// Half-open frame range `[round(start*fps), round(end*fps))` clamped to the
/// clip, rounding half away from zero.
pub fn frame_range(
    n_frames: usize,
    fps: f64,
    start_s: f64,
    end_s: f64,
) -> Result<std::ops::Range<usize>> {
    let bad = |reason: &str| Error::InvalidInterval {
        start_s,
        end_s,
        reason: reason.to_string(),
    };
    if !(start_s >= 0.0) || !end_s.is_finite() {
        return Err(bad("start must be non-negative and times finite"));
    }
    if !(start_s < end_s) {
        return Err(bad("start must precede end"));
    }
    let to_index = |t: f64| ((t * fps).round().max(0.0) as usize).min(n_frames);
    let (lo, hi) = (to_index(start_s), to_index(end_s));
    if lo >= hi {
        return Err(bad("interval selects no frames"));
    }
    Ok(lo..hi)
}

pub fn clip_by_time(clip: &MotionClip, start_s: f64, end_s: f64) -> Result<MotionClip> {
    let range = frame_range(clip.frames.len(), clip.fps, start_s, end_s)?;
    Ok(MotionClip {
        clip_id: clip.clip_id.clone(),
        fps: clip.fps,
        coord: clip.coord,
        frames: clip.frames[range].to_vec(),
    })
}

impl MotionClip {
    pub fn duration_s(&self) -> f64 {
        self.frames.len() as f64 / self.fps
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Adds `offset` to every joint of every frame.
    pub fn translated(&self, offset: Joint) -> MotionClip {
        let mut out = self.clone();
        for frame in &mut out.frames {
            for j in &mut frame.joints {
                for k in 0..3 {
                    j[k] += offset[k];
                }
            }
        }
        out
    }

    pub fn to_file(&self) -> ClipFile {
        ClipFile {
            fps: self.fps,
            coord: self.coord,
            frames: self.frames.clone(),
        }
    }

    pub fn from_file(clip_id: impl Into<String>, file: ClipFile) -> MotionClip {
        MotionClip {
            clip_id: clip_id.into(),
            fps: file.fps,
            coord: file.coord,
            frames: file.frames,
        }
    }

    /// Loads a clip file; the clip id is the file stem.
    pub fn load(path: &Path) -> Result<MotionClip> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ClipFile = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(MotionClip::from_file(id, file))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_file()).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// On-disk clip document: `{"fps": .., "coord": "world"|"local", "frames": [[[x,y,z]; 22], ..]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipFile {
    pub fps: f64,
    pub coord: CoordSystem,
    pub frames: Vec<Frame>,
}

/// Loads every `*.json` clip in a directory, sorted by clip id.
pub fn load_clip_dir(dir: &Path) -> Result<Vec<MotionClip>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    let mut clips = paths
        .iter()
        .map(|p| MotionClip::load(p))
        .collect::<Result<Vec<_>>>()?;
    clips.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
    Ok(clips)
}
