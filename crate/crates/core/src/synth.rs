//! Parametric motion/text corpora.
//!
//! `Finetune` pairs jumps with coaching instructions from a fixed rule set;
//! `Pretrain` pairs walks, in-place turns and jumps with descriptive
//! captions. Both are deterministic in `(kind, n, seed)`.

use std::f64::consts::PI;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{assign_splits, AnnotationRecord, DatasetManifest, PairedExample, Split, SEPARATOR};
use crate::error::{Error, Result};
use crate::skeleton::{CoordSystem, Frame, Joint, MotionClip, NUM_JOINTS};

pub const ROTATION_THRESHOLD: f64 = 1.5;
pub const ARM_THRESHOLD_M: f64 = 0.35;
pub const KNEE_THRESHOLD_DEG: f64 = 20.0;

pub const FLAW_ROTATION: &str = "increase your rotation speed";
pub const FLAW_ARMS: &str = "keep your arms closer to your body";
pub const FLAW_KNEES: &str = "bend your knees more on landing";
pub const NO_FLAW: &str = "good jump keep the same form";

/// Frame rate of generated clips.
pub const SYNTH_FPS: f64 = 20.0;
/// Global offsets are drawn per axis from `[-OFFSET_RANGE_M, OFFSET_RANGE_M]`.
pub const OFFSET_RANGE_M: f64 = 5.0;

const GRAVITY: f64 = 9.81;
const PELVIS_HEIGHT: f64 = 0.95;
const THIGH: f64 = 0.42;
const SHIN: f64 = 0.43;
const JITTER_SD: f64 = 0.004;
const TRAVEL_SPEED: f64 = 1.2;
// 2^-40 m: fine enough to be invisible, coarse enough that adding an
// offset on the same grid is exact.
const GRID: f64 = 1099511627776.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JumpParams {
    pub rotations: f64,
    pub air_time_s: f64,
    /// Horizontal distance from each wrist to the vertical axis through the root.
    pub arm_offset_m: f64,
    pub knee_flex_deg: f64,
    pub travel_dir: [f64; 2],
    pub rng_seed: u64,
}

impl JumpParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("jump params: {m}")));
        if !(self.air_time_s > 0.0 && self.air_time_s.is_finite()) {
            return bad("air_time_s must be positive");
        }
        if !(self.rotations >= 0.0 && self.rotations.is_finite()) {
            return bad("rotations must be non-negative");
        }
        if !(self.arm_offset_m >= 0.0 && self.arm_offset_m.is_finite()) {
            return bad("arm_offset_m must be non-negative");
        }
        if !(0.0..=150.0).contains(&self.knee_flex_deg) {
            return bad("knee_flex_deg must lie in [0, 150]");
        }
        let norm = self.travel_dir[0].hypot(self.travel_dir[1]);
        if (norm - 1.0).abs() > 1e-9 {
            return bad("travel_dir must be a unit vector");
        }
        Ok(())
    }

    /// Yaw relative to takeoff at time `t` into the flight.
    pub fn yaw_at(&self, t: f64) -> f64 {
        2.0 * PI * self.rotations * t / self.air_time_s
    }
}

/// Everything needed to place the 22 joints for one frame.
#[derive(Clone, Copy, Debug)]
struct Pose {
    root: Joint,
    yaw: f64,
    arm_offset: f64,
    /// Forward swing of the thigh (radians), left then right.
    hip_swing: [f64; 2],
    /// Knee flexion (radians), left then right.
    knee_flex: [f64; 2],
    /// Forward displacement of the wrists (meters), left then right.
    arm_swing: [f64; 2],
}

fn quantize(v: f64) -> f64 {
    (v * GRID).round() / GRID
}

/// Body-frame joint positions (x left, y forward, z up), pelvis at origin.
fn body_joints(p: &Pose) -> [Joint; NUM_JOINTS] {
    let mut j = [[0.0; 3]; NUM_JOINTS];
    j[3] = [0.0, -0.01, 0.11];
    j[6] = [0.0, -0.01, 0.24];
    j[9] = [0.0, 0.0, 0.30];
    j[12] = [0.0, 0.0, 0.50];
    j[15] = [0.0, 0.03, 0.62];
    for (side, sx) in [(0usize, 1.0f64), (1, -1.0)] {
        let hip = [0.09 * sx, 0.0, -0.08];
        let a = p.hip_swing[side];
        let b = a - p.knee_flex[side];
        let knee = [hip[0], hip[1] + THIGH * a.sin(), hip[2] - THIGH * a.cos()];
        let ankle = [knee[0], knee[1] + SHIN * b.sin(), knee[2] - SHIN * b.cos()];
        let foot = [ankle[0], ankle[1] + 0.12, ankle[2] - 0.05];

        let collar = [0.07 * sx, 0.0, 0.42];
        let shoulder = [0.18 * sx, 0.0, 0.42];
        let (c, s) = (20f64.to_radians().cos(), 20f64.to_radians().sin());
        let wrist = [
            sx * p.arm_offset * c,
            p.arm_offset * s + p.arm_swing[side],
            0.15,
        ];
        let elbow = [
            0.5 * (shoulder[0] + wrist[0]) + 0.04 * sx,
            0.5 * (shoulder[1] + wrist[1]),
            0.5 * (shoulder[2] + wrist[2]),
        ];
        j[1 + side] = hip;
        j[4 + side] = knee;
        j[7 + side] = ankle;
        j[10 + side] = foot;
        j[13 + side] = collar;
        j[16 + side] = shoulder;
        j[18 + side] = elbow;
        j[20 + side] = wrist;
    }
    j
}

fn place(p: &Pose, jitter: Option<(&mut ChaCha8Rng, &Normal<f64>)>) -> Frame {
    let (c, s) = (p.yaw.cos(), p.yaw.sin());
    let mut body = body_joints(p);
    if let Some((rng, dist)) = jitter {
        // pelvis and hips stay rigid so the root and facing are exact
        for joint in body.iter_mut().skip(3) {
            for v in joint.iter_mut() {
                *v += dist.sample(rng);
            }
        }
    }
    Frame {
        joints: body
            .iter()
            .map(|b| {
                [
                    quantize(p.root[0] + c * b[0] - s * b[1]),
                    quantize(p.root[1] + s * b[0] + c * b[1]),
                    quantize(p.root[2] + b[2]),
                ]
            })
            .collect(),
    }
}

fn heading(dir: [f64; 2]) -> f64 {
    // body forward (+y) points along `dir` at yaw = heading
    dir[1].atan2(dir[0]) - PI / 2.0
}

fn jump_frames(params: &JumpParams, fps: f64, jitter: bool) -> Vec<Frame> {
    let steps = (params.air_time_s * fps).round().max(1.0) as u64;
    let tau = steps as f64 / fps;
    let flex = params.knee_flex_deg.to_radians();
    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
    let dist = Normal::new(0.0, JITTER_SD).expect("valid sd");
    let head = heading(params.travel_dir);
    (0..=steps)
        .map(|k| {
            let t = k as f64 / fps;
            // t (tau - t) from integers so frame k and frame steps-k agree exactly
            let arc = 0.5 * GRAVITY * (k * (steps - k)) as f64 / (fps * fps);
            let along = TRAVEL_SPEED * t;
            let phase = t / tau;
            let knee = flex * (0.3 + 0.7 * phase * phase);
            let pose = Pose {
                root: [
                    along * params.travel_dir[0],
                    along * params.travel_dir[1],
                    PELVIS_HEIGHT + arc,
                ],
                yaw: head + 2.0 * PI * params.rotations * phase,
                arm_offset: params.arm_offset_m,
                hip_swing: [knee / 2.0; 2],
                knee_flex: [knee; 2],
                arm_swing: [0.0; 2],
            };
            place(&pose, jitter.then_some((&mut rng, &dist)))
        })
        .collect()
}

/// World-tagged jump clip covering the airborne segment, takeoff to landing.
pub fn gen_motion(params: &JumpParams, fps: f64) -> Result<MotionClip> {
    params.validate()?;
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(Error::InvalidConfig("fps must be positive".into()));
    }
    Ok(MotionClip {
        clip_id: "jump".into(),
        fps,
        coord: CoordSystem::World,
        frames: jump_frames(params, fps, true),
    })
}

/// Same jump without the per-joint jitter.
pub fn gen_motion_clean(params: &JumpParams, fps: f64) -> Result<MotionClip> {
    let mut clip = gen_motion(params, fps)?;
    clip.frames = jump_frames(params, fps, false);
    Ok(clip)
}

/// Rule-based coaching text; a pure function of the parameters.
pub fn oracle_instruction(params: &JumpParams) -> String {
    let mut flaws = Vec::new();
    if params.rotations < ROTATION_THRESHOLD {
        flaws.push(FLAW_ROTATION);
    }
    if params.arm_offset_m > ARM_THRESHOLD_M {
        flaws.push(FLAW_ARMS);
    }
    if params.knee_flex_deg < KNEE_THRESHOLD_DEG {
        flaws.push(FLAW_KNEES);
    }
    if flaws.is_empty() {
        NO_FLAW.to_string()
    } else {
        flaws.join(SEPARATOR)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusKind {
    Pretrain,
    Finetune,
}

impl fmt::Display for CorpusKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CorpusKind::Pretrain => "pretrain",
            CorpusKind::Finetune => "finetune",
        })
    }
}

/// Generator for example `index`: one ChaCha stream per example, keyed by
/// the corpus seed and kind, so examples can be produced in any order.
pub fn example_rng(kind: CorpusKind, seed: u64, index: u64) -> ChaCha8Rng {
    let key = match kind {
        CorpusKind::Pretrain => seed,
        CorpusKind::Finetune => seed ^ 0x9e37_79b9_7f4a_7c15,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(index);
    rng
}

fn unit_dir(rng: &mut ChaCha8Rng) -> [f64; 2] {
    let a = rng.random_range(0.0..2.0 * PI);
    [a.cos(), a.sin()]
}

/// Samples finetune jump parameters: each flaw fires in roughly a third
/// to a half of draws.
pub fn sample_jump(rng: &mut ChaCha8Rng) -> JumpParams {
    JumpParams {
        rotations: rng.random_range(0.5..2.5),
        air_time_s: rng.random_range(0.45..0.75),
        arm_offset_m: rng.random_range(0.1..0.6),
        knee_flex_deg: rng.random_range(0.0..60.0),
        travel_dir: unit_dir(rng),
        rng_seed: rng.random(),
    }
}

fn offset(rng: &mut ChaCha8Rng) -> Joint {
    let mut o = [0.0; 3];
    for v in &mut o {
        *v = (rng.random_range(-OFFSET_RANGE_M..OFFSET_RANGE_M) * 1024.0).round() / 1024.0;
    }
    o
}

fn turns_phrase(half_turns: u32) -> String {
    match half_turns {
        0 => "a quarter turn".into(),
        1 => "half a turn".into(),
        2 => "once".into(),
        3 => "one and a half times".into(),
        4 => "twice".into(),
        5 => "two and a half times".into(),
        _ => "three times".into(),
    }
}

fn arms_phrase(arm_offset: f64) -> &'static str {
    if arm_offset > ARM_THRESHOLD_M {
        "with arms held out"
    } else {
        "with arms close to the body"
    }
}

fn ground_turn(rng: &mut ChaCha8Rng) -> (Vec<Frame>, String) {
    let rotations: f64 = rng.random_range(0.25..2.0);
    let arm: f64 = rng.random_range(0.1..0.6);
    let duration: f64 = rng.random_range(0.5..0.8);
    let steps = (duration * SYNTH_FPS).round() as u64;
    let head = heading(unit_dir(rng));
    let mut jr = ChaCha8Rng::seed_from_u64(rng.random());
    let dist = Normal::new(0.0, JITTER_SD).expect("valid sd");
    let bend = 15f64.to_radians();
    let frames = (0..=steps)
        .map(|k| {
            let phase = k as f64 / steps as f64;
            let pose = Pose {
                root: [0.0, 0.0, PELVIS_HEIGHT - 0.03],
                yaw: head + 2.0 * PI * rotations * phase,
                arm_offset: arm,
                hip_swing: [bend / 2.0; 2],
                knee_flex: [bend; 2],
                arm_swing: [0.0; 2],
            };
            place(&pose, Some((&mut jr, &dist)))
        })
        .collect();
    let text = format!(
        "a person turns in place {} {}",
        turns_phrase((rotations * 2.0).round() as u32),
        arms_phrase(arm)
    );
    (frames, text)
}

fn walk(rng: &mut ChaCha8Rng) -> (Vec<Frame>, String) {
    let fast = rng.random_bool(0.5);
    let speed: f64 = if fast {
        rng.random_range(1.6..2.2)
    } else {
        rng.random_range(0.6..1.1)
    };
    let cadence = 0.9 * speed.sqrt();
    let duration: f64 = rng.random_range(0.5..0.8);
    let steps = (duration * SYNTH_FPS).round() as u64;
    let dir = unit_dir(rng);
    let head = heading(dir);
    let arm: f64 = rng.random_range(0.1..0.3);
    let mut jr = ChaCha8Rng::seed_from_u64(rng.random());
    let dist = Normal::new(0.0, JITTER_SD).expect("valid sd");
    let frames = (0..=steps)
        .map(|k| {
            let t = k as f64 / SYNTH_FPS;
            let swing = 0.45 * (2.0 * PI * cadence * t).sin();
            let knee = |s: f64| 0.15 + 0.6 * (-s).max(0.0);
            let pose = Pose {
                root: [speed * t * dir[0], speed * t * dir[1], PELVIS_HEIGHT - 0.02],
                yaw: head,
                arm_offset: arm,
                hip_swing: [swing, -swing],
                knee_flex: [knee(swing), knee(-swing)],
                arm_swing: [-0.25 * swing, 0.25 * swing],
            };
            place(&pose, Some((&mut jr, &dist)))
        })
        .collect();
    let text = format!(
        "a person walks forward {}",
        if fast { "quickly" } else { "slowly" }
    );
    (frames, text)
}

fn pretrain_jump(rng: &mut ChaCha8Rng) -> (Vec<Frame>, String) {
    let mut p = sample_jump(rng);
    p.rotations = rng.random_range(0.25..3.0);
    p.knee_flex_deg = rng.random_range(0.0..70.0);
    let frames = jump_frames(&p, SYNTH_FPS, true);
    let landing = if p.knee_flex_deg < KNEE_THRESHOLD_DEG {
        "lands with straight legs"
    } else {
        "lands with bent knees"
    };
    let text = format!(
        "a person jumps and turns {} {} and {}",
        turns_phrase((p.rotations * 2.0).round() as u32),
        arms_phrase(p.arm_offset_m),
        landing
    );
    (frames, text)
}

fn shift(frames: &mut [Frame], o: Joint) {
    for f in frames {
        for j in &mut f.joints {
            for d in 0..3 {
                j[d] += o[d];
            }
        }
    }
}

/// One example: World-tagged clip at a random global offset.
pub fn gen_example(kind: CorpusKind, seed: u64, index: u64) -> PairedExample {
    let mut rng = example_rng(kind, seed, index);
    let (mut frames, text) = match kind {
        CorpusKind::Finetune => {
            let p = sample_jump(&mut rng);
            (jump_frames(&p, SYNTH_FPS, true), oracle_instruction(&p))
        }
        CorpusKind::Pretrain => match rng.random_range(0..3u8) {
            0 => walk(&mut rng),
            1 => ground_turn(&mut rng),
            _ => pretrain_jump(&mut rng),
        },
    };
    shift(&mut frames, offset(&mut rng));
    let id = format!("{kind}-{index:05}");
    PairedExample {
        example_id: id.clone(),
        clip: MotionClip {
            clip_id: id,
            fps: SYNTH_FPS,
            coord: CoordSystem::World,
            frames,
        },
        instruction: text,
        split: Split::Train,
    }
}

/// `n` examples with a seeded 90/10 train/test split.
pub fn gen_corpus(kind: CorpusKind, n: usize, seed: u64) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::InvalidConfig("corpus size must be at least 1".into()));
    }
    let mut examples: Vec<PairedExample> = (0..n as u64).map(|i| gen_example(kind, seed, i)).collect();
    assign_splits(&mut examples, seed);
    Ok(DatasetManifest {
        examples,
        seed,
        separator: SEPARATOR.to_string(),
    })
}

/// Source clips plus whole-clip annotations, the raw input shape expected by
/// dataset building.
pub fn as_annotated_videos(manifest: &DatasetManifest) -> (Vec<MotionClip>, Vec<AnnotationRecord>) {
    let clips = manifest.examples.iter().map(|e| e.clip.clone()).collect();
    let records = manifest
        .examples
        .iter()
        .map(|e| AnnotationRecord {
            video_id: e.clip.clip_id.clone(),
            start_s: 0.0,
            end_s: e.clip.duration_s(),
            instruction: e.instruction.clone(),
            annotator: Some("oracle".into()),
        })
        .collect();
    (clips, records)
}
