//! Procedural gait generator for COCO-17 keypoint sequences.
//!
//! A subject is a small set of kinematic parameters: stride frequency, limb
//! proportions, swing amplitudes and per-joint wobble. Sequences are rendered
//! in a sagittal body frame (x forward, y down, pixels), then the x axis is
//! scaled by the view angle. Carrying a bag damps the arm swing; heavy
//! clothing damps every amplitude and lowers detector confidence.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Condition, Keypoint, PoseFrame, PoseSequence, VIEW_ANGLES};
use crate::graph::COCO_NUM_JOINTS;
use crate::rng;

/// Per-subject generator parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectParams {
    /// Gait cycles per frame.
    pub stride_frequency: f64,
    /// Per-joint wobble amplitude, as a fraction of body height.
    pub limb_amplitudes: [f64; COCO_NUM_JOINTS],
    /// Per-joint wobble phase, radians.
    pub phase_offsets: [f64; COCO_NUM_JOINTS],
    /// Body height in pixels at unit camera distance.
    pub torso_scale: f64,
    /// Mean joint confidence under normal walking.
    pub base_confidence: f64,
    /// Thigh, shin, upper arm and forearm lengths relative to height.
    pub segment_lengths: [f64; 4],
    /// Peak hip, knee, shoulder and elbow swing, radians.
    pub swing: [f64; 4],
    /// Forward lean of the trunk, radians.
    pub lean: f64,
}

/// Frozen generator constants. Changing any value changes every synthetic
/// dataset, so presets are versioned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthPreset {
    pub version: u32,
    pub frequency_range: (f64, f64),
    pub height_range: (f64, f64),
    pub confidence_range: (f64, f64),
    pub wobble_max: f64,
    /// Arm swing factor under BG.
    pub bag_arm_damping: f64,
    /// Amplitude factor under CL.
    pub clothing_damping: f64,
    /// Confidence drop under CL.
    pub clothing_confidence_drop: f64,
    /// Per-frame probability of an occlusion dip, for NM/BG and CL.
    pub occlusion_rate: (f64, f64),
    pub occlusion_depth: f64,
    pub confidence_noise: f64,
    /// Keypoint noise, fraction of body height.
    pub position_noise: f64,
}

impl SynthPreset {
    pub fn v1() -> Self {
        Self {
            version: 1,
            frequency_range: (1.0 / 30.0, 1.0 / 18.0),
            height_range: (120.0, 180.0),
            confidence_range: (0.82, 0.95),
            wobble_max: 0.035,
            bag_arm_damping: 0.9,
            clothing_damping: 0.9,
            clothing_confidence_drop: 0.2,
            occlusion_rate: (0.01, 0.15),
            occlusion_depth: 0.35,
            confidence_noise: 0.04,
            position_noise: 0.004,
        }
    }
}

impl Default for SynthPreset {
    fn default() -> Self {
        Self::v1()
    }
}

fn uniform(r: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    r.random_range(lo..hi)
}

/// Deterministic draw of one subject.
pub fn generate_subject(seed: u64) -> SubjectParams {
    generate_subject_with(&SynthPreset::v1(), seed)
}

pub fn generate_subject_with(preset: &SynthPreset, seed: u64) -> SubjectParams {
    let mut r = rng::seeded(seed);
    SubjectParams {
        stride_frequency: uniform(&mut r, preset.frequency_range),
        limb_amplitudes: std::array::from_fn(|_| r.random_range(0.0..preset.wobble_max)),
        phase_offsets: std::array::from_fn(|_| r.random_range(0.0..TAU)),
        torso_scale: uniform(&mut r, preset.height_range),
        base_confidence: uniform(&mut r, preset.confidence_range),
        segment_lengths: [
            r.random_range(0.22..0.30),
            r.random_range(0.22..0.30),
            r.random_range(0.15..0.21),
            r.random_range(0.13..0.19),
        ],
        swing: [
            r.random_range(0.25..0.50),
            r.random_range(0.30..0.80),
            r.random_range(0.15..0.55),
            r.random_range(0.10..0.50),
        ],
        lean: r.random_range(-0.08..0.15),
    }
}

fn view_scale(angle: u32) -> f64 {
    0.4 + 0.6 * (f64::from(angle) * PI / 180.0).sin()
}

/// Body-frame joint positions (x forward, y down, unit height) at gait
/// phase `phi`.
fn pose(p: &SubjectParams, phi: f64, arm_factor: f64, amp_factor: f64) -> [(f64, f64); COCO_NUM_JOINTS] {
    let [thigh, shin, upper, fore] = p.segment_lengths;
    let [hip_sw, knee_sw, sh_sw, el_sw] = p.swing.map(|s| s * amp_factor);
    let bob = 0.015 * amp_factor * (2.0 * phi).cos();
    let hip = (0.0, bob);
    let trunk = 0.30;
    let neck = (hip.0 + trunk * p.lean.sin(), hip.1 - trunk * p.lean.cos());
    let head = (neck.0 + 0.03, neck.1 - 0.10);
    let mut j = [(0.0, 0.0); COCO_NUM_JOINTS];
    j[0] = head;
    j[1] = (head.0 + 0.01, head.1 - 0.02);
    j[2] = (head.0 - 0.01, head.1 - 0.02);
    j[3] = (head.0 - 0.03, head.1 - 0.01);
    j[4] = (head.0 - 0.05, head.1 - 0.01);
    let limb = |from: (f64, f64), len: f64, angle: f64| (from.0 + len * angle.sin(), from.1 + len * angle.cos());
    for (side, offset) in [(0usize, 0.0), (1usize, PI)] {
        let ph = phi + offset;
        let lateral = if side == 0 { 0.02 } else { -0.02 };
        let shoulder = (neck.0 + lateral, neck.1);
        let a = -sh_sw * arm_factor * ph.sin();
        let elbow = limb(shoulder, upper, a);
        let wrist = limb(elbow, fore, a + el_sw * arm_factor * (0.5 + 0.5 * (ph + 0.6).sin()));
        let hip_j = (hip.0 + lateral, hip.1);
        let h = hip_sw * ph.sin();
        let knee = limb(hip_j, thigh, h);
        let bend = knee_sw * (ph + 1.2).sin().max(0.0);
        let ankle = limb(knee, shin, h - bend);
        j[5 + side] = shoulder;
        j[7 + side] = elbow;
        j[9 + side] = wrist;
        j[11 + side] = hip_j;
        j[13 + side] = knee;
        j[15 + side] = ankle;
    }
    for (k, pos) in j.iter_mut().enumerate() {
        let w = p.limb_amplitudes[k] * amp_factor;
        pos.0 += w * (phi + p.phase_offsets[k]).sin();
        pos.1 += 0.5 * w * (phi + p.phase_offsets[k]).cos();
    }
    j
}

/// Renders one sequence. All per-sequence variation (start phase, cadence
/// jitter, camera placement, noise, occlusions) is drawn from `rng`.
pub fn generate_sequence(
    params: &SubjectParams,
    num_frames: usize,
    condition: Condition,
    angle: u32,
    rng: &mut impl Rng,
) -> PoseSequence {
    generate_sequence_with(&SynthPreset::v1(), params, num_frames, condition, angle, rng)
}

pub fn generate_sequence_with(
    preset: &SynthPreset,
    params: &SubjectParams,
    num_frames: usize,
    condition: Condition,
    angle: u32,
    rng: &mut impl Rng,
) -> PoseSequence {
    let (arm_factor, amp_factor, conf_drop, occlusion) = match condition {
        Condition::NM => (1.0, 1.0, 0.0, preset.occlusion_rate.0),
        Condition::BG => (preset.bag_arm_damping, 1.0, 0.0, preset.occlusion_rate.0),
        Condition::CL => (
            1.0,
            preset.clothing_damping,
            preset.clothing_confidence_drop,
            preset.occlusion_rate.1,
        ),
    };
    let phase0 = rng.random_range(0.0..TAU);
    let freq = params.stride_frequency * rng.random_range(0.97..1.03);
    let height = params.torso_scale * rng.random_range(0.9..1.1);
    let origin = (rng.random_range(200.0..440.0), rng.random_range(200.0..280.0));
    let sx = view_scale(angle) * height;
    let noise = Normal::new(0.0, preset.position_noise * height).expect("finite sigma");
    let conf_noise = Normal::new(0.0, preset.confidence_noise).expect("finite sigma");
    let frames = (0..num_frames)
        .map(|t| {
            let phi = phase0 + TAU * freq * t as f64;
            let body = pose(params, phi, arm_factor, amp_factor);
            let dip = if rng.random_bool(occlusion) { preset.occlusion_depth } else { 0.0 };
            PoseFrame::new(std::array::from_fn(|k| {
                let (bx, by) = body[k];
                let c = params.base_confidence - conf_drop - dip + conf_noise.sample(rng);
                Keypoint::new(
                    origin.0 + sx * bx + noise.sample(rng),
                    origin.1 + height * by + noise.sample(rng),
                    c.clamp(0.0, 1.0),
                )
            }))
        })
        .collect();
    PoseSequence {
        frames,
        subject_id: String::new(),
        condition,
        sequence_index: 1,
        view_angle: angle,
    }
}

/// Number of NM, BG and CL sequences for `m` sequences per subject:
/// 60 % NM (at least one), the rest split between BG and CL.
pub fn condition_counts(m: usize) -> (usize, usize, usize) {
    if m == 0 {
        return (0, 0, 0);
    }
    let nm = ((m as f64 * 0.6).round() as usize).clamp(1, m);
    let bg = (m - nm).div_ceil(2);
    (nm, bg, m - nm - bg)
}

/// A full corpus: subjects `001`, `002`, ..., each with
/// [`condition_counts`] sequences at uniformly drawn view angles.
pub fn generate_dataset(subjects: usize, seqs_per_subject: usize, num_frames: usize, seed: u64) -> Vec<PoseSequence> {
    let preset = SynthPreset::v1();
    let (nm, bg, cl) = condition_counts(seqs_per_subject);
    let mut out = Vec::with_capacity(subjects * seqs_per_subject);
    for s in 0..subjects {
        let params = generate_subject_with(&preset, rng::derive_seed(seed, &[s as u64]));
        let plan = [(Condition::NM, nm), (Condition::BG, bg), (Condition::CL, cl)];
        for (ci, (condition, count)) in plan.into_iter().enumerate() {
            for idx in 1..=count {
                let mut r = rng::derived(seed, &[s as u64, ci as u64, idx as u64]);
                let angle = VIEW_ANGLES[r.random_range(0..VIEW_ANGLES.len())];
                let mut seq = generate_sequence_with(&preset, &params, num_frames, condition, angle, &mut r);
                seq.subject_id = format!("{:03}", s + 1);
                seq.sequence_index = idx as u32;
                out.push(seq);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data;

    #[test]
    fn single_frame_sequence() {
        let p = generate_subject(1);
        let s = generate_sequence(&p, 1, Condition::NM, 90, &mut rng::seeded(0));
        assert_eq!(s.len(), 1);
        assert!(s.frames[0]
            .keypoints
            .iter()
            .all(|k| k.x.is_finite() && k.y.is_finite() && (0.0..=1.0).contains(&k.confidence)));
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate_subject(5), generate_subject(5));
        assert_ne!(generate_subject(5), generate_subject(6));
        let p = generate_subject(5);
        let a = generate_sequence(&p, 30, Condition::BG, 36, &mut rng::seeded(2));
        let b = generate_sequence(&p, 30, Condition::BG, 36, &mut rng::seeded(2));
        assert_eq!(a, b);
        assert_eq!(generate_dataset(3, 4, 10, 9), generate_dataset(3, 4, 10, 9));
    }

    #[test]
    fn dataset_layout() {
        assert_eq!(condition_counts(10), (6, 2, 2));
        assert_eq!(condition_counts(1), (1, 0, 0));
        assert_eq!(condition_counts(3), (2, 1, 0));
        let d = generate_dataset(2, 10, 5, 0);
        assert_eq!(d.len(), 20);
        let labels: Vec<String> = d.iter().take(10).map(|s| s.label()).collect();
        assert!(labels[0].starts_with("001/NM-01/"), "{}", labels[0]);
        assert_eq!(d.iter().filter(|s| s.condition == Condition::CL).count(), 4);
    }

    #[test]
    fn clothing_lowers_confidence() {
        let mut removed = [0usize; 2];
        for seed in 0..20 {
            let p = generate_subject(seed);
            for (i, c) in [Condition::NM, Condition::CL].into_iter().enumerate() {
                let s = generate_sequence(&p, 100, c, 90, &mut rng::derived(seed, &[i as u64]));
                removed[i] += s.frames.iter().filter(|f| data::mean_confidence(f) < 0.6).count();
            }
        }
        assert!(removed[1] > removed[0], "{removed:?}");
    }
}
