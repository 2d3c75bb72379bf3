//! Training-time augmentations: time reversal, horizontal mirroring about the
//! skeleton's centre of gravity, and Gaussian joint jitter.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Keypoint, PoseFrame, PoseSequence};

/// Left/right COCO joint pairs: eyes, ears, shoulders, elbows, wrists, hips,
/// knees, ankles.
pub const LEFT_RIGHT_PAIRS: [(usize, usize); 8] = [
    (1, 2),
    (3, 4),
    (5, 6),
    (7, 8),
    (9, 10),
    (11, 12),
    (13, 14),
    (15, 16),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enable_reverse: bool,
    pub enable_mirror: bool,
    /// Standard deviation of the joint noise, in normalised coordinates.
    pub noise_sigma: f64,
    pub swap_lr_on_mirror: bool,
    /// Probability of applying each of reverse and mirror.
    pub apply_probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enable_reverse: true,
            enable_mirror: true,
            noise_sigma: 0.01,
            swap_lr_on_mirror: true,
            apply_probability: 0.5,
        }
    }
}

impl AugmentConfig {
    /// No augmentation at all.
    pub fn disabled() -> Self {
        Self {
            enable_reverse: false,
            enable_mirror: false,
            noise_sigma: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(crate::Error::Config(format!(
                "noise_sigma must be finite and >= 0, got {}",
                self.noise_sigma
            )));
        }
        if !(0.0..=1.0).contains(&self.apply_probability) {
            return Err(crate::Error::Config(format!(
                "apply_probability must be in [0, 1], got {}",
                self.apply_probability
            )));
        }
        Ok(())
    }
}

pub fn reverse_time(seq: &PoseSequence) -> PoseSequence {
    let mut out = seq.clone();
    out.frames.reverse();
    out
}

fn swap_sides(frame: &mut PoseFrame) {
    for (l, r) in LEFT_RIGHT_PAIRS {
        frame.keypoints.swap(l, r);
    }
}

/// Reflects every x about the sequence-wide mean x. With `swap_lr`, left and
/// right joint labels are exchanged as well.
pub fn mirror(seq: &PoseSequence, swap_lr: bool) -> PoseSequence {
    if seq.is_empty() {
        return seq.clone();
    }
    let count = (seq.len() * seq.frames[0].keypoints.len()) as f64;
    let mean_x = seq
        .frames
        .iter()
        .flat_map(|f| f.keypoints.iter())
        .map(|k| k.x)
        .sum::<f64>()
        / count;
    let mut out = seq.map_keypoints(|k| Keypoint::new(2.0 * mean_x - k.x, k.y, k.confidence));
    if swap_lr {
        out.frames.iter_mut().for_each(swap_sides);
    }
    out
}

/// Adds independent `N(0, sigma²)` noise to every coordinate. `sigma = 0`
/// returns the input unchanged and draws nothing from `rng`.
pub fn jitter(seq: &PoseSequence, sigma: f64, rng: &mut impl Rng) -> PoseSequence {
    if sigma == 0.0 {
        return seq.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
    seq.map_keypoints(|k| {
        let dx = normal.sample(rng);
        let dy = normal.sample(rng);
        Keypoint::new(k.x + dx, k.y + dy, k.confidence)
    })
}

/// Which augmentations a pipeline call applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Applied {
    pub reversed: bool,
    pub mirrored: bool,
}

/// Reverse and mirror each with probability `apply_probability` (when
/// enabled), then jitter.
pub fn augment_pipeline(
    seq: &PoseSequence,
    config: &AugmentConfig,
    rng: &mut impl Rng,
) -> (PoseSequence, Applied) {
    let mut applied = Applied::default();
    let mut out = seq.clone();
    if config.enable_reverse && rng.random_bool(config.apply_probability) {
        out = reverse_time(&out);
        applied.reversed = true;
    }
    if config.enable_mirror && rng.random_bool(config.apply_probability) {
        out = mirror(&out, config.swap_lr_on_mirror);
        applied.mirrored = true;
    }
    (jitter(&out, config.noise_sigma, rng), applied)
}
