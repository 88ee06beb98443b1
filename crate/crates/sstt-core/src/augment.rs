//! Training-time stochastic transforms on skeleton coordinates: planar
//! rotation + shift, and same-label joint mixing. One draw per sample; all
//! frames and joints share the transform so temporal coherence survives.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::skeleton::SkeletonSequence;

fn default_rotate() -> (f32, f32) {
    (-15.0, 15.0)
}
fn default_shift() -> (f32, f32) {
    (-0.1, 0.1)
}
fn default_mix_prob() -> f32 {
    0.5
}
fn default_mix_fraction() -> f32 {
    0.25
}
fn default_enabled() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// rotation range in degrees
    #[serde(default = "default_rotate")]
    pub rotate_deg: (f32, f32),
    /// shift range in normalized units, drawn independently for x and y
    #[serde(default = "default_shift")]
    pub shift: (f32, f32),
    #[serde(default = "default_mix_prob")]
    pub joint_mix_prob: f32,
    #[serde(default = "default_mix_fraction")]
    pub joint_mix_fraction: f32,
    #[serde(default = "default_enabled")]
    pub enabled: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotate_deg: default_rotate(),
            shift: default_shift(),
            joint_mix_prob: default_mix_prob(),
            joint_mix_fraction: default_mix_fraction(),
            enabled: default_enabled(),
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig { enabled: false, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.rotate_deg.0 > self.rotate_deg.1 {
            return Err(format!("augment.rotate_deg: lo {} > hi {}", self.rotate_deg.0, self.rotate_deg.1));
        }
        if self.shift.0 > self.shift.1 {
            return Err(format!("augment.shift: lo {} > hi {}", self.shift.0, self.shift.1));
        }
        if !(0.0..=1.0).contains(&self.joint_mix_prob) {
            return Err(format!("augment.joint_mix_prob: {} not in [0, 1]", self.joint_mix_prob));
        }
        if !(0.0..=1.0).contains(&self.joint_mix_fraction) {
            return Err(format!("augment.joint_mix_fraction: {} not in [0, 1]", self.joint_mix_fraction));
        }
        Ok(())
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f32, f32)) -> f32 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// One (θ, Δx, Δy) triple per sample applied to every frame and joint:
/// x̃ = x·cosθ − y·sinθ + Δx, ỹ = x·sinθ + y·cosθ + Δy. Channels beyond
/// the first two pass through untouched.
pub fn random_rotate_shift(seq: &SkeletonSequence, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> SkeletonSequence {
    assert!(seq.dims[2] >= 2, "rotate_shift: needs at least x,y channels, got {}", seq.dims[2]);
    let theta = draw(rng, cfg.rotate_deg).to_radians();
    let dx = draw(rng, cfg.shift);
    let dy = draw(rng, cfg.shift);
    let (sin, cos) = theta.sin_cos();
    let mut out = seq.clone();
    let [t, v, _] = seq.dims;
    for fr in 0..t {
        for j in 0..v {
            let x = seq.get(fr, j, 0);
            let y = seq.get(fr, j, 1);
            *out.get_mut(fr, j, 0) = x * cos - y * sin + dx;
            *out.get_mut(fr, j, 1) = x * sin + y * cos + dy;
        }
    }
    out
}

/// With probability `joint_mix_prob`, replace the full trajectories of a
/// uniformly chosen subset of ⌊fraction·V⌋ joints in `a` with `b`'s. The
/// partner must share label and shape; the output keeps `a`'s label.
pub fn joint_mixing(
    a: &SkeletonSequence,
    b: &SkeletonSequence,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> SkeletonSequence {
    assert_eq!(a.label, b.label, "joint_mixing: label mismatch {} vs {}", a.label, b.label);
    assert_eq!(a.dims, b.dims, "joint_mixing: shape mismatch {:?} vs {:?}", a.dims, b.dims);
    if cfg.joint_mix_prob <= 0.0 || rng.gen::<f32>() >= cfg.joint_mix_prob {
        return a.clone();
    }
    let [t, v, c] = a.dims;
    let n_swap = (cfg.joint_mix_fraction * v as f32).floor() as usize;
    let mut joints: Vec<usize> = (0..v).collect();
    // partial Fisher-Yates: first n_swap entries are the swapped subset
    for i in 0..n_swap.min(v) {
        let j = rng.gen_range(i..v);
        joints.swap(i, j);
    }
    let mut out = a.clone();
    for &joint in &joints[..n_swap.min(v)] {
        for fr in 0..t {
            for ch in 0..c {
                *out.get_mut(fr, joint, ch) = b.get(fr, joint, ch);
            }
        }
    }
    out
}

/// Joint mixing first (structural), then rotation + shift (geometric).
/// Disabled config is a bitwise identity.
pub fn augment_pipeline(
    seq: &SkeletonSequence,
    same_class_pool: &[&SkeletonSequence],
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> SkeletonSequence {
    if !cfg.enabled {
        return seq.clone();
    }
    let mixed = if cfg.joint_mix_prob > 0.0 {
        assert!(!same_class_pool.is_empty(), "augment_pipeline: empty same-class pool with joint_mix_prob > 0");
        let partner = same_class_pool[rng.gen_range(0..same_class_pool.len())];
        joint_mixing(seq, partner, cfg, rng)
    } else {
        seq.clone()
    };
    random_rotate_shift(&mixed, cfg, rng)
}
