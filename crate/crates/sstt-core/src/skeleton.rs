//! Skeleton sequences: the `T' × V × C_in` coordinate arrays the model
//! consumes, plus normalization and temporal resampling.

use crate::error::Error;
use crate::tensor::serialize::{self, TensorRecord};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    pub sample_id: String,
    pub signer_id: String,
    pub label: usize,
    /// frames, joints, coordinate channels
    pub dims: [usize; 3],
    /// row-major T' × V × C_in
    pub frames: Vec<f32>,
}

impl SkeletonSequence {
    pub fn new(sample_id: String, signer_id: String, label: usize, dims: [usize; 3], frames: Vec<f32>) -> Self {
        let [t, v, c] = dims;
        assert!(t >= 1, "sequence {sample_id}: zero frames");
        assert_eq!(t * v * c, frames.len(), "sequence {sample_id}: dims {dims:?} vs {} values", frames.len());
        assert!(frames.iter().all(|x| x.is_finite()), "sequence {sample_id}: non-finite coordinate");
        SkeletonSequence { sample_id, signer_id, label, dims, frames }
    }

    #[inline]
    pub fn get(&self, t: usize, v: usize, c: usize) -> f32 {
        self.frames[(t * self.dims[1] + v) * self.dims[2] + c]
    }

    #[inline]
    pub fn get_mut(&mut self, t: usize, v: usize, c: usize) -> &mut f32 {
        &mut self.frames[(t * self.dims[1] + v) * self.dims[2] + c]
    }

    /// Canonical on-disk form: one tensor `frames` of shape [T', V, C_in].
    pub fn write_keypoints(&self, path: &Path) -> Result<(), Error> {
        let record = TensorRecord {
            name: "frames".into(),
            shape: self.dims.to_vec(),
            data: self.frames.clone(),
        };
        serialize::write_tensors_to_path(path, &[record], serde_json::Value::Null)
    }

    pub fn read_keypoints(
        path: &Path,
        sample_id: String,
        signer_id: String,
        label: usize,
    ) -> Result<Self, Error> {
        let (records, _) = serialize::read_tensors_from_path(path)?;
        let rec = records
            .into_iter()
            .find(|r| r.name == "frames")
            .ok_or_else(|| Error::Manifest(format!("{}: no 'frames' tensor", path.display())))?;
        if rec.shape.len() != 3 {
            return Err(Error::Manifest(format!("{}: frames rank {} != 3", path.display(), rec.shape.len())));
        }
        Ok(SkeletonSequence::new(sample_id, signer_id, label, [rec.shape[0], rec.shape[1], rec.shape[2]], rec.data))
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Uniform index resampling to `t_target` frames. Identity (bitwise) when
/// the length already matches; `t_target == 1` takes the middle frame.
pub fn resample_sequence(seq: &SkeletonSequence, t_target: usize) -> SkeletonSequence {
    assert!(t_target >= 1, "resample: t_target must be >= 1");
    let [t_in, v, c] = seq.dims;
    if t_in == t_target {
        return seq.clone();
    }
    let frame_len = v * c;
    let mut frames = Vec::with_capacity(t_target * frame_len);
    for i in 0..t_target {
        let src = if t_target == 1 {
            round_half_up((t_in - 1) as f64 / 2.0)
        } else {
            round_half_up(i as f64 * (t_in - 1) as f64 / (t_target - 1) as f64)
        };
        frames.extend_from_slice(&seq.frames[src * frame_len..(src + 1) * frame_len]);
    }
    SkeletonSequence::new(seq.sample_id.clone(), seq.signer_id.clone(), seq.label, [t_target, v, c], frames)
}

/// Center on the first frame's joint centroid, scale by the largest
/// per-frame bounding-box diagonal over the whole sequence (fallback 1).
pub fn normalize_sequence(seq: &SkeletonSequence) -> SkeletonSequence {
    let [t, v, c] = seq.dims;
    let mut centroid = vec![0.0f64; c];
    for j in 0..v {
        for ch in 0..c {
            centroid[ch] += seq.get(0, j, ch) as f64;
        }
    }
    for ch in &mut centroid {
        *ch /= v as f64;
    }
    let mut max_diag = 0.0f64;
    for fr in 0..t {
        let mut diag_sq = 0.0f64;
        for ch in 0..c {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for j in 0..v {
                let x = seq.get(fr, j, ch) as f64;
                lo = lo.min(x);
                hi = hi.max(x);
            }
            diag_sq += (hi - lo) * (hi - lo);
        }
        max_diag = max_diag.max(diag_sq.sqrt());
    }
    let scale = if max_diag > 1e-9 { max_diag } else { 1.0 };
    let mut out = seq.clone();
    for fr in 0..t {
        for j in 0..v {
            for ch in 0..c {
                *out.get_mut(fr, j, ch) = ((seq.get(fr, j, ch) as f64 - centroid[ch]) / scale) as f32;
            }
        }
    }
    out
}
