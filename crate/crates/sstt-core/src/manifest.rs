//! Dataset manifests, the WLASL split adapter, and user-independent split
//! generation.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use crate::error::Error;
use crate::rng::derive_rng;
use crate::skeleton::SkeletonSequence;
use rand::seq::SliceRandom;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: String,
    pub path: String,
    pub label: String,
    pub signer: String,
    pub frames: usize,
}

/// On-disk `manifest.json` schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestFile {
    pub joint_count: usize,
    pub channels: usize,
    pub labels: Vec<String>,
    pub samples: Vec<SampleMeta>,
}

#[derive(Debug, Clone)]
pub struct SampleEntry {
    pub sample_id: String,
    /// keypoint file, relative paths resolved against the manifest directory
    pub path: PathBuf,
    pub label: usize,
    pub signer_id: String,
    pub frame_count: usize,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub joint_count: usize,
    pub channels: usize,
    pub label_vocab: Vec<String>,
    pub samples: Vec<SampleEntry>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.label_vocab.len()
    }

    pub fn sample(&self, id: &str) -> Option<&SampleEntry> {
        self.samples.iter().find(|s| s.sample_id == id)
    }

    pub fn load_sequence(&self, entry: &SampleEntry) -> Result<SkeletonSequence, Error> {
        let seq = SkeletonSequence::read_keypoints(
            &entry.path,
            entry.sample_id.clone(),
            entry.signer_id.clone(),
            entry.label,
        )?;
        if seq.dims[1] != self.joint_count || seq.dims[2] != self.channels {
            return Err(Error::Manifest(format!(
                "sample {}: keypoints are {}x{} joints/channels, manifest declares {}x{}",
                entry.sample_id, seq.dims[1], seq.dims[2], self.joint_count, self.channels
            )));
        }
        Ok(seq)
    }

    pub fn to_file(&self, manifest_dir: &Path) -> ManifestFile {
        ManifestFile {
            joint_count: self.joint_count,
            channels: self.channels,
            labels: self.label_vocab.clone(),
            samples: self
                .samples
                .iter()
                .map(|s| SampleMeta {
                    id: s.sample_id.clone(),
                    path: s
                        .path
                        .strip_prefix(manifest_dir)
                        .unwrap_or(&s.path)
                        .to_string_lossy()
                        .into_owned(),
                    label: self.label_vocab[s.label].clone(),
                    signer: s.signer_id.clone(),
                    frames: s.frame_count,
                })
                .collect(),
        }
    }
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), Error> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let file = manifest.to_file(dir);
    std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    let file: ManifestFile =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: parse error: {e}", path.display())))?;
    let dir = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let vocab_index: HashMap<&str, usize> =
        file.labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    if vocab_index.len() != file.labels.len() {
        return Err(Error::Manifest("duplicate label in vocabulary".into()));
    }
    let mut seen_ids = HashSet::new();
    let mut samples = Vec::with_capacity(file.samples.len());
    for s in &file.samples {
        if !seen_ids.insert(s.id.clone()) {
            return Err(Error::Manifest(format!("duplicate sample id {}", s.id)));
        }
        let label = *vocab_index
            .get(s.label.as_str())
            .ok_or_else(|| Error::Manifest(format!("sample {}: unknown label {:?}", s.id, s.label)))?;
        let full = dir.join(&s.path);
        if !full.exists() {
            return Err(Error::Manifest(format!("sample {}: missing keypoint file {}", s.id, full.display())));
        }
        samples.push(SampleEntry {
            sample_id: s.id.clone(),
            path: full,
            label,
            signer_id: s.signer.clone(),
            frame_count: s.frames,
        });
    }
    Ok(DatasetManifest { joint_count: file.joint_count, channels: file.channels, label_vocab: file.labels, samples })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SplitAssignment {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitAssignment {
    pub fn part(&self, name: &str) -> Option<&[String]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Split(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Split(format!("{}: parse error: {e}", path.display())))
    }

    /// Signer sets must be pairwise disjoint and every sample assigned once.
    pub fn validate(&self, manifest: &DatasetManifest) -> Result<(), Error> {
        let signer_of: HashMap<&str, &str> =
            manifest.samples.iter().map(|s| (s.sample_id.as_str(), s.signer_id.as_str())).collect();
        let mut seen = HashSet::new();
        let mut signers: [HashSet<&str>; 3] = Default::default();
        for (k, ids) in [&self.train, &self.val, &self.test].iter().enumerate() {
            for id in ids.iter() {
                if !seen.insert(id.as_str()) {
                    return Err(Error::Split(format!("sample {id} assigned more than once")));
                }
                let signer = signer_of
                    .get(id.as_str())
                    .ok_or_else(|| Error::Split(format!("sample {id} not in manifest")))?;
                signers[k].insert(signer);
            }
        }
        if seen.len() != manifest.samples.len() {
            return Err(Error::Split(format!(
                "{} of {} samples assigned",
                seen.len(),
                manifest.samples.len()
            )));
        }
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            if !signers[a].is_disjoint(&signers[b]) {
                return Err(Error::Split("signer appears in more than one split part".into()));
            }
        }
        Ok(())
    }
}

/// Signer-level user-independent split. Signers are shuffled by seed and
/// assigned to train/val/test so sample proportions approximate `ratios`;
/// every class must land in both train and test.
pub fn make_split(
    manifest: &DatasetManifest,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitAssignment, Error> {
    let mut by_signer: BTreeMap<&str, Vec<&SampleEntry>> = BTreeMap::new();
    for s in &manifest.samples {
        by_signer.entry(s.signer_id.as_str()).or_default().push(s);
    }
    if by_signer.len() < 3 {
        return Err(Error::Split(format!(
            "need at least 3 distinct signers for a user-independent split, got {}",
            by_signer.len()
        )));
    }
    let mut signers: Vec<&str> = by_signer.keys().copied().collect();
    signers.shuffle(&mut derive_rng(seed, "split", &[]));
    let total = manifest.samples.len() as f64;
    let mut split = SplitAssignment { seed, train: vec![], val: vec![], test: vec![] };
    let mut cum = 0.0f64;
    for signer in signers {
        let frac = cum / total;
        let bucket = if frac < ratios.0 {
            &mut split.train
        } else if frac < ratios.0 + ratios.1 {
            &mut split.val
        } else {
            &mut split.test
        };
        for s in &by_signer[signer] {
            bucket.push(s.sample_id.clone());
        }
        cum += by_signer[signer].len() as f64;
    }
    // every class needs at least one sample in train and in test
    let label_of: HashMap<&str, usize> =
        manifest.samples.iter().map(|s| (s.sample_id.as_str(), s.label)).collect();
    for (part_name, ids) in [("train", &split.train), ("test", &split.test)] {
        let covered: HashSet<usize> = ids.iter().map(|id| label_of[id.as_str()]).collect();
        for (li, name) in manifest.label_vocab.iter().enumerate() {
            if !covered.contains(&li) {
                return Err(Error::Split(format!("class {name:?} has no sample in the {part_name} part")));
            }
        }
    }
    Ok(split)
}

// --- WLASL official-split adapter ---

#[derive(Debug, Deserialize)]
struct WlaslInstance {
    video_id: String,
    split: String,
    #[serde(default)]
    signer_id: Option<i64>,
}

#[derive(Debug, Deserialize)]
struct WlaslGloss {
    gloss: String,
    instances: Vec<WlaslInstance>,
}

#[derive(Debug)]
pub struct WlaslLoad {
    pub manifest: DatasetManifest,
    pub split: SplitAssignment,
    /// video ids whose keypoint file was absent (skipped)
    pub missing: Vec<String>,
}

/// Load a WLASL-style split JSON restricted to the top-`subset` glosses by
/// sample count. Split assignments are copied verbatim, never regenerated.
/// Keypoint files are looked up as `<keypoint_dir>/<video_id>.skel`.
pub fn load_wlasl_split(json_path: &Path, keypoint_dir: &Path, subset: usize) -> Result<WlaslLoad, Error> {
    let text = std::fs::read_to_string(json_path)
        .map_err(|e| Error::Manifest(format!("{}: {e}", json_path.display())))?;
    let glosses: Vec<WlaslGloss> = serde_json::from_str(&text)
        .map_err(|e| Error::Manifest(format!("{}: parse error: {e}", json_path.display())))?;
    let mut ranked: Vec<(usize, usize)> = glosses.iter().enumerate().map(|(i, g)| (i, g.instances.len())).collect();
    // descending count, stable on the file's gloss order
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let chosen: Vec<usize> = ranked.into_iter().take(subset).map(|(i, _)| i).collect();

    let mut label_vocab = Vec::with_capacity(chosen.len());
    let mut samples = Vec::new();
    let mut split = SplitAssignment { seed: 0, train: vec![], val: vec![], test: vec![] };
    let mut missing = Vec::new();
    let mut probe_dims: Option<(usize, usize)> = None;
    for (label, &gi) in chosen.iter().enumerate() {
        let gloss = &glosses[gi];
        label_vocab.push(gloss.gloss.clone());
        for inst in &gloss.instances {
            let path = keypoint_dir.join(format!("{}.skel", inst.video_id));
            if !path.exists() {
                missing.push(inst.video_id.clone());
                continue;
            }
            let (records, _) = crate::tensor::serialize::read_tensors_from_path(&path)?;
            let rec = records
                .iter()
                .find(|r| r.name == "frames")
                .ok_or_else(|| Error::Manifest(format!("{}: no 'frames' tensor", path.display())))?;
            if rec.shape.len() != 3 {
                return Err(Error::Manifest(format!("{}: frames rank {} != 3", path.display(), rec.shape.len())));
            }
            let dims = (rec.shape[1], rec.shape[2]);
            match probe_dims {
                None => probe_dims = Some(dims),
                Some(d) if d != dims => {
                    return Err(Error::Manifest(format!(
                        "{}: joint/channel shape {:?} differs from {:?}",
                        path.display(),
                        dims,
                        d
                    )))
                }
                _ => {}
            }
            let signer = inst.signer_id.map(|s| format!("signer_{s}")).unwrap_or_else(|| "unknown".into());
            samples.push(SampleEntry {
                sample_id: inst.video_id.clone(),
                path,
                label,
                signer_id: signer,
                frame_count: rec.shape[0],
            });
            match inst.split.as_str() {
                "train" => split.train.push(inst.video_id.clone()),
                "val" => split.val.push(inst.video_id.clone()),
                "test" => split.test.push(inst.video_id.clone()),
                other => {
                    return Err(Error::Manifest(format!(
                        "instance {}: unknown split {other:?}",
                        inst.video_id
                    )))
                }
            }
        }
    }
    let (joint_count, channels) = probe_dims
        .ok_or_else(|| Error::Manifest("no usable instances (all keypoint files missing?)".into()))?;
    Ok(WlaslLoad {
        manifest: DatasetManifest { joint_count, channels, label_vocab, samples },
        split,
        missing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::SkeletonSequence;
    use tempfile::TempDir;

    fn write_sample(dir: &Path, name: &str, t: usize, v: usize, c: usize) {
        let seq = SkeletonSequence::new(name.into(), "x".into(), 0, [t, v, c], vec![0.25; t * v * c]);
        seq.write_keypoints(&dir.join(format!("{name}.skel"))).unwrap();
    }

    fn toy_manifest(dir: &Path, signers: usize, per_signer: usize) -> DatasetManifest {
        let mut samples = Vec::new();
        let labels = vec!["a".to_string(), "b".to_string()];
        for s in 0..signers {
            for i in 0..per_signer {
                let id = format!("s{s}_i{i}");
                write_sample(dir, &id, 4, 3, 2);
                samples.push(SampleEntry {
                    sample_id: id.clone(),
                    path: dir.join(format!("{id}.skel")),
                    label: i % 2,
                    signer_id: format!("signer{s}"),
                    frame_count: 4,
                });
            }
        }
        DatasetManifest { joint_count: 3, channels: 2, label_vocab: labels, samples }
    }

    #[test]
    fn manifest_roundtrip() {
        let tmp = TempDir::new().unwrap();
        let m = toy_manifest(tmp.path(), 3, 2);
        let path = tmp.path().join("manifest.json");
        save_manifest(&m, &path).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back.samples.len(), 6);
        assert_eq!(back.label_vocab, m.label_vocab);
        // loading is read-only and repeatable
        let again = load_manifest(&path).unwrap();
        assert_eq!(again.samples.len(), back.samples.len());
    }

    #[test]
    fn manifest_missing_file_names_path() {
        let tmp = TempDir::new().unwrap();
        let m = toy_manifest(tmp.path(), 3, 2);
        let path = tmp.path().join("manifest.json");
        save_manifest(&m, &path).unwrap();
        std::fs::remove_file(tmp.path().join("s0_i0.skel")).unwrap();
        let err = load_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("s0_i0.skel"), "{err}");
    }

    #[test]
    fn manifest_unknown_label_and_duplicate_id() {
        let tmp = TempDir::new().unwrap();
        write_sample(tmp.path(), "s", 2, 3, 2);
        let bad = serde_json::json!({
            "joint_count": 3, "channels": 2, "labels": ["a"],
            "samples": [{"id": "s", "path": "s.skel", "label": "zzz", "signer": "u", "frames": 2}]
        });
        let p = tmp.path().join("manifest.json");
        std::fs::write(&p, bad.to_string()).unwrap();
        assert!(load_manifest(&p).unwrap_err().to_string().contains("unknown label"));
        let dup = serde_json::json!({
            "joint_count": 3, "channels": 2, "labels": ["a"],
            "samples": [
                {"id": "s", "path": "s.skel", "label": "a", "signer": "u", "frames": 2},
                {"id": "s", "path": "s.skel", "label": "a", "signer": "u", "frames": 2}
            ]
        });
        std::fs::write(&p, dup.to_string()).unwrap();
        assert!(load_manifest(&p).unwrap_err().to_string().contains("duplicate sample id"));
    }

    #[test]
    fn split_uniform_ten_signers_is_6_2_2() {
        let tmp = TempDir::new().unwrap();
        let m = toy_manifest(tmp.path(), 10, 4);
        let split = make_split(&m, (0.6, 0.2, 0.2), 42).unwrap();
        split.validate(&m).unwrap();
        assert_eq!(split.train.len(), 24);
        assert_eq!(split.val.len(), 8);
        assert_eq!(split.test.len(), 8);
        // determinism
        assert_eq!(make_split(&m, (0.6, 0.2, 0.2), 42).unwrap(), split);
        assert_ne!(make_split(&m, (0.6, 0.2, 0.2), 43).unwrap(), split);
    }

    #[test]
    fn split_rejects_too_few_signers() {
        let tmp = TempDir::new().unwrap();
        let m = toy_manifest(tmp.path(), 2, 4);
        assert!(make_split(&m, (0.6, 0.2, 0.2), 1).is_err());
    }

    #[test]
    fn split_skewed_counts_within_one_signer_share() {
        let tmp = TempDir::new().unwrap();
        // 20 signers with sample counts 1..=20
        let mut samples = Vec::new();
        for s in 0..20usize {
            for i in 0..=s {
                let id = format!("s{s}_i{i}");
                write_sample(tmp.path(), &id, 2, 3, 2);
                samples.push(SampleEntry {
                    sample_id: id.clone(),
                    path: tmp.path().join(format!("{id}.skel")),
                    label: i % 2,
                    signer_id: format!("signer{s:02}"),
                    frame_count: 2,
                });
            }
        }
        let m = DatasetManifest { joint_count: 3, channels: 2, label_vocab: vec!["a".into(), "b".into()], samples };
        let split = make_split(&m, (0.6, 0.2, 0.2), 7).unwrap();
        split.validate(&m).unwrap();
        let total = m.samples.len() as f64;
        let max_share = 20.0 / total;
        for (ids, target) in [(&split.train, 0.6), (&split.val, 0.2), (&split.test, 0.2)] {
            let frac = ids.len() as f64 / total;
            assert!((frac - target).abs() <= max_share + 1e-9, "{frac} vs {target}");
        }
    }

    #[test]
    fn wlasl_split_copied_verbatim() {
        let tmp = TempDir::new().unwrap();
        let kp = tmp.path().join("kp");
        std::fs::create_dir(&kp).unwrap();
        for vid in ["v1", "v2", "v3", "v4", "v5", "v6"] {
            write_sample(&kp, vid, 3, 4, 2);
        }
        let json = serde_json::json!([
            {"gloss": "book", "instances": [
                {"video_id": "v1", "split": "train", "signer_id": 1},
                {"video_id": "v2", "split": "val", "signer_id": 2},
                {"video_id": "v3", "split": "test", "signer_id": 3},
                {"video_id": "v7", "split": "train", "signer_id": 4}
            ]},
            {"gloss": "drink", "instances": [
                {"video_id": "v4", "split": "train", "fps": 25},
                {"video_id": "v5", "split": "train"},
                {"video_id": "v6", "split": "test"}
            ]}
        ]);
        let jp = tmp.path().join("split.json");
        std::fs::write(&jp, json.to_string()).unwrap();
        let load = load_wlasl_split(&jp, &kp, 100).unwrap();
        assert_eq!(load.manifest.samples.len(), 6);
        assert_eq!(load.missing, vec!["v7".to_string()]);
        assert_eq!(load.split.train, vec!["v1", "v4", "v5"]);
        assert_eq!(load.split.val, vec!["v2"]);
        assert_eq!(load.split.test, vec!["v3", "v6"]);
        // test instances never leak into train
        assert!(!load.split.train.contains(&"v3".to_string()));
        // subset=1 keeps the gloss with more instances
        let top1 = load_wlasl_split(&jp, &kp, 1).unwrap();
        assert_eq!(top1.manifest.label_vocab, vec!["book".to_string()]);
    }
}
