//! On-disk dataset, proposal and score formats.
//!
//! A dataset directory holds
//!
//! ```text
//! manifest.json       snippet geometry and one entry per video
//! annotations.json    ground-truth intervals per video
//! features/<id>.bin   snippet features, image stream then flow stream
//! SHA256SUMS          checksums of the files above
//! ```
//!
//! Feature files start with a 16-byte header (`SNIPFEAT`, u32 version,
//! u32 reserved), then u32 `T`, u32 `width`, then `T × width` little-endian
//! f32 values for the image stream followed by the same for the flow stream.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decode::Proposal;
use crate::dte::{ExpressionClass, GroundTruth};
use crate::error::{Error, Result};
use crate::preprocess::{concat_streams, plan_snippets, pool_snippets, SnippetPlan, VideoMeta};
use crate::synth::SynthVideo;
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 8] = b"SNIPFEAT";
pub const FEATURE_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path, what: &'static str) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        what,
        detail: format!("{}: {e}", path.display()),
    })
}

pub fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value).map_err(|e| Error::Format {
        what: "json",
        detail: e.to_string(),
    })?;
    v.push(b'\n');
    Ok(v)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_bytes(path, &json_bytes(value)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode_features(image: &Tensor, flow: &Tensor) -> Result<Vec<u8>> {
    if image.shape().len() != 2 || image.shape() != flow.shape() {
        return Err(Error::shape("encode_features", image.shape(), flow.shape()));
    }
    let (t, w) = (image.rows(), image.cols());
    let mut out = Vec::with_capacity(24 + 8 * t * w);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for v in image.to_f32().into_iter().chain(flow.to_f32()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Returns the image and flow streams, each `T × width`.
pub fn decode_features(bytes: &[u8]) -> Result<(Tensor, Tensor)> {
    let bad = |detail: String| Error::Format {
        what: "feature file",
        detail,
    };
    if bytes.len() < 24 || &bytes[..8] != FEATURE_MAGIC {
        return Err(bad("missing SNIPFEAT header".into()));
    }
    let version = u32_at(bytes, 8);
    if version != FEATURE_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let t = u32_at(bytes, 16) as usize;
    let w = u32_at(bytes, 20) as usize;
    let n = t * w;
    if bytes.len() != 24 + 8 * n {
        return Err(bad(format!("expected {} payload bytes for {t}×{w}, found {}", 8 * n, bytes.len() - 24)));
    }
    let values: Vec<f32> = bytes[24..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let image = Tensor::from_f32(vec![t, w], &values[..n])?;
    let flow = Tensor::from_f32(vec![t, w], &values[n..])?;
    Ok((image, flow))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub video_id: String,
    pub subject_id: String,
    pub fps: f64,
    pub frame_count: usize,
    /// Relative to the dataset directory.
    pub features: String,
}

impl ManifestEntry {
    pub fn meta(&self) -> VideoMeta {
        VideoMeta {
            video_id: self.video_id.clone(),
            subject_id: self.subject_id.clone(),
            fps: self.fps,
            frame_count: self.frame_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub snippet_len: usize,
    pub overlap: usize,
    /// Width of each stream.
    pub feature_dim: usize,
    pub videos: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationEntry {
    pub video_id: String,
    pub subject_id: String,
    pub fps: f64,
    pub frame_count: usize,
    pub ground_truths: Vec<GroundTruth>,
}

/// A dataset directory with its manifest and annotations loaded.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub annotations: BTreeMap<String, AnnotationEntry>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(&root.join("manifest.json"), "manifest")?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Format {
                what: "manifest",
                detail: format!("unsupported version {}", manifest.version),
            });
        }
        let annotations = read_annotations(&root.join("annotations.json"))?;
        for v in &manifest.videos {
            if !annotations.contains_key(&v.video_id) {
                return Err(Error::UnknownVideo(v.video_id.clone()));
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            annotations,
        })
    }

    pub fn metas(&self) -> Vec<VideoMeta> {
        self.manifest.videos.iter().map(ManifestEntry::meta).collect()
    }

    pub fn video_ids(&self) -> Vec<String> {
        self.manifest.videos.iter().map(|v| v.video_id.clone()).collect()
    }

    pub fn entry(&self, video_id: &str) -> Result<&ManifestEntry> {
        self.manifest
            .videos
            .iter()
            .find(|v| v.video_id == video_id)
            .ok_or_else(|| Error::UnknownVideo(video_id.to_string()))
    }

    pub fn ground_truths(&self, video_id: &str) -> Result<&[GroundTruth]> {
        self.annotations
            .get(video_id)
            .map(|a| a.ground_truths.as_slice())
            .ok_or_else(|| Error::UnknownVideo(video_id.to_string()))
    }

    pub fn plan(&self, video_id: &str) -> Result<SnippetPlan> {
        let e = self.entry(video_id)?;
        plan_snippets(e.frame_count, self.manifest.snippet_len, self.manifest.overlap)
    }

    /// Concatenated two-stream snippet features, `T × 2D`.
    pub fn snippets(&self, video_id: &str) -> Result<Tensor> {
        let e = self.entry(video_id)?;
        let (image, flow) = decode_features(&read_bytes(&self.root.join(&e.features))?)?;
        let plan = self.plan(video_id)?;
        if image.rows() != plan.count {
            return Err(Error::Format {
                what: "feature file",
                detail: format!("{video_id}: {} snippets stored, {} expected", image.rows(), plan.count),
            });
        }
        concat_streams(&image, &flow)
    }
}

pub fn read_annotations(path: &Path) -> Result<BTreeMap<String, AnnotationEntry>> {
    let list: Vec<AnnotationEntry> = read_json(path, "annotations")?;
    Ok(list.into_iter().map(|a| (a.video_id.clone(), a)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSummary {
    pub videos: usize,
    pub ground_truths: usize,
    pub foreground_share: f64,
    /// `(relative path, sha256)` in sorted order.
    pub checksums: Vec<(String, String)>,
}

/// Pools frame streams into snippets and writes a complete dataset directory.
pub fn write_dataset(root: &Path, videos: &[SynthVideo], snippet_len: usize, overlap: usize) -> Result<DatasetSummary> {
    let feature_dim = videos.first().map_or(0, |v| v.image.cols());
    let mut files: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    let mut entries = Vec::with_capacity(videos.len());
    let mut annotations = Vec::with_capacity(videos.len());
    for v in videos {
        let plan = plan_snippets(v.meta.frame_count, snippet_len, overlap)?;
        let image = pool_snippets(&v.image, &plan)?;
        let flow = pool_snippets(&v.flow, &plan)?;
        let rel = format!("features/{}.bin", v.meta.video_id);
        files.insert(rel.clone(), encode_features(&image, &flow)?);
        entries.push(ManifestEntry {
            video_id: v.meta.video_id.clone(),
            subject_id: v.meta.subject_id.clone(),
            fps: v.meta.fps,
            frame_count: v.meta.frame_count,
            features: rel,
        });
        annotations.push(AnnotationEntry {
            video_id: v.meta.video_id.clone(),
            subject_id: v.meta.subject_id.clone(),
            fps: v.meta.fps,
            frame_count: v.meta.frame_count,
            ground_truths: v.ground_truths.clone(),
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        snippet_len,
        overlap,
        feature_dim,
        videos: entries,
    };
    files.insert("manifest.json".into(), json_bytes(&manifest)?);
    files.insert("annotations.json".into(), json_bytes(&annotations)?);

    let mut checksums = Vec::with_capacity(files.len());
    for (rel, bytes) in &files {
        write_bytes(&root.join(rel), bytes)?;
        checksums.push((rel.clone(), sha256_hex(bytes)));
    }
    let sums: String = checksums.iter().map(|(p, h)| format!("{h}  {p}\n")).collect();
    write_bytes(&root.join("SHA256SUMS"), sums.as_bytes())?;

    let total: usize = videos.iter().map(|v| v.meta.frame_count).sum();
    let fg: usize = videos
        .iter()
        .flat_map(|v| v.ground_truths.iter().map(GroundTruth::frames))
        .sum();
    Ok(DatasetSummary {
        videos: videos.len(),
        ground_truths: videos.iter().map(|v| v.ground_truths.len()).sum(),
        foreground_share: fg as f64 / total.max(1) as f64,
        checksums,
    })
}

/// One line of a proposals file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub video_id: String,
    pub onset: usize,
    pub offset: usize,
    pub class: ExpressionClass,
    pub confidence: f64,
}

impl ProposalRecord {
    pub fn new(video_id: &str, p: &Proposal) -> Self {
        Self {
            video_id: video_id.to_string(),
            onset: p.onset,
            offset: p.offset,
            class: p.class,
            confidence: p.confidence,
        }
    }

    pub fn proposal(&self) -> Proposal {
        Proposal {
            onset: self.onset,
            offset: self.offset,
            class: self.class,
            confidence: self.confidence,
        }
    }
}

/// Per-video probabilities over valid timestamps, kept for threshold sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub video_id: String,
    pub fps: f64,
    pub frame_count: usize,
    pub snippet_len: usize,
    pub overlap: usize,
    pub probs: Vec<f64>,
}

pub fn sort_proposals(records: &mut [ProposalRecord]) {
    records.sort_by(|a, b| a.video_id.cmp(&b.video_id).then(a.onset.cmp(&b.onset)));
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Format {
            what: "json lines",
            detail: e.to_string(),
        })?;
        out.write_all(b"\n").expect("writing to a Vec");
    }
    write_bytes(path, &out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path, what: &'static str) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            what,
            detail: format!("{} line {}: {e}", path.display(), i + 1),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthSpec};

    #[test]
    fn feature_round_trip() {
        let image = Tensor::from_rows(&[[1.5, -2.0], [0.25, 3.0], [0.0, 1.0]]).unwrap();
        let flow = Tensor::from_rows(&[[0.5, 0.5], [-1.0, 2.0], [7.0, 8.0]]).unwrap();
        let bytes = encode_features(&image, &flow).unwrap();
        assert_eq!(&bytes[..8], b"SNIPFEAT");
        assert_eq!(bytes.len(), 24 + 2 * 6 * 4);
        assert_eq!(u32_at(&bytes, 16), 3);
        assert_eq!(u32_at(&bytes, 20), 2);
        // first payload value is image[0][0]
        assert_eq!(f32::from_le_bytes(bytes[24..28].try_into().unwrap()), 1.5);
        let (i2, f2) = decode_features(&bytes).unwrap();
        assert_eq!((i2, f2), (image, flow));
    }

    #[test]
    fn corrupt_features_rejected() {
        let image = Tensor::zeros(vec![2, 2]);
        let mut bytes = encode_features(&image, &image).unwrap();
        assert!(decode_features(&bytes[..30]).is_err());
        bytes[0] = b'X';
        assert!(decode_features(&bytes).is_err());
    }

    #[test]
    fn dataset_round_trip_and_checksums() {
        let spec = SynthSpec {
            num_subjects: 2,
            videos_per_subject: 1,
            frames: (300, 320),
            ..Default::default()
        };
        let videos = generate(&spec).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let sa = write_dataset(a.path(), &videos, 8, 6).unwrap();
        let sb = write_dataset(b.path(), &videos, 8, 6).unwrap();
        assert_eq!(sa.checksums, sb.checksums);
        assert_eq!(sa.videos, 2);

        let ds = Dataset::load(a.path()).unwrap();
        assert_eq!(ds.video_ids(), vec!["s01_v01", "s02_v01"]);
        let x = ds.snippets("s01_v01").unwrap();
        let plan = ds.plan("s01_v01").unwrap();
        assert_eq!(x.shape(), &[plan.count, 32]);
        assert_eq!(ds.ground_truths("s02_v01").unwrap(), videos[1].ground_truths.as_slice());
        assert!(matches!(ds.snippets("nope"), Err(Error::UnknownVideo(_))));
    }

    #[test]
    fn proposal_lines_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        let mut recs = vec![
            ProposalRecord {
                video_id: "b".into(),
                onset: 3,
                offset: 9,
                class: ExpressionClass::Micro,
                confidence: 0.4,
            },
            ProposalRecord {
                video_id: "a".into(),
                onset: 30,
                offset: 90,
                class: ExpressionClass::Macro,
                confidence: 0.7,
            },
            ProposalRecord {
                video_id: "a".into(),
                onset: 1,
                offset: 5,
                class: ExpressionClass::Micro,
                confidence: 0.2,
            },
        ];
        sort_proposals(&mut recs);
        assert_eq!(
            recs.iter().map(|r| (r.video_id.as_str(), r.onset)).collect::<Vec<_>>(),
            vec![("a", 1), ("a", 30), ("b", 3)]
        );
        write_jsonl(&path, &recs).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.lines().next().unwrap().contains("\"class\":\"ME\""));
        let back: Vec<ProposalRecord> = read_jsonl(&path, "proposals").unwrap();
        assert_eq!(back, recs);
    }

    #[test]
    fn unwritable_path_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let err = write_bytes(&blocker.join("inner.bin"), b"y").unwrap_err();
        assert!(err.to_string().contains("file"));
    }
}
