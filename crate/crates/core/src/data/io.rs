//! On-disk dataset: `manifest.json` plus one raw little-endian `f32` tensor
//! per video under `videos/`, named by video id.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, PlantedEvent, QuerySample, Split, SynthConfig, VideoSample, Vocabulary};
use crate::error::{Result, TsgError};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VIDEO_DIR: &str = "videos";
const FORMAT: &str = "tsg-synth-v1";

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: SynthConfig,
    vocab: Vocabulary,
    videos: Vec<VideoEntry>,
    queries: Vec<QuerySample>,
}

#[derive(Serialize, Deserialize)]
struct VideoEntry {
    id: String,
    split: Split,
    file: String,
    shape: Vec<usize>,
    events: Vec<PlantedEvent>,
}

fn format_err(path: &Path, reason: impl Into<String>) -> TsgError {
    TsgError::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn video_file(id: &str) -> String {
    format!("{VIDEO_DIR}/{id}")
}

/// Writes `dataset` into `dir`. A non-empty `dir` is refused unless `force`,
/// in which case the previous manifest and video directory are replaced.
pub fn write_dataset(dir: &Path, dataset: &Dataset, force: bool) -> Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        if !force {
            return Err(TsgError::Input(format!(
                "{} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
        let manifest = dir.join(MANIFEST_FILE);
        if manifest.exists() {
            fs::remove_file(manifest)?;
        }
        let videos = dir.join(VIDEO_DIR);
        if videos.exists() {
            fs::remove_dir_all(videos)?;
        }
    }
    fs::create_dir_all(dir.join(VIDEO_DIR))?;
    let mut entries = Vec::with_capacity(dataset.videos.len());
    for v in &dataset.videos {
        let file = video_file(&v.id);
        let bytes: Vec<u8> = v.frames.data().iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
        fs::write(dir.join(&file), bytes)?;
        entries.push(VideoEntry {
            id: v.id.clone(),
            split: v.split,
            file,
            shape: v.frames.shape().to_vec(),
            events: v.events.clone(),
        });
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        config: dataset.config.clone(),
        vocab: dataset.vocab.clone(),
        videos: entries,
        queries: dataset.queries.clone(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(&path)?).map_err(|e| format_err(&path, e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(TsgError::Version(format!(
            "dataset format {:?}, expected {FORMAT:?}",
            manifest.format
        )));
    }
    let mut videos = Vec::with_capacity(manifest.videos.len());
    for entry in manifest.videos {
        let file = dir.join(&entry.file);
        let bytes = fs::read(&file)?;
        if bytes.len() % 4 != 0 {
            return Err(format_err(&file, "length is not a multiple of 4"));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if entry.shape.len() != 4 {
            return Err(format_err(
                &file,
                format!("expected rank-4 shape, got {:?}", entry.shape),
            ));
        }
        let frames = Tensor::new(entry.shape, data).map_err(|e| format_err(&file, e.to_string()))?;
        let total = frames.shape()[1] as f64;
        if entry.events.is_empty() {
            return Err(format_err(&path, format!("video {} has no events", entry.id)));
        }
        if let Some(bad) = entry
            .events
            .iter()
            .find(|e| e.segment.start() < 0.0 || e.segment.end() > total)
        {
            return Err(format_err(&path, format!("event {bad:?} outside video {}", entry.id)));
        }
        videos.push(VideoSample {
            id: entry.id,
            split: entry.split,
            frames,
            events: entry.events,
        });
    }
    for q in &manifest.queries {
        if q.tokens.is_empty() || q.tokens.iter().any(|&t| t >= manifest.vocab.size) {
            return Err(format_err(
                &path,
                format!("query for {} has invalid tokens", q.video_id),
            ));
        }
        if !videos.iter().any(|v| v.id == q.video_id) {
            return Err(format_err(
                &path,
                format!("query references unknown video {}", q.video_id),
            ));
        }
    }
    Ok(Dataset {
        config: manifest.config,
        vocab: manifest.vocab,
        videos,
        queries: manifest.queries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate;

    fn tiny() -> SynthConfig {
        SynthConfig {
            train_videos: 3,
            test_videos: 1,
            frames: 16,
            height: 2,
            width: 2,
            channels: 1,
            max_event_len: 5,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn write_then_read_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&tiny()).unwrap();
        write_dataset(dir.path(), &ds, false).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), ds);
        let raw = fs::read(dir.path().join(VIDEO_DIR).join(&ds.videos[0].id)).unwrap();
        assert_eq!(raw.len(), ds.videos[0].frames.numel() * 4);
    }

    #[test]
    fn refuses_non_empty_dir_without_force() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&tiny()).unwrap();
        write_dataset(dir.path(), &ds, false).unwrap();
        assert!(write_dataset(dir.path(), &ds, false).is_err());
        let other = generate(&SynthConfig { seed: 99, ..tiny() }).unwrap();
        write_dataset(dir.path(), &other, true).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), other);
    }
}
