//! Procedural videos with planted, token-keyed events.

mod augment;
mod io;
mod synth;

pub use augment::{augment_image, augment_text, flip_width, photometric, ImageAugment, TextAugment};
pub use io::{read_dataset, write_dataset, MANIFEST_FILE, VIDEO_DIR};
pub use synth::{generate, token_template, SynthConfig};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::segment::MomentSegment;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedEvent {
    pub token: usize,
    pub segment: MomentSegment,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub id: String,
    pub split: Split,
    /// `[c0, T, H, W]`.
    pub frames: Tensor,
    pub events: Vec<PlantedEvent>,
}

impl VideoSample {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuerySample {
    pub video_id: String,
    pub tokens: Vec<usize>,
    pub target: MomentSegment,
}

/// Token vocabulary: ids below `event_vocab` name visual events, the rest
/// are distractor words. Synonyms pair up distractor words.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub size: usize,
    pub event_vocab: usize,
    pub synonyms: BTreeMap<usize, usize>,
}

impl Vocabulary {
    pub fn new(size: usize, event_vocab: usize) -> Self {
        let mut synonyms = BTreeMap::new();
        let mut t = event_vocab;
        while t + 1 < size {
            synonyms.insert(t, t + 1);
            synonyms.insert(t + 1, t);
            t += 2;
        }
        Self {
            size,
            event_vocab,
            synonyms,
        }
    }

    pub fn is_event_token(&self, token: usize) -> bool {
        token < self.event_vocab
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub vocab: Vocabulary,
    pub videos: Vec<VideoSample>,
    pub queries: Vec<QuerySample>,
}

impl Dataset {
    pub fn video(&self, id: &str) -> Option<&VideoSample> {
        self.videos.iter().find(|v| v.id == id)
    }

    pub fn video_index(&self, id: &str) -> Option<usize> {
        self.videos.iter().position(|v| v.id == id)
    }

    /// Indices of queries grouped per video, in video order.
    pub fn queries_by_video(&self) -> Vec<Vec<usize>> {
        let index: BTreeMap<&str, usize> = self
            .videos
            .iter()
            .enumerate()
            .map(|(i, v)| (v.id.as_str(), i))
            .collect();
        let mut groups = vec![Vec::new(); self.videos.len()];
        for (qi, q) in self.queries.iter().enumerate() {
            if let Some(&vi) = index.get(q.video_id.as_str()) {
                groups[vi].push(qi);
            }
        }
        groups
    }

    pub fn video_indices(&self, split: Split) -> Vec<usize> {
        (0..self.videos.len())
            .filter(|&i| self.videos[i].split == split)
            .collect()
    }

    pub fn query_indices(&self, split: Split) -> Vec<usize> {
        let groups = self.queries_by_video();
        self.video_indices(split)
            .into_iter()
            .flat_map(|v| groups[v].clone())
            .collect()
    }

    pub fn mean_queries_per_video(&self, split: Split) -> f64 {
        let videos = self.video_indices(split);
        if videos.is_empty() {
            return 0.0;
        }
        self.query_indices(split).len() as f64 / videos.len() as f64
    }

    /// Copy restricted to one split.
    pub fn subset(&self, split: Split) -> Dataset {
        let videos: Vec<VideoSample> = self.videos.iter().filter(|v| v.split == split).cloned().collect();
        let ids: BTreeSet<&str> = videos.iter().map(|v| v.id.as_str()).collect();
        let queries = self
            .queries
            .iter()
            .filter(|q| ids.contains(q.video_id.as_str()))
            .cloned()
            .collect();
        Dataset {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            videos,
            queries,
        }
    }
}
