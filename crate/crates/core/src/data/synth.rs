use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, PlantedEvent, QuerySample, Split, VideoSample, Vocabulary};
use crate::error::{config_err, Result};
use crate::segment::MomentSegment;
use crate::tensor::Tensor;

/// Stream ids keep template, video and query randomness independent.
const TEMPLATE_STREAM: u64 = 1 << 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub vocab_size: usize,
    /// Tokens `0..event_vocab` carry a visual template.
    pub event_vocab: usize,
    pub train_videos: usize,
    pub test_videos: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub events_per_video: usize,
    pub distractors: usize,
    pub min_event_len: usize,
    pub max_event_len: usize,
    pub noise: f64,
    /// Let event segments overlap in time; overlapping templates add up.
    pub overlap: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            event_vocab: 16,
            train_videos: 160,
            test_videos: 100,
            frames: 32,
            height: 8,
            width: 8,
            channels: 3,
            events_per_video: 3,
            distractors: 2,
            min_event_len: 4,
            max_event_len: 10,
            noise: 0.5,
            overlap: true,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("event_vocab", self.event_vocab),
            ("frames", self.frames),
            ("height", self.height),
            ("width", self.width),
            ("channels", self.channels),
            ("events_per_video", self.events_per_video),
            ("min_event_len", self.min_event_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(config_err(format!("data.{name} must be positive")));
        }
        if self.train_videos + self.test_videos == 0 {
            return Err(config_err("data needs at least one video"));
        }
        if self.vocab_size < self.events_per_video + self.distractors {
            return Err(config_err(format!(
                "vocabulary of {} is smaller than {} events plus {} distractors",
                self.vocab_size, self.events_per_video, self.distractors
            )));
        }
        if self.event_vocab > self.vocab_size || self.event_vocab < self.events_per_video {
            return Err(config_err(format!(
                "event_vocab {} must lie in [{}, {}]",
                self.event_vocab, self.events_per_video, self.vocab_size
            )));
        }
        if self.vocab_size - self.event_vocab < self.distractors {
            return Err(config_err(format!(
                "{} distractor words requested but only {} non-event tokens exist",
                self.distractors,
                self.vocab_size - self.event_vocab
            )));
        }
        if self.min_event_len > self.max_event_len {
            return Err(config_err("data.min_event_len exceeds data.max_event_len"));
        }
        let needed = if self.overlap {
            self.max_event_len
        } else {
            self.events_per_video * self.max_event_len
        };
        if needed > self.frames {
            return Err(config_err(format!(
                "{} events of up to {} frames do not fit in {} frames",
                self.events_per_video, self.max_event_len, self.frames
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(config_err("data.noise must be a finite non-negative number"));
        }
        Ok(())
    }

    /// Expected queries per video: uniform over `1..=events_per_video`.
    pub fn expected_queries_per_video(&self) -> f64 {
        (self.events_per_video as f64 + 1.0) / 2.0
    }
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// The fixed spatial pattern `[c0, H, W]` planted for `token`.
pub fn token_template(config: &SynthConfig, token: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(TEMPLATE_STREAM + token as u64);
    let n = config.channels * config.height * config.width;
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn place_events(rng: &mut ChaCha8Rng, config: &SynthConfig) -> Vec<(usize, usize)> {
    let e = config.events_per_video;
    let lengths: Vec<usize> = (0..e)
        .map(|_| rng.random_range(config.min_event_len..=config.max_event_len))
        .collect();
    if config.overlap {
        return lengths
            .into_iter()
            .map(|len| {
                let start = rng.random_range(0..=config.frames - len);
                (start, start + len)
            })
            .collect();
    }
    let free = config.frames - lengths.iter().sum::<usize>();
    let mut cuts: Vec<usize> = (0..e).map(|_| rng.random_range(0..=free)).collect();
    cuts.sort_unstable();
    let mut spans = Vec::with_capacity(e);
    let mut cursor = 0;
    let mut prev_cut = 0;
    for (len, cut) in lengths.into_iter().zip(cuts) {
        cursor += cut - prev_cut;
        prev_cut = cut;
        spans.push((cursor, cursor + len));
        cursor += len;
    }
    spans
}

/// Generates the train and test splits. A pure function of `config`.
pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let vocab = Vocabulary::new(config.vocab_size, config.event_vocab);
    let templates: Vec<Vec<f64>> = (0..config.event_vocab).map(|t| token_template(config, t)).collect();
    let (c0, t_len, h, w) = (config.channels, config.frames, config.height, config.width);
    let plane = h * w;
    let distractor_pool: Vec<usize> = (config.event_vocab..config.vocab_size).collect();

    let total = config.train_videos + config.test_videos;
    let mut videos = Vec::with_capacity(total);
    let mut queries = Vec::new();
    for index in 0..total {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(index as u64);
        let split = if index < config.train_videos {
            Split::Train
        } else {
            Split::Test
        };
        let id = match split {
            Split::Train => format!("train_{index:05}"),
            Split::Test => format!("test_{:05}", index - config.train_videos),
        };

        let mut tokens: Vec<usize> = (0..config.event_vocab).collect();
        tokens.shuffle(&mut rng);
        tokens.truncate(config.events_per_video);
        let spans = place_events(&mut rng, config);
        let events: Vec<PlantedEvent> = tokens
            .iter()
            .zip(&spans)
            .map(|(&token, &(s, e))| PlantedEvent {
                token,
                segment: MomentSegment::frames(s, e).expect("non-empty span"),
            })
            .collect();

        let mut data = vec![0.0; c0 * t_len * plane];
        if config.noise > 0.0 {
            for v in data.iter_mut() {
                *v = config.noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
        for (event, &(s, e)) in events.iter().zip(&spans) {
            let template = &templates[event.token];
            for c in 0..c0 {
                let pattern = &template[c * plane..(c + 1) * plane];
                for t in s..e {
                    let base = (c * t_len + t) * plane;
                    for (v, p) in data[base..base + plane].iter_mut().zip(pattern) {
                        *v += p;
                    }
                }
            }
        }
        let data = data.into_iter().map(round_f32).collect();
        let frames = Tensor::new(vec![c0, t_len, h, w], data)?;

        let n_queries = rng.random_range(1..=config.events_per_video);
        let mut chosen: Vec<usize> = (0..events.len()).collect();
        chosen.shuffle(&mut rng);
        chosen.truncate(n_queries);
        chosen.sort_unstable();
        for ei in chosen {
            let mut words: Vec<usize> = distractor_pool
                .choose_multiple(&mut rng, config.distractors)
                .copied()
                .collect();
            words.push(events[ei].token);
            words.shuffle(&mut rng);
            queries.push(QuerySample {
                video_id: id.clone(),
                tokens: words,
                target: events[ei].segment,
            });
        }
        videos.push(VideoSample {
            id,
            split,
            frames,
            events,
        });
    }
    Ok(Dataset {
        config: config.clone(),
        vocab,
        videos,
        queries,
    })
}
