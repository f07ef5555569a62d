//! Training, prediction, evaluation and the ablation study.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{AugmentConfig, RunConfig};
use crate::data::{augment_image, augment_text, Dataset, Split};
use crate::error::{Result, TsgError};
use crate::metrics::{evaluate, MetricReport};
use crate::model::Model;
use crate::optim::AdamW;
use crate::sampler::{build_epoch, run_batch, ForwardCounter, PairSource};
use crate::segment::MomentSegment;
use crate::tensor::{Graph, Tensor};

pub const CHECKPOINT_FILE: &str = "checkpoint.scg";
pub const CONFIG_FILE: &str = "config.toml";
pub const STEP_LOG_FILE: &str = "train_log.csv";
pub const EPOCH_LOG_FILE: &str = "epoch_log.csv";

/// Derives a per-epoch (or per-item) seed from a base seed.
fn mix(seed: u64, a: u64, b: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(a.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(b.wrapping_mul(0x94D0_49BB_1331_11EB))
        .rotate_left(17)
}

/// Dataset view that applies the configured augmentations with seeds fixed
/// per (epoch, item).
struct AugmentedSource<'a> {
    data: &'a Dataset,
    augment: &'a AugmentConfig,
    insert_pool: Vec<usize>,
    seed: u64,
}

impl PairSource for AugmentedSource<'_> {
    fn frames(&self, video: usize) -> Result<Tensor> {
        let frames = &self.data.videos[video].frames;
        if self.augment.image.is_identity() {
            return Ok(frames.clone());
        }
        augment_image(frames, &self.augment.image, mix(self.seed, 1, video as u64))
    }

    fn query(&self, query: usize) -> (Vec<usize>, MomentSegment) {
        let q = &self.data.queries[query];
        let tokens = match self.augment.text {
            Some(kind) => augment_text(
                &q.tokens,
                kind,
                &self.data.vocab.synonyms,
                &self.insert_pool,
                mix(self.seed, 2, query as u64),
            ),
            None => q.tokens.clone(),
        };
        (tokens, q.target)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub boundary: f64,
    pub iou: f64,
    pub offset: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub batches: usize,
    pub backbone_forwards: u64,
    pub pair_forwards: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

struct LogFiles {
    steps: BufWriter<File>,
    epochs: BufWriter<File>,
}

impl LogFiles {
    fn create(dir: &Path) -> Result<Self> {
        let mut steps = BufWriter::new(File::create(dir.join(STEP_LOG_FILE))?);
        writeln!(steps, "step,L_b,L_iou,L_offset,total")?;
        let mut epochs = BufWriter::new(File::create(dir.join(EPOCH_LOG_FILE))?);
        writeln!(epochs, "epoch,mean_loss,batches,backbone_forwards,pair_forwards")?;
        Ok(Self { steps, epochs })
    }
}

/// Builds a model for `config` sized to `data`.
pub fn build_model(config: &RunConfig, data: &Dataset) -> Result<Model> {
    let channels = data
        .videos
        .first()
        .map_or(data.config.channels, |v| v.frames.shape()[0]);
    Model::new(&config.model, data.vocab.size, channels, config.train.seed)
}

/// Trains on every video of `data` (pass the train split). With `out`, the
/// run config, a checkpoint after initialization and after every epoch, and
/// the step/epoch CSV logs are written there.
pub fn train(model: &mut Model, data: &Dataset, config: &RunConfig, out: Option<&Path>) -> Result<TrainLog> {
    let mut logs = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(CONFIG_FILE), config.to_toml())?;
            checkpoint::save(&dir.join(CHECKPOINT_FILE), &model.store)?;
            Some(LogFiles::create(dir)?)
        }
        None => None,
    };
    let groups = data.queries_by_video();
    let mut opt = AdamW::new(config.train.lr, config.train.weight_decay);
    let mut log = TrainLog::default();
    let insert_pool: Vec<usize> = (data.vocab.event_vocab..data.vocab.size).collect();
    for epoch in 0..config.train.epochs {
        let epoch_seed = mix(config.train.seed, 0, epoch as u64);
        let batches = build_epoch(&groups, &config.sampler, epoch_seed)?;
        let source = AugmentedSource {
            data,
            augment: &config.augment,
            insert_pool: insert_pool.clone(),
            seed: epoch_seed,
        };
        let counter = ForwardCounter::new();
        let mut loss_sum = 0.0;
        for batch in &batches {
            let step = opt.steps_taken() + 1;
            let g = Graph::new();
            let result = run_batch(&g, model, batch, &source, &config.loss, &counter)?;
            let v = result.values;
            if !v.total.is_finite() {
                if let Some(files) = logs.as_mut() {
                    files.steps.flush()?;
                }
                return Err(TsgError::Aborted {
                    step: step as usize,
                    reason: format!("non-finite loss {}", v.total),
                });
            }
            model.store.zero_grad();
            g.backward(result.loss, &mut model.store)?;
            opt.step(&mut model.store);
            let record = StepRecord {
                step,
                boundary: v.boundary,
                iou: v.iou,
                offset: v.offset,
                total: v.total,
            };
            if let Some(files) = logs.as_mut() {
                writeln!(
                    files.steps,
                    "{},{},{},{},{}",
                    record.step, record.boundary, record.iou, record.offset, record.total
                )?;
            }
            log.steps.push(record);
            loss_sum += v.total;
        }
        let counts = counter.snapshot();
        let record = EpochRecord {
            epoch: epoch + 1,
            mean_loss: loss_sum / batches.len().max(1) as f64,
            batches: batches.len(),
            backbone_forwards: counts.backbone_forwards,
            pair_forwards: counts.pair_forwards,
        };
        log::info!(
            "epoch {} mean loss {:.4} ({} batches, {} backbone / {} pair forwards)",
            record.epoch,
            record.mean_loss,
            record.batches,
            record.backbone_forwards,
            record.pair_forwards
        );
        if let (Some(files), Some(dir)) = (logs.as_mut(), out) {
            writeln!(
                files.epochs,
                "{},{},{},{},{}",
                record.epoch, record.mean_loss, record.batches, record.backbone_forwards, record.pair_forwards
            )?;
            files.steps.flush()?;
            files.epochs.flush()?;
            checkpoint::save(&dir.join(CHECKPOINT_FILE), &model.store)?;
        }
        log.epochs.push(record);
    }
    Ok(log)
}

/// One line of the prediction JSONL: ranked `[start, end, score]` triples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub video_id: String,
    /// Index into the dataset's query list.
    pub query_index: usize,
    pub predictions: Vec<[f64; 3]>,
}

impl PredictionRecord {
    pub fn segments(&self) -> Result<Vec<MomentSegment>> {
        self.predictions
            .iter()
            .map(|p| MomentSegment::new(p[0], p[1]))
            .collect()
    }
}

/// Top-k predictions for every query of the videos in `split`.
pub fn predict(model: &Model, data: &Dataset, split: Split, top_k: usize) -> Result<Vec<PredictionRecord>> {
    let groups = data.queries_by_video();
    let mut records = Vec::new();
    for v in data.video_indices(split) {
        let video = &data.videos[v];
        let tokens: Vec<&[usize]> = groups[v].iter().map(|&q| data.queries[q].tokens.as_slice()).collect();
        if tokens.is_empty() {
            continue;
        }
        let ranked = model.infer(&video.frames, &tokens, top_k)?;
        for (&q, preds) in groups[v].iter().zip(ranked) {
            records.push(PredictionRecord {
                video_id: video.id.clone(),
                query_index: q,
                predictions: preds
                    .iter()
                    .map(|p| [p.segment.start(), p.segment.end(), p.score])
                    .collect(),
            });
        }
    }
    Ok(records)
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| TsgError::Format {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Scores prediction records against the dataset's ground truth.
pub fn score_predictions(records: &[PredictionRecord], data: &Dataset, strict: bool) -> Result<MetricReport> {
    let mut predictions = Vec::with_capacity(records.len());
    let mut targets = Vec::with_capacity(records.len());
    for r in records {
        let query = data
            .queries
            .get(r.query_index)
            .filter(|q| q.video_id == r.video_id)
            .ok_or_else(|| {
                TsgError::Input(format!(
                    "prediction for unknown query {} of {}",
                    r.query_index, r.video_id
                ))
            })?;
        predictions.push(r.segments()?);
        targets.push(query.target);
    }
    evaluate(&predictions, &targets, strict)
}

/// Predicts and scores the test split.
pub fn evaluate_model(model: &Model, data: &Dataset, config: &RunConfig) -> Result<MetricReport> {
    let records = predict(model, data, Split::Test, config.eval.top_k)?;
    score_predictions(&records, data, config.eval.strict)
}

/// Rebuilds a trained model from a run directory.
pub fn load_model(run_dir: &Path, data: &Dataset) -> Result<(RunConfig, Model)> {
    let config = RunConfig::load(&run_dir.join(CONFIG_FILE))?;
    let mut model = build_model(&config, data)?;
    checkpoint::load_into(&run_dir.join(CHECKPOINT_FILE), &mut model.store)?;
    Ok((config, model))
}

/// The four compared configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Frozen backbone, no adapters: only the sentence encoder and head train.
    HeadOnly,
    /// Adapters on a fully trainable backbone.
    E2eFull,
    /// Adapters on a frozen backbone without sentence modulation.
    ScadaTextFree,
    /// Adapters on a frozen backbone.
    Scada,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::HeadOnly,
        Variant::E2eFull,
        Variant::ScadaTextFree,
        Variant::Scada,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::HeadOnly => "head_only",
            Variant::E2eFull => "e2e_full",
            Variant::ScadaTextFree => "scada_text_free",
            Variant::Scada => "scada",
        }
    }

    /// `base` with only the adapter, freeze and text-free flags changed.
    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        let (adapters, frozen, text_free) = match self {
            Variant::HeadOnly => (false, true, false),
            Variant::E2eFull => (true, false, false),
            Variant::ScadaTextFree => (true, true, true),
            Variant::Scada => (true, true, false),
        };
        c.model.adapters = adapters;
        c.model.backbone.frozen = frozen;
        c.model.scada.text_free = text_free;
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub metrics: MetricReport,
    pub first_epoch_loss: f64,
    pub final_epoch_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub trainable_parameters: usize,
    pub runs: Vec<SeedResult>,
    pub mean: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantResult>,
}

impl AblationReport {
    pub fn get(&self, variant: Variant) -> Option<&VariantResult> {
        self.variants.iter().find(|v| v.variant == variant)
    }

    /// Markdown table of per-variant means.
    pub fn table(&self) -> String {
        let mut s = String::from("| variant | trainable params |");
        for n in MetricReport::NAMES {
            s.push_str(&format!(" {n} |"));
        }
        s.push_str("\n|---|---|");
        s.push_str(&"---|".repeat(MetricReport::NAMES.len()));
        s.push('\n');
        for v in &self.variants {
            s.push_str(&format!("| {} | {} |", v.variant.name(), v.trainable_parameters));
            for x in v.mean.values() {
                s.push_str(&format!(" {x:.2} |"));
            }
            s.push('\n');
        }
        s
    }
}

/// Trains and evaluates `variants` for each of `seeds` (overriding
/// `train.seed`). `data` must hold both splits.
pub fn ablate(base: &RunConfig, data: &Dataset, variants: &[Variant], seeds: &[u64]) -> Result<AblationReport> {
    let train_set = data.subset(Split::Train);
    let mut results = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut runs = Vec::with_capacity(seeds.len());
        let mut trainable = 0;
        for &seed in seeds {
            let mut config = variant.apply(base);
            config.train.seed = seed;
            let mut model = build_model(&config, data)?;
            trainable = model.trainable_parameters();
            let log = train(&mut model, &train_set, &config, None)?;
            let metrics = evaluate_model(&model, data, &config)?;
            log::info!("{} seed {seed}: {metrics:?}", variant.name());
            runs.push(SeedResult {
                seed,
                metrics,
                first_epoch_loss: log.epochs.first().map_or(f64::NAN, |e| e.mean_loss),
                final_epoch_loss: log.epochs.last().map_or(f64::NAN, |e| e.mean_loss),
            });
        }
        let mean = MetricReport::mean(&runs.iter().map(|r| r.metrics).collect::<Vec<_>>());
        results.push(VariantResult {
            variant,
            trainable_parameters: trainable,
            runs,
            mean,
        });
    }
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        variants: results,
    })
}
