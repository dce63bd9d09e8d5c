//! The online adaptation engine and its stream schedules.
//!
//! A schedule realizes an ordered test stream (which sample, which
//! corruption) up front; the engine then consumes it batch by batch,
//! estimating a zeroth-order gradient on each batch, updating the selected
//! normalization affines, and predicting. Every test sample is read
//! exactly once for prediction; the `2k` estimator queries reuse the
//! current batch only.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{Corruption, Split, SyntheticDataset};
use crate::error::{Error, Result};
use crate::models::{predictions, ModelGraph, ParamSelection};
use crate::sfaa::{self, LossWeights, SigmaPolicy, SourceStats};
use crate::tensor::{self, Tensor};
use crate::util::seeded_rng;
use crate::zoo::{self, ZooConfig};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Standard,
    Continual,
    Mixed,
    LabelShift,
}

impl ScheduleKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "continual" => Ok(Self::Continual),
            "mixed" => Ok(Self::Mixed),
            "label_shift" => Ok(Self::LabelShift),
            other => Err(Error::Config(format!("unknown schedule kind '{other}'"))),
        }
    }
}

/// One planned stream position: a test-split sample index and the
/// corruption applied to it.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StreamItem {
    pub index: usize,
    pub corruption: Option<Corruption>,
    pub segment: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentInfo {
    pub name: String,
    pub count: usize,
}

/// A fully realized test stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StreamSchedule {
    pub kind: ScheduleKind,
    pub segments: Vec<SegmentInfo>,
    pub batch_size: usize,
    pub seed: u64,
    pub items: Vec<StreamItem>,
}

impl StreamSchedule {
    pub fn total(&self) -> usize {
        self.items.len()
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("schedule: batch size must be >= 1".into()));
        }
        let seg_total: usize = self.segments.iter().map(|s| s.count).sum();
        if seg_total != self.items.len() {
            return Err(Error::Config(format!(
                "schedule: segment counts sum to {seg_total}, items {}",
                self.items.len()
            )));
        }
        Ok(())
    }
}

/// Build a schedule over the test split.
///
/// * `standard`: one corruption over the whole stream.
/// * `continual`: the corruptions back to back, `samples_per_segment`
///   each, never resetting the model in between.
/// * `mixed`: one segment where each sample draws its corruption from the
///   list with the seeded stream.
/// * `label_shift`: one corruption, samples reordered so class labels are
///   non-decreasing.
pub fn make_schedule(
    kind: ScheduleKind,
    corruptions: &[Corruption],
    samples_per_segment: usize,
    batch_size: usize,
    seed: u64,
    dataset: &SyntheticDataset,
) -> Result<StreamSchedule> {
    if corruptions.is_empty() {
        return Err(Error::Config("schedule: corruption list is empty".into()));
    }
    if samples_per_segment == 0 {
        return Err(Error::Config("schedule: samples_per_segment must be >= 1".into()));
    }
    let mut items = Vec::new();
    let mut segments = Vec::new();
    match kind {
        ScheduleKind::Standard => {
            let c = corruptions[0];
            for i in 0..samples_per_segment {
                items.push(StreamItem {
                    index: i,
                    corruption: Some(c),
                    segment: 0,
                });
            }
            segments.push(SegmentInfo {
                name: format!("{}@{}", c.kind.name(), c.severity),
                count: samples_per_segment,
            });
        }
        ScheduleKind::Continual => {
            let mut offset = 0;
            for (s, c) in corruptions.iter().enumerate() {
                for i in 0..samples_per_segment {
                    items.push(StreamItem {
                        index: offset + i,
                        corruption: Some(*c),
                        segment: s,
                    });
                }
                segments.push(SegmentInfo {
                    name: format!("{}@{}", c.kind.name(), c.severity),
                    count: samples_per_segment,
                });
                offset += samples_per_segment;
            }
        }
        ScheduleKind::Mixed => {
            let mut rng = seeded_rng(seed);
            for i in 0..samples_per_segment {
                let c = corruptions[rng.gen_range(0..corruptions.len())];
                items.push(StreamItem {
                    index: i,
                    corruption: Some(c),
                    segment: 0,
                });
            }
            segments.push(SegmentInfo {
                name: "mixed".into(),
                count: samples_per_segment,
            });
        }
        ScheduleKind::LabelShift => {
            let c = corruptions[0];
            let mut indexed: Vec<usize> = (0..samples_per_segment).collect();
            indexed.sort_by_key(|&i| dataset.label(Split::Test, i));
            for i in indexed {
                items.push(StreamItem {
                    index: i,
                    corruption: Some(c),
                    segment: 0,
                });
            }
            segments.push(SegmentInfo {
                name: format!("label_shift:{}@{}", c.kind.name(), c.severity),
                count: samples_per_segment,
            });
        }
    }
    let schedule = StreamSchedule {
        kind,
        segments,
        batch_size,
        seed,
        items,
    };
    schedule.validate()?;
    Ok(schedule)
}

/// A batch pulled off the stream. Labels ride along for the scorer only;
/// the loss path receives inputs alone (its signature admits no labels).
#[derive(Debug, Clone)]
pub struct StreamBatch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub segment: usize,
}

/// Anything that yields stream batches in order, each exactly once.
pub trait BatchSource {
    fn next_batch(&mut self) -> Result<Option<StreamBatch>>;
}

/// The standard source: renders schedule items on demand.
pub struct ScheduleSource<'a> {
    dataset: &'a SyntheticDataset,
    schedule: &'a StreamSchedule,
    cursor: usize,
}

impl<'a> ScheduleSource<'a> {
    pub fn new(dataset: &'a SyntheticDataset, schedule: &'a StreamSchedule) -> Self {
        Self {
            dataset,
            schedule,
            cursor: 0,
        }
    }
}

impl BatchSource for ScheduleSource<'_> {
    fn next_batch(&mut self) -> Result<Option<StreamBatch>> {
        if self.cursor >= self.schedule.items.len() {
            return Ok(None);
        }
        let end = (self.cursor + self.schedule.batch_size).min(self.schedule.items.len());
        let items = &self.schedule.items[self.cursor..end];
        let mut data = Vec::with_capacity(items.len() * 256);
        let mut labels = Vec::with_capacity(items.len());
        for it in items {
            let mut img = self.dataset.render(Split::Test, it.index);
            if let Some(c) = &it.corruption {
                c.apply(&mut img, it.index as u64);
            }
            data.extend_from_slice(&img);
            labels.push(self.dataset.label(Split::Test, it.index));
        }
        let inputs = Tensor::new(vec![items.len(), 1, 16, 16], data)?;
        let segment = items[0].segment;
        self.cursor = end;
        Ok(Some(StreamBatch {
            inputs,
            labels,
            segment,
        }))
    }
}

/// When within a batch the prediction is taken relative to the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PredictTiming {
    #[default]
    UpdateThenPredict,
    PredictThenUpdate,
}

/// Engine options beyond the estimator config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptOptions {
    pub steps_per_batch: usize,
    pub weights: LossWeights,
    /// Memory queue capacity for batch-size-1 streams. 0 disables the
    /// alignment term entirely (entropy-only fallback).
    pub queue_capacity: usize,
    pub predict_timing: PredictTiming,
}

impl AdaptOptions {
    pub fn new(weights: LossWeights) -> Self {
        Self {
            steps_per_batch: 1,
            weights,
            queue_capacity: 4,
            predict_timing: PredictTiming::UpdateThenPredict,
        }
    }
}

/// One record per batch, streamed as a JSON line.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    pub segment: usize,
    pub batch_size: usize,
    pub batch_accuracy: f64,
    pub running_accuracy: f64,
    pub entropy_sum: f64,
    pub alignment_sum: f64,
    pub loss_total: f64,
    pub grad_norm: f64,
    pub skipped: bool,
    /// Cumulative batched loss/prediction evaluations so far.
    pub forward_count: u64,
    /// Wall-clock time is tracked in memory only; serialized outputs must
    /// be bitwise reproducible across identical runs.
    #[serde(skip)]
    pub wall_ms: f64,
}

/// Mutable engine state across the stream.
#[derive(Debug)]
pub struct AdaptState {
    /// Raw inputs of up to `queue_capacity` recent samples (batch-1 mode).
    queue: Vec<Tensor>,
    pub step: usize,
    pub forward_count: u64,
    pub seen: u64,
    pub correct: u64,
    rng: ChaCha8Rng,
}

impl AdaptState {
    fn new(seed: u64) -> Self {
        Self {
            queue: Vec::new(),
            step: 0,
            forward_count: 0,
            seen: 0,
            correct: 0,
            rng: seeded_rng(seed),
        }
    }
}

fn concat_batches(parts: &[&Tensor]) -> Result<Tensor> {
    let n: usize = parts.iter().map(|t| t.shape()[0]).sum();
    let mut data = Vec::with_capacity(n * 256);
    for t in parts {
        data.extend_from_slice(t.data());
    }
    Tensor::new(vec![n, 1, 16, 16], data)
}

/// Loss terms computed from an already-run tapped forward, so prediction
/// and loss reporting share one evaluation.
fn breakdown_from_forward(
    logits: &Tensor,
    features: &std::collections::BTreeMap<usize, crate::models::LayerFeatures>,
    stats: &SourceStats,
    w: &LossWeights,
) -> Result<sfaa::LossBreakdown> {
    let probs = tensor::softmax(logits)?;
    let mut descriptors = std::collections::BTreeMap::new();
    if w.lambda2 > 0.0 {
        for &l in &stats.layers {
            let f = features
                .get(&l)
                .ok_or_else(|| Error::Input(format!("missing features for layer {l}")))?;
            descriptors.insert(l, sfaa::descriptor_matrix(&mut crate::graph::Eager, f)?);
        }
    }
    sfaa::tta_loss_parts(&probs, &descriptors, stats, w, SigmaPolicy::MuOnlyIfSingleton)
}

/// Run the full online loop over a batch source.
///
/// Per batch: `steps_per_batch` zeroth-order updates on the batch (2k
/// tapped forwards each), then one tapped forward that yields both the
/// predictions and the reported loss terms. An estimation failure skips
/// the update (parameters untouched) and flags the record.
pub fn adapt_stream(
    model: &mut ModelGraph,
    selection: &ParamSelection,
    stats: &SourceStats,
    source: &mut dyn BatchSource,
    zoo_cfg: &ZooConfig,
    opts: &AdaptOptions,
    mut sink: Option<&mut dyn Write>,
) -> Result<Vec<MetricsRecord>> {
    zoo_cfg.validate()?;
    if opts.steps_per_batch < 1 {
        return Err(Error::Config("steps_per_batch must be >= 1".into()));
    }
    let mut state = AdaptState::new(zoo_cfg.seed);
    let mut records = Vec::new();

    while let Some(batch) = source.next_batch()? {
        let t0 = std::time::Instant::now();
        let batch1_mode = batch.inputs.shape()[0] == 1;
        // effective loss batch: current plus memory queue in batch-1 mode
        let (eff_inputs, eff_weights) = if batch1_mode {
            if opts.queue_capacity == 0 {
                let w = LossWeights::new(opts.weights.lambda1, 0.0)?;
                (batch.inputs.clone(), w)
            } else {
                let mut parts: Vec<&Tensor> = vec![&batch.inputs];
                parts.extend(state.queue.iter());
                (concat_batches(&parts)?, opts.weights)
            }
        } else {
            (batch.inputs.clone(), opts.weights)
        };

        let do_updates = |model: &mut ModelGraph,
                              state: &mut AdaptState|
         -> Result<(f64, bool)> {
            let mut grad_norm = 0.0;
            let mut skipped = false;
            for _ in 0..opts.steps_per_batch {
                let est = zoo::estimate_gradient(model, selection, zoo_cfg, &mut state.rng, &mut |m| {
                    Ok(sfaa::tta_loss_with_policy(
                        m,
                        &eff_inputs,
                        stats,
                        &eff_weights,
                        SigmaPolicy::MuOnlyIfSingleton,
                    )?
                    .total)
                });
                state.forward_count += 2 * zoo_cfg.k as u64;
                match est {
                    Ok(est) => {
                        grad_norm = est.norm();
                        zoo::apply_update(model, selection, &est.grad, zoo_cfg.lr)?;
                    }
                    Err(Error::Estimation { .. }) => {
                        skipped = true;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            Ok((grad_norm, skipped))
        };

        let predict = |model: &ModelGraph, state: &mut AdaptState| -> Result<(Tensor, sfaa::LossBreakdown)> {
            let capture: BTreeSet<usize> = if eff_weights.lambda2 > 0.0 {
                stats.layers.iter().copied().collect()
            } else {
                BTreeSet::new()
            };
            let (logits, features) = model.forward(&eff_inputs, &capture)?;
            state.forward_count += 1;
            let breakdown = breakdown_from_forward(&logits, &features, stats, &eff_weights)?;
            Ok((logits, breakdown))
        };

        let (grad_norm, skipped, logits, breakdown) = match opts.predict_timing {
            PredictTiming::UpdateThenPredict => {
                let (g, s) = do_updates(model, &mut state)?;
                let (l, b) = predict(model, &mut state)?;
                (g, s, l, b)
            }
            PredictTiming::PredictThenUpdate => {
                let (l, b) = predict(model, &mut state)?;
                let (g, s) = do_updates(model, &mut state)?;
                (g, s, l, b)
            }
        };

        // score only the rows belonging to the incoming batch (row 0..n)
        let n = batch.inputs.shape()[0];
        let preds = predictions(&tensor::slice_rows(&logits.reshape(vec![
            logits.shape()[0],
            logits.shape()[1],
        ])?, 0, n)?);
        let hits = preds
            .iter()
            .zip(&batch.labels)
            .filter(|(p, l)| *p == *l)
            .count() as u64;
        state.seen += n as u64;
        state.correct += hits;
        state.step += 1;

        if batch1_mode && opts.queue_capacity > 0 {
            state.queue.insert(0, batch.inputs.clone());
            state.queue.truncate(opts.queue_capacity);
        }

        let record = MetricsRecord {
            step: state.step,
            segment: batch.segment,
            batch_size: n,
            batch_accuracy: hits as f64 / n as f64,
            running_accuracy: state.correct as f64 / state.seen as f64,
            entropy_sum: breakdown.entropy_sum,
            alignment_sum: breakdown.alignment_sum,
            loss_total: breakdown.total,
            grad_norm,
            skipped,
            forward_count: state.forward_count,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        };
        if let Some(sink) = sink.as_deref_mut() {
            serde_json::to_writer(&mut *sink, &record)?;
            sink.write_all(b"\n")?;
        }
        records.push(record);
    }
    Ok(records)
}

/// Frozen-model baseline over the same protocol: one forward per batch,
/// no updates. This is "NoAdapt" in all comparisons.
pub fn evaluate_stream(
    model: &ModelGraph,
    source: &mut dyn BatchSource,
    mut sink: Option<&mut dyn Write>,
) -> Result<Vec<MetricsRecord>> {
    let mut seen = 0u64;
    let mut correct = 0u64;
    let mut records = Vec::new();
    let mut step = 0usize;
    let mut forwards = 0u64;
    while let Some(batch) = source.next_batch()? {
        let t0 = std::time::Instant::now();
        let logits = model.logits(&batch.inputs)?;
        forwards += 1;
        let preds = predictions(&logits);
        let hits = preds
            .iter()
            .zip(&batch.labels)
            .filter(|(p, l)| *p == *l)
            .count() as u64;
        let n = batch.labels.len() as u64;
        seen += n;
        correct += hits;
        step += 1;
        let p = tensor::softmax(&logits)?;
        let h = tensor::sum_all(&tensor::entropy(&p)?)?.item();
        let record = MetricsRecord {
            step,
            segment: batch.segment,
            batch_size: n as usize,
            batch_accuracy: hits as f64 / n as f64,
            running_accuracy: correct as f64 / seen as f64,
            entropy_sum: h,
            alignment_sum: 0.0,
            loss_total: h,
            grad_norm: 0.0,
            skipped: false,
            forward_count: forwards,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        };
        if let Some(sink) = sink.as_deref_mut() {
            serde_json::to_writer(&mut *sink, &record)?;
            sink.write_all(b"\n")?;
        }
        records.push(record);
    }
    Ok(records)
}
