//! Label assignment, focal loss, staged training and checkpoints.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{self, Triplet};
use crate::classifier::{CategoryLogits, InteractivityCategory};
use crate::dataset::{self, DatasetError, VideoSample};
use crate::model::{CellLogitGrads, HigModel, ModelError, ModelOutput};
use crate::numerics::{self, AdamState, AdamW};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss on video {video} at level {level}")]
    Divergence { video: String, level: usize },
    #[error("video {video}: {source}")]
    Model {
        video: String,
        #[source]
        source: ModelError,
    },
    #[error(transparent)]
    Checkpoint(#[from] DatasetError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

pub const PROB_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FocalLossParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalLossParams {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

impl FocalLossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(TrainError::InvalidConfig(format!(
                "focal alpha {} outside (0, 1]",
                self.alpha
            )));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "focal gamma {} must be >= 0",
                self.gamma
            )));
        }
        Ok(())
    }

    fn alpha_t(&self, y: bool) -> f64 {
        if y {
            self.alpha
        } else {
            1.0 - self.alpha
        }
    }
}

/// `-α_t (1 - p_t)^γ ln p_t`, with `p` clamped to `[1e-7, 1 - 1e-7]`.
pub fn focal_loss(p: f64, y: bool, params: &FocalLossParams) -> f64 {
    let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    let pt = if y { p } else { 1.0 - p };
    -params.alpha_t(y) * (1.0 - pt).powf(params.gamma) * pt.ln()
}

/// Loss and its derivative with respect to the logit `z`, where
/// `p = sigmoid(z)`. The derivative is zero where the clamp is active.
pub fn focal_loss_with_grad(z: f64, y: bool, params: &FocalLossParams) -> (f64, f64) {
    let raw = numerics::sigmoid(z);
    let loss = focal_loss(raw, y, params);
    if !(PROB_FLOOR..=1.0 - PROB_FLOOR).contains(&raw) {
        return (loss, 0.0);
    }
    let pt = if y { raw } else { 1.0 - raw };
    let sign = if y { 1.0 } else { -1.0 };
    let q = 1.0 - pt;
    let grad = sign * params.alpha_t(y) * q.powf(params.gamma) * (params.gamma * pt * pt.ln() - q);
    (loss, grad)
}

/// Ground-truth spans indexed by `(subject, object)` for label lookup.
#[derive(Debug, Clone, Default)]
pub struct LabelIndex {
    by_pair: HashMap<(u32, Option<u32>), Vec<Triplet>>,
}

impl LabelIndex {
    pub fn new(ground_truth: &[Triplet]) -> Self {
        let mut by_pair: HashMap<_, Vec<Triplet>> = HashMap::new();
        for t in ground_truth {
            by_pair.entry((t.subject, t.object)).or_default().push(*t);
        }
        Self { by_pair }
    }

    /// Positive `(category, predicate)` entries for a node (`object` is
    /// `None`) or an edge over the window `[start, end]`: those whose span
    /// fully contains the window.
    pub fn positives(
        &self,
        subject: u32,
        object: Option<u32>,
        start: u32,
        end: u32,
    ) -> impl Iterator<Item = (InteractivityCategory, u32)> + '_ {
        self.by_pair
            .get(&(subject, object))
            .into_iter()
            .flatten()
            .filter(move |t| t.contains_window(start, end))
            .map(|t| (t.category, t.predicate))
    }

    /// Multi-hot target for one category.
    pub fn assign_labels(
        &self,
        subject: u32,
        object: Option<u32>,
        category: InteractivityCategory,
        level: usize,
        start: u32,
        vocab: usize,
    ) -> Vec<bool> {
        let end = start + level as u32 - 1;
        let mut target = vec![false; vocab];
        for (c, p) in self.positives(subject, object, start, end) {
            if c == category && (p as usize) < vocab {
                target[p as usize] = true;
            }
        }
        target
    }
}

fn cell_targets(
    index: &LabelIndex,
    subject: u32,
    object: Option<u32>,
    start: u32,
    end: u32,
    logits: &CategoryLogits,
) -> [Option<Vec<bool>>; 5] {
    let mut targets: [Option<Vec<bool>>; 5] = Default::default();
    for c in InteractivityCategory::ALL {
        if let Some(z) = &logits[c.index()] {
            targets[c.index()] = Some(vec![false; z.len()]);
        }
    }
    for (c, p) in index.positives(subject, object, start, end) {
        if let Some(t) = &mut targets[c.index()] {
            if let Some(slot) = t.get_mut(p as usize) {
                *slot = true;
            }
        }
    }
    targets
}

/// Mean focal loss over every scored entry at one level, and the gradient
/// of that mean with respect to each logit. Masked categories carry no
/// logits and are skipped.
pub fn level_loss(
    out: &ModelOutput,
    level: usize,
    labels: &LabelIndex,
    params: &FocalLossParams,
) -> (f64, Vec<CellLogitGrads>) {
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut grads = Vec::new();
    let cells = &out.hierarchy.levels[level - 1];
    for (state, o) in cells.iter().zip(&out.outputs[level - 1]) {
        let (start, end) = state.cell.window();
        let (start, end) = (start as u32, end as u32);
        let nodes = &state.cell.nodes;
        let mut entry = |subject: u32, object: Option<u32>, logits: &CategoryLogits| -> CategoryLogits {
            let targets = cell_targets(labels, subject, object, start, end, logits);
            let mut d: CategoryLogits = Default::default();
            for c in InteractivityCategory::ALL {
                let (Some(z), Some(y)) = (&logits[c.index()], &targets[c.index()]) else {
                    continue;
                };
                let g = z
                    .iter()
                    .zip(y)
                    .map(|(&z, &y)| {
                        let (l, g) = focal_loss_with_grad(z, y, params);
                        sum += l;
                        count += 1;
                        g
                    })
                    .collect();
                d[c.index()] = Some(g);
            }
            d
        };
        let node = nodes
            .iter()
            .zip(&o.node_logits)
            .map(|(n, z)| entry(n.track_id, None, z))
            .collect();
        let edge = state
            .cell
            .edges
            .iter()
            .zip(&o.edge_logits)
            .map(|(e, z)| entry(nodes[e.target].track_id, Some(nodes[e.source].track_id), z))
            .collect();
        grads.push(CellLogitGrads { node, edge });
    }
    if count == 0 {
        return (0.0, grads);
    }
    let scale = 1.0 / count as f64;
    for g in &mut grads {
        for d in g.node.iter_mut().chain(g.edge.iter_mut()) {
            for v in d.iter_mut().flatten().flatten() {
                *v *= scale;
            }
        }
    }
    (sum * scale, grads)
}

pub fn total_loss(level_losses: &[f64]) -> f64 {
    level_losses.iter().sum()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub epochs: usize,
    pub levels: BTreeSet<usize>,
}

/// Cumulative stages of trainable levels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnfreezeSchedule {
    pub stages: Vec<Stage>,
}

impl UnfreezeSchedule {
    /// Level 1 first, then one more level per stage.
    pub fn progressive(levels: usize, epochs_per_stage: usize) -> Self {
        Self {
            stages: (1..=levels)
                .map(|l| Stage {
                    epochs: epochs_per_stage,
                    levels: (1..=l).collect(),
                })
                .collect(),
        }
    }

    pub fn single_stage(levels: usize, epochs: usize) -> Self {
        Self {
            stages: vec![Stage {
                epochs,
                levels: (1..=levels).collect(),
            }],
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.stages.iter().map(|s| s.epochs).sum()
    }

    pub fn validate(&self, levels: usize) -> Result<()> {
        let fail = |m: String| Err(TrainError::InvalidConfig(m));
        if self.stages.is_empty() {
            return fail("schedule has no stages".into());
        }
        let mut previous = BTreeSet::new();
        for (i, s) in self.stages.iter().enumerate() {
            if s.epochs == 0 {
                return fail(format!("stage {} has zero epochs", i + 1));
            }
            if !s.levels.is_superset(&previous) {
                return fail(format!("stage {} re-freezes a level", i + 1));
            }
            if s.levels.iter().any(|&l| l == 0 || l > levels) {
                return fail(format!("stage {} names a level outside 1..={levels}", i + 1));
            }
            previous.clone_from(&s.levels);
        }
        if previous.len() != levels {
            return fail(format!("schedule never unfreezes all {levels} levels"));
        }
        Ok(())
    }

    /// Index of the stage containing `epoch` (0-based); epochs past the
    /// end use the last stage.
    pub fn stage_at(&self, epoch: usize) -> usize {
        let mut end = 0;
        for (i, s) in self.stages.iter().enumerate() {
            end += s.epochs;
            if epoch < end {
                return i;
            }
        }
        self.stages.len() - 1
    }
}

pub fn apply_unfreezing(schedule: &UnfreezeSchedule, epoch: usize) -> &BTreeSet<usize> {
    &schedule.stages[schedule.stage_at(epoch)].levels
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Epochs per stage of the default progressive schedule.
    pub epochs_per_stage: usize,
    /// Explicit schedule; overrides `epochs_per_stage` when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<UnfreezeSchedule>,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Videos per optimizer step.
    pub batch_size: usize,
    pub focal: FocalLossParams,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_per_stage: 10,
            schedule: None,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            batch_size: 1,
            focal: FocalLossParams::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self, levels: usize) -> UnfreezeSchedule {
        self.schedule
            .clone()
            .unwrap_or_else(|| UnfreezeSchedule::progressive(levels, self.epochs_per_stage))
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamW::default()
        }
    }

    pub fn validate(&self, levels: usize) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TrainError::InvalidConfig(
                "weight decay must be finite and non-negative".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch size must be positive".into()));
        }
        self.focal.validate()?;
        self.schedule(levels).validate(levels)
    }
}

/// Per-epoch summary. `level_losses[l - 1]` is the mean over videos of the
/// level-`l` loss (0 where a video is too short to reach the level).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub stage: usize,
    pub trainable: BTreeSet<usize>,
    pub total_loss: f64,
    pub level_losses: Vec<f64>,
    /// Level-1 cells processed, summed over videos.
    pub level1_cells: usize,
}

/// Losses and logit gradients for one video. Gradients are only produced
/// for trainable levels.
pub struct VideoLoss {
    pub level_losses: Vec<f64>,
    pub grads: Vec<Option<Vec<CellLogitGrads>>>,
}

pub fn video_loss(
    out: &ModelOutput,
    sample: &VideoSample,
    trainable: &BTreeSet<usize>,
    focal: &FocalLossParams,
) -> Result<VideoLoss> {
    let labels = LabelIndex::new(&sample.ground_truth);
    let mut level_losses = Vec::new();
    let mut grads = Vec::new();
    for level in 1..=out.hierarchy.level_count() {
        let (loss, g) = level_loss(out, level, &labels, focal);
        if !loss.is_finite() {
            return Err(TrainError::Divergence {
                video: sample.video_id.clone(),
                level,
            });
        }
        level_losses.push(loss);
        grads.push(trainable.contains(&level).then_some(g));
    }
    Ok(VideoLoss { level_losses, grads })
}

/// Serializable training state; resuming from it continues bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: HigModel,
    pub train: TrainConfig,
    pub adam: AdamState,
    /// Epochs completed; the shuffle stream of the next epoch derives from
    /// `(train.seed, epoch)`.
    pub epoch: usize,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        dataset::write(path, &annotations::canonical_json(self))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = dataset::read_json(path)?;
        ckpt.model.validate().map_err(|source| TrainError::Model {
            video: path.display().to_string(),
            source,
        })?;
        Ok(ckpt)
    }
}

pub struct Trainer {
    pub model: HigModel,
    pub config: TrainConfig,
    pub adam: AdamState,
    pub epoch: usize,
    schedule: UnfreezeSchedule,
}

impl Trainer {
    pub fn new(model: HigModel, config: TrainConfig) -> Result<Self> {
        config.validate(model.config.levels)?;
        let schedule = config.schedule(model.config.levels);
        Ok(Self {
            model,
            config,
            adam: AdamState::default(),
            epoch: 0,
            schedule,
        })
    }

    pub fn resume(ckpt: Checkpoint) -> Result<Self> {
        let mut t = Self::new(ckpt.model, ckpt.train)?;
        t.adam = ckpt.adam;
        t.epoch = ckpt.epoch;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            train: self.config.clone(),
            adam: self.adam.clone(),
            epoch: self.epoch,
        }
    }

    pub fn schedule(&self) -> &UnfreezeSchedule {
        &self.schedule
    }

    pub fn total_epochs(&self) -> usize {
        self.schedule.total_epochs()
    }

    /// One pass over `videos` in a seeded shuffled order. Forward passes in
    /// a batch run in parallel; backward passes and the optimizer step run
    /// in a fixed order, so results do not depend on the thread count.
    pub fn train_epoch(&mut self, videos: &[VideoSample]) -> Result<EpochMetrics> {
        let stage = self.schedule.stage_at(self.epoch);
        let trainable = apply_unfreezing(&self.schedule, self.epoch).clone();
        self.model.set_trainable(&trainable);

        let mut order: Vec<usize> = (0..videos.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.epoch as u64);
        order.shuffle(&mut rng);

        let levels = self.model.config.levels;
        let mut level_sums = vec![0.0; levels];
        let mut level1_cells = 0;
        let optimizer = self.config.optimizer();
        let batch_scale = 1.0 / self.config.batch_size as f64;

        for batch in order.chunks(self.config.batch_size) {
            let model = &self.model;
            let results: Vec<(ModelOutput, VideoLoss)> = batch
                .par_iter()
                .map(|&i| {
                    let v = &videos[i];
                    let out = model.forward(&v.frames).map_err(|source| TrainError::Model {
                        video: v.video_id.clone(),
                        source,
                    })?;
                    let loss = video_loss(&out, v, &trainable, &self.config.focal)?;
                    Ok((out, loss))
                })
                .collect::<Result<_>>()?;

            self.model.zero_grad();
            for (&i, (out, mut loss)) in batch.iter().zip(results) {
                level1_cells += out.hierarchy.level(1).len();
                for (sum, l) in level_sums.iter_mut().zip(&loss.level_losses) {
                    *sum += l;
                }
                if batch_scale != 1.0 {
                    for g in loss.grads.iter_mut().flatten().flatten() {
                        for d in g.node.iter_mut().chain(g.edge.iter_mut()) {
                            for v in d.iter_mut().flatten().flatten() {
                                *v *= batch_scale;
                            }
                        }
                    }
                }
                self.model
                    .backward(&out, &loss.grads)
                    .map_err(|source| TrainError::Model {
                        video: videos[i].video_id.clone(),
                        source,
                    })?;
            }
            let mut params = self.model.parameters_mut();
            optimizer.step(&mut params, &mut self.adam);
        }

        let n = videos.len().max(1) as f64;
        let level_losses: Vec<f64> = level_sums.iter().map(|s| s / n).collect();
        let metrics = EpochMetrics {
            epoch: self.epoch,
            stage,
            trainable,
            total_loss: total_loss(&level_losses),
            level_losses,
            level1_cells,
        };
        self.epoch += 1;
        Ok(metrics)
    }
}
