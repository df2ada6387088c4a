//! Triplet matching and recall@K / mean recall@K.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{self, Triplet};
use crate::classifier::{ranking_order, InteractivityCategory, InteractivityPrediction};
use crate::dataset::{self, Dataset, DatasetError, Split};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid match criteria: {0}")]
    InvalidCriteria(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    /// Recall per video, then the mean over videos.
    #[default]
    Macro,
    /// Matched and ground-truth counts pooled over videos.
    Micro,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchCriteria {
    pub require_identity: bool,
    pub iou_threshold: f64,
    pub averaging: Averaging,
}

impl Default for MatchCriteria {
    fn default() -> Self {
        Self {
            require_identity: true,
            iou_threshold: 0.5,
            averaging: Averaging::Macro,
        }
    }
}

impl MatchCriteria {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(EvalError::InvalidCriteria(format!(
                "IoU threshold {} outside (0, 1]",
                self.iou_threshold
            )));
        }
        Ok(())
    }

    pub fn matches(&self, p: &InteractivityPrediction, g: &Triplet) -> bool {
        p.category == g.category
            && p.predicate == g.predicate
            && (!self.require_identity || (p.subject == g.subject && p.object == g.object))
            && temporal_iou(p.span(), (g.start, g.end)) >= self.iou_threshold
    }
}

/// Intersection over union of two inclusive frame intervals.
pub fn temporal_iou(a: (u32, u32), b: (u32, u32)) -> f64 {
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    let inter = if hi >= lo { (hi - lo + 1) as f64 } else { 0.0 };
    let union = (a.1 - a.0 + 1) as f64 + (b.1 - b.0 + 1) as f64 - inter;
    inter / union
}

/// Greedy matching of the top-`k` predictions (in ranking order) against
/// ground truth; each prediction takes the first unmatched ground-truth
/// triplet it satisfies. Returns a matched flag per ground-truth triplet.
pub fn match_top_k(
    predictions: &[InteractivityPrediction],
    ground_truth: &[Triplet],
    k: usize,
    criteria: &MatchCriteria,
) -> Vec<bool> {
    let mut ranked: Vec<&InteractivityPrediction> = predictions.iter().collect();
    ranked.sort_by(|a, b| ranking_order(a, b));
    let mut matched = vec![false; ground_truth.len()];
    for p in ranked.into_iter().take(k) {
        if let Some(i) = (0..ground_truth.len()).find(|&i| !matched[i] && criteria.matches(p, &ground_truth[i])) {
            matched[i] = true;
        }
    }
    matched
}

/// Matched and total counts for one video, overall and per predicate class
/// `(category, predicate)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RecallCounts {
    pub matched: usize,
    pub total: usize,
    pub per_class: BTreeMap<(InteractivityCategory, u32), (usize, usize)>,
}

impl RecallCounts {
    pub fn compute(
        predictions: &[InteractivityPrediction],
        ground_truth: &[Triplet],
        k: usize,
        criteria: &MatchCriteria,
    ) -> Self {
        let matched = match_top_k(predictions, ground_truth, k, criteria);
        let mut per_class: BTreeMap<_, (usize, usize)> = BTreeMap::new();
        for (g, &m) in ground_truth.iter().zip(&matched) {
            let e = per_class.entry((g.category, g.predicate)).or_default();
            e.0 += usize::from(m);
            e.1 += 1;
        }
        Self {
            matched: matched.iter().filter(|&&m| m).count(),
            total: ground_truth.len(),
            per_class,
        }
    }

    pub fn recall(&self) -> Option<f64> {
        (self.total > 0).then(|| self.matched as f64 / self.total as f64)
    }

    pub fn mean_recall(&self) -> Option<f64> {
        if self.per_class.is_empty() {
            return None;
        }
        let sum: f64 = self.per_class.values().map(|&(m, t)| m as f64 / t as f64).sum();
        Some(sum / self.per_class.len() as f64)
    }
}

/// Per-video R@K; `None` when the video has no ground truth.
pub fn recall_at_k(
    predictions: &[InteractivityPrediction],
    ground_truth: &[Triplet],
    k: usize,
    criteria: &MatchCriteria,
) -> Option<f64> {
    RecallCounts::compute(predictions, ground_truth, k, criteria).recall()
}

/// Per-video mR@K: the unweighted mean of per-class recalls over the
/// predicate classes present in the ground truth.
pub fn mean_recall_at_k(
    predictions: &[InteractivityPrediction],
    ground_truth: &[Triplet],
    k: usize,
    criteria: &MatchCriteria,
) -> Option<f64> {
    RecallCounts::compute(predictions, ground_truth, k, criteria).mean_recall()
}

/// Averages per-video counts into `(R, mR, videos used)`. Videos without
/// ground truth are skipped; with none left both values are 0.
pub fn aggregate(counts: &[RecallCounts], averaging: Averaging) -> (f64, f64, usize) {
    let used: Vec<&RecallCounts> = counts.iter().filter(|c| c.total > 0).collect();
    if used.is_empty() {
        return (0.0, 0.0, 0);
    }
    let n = used.len();
    match averaging {
        Averaging::Macro => {
            let r = used.iter().filter_map(|c| c.recall()).sum::<f64>() / n as f64;
            let mr = used.iter().filter_map(|c| c.mean_recall()).sum::<f64>() / n as f64;
            (r, mr, n)
        }
        Averaging::Micro => {
            let matched: usize = used.iter().map(|c| c.matched).sum();
            let total: usize = used.iter().map(|c| c.total).sum();
            let mut pooled: BTreeMap<_, (usize, usize)> = BTreeMap::new();
            for c in &used {
                for (k, &(m, t)) in &c.per_class {
                    let e = pooled.entry(*k).or_default();
                    e.0 += m;
                    e.1 += t;
                }
            }
            let mr = pooled.values().map(|&(m, t)| m as f64 / t as f64).sum::<f64>() / pooled.len() as f64;
            (matched as f64 / total as f64, mr, n)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub category: InteractivityCategory,
    pub k: usize,
    pub recall: f64,
    pub mean_recall: f64,
    /// Videos with ground truth in this category.
    pub videos: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricRow>,
    pub videos: usize,
}

impl MetricsTable {
    pub fn get(&self, category: InteractivityCategory, k: usize) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.category == category && r.k == k)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("category,k,recall,mean_recall,videos\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.category, r.k, r.recall, r.mean_recall, r.videos
            );
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        dataset::write(&dir.join("metrics.csv"), self.to_csv().as_bytes())?;
        dataset::write(&dir.join("metrics.json"), &annotations::canonical_json(self))?;
        Ok(())
    }
}

/// Per-category metrics over videos given as `(ground truth, predictions)`.
/// Predictions and ground truth are restricted to each category before
/// ranking, so every category gets its own top-K.
pub fn evaluate_videos(
    videos: &[(Vec<Triplet>, Vec<InteractivityPrediction>)],
    ks: &[usize],
    criteria: &MatchCriteria,
) -> MetricsTable {
    let mut rows = Vec::new();
    for category in InteractivityCategory::ALL {
        let restricted: Vec<(Vec<Triplet>, Vec<InteractivityPrediction>)> = videos
            .iter()
            .map(|(g, p)| {
                (
                    g.iter().filter(|t| t.category == category).copied().collect(),
                    p.iter().filter(|x| x.category == category).cloned().collect(),
                )
            })
            .collect();
        for &k in ks {
            let counts: Vec<RecallCounts> = restricted
                .iter()
                .map(|(g, p)| RecallCounts::compute(p, g, k, criteria))
                .collect();
            let (recall, mean_recall, used) = aggregate(&counts, criteria.averaging);
            rows.push(MetricRow {
                category,
                k,
                recall,
                mean_recall,
                videos: used,
            });
        }
    }
    MetricsTable {
        rows,
        videos: videos.len(),
    }
}

pub fn predictions_path(dir: &Path, video_id: &str) -> std::path::PathBuf {
    dir.join(format!("{video_id}.predictions.json"))
}

pub fn write_predictions(dir: &Path, video_id: &str, predictions: &[InteractivityPrediction]) -> Result<()> {
    dataset::write(
        &predictions_path(dir, video_id),
        &annotations::canonical_json(&predictions),
    )?;
    Ok(())
}

/// Scores a directory of `<video_id>.predictions.json` files against the
/// dataset's ground truth (subsampled at `rate`).
pub fn evaluate_run(
    predictions_dir: &Path,
    dataset: &Dataset,
    split: Option<Split>,
    rate: usize,
    ks: &[usize],
    criteria: &MatchCriteria,
) -> Result<MetricsTable> {
    criteria.validate()?;
    let mut videos = Vec::new();
    for entry in dataset.entries(split) {
        let ann = annotations::subsample_frames(&dataset.load_annotations(entry)?, rate);
        let gt = annotations::extract_ground_truth_triplets(&ann);
        let preds: Vec<InteractivityPrediction> = dataset::read_json(&predictions_path(predictions_dir, &entry.id))?;
        videos.push((gt, preds));
    }
    Ok(evaluate_videos(&videos, ks, criteria))
}
