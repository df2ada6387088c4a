//! The trainable HIG model: per-level message/root weights and heads,
//! a forward pass that keeps every activation, and the matching backward
//! pass.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{
    self, ApplicabilityMask, CategoryLogits, Head, HeadCache, InteractivityCategory, InteractivityPrediction,
    VocabSizes,
};
use crate::graph::{self, GraphError, Hierarchy, HierarchyConfig, LayerWeights, SubjectNode, WeightSharing};
use crate::numerics::{self, Matrix, NumericsError, Parameter};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid model: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Parameters used at one level (or at every level when shared).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelParams {
    pub message: Parameter,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<Parameter>,
    pub node_head: Head,
    pub edge_head: Head,
}

impl LevelParams {
    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out = vec![&self.message];
        out.extend(self.root.as_ref());
        out.extend(self.node_head.parameters());
        out.extend(self.edge_head.parameters());
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = vec![&mut self.message];
        out.extend(self.root.as_mut());
        out.extend(self.node_head.parameters_mut());
        out.extend(self.edge_head.parameters_mut());
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HigModel {
    pub config: HierarchyConfig,
    pub vocab: VocabSizes,
    pub mask: ApplicabilityMask,
    /// One entry per level, or a single entry in shared mode.
    pub levels: Vec<LevelParams>,
}

/// Head outputs for one cell. Edge entries align with `cell.edges`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellOutput {
    pub node_logits: Vec<CategoryLogits>,
    pub edge_logits: Vec<CategoryLogits>,
    node_caches: Vec<HeadCache>,
    edge_caches: Vec<HeadCache>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub hierarchy: Hierarchy,
    /// `outputs[l - 1][t - 1]` for cell `(l, t)`.
    pub outputs: Vec<Vec<CellOutput>>,
}

/// Upstream gradients with respect to one cell's logits.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CellLogitGrads {
    pub node: Vec<CategoryLogits>,
    pub edge: Vec<CategoryLogits>,
}

impl HigModel {
    /// Random initialisation from `seed`. Message and root weights are
    /// Gaussian with variance `1 / (2 fan_in)`, which keeps activations
    /// roughly stable across levels for small neighbourhoods.
    pub fn new(config: HierarchyConfig, vocab: VocabSizes, mask: ApplicabilityMask, seed: u64) -> Result<Self> {
        config.validate()?;
        mask.validate().map_err(ModelError::Invalid)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let count = match config.weight_sharing {
            WeightSharing::PerLevel => config.levels,
            WeightSharing::SharedAcrossLevels => 1,
        };
        let hidden = config.dims[config.levels];
        let levels = (1..=count)
            .map(|level| {
                let (out, inp) = (config.dims[level], config.dims[level - 1]);
                let scale = (0.5 / inp as f64).sqrt();
                let gaussian = |rng: &mut ChaCha8Rng| {
                    Matrix::from_fn(out, inp, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
                };
                let message = Parameter::new(gaussian(&mut rng));
                let root = config.root_weight.then(|| Parameter::new(gaussian(&mut rng)));
                let node_head = Head::new_random(out, hidden, &InteractivityCategory::SINGLE_ACTOR, &vocab, &mut rng);
                let edge_head =
                    Head::new_random(2 * out, hidden, &InteractivityCategory::DOUBLE_ACTOR, &vocab, &mut rng);
                LevelParams {
                    message,
                    root,
                    node_head,
                    edge_head,
                }
            })
            .collect();
        Ok(Self {
            config,
            vocab,
            mask,
            levels,
        })
    }

    /// Checks shapes after deserialisation.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.mask.validate().map_err(ModelError::Invalid)?;
        let expected = match self.config.weight_sharing {
            WeightSharing::PerLevel => self.config.levels,
            WeightSharing::SharedAcrossLevels => 1,
        };
        if self.levels.len() != expected {
            return Err(ModelError::Invalid(format!(
                "{} parameter sets for {expected} expected",
                self.levels.len()
            )));
        }
        for (i, p) in self.levels.iter().enumerate() {
            let shape = (self.config.dims[i + 1], self.config.dims[i]);
            if p.message.value.shape() != shape || p.root.as_ref().is_some_and(|r| r.value.shape() != shape) {
                return Err(ModelError::Invalid(format!(
                    "level {} weights are not {shape:?}",
                    i + 1
                )));
            }
            if p.root.is_some() != self.config.root_weight {
                return Err(ModelError::Invalid(format!(
                    "level {} root weight does not match config",
                    i + 1
                )));
            }
            if p.node_head.input_dim() != shape.0 || p.edge_head.input_dim() != 2 * shape.0 {
                return Err(ModelError::Invalid(format!(
                    "level {} head input widths are wrong",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    /// Index into `levels` for hierarchy level `level`.
    pub fn slot(&self, level: usize) -> usize {
        match self.config.weight_sharing {
            WeightSharing::PerLevel => level - 1,
            WeightSharing::SharedAcrossLevels => 0,
        }
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        self.levels.iter().flat_map(LevelParams::parameters).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.levels.iter_mut().flat_map(LevelParams::parameters_mut).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.parameters_mut().into_iter().for_each(Parameter::zero_grad);
    }

    /// Freezes every parameter set whose levels are all outside
    /// `trainable`. In shared mode the single set is trainable whenever
    /// any level is.
    pub fn set_trainable(&mut self, trainable: &BTreeSet<usize>) {
        let shared = self.config.weight_sharing == WeightSharing::SharedAcrossLevels;
        for (i, p) in self.levels.iter_mut().enumerate() {
            let active = if shared {
                !trainable.is_empty()
            } else {
                trainable.contains(&(i + 1))
            };
            for param in p.parameters_mut() {
                param.frozen = !active;
            }
        }
    }

    pub fn forward(&self, frames: &[Vec<SubjectNode>]) -> Result<ModelOutput> {
        let base = graph::build_base_level(frames.to_vec(), self.config.input_dim(), self.config.k)?;
        let hierarchy = graph::forward_hierarchy(&base, self, &self.config)?;
        let mut outputs = Vec::with_capacity(hierarchy.level_count());
        for (li, cells) in hierarchy.levels.iter().enumerate() {
            let params = &self.levels[self.slot(li + 1)];
            let mut level_out = Vec::with_capacity(cells.len());
            for state in cells {
                let nodes = &state.cell.nodes;
                let mut node_logits = Vec::with_capacity(nodes.len());
                let mut node_caches = Vec::with_capacity(nodes.len());
                for f in &state.features {
                    let (z, cache) = classifier::classify_node(f, &params.node_head)?;
                    node_logits.push(z);
                    node_caches.push(cache);
                }
                let mut edge_logits = Vec::with_capacity(state.cell.edges.len());
                let mut edge_caches = Vec::with_capacity(state.cell.edges.len());
                for (e, m) in state.cell.edges.iter().zip(&state.messages) {
                    let (z, cache) = classifier::classify_edge(
                        m,
                        &state.features[e.target],
                        &params.edge_head,
                        nodes[e.target].kind,
                        nodes[e.source].kind,
                        &self.mask,
                    )?;
                    edge_logits.push(z);
                    edge_caches.push(cache);
                }
                level_out.push(CellOutput {
                    node_logits,
                    edge_logits,
                    node_caches,
                    edge_caches,
                });
            }
            outputs.push(level_out);
        }
        Ok(ModelOutput { hierarchy, outputs })
    }

    /// Accumulates parameter gradients given upstream logit gradients.
    /// `grads[l - 1]` is `None` for levels whose loss is excluded; their
    /// activations still carry gradient from the levels above.
    pub fn backward(&mut self, out: &ModelOutput, grads: &[Option<Vec<CellLogitGrads>>]) -> Result<()> {
        let h = &out.hierarchy;
        let depth = h.level_count();
        let sigma = self.config.nonlinearity;
        let top = (0..depth).rev().find(|&l| grads.get(l).is_some_and(Option::is_some));
        let Some(top) = top else {
            return Ok(());
        };
        // Gradient with respect to the output features of each cell at the
        // level being processed, fed by the level above.
        let mut d_out: Vec<Vec<Vec<f64>>> = h.levels[top]
            .iter()
            .map(|s| vec![vec![0.0; s.features.first().map_or(0, Vec::len)]; s.features.len()])
            .collect();

        for li in (0..=top).rev() {
            let slot = self.slot(li + 1);
            let cells = &h.levels[li];
            let mut d_in: Vec<Vec<Vec<f64>>> = cells
                .iter()
                .map(|s| s.cell.nodes.iter().map(|n| vec![0.0; n.feature.len()]).collect())
                .collect();
            for (ti, state) in cells.iter().enumerate() {
                let params = &mut self.levels[slot];
                let d_f = &mut d_out[ti];
                let mut d_msg: Vec<Vec<f64>> = state.messages.iter().map(|m| vec![0.0; m.len()]).collect();
                if let Some(Some(level_grads)) = grads.get(li) {
                    let g = &level_grads[ti];
                    let o = &out.outputs[li][ti];
                    for (i, d) in g.node.iter().enumerate() {
                        if d.iter().any(Option::is_some) {
                            let dx = params.node_head.backward(&o.node_caches[i], d)?;
                            numerics::add_assign(&mut d_f[i], &dx);
                        }
                    }
                    for (ei, d) in g.edge.iter().enumerate() {
                        if d.iter().any(Option::is_some) {
                            let dx = params.edge_head.backward(&o.edge_caches[ei], d)?;
                            let width = d_msg[ei].len();
                            numerics::add_assign(&mut d_msg[ei], &dx[..width]);
                            numerics::add_assign(&mut d_f[state.cell.edges[ei].target], &dx[width..]);
                        }
                    }
                }
                let d_pre: Vec<Vec<f64>> = d_f
                    .iter()
                    .zip(&state.pre_activations)
                    .map(|(d, pre)| d.iter().zip(pre).map(|(&d, &p)| d * sigma.derivative(p)).collect())
                    .collect();
                let inputs: Vec<&[f64]> = state.cell.nodes.iter().map(|n| n.feature.as_slice()).collect();
                for (ei, e) in state.cell.edges.iter().enumerate() {
                    numerics::add_assign(&mut d_msg[ei], &d_pre[e.target]);
                    params.message.grad_mut().add_outer(1.0, &d_msg[ei], inputs[e.source])?;
                    let dx = params.message.value.transpose_matvec(&d_msg[ei])?;
                    numerics::add_assign(&mut d_in[ti][e.source], &dx);
                }
                for (i, term) in state.self_terms.iter().enumerate() {
                    if term.is_none() {
                        continue;
                    }
                    let weight = params.root.as_mut().unwrap_or(&mut params.message);
                    weight.grad_mut().add_outer(1.0, &d_pre[i], inputs[i])?;
                    let dx = weight.value.transpose_matvec(&d_pre[i])?;
                    numerics::add_assign(&mut d_in[ti][i], &dx);
                }
            }
            if li == 0 {
                break;
            }
            // Fused inputs are means of the parents' outputs.
            let prev = &h.levels[li - 1];
            let mut d_prev: Vec<Vec<Vec<f64>>> = prev
                .iter()
                .map(|s| vec![vec![0.0; s.features.first().map_or(0, Vec::len)]; s.features.len()])
                .collect();
            for (ti, state) in cells.iter().enumerate() {
                for (i, parts) in state.cell.constituents.iter().enumerate() {
                    let share = 1.0 / parts.len() as f64;
                    for c in parts {
                        let target = &mut d_prev[ti + c.parent][c.index];
                        for (t, &d) in target.iter_mut().zip(&d_in[ti][i]) {
                            *t += share * d;
                        }
                    }
                }
            }
            d_out = d_prev;
        }
        Ok(())
    }

    /// All candidates `select_predictions` can use: every level-1 score
    /// (fallback material) and every higher-level score at or above
    /// `threshold`. Spans are shifted so position 1 is `first_frame`.
    pub fn candidates(&self, out: &ModelOutput, first_frame: u32, threshold: f64) -> Vec<InteractivityPrediction> {
        let mut result = Vec::new();
        let offset = first_frame - 1;
        for (li, cells) in out.outputs.iter().enumerate() {
            let level = li + 1;
            for (state, o) in out.hierarchy.levels[li].iter().zip(cells) {
                let (start, end) = state.cell.window();
                let (start, end) = (start as u32 + offset, end as u32 + offset);
                let mut emit = |subject: u32, object: Option<u32>, logits: &CategoryLogits| {
                    for c in InteractivityCategory::ALL {
                        let Some(z) = &logits[c.index()] else { continue };
                        for (p, &z) in z.iter().enumerate() {
                            let confidence = numerics::sigmoid(z);
                            if level == 1 || confidence >= threshold {
                                result.push(InteractivityPrediction {
                                    subject,
                                    object,
                                    category: c,
                                    predicate: p as u32,
                                    confidence,
                                    start,
                                    end,
                                    level,
                                    fallback: false,
                                });
                            }
                        }
                    }
                };
                let nodes = &state.cell.nodes;
                for (node, logits) in nodes.iter().zip(&o.node_logits) {
                    emit(node.track_id, None, logits);
                }
                for (e, logits) in state.cell.edges.iter().zip(&o.edge_logits) {
                    emit(nodes[e.target].track_id, Some(nodes[e.source].track_id), logits);
                }
            }
        }
        result
    }

    /// Forward pass plus cross-level selection at the configured threshold.
    pub fn predict(&self, frames: &[Vec<SubjectNode>], first_frame: u32) -> Result<Vec<InteractivityPrediction>> {
        let out = self.forward(frames)?;
        let threshold = self.config.confidence_threshold;
        Ok(classifier::select_predictions(
            &self.candidates(&out, first_frame, threshold),
            threshold,
        ))
    }
}

impl LayerWeights for HigModel {
    fn message_weight(&self, level: usize) -> &Matrix {
        &self.levels[self.slot(level)].message.value
    }

    fn root_weight(&self, level: usize) -> Option<&Matrix> {
        self.levels[self.slot(level)].root.as_ref().map(|p| &p.value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{BBox, SubjectKind};

    pub(crate) fn frames(t: usize, n: usize, dim: usize, seed: u64) -> Vec<Vec<SubjectNode>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..t)
            .map(|_| {
                (0..n)
                    .map(|i| SubjectNode {
                        track_id: i as u32 + 1,
                        kind: if i % 2 == 0 {
                            SubjectKind::Person
                        } else {
                            SubjectKind::Object
                        },
                        category_id: 0,
                        bbox: BBox::new(0.1, 0.1, 0.3, 0.3).unwrap(),
                        feature: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    })
                    .collect()
            })
            .collect()
    }

    fn config(levels: usize, dim: usize) -> HierarchyConfig {
        HierarchyConfig {
            levels,
            dims: vec![dim; levels + 1],
            ..HierarchyConfig::default()
        }
    }

    #[test]
    fn output_shapes_follow_the_hierarchy() {
        let m = HigModel::new(config(3, 4), VocabSizes::uniform(3), ApplicabilityMask::default(), 1).unwrap();
        let out = m.forward(&frames(4, 3, 4, 0)).unwrap();
        assert_eq!(out.outputs.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 3, 2]);
        let c = &out.outputs[0][0];
        assert_eq!(c.node_logits.len(), 3);
        assert_eq!(c.edge_logits.len(), 6);
        assert!(c.node_logits[0][InteractivityCategory::Appearance.index()].is_some());
        assert!(c.node_logits[0][InteractivityCategory::Position.index()].is_none());
    }

    #[test]
    fn shared_mode_has_one_parameter_set() {
        let cfg = HierarchyConfig {
            weight_sharing: WeightSharing::SharedAcrossLevels,
            ..config(3, 4)
        };
        let m = HigModel::new(cfg, VocabSizes::uniform(3), ApplicabilityMask::default(), 1).unwrap();
        assert_eq!(m.levels.len(), 1);
        assert!(m.validate().is_ok());
        assert!(std::ptr::eq(m.message_weight(1), m.message_weight(3)));
    }

    #[test]
    fn candidates_cover_level_one_fully() {
        let m = HigModel::new(config(2, 4), VocabSizes::uniform(2), ApplicabilityMask::allow_all(), 1).unwrap();
        let out = m.forward(&frames(3, 2, 4, 0)).unwrap();
        let cands = m.candidates(&out, 10, 1.0);
        // 3 frames x (2 nodes x 2 single categories + 2 edges x 3 double) x 2 predicates
        assert_eq!(cands.iter().filter(|c| c.level == 1).count(), 3 * (4 + 6) * 2);
        assert!(cands.iter().all(|c| c.start >= 10 && c.end <= 12));
    }
}
