//! Graph cells, hierarchy construction and the message-passing forward pass.
//!
//! Level 1 holds one cell per frame. A level-`l` cell at start `t` is built
//! from the two adjacent level-`(l-1)` cells at `t` and `t+1`, so level `l`
//! has `T - l + 1` cells and the top level of a full-depth hierarchy is a
//! single cell covering the whole video.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{self, Matrix, NumericsError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("empty input: video has no frames")]
    EmptyInput,
    #[error("track {track_id}: feature length {found}, expected {expected}")]
    FeatureDimension {
        track_id: u32,
        expected: usize,
        found: usize,
    },
    #[error("track {track_id} appears twice in frame {frame}")]
    DuplicateTrack { frame: usize, track_id: u32 },
    #[error("cells are not consecutive: level {level_a} start {start_a} and level {level_b} start {start_b}")]
    NonConsecutive {
        level_a: usize,
        start_a: usize,
        level_b: usize,
        start_b: usize,
    },
    #[error("invalid hierarchy config: {0}")]
    InvalidConfig(String),
    #[error("at level {level}, cell {start}: {source}")]
    AtCell {
        level: usize,
        start: usize,
        #[source]
        source: Box<GraphError>,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, GraphError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubjectKind {
    Person,
    Object,
}

/// Normalised box, `0 <= x1 < x2 <= 1` and `0 <= y1 < y2 <= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Option<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.is_well_ordered().then_some(b)
    }

    pub fn is_well_ordered(&self) -> bool {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        [self.x1, self.y1, self.x2, self.y2].into_iter().all(in_unit) && self.x1 < self.x2 && self.y1 < self.y2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectNode {
    pub track_id: u32,
    pub kind: SubjectKind,
    pub category_id: u32,
    pub bbox: BBox,
    pub feature: Vec<f64>,
}

/// Directed edge `source -> target` (`S_j -> S_i`), as indices into the
/// owning cell's node list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
}

/// Where a fused node came from: parent 0 is the cell at `start`, parent 1
/// the cell at `start + 1`, one level down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Constituent {
    pub parent: usize,
    pub index: usize,
}

/// One graph `G_{l,t}` covering frames `[start, start + level - 1]`.
///
/// Nodes are kept sorted by `track_id`; their `feature` is the cell's input
/// feature (the fused previous-level output, or the raw feature at level 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphCell {
    pub level: usize,
    pub start: usize,
    pub nodes: Vec<SubjectNode>,
    pub edges: Vec<Edge>,
    pub constituents: Vec<Vec<Constituent>>,
}

impl GraphCell {
    pub fn window(&self) -> (usize, usize) {
        (self.start, self.start + self.level - 1)
    }

    pub fn node_index(&self, track_id: u32) -> Option<usize> {
        self.nodes.binary_search_by_key(&track_id, |n| n.track_id).ok()
    }

    /// Edges whose target is `node`, in edge-list order.
    pub fn in_edges(&self, node: usize) -> impl Iterator<Item = (usize, &Edge)> {
        self.edges.iter().enumerate().filter(move |(_, e)| e.target == node)
    }

    /// Same structure with node features replaced.
    pub fn with_features(&self, features: &[Vec<f64>]) -> GraphCell {
        let mut cell = self.clone();
        for (node, f) in cell.nodes.iter_mut().zip(features) {
            node.feature.clone_from(f);
        }
        cell
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSharing {
    #[default]
    PerLevel,
    SharedAcrossLevels,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    None,
    #[default]
    Rectify,
}

impl Nonlinearity {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::None => x,
            Nonlinearity::Rectify => x.max(0.0),
        }
    }

    pub fn derivative(self, pre: f64) -> f64 {
        match self {
            Nonlinearity::None => 1.0,
            Nonlinearity::Rectify => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HierarchyConfig {
    /// Maximum level count; a video with fewer frames uses `min(levels, T)`.
    pub levels: usize,
    /// Feature widths `D_0..D_L`.
    pub dims: Vec<usize>,
    pub k: usize,
    pub weight_sharing: WeightSharing,
    pub confidence_threshold: f64,
    pub nonlinearity: Nonlinearity,
    /// Adds a separate root weight `R^(l) F^(l-1)(S_i)` to every node's
    /// aggregate. When off, only nodes without in-edges get the `W^(l)`
    /// self-message.
    pub root_weight: bool,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        Self {
            levels: 8,
            dims: vec![32; 9],
            k: 12,
            weight_sharing: WeightSharing::PerLevel,
            confidence_threshold: 0.9,
            nonlinearity: Nonlinearity::Rectify,
            root_weight: true,
        }
    }
}

impl HierarchyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GraphError::InvalidConfig(m));
        if self.levels == 0 {
            return bad("levels must be at least 1".into());
        }
        if self.dims.len() != self.levels + 1 {
            return bad(format!(
                "dims has {} entries, expected levels + 1 = {}",
                self.dims.len(),
                self.levels + 1
            ));
        }
        if self.dims.contains(&0) {
            return bad("all feature widths must be positive".into());
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !(self.confidence_threshold > 0.0 && self.confidence_threshold <= 1.0) {
            return bad(format!(
                "confidence_threshold {} outside (0, 1]",
                self.confidence_threshold
            ));
        }
        if self.weight_sharing == WeightSharing::SharedAcrossLevels && self.dims.iter().any(|&d| d != self.dims[0]) {
            return bad("shared weights require equal widths at every level".into());
        }
        Ok(())
    }

    pub fn effective_levels(&self, frames: usize) -> usize {
        self.levels.min(frames)
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }
}

/// Per-node cosine similarity inside neighbour selection. Zero-norm
/// features score 0 instead of aborting the pass.
fn similarity(a: &SubjectNode, b: &SubjectNode) -> f64 {
    match numerics::cosine_similarity(&a.feature, &b.feature) {
        Ok(s) => s,
        Err(NumericsError::DegenerateVector) => {
            log::warn!(
                "zero-norm feature between tracks {} and {}; similarity set to 0",
                a.track_id,
                b.track_id
            );
            0.0
        }
        Err(e) => {
            log::warn!("similarity failed: {e}; using 0");
            0.0
        }
    }
}

/// Top-k cosine neighbours: for every node, in-edges from its
/// `min(k, n - 1)` most similar other nodes. Ties go to the lower track id.
pub fn select_neighbors(nodes: &[SubjectNode], k: usize) -> Vec<Edge> {
    let n = nodes.len();
    let take = k.min(n.saturating_sub(1));
    let mut edges = Vec::with_capacity(n * take);
    for target in 0..n {
        let mut scored: Vec<(f64, u32, usize)> = (0..n)
            .filter(|&j| j != target)
            .map(|j| (similarity(&nodes[target], &nodes[j]), nodes[j].track_id, j))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        edges.extend(
            scored
                .into_iter()
                .take(take)
                .map(|(_, _, source)| Edge { source, target }),
        );
    }
    edges
}

/// Level-1 cells, one per frame. `frames[t]` holds the subjects of frame
/// `t + 1`.
pub fn build_base_level(frames: Vec<Vec<SubjectNode>>, input_dim: usize, k: usize) -> Result<Vec<GraphCell>> {
    if frames.is_empty() {
        return Err(GraphError::EmptyInput);
    }
    frames
        .into_iter()
        .enumerate()
        .map(|(i, mut nodes)| {
            for node in &nodes {
                if node.feature.len() != input_dim {
                    return Err(GraphError::FeatureDimension {
                        track_id: node.track_id,
                        expected: input_dim,
                        found: node.feature.len(),
                    });
                }
            }
            nodes.sort_by_key(|n| n.track_id);
            if let Some(w) = nodes.windows(2).find(|w| w[0].track_id == w[1].track_id) {
                return Err(GraphError::DuplicateTrack {
                    frame: i + 1,
                    track_id: w[0].track_id,
                });
            }
            let edges = select_neighbors(&nodes, k);
            let constituents = vec![Vec::new(); nodes.len()];
            Ok(GraphCell {
                level: 1,
                start: i + 1,
                nodes,
                edges,
                constituents,
            })
        })
        .collect()
}

/// Per-coordinate min/max over the constituent boxes (min of `x1, y1`,
/// max of `x2, y2`).
pub fn node_summary(boxes: &[BBox]) -> BBox {
    assert!(!boxes.is_empty(), "node_summary needs at least one box");
    boxes.iter().skip(1).fold(boxes[0], |acc, b| BBox {
        x1: acc.x1.min(b.x1),
        y1: acc.y1.min(b.y1),
        x2: acc.x2.max(b.x2),
        y2: acc.y2.max(b.y2),
    })
}

/// Fuses two consecutive level-`(level - 1)` cells into one level-`level`
/// cell. Nodes are matched by track id; a fused feature is the arithmetic
/// mean of its constituents' features.
pub fn construct_graph(a: &GraphCell, b: &GraphCell, level: usize, k: usize) -> Result<GraphCell> {
    if level < 2 || a.level + 1 != level || b.level + 1 != level || b.start != a.start + 1 {
        return Err(GraphError::NonConsecutive {
            level_a: a.level,
            start_a: a.start,
            level_b: b.level,
            start_b: b.start,
        });
    }
    let mut by_track: BTreeMap<u32, Vec<Constituent>> = BTreeMap::new();
    for (parent, cell) in [a, b].into_iter().enumerate() {
        for (index, node) in cell.nodes.iter().enumerate() {
            by_track
                .entry(node.track_id)
                .or_default()
                .push(Constituent { parent, index });
        }
    }
    let parents = [a, b];
    let mut nodes = Vec::with_capacity(by_track.len());
    let mut constituents = Vec::with_capacity(by_track.len());
    for (track_id, parts) in by_track {
        let members: Vec<&SubjectNode> = parts.iter().map(|c| &parents[c.parent].nodes[c.index]).collect();
        let first = members[0];
        let dim = first.feature.len();
        let mut feature = vec![0.0; dim];
        for m in &members {
            if m.feature.len() != dim {
                return Err(GraphError::FeatureDimension {
                    track_id,
                    expected: dim,
                    found: m.feature.len(),
                });
            }
            numerics::add_assign(&mut feature, &m.feature);
        }
        let count = members.len() as f64;
        feature.iter_mut().for_each(|v| *v /= count);
        let boxes: Vec<BBox> = members.iter().map(|m| m.bbox).collect();
        nodes.push(SubjectNode {
            track_id,
            kind: first.kind,
            category_id: first.category_id,
            bbox: node_summary(&boxes),
            feature,
        });
        constituents.push(parts);
    }
    let edges = select_neighbors(&nodes, k);
    Ok(GraphCell {
        level,
        start: a.start,
        nodes,
        edges,
        constituents,
    })
}

/// `m(S_i, S_j) = W · F^(l-1)(S_j)` for every edge `S_j -> S_i`.
pub fn compute_messages(cell: &GraphCell, weight: &Matrix, prev: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    cell.edges.iter().map(|e| Ok(weight.matvec(&prev[e.source])?)).collect()
}

/// Sums incoming messages plus the node's self term, then applies the
/// nonlinearity. Returns `(pre_activations, features)`.
pub fn aggregate_features(
    cell: &GraphCell,
    messages: &[Vec<f64>],
    self_terms: &[Option<Vec<f64>>],
    nonlinearity: Nonlinearity,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let width = messages
        .first()
        .map(Vec::len)
        .or_else(|| self_terms.iter().flatten().map(Vec::len).next())
        .unwrap_or(0);
    let mut pre = vec![vec![0.0; width]; cell.nodes.len()];
    for (e, m) in cell.edges.iter().zip(messages) {
        numerics::add_assign(&mut pre[e.target], m);
    }
    for (p, s) in pre.iter_mut().zip(self_terms) {
        if let Some(s) = s {
            numerics::add_assign(p, s);
        }
    }
    let out = pre
        .iter()
        .map(|p| p.iter().map(|&v| nonlinearity.apply(v)).collect())
        .collect();
    (pre, out)
}

/// Message and root weights for each level.
pub trait LayerWeights {
    fn message_weight(&self, level: usize) -> &Matrix;
    fn root_weight(&self, level: usize) -> Option<&Matrix>;
}

/// Plain per-level weight list, `message[l - 1]` for level `l`; a single
/// entry is shared by every level.
#[derive(Debug, Clone)]
pub struct StaticWeights {
    pub message: Vec<Matrix>,
    pub root: Vec<Option<Matrix>>,
}

impl StaticWeights {
    fn index(&self, level: usize) -> usize {
        if self.message.len() == 1 {
            0
        } else {
            level - 1
        }
    }
}

impl LayerWeights for StaticWeights {
    fn message_weight(&self, level: usize) -> &Matrix {
        &self.message[self.index(level)]
    }

    fn root_weight(&self, level: usize) -> Option<&Matrix> {
        self.root.get(self.index(level)).and_then(Option::as_ref)
    }
}

/// A cell after its level's message-passing step.
#[derive(Debug, Clone, PartialEq)]
pub struct CellState {
    /// Structure plus input features `F^(l-1)`.
    pub cell: GraphCell,
    /// One message per edge, aligned with `cell.edges`.
    pub messages: Vec<Vec<f64>>,
    /// Root term or isolated-node fallback, per node.
    pub self_terms: Vec<Option<Vec<f64>>>,
    pub pre_activations: Vec<Vec<f64>>,
    /// Output features `F^(l)`.
    pub features: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hierarchy {
    pub frames: usize,
    /// `levels[l - 1]` holds the `T - l + 1` cells of level `l`.
    pub levels: Vec<Vec<CellState>>,
}

impl Hierarchy {
    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, level: usize) -> &[CellState] {
        &self.levels[level - 1]
    }

    pub fn cells(&self) -> impl Iterator<Item = &CellState> {
        self.levels.iter().flatten()
    }
}

fn propagate(cell: GraphCell, weights: &impl LayerWeights, config: &HierarchyConfig) -> Result<CellState> {
    let level = cell.level;
    let w = weights.message_weight(level);
    let expected = (config.dims[level], config.dims[level - 1]);
    if w.shape() != expected {
        return Err(NumericsError::Dimension {
            op: "message weight",
            left: w.shape(),
            right: expected,
        }
        .into());
    }
    let root = if config.root_weight {
        let r = weights
            .root_weight(level)
            .ok_or_else(|| GraphError::InvalidConfig(format!("root weight missing for level {level}")))?;
        if r.shape() != expected {
            return Err(NumericsError::Dimension {
                op: "root weight",
                left: r.shape(),
                right: expected,
            }
            .into());
        }
        Some(r)
    } else {
        None
    };

    let inputs: Vec<Vec<f64>> = cell.nodes.iter().map(|n| n.feature.clone()).collect();
    let messages = compute_messages(&cell, w, &inputs)?;
    let mut self_terms = Vec::with_capacity(cell.nodes.len());
    for (i, x) in inputs.iter().enumerate() {
        let term = match root {
            Some(r) => Some(r.matvec(x)?),
            None if cell.in_edges(i).next().is_none() => Some(w.matvec(x)?),
            None => None,
        };
        self_terms.push(term);
    }
    let (pre_activations, features) = aggregate_features(&cell, &messages, &self_terms, config.nonlinearity);
    Ok(CellState {
        cell,
        messages,
        self_terms,
        pre_activations,
        features,
    })
}

fn at_cell(level: usize, start: usize) -> impl Fn(GraphError) -> GraphError {
    move |e| GraphError::AtCell {
        level,
        start,
        source: Box::new(e),
    }
}

/// Runs every level of the hierarchy over pre-built level-1 cells.
pub fn forward_hierarchy(
    base: &[GraphCell],
    weights: &impl LayerWeights,
    config: &HierarchyConfig,
) -> Result<Hierarchy> {
    config.validate()?;
    if base.is_empty() {
        return Err(GraphError::EmptyInput);
    }
    let frames = base.len();
    let depth = config.effective_levels(frames);

    let mut levels: Vec<Vec<CellState>> = Vec::with_capacity(depth);
    let first = base
        .iter()
        .map(|c| propagate(c.clone(), weights, config).map_err(at_cell(1, c.start)))
        .collect::<Result<Vec<_>>>()?;
    levels.push(first);

    for level in 2..=depth {
        let prev = &levels[level - 2];
        let count = frames - level + 1;
        let mut cells = Vec::with_capacity(count);
        for t in 0..count {
            let a = prev[t].cell.with_features(&prev[t].features);
            let b = prev[t + 1].cell.with_features(&prev[t + 1].features);
            let state = construct_graph(&a, &b, level, config.k)
                .and_then(|cell| propagate(cell, weights, config))
                .map_err(at_cell(level, t + 1))?;
            cells.push(state);
        }
        levels.push(cells);
    }
    Ok(Hierarchy { frames, levels })
}
