//! Interactivity heads and cross-level prediction selection.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::graph::SubjectKind;
use crate::numerics::{self, Matrix, NumericsError, Parameter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InteractivityCategory {
    Appearance,
    Situation,
    Position,
    Interaction,
    Relation,
}

impl InteractivityCategory {
    pub const ALL: [InteractivityCategory; 5] = [
        Self::Appearance,
        Self::Situation,
        Self::Position,
        Self::Interaction,
        Self::Relation,
    ];
    pub const SINGLE_ACTOR: [InteractivityCategory; 2] = [Self::Appearance, Self::Situation];
    pub const DOUBLE_ACTOR: [InteractivityCategory; 3] = [Self::Position, Self::Interaction, Self::Relation];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_single_actor(self) -> bool {
        matches!(self, Self::Appearance | Self::Situation)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Appearance => "appearance",
            Self::Situation => "situation",
            Self::Position => "position",
            Self::Interaction => "interaction",
            Self::Relation => "relation",
        }
    }

    /// Plural descriptor key used in annotation files.
    pub fn descriptor_key(self) -> &'static str {
        match self {
            Self::Appearance => "appearances",
            Self::Situation => "situations",
            Self::Position => "positions",
            Self::Interaction => "interactions",
            Self::Relation => "relations",
        }
    }
}

impl fmt::Display for InteractivityCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Predicate vocabulary size per interactivity category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabSizes {
    pub appearances: usize,
    pub situations: usize,
    pub positions: usize,
    pub interactions: usize,
    pub relations: usize,
}

impl Default for VocabSizes {
    fn default() -> Self {
        Self {
            appearances: 722,
            situations: 2902,
            positions: 130,
            interactions: 565,
            relations: 230,
        }
    }
}

impl VocabSizes {
    pub fn uniform(n: usize) -> Self {
        Self {
            appearances: n,
            situations: n,
            positions: n,
            interactions: n,
            relations: n,
        }
    }

    pub fn get(&self, category: InteractivityCategory) -> usize {
        match category {
            InteractivityCategory::Appearance => self.appearances,
            InteractivityCategory::Situation => self.situations,
            InteractivityCategory::Position => self.positions,
            InteractivityCategory::Interaction => self.interactions,
            InteractivityCategory::Relation => self.relations,
        }
    }
}

/// Which `(subject kind, object kind)` pairs each double-actor category
/// may be predicted for. The subject is the receiving node `S_i` of an
/// edge `S_j -> S_i`, the object its sender `S_j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApplicabilityMask {
    pub position: Vec<(SubjectKind, SubjectKind)>,
    pub interaction: Vec<(SubjectKind, SubjectKind)>,
    pub relation: Vec<(SubjectKind, SubjectKind)>,
}

impl Default for ApplicabilityMask {
    fn default() -> Self {
        use SubjectKind::{Object, Person};
        Self {
            position: vec![(Person, Person), (Object, Person)],
            interaction: vec![(Person, Object)],
            relation: vec![(Person, Person), (Object, Person)],
        }
    }
}

impl ApplicabilityMask {
    pub fn allow_all() -> Self {
        use SubjectKind::{Object, Person};
        let all = vec![(Person, Person), (Person, Object), (Object, Person), (Object, Object)];
        Self {
            position: all.clone(),
            interaction: all.clone(),
            relation: all,
        }
    }

    fn entries(&self, category: InteractivityCategory) -> &[(SubjectKind, SubjectKind)] {
        match category {
            InteractivityCategory::Position => &self.position,
            InteractivityCategory::Interaction => &self.interaction,
            InteractivityCategory::Relation => &self.relation,
            _ => &[],
        }
    }

    pub fn allows(&self, category: InteractivityCategory, subject: SubjectKind, object: SubjectKind) -> bool {
        self.entries(category).contains(&(subject, object))
    }

    pub fn validate(&self) -> Result<(), String> {
        for c in InteractivityCategory::DOUBLE_ACTOR {
            if self.entries(c).is_empty() {
                return Err(format!("applicability mask allows no kind pair for {c}"));
            }
        }
        Ok(())
    }
}

/// Logits per category, `None` where the category is not produced or is
/// masked out.
pub type CategoryLogits = [Option<Vec<f64>>; 5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputLayer {
    pub category: InteractivityCategory,
    pub weight: Parameter,
    pub bias: Parameter,
}

/// Classifier `C`: one rectified hidden layer followed by a linear map per
/// category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub hidden_weight: Parameter,
    pub hidden_bias: Parameter,
    pub outputs: Vec<OutputLayer>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadCache {
    pub input: Vec<f64>,
    pub hidden_pre: Vec<f64>,
    pub hidden: Vec<f64>,
}

impl Head {
    pub fn new_random(
        input: usize,
        hidden: usize,
        categories: &[InteractivityCategory],
        vocab: &VocabSizes,
        rng: &mut impl Rng,
    ) -> Self {
        let mut gaussian = |rows: usize, cols: usize, fan_in: usize| {
            let scale = (2.0 / fan_in as f64).sqrt();
            Matrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
        };
        let hidden_weight = Parameter::new(gaussian(hidden, input, input));
        let outputs = categories
            .iter()
            .map(|&category| OutputLayer {
                category,
                weight: Parameter::new(gaussian(vocab.get(category), hidden, hidden).scale(0.5)),
                bias: Parameter::new(Matrix::zeros(vocab.get(category), 1)),
            })
            .collect();
        Self {
            hidden_weight,
            hidden_bias: Parameter::new(Matrix::zeros(hidden, 1)),
            outputs,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden_weight.value.cols()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = vec![&mut self.hidden_weight, &mut self.hidden_bias];
        for o in &mut self.outputs {
            out.push(&mut o.weight);
            out.push(&mut o.bias);
        }
        out
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out = vec![&self.hidden_weight, &self.hidden_bias];
        for o in &self.outputs {
            out.push(&o.weight);
            out.push(&o.bias);
        }
        out
    }

    /// Logits for every category in `enabled`; the rest stay `None`.
    pub fn forward(
        &self,
        input: &[f64],
        enabled: impl Fn(InteractivityCategory) -> bool,
    ) -> Result<(CategoryLogits, HeadCache), NumericsError> {
        let mut hidden_pre = self.hidden_weight.value.matvec(input)?;
        numerics::add_assign(&mut hidden_pre, self.hidden_bias.value.values());
        let hidden: Vec<f64> = hidden_pre.iter().map(|&v| v.max(0.0)).collect();
        let mut logits: CategoryLogits = Default::default();
        for out in &self.outputs {
            if !enabled(out.category) {
                continue;
            }
            let mut z = out.weight.value.matvec(&hidden)?;
            numerics::add_assign(&mut z, out.bias.value.values());
            logits[out.category.index()] = Some(z);
        }
        Ok((
            logits,
            HeadCache {
                input: input.to_vec(),
                hidden_pre,
                hidden,
            },
        ))
    }

    /// Accumulates parameter gradients for upstream `d_logits` and returns
    /// the gradient with respect to the head input.
    pub fn backward(&mut self, cache: &HeadCache, d_logits: &CategoryLogits) -> Result<Vec<f64>, NumericsError> {
        let mut d_hidden = vec![0.0; cache.hidden.len()];
        for out in &mut self.outputs {
            let Some(d) = &d_logits[out.category.index()] else {
                continue;
            };
            out.weight.grad_mut().add_outer(1.0, d, &cache.hidden)?;
            numerics::add_assign(out.bias.grad_mut().values_mut(), d);
            let back = out.weight.value.transpose_matvec(d)?;
            numerics::add_assign(&mut d_hidden, &back);
        }
        for (dh, &pre) in d_hidden.iter_mut().zip(&cache.hidden_pre) {
            if pre <= 0.0 {
                *dh = 0.0;
            }
        }
        self.hidden_weight.grad_mut().add_outer(1.0, &d_hidden, &cache.input)?;
        numerics::add_assign(self.hidden_bias.grad_mut().values_mut(), &d_hidden);
        self.hidden_weight.value.transpose_matvec(&d_hidden)
    }
}

/// Double-actor logits for the edge `S_j -> S_i` from `[message ; F(S_i)]`.
/// Categories the mask rules out for this kind pair are left `None`.
pub fn classify_edge(
    message: &[f64],
    feature_i: &[f64],
    head: &Head,
    subject: SubjectKind,
    object: SubjectKind,
    mask: &ApplicabilityMask,
) -> Result<(CategoryLogits, HeadCache), NumericsError> {
    let input = [message, feature_i].concat();
    head.forward(&input, |c| !c.is_single_actor() && mask.allows(c, subject, object))
}

/// Appearance and situation logits for one node feature.
pub fn classify_node(feature_i: &[f64], head: &Head) -> Result<(CategoryLogits, HeadCache), NumericsError> {
    head.forward(feature_i, InteractivityCategory::is_single_actor)
}

/// One scored triplet over the frame span `[start, end]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractivityPrediction {
    pub subject: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object: Option<u32>,
    pub category: InteractivityCategory,
    pub predicate: u32,
    pub confidence: f64,
    pub start: u32,
    pub end: u32,
    pub level: usize,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback: bool,
}

impl InteractivityPrediction {
    pub fn span(&self) -> (u32, u32) {
        (self.start, self.end)
    }

    fn key(&self) -> (u32, Option<u32>, InteractivityCategory, u32) {
        (self.subject, self.object, self.category, self.predicate)
    }
}

/// Confidence descending, then a fixed total order over the remaining
/// fields so equal scores rank the same regardless of input order.
pub fn ranking_order(a: &InteractivityPrediction, b: &InteractivityPrediction) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(b.level.cmp(&a.level))
        .then(a.start.cmp(&b.start))
        .then(a.end.cmp(&b.end))
        .then(a.category.cmp(&b.category))
        .then(a.subject.cmp(&b.subject))
        .then(a.object.cmp(&b.object))
        .then(a.predicate.cmp(&b.predicate))
        .then(a.fallback.cmp(&b.fallback))
}

/// Picks the final prediction set from candidates emitted at every level.
///
/// Per `(subject, object, category, predicate)` the single confident
/// candidate (`confidence >= threshold`) from the highest level is kept,
/// the most confident one when a level has several. A
/// `(subject, object, category)` group with no confident candidate at all
/// falls back to its level-1 candidates, regardless of score.
pub fn select_predictions(candidates: &[InteractivityPrediction], threshold: f64) -> Vec<InteractivityPrediction> {
    let mut best: BTreeMap<_, &InteractivityPrediction> = BTreeMap::new();
    for c in candidates.iter().filter(|c| c.confidence >= threshold) {
        best.entry(c.key())
            .and_modify(|b| {
                let better = c.level > b.level || (c.level == b.level && ranking_order(c, b) == Ordering::Less);
                if better {
                    *b = c;
                }
            })
            .or_insert(c);
    }
    let confident_groups: BTreeSet<_> = best.keys().map(|k| (k.0, k.1, k.2)).collect();

    let mut out: Vec<InteractivityPrediction> = best
        .into_values()
        .map(|c| InteractivityPrediction {
            fallback: false,
            ..c.clone()
        })
        .collect();
    out.extend(
        candidates
            .iter()
            .filter(|c| c.level == 1 && !confident_groups.contains(&(c.subject, c.object, c.category)))
            .map(|c| InteractivityPrediction {
                fallback: true,
                ..c.clone()
            }),
    );
    out.sort_by(ranking_order);
    out.dedup();
    out
}
