//! Dynamic template filling: augment the gold set to M labels, price every
//! label/prompt pair, solve the assignment, and compute the training losses.

pub mod hungarian;

pub use hungarian::{hungarian_solve, Assignment, SquareMatrix};

use thiserror::Error;

use crate::model::PredictionSet;
use crate::nn::{NnError, Scalar, Tape, VarId};

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("{entities} gold entities exceed the {prompts} available prompts")]
    TooManyEntities { entities: usize, prompts: usize },
    #[error("boundary ({left},{right}) outside sentence of {n_words} words")]
    BoundaryOutOfRange {
        left: usize,
        right: usize,
        n_words: usize,
    },
    #[error("cost matrix entry ({row},{col}) is not finite")]
    NonFiniteCost { row: usize, col: usize },
    #[error("cost matrix row {rows} has {cols} columns; expected a square matrix")]
    NotSquare { rows: usize, cols: usize },
    #[error("expected {expected} labels/assignments, got {got}")]
    SizeMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type TypeId = usize;

/// A gold span; `type_id` is `None` for position-only annotations
/// (the warmup corpus has locations but no types).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GoldSpan {
    /// 1-based inclusive word indices.
    pub left: usize,
    pub right: usize,
    pub type_id: Option<TypeId>,
}

/// Supervision target for one prompt: a gold span or the no-entity label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotLabel {
    Empty,
    Entity(GoldSpan),
}

impl SlotLabel {
    pub fn is_empty(&self) -> bool {
        matches!(self, SlotLabel::Empty)
    }
}

/// Exactly M labels: gold originals, round-robin repeats, then padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AugmentedLabelSet {
    pub labels: Vec<SlotLabel>,
    /// Index of the source gold entity, if any.
    pub origin: Vec<Option<usize>>,
}

impl AugmentedLabelSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn non_empty_count(&self) -> usize {
        self.labels.iter().filter(|l| !l.is_empty()).count()
    }
}

/// Default expansion cap: `U = floor(0.9 M)`.
pub fn default_upper_limit(prompts: usize) -> usize {
    (0.9 * prompts as f64).floor() as usize
}

/// Repeat the K gold entities round-robin until the non-empty count reaches
/// `min(U, M)` (or K when K exceeds U), then pad with the no-entity label.
/// Repetition counts differ by at most one across golds. `K > M` is an
/// error: the prompt budget caps how many entities a sentence may carry.
pub fn augment_gold(
    gold: &[GoldSpan],
    prompts: usize,
    upper_limit: usize,
) -> Result<AugmentedLabelSet, MatchError> {
    let k = gold.len();
    if k > prompts {
        return Err(MatchError::TooManyEntities {
            entities: k,
            prompts,
        });
    }
    let non_empty = if k == 0 {
        0
    } else {
        upper_limit.min(prompts).max(k).min(prompts)
    };
    let mut labels = Vec::with_capacity(prompts);
    let mut origin = Vec::with_capacity(prompts);
    for slot in 0..non_empty {
        let src = slot % k;
        labels.push(SlotLabel::Entity(gold[src]));
        origin.push(Some(src));
    }
    while labels.len() < prompts {
        labels.push(SlotLabel::Empty);
        origin.push(None);
    }
    Ok(AugmentedLabelSet { labels, origin })
}

/// Pairwise match cost between a label and one prompt's prediction:
/// `-(p_t + p_l + p_r)` for a typed entity, zero for the no-entity label.
/// Position-only labels drop the type term.
pub fn match_cost<T: Scalar>(
    label: &SlotLabel,
    preds: &PredictionSet<T>,
    prompt: usize,
) -> Result<f64, MatchError> {
    match label {
        SlotLabel::Empty => Ok(0.0),
        SlotLabel::Entity(span) => {
            let n = preds.n_words();
            if span.left < 1 || span.left > span.right || span.right > n {
                return Err(MatchError::BoundaryOutOfRange {
                    left: span.left,
                    right: span.right,
                    n_words: n,
                });
            }
            let mut score = preds.left_prob(prompt, span.left) + preds.right_prob(prompt, span.right);
            if let Some(t) = span.type_id {
                score += preds.type_prob(prompt, t);
            }
            Ok(-score)
        }
    }
}

/// Cost matrix with labels on rows and prompts on columns.
pub fn build_cost_matrix<T: Scalar>(
    labels: &AugmentedLabelSet,
    preds: &PredictionSet<T>,
) -> Result<SquareMatrix, MatchError> {
    let m = preds.prompts();
    if labels.len() != m {
        return Err(MatchError::SizeMismatch {
            expected: m,
            got: labels.len(),
        });
    }
    let mut matrix = SquareMatrix::zeros(m);
    for (i, label) in labels.labels.iter().enumerate() {
        for j in 0..m {
            matrix.set(i, j, match_cost(label, preds, j)?);
        }
    }
    Ok(matrix)
}

/// Order-based filling ablation: gold entity i (sentence order of left
/// boundary, ties by right) goes to prompt i, the rest get the no-entity
/// label; no cost minimization.
pub fn static_fill(
    gold: &[GoldSpan],
    prompts: usize,
) -> Result<(AugmentedLabelSet, Assignment), MatchError> {
    if gold.len() > prompts {
        return Err(MatchError::TooManyEntities {
            entities: gold.len(),
            prompts,
        });
    }
    let mut sorted: Vec<GoldSpan> = gold.to_vec();
    sorted.sort_by_key(|g| (g.left, g.right));
    let mut labels = Vec::with_capacity(prompts);
    let mut origin = Vec::with_capacity(prompts);
    for (i, span) in sorted.iter().enumerate() {
        labels.push(SlotLabel::Entity(*span));
        // Origin refers to the caller's ordering of `gold`.
        origin.push(gold.iter().position(|g| g == span).or(Some(i)));
    }
    while labels.len() < prompts {
        labels.push(SlotLabel::Empty);
        origin.push(None);
    }
    Ok((
        AugmentedLabelSet { labels, origin },
        Assignment {
            sigma: (0..prompts).collect(),
            total_cost: 0.0,
            cost_matrix: SquareMatrix::zeros(prompts),
        },
    ))
}

/// Floor applied inside every log so a zero probability cannot produce an
/// infinite loss.
pub const PROB_FLOOR: f64 = 1e-12;

/// Loss nodes for one instance.
pub struct LossTerms {
    /// Typing loss over all M prompts (the no-entity class included).
    pub typing: VarId,
    /// Locating loss over prompts whose label is a real entity.
    pub locating: VarId,
    /// `lambda1 * typing + lambda2 * locating`.
    pub total: VarId,
}

/// Negative log-likelihood of the assigned labels under the predictions.
///
/// Typing sums over every prompt (`Empty` maps to the no-entity class;
/// position-only labels contribute nothing). Locating sums the log left and
/// right boundary probabilities of entity-labeled prompts. The assignment
/// itself is a fixed selection: no gradient flows through sigma.
#[allow(clippy::too_many_arguments)]
pub fn compute_losses_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    labels: &AugmentedLabelSet,
    sigma: &[usize],
    type_probs: VarId,
    left: VarId,
    right: VarId,
    lambda1: f64,
    lambda2: f64,
) -> Result<LossTerms, MatchError> {
    let m = labels.len();
    if sigma.len() != m {
        return Err(MatchError::SizeMismatch {
            expected: m,
            got: sigma.len(),
        });
    }
    let (tm, classes) = tape.value(type_probs).dims2()?;
    let (_, n_words) = tape.value(left).dims2()?;
    if tm != m {
        return Err(MatchError::SizeMismatch { expected: m, got: tm });
    }
    let empty_class = classes - 1;
    let floor = T::from_f64(PROB_FLOOR);

    let mut type_coords = Vec::new();
    let mut left_coords = Vec::new();
    let mut right_coords = Vec::new();
    for (i, label) in labels.labels.iter().enumerate() {
        let prompt = sigma[i];
        match label {
            SlotLabel::Empty => type_coords.push((prompt, empty_class)),
            SlotLabel::Entity(span) => {
                if span.left < 1 || span.left > span.right || span.right > n_words {
                    return Err(MatchError::BoundaryOutOfRange {
                        left: span.left,
                        right: span.right,
                        n_words,
                    });
                }
                if let Some(t) = span.type_id {
                    type_coords.push((prompt, t));
                }
                left_coords.push((prompt, span.left - 1));
                right_coords.push((prompt, span.right - 1));
            }
        }
    }

    let typing = if type_coords.is_empty() {
        tape.constant(crate::nn::Tensor::scalar(T::zero()))
    } else {
        let logs = tape.gather_log(type_probs, &type_coords, floor)?;
        let s = tape.sum_all(logs);
        tape.scale(s, T::from_f64(-1.0))
    };
    let locating = if left_coords.is_empty() {
        tape.constant(crate::nn::Tensor::scalar(T::zero()))
    } else {
        let l_logs = tape.gather_log(left, &left_coords, floor)?;
        let r_logs = tape.gather_log(right, &right_coords, floor)?;
        let ls = tape.sum_all(l_logs);
        let rs = tape.sum_all(r_logs);
        tape.weighted_sum(&[(T::from_f64(-1.0), ls), (T::from_f64(-1.0), rs)])?
    };
    let total = tape.weighted_sum(&[
        (T::from_f64(lambda1), typing),
        (T::from_f64(lambda2), locating),
    ])?;
    Ok(LossTerms {
        typing,
        locating,
        total,
    })
}
