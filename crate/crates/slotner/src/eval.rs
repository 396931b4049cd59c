//! Micro precision/recall/F1 over exact entities, boundary-only locating
//! metrics, and typing accuracy over correctly located predictions.

use serde::Serialize;

use crate::corpus::Corpus;
use crate::matching::GoldSpan;
use crate::model::{decode_entities, Model, ModelError};
use crate::nn::Scalar;
use crate::template::{build_input, TemplateKind, Vocab};

/// Gold and predicted entities for one sentence. Predictions are
/// (left, right, type id) triples; gold types may be absent on
/// position-only data.
#[derive(Clone, Debug, Default)]
pub struct SentenceEval {
    pub gold: Vec<GoldSpan>,
    pub pred: Vec<(usize, usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TypeReport {
    pub type_name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Pooled (micro) metrics. `F1 = 2PR/(P+R)` with `0/0 -> 0` everywhere.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub locating_precision: f64,
    pub locating_recall: f64,
    pub locating_f1: f64,
    /// Fraction of correctly located predictions whose type also matches.
    pub typing_accuracy: f64,
    pub per_type: Vec<TypeReport>,
}

fn prf(tp: usize, pred: usize, gold: usize) -> (f64, f64, f64) {
    let p = if pred == 0 { 0.0 } else { tp as f64 / pred as f64 };
    let r = if gold == 0 { 0.0 } else { tp as f64 / gold as f64 };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

/// Score pooled over sentences. Exact matching compares (l, r, t) triples;
/// locating compares span sets; typing accuracy is judged only on
/// predictions whose span appears in the gold.
pub fn score(items: &[SentenceEval], type_names: &[String]) -> EvalReport {
    let mut tp = 0usize;
    let mut pred_total = 0usize;
    let mut gold_total = 0usize;
    let mut loc_tp = 0usize;
    let mut loc_pred = 0usize;
    let mut loc_gold = 0usize;
    let mut located = 0usize;
    let mut located_correct_type = 0usize;
    let mut type_tp = vec![0usize; type_names.len()];
    let mut type_pred = vec![0usize; type_names.len()];
    let mut type_gold = vec![0usize; type_names.len()];

    for item in items {
        let gold_triples: Vec<(usize, usize, usize)> = item
            .gold
            .iter()
            .filter_map(|g| g.type_id.map(|t| (g.left, g.right, t)))
            .collect();
        let mut gold_spans: Vec<(usize, usize)> =
            item.gold.iter().map(|g| (g.left, g.right)).collect();
        gold_spans.sort_unstable();
        gold_spans.dedup();
        let mut pred_spans: Vec<(usize, usize)> =
            item.pred.iter().map(|&(l, r, _)| (l, r)).collect();
        pred_spans.sort_unstable();
        pred_spans.dedup();

        gold_total += gold_triples.len();
        pred_total += item.pred.len();
        loc_gold += gold_spans.len();
        loc_pred += pred_spans.len();
        loc_tp += pred_spans
            .iter()
            .filter(|s| gold_spans.contains(s))
            .count();

        for &(l, r, t) in &item.pred {
            if t < type_names.len() {
                type_pred[t] += 1;
            }
            if gold_triples.contains(&(l, r, t)) {
                tp += 1;
                if t < type_names.len() {
                    type_tp[t] += 1;
                }
            }
            if gold_spans.contains(&(l, r)) {
                located += 1;
                if item
                    .gold
                    .iter()
                    .any(|g| g.left == l && g.right == r && g.type_id == Some(t))
                {
                    located_correct_type += 1;
                }
            }
        }
        for &(_, _, t) in &gold_triples {
            type_gold[t] += 1;
        }
    }

    let (precision, recall, f1) = prf(tp, pred_total, gold_total);
    let (lp, lr, lf1) = prf(loc_tp, loc_pred, loc_gold);
    let typing_accuracy = if located == 0 {
        0.0
    } else {
        located_correct_type as f64 / located as f64
    };
    let per_type = type_names
        .iter()
        .enumerate()
        .map(|(t, name)| {
            let (p, r, f1) = prf(type_tp[t], type_pred[t], type_gold[t]);
            TypeReport {
                type_name: name.clone(),
                precision: p,
                recall: r,
                f1,
            }
        })
        .collect();
    EvalReport {
        precision,
        recall,
        f1,
        locating_precision: lp,
        locating_recall: lr,
        locating_f1: lf1,
        typing_accuracy,
        per_type,
    }
}

/// Run the model over a corpus and score it. Inference only, one encoder
/// pass per sentence.
pub fn evaluate_model<T: Scalar>(
    model: &Model<T>,
    vocab: &Vocab,
    kind: TemplateKind,
    corpus: &Corpus,
    use_mask: bool,
) -> Result<EvalReport, EvalError> {
    let mut items = Vec::with_capacity(corpus.records.len());
    for record in &corpus.records {
        let seq = build_input(
            &record.tokens,
            model.cfg.prompts,
            kind,
            vocab,
            model.cfg.max_len,
        )?;
        let preds = model.predict(&seq, use_mask)?;
        let decoded = decode_entities(&preds);
        items.push(SentenceEval {
            gold: corpus.gold_spans(record),
            pred: decoded
                .iter()
                .map(|e| (e.left, e.right, e.type_id))
                .collect(),
        });
    }
    Ok(score(&items, &corpus.types))
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Template(#[from] crate::template::TemplateError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn typed(l: usize, r: usize, t: usize) -> GoldSpan {
        GoldSpan {
            left: l,
            right: r,
            type_id: Some(t),
        }
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("T{i}")).collect()
    }

    #[test]
    fn identical_predictions_score_perfectly() {
        let items = vec![SentenceEval {
            gold: vec![typed(1, 2, 0), typed(4, 4, 1)],
            pred: vec![(1, 2, 0), (4, 4, 1)],
        }];
        let r = score(&items, &names(2));
        assert_eq!(r.precision, 1.0);
        assert_eq!(r.recall, 1.0);
        assert_eq!(r.f1, 1.0);
        assert_eq!(r.locating_f1, 1.0);
        assert_eq!(r.typing_accuracy, 1.0);
    }

    #[test]
    fn empty_predictions_against_nonempty_gold_are_all_zero() {
        let items = vec![SentenceEval {
            gold: vec![typed(1, 2, 0)],
            pred: vec![],
        }];
        let r = score(&items, &names(1));
        assert_eq!(r.precision, 0.0);
        assert_eq!(r.recall, 0.0);
        assert_eq!(r.f1, 0.0);
        assert_eq!(r.typing_accuracy, 0.0);
    }

    #[test]
    fn right_span_wrong_type_locates_but_does_not_score() {
        // gold {(1,2,A)}, predicted {(1,2,B)}.
        let items = vec![SentenceEval {
            gold: vec![typed(1, 2, 0)],
            pred: vec![(1, 2, 1)],
        }];
        let r = score(&items, &names(2));
        assert_eq!(r.locating_f1, 1.0);
        assert_eq!(r.typing_accuracy, 0.0);
        assert_eq!(r.f1, 0.0);
    }

    #[test]
    fn per_type_breakdown_pools_over_sentences() {
        let items = vec![
            SentenceEval {
                gold: vec![typed(1, 1, 0)],
                pred: vec![(1, 1, 0)],
            },
            SentenceEval {
                gold: vec![typed(2, 3, 1)],
                pred: vec![(2, 3, 0)],
            },
        ];
        let r = score(&items, &names(2));
        assert_eq!(r.per_type[0].recall, 1.0); // one T0 gold, found
        assert_eq!(r.per_type[0].precision, 0.5); // two T0 predictions, one right
        assert_eq!(r.per_type[1].f1, 0.0);
    }

    #[test]
    fn position_only_gold_supports_locating_metrics() {
        let items = vec![SentenceEval {
            gold: vec![GoldSpan {
                left: 2,
                right: 3,
                type_id: None,
            }],
            pred: vec![(2, 3, 0)],
        }];
        let r = score(&items, &names(1));
        assert_eq!(r.locating_f1, 1.0);
        // No typed gold: exact precision is 0/1, recall 0/0 -> 0.
        assert_eq!(r.precision, 0.0);
        assert_eq!(r.recall, 0.0);
    }
}
