//! Training: Adam with linear warmup/decay, the full and locate-only loops,
//! and the M/I sweep driver.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::corpus::Corpus;
use crate::eval::{evaluate_model, EvalError, EvalReport};
use crate::matching::{
    augment_gold, build_cost_matrix, compute_losses_on_tape, default_upper_limit, hungarian_solve,
    static_fill, GoldSpan, MatchError,
};
use crate::model::{Model, ModelConfig, ModelError, ModelParams, PredictionSet};
use crate::nn::{NnError, Scalar, Tape, Tensor};
use crate::template::{build_input, PromptedSequence, TemplateError, TemplateKind, Vocab};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("instance {id}: {entities} entities exceed the {prompts} prompts; raise the prompt count or drop the instance")]
    TooManyEntities {
        id: String,
        entities: usize,
        prompts: usize,
    },
    #[error("non-finite loss at step {step} (instance {id})")]
    NonFiniteLoss { step: u64, id: String },
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    Full,
    /// Optimize only the locating loss with a frozen encoder (warmup on
    /// position-only data).
    LocateOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchingMode {
    /// Cost-minimizing assignment, recomputed every step.
    Dynamic,
    /// Sentence-order filling (ablation).
    Static,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub freeze_encoder: bool,
    pub matching: MatchingMode,
    /// One-to-many label expansion; off means classic one-to-one matching.
    pub label_expansion: bool,
    /// The prompt-agnostic encoder mask (ablation switch).
    pub use_mask: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            peak_lr: 1e-3,
            warmup_frac: 0.1,
            lambda1: 1.0,
            lambda2: 2.0,
            seed: 0,
            mode: TrainMode::Full,
            freeze_encoder: false,
            matching: MatchingMode::Dynamic,
            label_expansion: true,
            use_mask: true,
        }
    }
}

impl TrainConfig {
    /// Locate-only mode always freezes the encoder.
    pub fn effective_freeze(&self) -> bool {
        self.freeze_encoder || self.mode == TrainMode::LocateOnly
    }
}

// ---- optimizer --------------------------------------------------------------

/// Adam with bias correction; beta1 0.9, beta2 0.999, eps 1e-8.
pub struct Adam<T> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let shapes: Vec<Tensor<T>> = params
            .named()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.clone(),
            v: shapes,
        }
    }

    /// One update. `grads` aligns with `params.named()` order; `None` means
    /// no gradient flowed (treated as zero). Frozen parameters are skipped
    /// entirely.
    pub fn step(
        &mut self,
        params: &mut ModelParams<T>,
        grads: &[Option<Tensor<T>>],
        lr: f64,
        freeze_encoder: bool,
    ) {
        self.t += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let bias1 = T::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bias2 = T::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr_t = T::from_f64(lr);
        let eps = T::from_f64(self.eps);
        for (idx, (name, tensor)) in params.named_mut().into_iter().enumerate() {
            if freeze_encoder && ModelParams::<T>::is_encoder_param(&name) {
                continue;
            }
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            let data = tensor.data_mut();
            let zero = T::zero();
            let grad = grads[idx].as_ref();
            for i in 0..data.len() {
                let g = grad.map_or(zero, |g| g.data()[i]);
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                data[i] = data[i] - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Linear 0 -> peak over the warmup steps, then linear peak -> 0 reaching
/// zero at the final step.
pub fn lr_at(step: u64, total_steps: u64, warmup_steps: u64, peak: f64) -> f64 {
    if total_steps <= 1 {
        return peak;
    }
    let last = total_steps - 1;
    let warmup = warmup_steps.min(last);
    if step < warmup {
        peak * (step as f64 / warmup as f64)
    } else if step >= last {
        if warmup == last {
            peak
        } else {
            0.0
        }
    } else {
        peak * ((last - step) as f64 / (last - warmup) as f64)
    }
}

pub fn warmup_steps(total_steps: u64, warmup_frac: f64) -> u64 {
    (warmup_frac * total_steps as f64).floor() as u64
}

// ---- instances ----------------------------------------------------------------

/// A sentence prepared for training.
#[derive(Clone, Debug)]
pub struct TrainInstance {
    pub id: String,
    pub seq: PromptedSequence,
    pub gold: Vec<GoldSpan>,
}

/// Build training instances, rejecting any sentence whose entity count
/// exceeds the prompt budget (silent truncation would hide label loss).
pub fn prepare_instances(
    corpus: &Corpus,
    vocab: &Vocab,
    kind: TemplateKind,
    cfg: &ModelConfig,
) -> Result<Vec<TrainInstance>, TrainError> {
    let mut out = Vec::with_capacity(corpus.records.len());
    for (i, record) in corpus.records.iter().enumerate() {
        let id = record
            .id
            .clone()
            .unwrap_or_else(|| format!("record-{}", i + 1));
        if record.entities.len() > cfg.prompts {
            return Err(TrainError::TooManyEntities {
                id,
                entities: record.entities.len(),
                prompts: cfg.prompts,
            });
        }
        let seq = build_input(&record.tokens, cfg.prompts, kind, vocab, cfg.max_len)?;
        out.push(TrainInstance {
            id,
            seq,
            gold: corpus.gold_spans(record),
        });
    }
    Ok(out)
}

// ---- the step and the loop ------------------------------------------------------

/// Loss values of one optimizer step.
#[derive(Clone, Debug, Serialize)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub loss_typing: f64,
    pub loss_locating: f64,
    pub lr: f64,
}

/// Forward the batch, assign labels (dynamic or static), compute losses,
/// backprop, and apply one Adam update. Returns batch-mean loss values.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut Adam<T>,
    batch: &[TrainInstance],
    cfg: &TrainConfig,
    lr: f64,
    step: u64,
) -> Result<StepStats, TrainError> {
    assert!(!batch.is_empty(), "empty batch");
    let mut tape: Tape<T> = Tape::new();
    let vars = model.params.register(&mut tape, true);
    let inv_b = T::from_f64(1.0 / batch.len() as f64);
    let mut totals = Vec::with_capacity(batch.len());
    let mut typing_sum = 0.0;
    let mut locating_sum = 0.0;
    for inst in batch {
        let fw = model.forward_on_tape(&mut tape, &vars, &inst.seq, cfg.use_mask)?;
        let preds = PredictionSet::from_tape(&tape, &fw);
        let (labels, sigma) = match cfg.matching {
            MatchingMode::Static => {
                let (labels, assignment) = static_fill(&inst.gold, model.cfg.prompts)?;
                (labels, assignment.sigma)
            }
            MatchingMode::Dynamic => {
                let upper = if cfg.label_expansion {
                    default_upper_limit(model.cfg.prompts)
                } else {
                    0
                };
                let labels = augment_gold(&inst.gold, model.cfg.prompts, upper)?;
                let cost = build_cost_matrix(&labels, &preds)?;
                let assignment = hungarian_solve(cost)?;
                (labels, assignment.sigma)
            }
        };
        let losses = compute_losses_on_tape(
            &mut tape,
            &labels,
            &sigma,
            fw.type_probs,
            fw.left,
            fw.right,
            cfg.lambda1,
            cfg.lambda2,
        )?;
        typing_sum += tape.value(losses.typing).item().as_f64();
        locating_sum += tape.value(losses.locating).item().as_f64();
        let optimized = match cfg.mode {
            TrainMode::Full => losses.total,
            TrainMode::LocateOnly => {
                tape.weighted_sum(&[(T::from_f64(cfg.lambda2), losses.locating)])?
            }
        };
        if !tape.value(optimized).item().is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step,
                id: inst.id.clone(),
            });
        }
        totals.push((inv_b, optimized));
    }
    let batch_loss = tape.weighted_sum(&totals)?;
    let loss_value = tape.value(batch_loss).item().as_f64();
    if !loss_value.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            step,
            id: batch[0].id.clone(),
        });
    }
    tape.backward(batch_loss)?;
    let grads: Vec<Option<Tensor<T>>> = vars
        .ordered()
        .into_iter()
        .map(|v| tape.grad(v).cloned())
        .collect();
    opt.step(&mut model.params, &grads, lr, cfg.effective_freeze());
    Ok(StepStats {
        step,
        loss: loss_value,
        loss_typing: typing_sum / batch.len() as f64,
        loss_locating: locating_sum / batch.len() as f64,
        lr,
    })
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct TrainLog {
    pub steps: Vec<StepStats>,
}

/// The full training loop: seeded shuffling per epoch, linear
/// warmup/decay, one Adam update per batch. Single-threaded and
/// deterministic for a fixed (seed, config, data).
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    instances: &[TrainInstance],
    cfg: &TrainConfig,
) -> Result<TrainLog, TrainError> {
    let batches_per_epoch = instances.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * batches_per_epoch) as u64;
    let warmup = warmup_steps(total_steps, cfg.warmup_frac);
    let mut opt = Adam::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..instances.len()).collect();
    for _epoch in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainInstance> =
                chunk.iter().map(|&i| instances[i].clone()).collect();
            let lr = lr_at(step, total_steps, warmup, cfg.peak_lr);
            let stats = train_step(model, &mut opt, &batch, cfg, lr, step)?;
            log.steps.push(stats);
            step += 1;
        }
    }
    Ok(log)
}

// ---- sweep ------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Prompts,
    Interaction,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepPoint {
    pub value: usize,
    pub f1: f64,
    pub report: EvalReport,
}

/// Train and evaluate once per axis value. Each point rebuilds the
/// vocabulary and model so prompt-count changes stay consistent.
#[allow(clippy::too_many_arguments)]
pub fn run_sweep(
    axis: SweepAxis,
    values: &[usize],
    base_model: &ModelConfig,
    train_cfg: &TrainConfig,
    kind: TemplateKind,
    train_corpus: &Corpus,
    eval_corpus: &Corpus,
) -> Result<Vec<SweepPoint>, TrainError> {
    let mut points = Vec::with_capacity(values.len());
    for &value in values {
        let mut cfg = base_model.clone();
        match axis {
            SweepAxis::Prompts => cfg.prompts = value,
            SweepAxis::Interaction => cfg.interaction = value,
        }
        let vocab = Vocab::new(train_corpus.words(), cfg.prompts)?;
        let mut model: Model<f32> = Model::init(cfg.clone(), vocab.size(), train_cfg.seed)?;
        let instances = prepare_instances(train_corpus, &vocab, kind, &cfg)?;
        train(&mut model, &instances, train_cfg)?;
        let report = evaluate_model(&model, &vocab, kind, eval_corpus, train_cfg.use_mask)?;
        points.push(SweepPoint {
            value,
            f1: report.f1,
            report,
        });
    }
    Ok(points)
}
