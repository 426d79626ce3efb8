//! Loss composition, AdaDelta updates with adaptive gradient clipping, and
//! the per-sentence training loop with early stopping on development UAS.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conllu::Sentence;
use crate::decoder::{decode, DecodeMode, ParseResult};
use crate::lexicon::{EncodedSentence, Lexicon, LexiconError};
use crate::metrics::{attachment_scores, EvalReport, MetricsError};
use crate::model::{AttentionMode, Model, ModelConfig, ModelError, Params};
use crate::parser_head::{
    head_logits, label_hard, label_soft, score_matrix, with_root, ScoreMatrix,
};
use crate::reader::reader_forward;
use crate::tagger::{pos_head_loss, tagger_forward, TaggerStates};
use crate::tensor::{Gradients, Tape, Tensor, Var};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("training corpus is empty after filtering")]
    EmptyCorpus,
    #[error("non-finite gradient in {param}")]
    NonFiniteGradient { param: String },
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Mixing weights for the three loss terms.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Label loss weight.
    pub alpha_l: f64,
    /// Structure (head-location) loss weight.
    pub alpha_s: f64,
    /// POS-attribute loss weight.
    pub alpha_t: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha_l: 0.4, alpha_s: 0.6, alpha_t: 1.0 }
    }
}

/// `alpha_l * label + alpha_s * structure + alpha_t * pos`, the last term
/// only when a POS loss exists.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    label: Var,
    structure: Var,
    pos: Option<Var>,
    weights: &LossWeights,
) -> Var {
    let cast = |x: f64| T::from(x).unwrap();
    let mut parts = vec![
        tape.scalar_mul(label, cast(weights.alpha_l)),
        tape.scalar_mul(structure, cast(weights.alpha_s)),
    ];
    if let Some(p) = pos {
        parts.push(tape.scalar_mul(p, cast(weights.alpha_t)));
    }
    tape.add_n(&parts)
}

/// Recorded component values of one sentence's loss.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: f64,
    pub label: f64,
    pub structure: f64,
    pub pos: Option<f64>,
    pub pos_pairs: usize,
}

/// Reader + tagger + root assembly shared by training and parsing.
fn annotate<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    vars: &Params<Var>,
    config: &ModelConfig,
    char_ids: &[Vec<usize>],
    train: bool,
    rng: &mut R,
) -> (Var, TaggerStates) {
    let reader_rate = T::from(config.dropout.reader).unwrap();
    let rnn_rate = T::from(config.dropout.rnn).unwrap();
    let embeddings: Vec<Var> = char_ids
        .iter()
        .map(|ids| {
            let e = reader_forward(tape, &vars.reader, ids);
            tape.dropout(e, reader_rate, train, rng)
        })
        .collect();
    let states = tagger_forward(tape, &vars.tagger, &config.tagger, &embeddings, rnn_rate, train, rng);
    let h_full = with_root(tape, &vars.parser, &states.annotations);
    (h_full, states)
}

/// Full weighted loss for one gold sentence. Head and label losses are means
/// over words; the POS loss is a mean over supervised (token, attribute)
/// pairs and is absent when the POS head is off or nothing is supervised.
pub fn sentence_loss<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    vars: &Params<Var>,
    config: &ModelConfig,
    encoded: &EncodedSentence,
    weights: &LossWeights,
    train: bool,
    rng: &mut R,
) -> (Var, LossParts) {
    let n = encoded.char_ids.len();
    assert!(n > 0, "cannot score an empty sentence");
    let (h_full, states) = annotate(tape, vars, config, &encoded.char_ids, train, rng);
    let labeler_rate = T::from(config.dropout.labeler).unwrap();
    let pieces = config.scorer.maxout_pieces;

    let mut structure_parts = Vec::with_capacity(n);
    let mut label_parts = Vec::with_capacity(n);
    for w in 1..=n {
        let gold_head = encoded.heads[w - 1];
        let gold_label = encoded.label_ids[w - 1];
        let logits = head_logits(tape, &vars.parser, h_full, w);
        structure_parts.push(tape.cross_entropy(logits, gold_head));
        let h_w = tape.row(h_full, w);
        let label_logits = match config.scorer.attention {
            AttentionMode::Soft => {
                let row = tape.softmax(logits);
                label_soft(
                    tape, &vars.parser, pieces, row, h_full, h_w, labeler_rate, train, rng,
                )
            }
            AttentionMode::Hard => label_hard(
                tape, &vars.parser, pieces, gold_head, h_full, h_w, labeler_rate, train, rng,
            ),
        };
        label_parts.push(tape.cross_entropy(label_logits, gold_label));
    }
    let structure = tape.mean_of(&structure_parts);
    let label = tape.mean_of(&label_parts);

    let pos = vars.pos.as_ref().and_then(|pos_params| {
        pos_head_loss(tape, &pos_params.heads, &states.branch, &encoded.attr_targets)
    });
    let (pos_var, pos_pairs) = match pos {
        Some((v, count)) => (Some(v), count),
        None => (None, 0),
    };

    let total = total_loss(tape, label, structure, pos_var, weights);
    let to_f64 = |v: Var| tape.value(v).item().to_f64().unwrap();
    let parts = LossParts {
        total: to_f64(total),
        label: to_f64(label),
        structure: to_f64(structure),
        pos: pos_var.map(to_f64),
        pos_pairs,
    };
    (total, parts)
}

/// Collect gradients into a parameter-shaped tree, zeros where the loss
/// never reached a parameter.
pub fn gradient_tree<T: Scalar>(
    vars: &Params<Var>,
    grads: &mut Gradients<T>,
    template: &Params<Tensor<T>>,
) -> Params<Tensor<T>> {
    let var_list = vars.named();
    let mut idx = 0;
    template.map(&mut |t| {
        let v = *var_list[idx].1;
        idx += 1;
        grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape()))
    })
}

/// AdaDelta accumulators, one pair per parameter.
pub struct AdaDelta<T> {
    pub rho: f64,
    pub epsilon: f64,
    sq_grad: Params<Tensor<T>>,
    sq_delta: Params<Tensor<T>>,
}

impl<T: Scalar> AdaDelta<T> {
    pub fn new(template: &Params<Tensor<T>>, rho: f64, epsilon: f64) -> Self {
        AdaDelta {
            rho,
            epsilon,
            sq_grad: template.zeros_like(),
            sq_delta: template.zeros_like(),
        }
    }

    /// One update: decay the squared-gradient average, move each parameter
    /// by the ratio of root-mean-square deltas to root-mean-square
    /// gradients, then decay the squared-delta average.
    pub fn step(
        &mut self,
        params: &mut Params<Tensor<T>>,
        grads: &Params<Tensor<T>>,
    ) -> Result<(), TrainingError> {
        let rho = T::from(self.rho).unwrap();
        let rest = T::one() - rho;
        let eps = T::from(self.epsilon).unwrap();
        let mut pn = params.named_mut();
        let gn = grads.named();
        let mut egn = self.sq_grad.named_mut();
        let mut edn = self.sq_delta.named_mut();
        for i in 0..pn.len() {
            let name = &gn[i].0;
            let g = gn[i].1.data();
            let p = pn[i].1.data_mut();
            let eg = egn[i].1.data_mut();
            let ed = edn[i].1.data_mut();
            for j in 0..p.len() {
                let gj = g[j];
                if !gj.is_finite() {
                    return Err(TrainingError::NonFiniteGradient { param: name.clone() });
                }
                eg[j] = rho * eg[j] + rest * gj * gj;
                let delta = -((ed[j] + eps).sqrt() / (eg[j] + eps).sqrt()) * gj;
                ed[j] = rho * ed[j] + rest * delta * delta;
                p[j] += delta;
            }
        }
        Ok(())
    }
}

/// Outcome of one clipping decision.
#[derive(Clone, Copy, Debug)]
pub struct ClipOutcome {
    /// Global gradient norm before clipping.
    pub norm: f64,
    /// Norm after clipping (equals `norm` when unclipped).
    pub clipped_norm: f64,
    pub clipped: bool,
}

/// Adaptive clipping: track an exponential moving average `m` of the global
/// gradient norm and rescale whenever the norm exceeds `factor * m`. The
/// first observed norm seeds the average and is never clipped.
#[derive(Clone, Debug)]
pub struct ClipState {
    pub factor: f64,
    pub decay: f64,
    mean: Option<f64>,
}

impl ClipState {
    pub fn new(factor: f64, decay: f64) -> Self {
        ClipState { factor, decay, mean: None }
    }

    pub fn mean(&self) -> Option<f64> {
        self.mean
    }

    pub fn threshold(&self) -> Option<f64> {
        self.mean.map(|m| self.factor * m)
    }

    pub fn clip<T: Scalar>(&mut self, grads: &mut Params<Tensor<T>>) -> ClipOutcome {
        let mut sq = 0.0f64;
        for (_, g) in grads.named() {
            sq += g.sq_norm().to_f64().unwrap();
        }
        let norm = sq.sqrt();
        let Some(m) = self.mean else {
            self.mean = Some(norm);
            return ClipOutcome { norm, clipped_norm: norm, clipped: false };
        };
        let threshold = self.factor * m;
        let (clipped_norm, clipped) = if norm > threshold && norm > 0.0 {
            let scale = T::from(threshold / norm).unwrap();
            for (_, g) in grads.named_mut() {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
            (threshold, true)
        } else {
            (norm, false)
        };
        self.mean = Some(self.decay * m + (1.0 - self.decay) * clipped_norm);
        ClipOutcome { norm, clipped_norm, clipped }
    }
}

/// Parse one encoded sentence with fixed parameters; returns the decoded
/// tree and the attention matrix. Labels are chosen by the hard labeler at
/// each decoded head, ties to the lowest label id.
pub fn parse_with_params<T: Scalar>(
    config: &ModelConfig,
    params: &Params<Tensor<T>>,
    char_ids: &[Vec<usize>],
    mode: DecodeMode,
    single_root: bool,
) -> (ParseResult, ScoreMatrix<T>) {
    assert!(!char_ids.is_empty(), "cannot parse an empty sentence");
    let mut tape = Tape::new();
    let vars = params.map(&mut |t| tape.leaf(t.clone()));
    // Evaluation mode: dropout is identity, so the RNG is never consulted.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (h_full, _) = annotate(&mut tape, &vars, config, char_ids, false, &mut rng);
    let matrix = score_matrix(&mut tape, &vars.parser, h_full);
    let pieces = config.scorer.maxout_pieces;
    let result = decode(&matrix, mode, single_root, |w, h| {
        let h_w = tape.row(h_full, w);
        let logits = label_hard(
            &mut tape,
            &vars.parser,
            pieces,
            h,
            h_full,
            h_w,
            T::zero(),
            false,
            &mut rng,
        );
        let data = tape.value(logits).data();
        let mut best = 0;
        for (i, &v) in data.iter().enumerate() {
            if v > data[best] {
                best = i;
            }
        }
        best
    })
    .expect("sentence is non-empty");
    (result, matrix)
}

/// Parse a corpus in parallel and score it against the gold trees.
pub fn evaluate<T: Scalar>(
    config: &ModelConfig,
    params: &Params<Tensor<T>>,
    lexicon: &Lexicon,
    gold: &[Sentence],
    mode: DecodeMode,
    single_root: bool,
    exclude_punct: bool,
) -> Result<(EvalReport, Vec<ParseResult>), MetricsError> {
    let preds: Vec<ParseResult> = gold
        .par_iter()
        .map(|s| {
            if s.is_empty() {
                return ParseResult { heads: Vec::new(), labels: Vec::new(), used_fallback: false };
            }
            let char_ids: Vec<Vec<usize>> =
                s.tokens.iter().map(|t| lexicon.encode_word(&t.form)).collect();
            parse_with_params(config, params, &char_ids, mode, single_root).0
        })
        .collect();
    let report = attachment_scores(gold, &preds, lexicon, exclude_punct)?;
    Ok((report, preds))
}

/// Loop controls; architecture lives in `ModelConfig`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub weights: LossWeights,
    pub rho: f64,
    pub epsilon: f64,
    pub clip_factor: f64,
    pub clip_decay: f64,
    pub max_epochs: usize,
    /// Stop after this many consecutive dev evaluations without a new best
    /// UAS. 0 stops at the first non-improvement.
    pub patience: usize,
    pub decode: DecodeMode,
    pub single_root: bool,
    pub exclude_punct: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            weights: LossWeights::default(),
            rho: 0.95,
            epsilon: 1e-8,
            clip_factor: 2.0,
            clip_decay: 0.99,
            max_epochs: 200,
            patience: 10,
            decode: DecodeMode::GreedyThenCle,
            single_root: false,
            exclude_punct: false,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, Serialize)]
pub struct TrainLogRecord {
    pub epoch: usize,
    /// Mean per-sentence weighted loss.
    pub loss: f64,
    pub label_loss: f64,
    pub structure_loss: f64,
    /// Mean over sentences that had supervised POS pairs; absent otherwise.
    pub pos_loss: Option<f64>,
    pub dev_la: f64,
    pub dev_uas: f64,
    pub dev_las: f64,
    pub grad_norm_mean: f64,
    pub grad_norm_max: f64,
    pub clipped_updates: usize,
    pub improved: bool,
}

#[derive(Debug)]
pub struct TrainOutcome<T> {
    /// Model with the best development UAS seen.
    pub model: Model<T>,
    pub log: Vec<TrainLogRecord>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_uas: f64,
    /// Training sentences dropped for tree violations.
    pub dropped_sentences: usize,
}

/// Train a fresh model: build the lexicon from the training split, run
/// per-sentence AdaDelta updates, evaluate dev UAS every epoch, and keep the
/// best parameters. With an empty dev set the last epoch wins and early
/// stopping is disabled.
pub fn train<T: Scalar>(
    config: ModelConfig,
    train_corpus: &[Sentence],
    dev_corpus: &[Sentence],
    seed: u64,
    options: &TrainOptions,
    on_epoch: &mut dyn FnMut(&TrainLogRecord),
) -> Result<TrainOutcome<T>, TrainingError> {
    let mut kept: Vec<&Sentence> = Vec::new();
    let mut dropped = 0usize;
    for s in train_corpus {
        if s.is_empty() || s.tree_violation().is_some() {
            dropped += 1;
        } else {
            kept.push(s);
        }
    }
    if kept.is_empty() {
        return Err(TrainingError::EmptyCorpus);
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} training sentences with tree violations");
    }
    let owned: Vec<Sentence> = kept.iter().map(|s| (*s).clone()).collect();
    let lexicon = Lexicon::build(&owned)?;
    let mut model: Model<T> = Model::new(config, lexicon, seed)?;
    let encoded: Vec<EncodedSentence> =
        owned.iter().map(|s| model.lexicon.encode_sentence(s)).collect();
    let dev: Vec<Sentence> = dev_corpus.iter().filter(|s| !s.is_empty()).cloned().collect();

    let mut optimizer = AdaDelta::new(&model.params, options.rho, options.epsilon);
    let mut clip = ClipState::new(options.clip_factor, options.clip_decay);
    // Separate stream from the init draws so adding parameters to the model
    // does not shift training-time randomness.
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x517c_c1b7_2722_0a95));

    let mut log = Vec::new();
    let mut best_params = model.params.clone();
    let mut best_uas = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut bad_evals = 0usize;
    let mut epochs_run = 0usize;

    let mut order: Vec<usize> = (0..encoded.len()).collect();
    for epoch in 1..=options.max_epochs {
        epochs_run = epoch;
        order.shuffle(&mut rng);
        let mut totals = 0.0;
        let mut labels = 0.0;
        let mut structures = 0.0;
        let mut pos_sum = 0.0;
        let mut pos_sentences = 0usize;
        let mut norm_sum = 0.0;
        let mut norm_max = 0.0f64;
        let mut clipped_updates = 0usize;
        for &idx in &order {
            let mut tape = Tape::new();
            let vars = model.params.map(&mut |t| tape.leaf(t.clone()));
            let (loss, parts) = sentence_loss(
                &mut tape,
                &vars,
                &model.config,
                &encoded[idx],
                &options.weights,
                true,
                &mut rng,
            );
            let mut grads = tape.backward(loss);
            let mut tree = gradient_tree(&vars, &mut grads, &model.params);
            let outcome = clip.clip(&mut tree);
            optimizer.step(&mut model.params, &tree)?;
            totals += parts.total;
            labels += parts.label;
            structures += parts.structure;
            if let Some(p) = parts.pos {
                pos_sum += p;
                pos_sentences += 1;
            }
            norm_sum += outcome.norm;
            norm_max = norm_max.max(outcome.norm);
            clipped_updates += outcome.clipped as usize;
        }
        let sentences = encoded.len() as f64;

        let (report, _) = evaluate(
            &model.config,
            &model.params,
            &model.lexicon,
            &dev,
            options.decode,
            options.single_root,
            options.exclude_punct,
        )?;
        let improved = if dev.is_empty() {
            true
        } else {
            report.uas() > best_uas
        };
        if improved {
            best_uas = report.uas();
            best_epoch = epoch;
            best_params = model.params.clone();
            bad_evals = 0;
        } else {
            bad_evals += 1;
        }

        let record = TrainLogRecord {
            epoch,
            loss: totals / sentences,
            label_loss: labels / sentences,
            structure_loss: structures / sentences,
            pos_loss: (pos_sentences > 0).then(|| pos_sum / pos_sentences as f64),
            dev_la: report.la(),
            dev_uas: report.uas(),
            dev_las: report.las(),
            grad_norm_mean: norm_sum / sentences,
            grad_norm_max: norm_max,
            clipped_updates,
            improved,
        };
        on_epoch(&record);
        log.push(record);

        if !dev.is_empty() && bad_evals > options.patience {
            break;
        }
    }

    model.params = best_params;
    Ok(TrainOutcome {
        model,
        log,
        epochs_run,
        best_epoch,
        best_uas: if best_uas.is_finite() { best_uas } else { 0.0 },
        dropped_sentences: dropped,
    })
}
