//! Pointer-network parsing head.
//!
//! Every word's head location is scored by a small feed-forward network over
//! the pair of annotations, normalized with a softmax over locations 0..n
//! (0 is the artificial root, represented by a learned vector). Labels come
//! from a maxout network fed either the expected head annotation under the
//! attention row (soft) or the annotation at one chosen location (hard).

use rand::Rng;

use crate::model::ParserParams;
use crate::tensor::{Tape, Tensor, Var};
use crate::Scalar;

/// Row-stochastic head-location probabilities: row w-1 is word w's
/// distribution over locations 0..n.
#[derive(Clone, Debug)]
pub struct ScoreMatrix<T> {
    probs: Tensor<T>,
}

impl<T: Scalar> ScoreMatrix<T> {
    pub fn new(probs: Tensor<T>) -> Self {
        debug_assert_eq!(probs.rank(), 2);
        debug_assert_eq!(probs.cols(), probs.rows() + 1);
        ScoreMatrix { probs }
    }

    /// Number of words.
    pub fn n(&self) -> usize {
        self.probs.rows()
    }

    /// Probability that word `w` (1-based) attaches at location `l` (0..n).
    pub fn prob(&self, w: usize, l: usize) -> T {
        self.probs.at2(w - 1, l)
    }

    pub fn row(&self, w: usize) -> &[T] {
        self.probs.row_slice(w - 1)
    }

    pub fn probs(&self) -> &Tensor<T> {
        &self.probs
    }

    /// Tab-separated dump with location headers and one labeled row per
    /// word, for eyeballing attention patterns.
    pub fn to_tsv(&self, forms: &[String]) -> String {
        assert_eq!(forms.len(), self.n(), "one form per word");
        let mut out = String::from("form\tROOT");
        for form in forms {
            out.push('\t');
            out.push_str(form);
        }
        out.push('\n');
        for (i, form) in forms.iter().enumerate() {
            out.push_str(form);
            for l in 0..=self.n() {
                out.push('\t');
                out.push_str(&format!("{:.6}", self.probs.at2(i, l).to_f64().unwrap()));
            }
            out.push('\n');
        }
        out
    }
}

/// Annotations with the learned root vector prepended as row 0.
pub fn with_root<T: Scalar>(
    tape: &mut Tape<T>,
    parser: &ParserParams<Var>,
    annotations: &[Var],
) -> Var {
    let stacked = tape.stack_rows(annotations);
    tape.prepend_row(parser.root, stacked)
}

/// Unnormalized score for attaching word `w` at location `l`:
/// linear(tanh(linear(concat(H_w, H_l)))).
pub fn score_pair<T: Scalar>(
    tape: &mut Tape<T>,
    parser: &ParserParams<Var>,
    h_w: Var,
    h_l: Var,
) -> Var {
    let pair = tape.concat_vec(&[h_w, h_l]);
    let pre = tape.vecmat(pair, parser.score_w1);
    let pre = tape.add(pre, parser.score_b1);
    let hid = tape.tanh(pre);
    let prod = tape.mul(hid, parser.score_w2);
    tape.sum(prod)
}

/// Logits over locations 0..n for word `w`, all pairs scored in one batch.
pub fn head_logits<T: Scalar>(
    tape: &mut Tape<T>,
    parser: &ParserParams<Var>,
    h_full: Var,
    w: usize,
) -> Var {
    let rows = tape.value(h_full).rows();
    let h_w = tape.row(h_full, w);
    let repeated = tape.repeat_row(h_w, rows);
    let pairs = tape.concat_cols(repeated, h_full);
    let pre = tape.linear_rows(pairs, parser.score_w1, parser.score_b1);
    let hid = tape.tanh(pre);
    tape.matvec(hid, parser.score_w2)
}

/// Softmax attention row for word `w`. Self-attachment stays in the
/// normalization; decoding excludes it later.
pub fn head_distribution<T: Scalar>(
    tape: &mut Tape<T>,
    parser: &ParserParams<Var>,
    h_full: Var,
    w: usize,
) -> Var {
    let logits = head_logits(tape, parser, h_full, w);
    tape.softmax(logits)
}

/// All attention rows as a plain matrix, for decoding and inspection.
pub fn score_matrix<T: Scalar>(
    tape: &mut Tape<T>,
    parser: &ParserParams<Var>,
    h_full: Var,
) -> ScoreMatrix<T> {
    let n = tape.value(h_full).rows() - 1;
    let mut probs = Tensor::zeros(&[n, n + 1]);
    for w in 1..=n {
        let row = head_distribution(tape, parser, h_full, w);
        for (l, &p) in tape.value(row).data().iter().enumerate() {
            probs.set2(w - 1, l, p);
        }
    }
    ScoreMatrix::new(probs)
}

/// Label logits from the maxout network over concat(H_head, H_w).
#[allow(clippy::too_many_arguments)]
pub fn label_logits<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    parser: &ParserParams<Var>,
    pieces: usize,
    h_head: Var,
    h_w: Var,
    dropout: T,
    train: bool,
    rng: &mut R,
) -> Var {
    let pair = tape.concat_vec(&[h_head, h_w]);
    let pre = tape.linear(parser.label_w1, pair, parser.label_b1);
    let units = tape.maxout(pre, pieces);
    let kept = tape.dropout(units, dropout, train, rng);
    tape.linear(parser.label_w2, kept, parser.label_b2)
}

/// Soft-attention labeler: the head annotation is the expectation of all
/// locations under the attention row, so the label loss reaches the scorer.
#[allow(clippy::too_many_arguments)]
pub fn label_soft<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    parser: &ParserParams<Var>,
    pieces: usize,
    attention_row: Var,
    h_full: Var,
    h_w: Var,
    dropout: T,
    train: bool,
    rng: &mut R,
) -> Var {
    let h_head = tape.vecmat(attention_row, h_full);
    label_logits(tape, parser, pieces, h_head, h_w, dropout, train, rng)
}

/// Hard-attention labeler: the head annotation is taken at one location
/// (gold in training, decoded at eval). The location index is data, not a
/// tape value, so no gradient can reach the scorer through it.
#[allow(clippy::too_many_arguments)]
pub fn label_hard<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    parser: &ParserParams<Var>,
    pieces: usize,
    head_location: usize,
    h_full: Var,
    h_w: Var,
    dropout: T,
    train: bool,
    rng: &mut R,
) -> Var {
    let h_head = tape.row(h_full, head_location);
    label_logits(tape, parser, pieces, h_head, h_w, dropout, train, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Params;
    use crate::tensor::check;
    use crate::testutil;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_annotations(tape: &mut Tape<f64>, n: usize, dim: usize, salt: u64) -> Vec<Var> {
        (0..n)
            .map(|i| {
                tape.leaf(Tensor::vector(
                    (0..dim)
                        .map(|j| (((salt + 1) * (i as u64 * 31 + j as u64 + 7)) as f64 * 0.0137).sin())
                        .collect(),
                ))
            })
            .collect()
    }

    #[test]
    fn zero_weights_score_zero_for_all_pairs() {
        let model = testutil::tiny_model::<f64>(1);
        let mut params = model.params.clone();
        params.parser.score_w1 = Tensor::zeros(params.parser.score_w1.shape());
        params.parser.score_b1 = Tensor::zeros(params.parser.score_b1.shape());
        params.parser.score_w2 = Tensor::zeros(params.parser.score_w2.shape());
        let mut tape = Tape::new();
        let vars = testutil::inject(&mut tape, &params);
        let h = model.config.tagger.hidden;
        let anns = random_annotations(&mut tape, 3, h, 0);
        for &a in &anns {
            for &b in &anns {
                let s = score_pair(&mut tape, &vars.parser, a, b);
                assert_eq!(tape.value(s).item(), 0.0);
            }
        }
    }

    #[test]
    fn score_is_not_symmetric_on_random_parameters() {
        let model = testutil::tiny_model::<f64>(2);
        let mut tape = Tape::new();
        let vars = testutil::inject(&mut tape, &model.params);
        let anns = random_annotations(&mut tape, 2, model.config.tagger.hidden, 1);
        let ab = score_pair(&mut tape, &vars.parser, anns[0], anns[1]);
        let ba = score_pair(&mut tape, &vars.parser, anns[1], anns[0]);
        assert_ne!(tape.value(ab).item(), tape.value(ba).item());
    }

    #[test]
    fn batched_logits_match_pairwise_scores() {
        let model = testutil::tiny_model::<f64>(3);
        let mut tape = Tape::new();
        let vars = testutil::inject(&mut tape, &model.params);
        let anns = random_annotations(&mut tape, 4, model.config.tagger.hidden, 2);
        let h_full = with_root(&mut tape, &vars.parser, &anns);
        for w in 1..=4 {
            let logits = head_logits(&mut tape, &vars.parser, h_full, w);
            let h_w = tape.row(h_full, w);
            for l in 0..=4 {
                let h_l = tape.row(h_full, l);
                let s = score_pair(&mut tape, &vars.parser, h_w, h_l);
                let diff = (tape.value(logits).data()[l] - tape.value(s).item()).abs();
                assert!(diff < 1e-12, "w={w} l={l} diff={diff}");
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one_for_many_lengths() {
        let model = testutil::tiny_model::<f64>(4);
        for n in 1..=20 {
            let mut tape = Tape::new();
            let vars = testutil::inject(&mut tape, &model.params);
            let anns = random_annotations(&mut tape, n, model.config.tagger.hidden, n as u64);
            let h_full = with_root(&mut tape, &vars.parser, &anns);
            let matrix = score_matrix(&mut tape, &vars.parser, h_full);
            assert_eq!(matrix.n(), n);
            for w in 1..=n {
                let sum: f64 = matrix.row(w).iter().sum();
                assert!((sum - 1.0).abs() < 1e-6, "n={n} w={w} sum={sum}");
                assert!(matrix.row(w).iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn single_word_distribution_covers_root_and_self() {
        let model = testutil::tiny_model::<f64>(5);
        let mut tape = Tape::new();
        let vars = testutil::inject(&mut tape, &model.params);
        let anns = random_annotations(&mut tape, 1, model.config.tagger.hidden, 9);
        let h_full = with_root(&mut tape, &vars.parser, &anns);
        let row = head_distribution(&mut tape, &vars.parser, h_full, 1);
        assert_eq!(tape.value(row).len(), 2);
        let sum: f64 = tape.value(row).data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn equal_logits_give_the_uniform_distribution() {
        let model = testutil::tiny_model::<f64>(6);
        let mut params = model.params.clone();
        params.parser.score_w2 = Tensor::zeros(params.parser.score_w2.shape());
        let mut tape = Tape::new();
        let vars = testutil::inject(&mut tape, &params);
        let n = 3;
        let anns = random_annotations(&mut tape, n, model.config.tagger.hidden, 10);
        let h_full = with_root(&mut tape, &vars.parser, &anns);
        let row = head_distribution(&mut tape, &vars.parser, h_full, 2);
        for &p in tape.value(row).data() {
            assert!((p - 1.0 / (n as f64 + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_with_one_hot_row_equals_hard_bitwise() {
        let model = testutil::tiny_model::<f64>(7);
        let mut tape = Tape::new();
        let vars = testutil::inject(&mut tape, &model.params);
        let anns = random_annotations(&mut tape, 3, model.config.tagger.hidden, 11);
        let h_full = with_root(&mut tape, &vars.parser, &anns);
        let h_w = tape.row(h_full, 2);
        let pieces = model.config.scorer.maxout_pieces;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for loc in 0..=3 {
            let mut one_hot = vec![0.0; 4];
            one_hot[loc] = 1.0;
            let row = tape.leaf(Tensor::vector(one_hot));
            let soft = label_soft(
                &mut tape, &vars.parser, pieces, row, h_full, h_w, 0.0, false, &mut rng,
            );
            let hard = label_hard(
                &mut tape, &vars.parser, pieces, loc, h_full, h_w, 0.0, false, &mut rng,
            );
            assert_eq!(tape.value(soft).data(), tape.value(hard).data());
        }
    }

    #[test]
    fn uniform_row_over_identical_annotations_matches_one_hot() {
        let model = testutil::tiny_model::<f64>(8);
        let mut tape = Tape::new();
        let vars = testutil::inject(&mut tape, &model.params);
        let h = model.config.tagger.hidden;
        let same = Tensor::vector((0..h).map(|j| (j as f64 * 0.3).cos()).collect());
        let a = tape.leaf(same.clone());
        let b = tape.leaf(same);
        let other = tape.leaf(Tensor::vector((0..h).map(|j| 0.05 * j as f64).collect()));
        let h_full = with_root(&mut tape, &vars.parser, &[a, b, other]);
        let h_w = tape.row(h_full, 3);
        let pieces = model.config.scorer.maxout_pieces;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // Locations 1 and 2 hold identical annotations.
        let uniform = tape.leaf(Tensor::vector(vec![0.0, 0.5, 0.5, 0.0]));
        let one_hot = tape.leaf(Tensor::vector(vec![0.0, 1.0, 0.0, 0.0]));
        let u = label_soft(
            &mut tape, &vars.parser, pieces, uniform, h_full, h_w, 0.0, false, &mut rng,
        );
        let o = label_soft(
            &mut tape, &vars.parser, pieces, one_hot, h_full, h_w, 0.0, false, &mut rng,
        );
        for (x, y) in tape.value(u).data().iter().zip(tape.value(o).data().iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn label_distribution_sums_to_one() {
        let model = testutil::tiny_model::<f64>(9);
        let mut tape = Tape::new();
        let vars = testutil::inject(&mut tape, &model.params);
        let anns = random_annotations(&mut tape, 2, model.config.tagger.hidden, 12);
        let h_full = with_root(&mut tape, &vars.parser, &anns);
        let h_w = tape.row(h_full, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = label_hard(
            &mut tape,
            &vars.parser,
            model.config.scorer.maxout_pieces,
            0,
            h_full,
            h_w,
            0.0,
            false,
            &mut rng,
        );
        let dist = tape.softmax(logits);
        let sum: f64 = tape.value(dist).data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn hard_label_loss_never_reaches_the_scorer() {
        let model = testutil::tiny_model::<f64>(10);
        let mut tape = Tape::new();
        let vars = testutil::inject(&mut tape, &model.params);
        let anns = random_annotations(&mut tape, 3, model.config.tagger.hidden, 13);
        let h_full = with_root(&mut tape, &vars.parser, &anns);
        let h_w = tape.row(h_full, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = label_hard(
            &mut tape,
            &vars.parser,
            model.config.scorer.maxout_pieces,
            2,
            h_full,
            h_w,
            0.0,
            true,
            &mut rng,
        );
        let loss = tape.cross_entropy(logits, 0);
        let grads = tape.backward(loss);
        assert!(grads.get(vars.parser.score_w1).is_none());
        assert!(grads.get(vars.parser.score_b1).is_none());
        assert!(grads.get(vars.parser.score_w2).is_none());
        // The annotations themselves still learn.
        assert!(grads.get(anns[0]).is_some());
        assert!(grads.get(vars.parser.label_w1).is_some());
    }

    #[test]
    fn soft_label_loss_does_reach_the_scorer() {
        let model = testutil::tiny_model::<f64>(11);
        let mut tape = Tape::new();
        let vars = testutil::inject(&mut tape, &model.params);
        let anns = random_annotations(&mut tape, 3, model.config.tagger.hidden, 14);
        let h_full = with_root(&mut tape, &vars.parser, &anns);
        let h_w = tape.row(h_full, 1);
        let row = head_distribution(&mut tape, &vars.parser, h_full, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = label_soft(
            &mut tape,
            &vars.parser,
            model.config.scorer.maxout_pieces,
            row,
            h_full,
            h_w,
            0.0,
            true,
            &mut rng,
        );
        let loss = tape.cross_entropy(logits, 0);
        let grads = tape.backward(loss);
        let g = grads.get(vars.parser.score_w1).expect("soft path must reach the scorer");
        assert!(g.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn scorer_gradient_matches_finite_differences() {
        let model = testutil::tiny_model::<f64>(12);
        let forward = |params: &Params<Tensor<f64>>| -> (f64, Vec<Tensor<f64>>) {
            let mut tape = Tape::new();
            let vars = testutil::inject(&mut tape, params);
            let anns = random_annotations(&mut tape, 3, model.config.tagger.hidden, 15);
            let h_full = with_root(&mut tape, &vars.parser, &anns);
            let mut parts = Vec::new();
            for w in 1..=3 {
                let logits = head_logits(&mut tape, &vars.parser, h_full, w);
                parts.push(tape.cross_entropy(logits, (w - 1) % 4));
            }
            let loss = tape.mean_of(&parts);
            let grads = tape.backward(loss);
            (tape.value(loss).item(), testutil::grads_flat(&vars, &grads, params))
        };
        let (_, analytic) = forward(&model.params);
        let flat = testutil::flat_tensors(&model.params);
        let worst = check::max_rel_err(
            &flat,
            &analytic,
            |p| forward(&testutil::from_flat(&model.params, p)).0,
            1e-5,
        );
        assert!(worst.rel_err < 1e-4, "worst: {:?}", worst);
    }

    #[test]
    fn both_labelers_pass_finite_difference_checks() {
        let model = testutil::tiny_model::<f64>(13);
        for soft in [false, true] {
            let forward = |params: &Params<Tensor<f64>>| -> (f64, Vec<Tensor<f64>>) {
                let mut tape = Tape::new();
                let vars = testutil::inject(&mut tape, params);
                let anns = random_annotations(&mut tape, 3, model.config.tagger.hidden, 16);
                let h_full = with_root(&mut tape, &vars.parser, &anns);
                let h_w = tape.row(h_full, 1);
                let mut rng = ChaCha8Rng::seed_from_u64(1);
                let pieces = model.config.scorer.maxout_pieces;
                let logits = if soft {
                    let row = head_distribution(&mut tape, &vars.parser, h_full, 1);
                    label_soft(
                        &mut tape, &vars.parser, pieces, row, h_full, h_w, 0.0, true, &mut rng,
                    )
                } else {
                    label_hard(
                        &mut tape, &vars.parser, pieces, 2, h_full, h_w, 0.0, true, &mut rng,
                    )
                };
                let loss = tape.cross_entropy(logits, 1);
                let grads = tape.backward(loss);
                (tape.value(loss).item(), testutil::grads_flat(&vars, &grads, params))
            };
            let (_, analytic) = forward(&model.params);
            let flat = testutil::flat_tensors(&model.params);
            let worst = check::max_rel_err(
                &flat,
                &analytic,
                |p| forward(&testutil::from_flat(&model.params, p)).0,
                1e-5,
            );
            assert!(worst.rel_err < 1e-4, "soft={soft} worst: {:?}", worst);
        }
    }

    #[test]
    fn tsv_dump_labels_rows_by_form() {
        let model = testutil::tiny_model::<f64>(14);
        let mut tape = Tape::new();
        let vars = testutil::inject(&mut tape, &model.params);
        let anns = random_annotations(&mut tape, 2, model.config.tagger.hidden, 17);
        let h_full = with_root(&mut tape, &vars.parser, &anns);
        let matrix = score_matrix(&mut tape, &vars.parser, h_full);
        let tsv = matrix.to_tsv(&["kot".to_string(), "ma".to_string()]);
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("form\tROOT\tkot\tma"));
        assert!(lines[1].starts_with("kot\t"));
        assert_eq!(lines[1].split('\t').count(), 4);
    }
}
