//! Character-level word reader: embedding lookup, convolutional filterbank
//! with max-over-time pooling, linear projection, and a highway stack.
//!
//! The output embedding has the same size for every word, so downstream
//! layers never see word length.

use crate::lexicon::PAD;
use crate::model::{ConvBank, HighwayParams, ReaderParams};
use crate::tensor::{Tape, Var};
use crate::Scalar;

/// Look up character embeddings as matrix columns: column `j` is the
/// embedding of `char_ids[j]`.
pub fn embed_chars<T: Scalar>(tape: &mut Tape<T>, table: Var, char_ids: &[usize]) -> Var {
    tape.embed_cols(table, char_ids)
}

/// Filterbank responses: for each filter, `max_t tanh(window_t . filter + b)`.
/// The character matrix must be at least as long as the widest filter.
pub fn filter_responses<T: Scalar>(
    tape: &mut Tape<T>,
    banks: &[ConvBank<Var>],
    chars: Var,
) -> Var {
    let per_bank: Vec<Var> = banks
        .iter()
        .map(|b| {
            let conv = tape.conv_over_time(b.bank, chars, b.width);
            let biased = tape.add_col_broadcast(conv, b.bias);
            let activated = tape.tanh(biased);
            tape.max_over_time(activated)
        })
        .collect();
    tape.concat_vec(&per_bank)
}

fn highway<T: Scalar>(tape: &mut Tape<T>, p: &HighwayParams<Var>, x: Var) -> Var {
    let gate_pre = tape.linear(p.w_t, x, p.b_t);
    let t = tape.sigmoid(gate_pre);
    let h_pre = tape.linear(p.w_h, x, p.b_h);
    let h = tape.tanh(h_pre);
    let carry = tape.scalar_mul(t, -T::one());
    let one_minus_t = tape.add_scalar(carry, T::one());
    let transformed = tape.mul(t, h);
    let passed = tape.mul(one_minus_t, x);
    tape.add(transformed, passed)
}

/// Full reader: fenced character ids to the word embedding.
///
/// Words whose fenced length is below the widest filter are right-padded
/// with PAD ids so every filter sees at least one window.
pub fn reader_forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ReaderParams<Var>,
    char_ids: &[usize],
) -> Var {
    let max_width = params.banks.iter().map(|b| b.width).max().expect("no filter banks");
    let mut ids = char_ids.to_vec();
    while ids.len() < max_width {
        ids.push(PAD);
    }
    let chars = embed_chars(tape, params.char_table, &ids);
    let responses = filter_responses(tape, &params.banks, chars);
    let projected = tape.vecmat(responses, params.proj_w);
    let mut x = tape.add(projected, params.proj_b);
    for layer in &params.highway {
        x = highway(tape, layer, x);
    }
    x
}
