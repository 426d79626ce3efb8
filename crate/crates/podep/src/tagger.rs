//! Sentence contextualizer: stacked bidirectional GRU layers whose two
//! directions are fused by addition, plus the auxiliary POS attribute head.
//!
//! The POS head branches off a configurable layer (default: the penultimate
//! point), so its loss adjusts the lower layers and the reader but leaves
//! everything above the branch untouched.

use rand::Rng;

use crate::model::{AttrHead, BiGruParams, GruParams, TaggerConfig, TaggerParams};
use crate::tensor::{Tape, Var};
use crate::Scalar;

/// One GRU update:
/// z = sigmoid(W_z x + U_z h + b_z), r = sigmoid(W_r x + U_r h + b_r),
/// candidate = tanh(W x + U(r*h) + b), next = (1-z)*h + z*candidate.
pub fn gru_step<T: Scalar>(tape: &mut Tape<T>, p: &GruParams<Var>, x: Var, h: Var) -> Var {
    let one = T::one();
    let wz = tape.matvec(p.w_z, x);
    let uz = tape.matvec(p.u_z, h);
    let z_pre = tape.add_n(&[wz, uz, p.b_z]);
    let z = tape.sigmoid(z_pre);

    let wr = tape.matvec(p.w_r, x);
    let ur = tape.matvec(p.u_r, h);
    let r_pre = tape.add_n(&[wr, ur, p.b_r]);
    let r = tape.sigmoid(r_pre);

    let gated = tape.mul(r, h);
    let wc = tape.matvec(p.w_c, x);
    let uc = tape.matvec(p.u_c, gated);
    let c_pre = tape.add_n(&[wc, uc, p.b_c]);
    let candidate = tape.tanh(c_pre);

    let neg_z = tape.scalar_mul(z, -one);
    let one_minus_z = tape.add_scalar(neg_z, one);
    let keep = tape.mul(one_minus_z, h);
    let update = tape.mul(z, candidate);
    tape.add(keep, update)
}

/// One bidirectional layer. Both directions start from their learned initial
/// states; output_t = forward_state_t + backward_state_t.
pub fn bigru_layer<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BiGruParams<Var>,
    inputs: &[Var],
) -> Vec<Var> {
    assert!(!inputs.is_empty(), "bigru_layer: empty sequence");
    let n = inputs.len();
    let mut fwd = Vec::with_capacity(n);
    let mut h = p.fwd.h0;
    for &x in inputs {
        h = gru_step(tape, &p.fwd, x, h);
        fwd.push(h);
    }
    let mut bwd = vec![fwd[0]; n];
    let mut h = p.bwd.h0;
    for (t, &x) in inputs.iter().enumerate().rev() {
        h = gru_step(tape, &p.bwd, x, h);
        bwd[t] = h;
    }
    (0..n).map(|t| tape.add(fwd[t], bwd[t])).collect()
}

/// Per-token states of the full tagger stack.
pub struct TaggerStates {
    /// Final layer outputs, the parser's annotations.
    pub annotations: Vec<Var>,
    /// States at the POS branch point.
    pub branch: Vec<Var>,
}

/// Run the stack. `embeddings` must already carry the reader dropout; this
/// function applies the recurrent dropout after every layer's output. Branch
/// point 0 is the (post-dropout) embeddings themselves.
pub fn tagger_forward<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    params: &TaggerParams<Var>,
    config: &TaggerConfig,
    embeddings: &[Var],
    rnn_dropout: T,
    train: bool,
    rng: &mut R,
) -> TaggerStates {
    let branch_at = config.branch_layer();
    let mut states: Vec<Var> = embeddings.to_vec();
    let mut branch = if branch_at == 0 { Some(states.clone()) } else { None };
    for (l, layer) in params.layers.iter().enumerate() {
        states = bigru_layer(tape, layer, &states);
        for s in &mut states {
            *s = tape.dropout(*s, rnn_dropout, train, rng);
        }
        if l + 1 == branch_at {
            branch = Some(states.clone());
        }
    }
    let branch = branch.expect("branch layer beyond stack; config not validated");
    TaggerStates { annotations: states, branch }
}

/// Independent categorical losses for every supervised (token, attribute)
/// pair at the branch point: summed over attributes, averaged over the pair
/// count. `None` when nothing is supervised.
pub fn pos_head_loss<T: Scalar>(
    tape: &mut Tape<T>,
    heads: &[AttrHead<Var>],
    branch: &[Var],
    targets: &[Vec<Option<usize>>],
) -> Option<(Var, usize)> {
    assert_eq!(heads.len(), targets.len(), "one target row per attribute");
    let mut losses = Vec::new();
    for (head, token_targets) in heads.iter().zip(targets.iter()) {
        assert_eq!(token_targets.len(), branch.len(), "one target slot per token");
        for (t, target) in token_targets.iter().enumerate() {
            if let Some(class) = target {
                let logits = tape.linear(head.w, branch[t], head.b);
                losses.push(tape.cross_entropy(logits, *class));
            }
        }
    }
    if losses.is_empty() {
        return None;
    }
    let count = losses.len();
    Some((tape.mean_of(&losses), count))
}

/// Distribution over one attribute's values for one token.
pub fn pos_head_distribution<T: Scalar>(
    tape: &mut Tape<T>,
    head: &AttrHead<Var>,
    state: Var,
) -> Var {
    let logits = tape.linear(head.w, state, head.b);
    tape.softmax(logits)
}
