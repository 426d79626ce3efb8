//! Tree decoding: greedy argmax, cycle detection, and maximum spanning
//! arborescence (Chu-Liu-Edmonds).
//!
//! Greedy decoding picks each word's best location independently, which is
//! almost always a tree already; the spanning-arborescence solver repairs the
//! rare cyclic outputs. Arborescence search runs on log-probabilities so the
//! product of row probabilities becomes a sum.

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parser_head::ScoreMatrix;
use crate::tensor::Tensor;
use crate::Scalar;

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("cannot decode an empty sentence")]
    EmptySentence,
}

/// How to turn a score matrix into heads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    /// Independent argmax per word; may contain cycles.
    Greedy,
    /// Greedy first, full arborescence search only when a cycle appears.
    #[default]
    GreedyThenCle,
    /// Always run the arborescence search.
    Cle,
}

impl FromStr for DecodeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "greedy" => Ok(DecodeMode::Greedy),
            "greedy_then_cle" => Ok(DecodeMode::GreedyThenCle),
            "cle" => Ok(DecodeMode::Cle),
            other => Err(format!(
                "unknown decode mode '{other}' (expected greedy, greedy_then_cle, or cle)"
            )),
        }
    }
}

impl std::fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            DecodeMode::Greedy => "greedy",
            DecodeMode::GreedyThenCle => "greedy_then_cle",
            DecodeMode::Cle => "cle",
        };
        write!(f, "{name}")
    }
}

/// One decoded sentence: heads[w-1] is word w's location in 0..n, labels in
/// step with heads. `used_fallback` marks greedy outputs repaired by the
/// arborescence search.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseResult {
    pub heads: Vec<usize>,
    pub labels: Vec<usize>,
    pub used_fallback: bool,
}

/// Per-word argmax over locations, self-attachment excluded, ties to the
/// lowest location.
pub fn greedy_decode<T: Scalar>(p: &ScoreMatrix<T>) -> Vec<usize> {
    let n = p.n();
    let mut heads = Vec::with_capacity(n);
    for w in 1..=n {
        let row = p.row(w);
        let mut best = 0;
        for l in 0..=n {
            if l == w {
                continue;
            }
            if row[l] > row[best] {
                best = l;
            }
        }
        heads.push(best);
    }
    heads
}

/// Cycles in the head function, each reported as its sorted vertex set of
/// 1-based word ids. Acyclic input rooted at 0 gives an empty list.
pub fn find_cycles(heads: &[usize]) -> Vec<Vec<usize>> {
    let n = heads.len();
    // 0 = unvisited, 1 = on the current walk, 2 = settled.
    let mut state = vec![0u8; n + 1];
    state[0] = 2;
    let mut cycles = Vec::new();
    for start in 1..=n {
        if state[start] != 0 {
            continue;
        }
        let mut walk = Vec::new();
        let mut v = start;
        while state[v] == 0 {
            state[v] = 1;
            walk.push(v);
            v = heads[v - 1];
        }
        if state[v] == 1 {
            // v is on the current walk: everything from v onward is a cycle.
            let at = walk.iter().position(|&u| u == v).unwrap();
            let mut cycle: Vec<usize> = walk[at..].to_vec();
            cycle.sort_unstable();
            cycles.push(cycle);
        }
        for u in walk {
            state[u] = 2;
        }
    }
    cycles
}

/// True when heads form an arborescence rooted at 0: in range, no
/// self-attachment, no cycles.
pub fn is_valid_tree(heads: &[usize]) -> bool {
    let n = heads.len();
    for (i, &h) in heads.iter().enumerate() {
        if h > n || h == i + 1 {
            return false;
        }
    }
    find_cycles(heads).is_empty()
}

/// Maximum spanning arborescence over an n x (n+1) log-score matrix
/// (row w-1 scores word w against locations 0..n). With `single_root`, the
/// best tree with exactly one root child is found by decoding once per
/// candidate child.
// Index loops mirror the head/dependent matrix notation.
#[allow(clippy::needless_range_loop)]
pub fn cle_decode<T: Scalar>(
    scores: &Tensor<T>,
    single_root: bool,
) -> Result<Vec<usize>, DecoderError> {
    let n = scores.rows();
    if n == 0 {
        return Err(DecoderError::EmptySentence);
    }
    debug_assert_eq!(scores.cols(), n + 1);
    // Square head-major copy in f64: square[h][d] scores arc h -> d.
    let mut square = vec![vec![f64::NEG_INFINITY; n + 1]; n + 1];
    for d in 1..=n {
        for h in 0..=n {
            square[h][d] = scores.at2(d - 1, h).to_f64().unwrap();
        }
    }
    if !single_root {
        return Ok(run_cle(&square));
    }
    const FORBIDDEN: f64 = -1e18;
    let total = |heads: &[usize]| -> f64 {
        heads
            .iter()
            .enumerate()
            .map(|(i, &h)| scores.at2(i, h).to_f64().unwrap())
            .sum()
    };
    let mut best: Option<(Vec<usize>, f64)> = None;
    for candidate in 1..=n {
        let mut forced = square.clone();
        for d in 1..=n {
            if d != candidate {
                forced[0][d] = FORBIDDEN;
            }
        }
        let heads = run_cle(&forced);
        let score = total(&heads);
        if best.as_ref().is_none_or(|(_, s)| score > *s) {
            best = Some((heads, score));
        }
    }
    Ok(best.unwrap().0)
}

fn run_cle(square: &[Vec<f64>]) -> Vec<usize> {
    let length = square.len();
    let mut score_matrix: Vec<Vec<f64>> = square.to_vec();
    let mut old_input = vec![vec![0usize; length]; length];
    let mut old_output = vec![vec![0usize; length]; length];
    let mut current_nodes = vec![true; length];
    let mut representatives: Vec<BTreeSet<usize>> = Vec::with_capacity(length);
    for node1 in 0..length {
        score_matrix[node1][node1] = 0.0;
        representatives.push(BTreeSet::from([node1]));
        for node2 in node1 + 1..length {
            old_input[node1][node2] = node1;
            old_output[node1][node2] = node2;
            old_input[node2][node1] = node2;
            old_output[node2][node1] = node1;
        }
    }
    let mut final_edges = BTreeMap::new();
    contract(
        length,
        &mut score_matrix,
        &mut current_nodes,
        &mut final_edges,
        &mut old_input,
        &mut old_output,
        &mut representatives,
    );
    (1..length).map(|d| final_edges[&d]).collect()
}

/// One round of greedy selection plus cycle contraction, recursing until the
/// selection is a tree, then expanding contractions on the way out.
fn contract(
    length: usize,
    score_matrix: &mut Vec<Vec<f64>>,
    current_nodes: &mut Vec<bool>,
    final_edges: &mut BTreeMap<usize, usize>,
    old_input: &mut Vec<Vec<usize>>,
    old_output: &mut Vec<Vec<usize>>,
    representatives: &mut Vec<BTreeSet<usize>>,
) {
    // Greedy best incoming edge per active node.
    let mut parents = vec![usize::MAX; length];
    for node1 in 1..length {
        if !current_nodes[node1] {
            continue;
        }
        parents[node1] = 0;
        let mut max_score = score_matrix[0][node1];
        for node2 in 1..length {
            if node2 == node1 || !current_nodes[node2] {
                continue;
            }
            if score_matrix[node2][node1] > max_score {
                max_score = score_matrix[node2][node1];
                parents[node1] = node2;
            }
        }
    }

    let cycle = selection_cycle(&parents, length, current_nodes);
    let cycle = match cycle {
        None => {
            for node in 1..length {
                if !current_nodes[node] {
                    continue;
                }
                let parent = old_input[parents[node]][node];
                let child = old_output[parents[node]][node];
                final_edges.insert(child, parent);
            }
            return;
        }
        Some(c) => c,
    };

    let cycle_weight: f64 = cycle.iter().map(|&v| score_matrix[parents[v]][v]).sum();
    let rep = cycle[0];
    let in_cycle = |v: usize| cycle.contains(&v);

    // Collapse the cycle into its first vertex: best edge into the cycle and
    // best edge out of it, remembering which original arcs they stand for.
    for node in 0..length {
        if !current_nodes[node] || in_cycle(node) {
            continue;
        }
        let mut in_weight = f64::NEG_INFINITY;
        let mut in_edge = rep;
        let mut out_weight = f64::NEG_INFINITY;
        let mut out_edge = rep;
        for &v in &cycle {
            if score_matrix[v][node] > in_weight {
                in_weight = score_matrix[v][node];
                in_edge = v;
            }
            // Attaching the cycle at v keeps all cycle arcs except v's.
            let score = cycle_weight + score_matrix[node][v] - score_matrix[parents[v]][v];
            if score > out_weight {
                out_weight = score;
                out_edge = v;
            }
        }
        score_matrix[rep][node] = in_weight;
        old_input[rep][node] = old_input[in_edge][node];
        old_output[rep][node] = old_output[in_edge][node];
        score_matrix[node][rep] = out_weight;
        old_input[node][rep] = old_input[node][out_edge];
        old_output[node][rep] = old_output[node][out_edge];
    }

    let mut considered: Vec<BTreeSet<usize>> = Vec::with_capacity(cycle.len());
    for (i, &v) in cycle.iter().enumerate() {
        considered.push(representatives[v].clone());
        if i > 0 {
            current_nodes[v] = false;
            let merged: Vec<usize> = representatives[v].iter().copied().collect();
            for m in merged {
                representatives[rep].insert(m);
            }
        }
    }

    contract(
        length,
        score_matrix,
        current_nodes,
        final_edges,
        old_input,
        old_output,
        representatives,
    );

    // Expansion: find which cycle vertex the outer solution attached, then
    // restore every cycle arc except the one into that vertex.
    let mut key_node = rep;
    'outer: for (i, &v) in cycle.iter().enumerate() {
        for r in &considered[i] {
            if final_edges.contains_key(r) {
                key_node = v;
                break 'outer;
            }
        }
    }
    let mut previous = parents[key_node];
    while previous != key_node {
        let child = old_output[parents[previous]][previous];
        let parent = old_input[parents[previous]][previous];
        final_edges.insert(child, parent);
        previous = parents[previous];
    }
}

/// First cycle in the greedy selection over active nodes, as the vertex list
/// in walk order.
fn selection_cycle(
    parents: &[usize],
    length: usize,
    current_nodes: &[bool],
) -> Option<Vec<usize>> {
    let mut added = vec![false; length];
    added[0] = true;
    for start in 1..length {
        if added[start] || !current_nodes[start] {
            continue;
        }
        let mut walk = vec![start];
        let mut on_walk = vec![false; length];
        on_walk[start] = true;
        let mut v = start;
        loop {
            let p = parents[v];
            if p == 0 || added[p] {
                break;
            }
            if on_walk[p] {
                let at = walk.iter().position(|&u| u == p).unwrap();
                return Some(walk[at..].to_vec());
            }
            walk.push(p);
            on_walk[p] = true;
            v = p;
        }
        for u in walk {
            added[u] = true;
        }
    }
    None
}

/// Decode heads by `mode`, then assign each word the label chosen by
/// `label_at(word, head_location)`.
pub fn decode<T: Scalar, F>(
    p: &ScoreMatrix<T>,
    mode: DecodeMode,
    single_root: bool,
    mut label_at: F,
) -> Result<ParseResult, DecoderError>
where
    F: FnMut(usize, usize) -> usize,
{
    if p.n() == 0 {
        return Err(DecoderError::EmptySentence);
    }
    let (heads, used_fallback) = match mode {
        DecodeMode::Greedy => (greedy_decode(p), false),
        DecodeMode::GreedyThenCle => {
            let greedy = greedy_decode(p);
            if find_cycles(&greedy).is_empty() && !(single_root && !single_rooted(&greedy)) {
                (greedy, false)
            } else {
                (cle_decode(&log_probs(p), single_root)?, true)
            }
        }
        DecodeMode::Cle => (cle_decode(&log_probs(p), single_root)?, false),
    };
    let labels = heads
        .iter()
        .enumerate()
        .map(|(i, &h)| label_at(i + 1, h))
        .collect();
    Ok(ParseResult {
        heads,
        labels,
        used_fallback,
    })
}

fn single_rooted(heads: &[usize]) -> bool {
    heads.iter().filter(|&&h| h == 0).count() == 1
}

/// Elementwise log of the attention rows, floored away from -inf.
pub fn log_probs<T: Scalar>(p: &ScoreMatrix<T>) -> Tensor<f64> {
    let n = p.n();
    let mut out = Tensor::zeros(&[n, n + 1]);
    for w in 1..=n {
        for l in 0..=n {
            let v = p.prob(w, l).to_f64().unwrap().max(f64::MIN_POSITIVE);
            out.set2(w - 1, l, v.ln());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn matrix(rows: Vec<Vec<f64>>) -> ScoreMatrix<f64> {
        let n = rows.len();
        let mut t = Tensor::zeros(&[n, n + 1]);
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                t.set2(i, j, v);
            }
        }
        ScoreMatrix::new(t)
    }

    /// Exhaustive reference: enumerate every head assignment and keep the
    /// best valid arborescence. Exponential; for validation only.
    fn brute_force_best(scores: &Tensor<f64>, single_root: bool) -> (Vec<usize>, f64) {
        let n = scores.rows();
        let mut heads = vec![0usize; n];
        let mut best: Option<(Vec<usize>, f64)> = None;
        loop {
            let valid = is_valid_tree(&heads)
                && (!single_root || heads.iter().filter(|&&h| h == 0).count() == 1);
            if valid {
                let total: f64 = heads.iter().enumerate().map(|(i, &h)| scores.at2(i, h)).sum();
                if best.as_ref().is_none_or(|(_, s)| total > *s) {
                    best = Some((heads.clone(), total));
                }
            }
            // Odometer over base n+1.
            let mut i = 0;
            loop {
                if i == n {
                    return best.expect("at least one arborescence exists");
                }
                heads[i] += 1;
                if heads[i] <= n {
                    break;
                }
                heads[i] = 0;
                i += 1;
            }
        }
    }

    fn total_of(scores: &Tensor<f64>, heads: &[usize]) -> f64 {
        heads.iter().enumerate().map(|(i, &h)| scores.at2(i, h)).sum()
    }

    fn cyclic_fixture() -> Tensor<f64> {
        let mut t = Tensor::filled(&[3, 4], -100.0);
        t.set2(0, 2, 10.0);
        t.set2(1, 1, 10.0);
        t.set2(0, 0, 9.0);
        t.set2(1, 0, 8.0);
        t.set2(2, 1, 5.0);
        t
    }

    #[test]
    fn greedy_follows_the_row_argmax() {
        let p = matrix(vec![vec![0.6, 0.0, 0.4], vec![0.3, 0.7, 0.0]]);
        assert_eq!(greedy_decode(&p), vec![0, 1]);
    }

    #[test]
    fn single_word_always_attaches_to_root() {
        let p = matrix(vec![vec![0.1, 0.9]]);
        assert_eq!(greedy_decode(&p), vec![0]);
    }

    #[test]
    fn greedy_ties_break_to_the_lowest_location() {
        let p = matrix(vec![vec![0.4, 0.2, 0.4], vec![0.5, 0.5, 0.0]]);
        assert_eq!(greedy_decode(&p), vec![0, 0]);
    }

    #[test]
    fn cycle_detection_matches_hand_cases() {
        assert_eq!(find_cycles(&[2, 1]), vec![vec![1, 2]]);
        assert!(find_cycles(&[0, 1, 2]).is_empty());
        assert_eq!(find_cycles(&[0, 3, 2]), vec![vec![2, 3]]);
        assert_eq!(find_cycles(&[1]), vec![vec![1]]);
        // Two disjoint cycles.
        assert_eq!(find_cycles(&[2, 1, 4, 3]), vec![vec![1, 2], vec![3, 4]]);
    }

    #[test]
    fn validity_checker_rejects_bad_trees() {
        assert!(is_valid_tree(&[0, 1, 2]));
        assert!(!is_valid_tree(&[2, 1]));
        assert!(!is_valid_tree(&[1]));
        assert!(!is_valid_tree(&[3, 0]));
        assert!(is_valid_tree(&[0, 0, 2]));
    }

    #[test]
    fn arborescence_solver_handles_one_word() {
        let t = Tensor::from_vec(&[1, 2], vec![0.3, 0.7]).unwrap();
        assert_eq!(cle_decode(&t, false).unwrap(), vec![0]);
    }

    #[test]
    fn arborescence_solver_repairs_the_cyclic_fixture() {
        let t = cyclic_fixture();
        let p = matrix(vec![
            vec![9.0, 0.0, 10.0, -100.0],
            vec![8.0, 10.0, 0.0, -100.0],
            vec![-100.0, 5.0, -100.0, 0.0],
        ]);
        assert_eq!(find_cycles(&greedy_decode(&p)), vec![vec![1, 2]]);
        let heads = cle_decode(&t, false).unwrap();
        assert_eq!(heads, vec![0, 1, 1]);
        assert!((total_of(&t, &heads) - 24.0).abs() < 1e-12);
    }

    #[test]
    fn empty_sentence_is_an_error() {
        let t = Tensor::<f64>::zeros(&[0, 1]);
        assert!(cle_decode(&t, false).is_err());
    }

    #[test]
    fn solver_matches_brute_force_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..100 {
            let n = 2 + trial % 5;
            let mut t = Tensor::zeros(&[n, n + 1]);
            for i in 0..n {
                for j in 0..=n {
                    t.set2(i, j, rng.random::<f64>() * 10.0 - 5.0);
                }
            }
            let heads = cle_decode(&t, false).unwrap();
            assert!(is_valid_tree(&heads), "trial {trial}: {heads:?}");
            let (_, best) = brute_force_best(&t, false);
            let got = total_of(&t, &heads);
            assert!(
                (got - best).abs() < 1e-9,
                "trial {trial}: solver {got} vs brute force {best}"
            );
        }
    }

    #[test]
    fn single_root_mode_matches_its_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        for trial in 0..60 {
            let n = 2 + trial % 4;
            let mut t = Tensor::zeros(&[n, n + 1]);
            for i in 0..n {
                for j in 0..=n {
                    t.set2(i, j, rng.random::<f64>() * 10.0 - 5.0);
                }
            }
            let heads = cle_decode(&t, true).unwrap();
            assert!(is_valid_tree(&heads));
            assert_eq!(heads.iter().filter(|&&h| h == 0).count(), 1, "trial {trial}");
            let (_, best) = brute_force_best(&t, true);
            assert!((total_of(&t, &heads) - best).abs() < 1e-9, "trial {trial}");
        }
    }

    #[test]
    fn single_root_rejects_a_cheaper_multi_root_tree() {
        let mut t = Tensor::filled(&[2, 3], -100.0);
        t.set2(0, 0, 10.0);
        t.set2(1, 0, 10.0);
        t.set2(0, 2, 1.0);
        t.set2(1, 1, 1.0);
        assert_eq!(cle_decode(&t, false).unwrap(), vec![0, 0]);
        let single = cle_decode(&t, true).unwrap();
        assert_eq!(single.iter().filter(|&&h| h == 0).count(), 1);
        assert!((total_of(&t, &single) - 11.0).abs() < 1e-12);
    }

    #[test]
    fn fallback_mode_only_reruns_on_cycles() {
        let acyclic = matrix(vec![vec![0.6, 0.0, 0.4], vec![0.3, 0.7, 0.0]]);
        let greedy = decode(&acyclic, DecodeMode::Greedy, false, |_, _| 0).unwrap();
        let fallback = decode(&acyclic, DecodeMode::GreedyThenCle, false, |_, _| 0).unwrap();
        assert_eq!(greedy.heads, fallback.heads);
        assert!(!greedy.used_fallback);
        assert!(!fallback.used_fallback);
    }

    #[test]
    fn fallback_mode_repairs_the_cyclic_fixture() {
        // Softmax-free stand-in: positive weights with the fixture's ordering.
        let p = matrix(vec![
            vec![0.30, 0.00, 0.65, 0.05],
            vec![0.25, 0.70, 0.00, 0.05],
            vec![0.05, 0.90, 0.04, 0.00],
        ]);
        let greedy = decode(&p, DecodeMode::Greedy, false, |w, h| w + h).unwrap();
        assert_eq!(greedy.heads, vec![2, 1, 1]);
        assert!(!greedy.used_fallback);
        let repaired = decode(&p, DecodeMode::GreedyThenCle, false, |w, h| w + h).unwrap();
        assert!(repaired.used_fallback);
        assert_eq!(repaired.heads, vec![0, 1, 1]);
        assert!(is_valid_tree(&repaired.heads));
        let direct = decode(&p, DecodeMode::Cle, false, |w, h| w + h).unwrap();
        assert_eq!(repaired.heads, direct.heads);
        assert!(!direct.used_fallback);
        // Labels follow the decoded heads.
        for (i, (&h, &l)) in repaired.heads.iter().zip(repaired.labels.iter()).enumerate() {
            assert_eq!(l, i + 1 + h);
        }
    }

    #[test]
    fn decode_mode_round_trips_through_strings() {
        for mode in [DecodeMode::Greedy, DecodeMode::GreedyThenCle, DecodeMode::Cle] {
            assert_eq!(mode.to_string().parse::<DecodeMode>().unwrap(), mode);
        }
        assert!("best".parse::<DecodeMode>().is_err());
        assert_eq!(
            serde_json::to_string(&DecodeMode::GreedyThenCle).unwrap(),
            "\"greedy_then_cle\""
        );
    }
}
