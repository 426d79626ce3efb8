//! Shared helpers for unit tests: tiny configurations, parameter injection,
//! and flattened views for finite-difference checks.

use crate::conllu::parse_str;
use crate::lexicon::Lexicon;
use crate::model::{
    AttentionMode, DropoutConfig, Model, ModelConfig, Params, ReaderConfig, ScorerConfig,
    TaggerConfig,
};
use crate::tensor::{Gradients, Tape, Tensor, Var};
use crate::Scalar;

pub(crate) fn tiny_config() -> ModelConfig {
    ModelConfig {
        reader: ReaderConfig {
            char_embed_dim: 4,
            filter_spec: vec![(1, 3), (2, 3)],
            projection_dim: 6,
            highway_layers: 1,
        },
        tagger: TaggerConfig {
            layers: 2,
            hidden: 5,
            pos_head_enabled: true,
            pos_branch_layer: None,
        },
        scorer: ScorerConfig {
            hidden: 7,
            label_hidden: 4,
            maxout_pieces: 2,
            attention: AttentionMode::Hard,
        },
        dropout: DropoutConfig { reader: 0.0, rnn: 0.0, labeler: 0.0 },
    }
}

pub(crate) fn tiny_lexicon() -> Lexicon {
    let sents = parse_str(
        "1\tkot\tkot\tNOUN\t_\tCase=Nom\t2\tnsubj\t_\t_\n\
         2\tma\tma\tVERB\t_\tNumber=Sing\t0\troot\t_\t_\n\
         3\tmysz\tmysz\tNOUN\t_\tCase=Acc\t2\tobj\t_\t_\n\n",
    )
    .unwrap();
    Lexicon::build(&sents).unwrap()
}

pub(crate) fn tiny_model<T: Scalar>(seed: u64) -> Model<T> {
    Model::new(tiny_config(), tiny_lexicon(), seed).unwrap()
}

/// Put every parameter tensor on the tape as a leaf.
pub(crate) fn inject<T: Scalar>(tape: &mut Tape<T>, params: &Params<Tensor<T>>) -> Params<Var> {
    params.map(&mut |t| tape.leaf(t.clone()))
}

/// Leaf tensors in declaration order.
pub(crate) fn flat_tensors<T: Scalar>(params: &Params<Tensor<T>>) -> Vec<Tensor<T>> {
    params.named().into_iter().map(|(_, t)| t.clone()).collect()
}

/// Rebuild a parameter tree from flattened tensors in declaration order.
pub(crate) fn from_flat<T: Scalar>(
    template: &Params<Tensor<T>>,
    flat: &[Tensor<T>],
) -> Params<Tensor<T>> {
    let mut idx = 0;
    template.map(&mut |_| {
        let t = flat[idx].clone();
        idx += 1;
        t
    })
}

/// Gradient per parameter in declaration order; zeros where a parameter is
/// off the loss path.
pub(crate) fn grads_flat<T: Scalar>(
    vars: &Params<Var>,
    grads: &Gradients<T>,
    shapes: &Params<Tensor<T>>,
) -> Vec<Tensor<T>> {
    vars.named()
        .into_iter()
        .zip(shapes.named())
        .map(|((_, &var), (_, shape))| {
            grads.get(var).cloned().unwrap_or_else(|| Tensor::zeros(shape.shape()))
        })
        .collect()
}
