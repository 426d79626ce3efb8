//! Model configuration, the parameter tree, and checkpointing.
//!
//! [`Params`] is generic over its leaf type: `Params<Tensor<T>>` holds the
//! weights, `Params<Var>` holds their handles on a tape, and the optimizer
//! walks both in the same declaration order. That shared order is also the
//! array order inside checkpoint files.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexicon::Lexicon;
use crate::tensor::{init, Tensor};
use crate::Scalar;

#[derive(Error, Debug)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn default_char_embed_dim() -> usize {
    16
}

fn default_filter_spec() -> Vec<(usize, usize)> {
    (1..=6).map(|k| (k, 50 * k)).collect()
}

fn default_projection_dim() -> usize {
    512
}

fn default_highway_layers() -> usize {
    3
}

/// Character-level word reader: embeddings, filterbank, projection, highway.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReaderConfig {
    #[serde(default = "default_char_embed_dim")]
    pub char_embed_dim: usize,
    /// (width, filter count) pairs.
    #[serde(default = "default_filter_spec")]
    pub filter_spec: Vec<(usize, usize)>,
    #[serde(default = "default_projection_dim")]
    pub projection_dim: usize,
    #[serde(default = "default_highway_layers")]
    pub highway_layers: usize,
}

impl Default for ReaderConfig {
    fn default() -> Self {
        ReaderConfig {
            char_embed_dim: default_char_embed_dim(),
            filter_spec: default_filter_spec(),
            projection_dim: default_projection_dim(),
            highway_layers: default_highway_layers(),
        }
    }
}

impl ReaderConfig {
    pub fn total_filters(&self) -> usize {
        self.filter_spec.iter().map(|&(_, c)| c).sum()
    }

    pub fn max_filter_width(&self) -> usize {
        self.filter_spec.iter().map(|&(w, _)| w).max().unwrap_or(1)
    }
}

fn default_layers() -> usize {
    2
}

fn default_hidden() -> usize {
    548
}

fn default_true() -> bool {
    true
}

/// Stacked BiGRU contextualizer and the optional POS branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaggerConfig {
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_true")]
    pub pos_head_enabled: bool,
    /// Branch point for the POS head: 0 = reader embeddings, k = output of
    /// the k-th BiGRU layer. `None` means the penultimate point, `layers - 1`.
    #[serde(default)]
    pub pos_branch_layer: Option<usize>,
}

impl Default for TaggerConfig {
    fn default() -> Self {
        TaggerConfig {
            layers: default_layers(),
            hidden: default_hidden(),
            pos_head_enabled: true,
            pos_branch_layer: None,
        }
    }
}

impl TaggerConfig {
    pub fn branch_layer(&self) -> usize {
        self.pos_branch_layer.unwrap_or(self.layers - 1)
    }
}

/// Which annotation of the head word feeds the labeler.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Expectation of head annotations under the attention row.
    Soft,
    /// Annotation at a single head location; the label loss never reaches
    /// the scorer.
    Hard,
}

fn default_scorer_hidden() -> usize {
    384
}

fn default_label_hidden() -> usize {
    256
}

fn default_maxout_pieces() -> usize {
    2
}

fn default_attention() -> AttentionMode {
    AttentionMode::Hard
}

/// Pointer scorer and maxout labeler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorerConfig {
    #[serde(default = "default_scorer_hidden")]
    pub hidden: usize,
    #[serde(default = "default_label_hidden")]
    pub label_hidden: usize,
    #[serde(default = "default_maxout_pieces")]
    pub maxout_pieces: usize,
    #[serde(default = "default_attention")]
    pub attention: AttentionMode,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig {
            hidden: default_scorer_hidden(),
            label_hidden: default_label_hidden(),
            maxout_pieces: default_maxout_pieces(),
            attention: default_attention(),
        }
    }
}

fn default_reader_dropout() -> f64 {
    0.2
}

fn default_rnn_dropout() -> f64 {
    0.7
}

fn default_labeler_dropout() -> f64 {
    0.5
}

/// Dropout rates at the three points of the schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutConfig {
    #[serde(default = "default_reader_dropout")]
    pub reader: f64,
    #[serde(default = "default_rnn_dropout")]
    pub rnn: f64,
    #[serde(default = "default_labeler_dropout")]
    pub labeler: f64,
}

impl Default for DropoutConfig {
    fn default() -> Self {
        DropoutConfig {
            reader: default_reader_dropout(),
            rnn: default_rnn_dropout(),
            labeler: default_labeler_dropout(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct ModelConfig {
    #[serde(default)]
    pub reader: ReaderConfig,
    #[serde(default)]
    pub tagger: TaggerConfig,
    #[serde(default)]
    pub scorer: ScorerConfig,
    #[serde(default)]
    pub dropout: DropoutConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.reader.char_embed_dim == 0 {
            return bad("char_embed_dim must be positive".into());
        }
        if self.reader.filter_spec.is_empty() {
            return bad("filter_spec must not be empty".into());
        }
        for &(w, c) in &self.reader.filter_spec {
            if w == 0 || c == 0 {
                return bad(format!("filter spec entry ({w}, {c}) must be positive"));
            }
        }
        if self.reader.projection_dim == 0 {
            return bad("projection_dim must be positive".into());
        }
        if self.tagger.layers == 0 {
            return bad("tagger needs at least one layer".into());
        }
        if self.tagger.hidden == 0 {
            return bad("tagger hidden size must be positive".into());
        }
        if let Some(b) = self.tagger.pos_branch_layer {
            if b > self.tagger.layers {
                return bad(format!(
                    "pos_branch_layer {b} exceeds layer count {}",
                    self.tagger.layers
                ));
            }
        }
        if self.scorer.hidden == 0 || self.scorer.label_hidden == 0 {
            return bad("scorer sizes must be positive".into());
        }
        if self.scorer.maxout_pieces == 0 {
            return bad("maxout_pieces must be positive".into());
        }
        for (name, rate) in [
            ("reader", self.dropout.reader),
            ("rnn", self.dropout.rnn),
            ("labeler", self.dropout.labeler),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return bad(format!("{name} dropout rate {rate} outside [0, 1)"));
            }
        }
        Ok(())
    }

    /// Width of the POS branch input vectors.
    pub fn branch_dim(&self) -> usize {
        if self.tagger.branch_layer() == 0 {
            self.reader.projection_dim
        } else {
            self.tagger.hidden
        }
    }
}

/// One convolution filter group. `width` is structural metadata carried
/// alongside the leaf so mapped parameter trees keep it.
#[derive(Clone, Debug)]
pub struct ConvBank<L> {
    pub width: usize,
    /// `[count, char_embed_dim * width]`.
    pub bank: L,
    /// `[count]`.
    pub bias: L,
}

#[derive(Clone, Debug)]
pub struct HighwayParams<L> {
    pub w_h: L,
    pub b_h: L,
    pub w_t: L,
    pub b_t: L,
}

#[derive(Clone, Debug)]
pub struct ReaderParams<L> {
    /// `[char_embed_dim, char_table_size]`; column = one character.
    pub char_table: L,
    pub banks: Vec<ConvBank<L>>,
    /// `[total_filters, projection_dim]`.
    pub proj_w: L,
    pub proj_b: L,
    pub highway: Vec<HighwayParams<L>>,
}

#[derive(Clone, Debug)]
pub struct GruParams<L> {
    pub w_z: L,
    pub u_z: L,
    pub b_z: L,
    pub w_r: L,
    pub u_r: L,
    pub b_r: L,
    pub w_c: L,
    pub u_c: L,
    pub b_c: L,
    /// Learned initial state.
    pub h0: L,
}

#[derive(Clone, Debug)]
pub struct BiGruParams<L> {
    pub fwd: GruParams<L>,
    pub bwd: GruParams<L>,
}

#[derive(Clone, Debug)]
pub struct TaggerParams<L> {
    pub layers: Vec<BiGruParams<L>>,
}

#[derive(Clone, Debug)]
pub struct AttrHead<L> {
    /// `[class_count, branch_dim]`.
    pub w: L,
    pub b: L,
}

#[derive(Clone, Debug)]
pub struct PosParams<L> {
    /// Aligned with `Lexicon::attrs` order.
    pub heads: Vec<AttrHead<L>>,
}

#[derive(Clone, Debug)]
pub struct ParserParams<L> {
    /// Root annotation, prepended as location 0.
    pub root: L,
    /// `[2*hidden, scorer_hidden]`.
    pub score_w1: L,
    pub score_b1: L,
    /// `[scorer_hidden]`; dotted with the hidden row for the logit.
    pub score_w2: L,
    /// `[label_hidden * pieces, 2*hidden]`.
    pub label_w1: L,
    pub label_b1: L,
    /// `[label_count, label_hidden]`.
    pub label_w2: L,
    pub label_b2: L,
}

/// Every trainable array of the network, generic over the leaf type.
#[derive(Clone, Debug)]
pub struct Params<L> {
    pub reader: ReaderParams<L>,
    pub tagger: TaggerParams<L>,
    pub pos: Option<PosParams<L>>,
    pub parser: ParserParams<L>,
}

impl<L> Params<L> {
    /// Visit every leaf with its dotted path, in declaration order.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a L)) {
        let r = &self.reader;
        f("reader.char_table".into(), &r.char_table);
        for (i, bank) in r.banks.iter().enumerate() {
            f(format!("reader.bank{i}.w"), &bank.bank);
            f(format!("reader.bank{i}.b"), &bank.bias);
        }
        f("reader.proj_w".into(), &r.proj_w);
        f("reader.proj_b".into(), &r.proj_b);
        for (i, h) in r.highway.iter().enumerate() {
            f(format!("reader.highway{i}.w_h"), &h.w_h);
            f(format!("reader.highway{i}.b_h"), &h.b_h);
            f(format!("reader.highway{i}.w_t"), &h.w_t);
            f(format!("reader.highway{i}.b_t"), &h.b_t);
        }
        for (i, layer) in self.tagger.layers.iter().enumerate() {
            for (dir, g) in [("fwd", &layer.fwd), ("bwd", &layer.bwd)] {
                let p = format!("tagger.layer{i}.{dir}");
                f(format!("{p}.w_z"), &g.w_z);
                f(format!("{p}.u_z"), &g.u_z);
                f(format!("{p}.b_z"), &g.b_z);
                f(format!("{p}.w_r"), &g.w_r);
                f(format!("{p}.u_r"), &g.u_r);
                f(format!("{p}.b_r"), &g.b_r);
                f(format!("{p}.w_c"), &g.w_c);
                f(format!("{p}.u_c"), &g.u_c);
                f(format!("{p}.b_c"), &g.b_c);
                f(format!("{p}.h0"), &g.h0);
            }
        }
        if let Some(pos) = &self.pos {
            for (i, head) in pos.heads.iter().enumerate() {
                f(format!("pos.attr{i}.w"), &head.w);
                f(format!("pos.attr{i}.b"), &head.b);
            }
        }
        let p = &self.parser;
        f("parser.root".into(), &p.root);
        f("parser.score_w1".into(), &p.score_w1);
        f("parser.score_b1".into(), &p.score_b1);
        f("parser.score_w2".into(), &p.score_w2);
        f("parser.label_w1".into(), &p.label_w1);
        f("parser.label_b1".into(), &p.label_b1);
        f("parser.label_w2".into(), &p.label_w2);
        f("parser.label_b2".into(), &p.label_b2);
    }

    /// Mutable counterpart of [`Params::visit`], same order.
    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(String, &'a mut L)) {
        let r = &mut self.reader;
        f("reader.char_table".into(), &mut r.char_table);
        for (i, bank) in r.banks.iter_mut().enumerate() {
            f(format!("reader.bank{i}.w"), &mut bank.bank);
            f(format!("reader.bank{i}.b"), &mut bank.bias);
        }
        f("reader.proj_w".into(), &mut r.proj_w);
        f("reader.proj_b".into(), &mut r.proj_b);
        for (i, h) in r.highway.iter_mut().enumerate() {
            f(format!("reader.highway{i}.w_h"), &mut h.w_h);
            f(format!("reader.highway{i}.b_h"), &mut h.b_h);
            f(format!("reader.highway{i}.w_t"), &mut h.w_t);
            f(format!("reader.highway{i}.b_t"), &mut h.b_t);
        }
        for (i, layer) in self.tagger.layers.iter_mut().enumerate() {
            for (dir, g) in [("fwd", &mut layer.fwd), ("bwd", &mut layer.bwd)] {
                let p = format!("tagger.layer{i}.{dir}");
                f(format!("{p}.w_z"), &mut g.w_z);
                f(format!("{p}.u_z"), &mut g.u_z);
                f(format!("{p}.b_z"), &mut g.b_z);
                f(format!("{p}.w_r"), &mut g.w_r);
                f(format!("{p}.u_r"), &mut g.u_r);
                f(format!("{p}.b_r"), &mut g.b_r);
                f(format!("{p}.w_c"), &mut g.w_c);
                f(format!("{p}.u_c"), &mut g.u_c);
                f(format!("{p}.b_c"), &mut g.b_c);
                f(format!("{p}.h0"), &mut g.h0);
            }
        }
        if let Some(pos) = &mut self.pos {
            for (i, head) in pos.heads.iter_mut().enumerate() {
                f(format!("pos.attr{i}.w"), &mut head.w);
                f(format!("pos.attr{i}.b"), &mut head.b);
            }
        }
        let p = &mut self.parser;
        f("parser.root".into(), &mut p.root);
        f("parser.score_w1".into(), &mut p.score_w1);
        f("parser.score_b1".into(), &mut p.score_b1);
        f("parser.score_w2".into(), &mut p.score_w2);
        f("parser.label_w1".into(), &mut p.label_w1);
        f("parser.label_b1".into(), &mut p.label_b1);
        f("parser.label_w2".into(), &mut p.label_w2);
        f("parser.label_b2".into(), &mut p.label_b2);
    }

    pub fn named(&self) -> Vec<(String, &L)> {
        let mut out = Vec::new();
        self.visit(&mut |name, leaf| out.push((name, leaf)));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut L)> {
        let mut out = Vec::new();
        self.visit_mut(&mut |name, leaf| out.push((name, leaf)));
        out
    }

    pub fn leaf_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _| n += 1);
        n
    }

    /// Transform every leaf, keeping structure and metadata.
    pub fn map<M>(&self, f: &mut impl FnMut(&L) -> M) -> Params<M> {
        Params {
            reader: ReaderParams {
                char_table: f(&self.reader.char_table),
                banks: self
                    .reader
                    .banks
                    .iter()
                    .map(|b| ConvBank { width: b.width, bank: f(&b.bank), bias: f(&b.bias) })
                    .collect(),
                proj_w: f(&self.reader.proj_w),
                proj_b: f(&self.reader.proj_b),
                highway: self
                    .reader
                    .highway
                    .iter()
                    .map(|h| HighwayParams {
                        w_h: f(&h.w_h),
                        b_h: f(&h.b_h),
                        w_t: f(&h.w_t),
                        b_t: f(&h.b_t),
                    })
                    .collect(),
            },
            tagger: TaggerParams {
                layers: self
                    .tagger
                    .layers
                    .iter()
                    .map(|l| BiGruParams { fwd: map_gru(&l.fwd, f), bwd: map_gru(&l.bwd, f) })
                    .collect(),
            },
            pos: self.pos.as_ref().map(|pos| PosParams {
                heads: pos
                    .heads
                    .iter()
                    .map(|h| AttrHead { w: f(&h.w), b: f(&h.b) })
                    .collect(),
            }),
            parser: ParserParams {
                root: f(&self.parser.root),
                score_w1: f(&self.parser.score_w1),
                score_b1: f(&self.parser.score_b1),
                score_w2: f(&self.parser.score_w2),
                label_w1: f(&self.parser.label_w1),
                label_b1: f(&self.parser.label_b1),
                label_w2: f(&self.parser.label_w2),
                label_b2: f(&self.parser.label_b2),
            },
        }
    }
}

fn map_gru<L, M>(g: &GruParams<L>, f: &mut impl FnMut(&L) -> M) -> GruParams<M> {
    GruParams {
        w_z: f(&g.w_z),
        u_z: f(&g.u_z),
        b_z: f(&g.b_z),
        w_r: f(&g.w_r),
        u_r: f(&g.u_r),
        b_r: f(&g.b_r),
        w_c: f(&g.w_c),
        u_c: f(&g.u_c),
        b_c: f(&g.b_c),
        h0: f(&g.h0),
    }
}

impl<T: Scalar> Params<Tensor<T>> {
    /// Same tree in another precision.
    pub fn cast<U: Scalar>(&self) -> Params<Tensor<U>> {
        self.map(&mut |t| {
            Tensor::from_vec(
                t.shape(),
                t.data().iter().map(|&v| U::from(v).unwrap()).collect(),
            )
            .unwrap()
        })
    }

    /// Zero tensors with matching shapes, e.g. for optimizer accumulators.
    pub fn zeros_like(&self) -> Params<Tensor<T>> {
        self.map(&mut |t| Tensor::zeros(t.shape()))
    }
}

const GAUSSIAN_STD: f64 = 0.01;
const HIGHWAY_GATE_BIAS: f64 = -2.0;

fn init_gru<T: Scalar>(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> GruParams<Tensor<T>> {
    // Input weights are Gaussian, recurrent weights orthogonal, biases and
    // the learned initial state start at zero.
    GruParams {
        w_z: init::gaussian(&[hidden, input], GAUSSIAN_STD, rng),
        u_z: init::orthogonal(hidden, rng),
        b_z: Tensor::zeros(&[hidden]),
        w_r: init::gaussian(&[hidden, input], GAUSSIAN_STD, rng),
        u_r: init::orthogonal(hidden, rng),
        b_r: Tensor::zeros(&[hidden]),
        w_c: init::gaussian(&[hidden, input], GAUSSIAN_STD, rng),
        u_c: init::orthogonal(hidden, rng),
        b_c: Tensor::zeros(&[hidden]),
        h0: Tensor::zeros(&[hidden]),
    }
}

fn init_params<T: Scalar>(
    config: &ModelConfig,
    lexicon: &Lexicon,
    rng: &mut ChaCha8Rng,
) -> Params<Tensor<T>> {
    let rc = &config.reader;
    let d = rc.char_embed_dim;
    let reader = ReaderParams {
        char_table: init::gaussian(&[d, lexicon.char_table_size()], GAUSSIAN_STD, rng),
        banks: rc
            .filter_spec
            .iter()
            .map(|&(width, count)| ConvBank {
                width,
                bank: init::gaussian(&[count, d * width], GAUSSIAN_STD, rng),
                bias: Tensor::zeros(&[count]),
            })
            .collect(),
        proj_w: init::gaussian(&[rc.total_filters(), rc.projection_dim], GAUSSIAN_STD, rng),
        proj_b: Tensor::zeros(&[rc.projection_dim]),
        highway: (0..rc.highway_layers)
            .map(|_| HighwayParams {
                w_h: init::gaussian(&[rc.projection_dim, rc.projection_dim], GAUSSIAN_STD, rng),
                b_h: Tensor::zeros(&[rc.projection_dim]),
                w_t: init::gaussian(&[rc.projection_dim, rc.projection_dim], GAUSSIAN_STD, rng),
                b_t: init::constant(&[rc.projection_dim], HIGHWAY_GATE_BIAS),
            })
            .collect(),
    };
    let hidden = config.tagger.hidden;
    let tagger = TaggerParams {
        layers: (0..config.tagger.layers)
            .map(|l| {
                let input = if l == 0 { rc.projection_dim } else { hidden };
                BiGruParams {
                    fwd: init_gru(input, hidden, rng),
                    bwd: init_gru(input, hidden, rng),
                }
            })
            .collect(),
    };
    let pos = config.tagger.pos_head_enabled.then(|| {
        let dim = config.branch_dim();
        PosParams {
            heads: lexicon
                .attrs()
                .iter()
                .map(|attr| AttrHead {
                    w: init::gaussian(&[attr.class_count(), dim], GAUSSIAN_STD, rng),
                    b: Tensor::zeros(&[attr.class_count()]),
                })
                .collect(),
        }
    });
    let sc = &config.scorer;
    let labels = lexicon.label_count();
    let parser = ParserParams {
        root: init::gaussian(&[hidden], GAUSSIAN_STD, rng),
        score_w1: init::gaussian(&[2 * hidden, sc.hidden], GAUSSIAN_STD, rng),
        score_b1: Tensor::zeros(&[sc.hidden]),
        score_w2: init::gaussian(&[sc.hidden], GAUSSIAN_STD, rng),
        label_w1: init::gaussian(&[sc.label_hidden * sc.maxout_pieces, 2 * hidden], GAUSSIAN_STD, rng),
        label_b1: Tensor::zeros(&[sc.label_hidden * sc.maxout_pieces]),
        label_w2: init::gaussian(&[labels, sc.label_hidden], GAUSSIAN_STD, rng),
        label_b2: Tensor::zeros(&[labels]),
    };
    Params { reader, tagger, pos, parser }
}

/// A configured network with its vocabulary and weights.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub lexicon: Lexicon,
    pub params: Params<Tensor<T>>,
    pub seed: u64,
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"PODEPCK1";

#[derive(Serialize, Deserialize)]
struct ArrayInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    lexicon: Lexicon,
    seed: u64,
    arrays: Vec<ArrayInfo>,
}

impl<T: Scalar> Model<T> {
    /// Fresh model with seeded initialization. The same seed produces the
    /// same weights in every precision.
    pub fn new(config: ModelConfig, lexicon: Lexicon, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_params(&config, &lexicon, &mut rng);
        Ok(Model { config, lexicon, params, seed })
    }

    /// Write the checkpoint container: magic, metadata length, JSON metadata,
    /// then each array as little-endian f32 in declaration order.
    pub fn save(&self, writer: &mut impl Write) -> Result<(), ModelError> {
        let named = self.params.named();
        let meta = CheckpointMeta {
            config: self.config.clone(),
            lexicon: self.lexicon.clone(),
            seed: self.seed,
            arrays: named
                .iter()
                .map(|(name, t)| ArrayInfo { name: name.clone(), shape: t.shape().to_vec() })
                .collect(),
        };
        let json = serde_json::to_vec(&meta)?;
        writer.write_all(CHECKPOINT_MAGIC)?;
        writer.write_all(&(json.len() as u64).to_le_bytes())?;
        writer.write_all(&json)?;
        for (_, tensor) in named {
            for &v in tensor.data() {
                let bits = v.to_f32().unwrap().to_le_bytes();
                writer.write_all(&bits)?;
            }
        }
        Ok(())
    }

    pub fn save_to_path(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.save(&mut file)
    }

    pub fn load(reader: &mut impl Read) -> Result<Self, ModelError> {
        let mut magic = [0u8; 8];
        reader.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::Checkpoint("not a model checkpoint (bad magic)".into()));
        }
        let mut len_bytes = [0u8; 8];
        reader.read_exact(&mut len_bytes)?;
        let json_len = u64::from_le_bytes(len_bytes) as usize;
        let mut json = vec![0u8; json_len];
        reader.read_exact(&mut json)?;
        let meta: CheckpointMeta = serde_json::from_slice(&json)?;
        meta.config.validate()?;
        let mut model = Model::new(meta.config, meta.lexicon, meta.seed)?;
        let named = model.params.named_mut();
        if named.len() != meta.arrays.len() {
            return Err(ModelError::Checkpoint(format!(
                "array count mismatch: checkpoint has {}, model needs {}",
                meta.arrays.len(),
                named.len()
            )));
        }
        for ((name, tensor), info) in named.into_iter().zip(meta.arrays.iter()) {
            if name != info.name || tensor.shape() != info.shape.as_slice() {
                return Err(ModelError::Checkpoint(format!(
                    "array mismatch: checkpoint {:?} {:?} vs model {:?} {:?}",
                    info.name,
                    info.shape,
                    name,
                    tensor.shape()
                )));
            }
            let mut buf = [0u8; 4];
            for slot in tensor.data_mut() {
                reader.read_exact(&mut buf)?;
                *slot = T::from(f32::from_le_bytes(buf)).unwrap();
            }
        }
        Ok(model)
    }

    pub fn load_from_path(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::load(&mut file)
    }
}
