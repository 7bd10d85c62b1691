//! Two-level transformer over serialized graphs: a local block whose
//! attention never crosses node segments, a pooling layer producing one
//! embedding per node plus the query, and a global block over those
//! embeddings feeding an MLP classifier.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use hlmg_tensor::{Scalar, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{Owner, SpanKind, TokenizedSample, UNK};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sample needs {required} positions but the model allows {max}")]
    TooLong { required: usize, max: usize },
    #[error("malformed sample: {0}")]
    BadSample(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
    #[error("checkpoint config does not match: {0}")]
    Mismatch(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// `z = α·z_structure + (1 − α)·z_feature`
    #[default]
    MeanAlpha,
    /// `[z_structure, z_feature]` followed by a learned projection back to
    /// `dim`.
    Concatenate,
}

impl FromStr for Pooling {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "mean" | "mean_alpha" => Ok(Pooling::MeanAlpha),
            "concat" | "concatenate" => Ok(Pooling::Concatenate),
            _ => Err(format!("unknown pooling `{s}` (expected mean or concat)")),
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::MeanAlpha => "mean",
            Pooling::Concatenate => "concat",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub local_layers: usize,
    pub global_layers: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub attn_dropout: f64,
    pub max_positions: usize,
    pub num_classes: usize,
    pub pooling: Pooling,
    /// Learned position embeddings on the global block input (node order).
    pub use_global_positional: bool,
    /// Pre-norm residual blocks; post-norm when false.
    pub pre_norm: bool,
    /// Initial value of α.
    pub alpha_init: f64,
}

impl ModelConfig {
    /// Small CPU-trainable model.
    pub fn desk(vocab_size: usize, num_classes: usize) -> Self {
        Self {
            vocab_size,
            dim: 64,
            heads: 4,
            local_layers: 2,
            global_layers: 2,
            hidden_dim: 256,
            dropout: 0.1,
            attn_dropout: 0.1,
            max_positions: 1024,
            num_classes,
            pooling: Pooling::MeanAlpha,
            use_global_positional: false,
            pre_norm: true,
            alpha_init: 0.5,
        }
    }

    /// Full-size reference model. The published hyperparameter table lists
    /// six local layers; the accompanying text uses four for the reasoning
    /// tasks. The table value is used here.
    pub fn paper(vocab_size: usize, num_classes: usize) -> Self {
        Self {
            vocab_size,
            dim: 768,
            heads: 12,
            local_layers: 6,
            global_layers: 2,
            hidden_dim: 3072,
            dropout: 0.1,
            attn_dropout: 0.1,
            max_positions: 4096,
            num_classes,
            pooling: Pooling::MeanAlpha,
            use_global_positional: false,
            pre_norm: true,
            alpha_init: 0.5,
        }
    }

    /// Minimal model used by gradient checks.
    pub fn tiny(vocab_size: usize, num_classes: usize) -> Self {
        Self {
            vocab_size,
            dim: 8,
            heads: 2,
            local_layers: 1,
            global_layers: 1,
            hidden_dim: 16,
            dropout: 0.0,
            attn_dropout: 0.0,
            max_positions: 512,
            num_classes,
            pooling: Pooling::MeanAlpha,
            use_global_positional: false,
            pre_norm: true,
            alpha_init: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.local_layers == 0 || self.global_layers == 0 {
            return bad("need at least one local and one global layer".into());
        }
        if self.num_classes < 1 || self.vocab_size < 2 || self.max_positions < 1 {
            return bad("num_classes, vocab_size and max_positions must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.attn_dropout) {
            return bad("dropout rates must lie in [0, 1)".into());
        }
        if !(self.alpha_init > 0.0 && self.alpha_init < 1.0) {
            return bad("alpha_init must lie in (0, 1)".into());
        }
        Ok(())
    }
}

/// Parameter indices of one transformer layer.
#[derive(Clone, Debug)]
struct LayerIx {
    ln1: (usize, usize),
    wq: (usize, usize),
    /// Key projection without bias: a key bias shifts every score in a
    /// softmax row by the same amount and has no effect.
    wk: usize,
    wv: (usize, usize),
    wo: (usize, usize),
    ln2: (usize, usize),
    ff1: (usize, usize),
    ff2: (usize, usize),
}

/// Where each named tensor lives in the flat parameter list.
#[derive(Clone, Debug)]
pub struct Layout {
    tok: usize,
    pos: usize,
    local: Vec<LayerIx>,
    local_norm: Option<(usize, usize)>,
    alpha: usize,
    down: Option<(usize, usize)>,
    global_pos: Option<usize>,
    global: Vec<LayerIx>,
    global_norm: Option<(usize, usize)>,
    head1: (usize, usize),
    head2: (usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Embedding,
    /// Weight matrix; scaled by fan-in.
    Weight,
    Zeros,
    Ones,
    Alpha,
}

#[derive(Default)]
struct Builder {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl Builder {
    fn add(&mut self, name: String, shape: [usize; 2], init: Init) -> usize {
        self.specs.push((name, shape.to_vec(), init));
        self.specs.len() - 1
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> (usize, usize) {
        (
            self.add(format!("{name}.weight"), [fan_in, fan_out], Init::Weight),
            self.add(format!("{name}.bias"), [1, fan_out], Init::Zeros),
        )
    }

    fn norm(&mut self, name: &str, dim: usize) -> (usize, usize) {
        (
            self.add(format!("{name}.gamma"), [1, dim], Init::Ones),
            self.add(format!("{name}.beta"), [1, dim], Init::Zeros),
        )
    }

    fn layer(&mut self, prefix: &str, d: usize, h: usize) -> LayerIx {
        LayerIx {
            ln1: self.norm(&format!("{prefix}.ln1"), d),
            wq: self.linear(&format!("{prefix}.attn.q"), d, d),
            wk: self.add(format!("{prefix}.attn.k.weight"), [d, d], Init::Weight),
            wv: self.linear(&format!("{prefix}.attn.v"), d, d),
            wo: self.linear(&format!("{prefix}.attn.o"), d, d),
            ln2: self.norm(&format!("{prefix}.ln2"), d),
            ff1: self.linear(&format!("{prefix}.ffn.in"), d, h),
            ff2: self.linear(&format!("{prefix}.ffn.out"), h, d),
        }
    }
}

/// Parameter layout plus `(name, shape, init)` for every tensor.
fn build_layout(cfg: &ModelConfig) -> (Layout, Vec<(String, Vec<usize>, Init)>) {
    let (d, h) = (cfg.dim, cfg.hidden_dim);
    let mut b = Builder::default();
    let tok = b.add("local.token_embedding".into(), [cfg.vocab_size, d], Init::Embedding);
    let pos = b.add("local.position_embedding".into(), [cfg.max_positions, d], Init::Embedding);
    let local = (0..cfg.local_layers)
        .map(|l| b.layer(&format!("local.{l}"), d, h))
        .collect();
    let local_norm = cfg.pre_norm.then(|| b.norm("local.final_norm", d));
    let alpha = b.add("pool.alpha_raw".into(), [1, 1], Init::Alpha);
    let down = (cfg.pooling == Pooling::Concatenate).then(|| b.linear("pool.down", 2 * d, d));
    let global_pos = cfg
        .use_global_positional
        .then(|| b.add("global.position_embedding".into(), [cfg.max_positions, d], Init::Embedding));
    let global = (0..cfg.global_layers)
        .map(|l| b.layer(&format!("global.{l}"), d, h))
        .collect();
    let global_norm = cfg.pre_norm.then(|| b.norm("global.final_norm", d));
    let head1 = b.linear("head.hidden", d, d);
    let head2 = b.linear("head.out", d, cfg.num_classes);
    let layout = Layout {
        tok,
        pos,
        local,
        local_norm,
        alpha,
        down,
        global_pos,
        global,
        global_norm,
        head1,
        head2,
    };
    (layout, b.specs)
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub params: Vec<Tensor<T>>,
    layout_cache: LayoutCache,
}

// Layout is derived from the config; cached so `PartialEq` stays on data.
#[derive(Clone, Debug)]
struct LayoutCache(Layout);

impl PartialEq for LayoutCache {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

/// Variables recorded by one forward pass.
pub struct Forward {
    pub logits: Var,
    /// Token embeddings (token + position) before the first local layer.
    pub embeddings: Var,
    /// Local block output, one row per token.
    pub hidden: Var,
    /// Attention node of every local layer.
    pub local_attention: Vec<Var>,
    /// Attention node of every global layer.
    pub global_attention: Vec<Var>,
    /// Token row ranges of the node and query segments.
    pub segments: Vec<(usize, usize)>,
    /// Node owners in segment order (the query segment is last).
    pub node_order: Vec<usize>,
    /// Structure-span embeddings per node in segment order.
    pub z_structure: Vec<Var>,
    /// Pooled rows `[z_1, …, z_n, z_q]` before any projection.
    pub pooled: Var,
    pub alpha: Var,
}

fn seed_for(seed: u64, k: u64) -> u64 {
    seed ^ k.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl<T: Scalar> Model<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = Normal::new(0.0, 0.02).expect("valid std");
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for (name, shape, init) in specs {
            let fan_in = shape[0] as f64;
            let t = match init {
                Init::Embedding => Tensor::from_fn(shape, |_| T::of(emb.sample(&mut rng))),
                Init::Weight => {
                    let bound = (3.0 / fan_in).sqrt();
                    Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)))
                }
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::full(shape, T::one()),
                Init::Alpha => Tensor::full(shape, T::of(logit(config.alpha_init))),
            };
            names.push(name);
            params.push(t);
        }
        Ok(Self {
            config,
            names,
            params,
            layout_cache: LayoutCache(layout),
        })
    }

    /// Wraps existing tensors, checking names and shapes against `config`.
    pub fn from_params(config: ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(&config);
        if specs.len() != named.len() {
            return Err(ModelError::Mismatch(format!(
                "expected {} tensors, found {}",
                specs.len(),
                named.len()
            )));
        }
        for ((name, shape, _), (n, t)) in specs.iter().zip(&named) {
            if name != n || shape.as_slice() != t.shape() {
                return Err(ModelError::Mismatch(format!(
                    "expected {name} {shape:?}, found {n} {:?}",
                    t.shape()
                )));
            }
        }
        let (names, params) = named.into_iter().unzip();
        Ok(Self {
            config,
            names,
            params,
            layout_cache: LayoutCache(layout),
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout_cache.0
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            layout_cache: self.layout_cache.clone(),
        }
    }

    /// Index of the named tensor.
    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// α = sigmoid(α_raw).
    pub fn alpha(&self) -> f64 {
        let raw = self.params[self.layout().alpha].data()[0].to_f64().unwrap_or(0.0);
        1.0 / (1.0 + (-raw).exp())
    }

    /// Registers every parameter on `tape` as a trainable leaf.
    pub fn register<'a>(&'a self, tape: &mut Tape<'a, T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p)).collect()
    }

    pub fn forward<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        sample: &TokenizedSample,
        train: bool,
        seed: u64,
    ) -> Result<Forward> {
        let vars = self.register(tape);
        forward(&self.config, self.layout(), tape, &vars, sample, train, seed)
    }

    /// Eval-mode logits.
    pub fn logits(&self, sample: &TokenizedSample) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.borrowed(p)).collect();
        let f = forward(&self.config, self.layout(), &mut tape, &vars, sample, false, 0)?;
        Ok(tape.value(f.logits).to_vec())
    }

    /// Eval-mode class prediction.
    pub fn predict(&self, sample: &TokenizedSample) -> Result<usize> {
        Ok(argmax(&self.logits(sample)?))
    }

    /// Eval-mode forward pass returning plain values for analysis.
    pub fn inspect(&self, sample: &TokenizedSample) -> Result<Inspection<T>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.borrowed(p)).collect();
        let f = forward(&self.config, self.layout(), &mut tape, &vars, sample, false, 0)?;
        let query_attention = f
            .global_attention
            .iter()
            .map(|&a| query_row(&tape, a, self.config.heads))
            .collect();
        Ok(Inspection {
            logits: tape.value(f.logits).to_vec(),
            query_attention,
            node_order: f.node_order.clone(),
            z_structure: f.z_structure.iter().map(|&z| tape.value(z).to_vec()).collect(),
        })
    }
}

/// Plain values from an eval-mode forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Inspection<T> {
    pub logits: Vec<T>,
    /// Per global layer, the head-averaged attention row of the query over
    /// the node embeddings (segment order) followed by itself.
    pub query_attention: Vec<Vec<T>>,
    pub node_order: Vec<usize>,
    pub z_structure: Vec<Vec<T>>,
}

/// Head-averaged last row of a global attention node.
pub fn query_row<T: Scalar>(tape: &Tape<'_, T>, att: Var, heads: usize) -> Vec<T> {
    let (n, _) = tape.dims(att);
    let mut row = vec![T::zero(); n];
    for h in 0..heads {
        let w = tape
            .segment_attention_weights(att, h)
            .expect("global attention node");
        for (r, x) in row.iter_mut().zip(&w[(n - 1) * n..]) {
            *r = *r + *x;
        }
    }
    let inv = T::one() / T::from_usize(heads).expect("usize fits");
    row.iter_mut().for_each(|r| *r = *r * inv);
    row
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Node and query segments of a sample: consecutive spans with the same
/// owner are merged. Returns `(row ranges, node owners)`.
pub fn segments_of(sample: &TokenizedSample) -> Result<(Vec<(usize, usize)>, Vec<usize>)> {
    let mut segs: Vec<(usize, usize, Owner)> = Vec::new();
    let mut expect = 0;
    for s in &sample.spans {
        if s.start != expect || s.end <= s.start {
            return Err(ModelError::BadSample(format!(
                "span {}..{} is empty or not contiguous",
                s.start, s.end
            )));
        }
        expect = s.end;
        match segs.last_mut() {
            Some(last) if last.2 == s.owner => last.1 = s.end,
            _ => segs.push((s.start, s.end, s.owner)),
        }
    }
    if expect != sample.ids.len() {
        return Err(ModelError::BadSample("spans do not cover the sequence".into()));
    }
    let nq = segs.iter().filter(|s| s.2 == Owner::Query).count();
    if nq != 1 || segs.last().map(|s| s.2) != Some(Owner::Query) {
        return Err(ModelError::BadSample("expected exactly one trailing query span".into()));
    }
    let owners = segs
        .iter()
        .filter_map(|s| match s.2 {
            Owner::Node(i) => Some(i),
            Owner::Query => None,
        })
        .collect();
    Ok((segs.iter().map(|s| (s.0, s.1)).collect(), owners))
}

struct Ctx<'c> {
    cfg: &'c ModelConfig,
    vars: &'c [Var],
    train: bool,
    seed: u64,
    counter: u64,
}

impl Ctx<'_> {
    fn v(&self, i: usize) -> Var {
        self.vars[i]
    }

    fn next_seed(&mut self) -> u64 {
        self.counter += 1;
        seed_for(self.seed, self.counter)
    }

    fn linear<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, w: (usize, usize)) -> Result<Var> {
        let y = tape.matmul(x, self.v(w.0))?;
        Ok(tape.add(y, self.v(w.1))?)
    }

    fn norm<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, n: (usize, usize)) -> Result<Var> {
        Ok(tape.layer_norm(x, self.v(n.0), self.v(n.1), T::of(1e-5))?)
    }

    fn dropout<T: Scalar>(&mut self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let seed = self.next_seed();
        Ok(tape.dropout(x, self.cfg.dropout, self.train, seed)?)
    }

    fn attention<T: Scalar>(
        &mut self,
        tape: &mut Tape<'_, T>,
        x: Var,
        l: &LayerIx,
        segments: &[(usize, usize)],
    ) -> Result<(Var, Var)> {
        let q = self.linear(tape, x, l.wq)?;
        let k = tape.matmul(x, self.v(l.wk))?;
        let v = self.linear(tape, x, l.wv)?;
        let seed = self.next_seed();
        let a = tape.segment_attention(
            q,
            k,
            v,
            segments,
            self.cfg.heads,
            self.cfg.attn_dropout,
            self.train,
            seed,
        )?;
        Ok((self.linear(tape, a, l.wo)?, a))
    }

    fn ffn<T: Scalar>(&mut self, tape: &mut Tape<'_, T>, x: Var, l: &LayerIx) -> Result<Var> {
        let h = self.linear(tape, x, l.ff1)?;
        let h = tape.gelu(h);
        self.linear(tape, h, l.ff2)
    }

    /// One transformer layer; returns the output and its attention node.
    fn layer<T: Scalar>(
        &mut self,
        tape: &mut Tape<'_, T>,
        x: Var,
        l: &LayerIx,
        segments: &[(usize, usize)],
    ) -> Result<(Var, Var)> {
        if self.cfg.pre_norm {
            let n = self.norm(tape, x, l.ln1)?;
            let (a, att) = self.attention(tape, n, l, segments)?;
            let a = self.dropout(tape, a)?;
            let x = tape.add(x, a)?;
            let n = self.norm(tape, x, l.ln2)?;
            let f = self.ffn(tape, n, l)?;
            let f = self.dropout(tape, f)?;
            Ok((tape.add(x, f)?, att))
        } else {
            let (a, att) = self.attention(tape, x, l, segments)?;
            let a = self.dropout(tape, a)?;
            let x = tape.add(x, a)?;
            let x = self.norm(tape, x, l.ln1)?;
            let f = self.ffn(tape, x, l)?;
            let f = self.dropout(tape, f)?;
            let x = tape.add(x, f)?;
            Ok((self.norm(tape, x, l.ln2)?, att))
        }
    }
}

/// Full forward pass over parameter variables laid out per `layout`.
pub fn forward<T: Scalar>(
    cfg: &ModelConfig,
    layout: &Layout,
    tape: &mut Tape<'_, T>,
    vars: &[Var],
    sample: &TokenizedSample,
    train: bool,
    seed: u64,
) -> Result<Forward> {
    if sample.ids.len() > cfg.max_positions {
        return Err(ModelError::TooLong {
            required: sample.ids.len(),
            max: cfg.max_positions,
        });
    }
    let (segments, node_order) = segments_of(sample)?;
    let mut cx = Ctx {
        cfg,
        vars,
        train,
        seed,
        counter: 0,
    };

    // Local block.
    let ids: Vec<usize> = sample
        .ids
        .iter()
        .map(|&i| if (i as usize) < cfg.vocab_size { i as usize } else { UNK as usize })
        .collect();
    let positions: Vec<usize> = segments
        .iter()
        .flat_map(|&(s, e)| 0..e - s)
        .collect();
    let tok = tape.embedding(cx.v(layout.tok), &ids)?;
    let pos = tape.embedding(cx.v(layout.pos), &positions)?;
    let embeddings = tape.add(tok, pos)?;
    let mut x = cx.dropout(tape, embeddings)?;
    let mut local_attention = Vec::with_capacity(layout.local.len());
    for l in &layout.local {
        let (y, att) = cx.layer(tape, x, l, &segments)?;
        x = y;
        local_attention.push(att);
    }
    if let Some(n) = layout.local_norm {
        x = cx.norm(tape, x, n)?;
    }
    let hidden = x;

    // Pooling.
    let alpha = tape.sigmoid(cx.v(layout.alpha));
    let one_minus = tape.affine(alpha, -T::one(), T::one());
    let mut rows = Vec::with_capacity(node_order.len() + 1);
    let mut z_structure = Vec::with_capacity(node_order.len());
    let d = cfg.dim;
    for &node in &node_order {
        let span = |kind| {
            sample
                .spans
                .iter()
                .find(|s| s.owner == Owner::Node(node) && s.kind == kind)
        };
        let st = span(SpanKind::Structure).ok_or_else(|| {
            ModelError::BadSample(format!("node {node} has no structure span"))
        })?;
        let z_ae = tape.mean_over(hidden, st.start, st.end)?;
        z_structure.push(z_ae);
        let z_x = match span(SpanKind::Feature) {
            Some(f) => Some(tape.mean_over(hidden, f.start, f.end)?),
            None => None,
        };
        let z = match (cfg.pooling, z_x) {
            (Pooling::MeanAlpha, Some(z_x)) => {
                let a = tape.mul(z_ae, alpha)?;
                let b = tape.mul(z_x, one_minus)?;
                tape.add(a, b)?
            }
            (Pooling::MeanAlpha, None) => z_ae,
            (Pooling::Concatenate, Some(z_x)) => tape.concat_cols(&[z_ae, z_x])?,
            (Pooling::Concatenate, None) => {
                let zeros = tape.constant(1, d, vec![T::zero(); d])?;
                tape.concat_cols(&[z_ae, zeros])?
            }
        };
        rows.push(z);
    }
    let q = sample
        .query_span()
        .ok_or_else(|| ModelError::BadSample("no query span".into()))?;
    let z_q = tape.mean_over(hidden, q.start, q.end)?;
    rows.push(match cfg.pooling {
        Pooling::MeanAlpha => z_q,
        Pooling::Concatenate => {
            let zeros = tape.constant(1, d, vec![T::zero(); d])?;
            tape.concat_cols(&[z_q, zeros])?
        }
    });
    let pooled = tape.concat_rows(&rows)?;
    let mut z = pooled;
    if let Some(down) = layout.down {
        z = cx.linear(tape, z, down)?;
    }

    // Global block.
    let count = rows.len();
    if let Some(gp) = layout.global_pos {
        if count > cfg.max_positions {
            return Err(ModelError::TooLong {
                required: count,
                max: cfg.max_positions,
            });
        }
        let idx: Vec<usize> = (0..count).collect();
        let p = tape.embedding(cx.v(gp), &idx)?;
        z = tape.add(z, p)?;
    }
    let whole = [(0, count)];
    let mut global_attention = Vec::with_capacity(layout.global.len());
    for l in &layout.global {
        let (y, att) = cx.layer(tape, z, l, &whole)?;
        z = y;
        global_attention.push(att);
    }
    if let Some(n) = layout.global_norm {
        z = cx.norm(tape, z, n)?;
    }
    let zq = tape.slice_rows(z, count - 1, count)?;
    let h = cx.linear(tape, zq, layout.head1)?;
    let h = tape.gelu(h);
    let h = cx.dropout(tape, h)?;
    let logits = cx.linear(tape, h, layout.head2)?;
    Ok(Forward {
        logits,
        embeddings,
        hidden,
        local_attention,
        global_attention,
        segments,
        node_order,
        z_structure,
        pooled,
        alpha,
    })
}

/// Score multiply-accumulates of all local attention layers for the given
/// segment lengths, and of the same layers with unrestricted attention:
/// `layers · Σnᵢ² · dim` versus `layers · (Σnᵢ)² · dim`.
pub fn attention_flops(cfg: &ModelConfig, segment_lengths: &[usize]) -> (u128, u128) {
    let per = (cfg.local_layers * cfg.dim) as u128;
    let local: u128 = segment_lengths.iter().map(|&n| (n as u128).pow(2)).sum();
    let total: u128 = segment_lengths.iter().map(|&n| n as u128).sum();
    (local * per, total * total * per)
}
