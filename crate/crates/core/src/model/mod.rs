//! The hyperbolic transformer encoder.
//!
//! One block maps a `d x t` matrix of ball points to a real `d x t` matrix:
//!
//! ```text
//! attn(X) = X (+) exp0[ sum_j U_f^j U_v^j log0(X) softmax((U_k^j log0 X)^T U_q^j log0 X) ]
//! ff(A)   = log0[ A (+) exp0(U_2 relu(U_1 log0(A) + l_1 1^T)) (+) exp0(l_2 1^T) ]
//! ```
//!
//! All maps act column by column. The softmax normalizes each column, so the
//! weights mixing the `t` value columns into one output token sum to one.
//! Stacked blocks re-enter the ball through `exp0` and the learnable
//! positional encoding `E` enters as `X (+) E` before the first block.

mod checkpoint;

pub use checkpoint::{Checkpoint, TensorRecord, CHECKPOINT_FORMAT_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Backend, Eval, Matrix};
use crate::geometry::{norm, Curvature};

/// A `d x t` matrix whose columns are tokens.
pub type TokenMatrix = Matrix;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    Shape { what: String, expected: (usize, usize), got: (usize, usize) },
    #[error("non-finite activation in block {block}{} ({stage})", head.map(|h| format!(", head {h}")).unwrap_or_default())]
    NonFinite { block: usize, head: Option<usize>, stage: &'static str },
    #[error("column {column} has norm {norm}, outside the ball margin {limit}")]
    OutsideBall { column: usize, norm: f64, limit: f64 },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

fn default_blocks() -> usize {
    1
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyTConfig {
    /// Embedding dimension `d`.
    pub dim: usize,
    /// Tokens per sequence `t`.
    pub tokens: usize,
    /// Head count `h`.
    pub heads: usize,
    /// Head size `s`.
    pub head_size: usize,
    /// Feed-forward hidden width `r`.
    pub ffn_hidden: usize,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    pub curvature: Curvature,
    /// Divide attention logits by `sqrt(d)`. Off by default.
    #[serde(default)]
    pub scale_logits: bool,
    /// Vocabulary size of the optional input embedding table; 0 disables it.
    #[serde(default)]
    pub vocab: usize,
}

impl Default for HyTConfig {
    /// The `(h, s, r) = (2, 1, 4)` configuration at `d = 2, t = 4, c = 1`.
    fn default() -> Self {
        HyTConfig {
            dim: 2,
            tokens: 4,
            heads: 2,
            head_size: 1,
            ffn_hidden: 4,
            blocks: 1,
            curvature: Curvature::new(1.0).expect("valid curvature"),
            scale_logits: false,
            vocab: 0,
        }
    }
}

impl HyTConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("dim", self.dim),
            ("tokens", self.tokens),
            ("heads", self.heads),
            ("head_size", self.head_size),
            ("ffn_hidden", self.ffn_hidden),
            ("blocks", self.blocks),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn with_curvature(&self, curvature: Curvature) -> Self {
        HyTConfig { curvature, ..self.clone() }
    }
}

/// Per-head attention weights.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T = Matrix> {
    /// `U_f^j`, `d x s`.
    pub concat: T,
    /// `U_v^j`, `s x d`.
    pub value: T,
    /// `U_k^j`, `s x d`.
    pub key: T,
    /// `U_q^j`, `s x d`.
    pub query: T,
}

/// Weights of one encoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T = Matrix> {
    pub heads: Vec<HeadParams<T>>,
    /// `U_1`, `r x d`.
    pub ffn_in: T,
    /// `l_1`, `r x 1`.
    pub ffn_in_bias: T,
    /// `U_2`, `d x r`.
    pub ffn_out: T,
    /// `l_2`, `d x 1`.
    pub ffn_out_bias: T,
}

/// All trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct HyTParams<T = Matrix> {
    pub blocks: Vec<BlockParams<T>>,
    /// Positional encoding `E`, `d x t`, columns in the ball.
    pub positional: T,
    /// Optional tangent-space input embedding table, `d x v`.
    pub embedding: Option<T>,
}

impl<T> HyTParams<T> {
    /// Applies `f` to every tensor in canonical order.
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> HyTParams<U> {
        HyTParams {
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    heads: b
                        .heads
                        .iter()
                        .map(|h| HeadParams {
                            concat: f(&h.concat),
                            value: f(&h.value),
                            key: f(&h.key),
                            query: f(&h.query),
                        })
                        .collect(),
                    ffn_in: f(&b.ffn_in),
                    ffn_in_bias: f(&b.ffn_in_bias),
                    ffn_out: f(&b.ffn_out),
                    ffn_out_bias: f(&b.ffn_out_bias),
                })
                .collect(),
            positional: f(&self.positional),
            embedding: self.embedding.as_ref().map(f),
        }
    }

    /// Tensors in canonical order, with their checkpoint names.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        for (bi, b) in self.blocks.iter().enumerate() {
            for (hi, h) in b.heads.iter().enumerate() {
                let p = format!("blocks.{bi}.heads.{hi}");
                out.push((format!("{p}.concat"), &h.concat));
                out.push((format!("{p}.value"), &h.value));
                out.push((format!("{p}.key"), &h.key));
                out.push((format!("{p}.query"), &h.query));
            }
            out.push((format!("blocks.{bi}.ffn_in"), &b.ffn_in));
            out.push((format!("blocks.{bi}.ffn_in_bias"), &b.ffn_in_bias));
            out.push((format!("blocks.{bi}.ffn_out"), &b.ffn_out));
            out.push((format!("blocks.{bi}.ffn_out_bias"), &b.ffn_out_bias));
        }
        out.push(("positional".to_string(), &self.positional));
        if let Some(e) = &self.embedding {
            out.push(("embedding".to_string(), e));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            for h in &mut b.heads {
                out.push(&mut h.concat);
                out.push(&mut h.value);
                out.push(&mut h.key);
                out.push(&mut h.query);
            }
            out.push(&mut b.ffn_in);
            out.push(&mut b.ffn_in_bias);
            out.push(&mut b.ffn_out);
            out.push(&mut b.ffn_out_bias);
        }
        out.push(&mut self.positional);
        if let Some(e) = &mut self.embedding {
            out.push(e);
        }
        out
    }
}

impl HyTParams<Matrix> {
    /// Zero tensors with the shapes implied by `cfg`.
    pub fn zeros(cfg: &HyTConfig) -> Self {
        let (d, s, r) = (cfg.dim, cfg.head_size, cfg.ffn_hidden);
        let block = || BlockParams {
            heads: (0..cfg.heads)
                .map(|_| HeadParams {
                    concat: Matrix::zeros(d, s),
                    value: Matrix::zeros(s, d),
                    key: Matrix::zeros(s, d),
                    query: Matrix::zeros(s, d),
                })
                .collect(),
            ffn_in: Matrix::zeros(r, d),
            ffn_in_bias: Matrix::zeros(r, 1),
            ffn_out: Matrix::zeros(d, r),
            ffn_out_bias: Matrix::zeros(d, 1),
        };
        HyTParams {
            blocks: (0..cfg.blocks).map(|_| block()).collect(),
            positional: Matrix::zeros(d, cfg.tokens),
            embedding: (cfg.vocab > 0).then(|| Matrix::zeros(d, cfg.vocab)),
        }
    }

    /// Trainable scalars counted by the architecture formula: every block tensor
    /// plus the input embedding table. The positional encoding is not part of it.
    pub fn census(&self) -> usize {
        self.named().iter().filter(|(n, _)| n != "positional").map(|(_, m)| m.len()).sum()
    }

    /// Every trainable scalar, positional encoding included.
    pub fn total_scalars(&self) -> usize {
        self.named().iter().map(|(_, m)| m.len()).sum()
    }

    /// Checks every tensor against the shapes `cfg` implies.
    pub fn check_shapes(&self, cfg: &HyTConfig) -> Result<()> {
        let template = HyTParams::zeros(cfg);
        let mine = self.named();
        let want = template.named();
        if mine.len() != want.len() {
            return Err(ModelError::InvalidConfig(format!(
                "parameter set has {} tensors, configuration implies {}",
                mine.len(),
                want.len()
            )));
        }
        for ((name, m), (_, w)) in mine.iter().zip(&want) {
            if m.shape() != w.shape() {
                return Err(ModelError::Shape { what: name.clone(), expected: w.shape(), got: m.shape() });
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, m)| m.iter().all(|v| v.is_finite()))
    }

    /// Re-projects the positional encoding columns into the ball margin.
    pub fn project_positional(&mut self, c: Curvature) {
        let rows = self.positional.nrows();
        for col in self.positional.as_mut_slice().chunks_exact_mut(rows) {
            c.project(col);
        }
    }
}

/// Default weight scale `1/sqrt(d)`.
pub fn default_scale(cfg: &HyTConfig) -> f64 {
    1.0 / (cfg.dim as f64).sqrt()
}

/// Standard deviation of the tangent-space draw for positional encoding columns.
pub const POSITIONAL_STD: f64 = 0.1;

/// Seeded initialization: weights and biases i.i.d. uniform in `[-scale, scale]`;
/// positional columns `exp0(N(0, 0.1^2 I))`; embedding entries uniform like the weights.
pub fn init_params(cfg: &HyTConfig, seed: u64, scale: f64) -> Result<HyTParams> {
    cfg.validate()?;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(ModelError::InvalidConfig(format!("init scale must be positive, got {scale}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = HyTParams::zeros(cfg);
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v = rng.random_range(-scale..=scale);
        }
    }
    let normal = Normal::new(0.0, POSITIONAL_STD).expect("valid std");
    let tangent = Matrix::from_fn(cfg.dim, cfg.tokens, |_, _| normal.sample(&mut rng));
    params.positional = crate::autodiff::kernels::exp0_cols(&tangent, cfg.curvature);
    Ok(params)
}

pub(crate) fn check_shape(what: &str, m: &Matrix, expected: (usize, usize)) -> Result<()> {
    if m.shape() != expected {
        return Err(ModelError::Shape { what: what.to_string(), expected, got: m.shape() });
    }
    Ok(())
}

/// Every column of `x` must be finite and within the ball margin.
pub fn check_in_ball(x: &Matrix, c: Curvature) -> Result<()> {
    let rows = x.nrows();
    let limit = c.max_norm();
    for (j, col) in x.as_slice().chunks_exact(rows.max(1)).enumerate() {
        let n = norm(col);
        if !n.is_finite() || n > limit {
            return Err(ModelError::OutsideBall { column: j, norm: n, limit });
        }
    }
    Ok(())
}

fn ensure_finite<B: Backend>(b: &B, t: &B::T, block: usize, head: Option<usize>, stage: &'static str) -> Result<()> {
    if b.value(t).iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::NonFinite { block, head, stage })
    }
}

pub(crate) fn attention_layer<B: Backend>(
    b: &mut B,
    blk: &BlockParams<B::T>,
    x: &B::T,
    cfg: &HyTConfig,
    block: usize,
) -> Result<B::T> {
    let c = cfg.curvature;
    let l = b.log0(x, c);
    let mut acc: Option<B::T> = None;
    for (j, head) in blk.heads.iter().enumerate() {
        let v = b.matmul(&head.value, &l);
        let k = b.matmul(&head.key, &l);
        let q = b.matmul(&head.query, &l);
        // logits[i, k] = key_i . query_k; softmax over i for each output token k
        let mut logits = b.matmul_tn(&k, &q);
        if cfg.scale_logits {
            logits = b.scale(&logits, 1.0 / (cfg.dim as f64).sqrt());
        }
        let weights = b.softmax_cols(&logits);
        let mixed = b.matmul(&v, &weights);
        let h = b.matmul(&head.concat, &mixed);
        ensure_finite(b, &h, block, Some(j), "attention head")?;
        acc = Some(match acc {
            None => h,
            Some(prev) => b.add(&prev, &h),
        });
    }
    let sum = acc.expect("at least one head");
    let lifted = b.exp0(&sum, c);
    let out = b.mobius(x, &lifted, c);
    ensure_finite(b, &out, block, None, "attention residual")?;
    Ok(out)
}

pub(crate) fn feed_forward_layer<B: Backend>(
    b: &mut B,
    blk: &BlockParams<B::T>,
    a: &B::T,
    cfg: &HyTConfig,
    block: usize,
) -> Result<B::T> {
    let c = cfg.curvature;
    let la = b.log0(a, c);
    let pre = b.matmul(&blk.ffn_in, &la);
    let pre = b.add_col_bias(&pre, &blk.ffn_in_bias);
    let hidden = b.relu(&pre);
    let f = b.matmul(&blk.ffn_out, &hidden);
    let lifted = b.exp0(&f, c);
    let s1 = b.mobius(a, &lifted, c);
    let bias = b.broadcast_cols(&blk.ffn_out_bias, cfg.tokens);
    let bias = b.exp0(&bias, c);
    let s2 = b.mobius(&s1, &bias, c);
    let out = b.log0(&s2, c);
    ensure_finite(b, &out, block, None, "feed-forward")?;
    Ok(out)
}

/// Full encoder on a backend. With `positional`, the input is first shifted to `X (+) E`.
pub(crate) fn encode<B: Backend>(
    b: &mut B,
    p: &HyTParams<B::T>,
    cfg: &HyTConfig,
    x: &B::T,
    positional: bool,
) -> Result<B::T> {
    let c = cfg.curvature;
    let mut h = if positional { b.mobius(x, &p.positional, c) } else { x.clone() };
    for (i, blk) in p.blocks.iter().enumerate() {
        if i > 0 {
            h = b.exp0(&h, c);
        }
        let a = attention_layer(b, blk, &h, cfg, i)?;
        h = feed_forward_layer(b, blk, &a, cfg, i)?;
    }
    Ok(h)
}

/// Looks token ids up in the embedding table and lifts them into the ball.
pub(crate) fn embed<B: Backend>(b: &mut B, p: &HyTParams<B::T>, cfg: &HyTConfig, ids: &[usize]) -> Result<B::T> {
    let table = p.embedding.as_ref().ok_or_else(|| ModelError::InvalidConfig("model has no embedding table".into()))?;
    let vocab = b.value(table).ncols();
    if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
        return Err(ModelError::TokenOutOfRange { id, vocab });
    }
    if ids.len() != cfg.tokens {
        return Err(ModelError::Shape { what: "token ids".into(), expected: (1, cfg.tokens), got: (1, ids.len()) });
    }
    let cols = b.gather_cols(table, ids);
    Ok(b.exp0(&cols, cfg.curvature))
}

fn check_block(block: &BlockParams, cfg: &HyTConfig) -> Result<()> {
    let (d, s, r) = (cfg.dim, cfg.head_size, cfg.ffn_hidden);
    if block.heads.len() != cfg.heads {
        return Err(ModelError::InvalidConfig(format!(
            "block has {} heads, configuration says {}",
            block.heads.len(),
            cfg.heads
        )));
    }
    for h in &block.heads {
        check_shape("concat", &h.concat, (d, s))?;
        check_shape("value", &h.value, (s, d))?;
        check_shape("key", &h.key, (s, d))?;
        check_shape("query", &h.query, (s, d))?;
    }
    check_shape("ffn_in", &block.ffn_in, (r, d))?;
    check_shape("ffn_in_bias", &block.ffn_in_bias, (r, 1))?;
    check_shape("ffn_out", &block.ffn_out, (d, r))?;
    check_shape("ffn_out_bias", &block.ffn_out_bias, (d, 1))
}

fn check_input(x: &Matrix, cfg: &HyTConfig) -> Result<()> {
    check_shape("input", x, (cfg.dim, cfg.tokens))?;
    check_in_ball(x, cfg.curvature)
}

/// Hyperbolic self-attention layer with its Möbius residual. Ball-valued output.
pub fn hyp_attn(x: &TokenMatrix, block: &BlockParams, cfg: &HyTConfig) -> Result<TokenMatrix> {
    cfg.validate()?;
    check_input(x, cfg)?;
    check_block(block, cfg)?;
    attention_layer(&mut Eval, block, x, cfg, 0)
}

/// Hyperbolic feed-forward layer. Real-valued output in the tangent space at the origin.
pub fn hyp_ff(a: &TokenMatrix, block: &BlockParams, cfg: &HyTConfig) -> Result<TokenMatrix> {
    cfg.validate()?;
    check_input(a, cfg)?;
    check_block(block, cfg)?;
    feed_forward_layer(&mut Eval, block, a, cfg, 0)
}

/// `hyp_ff(hyp_attn(X))`.
pub fn block_forward(x: &TokenMatrix, block: &BlockParams, cfg: &HyTConfig) -> Result<TokenMatrix> {
    cfg.validate()?;
    check_input(x, cfg)?;
    check_block(block, cfg)?;
    let a = attention_layer(&mut Eval, block, x, cfg, 0)?;
    feed_forward_layer(&mut Eval, block, &a, cfg, 0)
}

/// Composition of every block, re-entering the ball with `exp0` between blocks.
/// Does not apply the positional encoding; see [`forward`].
pub fn model_forward(x: &TokenMatrix, params: &HyTParams, cfg: &HyTConfig) -> Result<TokenMatrix> {
    cfg.validate()?;
    check_input(x, cfg)?;
    params.check_shapes(cfg)?;
    encode(&mut Eval, params, cfg, x, false)
}

/// Column-wise `X (+) E`.
pub fn with_positional_encoding(x: &TokenMatrix, e: &TokenMatrix, c: Curvature) -> Result<TokenMatrix> {
    check_shape("positional encoding", e, x.shape())?;
    check_in_ball(e, c)?;
    Ok(crate::autodiff::kernels::mobius_cols(x, e, c))
}

/// `f_P(X) = f(X (+) E)`, the model with its positional encoding.
pub fn forward(params: &HyTParams, cfg: &HyTConfig, x: &TokenMatrix) -> Result<TokenMatrix> {
    cfg.validate()?;
    check_input(x, cfg)?;
    params.check_shapes(cfg)?;
    encode(&mut Eval, params, cfg, x, true)
}

/// Forward pass from token ids through the embedding table.
pub fn forward_tokens(params: &HyTParams, cfg: &HyTConfig, ids: &[usize]) -> Result<TokenMatrix> {
    cfg.validate()?;
    params.check_shapes(cfg)?;
    let x = embed(&mut Eval, params, cfg, ids)?;
    encode(&mut Eval, params, cfg, &x, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(c: f64) -> HyTConfig {
        HyTConfig { dim: 3, tokens: 5, curvature: Curvature::new(c).unwrap(), ..HyTConfig::default() }
    }

    fn input(cfg: &HyTConfig, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let t = Matrix::from_fn(cfg.dim, cfg.tokens, |_, _| normal.sample(&mut rng));
        crate::autodiff::kernels::exp0_cols(&t, cfg.curvature)
    }

    #[test]
    fn zero_attention_is_identity() {
        let cfg = cfg(1.0);
        let p = HyTParams::zeros(&cfg);
        let x = input(&cfg, 1);
        assert_eq!(hyp_attn(&x, &p.blocks[0], &cfg).unwrap(), x);
    }

    #[test]
    fn zero_feed_forward_is_log0() {
        let cfg = cfg(1.0);
        let p = HyTParams::zeros(&cfg);
        let x = input(&cfg, 2);
        let out = hyp_ff(&x, &p.blocks[0], &cfg).unwrap();
        let expected = crate::autodiff::kernels::log0_cols(&x, cfg.curvature);
        assert!((out - expected).amax() < 1e-15);
    }

    #[test]
    fn single_token_scalar_trace() {
        // d = 1, t = 1, r = 1: hand evaluation of the feed-forward layer at c = 1.
        let cfg = HyTConfig { dim: 1, tokens: 1, heads: 1, head_size: 1, ffn_hidden: 1, ..HyTConfig::default() };
        let mut p = HyTParams::zeros(&cfg);
        let b = &mut p.blocks[0];
        b.ffn_in[(0, 0)] = 0.7;
        b.ffn_in_bias[(0, 0)] = 0.1;
        b.ffn_out[(0, 0)] = -0.4;
        b.ffn_out_bias[(0, 0)] = 0.25;
        let a = 0.3f64;
        let x = Matrix::from_element(1, 1, a);

        let madd = |u: f64, v: f64| (u + v) / (1.0 + u * v);
        let hidden = (0.7 * a.atanh() + 0.1f64).max(0.0);
        let f = (-0.4 * hidden).tanh();
        let l2 = 0.25f64.tanh();
        let expected = madd(madd(a, f), l2).atanh();

        let out = hyp_ff(&x, &p.blocks[0], &cfg).unwrap();
        assert!((out[(0, 0)] - expected).abs() < 1e-14);
    }

    #[test]
    fn euclidean_path_matches_tiny_curvature() {
        let c0 = cfg(0.0);
        let c1 = cfg(1e-9);
        let p = init_params(&c0, 4, 0.8).unwrap();
        let x = input(&c0, 5).map(|v| v * 0.5);
        let a = forward(&p, &c0, &x).unwrap();
        let b = forward(&p, &c1, &x).unwrap();
        assert!((&a - &b).amax() <= 1e-6 * a.amax());
    }

    #[test]
    fn positional_zero_and_euclidean() {
        let c = cfg(1.0);
        let x = input(&c, 6);
        let zero = Matrix::zeros(c.dim, c.tokens);
        assert_eq!(with_positional_encoding(&x, &zero, c.curvature).unwrap(), x);
        let e = Matrix::from_element(c.dim, c.tokens, 0.1);
        let flat = Curvature::EUCLIDEAN;
        assert_eq!(with_positional_encoding(&x, &e, flat).unwrap(), &x + &e);
        assert!(with_positional_encoding(&x, &Matrix::zeros(2, 2), c.curvature).is_err());
    }

    #[test]
    fn init_is_deterministic_and_counted() {
        let c = HyTConfig { vocab: 11, ..cfg(1.0) };
        let a = init_params(&c, 9, default_scale(&c)).unwrap();
        assert_eq!(a, init_params(&c, 9, default_scale(&c)).unwrap());
        assert_ne!(a, init_params(&c, 10, default_scale(&c)).unwrap());
        let (h, s, r, d, v) = (2, 1, 4, 3, 11);
        assert_eq!(a.census(), 4 * s * d * h + 2 * d * r + d + r + d * v);
        assert_eq!(a.total_scalars(), a.census() + d * c.tokens);
        check_in_ball(&a.positional, c.curvature).unwrap();
        assert!(init_params(&c, 9, 0.0).is_err());
    }

    #[test]
    fn rejects_bad_shapes_and_out_of_ball_input() {
        let c = cfg(1.0);
        let p = HyTParams::zeros(&c);
        assert!(matches!(model_forward(&Matrix::zeros(2, 5), &p, &c), Err(ModelError::Shape { .. })));
        let far = Matrix::from_element(c.dim, c.tokens, 2.0);
        assert!(matches!(model_forward(&far, &p, &c), Err(ModelError::OutsideBall { .. })));
        let bad = HyTConfig { heads: 0, ..c.clone() };
        assert!(matches!(bad.validate(), Err(ModelError::InvalidConfig(_))));
    }

    #[test]
    fn non_finite_weights_are_reported_with_location() {
        let c = cfg(1.0);
        let mut p = HyTParams::zeros(&c);
        p.blocks[0].heads[1].concat[(0, 0)] = f64::NAN;
        p.blocks[0].heads[1].value[(0, 0)] = 1.0;
        let err = model_forward(&input(&c, 3), &p, &c).unwrap_err();
        assert!(matches!(err, ModelError::NonFinite { block: 0, head: Some(1), .. }), "{err}");
    }

    #[test]
    fn token_inputs_use_the_embedding_table() {
        let c = HyTConfig { vocab: 7, ..cfg(1.0) };
        let p = init_params(&c, 1, 0.5).unwrap();
        let out = forward_tokens(&p, &c, &[0, 6, 3, 3, 1]).unwrap();
        let x = crate::autodiff::kernels::exp0_cols(
            &crate::autodiff::kernels::gather_cols(p.embedding.as_ref().unwrap(), &[0, 6, 3, 3, 1]),
            c.curvature,
        );
        assert_eq!(out, forward(&p, &c, &x).unwrap());
        assert!(matches!(forward_tokens(&p, &c, &[0, 7, 1, 1, 1]), Err(ModelError::TokenOutOfRange { .. })));
    }
}
