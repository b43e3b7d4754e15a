//! Incremental Transformer encoder with block-level hidden-state recurrence.
//!
//! A block's queries come from the block itself; keys and values are the
//! cached layer inputs of up to `L` previous blocks followed by the block's own
//! layer input. Cached states enter each block's computation as constants, so
//! no gradient crosses a block boundary.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::model::{linear, Dropout, EncoderVars, LayerVars, ModelParams};
use crate::numeric::{Matrix, Real, Tape, Var, LAYER_NORM_EPS};

/// How many previous blocks a block may attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Context {
    Blocks(usize),
    Infinite,
}

impl Context {
    pub fn limit(self) -> Option<usize> {
        match self {
            Context::Blocks(l) => Some(l),
            Context::Infinite => None,
        }
    }
}

impl std::fmt::Display for Context {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Context::Blocks(l) => write!(f, "{l}"),
            Context::Infinite => f.write_str("inf"),
        }
    }
}

impl std::str::FromStr for Context {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inf" | "infinite" | "unlimited" => Ok(Context::Infinite),
            other => other
                .parse()
                .map(Context::Blocks)
                .map_err(|_| Error::invalid(format!("bad context `{s}`"))),
        }
    }
}

/// Streaming geometry: `W` frames per block, `L` blocks of left context.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub block_frames: usize,
    pub context: Context,
}

impl BlockConfig {
    pub fn new(block_frames: usize, context: Context) -> Result<Self> {
        if block_frames == 0 {
            return Err(Error::invalid("block size must be at least one frame"));
        }
        Ok(Self {
            block_frames,
            context,
        })
    }

    /// `(start, end)` frame ranges of each block; the last may be partial.
    pub fn blocks(&self, frames: usize) -> Vec<(usize, usize)> {
        (0..frames)
            .step_by(self.block_frames)
            .map(|s| (s, (s + self.block_frames).min(frames)))
            .collect()
    }
}

/// Per-stream encoder cache: for every layer, the layer inputs of the most
/// recent blocks, oldest first.
#[derive(Clone, Debug)]
pub struct EncoderState<T: Real = f32> {
    caches: Vec<VecDeque<Matrix<T>>>,
    context: Context,
    blocks_seen: usize,
}

impl<T: Real> EncoderState<T> {
    pub fn new(n_layers: usize, context: Context) -> Self {
        Self {
            caches: vec![VecDeque::new(); n_layers],
            context,
            blocks_seen: 0,
        }
    }

    pub fn blocks_seen(&self) -> usize {
        self.blocks_seen
    }

    pub fn context(&self) -> Context {
        self.context
    }

    /// Cached blocks for layer `i`, oldest first.
    pub fn cache(&self, layer: usize) -> impl Iterator<Item = &Matrix<T>> {
        self.caches[layer].iter()
    }

    pub fn cached_blocks(&self, layer: usize) -> usize {
        self.caches[layer].len()
    }

    /// Total number of scalars held in the cache.
    pub fn cached_values(&self) -> usize {
        self.caches.iter().flatten().map(Matrix::len).sum()
    }

    fn push(&mut self, layer: usize, hidden: Matrix<T>) {
        let cache = &mut self.caches[layer];
        cache.push_back(hidden);
        if let Some(limit) = self.context.limit() {
            while cache.len() > limit {
                cache.pop_front();
            }
        }
    }
}

/// Diarization embeddings for one block.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBlock<T: Real = f32> {
    pub index: usize,
    pub embeddings: Matrix<T>,
}

fn check_input<T: Real>(vars: &EncoderVars, x: &Matrix<T>) -> Result<()> {
    if x.cols() != vars.config.input_dim {
        return Err(Error::Shape {
            op: "encoder input",
            left: x.shape(),
            right: (x.rows(), vars.config.input_dim),
        });
    }
    if x.rows() == 0 {
        return Err(Error::invalid("empty block"));
    }
    Ok(())
}

fn project<T: Real>(tape: &mut Tape<'_, T>, vars: &EncoderVars, x: Var) -> Result<Var> {
    let h = linear(tape, x, vars.proj)?;
    tape.layer_norm_rows(h, vars.proj_norm.gain, vars.proj_norm.bias, T::lit(LAYER_NORM_EPS))
}

/// One post-norm Transformer layer: queries from `x`, keys/values from `kv`.
fn layer_forward<T: Real>(
    tape: &mut Tape<'_, T>,
    layer: &LayerVars,
    n_heads: usize,
    x: Var,
    kv: Var,
    mut dropout: Option<&mut Dropout>,
) -> Result<Var> {
    let eps = T::lit(LAYER_NORM_EPS);
    let d = tape.value(x).cols();
    let head_dim = d / n_heads;
    let scale = T::lit(1.0 / (head_dim as f64).sqrt());

    let q = linear(tape, x, layer.q)?;
    let k = linear(tape, kv, layer.k)?;
    let v = linear(tape, kv, layer.v)?;
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let qh = tape.slice_cols(q, lo, hi);
        let kh = tape.slice_cols(k, lo, hi);
        let vh = tape.slice_cols(v, lo, hi);
        let scores = tape.matmul_t(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let mut weights = tape.softmax_rows(scores);
        if let Some(dr) = dropout.as_deref_mut() {
            weights = dr.apply(tape, weights)?;
        }
        heads.push(tape.matmul(weights, vh)?);
    }
    let attn = if n_heads == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    let attn = linear(tape, attn, layer.o)?;
    let x1 = tape.add(x, attn)?;
    let x1 = tape.layer_norm_rows(x1, layer.norm1.gain, layer.norm1.bias, eps)?;

    let ff = linear(tape, x1, layer.ff1)?;
    let ff = tape.relu(ff);
    let mut ff = linear(tape, ff, layer.ff2)?;
    if let Some(dr) = dropout.as_deref_mut() {
        ff = dr.apply(tape, ff)?;
    }
    let x2 = tape.add(x1, ff)?;
    tape.layer_norm_rows(x2, layer.norm2.gain, layer.norm2.bias, eps)
}

/// Encodes one block on an existing tape and advances `state`.
///
/// `x` is the block's `W'×input_dim` feature matrix already on the tape.
pub fn encode_block_on<'p, T: Real>(
    tape: &mut Tape<'p, T>,
    vars: &EncoderVars,
    state: &mut EncoderState<T>,
    x: Var,
    mut dropout: Option<&mut Dropout>,
) -> Result<Var> {
    check_input(vars, tape.value(x))?;
    if state.caches.len() != vars.layers.len() {
        return Err(Error::invalid(format!(
            "encoder state has {} layers, model has {}",
            state.caches.len(),
            vars.layers.len()
        )));
    }
    let mut h = project(tape, vars, x)?;
    for (i, layer) in vars.layers.iter().enumerate() {
        let mut kv_parts: Vec<Var> = state.caches[i]
            .iter()
            .map(|m| tape.constant(m.clone()))
            .collect();
        kv_parts.push(h);
        let kv = if kv_parts.len() == 1 {
            h
        } else {
            tape.concat_rows(&kv_parts)?
        };
        let next = layer_forward(tape, layer, vars.config.n_heads, h, kv, dropout.as_deref_mut())?;
        let hidden = tape.value(h).clone();
        state.push(i, hidden);
        h = next;
    }
    state.blocks_seen += 1;
    Ok(h)
}

/// Full self-attention over the whole sequence, on an existing tape.
pub fn encode_offline_on<T: Real>(
    tape: &mut Tape<'_, T>,
    vars: &EncoderVars,
    x: Var,
    mut dropout: Option<&mut Dropout>,
) -> Result<Var> {
    check_input(vars, tape.value(x))?;
    let mut h = project(tape, vars, x)?;
    for layer in &vars.layers {
        h = layer_forward(tape, layer, vars.config.n_heads, h, h, dropout.as_deref_mut())?;
    }
    Ok(h)
}

/// Encodes the next block of a stream, returning its embeddings.
pub fn encode_block<T: Real>(
    params: &ModelParams<T>,
    state: &mut EncoderState<T>,
    x_b: &Matrix<T>,
) -> Result<EmbeddingBlock<T>> {
    let mut tape = Tape::new();
    let vars = params.register_encoder(&mut tape);
    let index = state.blocks_seen;
    let x = tape.constant_ref(x_b);
    let e = encode_block_on(&mut tape, &vars, state, x, None)?;
    Ok(EmbeddingBlock {
        index,
        embeddings: tape.value(e).clone(),
    })
}

/// Offline encoder: every frame attends to every other frame.
pub fn encode_offline<T: Real>(params: &ModelParams<T>, x: &Matrix<T>) -> Result<Matrix<T>> {
    let mut tape = Tape::new();
    let vars = params.register_encoder(&mut tape);
    let xv = tape.constant_ref(x);
    let e = encode_offline_on(&mut tape, &vars, xv, None)?;
    Ok(tape.value(e).clone())
}

/// Encodes a whole stream block by block with a fresh state.
pub fn encode_stream<T: Real>(
    params: &ModelParams<T>,
    x: &Matrix<T>,
    blocks: BlockConfig,
) -> Result<Vec<EmbeddingBlock<T>>> {
    let mut state = EncoderState::new(params.config.n_layers, blocks.context);
    blocks
        .blocks(x.rows())
        .into_iter()
        .map(|(s, e)| encode_block(params, &mut state, &x.slice_rows(s, e)))
        .collect()
}

/// No-cache baseline: for every block, re-encodes the stream prefix from
/// scratch and keeps the last block. Quadratic in stream length.
pub fn replay_encode<T: Real>(
    params: &ModelParams<T>,
    x: &Matrix<T>,
    blocks: BlockConfig,
) -> Result<Vec<EmbeddingBlock<T>>> {
    let ranges = blocks.blocks(x.rows());
    let mut out = Vec::with_capacity(ranges.len());
    for b in 0..ranges.len() {
        let mut state = EncoderState::new(params.config.n_layers, blocks.context);
        let mut last = None;
        for &(s, e) in &ranges[..=b] {
            last = Some(encode_block(params, &mut state, &x.slice_rows(s, e))?);
        }
        out.push(last.expect("at least one block"));
    }
    Ok(out)
}

/// Stacks block embeddings back into a `T×d_model` matrix.
pub fn stack_blocks<T: Real>(blocks: &[EmbeddingBlock<T>]) -> Result<Matrix<T>> {
    let mats: Vec<&Matrix<T>> = blocks.iter().map(|b| &b.embeddings).collect();
    Matrix::concat_rows(&mats)
}
