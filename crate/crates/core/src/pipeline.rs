//! Blockwise streaming inference: unlimited-latency (attractors decoded once
//! at the end of the stream) and limited-latency (attractors decoded per
//! block) variants, plus the offline reference.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::eda::{
    decode_attractors_with_floor, frame_posteriors, lstm_encode, AttractorSet, LstmState, MAX_SPEAKERS,
};
use crate::error::{Error, Result};
use crate::frontend::FeatureMatrix;
use crate::model::{Lstm, ModelParams};
use crate::numeric::{Matrix, Real};
use crate::xencoder::{encode_block, encode_offline, BlockConfig, Context, EncoderState};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Ul,
    Ll,
    Offline,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Ul => "ul",
            Variant::Ll => "ll",
            Variant::Offline => "offline",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ul" => Ok(Variant::Ul),
            "ll" => Ok(Variant::Ll),
            "offline" => Ok(Variant::Offline),
            _ => Err(Error::invalid(format!("unknown variant `{s}` (ul, ll, offline)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ShuffleMode {
    #[default]
    None,
    WithinBlock,
    AcrossBlocks,
}

impl fmt::Display for ShuffleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShuffleMode::None => "none",
            ShuffleMode::WithinBlock => "within",
            ShuffleMode::AcrossBlocks => "across",
        })
    }
}

impl FromStr for ShuffleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ShuffleMode::None),
            "within" | "within_block" => Ok(ShuffleMode::WithinBlock),
            "across" | "across_blocks" => Ok(ShuffleMode::AcrossBlocks),
            _ => Err(Error::invalid(format!("unknown shuffle mode `{s}` (none, within, across)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Heuristics {
    pub reorder: bool,
    pub average: bool,
    pub shuffle: ShuffleMode,
}

impl Heuristics {
    pub fn all() -> Self {
        Self {
            reorder: true,
            average: true,
            shuffle: ShuffleMode::AcrossBlocks,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceConfig {
    pub variant: Variant,
    pub block_frames: usize,
    pub context: Context,
    pub tau: f64,
    pub heuristics: Heuristics,
    pub activity_threshold: f64,
    pub shuffle_seed: u64,
    pub max_speakers: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Ll,
            block_frames: 100,
            context: Context::Blocks(1),
            tau: 0.5,
            heuristics: Heuristics::default(),
            activity_threshold: 0.5,
            shuffle_seed: 0,
            max_speakers: MAX_SPEAKERS,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_frames == 0 {
            return Err(Error::invalid("block size must be at least one frame"));
        }
        for (name, v) in [("tau", self.tau), ("activity threshold", self.activity_threshold)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::invalid(format!("{name} {v} outside (0, 1)")));
            }
        }
        if self.max_speakers == 0 {
            return Err(Error::invalid("max_speakers must be at least 1"));
        }
        Ok(())
    }

    pub fn blocks(&self) -> Result<BlockConfig> {
        BlockConfig::new(self.block_frames, self.context)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub speaker: usize,
    pub onset: f64,
    pub duration: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiarizationResult<T: Real = f32> {
    /// `T×S`; column `j` belongs to `speaker_ids[j]`.
    pub posterior: Matrix<T>,
    pub speaker_ids: Vec<usize>,
    pub segments: Vec<Segment>,
    /// Speakers counted in each block (limited-latency only).
    pub s_per_block: Vec<usize>,
    pub frame_period: f64,
}

impl<T: Real> DiarizationResult<T> {
    pub fn n_speakers(&self) -> usize {
        self.speaker_ids.len()
    }
}

/// Labels for one block of a limited-latency stream.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockOutput<T: Real = f32> {
    pub index: usize,
    pub start_frame: usize,
    /// `W'×S_b`; column `j` belongs to speaker ID `j`.
    pub posterior: Matrix<T>,
    pub n_speakers: usize,
    pub probs: Vec<T>,
}

/// Frame order for the LSTM encoder over blocks of the given sizes.
pub fn shuffle_order(sizes: &[usize], mode: ShuffleMode, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..total).collect();
    match mode {
        ShuffleMode::None => {}
        ShuffleMode::AcrossBlocks => order.shuffle(rng),
        ShuffleMode::WithinBlock => {
            let mut start = 0;
            for &n in sizes {
                order[start..start + n].shuffle(rng);
                start += n;
            }
        }
    }
    order
}

fn shuffle_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Concatenates `blocks` and permutes the rows according to `mode`.
pub fn shuffle_embeddings<T: Real>(blocks: &[Matrix<T>], mode: ShuffleMode, seed: u64) -> Result<Matrix<T>> {
    shuffle_blocks(blocks.iter().collect::<Vec<_>>().as_slice(), mode, seed, 0)
}

fn shuffle_blocks<T: Real>(blocks: &[&Matrix<T>], mode: ShuffleMode, seed: u64, stream: u64) -> Result<Matrix<T>> {
    let stacked = Matrix::concat_rows(blocks)?;
    if mode == ShuffleMode::None {
        return Ok(stacked);
    }
    let sizes: Vec<usize> = blocks.iter().map(|b| b.rows()).collect();
    let order = shuffle_order(&sizes, mode, &mut shuffle_rng(seed, stream));
    Ok(stacked.gather_rows(&order))
}

fn cosine<T: Real>(a: &[T], b: &[T]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x.to_f64().unwrap_or(0.0), y.to_f64().unwrap_or(0.0));
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

/// Greedy cosine matching of `cur` to `prev`.
///
/// Returns the order of `cur` rows: position `i < |prev|` holds the match of
/// `prev[i]`, followed by unmatched rows of `cur` in their original order.
pub fn reorder_attractors<T: Real>(prev: &AttractorSet<T>, cur: &AttractorSet<T>) -> Vec<usize> {
    let mut used = vec![false; cur.len()];
    let mut order = Vec::with_capacity(cur.len());
    for i in 0..prev.len() {
        let mut best: Option<(usize, f64)> = None;
        for (j, taken) in used.iter().enumerate() {
            if *taken {
                continue;
            }
            let c = cosine(prev.attractor(i), cur.attractor(j));
            if best.is_none_or(|(_, b)| c > b) {
                best = Some((j, c));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
            order.push(j);
        }
    }
    order.extend((0..cur.len()).filter(|&j| !used[j]));
    order
}

/// Averages attractors whose speaker IDs appear in both sets.
pub fn average_attractors<T: Real>(prev: &AttractorSet<T>, cur: &AttractorSet<T>) -> AttractorSet<T> {
    let half = T::lit(0.5);
    let mut out = cur.clone();
    for j in 0..cur.len() {
        let id = cur.speaker_ids[j];
        if let Some(i) = prev.speaker_ids.iter().position(|&p| p == id) {
            let a = prev.attractor(i).to_vec();
            for (o, p) in out.vectors.row_mut(j).iter_mut().zip(a) {
                *o = (p + *o) * half;
            }
        }
    }
    out
}

/// Runs of frames with `p ≥ threshold` per column become segments.
pub fn posterior_to_segments<T: Real>(
    posterior: &Matrix<T>,
    speaker_ids: &[usize],
    threshold: f64,
    frame_period: f64,
) -> Vec<Segment> {
    let thr = T::lit(threshold);
    let mut out = Vec::new();
    for s in 0..posterior.cols() {
        let mut run_start = None;
        for t in 0..=posterior.rows() {
            let active = t < posterior.rows() && posterior.get(t, s) >= thr;
            match (active, run_start) {
                (true, None) => run_start = Some(t),
                (false, Some(start)) => {
                    out.push(Segment {
                        speaker: speaker_ids.get(s).copied().unwrap_or(s),
                        onset: start as f64 * frame_period,
                        duration: (t - start) as f64 * frame_period,
                    });
                    run_start = None;
                }
                _ => {}
            }
        }
    }
    out
}

/// The LSTM-encoder recursion shared by both streaming variants.
///
/// With a finite context `L`, block `b` feeds the embeddings of blocks
/// `b−L..b` starting from the state stored after block `b−L` (zero when that
/// block does not exist). With unlimited context, only the current block is
/// fed, starting from the state after block `b−1`.
#[derive(Clone, Debug)]
pub struct AttractorEncoder<T: Real = f32> {
    context: Context,
    shuffle: ShuffleMode,
    seed: u64,
    d: usize,
    window: VecDeque<Matrix<T>>,
    states: VecDeque<LstmState<T>>,
    blocks: u64,
}

impl<T: Real> AttractorEncoder<T> {
    pub fn new(d: usize, context: Context, shuffle: ShuffleMode, seed: u64) -> Self {
        Self {
            context,
            shuffle,
            seed,
            d,
            window: VecDeque::new(),
            states: VecDeque::new(),
            blocks: 0,
        }
    }

    /// Consumes block embeddings and returns `(h_b, c_b)`.
    pub fn step(&mut self, lstm: &Lstm<T>, e_b: &Matrix<T>) -> Result<LstmState<T>> {
        let stream = self.blocks;
        self.blocks += 1;
        match self.context.limit() {
            None => {
                let init = self.states.back().cloned().unwrap_or_else(|| LstmState::zeros(self.d));
                let input = shuffle_blocks(&[e_b], self.shuffle, self.seed, stream)?;
                let next = lstm_encode(lstm, &input, &init)?;
                self.states.clear();
                self.states.push_back(next.clone());
                Ok(next)
            }
            Some(l) => {
                let init = if l > 0 && self.states.len() == l {
                    self.states.front().cloned().expect("non-empty")
                } else {
                    LstmState::zeros(self.d)
                };
                let mut parts: Vec<&Matrix<T>> = self.window.iter().collect();
                parts.push(e_b);
                let input = shuffle_blocks(&parts, self.shuffle, self.seed, stream)?;
                let next = lstm_encode(lstm, &input, &init)?;
                if l > 0 {
                    self.states.push_back(next.clone());
                    self.window.push_back(e_b.clone());
                    if self.states.len() > l {
                        self.states.pop_front();
                        self.window.pop_front();
                    }
                }
                Ok(next)
            }
        }
    }
}

fn check_features<T: Real>(params: &ModelParams<T>, x: &Matrix<T>) -> Result<()> {
    if x.rows() == 0 {
        return Err(Error::invalid("empty feature stream"));
    }
    if x.cols() != params.config.input_dim {
        return Err(Error::Shape {
            op: "pipeline input",
            left: x.shape(),
            right: (x.rows(), params.config.input_dim),
        });
    }
    Ok(())
}

/// Limited-latency session: labels for each block are emitted as soon as the
/// block has been consumed.
pub struct LlSession<'m, T: Real = f32> {
    params: &'m ModelParams<T>,
    cfg: InferenceConfig,
    encoder: EncoderState<T>,
    attractors: AttractorEncoder<T>,
    prev: Option<AttractorSet<T>>,
    s_prev: usize,
    next_start: usize,
    index: usize,
}

impl<'m, T: Real> LlSession<'m, T> {
    pub fn new(params: &'m ModelParams<T>, cfg: &InferenceConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            params,
            encoder: EncoderState::new(params.config.n_layers, cfg.context),
            attractors: AttractorEncoder::new(
                params.config.d_model,
                cfg.context,
                cfg.heuristics.shuffle,
                cfg.shuffle_seed,
            ),
            cfg: cfg.clone(),
            prev: None,
            s_prev: 0,
            next_start: 0,
            index: 0,
        })
    }

    pub fn speakers(&self) -> usize {
        self.s_prev
    }

    pub fn push_block(&mut self, x_b: &Matrix<T>) -> Result<BlockOutput<T>> {
        let e = encode_block(self.params, &mut self.encoder, x_b)?.embeddings;
        let state = self.attractors.step(&self.params.eda_enc, &e)?;
        let decoded = decode_attractors_with_floor(
            self.params,
            &state,
            self.cfg.max_speakers,
            T::lit(self.cfg.tau),
            self.s_prev,
        )?;
        let mut cur = decoded.active();
        if let Some(prev) = &self.prev {
            if self.cfg.heuristics.reorder {
                let order = reorder_attractors(prev, &cur);
                cur = cur.permuted(&order);
                cur.speaker_ids = (0..cur.len()).collect();
            }
            if self.cfg.heuristics.average {
                cur = average_attractors(prev, &cur);
            }
        }
        assert!(
            cur.counted >= self.s_prev,
            "speaker count dropped from {} to {} at block {}",
            self.s_prev,
            cur.counted,
            self.index
        );
        let posterior = frame_posteriors(&e, &cur)?;
        let out = BlockOutput {
            index: self.index,
            start_frame: self.next_start,
            n_speakers: cur.counted,
            probs: cur.probs.clone(),
            posterior,
        };
        self.s_prev = cur.counted;
        self.prev = Some(cur);
        self.next_start += x_b.rows();
        self.index += 1;
        Ok(out)
    }
}

fn assemble<T: Real>(blocks: &[BlockOutput<T>], frames: usize) -> Matrix<T> {
    let s = blocks.iter().map(|b| b.n_speakers).max().unwrap_or(0);
    let mut out = Matrix::zeros(frames, s);
    for b in blocks {
        for t in 0..b.posterior.rows() {
            out.row_mut(b.start_frame + t)[..b.n_speakers].copy_from_slice(b.posterior.row(t));
        }
    }
    out
}

fn finish<T: Real>(
    posterior: Matrix<T>,
    s_per_block: Vec<usize>,
    cfg: &InferenceConfig,
    frame_period: f64,
) -> DiarizationResult<T> {
    let speaker_ids: Vec<usize> = (0..posterior.cols()).collect();
    let segments = posterior_to_segments(&posterior, &speaker_ids, cfg.activity_threshold, frame_period);
    DiarizationResult {
        posterior,
        speaker_ids,
        segments,
        s_per_block,
        frame_period,
    }
}

/// Limited-latency inference over a whole stream.
pub fn run_ll_matrix<T: Real>(
    x: &Matrix<T>,
    frame_period: f64,
    cfg: &InferenceConfig,
    params: &ModelParams<T>,
) -> Result<(DiarizationResult<T>, Vec<BlockOutput<T>>)> {
    check_features(params, x)?;
    let mut session = LlSession::new(params, cfg)?;
    let blocks = cfg
        .blocks()?
        .blocks(x.rows())
        .into_iter()
        .map(|(s, e)| session.push_block(&x.slice_rows(s, e)))
        .collect::<Result<Vec<_>>>()?;
    let posterior = assemble(&blocks, x.rows());
    let s_per_block = blocks.iter().map(|b| b.n_speakers).collect();
    Ok((finish(posterior, s_per_block, cfg, frame_period), blocks))
}

/// Unlimited-latency inference: blockwise encoding, one attractor set decoded
/// at the end of the stream.
pub fn run_ul_matrix<T: Real>(
    x: &Matrix<T>,
    frame_period: f64,
    cfg: &InferenceConfig,
    params: &ModelParams<T>,
) -> Result<DiarizationResult<T>> {
    check_features(params, x)?;
    cfg.validate()?;
    let mut encoder = EncoderState::new(params.config.n_layers, cfg.context);
    let mut lstm = AttractorEncoder::new(
        params.config.d_model,
        cfg.context,
        cfg.heuristics.shuffle,
        cfg.shuffle_seed,
    );
    let mut embeddings = Vec::new();
    let mut state = LstmState::zeros(params.config.d_model);
    for (s, e) in cfg.blocks()?.blocks(x.rows()) {
        let emb = encode_block(params, &mut encoder, &x.slice_rows(s, e))?.embeddings;
        state = lstm.step(&params.eda_enc, &emb)?;
        embeddings.push(emb);
    }
    let set = decode_attractors_with_floor(params, &state, cfg.max_speakers, T::lit(cfg.tau), 0)?;
    let refs: Vec<&Matrix<T>> = embeddings.iter().collect();
    let posterior = frame_posteriors(&Matrix::concat_rows(&refs)?, &set)?;
    Ok(finish(posterior, Vec::new(), cfg, frame_period))
}

/// Offline reference: full self-attention and one LSTM pass over the stream.
pub fn run_offline_matrix<T: Real>(
    x: &Matrix<T>,
    frame_period: f64,
    cfg: &InferenceConfig,
    params: &ModelParams<T>,
) -> Result<DiarizationResult<T>> {
    check_features(params, x)?;
    cfg.validate()?;
    let e = encode_offline(params, x)?;
    let input = shuffle_blocks(&[&e], cfg.heuristics.shuffle, cfg.shuffle_seed, 0)?;
    let d = params.config.d_model;
    let state = lstm_encode(&params.eda_enc, &input, &LstmState::zeros(d))?;
    let set = decode_attractors_with_floor(params, &state, cfg.max_speakers, T::lit(cfg.tau), 0)?;
    let posterior = frame_posteriors(&e, &set)?;
    Ok(finish(posterior, Vec::new(), cfg, frame_period))
}

pub fn run_ul(features: &FeatureMatrix, cfg: &InferenceConfig, params: &ModelParams) -> Result<DiarizationResult> {
    run_ul_matrix(&features.frames, features.frame_period, cfg, params)
}

pub fn run_ll(features: &FeatureMatrix, cfg: &InferenceConfig, params: &ModelParams) -> Result<DiarizationResult> {
    Ok(run_ll_matrix(&features.frames, features.frame_period, cfg, params)?.0)
}

pub fn run_offline(features: &FeatureMatrix, cfg: &InferenceConfig, params: &ModelParams) -> Result<DiarizationResult> {
    run_offline_matrix(&features.frames, features.frame_period, cfg, params)
}

/// Dispatches on `cfg.variant`.
pub fn run(features: &FeatureMatrix, cfg: &InferenceConfig, params: &ModelParams) -> Result<DiarizationResult> {
    match cfg.variant {
        Variant::Ul => run_ul(features, cfg, params),
        Variant::Ll => run_ll(features, cfg, params),
        Variant::Offline => run_offline(features, cfg, params),
    }
}
