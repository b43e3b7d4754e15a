//! Training: permutation-invariant BCE plus attractor existence loss, Adam
//! with a warmup schedule, in causal (blockwise encoder) or offline mode.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::eda::{decode_fixed_on, lstm_encode_on};
use crate::error::{Error, Result};
use crate::model::{Dropout, EncoderVars, ModelParams};
use crate::numeric::tape::{bce_mean, OpKind};
use crate::numeric::{Matrix, Real, Tape, Var};
use crate::simkit::{simulate, ConversationSpec};
use crate::xencoder::{encode_block_on, encode_offline_on, BlockConfig, Context, EncoderState};

pub const BCE_CLIP: f64 = 1e-7;
pub const MAX_PIT_SPEAKERS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    Offline,
    Causal,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Offline => "offline",
            TrainMode::Causal => "causal",
        })
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "offline" => Ok(TrainMode::Offline),
            "causal" => Ok(TrainMode::Causal),
            _ => Err(Error::invalid(format!("unknown training mode `{s}` (offline, causal)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub block_frames: usize,
    pub context: Context,
    pub batch_size: usize,
    pub steps: usize,
    pub warmup_steps: usize,
    pub lr_scale: f64,
    pub seed: u64,
    pub exist_weight: f64,
    pub dropout: f64,
    /// Shuffle embeddings before the attractor LSTM encoder.
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            mode: TrainMode::Causal,
            block_frames: 10,
            context: Context::Blocks(1),
            batch_size: 8,
            steps: 2000,
            warmup_steps: 1000,
            lr_scale: 1.0,
            seed: 0,
            exist_weight: 1.0,
            dropout: 0.1,
            shuffle: true,
        }
    }

    /// Desk settings without dropout, for the 2000-step toy run.
    pub fn toy() -> Self {
        Self {
            dropout: 0.0,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 {
            return Err(Error::invalid("warmup_steps must be at least 1"));
        }
        if self.batch_size == 0 || self.block_frames == 0 {
            return Err(Error::invalid("batch size and block size must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn blocks(&self) -> Result<BlockConfig> {
        BlockConfig::new(self.block_frames, self.context)
    }
}

/// `k·d^(−1/2)·min(step^(−1/2), step·warmup^(−3/2))`, with `step ≥ 1`.
pub fn noam_lr(step: usize, d_model: usize, warmup: usize, k: f64) -> f64 {
    let s = step.max(1) as f64;
    k * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5))
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn go(cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == used.len() {
            out.push(cur.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                go(cur, used, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::with_capacity(n), &mut vec![false; n], &mut out);
    out
}

/// Column order of `labels` minimising BCE against `pred`, with that loss.
pub fn best_permutation<T: Real>(pred: &Matrix<T>, labels: &Matrix<T>) -> Result<(Vec<usize>, T)> {
    if pred.shape() != labels.shape() {
        return Err(Error::Shape {
            op: "pit_bce_loss",
            left: pred.shape(),
            right: labels.shape(),
        });
    }
    if labels.cols() > MAX_PIT_SPEAKERS {
        return Err(Error::invalid(format!(
            "{} speakers exceeds the exhaustive limit of {MAX_PIT_SPEAKERS}",
            labels.cols()
        )));
    }
    let clip = T::lit(BCE_CLIP);
    let mut best: Option<(Vec<usize>, T)> = None;
    for perm in permutations(labels.cols()) {
        let loss = bce_mean(pred, &labels.gather_cols(&perm), clip)?;
        if best.as_ref().is_none_or(|(_, b)| loss < *b) {
            best = Some((perm, loss));
        }
    }
    Ok(best.expect("at least the empty permutation"))
}

/// Minimum over reference column permutations of the mean BCE.
pub fn pit_bce_loss<T: Real>(pred: &Matrix<T>, labels: &Matrix<T>) -> Result<T> {
    Ok(best_permutation(pred, labels)?.1)
}

/// Targets `[1; s_true]` followed by a single 0.
pub fn existence_targets<T: Real>(s_true: usize) -> Matrix<T> {
    Matrix::from_fn(1, s_true + 1, |_, j| if j < s_true { T::one() } else { T::zero() })
}

pub fn existence_loss<T: Real>(probs: &[T], s_true: usize) -> Result<T> {
    if probs.len() != s_true + 1 {
        return Err(Error::invalid(format!(
            "{} existence probabilities for {s_true} speakers",
            probs.len()
        )));
    }
    let p = Matrix::row_vector(probs.to_vec());
    bce_mean(&p, &existence_targets(s_true), T::lit(BCE_CLIP))
}

/// One training sequence: `T×F` features and `T×S` 0/1 labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Example<T: Real = f32> {
    pub features: Matrix<T>,
    pub labels: Matrix<T>,
}

impl<T: Real> Example<T> {
    pub fn new(features: Matrix<T>, labels: Matrix<T>) -> Result<Self> {
        if features.rows() != labels.rows() || features.rows() == 0 {
            return Err(Error::invalid(format!(
                "{} feature frames vs {} label frames",
                features.rows(),
                labels.rows()
            )));
        }
        Ok(Self { features, labels })
    }

    /// Drops speakers that never speak.
    pub fn active_labels(&self) -> Matrix<T> {
        let keep: Vec<usize> = (0..self.labels.cols())
            .filter(|&s| (0..self.labels.rows()).any(|t| self.labels.get(t, s) > T::lit(0.5)))
            .collect();
        self.labels.gather_cols(&keep)
    }
}

/// Loss terms of one forward pass, averaged over the batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub pit: f64,
    pub exist: f64,
}

/// Knobs of the forward pass that are not model parameters.
pub struct ForwardOptions<'a, T: Real> {
    pub mode: TrainMode,
    pub blocks: BlockConfig,
    pub exist_weight: f64,
    pub dropout: Option<&'a mut Dropout>,
    pub shuffle: Option<&'a mut ChaCha8Rng>,
    /// Encoder state before each block, replayed instead of the live cache.
    pub frozen_caches: Option<&'a [Vec<EncoderState<T>>]>,
    /// Receives the encoder state before each block.
    pub record_caches: Option<&'a mut Vec<Vec<EncoderState<T>>>>,
}

/// Causal embeddings: blocks encoded in order with stop-gradient caches.
pub fn causal_embeddings_on<T: Real>(
    tape: &mut Tape<'_, T>,
    vars: &EncoderVars,
    x: Var,
    blocks: BlockConfig,
    mut dropout: Option<&mut Dropout>,
    frozen: Option<&[EncoderState<T>]>,
    mut record: Option<&mut Vec<EncoderState<T>>>,
) -> Result<Var> {
    let frames = tape.value(x).rows();
    let mut state = EncoderState::new(vars.layers.len(), blocks.context);
    let mut parts = Vec::new();
    for (b, (s, e)) in blocks.blocks(frames).into_iter().enumerate() {
        if let Some(rec) = record.as_deref_mut() {
            rec.push(state.clone());
        }
        if let Some(f) = frozen {
            state = f[b].clone();
        }
        let xb = tape.slice_rows(x, s, e);
        parts.push(encode_block_on(tape, vars, &mut state, xb, dropout.as_deref_mut())?);
    }
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        tape.concat_rows(&parts)
    }
}

/// Builds the batch loss on `tape`; returns the loss variable and its terms.
pub fn batch_loss_on<'p, T: Real>(
    tape: &mut Tape<'p, T>,
    params: &'p ModelParams<T>,
    batch: &'p [Example<T>],
    opts: &mut ForwardOptions<'_, T>,
) -> Result<(Var, Vec<Var>, LossTerms)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let vars = params.register(tape);
    let clip = T::lit(BCE_CLIP);
    let mut losses = Vec::with_capacity(batch.len());
    let (mut pit_sum, mut exist_sum) = (0.0, 0.0);
    for (i, ex) in batch.iter().enumerate() {
        let x = tape.constant_ref(&ex.features);
        let e = match opts.mode {
            TrainMode::Offline => encode_offline_on(tape, &vars.encoder, x, opts.dropout.as_deref_mut())?,
            TrainMode::Causal => {
                let frozen = opts.frozen_caches.map(|f| f[i].as_slice());
                let mut rec = Vec::new();
                let out = causal_embeddings_on(
                    tape,
                    &vars.encoder,
                    x,
                    opts.blocks,
                    opts.dropout.as_deref_mut(),
                    frozen,
                    opts.record_caches.as_ref().map(|_| &mut rec),
                )?;
                if let Some(r) = opts.record_caches.as_deref_mut() {
                    r.push(rec);
                }
                out
            }
        };
        let frames = tape.value(e).rows();
        let eda_in = match opts.shuffle.as_deref_mut() {
            Some(rng) => {
                let mut order: Vec<usize> = (0..frames).collect();
                order.shuffle(rng);
                tape.gather_rows(e, &order)
            }
            None => e,
        };
        let d = params.config.d_model;
        let h0 = tape.constant(Matrix::zeros(1, d));
        let c0 = tape.constant(Matrix::zeros(1, d));
        let state = lstm_encode_on(tape, vars.eda.enc, eda_in, (h0, c0))?;

        let labels = ex.active_labels();
        let s_true = labels.cols();
        let (attractors, probs) = decode_fixed_on(tape, &vars.eda, state, s_true + 1)?;

        let p = tape.concat_cols(&probs)?;
        let exist = tape.bce_mean(p, &existence_targets(s_true), clip)?;
        exist_sum += tape.scalar(exist).to_f64().unwrap_or(f64::NAN);
        let mut loss = tape.scale(exist, T::lit(opts.exist_weight));
        if s_true > 0 {
            let a = tape.concat_rows(&attractors[..s_true])?;
            let logits = tape.matmul_t(e, a)?;
            let yhat = tape.sigmoid(logits);
            let (perm, _) = best_permutation(tape.value(yhat), &labels)?;
            let pit = tape.bce_mean(yhat, &labels.gather_cols(&perm), clip)?;
            pit_sum += tape.scalar(pit).to_f64().unwrap_or(f64::NAN);
            loss = tape.add(loss, pit)?;
        }
        losses.push(loss);
    }
    let stacked = tape.concat_cols(&losses)?;
    let total = tape.sum(stacked);
    let loss = tape.scale(total, T::lit(1.0 / batch.len() as f64));
    let n = batch.len() as f64;
    let terms = LossTerms {
        total: tape.scalar(loss).to_f64().unwrap_or(f64::NAN),
        pit: pit_sum / n,
        exist: exist_sum / n,
    };
    Ok((loss, vars.ordered(), terms))
}

/// Loss and gradients (in [`ModelParams::named`] order).
pub fn loss_and_gradients<T: Real>(
    params: &ModelParams<T>,
    batch: &[Example<T>],
    opts: &mut ForwardOptions<'_, T>,
    fault: Option<OpKind>,
) -> Result<(LossTerms, Vec<Matrix<T>>)> {
    let mut tape = Tape::new();
    if let Some(k) = fault {
        tape.inject_backward_fault(k);
    }
    let (loss, ordered, terms) = batch_loss_on(&mut tape, params, batch, opts)?;
    let mut grads = tape.backward(loss)?;
    let out = ordered
        .iter()
        .map(|&v| {
            grads.take(v).unwrap_or_else(|| {
                let (r, c) = tape.value(v).shape();
                Matrix::zeros(r, c)
            })
        })
        .collect();
    Ok((terms, out))
}

/// Adam with β₁ = 0.9, β₂ = 0.98, ε = 1e-9.
#[derive(Clone, Debug)]
pub struct Adam<T: Real = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: usize,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros: Vec<Matrix<T>> = params
            .named()
            .iter()
            .map(|(_, m)| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn update(&mut self, params: &mut ModelParams<T>, grads: &[Matrix<T>], lr: f64) -> Result<()> {
        let tensors = params.tensors_mut();
        if tensors.len() != grads.len() {
            return Err(Error::invalid(format!("{} gradients for {} tensors", grads.len(), tensors.len())));
        }
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.step as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.step as i32));
        let (lr, eps) = (T::lit(lr), T::lit(self.eps));
        for (((p, g), m), v) in tensors.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub pit: f64,
    pub exist: f64,
}

impl fmt::Display for StepMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} lr={:.6e} loss={:.6} pit={:.6} exist={:.6}",
            self.step, self.lr, self.loss, self.pit, self.exist
        )
    }
}

/// Source of training batches.
pub trait BatchSource<T: Real> {
    fn batch(&mut self, step: usize) -> Result<Vec<Example<T>>>;
}

/// The same batch at every step.
pub struct FixedBatch<T: Real>(pub Vec<Example<T>>);

impl<T: Real> BatchSource<T> for FixedBatch<T> {
    fn batch(&mut self, _step: usize) -> Result<Vec<Example<T>>> {
        Ok(self.0.clone())
    }
}

/// 10 s two-speaker conversations used to train the toy model.
pub fn toy_conversations() -> ConversationSpec {
    ConversationSpec {
        total_frames: 100,
        ..ConversationSpec::default()
    }
}

/// Fresh simulated conversations every step. Speaker counts cycle through
/// `speakers`; seeds derive from `seed`, the step and the position in the
/// batch.
pub struct SimulatedSource {
    pub template: ConversationSpec,
    pub speakers: Vec<usize>,
    /// Conversation lengths drawn per example; empty keeps `template.total_frames`.
    pub lengths: Vec<usize>,
    pub batch_size: usize,
    pub seed: u64,
}

impl SimulatedSource {
    pub fn conversation_seed(&self, step: usize, i: usize) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add((step as u64) << 20)
            .wrapping_add(i as u64)
    }
}

impl<T: Real> BatchSource<T> for SimulatedSource {
    fn batch(&mut self, step: usize) -> Result<Vec<Example<T>>> {
        (0..self.batch_size)
            .map(|i| {
                let k = step * self.batch_size + i;
                let n = self.speakers[k % self.speakers.len()];
                let seed = self.conversation_seed(step, i);
                let total_frames = match self.lengths.len() {
                    0 => self.template.total_frames,
                    m => self.lengths[(k / self.speakers.len()) % m],
                };
                let spec = ConversationSpec {
                    n_speakers: n,
                    total_frames,
                    overlap_ratio: if n == 1 { 0.0 } else { self.template.overlap_ratio },
                    seed,
                    ..self.template.clone()
                };
                let c = simulate(&spec)?;
                Example::new(c.features.frames.cast(), c.labels.cast())
            })
            .collect()
    }
}

pub struct Trainer<T: Real = f32> {
    pub params: ModelParams<T>,
    pub config: TrainConfig,
    adam: Adam<T>,
    dropout: Dropout,
    shuffle_rng: ChaCha8Rng,
    step: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(params: ModelParams<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            adam: Adam::new(&params),
            dropout: Dropout::new(config.dropout, config.seed ^ 0xD50F),
            shuffle_rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5F1E),
            params,
            config,
            step: 0,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn train_step(&mut self, batch: &[Example<T>]) -> Result<StepMetrics> {
        let next = self.step + 1;
        let blocks = self.config.blocks()?;
        let mut opts = ForwardOptions {
            mode: self.config.mode,
            blocks,
            exist_weight: self.config.exist_weight,
            dropout: (self.config.dropout > 0.0).then_some(&mut self.dropout),
            shuffle: self.config.shuffle.then_some(&mut self.shuffle_rng),
            frozen_caches: None,
            record_caches: None,
        };
        let (terms, grads) = loss_and_gradients(&self.params, batch, &mut opts, None)?;
        if !terms.total.is_finite() || grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::Diverged {
                step: next,
                detail: format!("loss {} (pit {}, exist {})", terms.total, terms.pit, terms.exist),
            });
        }
        let lr = noam_lr(next, self.params.config.d_model, self.config.warmup_steps, self.config.lr_scale);
        self.adam.update(&mut self.params, &grads, lr)?;
        self.step = next;
        Ok(StepMetrics {
            step: next,
            lr,
            loss: terms.total,
            pit: terms.pit,
            exist: terms.exist,
        })
    }

    /// Runs `config.steps` steps, writing one metrics line per step to `log`.
    pub fn run(
        &mut self,
        source: &mut dyn BatchSource<T>,
        mut log: Option<&mut dyn Write>,
    ) -> Result<Vec<StepMetrics>> {
        let mut out = Vec::with_capacity(self.config.steps);
        for _ in 0..self.config.steps {
            let batch = source.batch(self.step)?;
            let m = self.train_step(&batch)?;
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{m}")?;
            }
            out.push(m);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(tensor name, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub samples: usize,
    pub step: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub blocks: BlockConfig,
    pub fault: Option<OpKind>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            samples: 50,
            step: 1e-5,
            seed: 0,
            mode: TrainMode::Causal,
            blocks: BlockConfig {
                block_frames: 3,
                context: Context::Blocks(1),
            },
            fault: None,
        }
    }
}

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Compares backward gradients of `loss` with central differences on
/// randomly chosen scalar parameters.
pub fn grad_check_fn(
    tensors: &[Matrix<f64>],
    names: &[String],
    analytic: &[Matrix<f64>],
    mut loss: impl FnMut(&[Matrix<f64>]) -> Result<f64>,
    samples: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let sizes: Vec<usize> = tensors.iter().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::invalid("no parameters to check"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    let mut work = tensors.to_vec();
    for _ in 0..samples {
        let mut flat = rng.random_range(0..total);
        let mut which = 0;
        while flat >= sizes[which] {
            flat -= sizes[which];
            which += 1;
        }
        let orig = work[which].data()[flat];
        work[which].data_mut()[flat] = orig + step;
        let up = loss(&work)?;
        work[which].data_mut()[flat] = orig - step;
        let down = loss(&work)?;
        work[which].data_mut()[flat] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[which].data()[flat];
        let err = relative_error(a, numeric);
        report.checked += 1;
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(err);
            report.worst = Some((names[which].clone(), flat, a, numeric));
        }
    }
    Ok(report)
}

fn with_tensors(params: &ModelParams<f64>, tensors: &[Matrix<f64>]) -> ModelParams<f64> {
    let mut p = params.clone();
    for (dst, src) in p.tensors_mut().into_iter().zip(tensors) {
        *dst = src.clone();
    }
    p
}

/// Gradient check of the full training loss (PIT + existence) in 64-bit.
///
/// In causal mode the cached encoder states are treated as constants, so the
/// finite differences replay the caches recorded by the analytic pass.
pub fn grad_check(params: &ModelParams<f64>, batch: &[Example<f64>], cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut recorded = Vec::new();
    let mut opts = ForwardOptions {
        mode: cfg.mode,
        blocks: cfg.blocks,
        exist_weight: 1.0,
        dropout: None,
        shuffle: None,
        frozen_caches: None,
        record_caches: Some(&mut recorded),
    };
    let (_, analytic) = loss_and_gradients(params, batch, &mut opts, cfg.fault)?;
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let tensors: Vec<Matrix<f64>> = params.named().into_iter().map(|(_, m)| m.clone()).collect();
    let loss = |t: &[Matrix<f64>]| -> Result<f64> {
        let p = with_tensors(params, t);
        let mut tape = Tape::new();
        let mut opts = ForwardOptions {
            mode: cfg.mode,
            blocks: cfg.blocks,
            exist_weight: 1.0,
            dropout: None,
            shuffle: None,
            frozen_caches: Some(&recorded),
            record_caches: None,
        };
        let (_, _, terms) = batch_loss_on(&mut tape, &p, batch, &mut opts)?;
        Ok(terms.total)
    };
    grad_check_fn(&tensors, &names, &analytic, loss, cfg.samples, cfg.step, cfg.seed)
}
