//! Encoder-decoder attractors: an LSTM summarises the embedding sequence, a
//! second LSTM fed with zero vectors emits one attractor per speaker, and a
//! linear head gives each attractor an existence probability.

use crate::error::{Error, Result};
use crate::model::{linear, EdaVars, Lstm, LstmVars, ModelParams};
use crate::numeric::{sigmoid, Matrix, Real, Tape, Var};

/// Default cap on decoded speakers at inference.
pub const MAX_SPEAKERS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct LstmState<T: Real = f32> {
    pub h: Matrix<T>,
    pub c: Matrix<T>,
}

impl<T: Real> LstmState<T> {
    pub fn zeros(d: usize) -> Self {
        Self {
            h: Matrix::zeros(1, d),
            c: Matrix::zeros(1, d),
        }
    }
}

/// Decoded attractors (rows of `vectors`) with existence probabilities.
///
/// Only the first `counted` attractors take part in posteriors; a trailing
/// below-threshold attractor, when decoded, is kept for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct AttractorSet<T: Real = f32> {
    pub vectors: Matrix<T>,
    pub probs: Vec<T>,
    pub speaker_ids: Vec<usize>,
    pub counted: usize,
}

impl<T: Real> AttractorSet<T> {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// The attractors used for posteriors.
    pub fn active(&self) -> AttractorSet<T> {
        let n = self.counted;
        AttractorSet {
            vectors: self.vectors.slice_rows(0, n),
            probs: self.probs[..n].to_vec(),
            speaker_ids: self.speaker_ids[..n].to_vec(),
            counted: n,
        }
    }

    pub fn attractor(&self, i: usize) -> &[T] {
        self.vectors.row(i)
    }

    /// Reorders rows; `order[i]` is the source row of row `i`.
    pub fn permuted(&self, order: &[usize]) -> AttractorSet<T> {
        AttractorSet {
            vectors: self.vectors.gather_rows(order),
            probs: order.iter().map(|&i| self.probs[i]).collect(),
            speaker_ids: order.iter().map(|&i| self.speaker_ids[i]).collect(),
            counted: order.len().min(self.counted),
        }
    }
}

/// One LSTM step where `x_proj = x·W_ih + b` has been precomputed.
fn lstm_step<T: Real>(
    tape: &mut Tape<'_, T>,
    lstm: LstmVars,
    x_proj: Var,
    h: Var,
    c: Var,
) -> Result<(Var, Var)> {
    let d = lstm.hidden;
    let rec = tape.matmul(h, lstm.w_hh)?;
    let gates = tape.add(x_proj, rec)?;
    let i = tape.slice_cols(gates, 0, d);
    let i = tape.sigmoid(i);
    let f = tape.slice_cols(gates, d, 2 * d);
    let f = tape.sigmoid(f);
    let g = tape.slice_cols(gates, 2 * d, 3 * d);
    let g = tape.tanh(g);
    let o = tape.slice_cols(gates, 3 * d, 4 * d);
    let o = tape.sigmoid(o);
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let squashed = tape.tanh(c);
    let h = tape.mul(o, squashed)?;
    Ok((h, c))
}

/// Runs the LSTM over the rows of `xs` from `(h, c)`.
pub fn lstm_encode_on<T: Real>(
    tape: &mut Tape<'_, T>,
    lstm: LstmVars,
    xs: Var,
    init: (Var, Var),
) -> Result<(Var, Var)> {
    let steps = tape.value(xs).rows();
    if steps == 0 {
        return Ok(init);
    }
    let xw = tape.matmul(xs, lstm.w_ih)?;
    let xw = tape.add_row(xw, lstm.b)?;
    let (mut h, mut c) = init;
    for t in 0..steps {
        let row = tape.slice_rows(xw, t, t + 1);
        (h, c) = lstm_step(tape, lstm, row, h, c)?;
    }
    Ok((h, c))
}

/// One decoder step with zero input: returns `(attractor, probability, state)`.
pub fn decode_step_on<T: Real>(
    tape: &mut Tape<'_, T>,
    vars: &EdaVars,
    state: (Var, Var),
) -> Result<(Var, Var, (Var, Var))> {
    // Zero input: x·W_ih vanishes and only the bias remains.
    let (h, c) = lstm_step(tape, vars.dec, vars.dec.b, state.0, state.1)?;
    let logit = linear(tape, h, vars.exist)?;
    let p = tape.sigmoid(logit);
    Ok((h, p, (h, c)))
}

/// Teacher-forced decoding of exactly `n` attractors.
pub fn decode_fixed_on<T: Real>(
    tape: &mut Tape<'_, T>,
    vars: &EdaVars,
    init: (Var, Var),
    n: usize,
) -> Result<(Vec<Var>, Vec<Var>)> {
    let mut state = init;
    let mut attractors = Vec::with_capacity(n);
    let mut probs = Vec::with_capacity(n);
    for _ in 0..n {
        let (a, p, next) = decode_step_on(tape, vars, state)?;
        attractors.push(a);
        probs.push(p);
        state = next;
    }
    Ok((attractors, probs))
}

/// Final `(h, c)` after running the EDA encoder LSTM over `embeddings` in order.
pub fn lstm_encode<T: Real>(
    lstm: &Lstm<T>,
    embeddings: &Matrix<T>,
    init: &LstmState<T>,
) -> Result<LstmState<T>> {
    let d = lstm.hidden();
    if embeddings.rows() > 0 && embeddings.cols() != d {
        return Err(Error::Shape {
            op: "lstm_encode",
            left: embeddings.shape(),
            right: (embeddings.rows(), d),
        });
    }
    if embeddings.rows() == 0 {
        return Ok(init.clone());
    }
    let mut tape = Tape::new();
    let vars = LstmVars {
        w_ih: tape.param(&lstm.w_ih),
        w_hh: tape.param(&lstm.w_hh),
        b: tape.param(&lstm.b),
        hidden: d,
    };
    let xs = tape.constant_ref(embeddings);
    let h0 = tape.constant_ref(&init.h);
    let c0 = tape.constant_ref(&init.c);
    let (h, c) = lstm_encode_on(&mut tape, vars, xs, (h0, c0))?;
    Ok(LstmState {
        h: tape.value(h).clone(),
        c: tape.value(c).clone(),
    })
}

/// Length of the leading run of probabilities `≥ tau`, raised to `floor`.
pub fn count_speakers<T: Real>(probs: &[T], tau: T, floor: usize) -> usize {
    let run = probs.iter().take_while(|&&p| p >= tau).count();
    run.max(floor)
}

/// Decodes attractors until the first probability below `tau` or until
/// `max_speakers + 1` have been decoded.
pub fn decode_attractors<T: Real>(
    params: &ModelParams<T>,
    init: &LstmState<T>,
    max_speakers: usize,
    tau: T,
) -> Result<AttractorSet<T>> {
    decode_attractors_with_floor(params, init, max_speakers, tau, 0)
}

/// Like [`decode_attractors`], but always counts at least `floor` speakers,
/// decoding past below-threshold attractors when needed.
pub fn decode_attractors_with_floor<T: Real>(
    params: &ModelParams<T>,
    init: &LstmState<T>,
    max_speakers: usize,
    tau: T,
    floor: usize,
) -> Result<AttractorSet<T>> {
    if max_speakers == 0 {
        return Err(Error::invalid("max_speakers must be at least 1"));
    }
    if !(tau > T::zero() && tau < T::one()) {
        return Err(Error::invalid(format!("tau {tau} outside (0, 1)")));
    }
    let floor = floor.min(max_speakers);
    let mut tape = Tape::new();
    let vars = params.register_eda(&mut tape);
    let mut state = (tape.constant_ref(&init.h), tape.constant_ref(&init.c));
    let mut rows = Vec::new();
    let mut probs = Vec::new();
    for s in 1..=max_speakers + 1 {
        let (a, p, next) = decode_step_on(&mut tape, &vars, state)?;
        let p = tape.scalar(p);
        rows.push(tape.value(a).row(0).to_vec());
        probs.push(p);
        state = next;
        if s > floor && p < tau {
            break;
        }
    }
    let counted = count_speakers(&probs, tau, floor).min(max_speakers);
    Ok(AttractorSet {
        vectors: Matrix::from_rows(&rows)?,
        speaker_ids: (0..probs.len()).collect(),
        probs,
        counted,
    })
}

/// `σ(E·Aᵀ)` over the counted attractors; `W'×0` when none are counted.
pub fn frame_posteriors<T: Real>(embeddings: &Matrix<T>, attractors: &AttractorSet<T>) -> Result<Matrix<T>> {
    let active = attractors.vectors.slice_rows(0, attractors.counted);
    if active.rows() == 0 {
        return Ok(Matrix::zeros(embeddings.rows(), 0));
    }
    Ok(embeddings.matmul_t(&active)?.map(sigmoid))
}
