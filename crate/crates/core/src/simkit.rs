//! Synthetic conversations at the feature level, with frame labels.
//!
//! Every speaker owns a random unit direction `d_k`. Speech frames emit
//! `μ·d_k` plus Gaussian noise, silence emits noise only, and overlapping
//! speakers add up. The timeline alternates single-speaker runs with a
//! pause run and an overlap run, each geometric, so that the expected
//! pause and overlap fractions equal the requested ratios.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::evalkit::SegmentList;
use crate::frontend::{self, AudioBuffer, FeatureKind, FeatureMatrix};
use crate::numeric::container::{Container, Tensor};
use crate::numeric::Matrix;

/// Seconds per simulated frame, matching the subsampled feature rate.
pub const FRAME_PERIOD: f64 = 0.1;
pub const NOISE_STD: f64 = 0.3;
pub const MAX_SIM_SPEAKERS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct ConversationSpec {
    pub n_speakers: usize,
    pub total_frames: usize,
    pub mean_turn_frames: f64,
    pub pause_ratio: f64,
    pub overlap_ratio: f64,
    pub feature_dim: usize,
    /// Speech amplitude `μ`.
    pub amplitude: f64,
    pub seed: u64,
}

impl Default for ConversationSpec {
    fn default() -> Self {
        Self {
            n_speakers: 2,
            total_frames: 500,
            mean_turn_frames: 20.0,
            pause_ratio: 0.1,
            overlap_ratio: 0.1,
            feature_dim: 16,
            amplitude: 3.0,
            seed: 0,
        }
    }
}

impl ConversationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_SIM_SPEAKERS).contains(&self.n_speakers) {
            return Err(Error::invalid(format!(
                "n_speakers {} outside 1..={MAX_SIM_SPEAKERS}",
                self.n_speakers
            )));
        }
        if self.total_frames == 0 || self.feature_dim == 0 {
            return Err(Error::invalid("total_frames and feature_dim must be positive"));
        }
        if !(self.mean_turn_frames >= 1.0) {
            return Err(Error::invalid(format!(
                "mean turn length {} must be at least one frame",
                self.mean_turn_frames
            )));
        }
        for (name, v) in [("pause", self.pause_ratio), ("overlap", self.overlap_ratio)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} ratio {v} outside [0, 1]")));
            }
        }
        if self.overlap_ratio > 0.0 && self.n_speakers < 2 {
            return Err(Error::invalid("overlap needs at least two speakers"));
        }
        if self.pause_ratio + self.overlap_ratio >= 1.0 {
            return Err(Error::invalid(format!(
                "pause ratio {} plus overlap ratio {} leaves no single-speaker speech",
                self.pause_ratio, self.overlap_ratio
            )));
        }
        if !(self.amplitude.is_finite() && self.amplitude >= 0.0) {
            return Err(Error::invalid(format!("amplitude {} must be non-negative", self.amplitude)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conversation {
    pub features: FeatureMatrix,
    /// `T×S` with entries 0 or 1.
    pub labels: Matrix<f32>,
}

impl Conversation {
    pub fn to_container(&self) -> Container {
        let mut c = self.features.to_container();
        c.insert_matrix("labels", &self.labels);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let features = FeatureMatrix::from_container(c)?;
        let labels = c.matrix("labels")?;
        if labels.rows() != features.len() {
            return Err(Error::Format(format!(
                "{} label frames for {} feature frames",
                labels.rows(),
                features.len()
            )));
        }
        Ok(Self { features, labels })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    pub fn reference(&self, recording_id: &str) -> SegmentList {
        SegmentList::from_labels(recording_id, &self.labels, self.features.frame_period)
    }
}

/// Geometric run length on {0, 1, …} with the given mean.
fn run_from_zero(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    let p = 1.0 / (1.0 + mean);
    Geometric::new(p).expect("p in (0, 1]").sample(rng) as usize
}

/// Geometric run length on {1, 2, …} with the given mean.
fn run_from_one(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    1 + run_from_zero(rng, mean - 1.0)
}

fn other_speaker(rng: &mut ChaCha8Rng, n: usize, cur: usize) -> usize {
    if n == 1 {
        return cur;
    }
    let k = rng.random_range(0..n - 1);
    if k >= cur {
        k + 1
    } else {
        k
    }
}

/// Speaker activity only: a `T×S` 0/1 matrix.
pub fn simulate_labels(spec: &ConversationSpec, rng: &mut ChaCha8Rng) -> Result<Matrix<f32>> {
    spec.validate()?;
    let n = spec.n_speakers;
    let total = spec.total_frames;
    let single = 1.0 - spec.pause_ratio - spec.overlap_ratio;
    let pause_mean = spec.mean_turn_frames * spec.pause_ratio / single;
    let overlap_mean = spec.mean_turn_frames * spec.overlap_ratio / single;
    let mut labels = Matrix::zeros(total, n);
    let mut t = 0;
    let mut cur = rng.random_range(0..n);
    let fill = |labels: &mut Matrix<f32>, t: &mut usize, len: usize, who: &[usize]| {
        let end = (*t + len).min(total);
        for f in *t..end {
            for &s in who {
                labels.set(f, s, 1.0);
            }
        }
        *t = end;
    };
    while t < total {
        let len = run_from_one(rng, spec.mean_turn_frames);
        fill(&mut labels, &mut t, len, &[cur]);
        let next = other_speaker(rng, n, cur);
        let pause = run_from_zero(rng, pause_mean);
        fill(&mut labels, &mut t, pause, &[]);
        let overlap = run_from_zero(rng, overlap_mean);
        fill(&mut labels, &mut t, overlap, &[cur, next]);
        cur = next;
    }
    Ok(labels)
}

/// Random unit directions, one row per speaker.
pub fn speaker_directions(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Matrix<f32> {
    let mut out = Matrix::zeros(n, dim);
    for k in 0..n {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for (o, x) in out.row_mut(k).iter_mut().zip(v) {
                    *o = (x / norm) as f32;
                }
                break;
            }
        }
    }
    out
}

/// Emits features for given labels and speaker directions.
pub fn render_features(
    labels: &Matrix<f32>,
    directions: &Matrix<f32>,
    amplitude: f64,
    rng: &mut ChaCha8Rng,
) -> Matrix<f32> {
    let dim = directions.cols();
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    Matrix::from_fn(labels.rows(), dim, |t, j| {
        let mut v: f64 = noise.sample(rng);
        for k in 0..labels.cols() {
            if labels.get(t, k) > 0.5 {
                v += amplitude * directions.get(k, j) as f64;
            }
        }
        v as f32
    })
}

/// Feature-level conversation; deterministic given `spec.seed`.
pub fn simulate(spec: &ConversationSpec) -> Result<Conversation> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let directions = speaker_directions(&mut rng, spec.n_speakers, spec.feature_dim);
    let labels = simulate_labels(spec, &mut rng)?;
    let frames = render_features(&labels, &directions, spec.amplitude, &mut rng);
    Ok(Conversation {
        features: FeatureMatrix::new(frames, FRAME_PERIOD, FeatureKind::Synthetic)?,
        labels,
    })
}

/// Samples per label frame in audio mode.
pub const SAMPLES_PER_FRAME: usize = 800;

/// Audio-level conversation: each speaker is a sinusoid with its own pitch.
/// The audio is sized so that [`frontend::extract`] yields one feature frame
/// per label frame.
pub fn simulate_audio(spec: &ConversationSpec) -> Result<(AudioBuffer, Matrix<f32>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let labels = simulate_labels(spec, &mut rng)?;
    let mut freqs: Vec<f64> = Vec::new();
    while freqs.len() < spec.n_speakers {
        let f = rng.random_range(200.0..3500.0);
        if freqs.iter().all(|g: &f64| (g - f).abs() > 300.0) {
            freqs.push(f);
        }
    }
    let noise = Normal::new(0.0, 0.002).expect("valid std");
    let n = spec.total_frames * SAMPLES_PER_FRAME;
    let sr = frontend::SAMPLE_RATE as f64;
    let peak = 0.8 / spec.n_speakers as f64;
    let samples = (0..n)
        .map(|i| {
            let t = i / SAMPLES_PER_FRAME;
            let mut v: f64 = noise.sample(&mut rng);
            for (k, f) in freqs.iter().enumerate() {
                if labels.get(t, k) > 0.5 {
                    v += peak * (2.0 * std::f64::consts::PI * f * i as f64 / sr).sin();
                }
            }
            v as f32
        })
        .collect();
    Ok((AudioBuffer::new(samples, frontend::SAMPLE_RATE)?, labels))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TurnStats {
    pub frames: usize,
    pub turns_per_speaker: Vec<usize>,
    pub overlap_fraction: f64,
    pub silence_fraction: f64,
}

pub fn turn_stats(labels: &Matrix<f32>) -> TurnStats {
    let (t_len, s_len) = labels.shape();
    let mut turns = vec![0; s_len];
    let (mut overlap, mut silence) = (0usize, 0usize);
    for t in 0..t_len {
        let mut active = 0;
        for (s, turn) in turns.iter_mut().enumerate() {
            let on = labels.get(t, s) > 0.5;
            if on {
                active += 1;
                if t == 0 || labels.get(t - 1, s) <= 0.5 {
                    *turn += 1;
                }
            }
        }
        match active {
            0 => silence += 1,
            1 => {}
            _ => overlap += 1,
        }
    }
    let frac = |n: usize| if t_len == 0 { 0.0 } else { n as f64 / t_len as f64 };
    TurnStats {
        frames: t_len,
        turns_per_speaker: turns,
        overlap_fraction: frac(overlap),
        silence_fraction: frac(silence),
    }
}

/// Stores a batch of conversations in one container as
/// `conv{i}.features` / `conv{i}.labels`.
pub fn save_corpus(path: impl AsRef<Path>, conversations: &[Conversation]) -> Result<()> {
    let mut c = Container::new();
    if let Some(first) = conversations.first() {
        c.insert("meta.frame_period", Tensor::scalar(first.features.frame_period as f32));
    }
    for (i, conv) in conversations.iter().enumerate() {
        c.insert_matrix(format!("conv{i}.features"), &conv.features.frames);
        c.insert_matrix(format!("conv{i}.labels"), &conv.labels);
    }
    c.save(path)
}
