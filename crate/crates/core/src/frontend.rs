//! 8 kHz mono audio to spliced, subsampled log-Mel features.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::numeric::container::{Container, Tensor};
use crate::numeric::Matrix;

pub const SAMPLE_RATE: u32 = 8000;
pub const WINDOW: usize = 200;
pub const HOP: usize = 80;
pub const FFT_SIZE: usize = 256;
pub const N_MELS: usize = 23;
pub const CONTEXT: usize = 7;
pub const SPLICED_DIM: usize = N_MELS * (2 * CONTEXT + 1);
pub const SUBSAMPLE: usize = 10;
pub const LOG_FLOOR: f64 = 1e-10;
pub const FRAME_PERIOD: f64 = HOP as f64 / SAMPLE_RATE as f64;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::Audio(format!(
                "sample rate {sample_rate} Hz is not supported, expected {SAMPLE_RATE}"
            )));
        }
        if samples.is_empty() {
            return Err(Error::Audio("empty audio".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    /// Builds a buffer from 16-bit PCM, scaled to [−1, 1).
    pub fn from_pcm(pcm: &[i16]) -> Result<Self> {
        Self::new(pcm.iter().map(|&s| s as f32 / 32768.0).collect(), SAMPLE_RATE)
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Reads a 16-bit PCM mono WAV at 8 kHz.
    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(Error::Audio(format!("{} channels, expected mono", spec.channels)));
        }
        if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
            return Err(Error::Audio(format!(
                "{:?} {}-bit samples, expected 16-bit PCM",
                spec.sample_format, spec.bits_per_sample
            )));
        }
        if spec.sample_rate != SAMPLE_RATE {
            return Err(Error::Audio(format!(
                "sample rate {} Hz is not supported, expected {SAMPLE_RATE}",
                spec.sample_rate
            )));
        }
        let pcm = reader.into_samples::<i16>().collect::<std::result::Result<Vec<_>, _>>()?;
        Self::from_pcm(&pcm)
    }

    /// Writes 16-bit PCM mono; samples are clipped to [−1, 1].
    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            w.write_sample(to_pcm(s))?;
        }
        w.finalize()?;
        Ok(())
    }
}

pub fn to_pcm(s: f32) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    LogMel23,
    Spliced345,
    Synthetic,
}

impl FeatureKind {
    fn code(self) -> f32 {
        match self {
            FeatureKind::LogMel23 => 0.0,
            FeatureKind::Spliced345 => 1.0,
            FeatureKind::Synthetic => 2.0,
        }
    }

    fn from_code(c: f32) -> Result<Self> {
        match c as i32 {
            0 => Ok(FeatureKind::LogMel23),
            1 => Ok(FeatureKind::Spliced345),
            2 => Ok(FeatureKind::Synthetic),
            _ => Err(Error::Format(format!("unknown feature kind code {c}"))),
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureKind::LogMel23 => "logmel23",
            FeatureKind::Spliced345 => "spliced345",
            FeatureKind::Synthetic => "synthetic",
        })
    }
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logmel23" => Ok(FeatureKind::LogMel23),
            "spliced345" => Ok(FeatureKind::Spliced345),
            "synthetic" => Ok(FeatureKind::Synthetic),
            _ => Err(Error::invalid(format!("unknown feature kind `{s}`"))),
        }
    }
}

/// `T×F` features with their frame period in seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub frames: Matrix<f32>,
    pub frame_period: f64,
    pub kind: FeatureKind,
}

impl FeatureMatrix {
    pub fn new(frames: Matrix<f32>, frame_period: f64, kind: FeatureKind) -> Result<Self> {
        let want = match kind {
            FeatureKind::LogMel23 => Some(N_MELS),
            FeatureKind::Spliced345 => Some(SPLICED_DIM),
            FeatureKind::Synthetic => None,
        };
        if let Some(w) = want {
            if frames.cols() != w {
                return Err(Error::invalid(format!("{kind} features need {w} columns, got {}", frames.cols())));
            }
        }
        if !(frame_period > 0.0) {
            return Err(Error::invalid(format!("frame period {frame_period} must be positive")));
        }
        Ok(Self { frames, frame_period, kind })
    }

    pub fn synthetic(frames: Matrix<f32>, frame_period: f64) -> Result<Self> {
        Self::new(frames, frame_period, FeatureKind::Synthetic)
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 * self.frame_period
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.insert_matrix("features", &self.frames);
        c.insert("meta.frame_period", Tensor::scalar(self.frame_period as f32));
        c.insert("meta.kind", Tensor::scalar(self.kind.code()));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let frames = c.matrix("features")?;
        let period = c.matrix("meta.frame_period")?.get(0, 0) as f64;
        let kind = FeatureKind::from_code(c.matrix("meta.kind")?.get(0, 0))?;
        Self::new(frames, period, kind)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Symmetric Hann window of `WINDOW` samples.
pub fn hann_window() -> Vec<f64> {
    let n = WINDOW as f64 - 1.0;
    (0..WINDOW)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n).cos())
        .collect()
}

/// `N_MELS × (FFT_SIZE/2+1)` triangular filterbank, equally spaced on the
/// Mel scale from 0 Hz to Nyquist.
pub fn mel_filterbank() -> Matrix<f64> {
    let nyquist = SAMPLE_RATE as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..N_MELS + 2)
        .map(|i| mel_to_hz(top * i as f64 / (N_MELS + 1) as f64))
        .collect();
    let bins = FFT_SIZE / 2 + 1;
    Matrix::from_fn(N_MELS, bins, |m, k| {
        let f = k as f64 * SAMPLE_RATE as f64 / FFT_SIZE as f64;
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        if f > lo && f <= mid {
            (f - lo) / (mid - lo)
        } else if f > mid && f < hi {
            (hi - f) / (hi - mid)
        } else {
            0.0
        }
    })
}

/// Frame count for `n` samples; zero when shorter than one window.
pub fn frame_count(n: usize) -> usize {
    if n < WINDOW {
        0
    } else {
        (n - WINDOW) / HOP + 1
    }
}

struct MelAnalyzer {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    bank: Matrix<f64>,
}

impl MelAnalyzer {
    fn new() -> Self {
        Self {
            fft: FftPlanner::new().plan_fft_forward(FFT_SIZE),
            window: hann_window(),
            bank: mel_filterbank(),
        }
    }

    fn power_spectrum(&self, frame: &[f32], buf: &mut [Complex<f64>]) -> Vec<f64> {
        for (i, b) in buf.iter_mut().enumerate() {
            let v = if i < WINDOW { frame[i] as f64 * self.window[i] } else { 0.0 };
            *b = Complex::new(v, 0.0);
        }
        self.fft.process(buf);
        buf[..FFT_SIZE / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
    }
}

/// Power spectrum of one windowed frame (`FFT_SIZE/2+1` bins).
pub fn frame_power_spectrum(frame: &[f32]) -> Result<Vec<f64>> {
    if frame.len() < WINDOW {
        return Err(Error::Audio(format!("frame of {} samples, need {WINDOW}", frame.len())));
    }
    let a = MelAnalyzer::new();
    let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
    Ok(a.power_spectrum(&frame[..WINDOW], &mut buf))
}

/// 23-dimensional log-Mel filterbank features at a 10 ms shift.
pub fn logmel(audio: &AudioBuffer) -> Result<FeatureMatrix> {
    let samples = audio.samples();
    let frames = frame_count(samples.len());
    if frames == 0 {
        return Err(Error::Audio(format!(
            "{} samples is shorter than one {WINDOW}-sample window",
            samples.len()
        )));
    }
    let a = MelAnalyzer::new();
    let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
    let mut out = Matrix::zeros(frames, N_MELS);
    for t in 0..frames {
        let power = a.power_spectrum(&samples[t * HOP..t * HOP + WINDOW], &mut buf);
        let row = out.row_mut(t);
        for (m, v) in row.iter_mut().enumerate() {
            let e: f64 = a.bank.row(m).iter().zip(&power).map(|(w, p)| w * p).sum();
            *v = e.max(LOG_FLOOR).ln() as f32;
        }
    }
    FeatureMatrix::new(out, FRAME_PERIOD, FeatureKind::LogMel23)
}

/// Stacks each frame with its ±7 neighbours, replicating boundary frames.
pub fn splice(f: &FeatureMatrix) -> Result<FeatureMatrix> {
    if f.kind != FeatureKind::LogMel23 {
        return Err(Error::invalid(format!("splice expects logmel23 features, got {}", f.kind)));
    }
    let t_len = f.len();
    let out = Matrix::from_fn(t_len, SPLICED_DIM, |t, j| {
        let offset = j / N_MELS;
        let src = (t + offset).saturating_sub(CONTEXT).min(t_len - 1);
        f.frames.get(src, j % N_MELS)
    });
    FeatureMatrix::new(out, f.frame_period, FeatureKind::Spliced345)
}

/// Keeps frames `0, factor, 2·factor, …`.
pub fn subsample(f: &FeatureMatrix, factor: usize) -> Result<FeatureMatrix> {
    if factor == 0 {
        return Err(Error::invalid("subsampling factor must be at least 1"));
    }
    let keep: Vec<usize> = (0..f.len()).step_by(factor).collect();
    Ok(FeatureMatrix {
        frames: f.frames.gather_rows(&keep),
        frame_period: f.frame_period * factor as f64,
        kind: f.kind,
    })
}

/// Full chain: log-Mel, splice, subsample by ten.
pub fn extract(audio: &AudioBuffer) -> Result<FeatureMatrix> {
    subsample(&splice(&logmel(audio)?)?, SUBSAMPLE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sine(freq: f64, n: usize, amp: f64) -> AudioBuffer {
        let s = (0..n)
            .map(|i| (amp * (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64).sin()) as f32)
            .collect();
        AudioBuffer::new(s, SAMPLE_RATE).unwrap()
    }

    #[test]
    fn one_second_gives_98_frames() {
        let f = logmel(&sine(440.0, 8000, 0.5)).unwrap();
        assert_eq!(f.frames.shape(), (98, 23));
        assert_eq!(f.frame_period, 0.01);
    }

    #[test]
    fn silence_hits_floor() {
        let f = logmel(&AudioBuffer::new(vec![0.0; 8000], SAMPLE_RATE).unwrap()).unwrap();
        let floor = (1e-10f64).ln() as f32;
        assert!(f.frames.data().iter().all(|&v| v == floor));
    }

    #[test]
    fn short_audio_and_wrong_rate_rejected() {
        assert!(logmel(&AudioBuffer::new(vec![0.1; 199], SAMPLE_RATE).unwrap()).is_err());
        assert!(logmel(&AudioBuffer::new(vec![0.1; 200], SAMPLE_RATE).unwrap()).is_ok());
        assert!(AudioBuffer::new(vec![0.0; 400], 16000).is_err());
        assert!(AudioBuffer::new(vec![], SAMPLE_RATE).is_err());
    }

    /// Mel energies from an O(N²) DFT.
    fn dft_mel(frame: &[f32]) -> Vec<f64> {
        let w = hann_window();
        let bank = mel_filterbank();
        let power: Vec<f64> = (0..=FFT_SIZE / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for n in 0..WINDOW {
                    let ang = -2.0 * std::f64::consts::PI * (k * n) as f64 / FFT_SIZE as f64;
                    let x = frame[n] as f64 * w[n];
                    re += x * ang.cos();
                    im += x * ang.sin();
                }
                re * re + im * im
            })
            .collect();
        (0..N_MELS)
            .map(|m| bank.row(m).iter().zip(&power).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn argmax(v: impl Iterator<Item = f64>) -> usize {
        v.enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, x)| if x > bv { (i, x) } else { (bi, bv) })
            .0
    }

    #[test]
    fn sine_peak_matches_dft_oracle() {
        let audio = sine(1000.0, 8000, 0.5);
        let f = logmel(&audio).unwrap();
        for t in [0, 40, 97] {
            let got = argmax(f.frames.row(t).iter().map(|&v| v as f64));
            let want = argmax(dft_mel(&audio.samples()[t * HOP..t * HOP + WINDOW]).into_iter());
            assert_eq!(got, want);
            let bank = mel_filterbank();
            assert!(bank.get(got, 32) > 0.0, "peak filter should cover the 1 kHz bin");
        }
    }

    #[test]
    fn fft_power_matches_dft() {
        let audio = sine(700.0, 400, 0.3);
        let p = frame_power_spectrum(&audio.samples()[..WINDOW]).unwrap();
        let w = hann_window();
        for k in [0, 10, 22, 64, 128] {
            let (mut re, mut im) = (0.0, 0.0);
            for n in 0..WINDOW {
                let ang = -2.0 * std::f64::consts::PI * (k * n) as f64 / FFT_SIZE as f64;
                re += audio.samples()[n] as f64 * w[n] * ang.cos();
                im += audio.samples()[n] as f64 * w[n] * ang.sin();
            }
            assert!((p[k] - (re * re + im * im)).abs() < 1e-9);
        }
    }

    #[test]
    fn doubling_amplitude_adds_two_ln_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pcm: Vec<i16> = (0..4000).map(|_| rng.random_range(-8000..8000)).collect();
        let loud: Vec<i16> = pcm.iter().map(|&s| s * 2).collect();
        let a = logmel(&AudioBuffer::from_pcm(&pcm).unwrap()).unwrap();
        let b = logmel(&AudioBuffer::from_pcm(&loud).unwrap()).unwrap();
        let floor = (1e-10f64).ln() as f32;
        for (x, y) in a.frames.data().iter().zip(b.frames.data()) {
            assert!(*x > floor);
            assert!(((*y as f64 - *x as f64) - 2.0 * 2f64.ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn splice_examples() {
        let one = FeatureMatrix::new(Matrix::from_fn(1, 23, |_, j| j as f32), 0.01, FeatureKind::LogMel23).unwrap();
        let s = splice(&one).unwrap();
        assert_eq!(s.frames.shape(), (1, 345));
        for c in 0..15 {
            assert_eq!(&s.frames.row(0)[c * 23..(c + 1) * 23], one.frames.row(0));
        }

        let f = FeatureMatrix::new(Matrix::from_fn(20, 23, |t, j| (t * 100 + j) as f32), 0.01, FeatureKind::LogMel23)
            .unwrap();
        let s = splice(&f).unwrap();
        assert_eq!(s.len(), 20);
        let want: Vec<f32> = (1..=15).flat_map(|t| f.frames.row(t).to_vec()).collect();
        assert_eq!(s.frames.row(8), want.as_slice());
        // t=0 replicates frame 0 for the left context.
        assert_eq!(&s.frames.row(0)[..23], f.frames.row(0));
        assert_eq!(&s.frames.row(19)[14 * 23..], f.frames.row(19));
        assert!(splice(&s).is_err());
    }

    #[test]
    fn subsample_examples() {
        let mk = |t| FeatureMatrix::synthetic(Matrix::from_fn(t, 2, |r, _| r as f32), 0.01).unwrap();
        let s = subsample(&mk(100), 10).unwrap();
        assert_eq!(s.len(), 10);
        assert!((s.frame_period - 0.1).abs() < 1e-12);
        let s = subsample(&mk(95), 10).unwrap();
        assert_eq!(s.len(), 10);
        assert_eq!(s.frames.get(9, 0), 90.0);
        assert_eq!(subsample(&mk(7), 1).unwrap(), mk(7));
        assert!(subsample(&mk(7), 0).is_err());
    }

    #[test]
    fn full_chain_geometry() {
        let f = extract(&sine(300.0, 8000, 0.2)).unwrap();
        assert_eq!(f.frames.shape(), (10, 345));
        assert_eq!(f.kind, FeatureKind::Spliced345);
        assert!((f.frame_period - 0.1).abs() < 1e-12);
    }

    #[test]
    fn wav_round_trip_and_feature_dump() {
        let dir = tempfile::tempdir().unwrap();
        let audio = AudioBuffer::from_pcm(&[0, 1000, -1000, 32767, -32768]).unwrap();
        let path = dir.path().join("a.wav");
        audio.write_wav(&path).unwrap();
        assert_eq!(AudioBuffer::read_wav(&path).unwrap(), audio);

        let f = extract(&sine(500.0, 2000, 0.4)).unwrap();
        let fp = dir.path().join("f.ntc");
        f.save(&fp).unwrap();
        assert_eq!(FeatureMatrix::load(&fp).unwrap().frames, f.frames);
    }

    #[test]
    fn wav_rejects_stereo_and_other_rates() {
        let dir = tempfile::tempdir().unwrap();
        for (channels, rate) in [(2, 8000), (1, 16000)] {
            let spec = hound::WavSpec { channels, sample_rate: rate, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
            let p = dir.path().join(format!("x{channels}{rate}.wav"));
            let mut w = hound::WavWriter::create(&p, spec).unwrap();
            for _ in 0..400 {
                w.write_sample(0i16).unwrap();
            }
            w.finalize().unwrap();
            assert!(matches!(AudioBuffer::read_wav(&p), Err(Error::Audio(_))));
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn subsample_of_splice_is_ceil(t in 1usize..60) {
                let f = FeatureMatrix::new(Matrix::zeros(t, 23), 0.01, FeatureKind::LogMel23).unwrap();
                let s = subsample(&splice(&f).unwrap(), 10).unwrap();
                prop_assert_eq!(s.len(), t.div_ceil(10));
            }

            #[test]
            fn logmel_is_deterministic(seed in 0u64..50, n in 200usize..1200) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let pcm: Vec<i16> = (0..n).map(|_| rng.random()).collect();
                let a = AudioBuffer::from_pcm(&pcm).unwrap();
                let x = logmel(&a).unwrap();
                prop_assert_eq!(x.len(), (n - 200) / 80 + 1);
                prop_assert_eq!(x, logmel(&a).unwrap());
            }
        }
    }
}
