//! Model architecture, parameter storage and checkpoint I/O.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::{Container, Matrix, Real, Tape, Tensor, Var};

/// Architecture hyper-parameters. Block size and left context are inference
/// settings and live in [`crate::xencoder::BlockConfig`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
}

impl ModelConfig {
    /// Four layers, 256 units, four heads over 345-dim spliced log-Mel input.
    pub fn reference() -> Self {
        Self {
            input_dim: 345,
            d_model: 256,
            n_heads: 4,
            d_ff: 1024,
            n_layers: 4,
        }
    }

    /// Small configuration that trains in minutes on one core.
    pub fn desk(input_dim: usize) -> Self {
        Self {
            input_dim,
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            n_layers: 2,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(Error::invalid(format!("degenerate model config {self:?}")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// `y = x·w + b` with `w: in×out`, `b: 1×out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T: Real = f32> {
    pub w: Matrix<T>,
    pub b: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T: Real = f32> {
    pub gain: Matrix<T>,
    pub bias: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<T: Real = f32> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub ff1: Linear<T>,
    pub ff2: Linear<T>,
    pub norm1: Norm<T>,
    pub norm2: Norm<T>,
}

/// Single-layer LSTM, gate column order `[input, forget, cell, output]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Lstm<T: Real = f32> {
    pub w_ih: Matrix<T>,
    pub w_hh: Matrix<T>,
    pub b: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Real = f32> {
    pub config: ModelConfig,
    pub proj: Linear<T>,
    pub proj_norm: Norm<T>,
    pub layers: Vec<EncoderLayer<T>>,
    pub eda_enc: Lstm<T>,
    pub eda_dec: Lstm<T>,
    pub exist: Linear<T>,
}

fn glorot<T: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<T> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| T::lit(rng.random_range(-bound..bound)))
}

impl<T: Real> Linear<T> {
    fn init(rng: &mut ChaCha8Rng, input: usize, output: usize) -> Self {
        Self {
            w: glorot(rng, input, output),
            b: Matrix::zeros(1, output),
        }
    }
}

impl<T: Real> Norm<T> {
    fn init(d: usize) -> Self {
        Self {
            gain: Matrix::filled(1, d, T::one()),
            bias: Matrix::zeros(1, d),
        }
    }
}

impl<T: Real> Lstm<T> {
    fn init(rng: &mut ChaCha8Rng, d: usize) -> Self {
        Self {
            w_ih: glorot(rng, d, 4 * d),
            w_hh: glorot(rng, d, 4 * d),
            b: Matrix::zeros(1, 4 * d),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.rows()
    }
}

impl<T: Real> ModelParams<T> {
    /// Glorot-uniform weights, zero biases, unit norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let proj = Linear::init(&mut rng, config.input_dim, d);
        let layers = (0..config.n_layers)
            .map(|_| EncoderLayer {
                q: Linear::init(&mut rng, d, d),
                k: Linear::init(&mut rng, d, d),
                v: Linear::init(&mut rng, d, d),
                o: Linear::init(&mut rng, d, d),
                ff1: Linear::init(&mut rng, d, config.d_ff),
                ff2: Linear::init(&mut rng, config.d_ff, d),
                norm1: Norm::init(d),
                norm2: Norm::init(d),
            })
            .collect();
        let eda_enc = Lstm::init(&mut rng, d);
        let eda_dec = Lstm::init(&mut rng, d);
        let exist = Linear::init(&mut rng, d, 1);
        Ok(Self {
            config,
            proj,
            proj_norm: Norm::init(d),
            layers,
            eda_enc,
            eda_dec,
            exist,
        })
    }

    /// Every parameter with its checkpoint name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out: Vec<(String, &Matrix<T>)> = vec![
            ("proj.w".into(), &self.proj.w),
            ("proj.b".into(), &self.proj.b),
            ("proj.norm.g".into(), &self.proj_norm.gain),
            ("proj.norm.b".into(), &self.proj_norm.bias),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (part, lin) in [("attn.q", &l.q), ("attn.k", &l.k), ("attn.v", &l.v), ("attn.o", &l.o), ("ff.1", &l.ff1), ("ff.2", &l.ff2)] {
                out.push((format!("layer{i}.{part}.w"), &lin.w));
                out.push((format!("layer{i}.{part}.b"), &lin.b));
            }
            for (part, n) in [("norm1", &l.norm1), ("norm2", &l.norm2)] {
                out.push((format!("layer{i}.{part}.g"), &n.gain));
                out.push((format!("layer{i}.{part}.b"), &n.bias));
            }
        }
        for (part, lstm) in [("eda.enc", &self.eda_enc), ("eda.dec", &self.eda_dec)] {
            out.push((format!("{part}.w_ih"), &lstm.w_ih));
            out.push((format!("{part}.w_hh"), &lstm.w_hh));
            out.push((format!("{part}.b"), &lstm.b));
        }
        out.push(("eda.exist.w".into(), &self.exist.w));
        out.push(("eda.exist.b".into(), &self.exist.b));
        out
    }

    /// Mutable view in the same order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out: Vec<&mut Matrix<T>> = vec![
            &mut self.proj.w,
            &mut self.proj.b,
            &mut self.proj_norm.gain,
            &mut self.proj_norm.bias,
        ];
        for l in &mut self.layers {
            for lin in [&mut l.q, &mut l.k, &mut l.v, &mut l.o, &mut l.ff1, &mut l.ff2] {
                out.push(&mut lin.w);
                out.push(&mut lin.b);
            }
            for n in [&mut l.norm1, &mut l.norm2] {
                out.push(&mut n.gain);
                out.push(&mut n.bias);
            }
        }
        for lstm in [&mut self.eda_enc, &mut self.eda_dec] {
            out.push(&mut lstm.w_ih);
            out.push(&mut lstm.w_hh);
            out.push(&mut lstm.b);
        }
        out.push(&mut self.exist.w);
        out.push(&mut self.exist.b);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let lin = |l: &Linear<T>| Linear {
            w: l.w.cast(),
            b: l.b.cast(),
        };
        let norm = |n: &Norm<T>| Norm {
            gain: n.gain.cast(),
            bias: n.bias.cast(),
        };
        let lstm = |l: &Lstm<T>| Lstm {
            w_ih: l.w_ih.cast(),
            w_hh: l.w_hh.cast(),
            b: l.b.cast(),
        };
        ModelParams {
            config: self.config,
            proj: lin(&self.proj),
            proj_norm: norm(&self.proj_norm),
            layers: self
                .layers
                .iter()
                .map(|l| EncoderLayer {
                    q: lin(&l.q),
                    k: lin(&l.k),
                    v: lin(&l.v),
                    o: lin(&l.o),
                    ff1: lin(&l.ff1),
                    ff2: lin(&l.ff2),
                    norm1: norm(&l.norm1),
                    norm2: norm(&l.norm2),
                })
                .collect(),
            eda_enc: lstm(&self.eda_enc),
            eda_dec: lstm(&self.eda_dec),
            exist: lin(&self.exist),
        }
    }

    /// Registers every parameter on `tape` as a trainable leaf.
    pub fn register<'p>(&'p self, tape: &mut Tape<'p, T>) -> ModelVars {
        let encoder = self.register_encoder(tape);
        let eda = self.register_eda(tape);
        ModelVars { encoder, eda }
    }

    pub fn register_encoder<'p>(&'p self, tape: &mut Tape<'p, T>) -> EncoderVars {
        let lin = |tape: &mut Tape<'p, T>, l: &'p Linear<T>| LinearVars {
            w: tape.param(&l.w),
            b: tape.param(&l.b),
        };
        let norm = |tape: &mut Tape<'p, T>, n: &'p Norm<T>| NormVars {
            gain: tape.param(&n.gain),
            bias: tape.param(&n.bias),
        };
        let proj = lin(tape, &self.proj);
        let proj_norm = norm(tape, &self.proj_norm);
        let layers = self
            .layers
            .iter()
            .map(|l| LayerVars {
                q: lin(tape, &l.q),
                k: lin(tape, &l.k),
                v: lin(tape, &l.v),
                o: lin(tape, &l.o),
                ff1: lin(tape, &l.ff1),
                ff2: lin(tape, &l.ff2),
                norm1: norm(tape, &l.norm1),
                norm2: norm(tape, &l.norm2),
            })
            .collect();
        EncoderVars {
            config: self.config,
            proj,
            proj_norm,
            layers,
        }
    }

    pub fn register_eda<'p>(&'p self, tape: &mut Tape<'p, T>) -> EdaVars {
        let lstm = |tape: &mut Tape<'p, T>, l: &'p Lstm<T>| LstmVars {
            w_ih: tape.param(&l.w_ih),
            w_hh: tape.param(&l.w_hh),
            b: tape.param(&l.b),
            hidden: l.hidden(),
        };
        EdaVars {
            enc: lstm(tape, &self.eda_enc),
            dec: lstm(tape, &self.eda_dec),
            exist: LinearVars {
                w: tape.param(&self.exist.w),
                b: tape.param(&self.exist.b),
            },
        }
    }
}

const CONFIG_TENSOR: &str = "meta.config";

impl ModelParams<f32> {
    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        let cfg = self.config;
        c.insert(
            CONFIG_TENSOR,
            Tensor::vector(
                [cfg.input_dim, cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.n_layers]
                    .iter()
                    .map(|&v| v as f32)
                    .collect(),
            ),
        );
        for (name, m) in self.named() {
            c.insert_matrix(name, m);
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta = c.require(CONFIG_TENSOR)?;
        let [input_dim, d_model, n_heads, d_ff, n_layers] = meta.data[..] else {
            return Err(Error::Format("meta.config must hold 5 values".into()));
        };
        let config = ModelConfig {
            input_dim: input_dim as usize,
            d_model: d_model as usize,
            n_heads: n_heads as usize,
            d_ff: d_ff as usize,
            n_layers: n_layers as usize,
        };
        let mut params = Self::init(config, 0)?;
        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(params.tensors_mut()) {
            let m = c.matrix(name)?;
            if m.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    m.shape(),
                    slot.shape()
                )));
            }
            *slot = m;
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct NormVars {
    pub gain: Var,
    pub bias: Var,
}

#[derive(Clone, Debug)]
pub struct LayerVars {
    pub q: LinearVars,
    pub k: LinearVars,
    pub v: LinearVars,
    pub o: LinearVars,
    pub ff1: LinearVars,
    pub ff2: LinearVars,
    pub norm1: NormVars,
    pub norm2: NormVars,
}

#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub config: ModelConfig,
    pub proj: LinearVars,
    pub proj_norm: NormVars,
    pub layers: Vec<LayerVars>,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b: Var,
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct EdaVars {
    pub enc: LstmVars,
    pub dec: LstmVars,
    pub exist: LinearVars,
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub encoder: EncoderVars,
    pub eda: EdaVars,
}

impl ModelVars {
    /// Leaf handles in the order of [`ModelParams::named`].
    pub fn ordered(&self) -> Vec<Var> {
        let e = &self.encoder;
        let mut out = vec![e.proj.w, e.proj.b, e.proj_norm.gain, e.proj_norm.bias];
        for l in &e.layers {
            for lin in [l.q, l.k, l.v, l.o, l.ff1, l.ff2] {
                out.push(lin.w);
                out.push(lin.b);
            }
            for n in [l.norm1, l.norm2] {
                out.push(n.gain);
                out.push(n.bias);
            }
        }
        for lstm in [self.eda.enc, self.eda.dec] {
            out.extend([lstm.w_ih, lstm.w_hh, lstm.b]);
        }
        out.push(self.eda.exist.w);
        out.push(self.eda.exist.b);
        out
    }
}

/// Affine map on the tape.
pub fn linear<T: Real>(tape: &mut Tape<'_, T>, x: Var, l: LinearVars) -> Result<Var> {
    let y = tape.matmul(x, l.w)?;
    tape.add_row(y, l.b)
}

/// Inverted dropout for training-mode forward passes.
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Self {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn apply<T: Real>(&mut self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - self.rate));
        let (rows, cols) = tape.value(x).shape();
        let mask = Matrix::from_fn(rows, cols, |_, _| {
            if self.rng.random::<f64>() < self.rate {
                T::zero()
            } else {
                keep
            }
        });
        let mask = tape.constant(mask);
        tape.mul(x, mask)
    }
}
