use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use anyhow::Context as _;
use bweda::model::{ModelConfig, ModelParams};
use bweda::simkit::ConversationSpec;
use bweda::train::{toy_conversations, BatchSource, SimulatedSource, TrainConfig, TrainMode, Trainer};
use bweda::xencoder::Context;

use crate::error::{usage, CliResult};
use crate::manifest::{sha256_file, RunManifest};
use crate::settings::Settings;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.tsv";

#[derive(clap::Args)]
pub struct Args {
    /// Output directory for the checkpoint, metrics log and manifest.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// causal or offline.
    #[arg(long)]
    mode: Option<TrainMode>,
    /// Causal mode block size W in frames.
    #[arg(long)]
    block_frames: Option<usize>,
    /// Causal mode left context L in blocks, or `inf`.
    #[arg(long)]
    context_blocks: Option<Context>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    lr_scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Weight of the attractor existence loss.
    #[arg(long)]
    exist_weight: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Feed embeddings to the attractor LSTM in frame order.
    #[arg(long)]
    no_shuffle: bool,
    /// Speaker counts cycled over batch entries, e.g. `1,2`.
    #[arg(long, value_delimiter = ',')]
    speakers: Vec<usize>,
    /// Frames per training conversation.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    mean_turn: Option<f64>,
    #[arg(long)]
    pause_ratio: Option<f64>,
    #[arg(long)]
    overlap_ratio: Option<f64>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    amplitude: Option<f64>,
    /// Seed of the simulated training stream (defaults to --seed).
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    /// Continue from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    init: Option<String>,
    /// Progress line on stderr every N steps (0 disables).
    #[arg(long)]
    log_every: Option<usize>,
}

pub fn run(a: Args) -> CliResult {
    let mut s = Settings::load(a.config.as_deref())?;
    let d = TrainConfig::desk();
    let seed = s.get("seed", a.seed, d.seed)?;
    let cfg = TrainConfig {
        mode: s.get("mode", a.mode, d.mode)?,
        block_frames: s.get("block-frames", a.block_frames, d.block_frames)?,
        context: s.get("context-blocks", a.context_blocks, d.context)?,
        batch_size: s.get("batch-size", a.batch_size, d.batch_size)?,
        steps: s.get("steps", a.steps, d.steps)?,
        warmup_steps: s.get("warmup", a.warmup, d.warmup_steps)?,
        lr_scale: s.get("lr-scale", a.lr_scale, d.lr_scale)?,
        seed,
        exist_weight: s.get("exist-weight", a.exist_weight, d.exist_weight)?,
        dropout: s.get("dropout", a.dropout, d.dropout)?,
        shuffle: s.get("shuffle", a.no_shuffle.then_some(false), d.shuffle)?,
    };
    cfg.validate().map_err(usage)?;

    let t = toy_conversations();
    let template = ConversationSpec {
        total_frames: s.get("frames", a.frames, t.total_frames)?,
        mean_turn_frames: s.get("mean-turn", a.mean_turn, t.mean_turn_frames)?,
        pause_ratio: s.get("pause-ratio", a.pause_ratio, t.pause_ratio)?,
        overlap_ratio: s.get("overlap-ratio", a.overlap_ratio, t.overlap_ratio)?,
        feature_dim: s.get("feature-dim", a.feature_dim, t.feature_dim)?,
        amplitude: s.get("amplitude", a.amplitude, t.amplitude)?,
        ..t
    };
    let speakers = s.list("speakers", a.speakers, vec![2])?;
    for &n in &speakers {
        ConversationSpec {
            n_speakers: n,
            overlap_ratio: if n == 1 { 0.0 } else { template.overlap_ratio },
            ..template.clone()
        }
        .validate()
        .map_err(usage)?;
    }
    let data_seed = s.get("data-seed", a.data_seed, seed)?;
    let log_every = s.get("log-every", a.log_every, 100usize)?;

    let init = s.optional("init", a.init)?;
    let arch = [
        ("d-model", s.optional("d-model", a.d_model)?),
        ("heads", s.optional("heads", a.heads)?),
        ("d-ff", s.optional("d-ff", a.d_ff)?),
        ("layers", s.optional("layers", a.layers)?),
    ];
    s.finish()?;

    let (params, checkpoint_sha256) = match &init {
        Some(path) => {
            if let Some((key, _)) = arch.iter().find(|(_, v)| v.is_some()) {
                return Err(usage(format!("--{key} conflicts with --init (architecture comes from the checkpoint)")));
            }
            let digest = sha256_file(path.as_ref())?;
            let p = ModelParams::load(path).with_context(|| format!("loading {path}"))?;
            (p, Some(digest))
        }
        None => {
            let desk = ModelConfig::desk(template.feature_dim);
            let pick = |i: usize, default: usize| arch[i].1.unwrap_or(default);
            let config = ModelConfig {
                input_dim: template.feature_dim,
                d_model: pick(0, desk.d_model),
                n_heads: pick(1, desk.n_heads),
                d_ff: pick(2, desk.d_ff),
                n_layers: pick(3, desk.n_layers),
            };
            config.validate().map_err(usage)?;
            (ModelParams::init(config, seed)?, None)
        }
    };
    if params.config.input_dim != template.feature_dim {
        return Err(usage(format!(
            "checkpoint expects {}-dim features, --feature-dim is {}",
            params.config.input_dim, template.feature_dim
        )));
    }

    let ckpt = a.out.join(CHECKPOINT_FILE);
    let metrics = a.out.join(METRICS_FILE);
    RunManifest {
        command: "train".into(),
        seed,
        checkpoint_sha256,
        outputs: vec![ckpt.clone(), metrics.clone()],
        config: s.snapshot().clone(),
    }
    .write(&a.out)?;

    let mut source = SimulatedSource {
        template,
        speakers,
        lengths: Vec::new(),
        batch_size: cfg.batch_size,
        seed: data_seed,
    };
    let steps = cfg.steps;
    let mut trainer = Trainer::new(params, cfg)?;
    let mut log = BufWriter::new(File::create(&metrics).with_context(|| format!("creating {}", metrics.display()))?);
    writeln!(log, "step\tlr\tloss\tpit\texist")?;
    let start = Instant::now();
    let mut last = None;
    for _ in 0..steps {
        let batch = source.batch(trainer.step())?;
        let m = trainer.train_step(&batch)?;
        writeln!(log, "{}\t{}\t{}\t{}\t{}", m.step, m.lr, m.loss, m.pit, m.exist)?;
        if log_every > 0 && m.step % log_every == 0 {
            eprintln!("{m}");
        }
        last = Some(m);
    }
    log.flush()?;
    trainer.params.save(&ckpt).with_context(|| format!("writing {}", ckpt.display()))?;
    match last {
        Some(m) => println!(
            "trained {steps} steps in {:.1} s, final loss {:.6}; checkpoint {}",
            start.elapsed().as_secs_f64(),
            m.loss,
            ckpt.display()
        ),
        None => println!("0 steps; checkpoint {}", ckpt.display()),
    }
    Ok(())
}
