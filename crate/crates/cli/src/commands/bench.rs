use std::path::PathBuf;
use std::time::Instant;

use anyhow::Context as _;
use bweda::model::{ModelConfig, ModelParams};
use bweda::pipeline::{run as diarize, Heuristics, InferenceConfig, Variant};
use bweda::simkit::{simulate, ConversationSpec};
use bweda::xencoder::{replay_encode, BlockConfig, Context};

use crate::error::{usage, CliResult};
use crate::settings::Settings;

#[derive(clap::Args)]
pub struct Args {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to time; a fresh desk-sized model otherwise.
    #[arg(long)]
    model: Option<String>,
    /// Stream lengths in frames, comma-separated.
    #[arg(long, value_delimiter = ',')]
    frames: Vec<usize>,
    #[arg(long)]
    block_frames: Option<usize>,
    #[arg(long)]
    context_blocks: Option<Context>,
    #[arg(long)]
    variant: Option<Variant>,
    /// Repetitions per length; the fastest one is reported.
    #[arg(long)]
    runs: Option<usize>,
    /// Feature dimension of the fresh model.
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also time re-encoding every prefix from scratch.
    #[arg(long)]
    replay: bool,
}

fn fastest(runs: usize, mut f: impl FnMut() -> CliResult) -> CliResult<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..runs {
        let t = Instant::now();
        f()?;
        best = best.min(t.elapsed().as_secs_f64());
    }
    Ok(best)
}

pub fn run(a: Args) -> CliResult {
    let mut s = Settings::load(a.config.as_deref())?;
    let lengths: Vec<usize> = s.list("frames", a.frames, vec![1000, 2000])?;
    let d = InferenceConfig::default();
    let cfg = InferenceConfig {
        variant: s.get("variant", a.variant, d.variant)?,
        block_frames: s.get("block-frames", a.block_frames, d.block_frames)?,
        context: s.get("context-blocks", a.context_blocks, d.context)?,
        heuristics: Heuristics::all(),
        ..d
    };
    let runs = s.get("runs", a.runs, 5usize)?;
    let feature_dim = s.get("feature-dim", a.feature_dim, 16usize)?;
    let seed = s.get("seed", a.seed, 0u64)?;
    let replay = s.switch("replay", a.replay)?;
    let model = s.optional::<String>("model", a.model)?;
    s.finish()?;
    cfg.validate().map_err(usage)?;
    if runs == 0 || lengths.is_empty() || lengths.contains(&0) {
        return Err(usage("--runs and every --frames entry must be at least 1"));
    }

    let params = match &model {
        Some(path) => ModelParams::load(path).with_context(|| format!("loading {path}"))?,
        None => ModelParams::init(ModelConfig::desk(feature_dim), seed)?,
    };
    let blocks = BlockConfig::new(cfg.block_frames, cfg.context).map_err(usage)?;

    println!(
        "variant={} W={} L={} runs={runs}",
        cfg.variant, cfg.block_frames, cfg.context
    );
    let mut header = format!("{:>8} {:>7} {:>11} {:>11} {:>7}", "frames", "blocks", "total_ms", "ms/block", "ratio");
    if replay {
        header.push_str(&format!(" {:>11} {:>7}", "replay_ms", "ratio"));
    }
    println!("{header}");
    let mut first: Option<(f64, f64)> = None;
    for &t in &lengths {
        let conv = simulate(&ConversationSpec {
            total_frames: t,
            feature_dim: params.config.input_dim,
            seed,
            ..ConversationSpec::default()
        })?;
        let secs = fastest(runs, || {
            diarize(&conv.features, &cfg, &params)?;
            Ok(())
        })?;
        let n_blocks = blocks.blocks(t).len();
        let replay_secs = if replay {
            Some(fastest(runs, || {
                replay_encode(&params, &conv.features.frames, blocks)?;
                Ok(())
            })?)
        } else {
            None
        };
        let (base, base_replay) = *first.get_or_insert((secs, replay_secs.unwrap_or(1.0)));
        let mut line = format!(
            "{t:>8} {n_blocks:>7} {:>11.2} {:>11.3} {:>7.2}",
            secs * 1e3,
            secs * 1e3 / n_blocks as f64,
            secs / base
        );
        if let Some(r) = replay_secs {
            line.push_str(&format!(" {:>11.2} {:>7.2}", r * 1e3, r / base_replay));
        }
        println!("{line}");
    }
    Ok(())
}
