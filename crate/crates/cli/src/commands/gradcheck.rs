use std::path::PathBuf;
use std::time::Instant;

use anyhow::{anyhow, Context as _};
use bweda::model::{ModelConfig, ModelParams};
use bweda::numeric::OpKind;
use bweda::simkit::ConversationSpec;
use bweda::train::{grad_check, BatchSource, GradCheckConfig, SimulatedSource, TrainMode};
use bweda::xencoder::{BlockConfig, Context};

use crate::error::{usage, CliResult};
use crate::settings::Settings;

#[derive(clap::Args)]
pub struct Args {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to check; a fresh desk-sized model otherwise.
    #[arg(long)]
    model: Option<String>,
    /// Scalar parameters sampled for finite differences.
    #[arg(long)]
    samples: Option<usize>,
    /// Central-difference step.
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// causal or offline.
    #[arg(long)]
    mode: Option<TrainMode>,
    #[arg(long)]
    block_frames: Option<usize>,
    #[arg(long)]
    context_blocks: Option<Context>,
    /// Frames per simulated conversation.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    speakers: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    /// Corrupt the backward rule of one operation (e.g. `softmax_rows`).
    #[arg(long)]
    fault: Option<OpKind>,
    /// Exit with status 2 when the worst relative error exceeds this.
    #[arg(long)]
    tolerance: Option<f64>,
}

pub fn run(a: Args) -> CliResult {
    let mut s = Settings::load(a.config.as_deref())?;
    let d = GradCheckConfig::default();
    let seed = s.get("seed", a.seed, d.seed)?;
    let cfg = GradCheckConfig {
        samples: s.get("samples", a.samples, d.samples)?,
        step: s.get("step", a.step, d.step)?,
        seed,
        mode: s.get("mode", a.mode, d.mode)?,
        blocks: BlockConfig::new(
            s.get("block-frames", a.block_frames, d.blocks.block_frames)?,
            s.get("context-blocks", a.context_blocks, d.blocks.context)?,
        )
        .map_err(usage)?,
        fault: s.optional("fault", a.fault)?,
    };
    let template = ConversationSpec {
        n_speakers: s.get("speakers", a.speakers, 2usize)?,
        total_frames: s.get("frames", a.frames, 12usize)?,
        feature_dim: s.get("feature-dim", a.feature_dim, 16usize)?,
        ..ConversationSpec::default()
    };
    let batch_size = s.get("batch-size", a.batch_size, 2usize)?;
    let tolerance = s.get("tolerance", a.tolerance, 1e-4f64)?;
    let model = s.optional::<String>("model", a.model)?;
    s.finish()?;
    template.validate().map_err(usage)?;
    if cfg.samples == 0 || batch_size == 0 {
        return Err(usage("--samples and --batch-size must be at least 1"));
    }
    if !(cfg.step > 0.0) {
        return Err(usage("--step must be positive"));
    }

    let params: ModelParams<f64> = match &model {
        Some(path) => ModelParams::<f32>::load(path)
            .with_context(|| format!("loading {path}"))?
            .cast(),
        None => ModelParams::init(ModelConfig::desk(template.feature_dim), seed)?,
    };
    if params.config.input_dim != template.feature_dim {
        return Err(usage(format!(
            "model expects {}-dim features, --feature-dim is {}",
            params.config.input_dim, template.feature_dim
        )));
    }
    let mut source = SimulatedSource {
        speakers: vec![template.n_speakers],
        template,
        lengths: Vec::new(),
        batch_size,
        seed,
    };
    let batch = BatchSource::<f64>::batch(&mut source, 0)?;

    let start = Instant::now();
    let r = grad_check(&params, &batch, &cfg)?;
    println!(
        "mode={} samples={} max_rel_err={:.3e} time={:.2}s",
        cfg.mode,
        r.checked,
        r.max_rel_err,
        start.elapsed().as_secs_f64()
    );
    if let Some((name, idx, an, num)) = &r.worst {
        println!("worst {name}[{idx}]: analytic {an:.6e}, numeric {num:.6e}");
    }
    if r.max_rel_err > tolerance {
        return Err(anyhow!("relative error {:.3e} exceeds tolerance {tolerance:.1e}", r.max_rel_err).into());
    }
    Ok(())
}
