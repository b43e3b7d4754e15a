use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use bweda::evalkit::{save_rttm, SegmentList};
use bweda::frontend::{extract, AudioBuffer, FeatureMatrix};
use bweda::model::ModelParams;
use bweda::numeric::{Container, Tensor};
use bweda::pipeline::{run as diarize, DiarizationResult, Heuristics, InferenceConfig, ShuffleMode, Variant};
use bweda::xencoder::Context;

use super::{fan_out, stem};
use crate::error::{usage, CliResult};
use crate::manifest::{sha256_file, RunManifest};
use crate::settings::Settings;

pub const DEFAULT_BLOCK_SECONDS: f64 = 10.0;

#[derive(clap::Args)]
pub struct Args {
    /// Output directory for RTTM, posterior dumps and the manifest.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint written by `train`.
    #[arg(long)]
    model: Option<String>,
    /// 8 kHz mono WAV or feature dump; repeat or comma-separate for several streams.
    #[arg(long, value_delimiter = ',')]
    input: Vec<String>,
    /// ul, ll or offline.
    #[arg(long)]
    variant: Option<Variant>,
    /// Block length in seconds; W = block-seconds / frame period.
    #[arg(long, conflicts_with = "block_frames")]
    block_seconds: Option<f64>,
    /// Block length W in frames.
    #[arg(long)]
    block_frames: Option<usize>,
    /// Left context L in blocks, or `inf`.
    #[arg(long)]
    context_blocks: Option<Context>,
    /// Align each block's attractors with the previous block's.
    #[arg(long)]
    reorder: bool,
    /// Average aligned attractors with the previous block's.
    #[arg(long)]
    average: bool,
    /// none, within or across.
    #[arg(long)]
    shuffle: Option<ShuffleMode>,
    /// Attractor existence threshold.
    #[arg(long)]
    tau: Option<f64>,
    /// Posterior threshold for speech activity.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    max_speakers: Option<usize>,
    /// Seed of the embedding shuffle.
    #[arg(long)]
    seed: Option<u64>,
}

enum BlockSize {
    Seconds(f64),
    Frames(usize),
}

impl BlockSize {
    fn frames(&self, frame_period: f64) -> CliResult<usize> {
        match *self {
            BlockSize::Frames(w) => Ok(w),
            BlockSize::Seconds(s) => {
                let w = (s / frame_period).round();
                if w >= 1.0 {
                    Ok(w as usize)
                } else {
                    Err(usage(format!("block of {s} s is shorter than one {frame_period} s frame")))
                }
            }
        }
    }
}

/// Frames for the model: WAV files go through the frontend, anything else is
/// read as a feature container.
pub fn load_features(path: &Path) -> CliResult<FeatureMatrix> {
    let is_wav = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
    let f = if is_wav {
        extract(&AudioBuffer::read_wav(path)?)
    } else {
        FeatureMatrix::load(path)
    };
    Ok(f.with_context(|| format!("reading {}", path.display()))?)
}

pub fn posterior_container(r: &DiarizationResult) -> Container {
    let mut c = Container::new();
    c.insert_matrix("posterior", &r.posterior);
    c.insert("speaker_ids", Tensor::vector(r.speaker_ids.iter().map(|&i| i as f32).collect()));
    c.insert("s_per_block", Tensor::vector(r.s_per_block.iter().map(|&s| s as f32).collect()));
    c.insert("meta.frame_period", Tensor::scalar(r.frame_period as f32));
    c
}

pub fn run(a: Args) -> CliResult {
    let mut s = Settings::load(a.config.as_deref())?;
    let model = s.required("model", a.model)?;
    let inputs: Vec<String> = s.list("input", a.input, Vec::new())?;
    if inputs.is_empty() {
        return Err(usage("missing required setting `--input`"));
    }
    let d = InferenceConfig::default();
    let variant = s.get("variant", a.variant, d.variant)?;
    let block = match (
        s.optional("block-seconds", a.block_seconds)?,
        s.optional("block-frames", a.block_frames)?,
    ) {
        (Some(_), Some(_)) => return Err(usage("give either block-seconds or block-frames, not both")),
        (None, Some(w)) => BlockSize::Frames(w),
        (Some(sec), None) => BlockSize::Seconds(sec),
        (None, None) => BlockSize::Seconds(s.get("block-seconds", None, DEFAULT_BLOCK_SECONDS)?),
    };
    let base = InferenceConfig {
        variant,
        context: s.get("context-blocks", a.context_blocks, d.context)?,
        tau: s.get("tau", a.tau, d.tau)?,
        heuristics: Heuristics {
            reorder: s.switch("reorder", a.reorder)?,
            average: s.switch("average", a.average)?,
            shuffle: s.get("shuffle", a.shuffle, d.heuristics.shuffle)?,
        },
        activity_threshold: s.get("threshold", a.threshold, d.activity_threshold)?,
        shuffle_seed: s.get("seed", a.seed, d.shuffle_seed)?,
        max_speakers: s.get("max-speakers", a.max_speakers, d.max_speakers)?,
        ..d
    };
    s.finish()?;
    base.validate().map_err(usage)?;

    let paths: Vec<PathBuf> = inputs.iter().map(PathBuf::from).collect();
    let ids: Vec<String> = paths.iter().map(|p| stem(p)).collect();
    if ids.iter().collect::<BTreeSet<_>>().len() != ids.len() {
        return Err(usage("inputs must have distinct file stems (they name the outputs)"));
    }
    let digest = sha256_file(model.as_ref())?;
    let params = ModelParams::load(&model).with_context(|| format!("loading {model}"))?;

    let mut outputs = Vec::new();
    for id in &ids {
        outputs.push(a.out.join(format!("{id}.rttm")));
        outputs.push(a.out.join(format!("{id}.post")));
    }
    RunManifest {
        command: "infer".into(),
        seed: base.shuffle_seed,
        checkpoint_sha256: Some(digest),
        outputs,
        config: s.snapshot().clone(),
    }
    .write(&a.out)?;

    let jobs: Vec<(&PathBuf, &String)> = paths.iter().zip(&ids).collect();
    let lines = fan_out(&jobs, |&(path, id)| {
        let features = load_features(path)?;
        let cfg = InferenceConfig {
            block_frames: block.frames(features.frame_period)?,
            ..base.clone()
        };
        let r = diarize(&features, &cfg, &params).with_context(|| format!("diarizing {}", path.display()))?;
        save_rttm(a.out.join(format!("{id}.rttm")), &[SegmentList::from_segments(id.as_str(), &r.segments)])?;
        posterior_container(&r).save(a.out.join(format!("{id}.post")))?;
        let counts = if r.s_per_block.is_empty() {
            String::new()
        } else {
            format!(", speakers per block {:?}", r.s_per_block)
        };
        Ok(format!(
            "{id}: {} frames, W = {} frames, {} speakers, {} segments{counts}",
            features.len(),
            cfg.block_frames,
            r.n_speakers(),
            r.segments.len()
        ))
    })?;
    for l in lines {
        println!("{l}");
    }
    Ok(())
}
