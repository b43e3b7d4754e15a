use std::path::PathBuf;

use anyhow::Context as _;
use bweda::evalkit::save_rttm;
use bweda::frontend::extract;
use bweda::simkit::{simulate, simulate_audio, turn_stats, Conversation, ConversationSpec};

use super::fan_out;
use crate::error::{usage, CliResult};
use crate::manifest::RunManifest;
use crate::settings::Settings;

#[derive(clap::Args)]
pub struct Args {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// key=value settings file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of conversations; conversation i uses seed + i.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    speakers: Option<usize>,
    /// Frames per conversation (100 ms each).
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
    /// Speech amplitude of the feature-level emissions.
    #[arg(long)]
    amplitude: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Render 8 kHz sinusoid audio and extract spliced log-Mel features from it.
    #[arg(long)]
    audio: bool,
}

pub fn run(a: Args) -> CliResult {
    let mut s = Settings::load(a.config.as_deref())?;
    let d = ConversationSpec::default();
    let count = s.get("count", a.count, 1usize)?;
    let seed = s.get("seed", a.seed, 0u64)?;
    let spec = ConversationSpec {
        n_speakers: s.get("speakers", a.speakers, d.n_speakers)?,
        total_frames: s.get("frames", a.frames, d.total_frames)?,
        mean_turn_frames: s.get("mean-turn", a.mean_turn, d.mean_turn_frames)?,
        pause_ratio: s.get("pause-ratio", a.pause_ratio, d.pause_ratio)?,
        overlap_ratio: s.get("overlap-ratio", a.overlap_ratio, d.overlap_ratio)?,
        feature_dim: s.get("feature-dim", a.feature_dim, d.feature_dim)?,
        amplitude: s.get("amplitude", a.amplitude, d.amplitude)?,
        seed,
    };
    let audio = s.switch("audio", a.audio)?;
    s.finish()?;
    spec.validate().map_err(usage)?;
    if count == 0 {
        return Err(usage("--count must be at least 1"));
    }

    let names: Vec<String> = (0..count).map(|i| format!("sim{i:04}")).collect();
    let mut outputs = Vec::new();
    for n in &names {
        if audio {
            outputs.push(a.out.join(format!("{n}.wav")));
        }
        outputs.push(a.out.join(format!("{n}.feat")));
        outputs.push(a.out.join(format!("{n}.rttm")));
    }
    RunManifest {
        command: "simulate".into(),
        seed,
        checkpoint_sha256: None,
        outputs,
        config: s.snapshot().clone(),
    }
    .write(&a.out)?;

    let indexed: Vec<(usize, &String)> = names.iter().enumerate().collect();
    let lines = fan_out(&indexed, |&(i, name)| {
        let spec = ConversationSpec {
            seed: seed.wrapping_add(i as u64),
            ..spec.clone()
        };
        let conv = if audio {
            let (wav, labels) = simulate_audio(&spec)?;
            wav.write_wav(a.out.join(format!("{name}.wav")))?;
            Conversation {
                features: extract(&wav)?,
                labels,
            }
        } else {
            simulate(&spec)?
        };
        let feat = a.out.join(format!("{name}.feat"));
        conv.save(&feat).with_context(|| format!("writing {}", feat.display()))?;
        save_rttm(a.out.join(format!("{name}.rttm")), &[conv.reference(name)])?;
        let st = turn_stats(&conv.labels);
        Ok(format!(
            "{name}: {} frames, turns per speaker {:?}, overlap {:.1}%, silence {:.1}%",
            st.frames,
            st.turns_per_speaker,
            100.0 * st.overlap_fraction,
            100.0 * st.silence_fraction
        ))
    })?;
    for l in lines {
        println!("{l}");
    }
    Ok(())
}
