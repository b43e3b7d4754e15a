//! Shared fixtures for the criterion benches.

use bweda::evalkit::SegmentList;
use bweda::frontend::FeatureMatrix;
use bweda::model::{ModelConfig, ModelParams};
use bweda::simkit::{simulate, ConversationSpec};

pub const FEATURE_DIM: usize = 16;

/// Untrained desk-sized model; timing does not depend on the weights.
pub fn model() -> ModelParams {
    ModelParams::init(ModelConfig::desk(FEATURE_DIM), 0).expect("desk config is valid")
}

pub fn stream(frames: usize, seed: u64) -> FeatureMatrix {
    let spec = ConversationSpec {
        total_frames: frames,
        feature_dim: FEATURE_DIM,
        seed,
        ..ConversationSpec::default()
    };
    simulate(&spec).expect("valid spec").features
}

/// Reference and a jittered hypothesis over `frames` 100 ms frames.
pub fn rttm_pair(frames: usize, speakers: usize) -> (SegmentList, SegmentList) {
    let spec = ConversationSpec {
        n_speakers: speakers,
        total_frames: frames,
        feature_dim: 2,
        ..ConversationSpec::default()
    };
    let conv = simulate(&spec).expect("valid spec");
    let reference = conv.reference("rec");
    let mut hyp = SegmentList::new("rec");
    for (i, t) in reference.segments.iter().enumerate() {
        let shift = if i % 2 == 0 { 0.13 } else { -0.07 };
        let spk = format!("h{}", (t.speaker.len() + i / 7) % (speakers + 1));
        hyp.push(spk, (t.onset + shift).max(0.0), t.duration).expect("non-negative turn");
    }
    (reference, hyp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_have_requested_shape() {
        assert_eq!(stream(120, 1).len(), 120);
        let (r, h) = rttm_pair(600, 3);
        assert_eq!(r.segments.len(), h.segments.len());
        assert!(!r.segments.is_empty());
    }
}
