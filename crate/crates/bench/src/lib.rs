//! Inputs shared by the criterion benches.

use attnvtg::synth::{generate_pair, SynthSpec};
use attnvtg::AttentionDump;

/// A positive/zero pair with `frames` frames, four tokens per frame and a
/// query of `query_len` tokens over five heads.
pub fn pair(frames: usize, query_len: usize) -> (AttentionDump, AttentionDump) {
    let spec = SynthSpec {
        seed: 11,
        num_samples: 1,
        num_frames: [frames, frames],
        tokens_per_frame: [4, 4],
        query_len: [query_len, query_len],
        ..SynthSpec::default()
    };
    let p = generate_pair(&spec, 0).expect("bench spec is valid");
    (p.positive, p.zero)
}
