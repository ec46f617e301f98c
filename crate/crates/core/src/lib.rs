//! Alignment toolkit for controllable recommendation.
//!
//! The crate builds intention-bearing instruction datasets with labels
//! augmented by a teacher sequential recommender, scores generated
//! recommendation lists with rule-based item- and list-level rewards, and
//! trains a small autoregressive recommendation policy in two stages:
//! supervised learning on the augmented labels, then clipped policy-gradient
//! reinforcement learning with GAE and a per-token KL penalty against the
//! frozen supervised checkpoint.
//!
//! Module map:
//! - [`catalog`]: items, categories, interaction sequences, leave-one-out
//!   splits, synthetic corpus generation
//! - [`teacher`]: the sequential teacher (attentive or markov-popularity)
//!   and full-catalog rankings
//! - [`instructions`]: instruction dataset synthesis and prompt templates
//! - [`rewards`]: legality judging and all reward rules
//! - [`policy`]: the autoregressive policy, supervised training, sampling,
//!   response parsing
//! - [`rl`]: GAE, the clipped policy-gradient update, and the RL loop
//! - [`metrics`]: HR/NDCG, control metrics, formatting metrics, evaluation
//!   harness
//! - [`nn`]: the small reverse-mode autodiff everything trains on

pub mod catalog;
pub mod instructions;
pub mod metrics;
pub mod nn;
pub mod policy;
pub mod rewards;
pub mod rl;
pub mod teacher;

/// Derive an independent 32-byte RNG seed from a base seed, a stream tag and
/// an index, so per-sample streams are identical whether generation runs
/// serially or fans out.
pub fn stream_rng(seed: u64, tag: u64, index: u64) -> rand_chacha::ChaCha20Rng {
    use rand::SeedableRng;
    let mut state = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    let mut bytes = [0u8; 32];
    for chunk in bytes.chunks_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    rand_chacha::ChaCha20Rng::from_seed(bytes)
}

fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
