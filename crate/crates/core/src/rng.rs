//! Named random streams split from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type StreamRng = ChaCha8Rng;

/// Independent ChaCha streams derived from the same master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Gumbel = 3,
    Oracle = 4,
    Eval = 5,
    OracleSample = 6,
}

impl Stream {
    pub fn name(self) -> &'static str {
        match self {
            Stream::Init => "init",
            Stream::Shuffle => "shuffle",
            Stream::Gumbel => "gumbel",
            Stream::Oracle => "oracle",
            Stream::Eval => "eval",
            Stream::OracleSample => "oracle-sample",
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Evaluation stream for one evaluation point. Each point gets its own
/// stream so evaluation never perturbs training randomness.
pub fn eval_stream(seed: u64, iteration: usize) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(Stream::Eval as u64 | (iteration as u64) << 8);
    rng
}

/// Exact generator state as seven words: key (4), stream id, word position (lo, hi).
pub fn save_state(rng: &StreamRng) -> Vec<u64> {
    let seed = rng.get_seed();
    let mut words: Vec<u64> = seed
        .chunks(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let pos = rng.get_word_pos();
    words.push(rng.get_stream());
    words.push(pos as u64);
    words.push((pos >> 64) as u64);
    words
}

pub fn restore_state(words: &[u64]) -> Result<StreamRng> {
    if words.len() != 7 {
        return Err(Error::Checkpoint(format!(
            "rng state needs 7 words, found {}",
            words.len()
        )));
    }
    let mut seed = [0u8; 32];
    for (chunk, w) in seed.chunks_mut(8).zip(&words[..4]) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(words[4]);
    rng.set_word_pos(words[5] as u128 | (words[6] as u128) << 64);
    Ok(rng)
}
