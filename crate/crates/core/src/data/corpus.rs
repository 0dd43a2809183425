//! Byte-level corpus ingestion for the tiny LM runs: 256 byte tokens plus
//! BOS/EOS/PAD specials, contiguous chunking with a BOS at each chunk start,
//! and deterministic batch sampling keyed by (seed, stream, counter).

use crate::error::{Error, Result};
use crate::rng::{rng_at, STREAM_CORPUS};
use rand::seq::SliceRandom;
use rand::Rng;
use std::path::Path;

pub const BYTE_VOCAB: usize = 259;
pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const PAD: usize = 258;

pub fn encode(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

/// Inverse of encode on the byte payload; special tokens are dropped.
pub fn decode(tokens: &[usize]) -> Vec<u8> {
    tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect()
}

#[derive(Clone, Debug)]
pub struct CorpusSplit {
    pub train: Vec<u8>,
    pub valid: Vec<u8>,
}

/// Split a UTF-8 text file at ⌊ratio·N⌋ bytes. Empty files are rejected.
pub fn corpus_load(path: &Path, split_ratio: f64) -> Result<CorpusSplit> {
    let bytes = std::fs::read(path)?;
    corpus_split(bytes, split_ratio)
}

pub fn corpus_split(bytes: Vec<u8>, split_ratio: f64) -> Result<CorpusSplit> {
    if bytes.is_empty() {
        return Err(Error::Ingestion("corpus file is empty".into()));
    }
    if !(0.0..=1.0).contains(&split_ratio) {
        return Err(Error::Ingestion(format!("split ratio {split_ratio} outside [0,1]")));
    }
    let cut = (split_ratio * bytes.len() as f64).floor() as usize;
    let (train, valid) = bytes.split_at(cut);
    Ok(CorpusSplit { train: train.to_vec(), valid: valid.to_vec() })
}

/// Number of full [BOS + (seq_len−1) bytes] chunks in a byte stream.
pub fn chunk_count(n_bytes: usize, seq_len: usize) -> usize {
    assert!(seq_len >= 2);
    n_bytes / (seq_len - 1)
}

/// Chunk `idx`: BOS followed by seq_len−1 contiguous bytes.
pub fn chunk_at(bytes: &[u8], seq_len: usize, idx: usize) -> Vec<usize> {
    let body = seq_len - 1;
    let start = idx * body;
    let mut out = Vec::with_capacity(seq_len);
    out.push(BOS);
    out.extend(bytes[start..start + body].iter().map(|&b| b as usize));
    out
}

/// Deterministic with-replacement batch draw keyed by (seed, stream, counter).
pub fn sample_batch(
    bytes: &[u8],
    seq_len: usize,
    batch: usize,
    seed: u64,
    stream: u64,
    counter: u64,
) -> Result<Vec<Vec<usize>>> {
    let chunks = chunk_count(bytes.len(), seq_len);
    if chunks == 0 {
        return Err(Error::Ingestion(format!(
            "corpus too small: {} bytes cannot fill one {seq_len}-token chunk",
            bytes.len()
        )));
    }
    let mut rng = rng_at(seed, stream, counter);
    Ok((0..batch).map(|_| chunk_at(bytes, seq_len, rng.gen_range(0..chunks))).collect())
}

/// The first `max_chunks` chunks in order — a fixed evaluation pass.
pub fn eval_chunks(bytes: &[u8], seq_len: usize, max_chunks: usize) -> Vec<Vec<usize>> {
    let n = chunk_count(bytes.len(), seq_len).min(max_chunks);
    (0..n).map(|i| chunk_at(bytes, seq_len, i)).collect()
}

const WORDS: &[&str] = &[
    "the", "of", "and", "to", "a", "in", "that", "it", "was", "for", "on", "with", "as", "at",
    "by", "from", "they", "we", "say", "her", "she", "or", "an", "will", "my", "one", "all",
    "would", "there", "their", "what", "so", "up", "out", "if", "about", "who", "get", "which",
    "go", "me", "when", "make", "can", "like", "time", "no", "just", "him", "know", "take",
    "people", "into", "year", "your", "good", "some", "could", "them", "see", "other", "than",
    "then", "now", "look", "only", "come", "its", "over", "think", "also", "back", "after",
    "use", "two", "how", "our", "work", "first", "well", "way", "even", "new", "want",
    "because", "any", "these", "give", "day", "most", "us", "water", "long", "find", "here",
    "thing", "great", "man", "world", "life", "still", "hand", "old", "tell", "small", "every",
    "found", "between", "never", "under", "last", "night", "light", "house", "river", "story",
    "letter", "mountain", "winter", "garden", "window", "morning", "silence", "stone",
];

/// Deterministic pseudo-English text: Zipf-weighted word draws shaped into
/// sentences and paragraphs. Stands in for a natural corpus at desk scale.
pub fn synth_corpus(n_bytes: usize, seed: u64) -> Vec<u8> {
    let mut rng = rng_at(seed, STREAM_CORPUS, 0);
    let weights: Vec<f64> = (0..WORDS.len()).map(|i| 1.0 / (i as f64 + 3.0)).collect();
    let total: f64 = weights.iter().sum();
    let pick = |rng: &mut rand_chacha::ChaCha8Rng| -> &'static str {
        let mut dart: f64 = rng.gen::<f64>() * total;
        for (i, &w) in weights.iter().enumerate() {
            dart -= w;
            if dart <= 0.0 {
                return WORDS[i];
            }
        }
        WORDS[WORDS.len() - 1]
    };

    let mut out: Vec<u8> = Vec::with_capacity(n_bytes + 64);
    let mut sentences_in_par = 0usize;
    let mut par_target = rng.gen_range(4..9);
    while out.len() < n_bytes {
        let words = rng.gen_range(4..15);
        for w in 0..words {
            let word = pick(&mut rng);
            if w == 0 {
                let mut chars = word.chars();
                if let Some(c) = chars.next() {
                    out.extend(c.to_uppercase().to_string().as_bytes());
                    out.extend(chars.as_str().as_bytes());
                }
            } else {
                out.extend(word.as_bytes());
            }
            if w + 1 < words {
                if w > 1 && rng.gen::<f64>() < 0.08 {
                    out.push(b',');
                }
                out.push(b' ');
            }
        }
        out.push(if rng.gen::<f64>() < 0.06 { b'?' } else { b'.' });
        sentences_in_par += 1;
        if sentences_in_par >= par_target {
            out.extend(b"\n\n");
            sentences_in_par = 0;
            par_target = rng.gen_range(4..9);
        } else {
            out.push(b' ');
        }
    }
    out.truncate(n_bytes);
    out
}

/// Shuffle chunk indices deterministically (one epoch order).
pub fn epoch_order(chunks: usize, seed: u64, stream: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..chunks).collect();
    idx.shuffle(&mut rng_at(seed, stream, epoch));
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_identity_on_bytes() {
        let bytes: Vec<u8> = (0..=255).collect();
        assert_eq!(decode(&encode(&bytes)), bytes);
    }

    #[test]
    fn split_ratio_floor() {
        let bytes: Vec<u8> = (0..100).map(|i| i as u8).collect();
        let split = corpus_split(bytes, 0.9).unwrap();
        assert_eq!(split.train.len(), 90);
        assert_eq!(split.valid.len(), 10);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(corpus_split(Vec::new(), 0.9).is_err());
    }

    #[test]
    fn batches_are_seed_deterministic() {
        let bytes = synth_corpus(4096, 7);
        let a = sample_batch(&bytes, 32, 4, 11, 2, 5).unwrap();
        let b = sample_batch(&bytes, 32, 4, 11, 2, 5).unwrap();
        assert_eq!(a, b);
        let c = sample_batch(&bytes, 32, 4, 11, 2, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn chunks_start_with_bos() {
        let bytes = synth_corpus(2048, 3);
        for chunk in eval_chunks(&bytes, 16, 8) {
            assert_eq!(chunk[0], BOS);
            assert_eq!(chunk.len(), 16);
            assert!(chunk[1..].iter().all(|&t| t < 256));
        }
    }

    #[test]
    fn synth_corpus_deterministic_and_utf8() {
        let a = synth_corpus(1000, 42);
        let b = synth_corpus(1000, 42);
        assert_eq!(a, b);
        assert_eq!(a.len(), 1000);
        // all ascii by construction
        assert!(a.iter().all(|&c| c.is_ascii()));
    }
}
