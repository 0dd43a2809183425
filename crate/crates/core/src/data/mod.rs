//! Task data: the Bigram-Backcopy generator and byte-level corpus handling.

pub mod bb;
pub mod corpus;

pub use bb::{
    bb_bayes_risks, bb_generate, bb_generate_at, bb_sample_chain, oracle_distribution,
    oracle_logits, BBConfig, BBSequence, BbBayesRisks, BbChain, RuleLabel,
};
pub use corpus::{corpus_load, corpus_split, sample_batch, synth_corpus, CorpusSplit};
