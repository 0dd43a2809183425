//! Shared fixtures for the criterion benchmarks.

use vgalab_core::attention::{GateKind, SinkKind};
use vgalab_core::data::{bb_sample_chain, BBConfig, BbChain};
use vgalab_core::model::{ModelConfig, ParamSet};

pub fn bench_model(gate: GateKind, sink: SinkKind) -> (ModelConfig, ParamSet) {
    let config = ModelConfig {
        n_layers: 1,
        d_model: 64,
        n_heads: 2,
        d_ff: 0,
        vocab_size: 20,
        max_seq_len: 128 + sink.register_count(),
        gate_kind: gate,
        sink_kind: sink,
        rope: false,
        tie_embeddings: false,
    }
    .validated()
    .expect("bench config");
    let params = ParamSet::init(&config, 1);
    (config, params)
}

pub fn bench_bb() -> (BBConfig, BbChain) {
    let config = BBConfig::default();
    let chain = bb_sample_chain(&config).expect("chain");
    (config, chain)
}
