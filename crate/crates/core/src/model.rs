//! Pre-norm decoder-only transformer assembled from the attention variants,
//! with full intermediate-state capture for diagnostics and optional
//! fake-quantization hooks at the activation sites used by the PTQ pipeline.

use crate::attention::{
    attention_on_tape, extract_trace, AttentionConfig, AttentionNodes, AttentionTrace,
    AttentionVars, GateKind, SinkKind,
};
use crate::error::{Error, Result};
use crate::rng::{rng_at, STREAM_INIT};
use crate::tensor::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

fn default_d_ff() -> usize {
    0 // patched to 4*d_model in validate_defaults
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    #[serde(default = "default_d_ff")]
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub gate_kind: GateKind,
    pub sink_kind: SinkKind,
    pub rope: bool,
    pub tie_embeddings: bool,
}

impl ModelConfig {
    /// Fills derived defaults (d_ff = 4·d_model) and checks invariants.
    pub fn validated(mut self) -> Result<Self> {
        if self.d_ff == 0 {
            self.d_ff = 4 * self.d_model;
        }
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be >= 1".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be >= 2".into()));
        }
        self.attention_config().validate()?;
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be >= 2".into()));
        }
        Ok(self)
    }

    pub fn attention_config(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            gate: self.gate_kind,
            sink: self.sink_kind,
            causal: true,
            rope: self.rope,
        }
    }

    pub fn register_count(&self) -> usize {
        self.sink_kind.register_count()
    }
}

/// Exact learnable-parameter count for a config. A value gate and an input
/// gate cost the same: d_model·n_heads extra per layer over no gate.
pub fn count_params(config: &ModelConfig) -> usize {
    let d = config.d_model;
    let h = config.n_heads;
    let mut total = config.vocab_size * d; // token embedding
    if !config.rope {
        total += config.max_seq_len * d; // learned absolute positions
    }
    total += config.register_count() * d;
    let per_layer = {
        let mut p = 4 * d * d; // w_q, w_k, w_v, w_o
        p += 4 * d; // two layernorms, gamma+beta
        p += d * config.d_ff + config.d_ff * d; // mlp
        if config.gate_kind != GateKind::None {
            p += d * h;
        }
        if config.sink_kind == SinkKind::LearnableSink {
            p += h;
        }
        p
    };
    total += config.n_layers * per_layer;
    total += 2 * d; // final layernorm
    if !config.tie_embeddings {
        total += d * config.vocab_size; // lm head
    }
    total
}

// ── parameters ───────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
}

/// Ordered, named learnable tensors. The order is the layout contract for
/// checkpoints, optimizer state, and gradient extraction.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    pub entries: Vec<ParamEntry>,
}

impl ParamSet {
    /// Gaussian(0, 0.02²) init for projections and embeddings; gate weights
    /// and sink logits start at zero (neutral gate g = 0.5, near-uniform
    /// sink mass); layernorm at identity.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let d = config.d_model;
        let h = config.n_heads;
        let mut entries = Vec::new();
        let mut counter = 0u64;
        let mut randn = |shape: Vec<usize>| {
            let t = Tensor::randn(shape, INIT_STD, &mut rng_at(seed, STREAM_INIT, counter));
            counter += 1;
            t
        };

        entries.push(ParamEntry { name: "tok_emb".into(), tensor: randn(vec![config.vocab_size, d]) });
        if !config.rope {
            entries.push(ParamEntry { name: "pos_emb".into(), tensor: randn(vec![config.max_seq_len, d]) });
        }
        if let SinkKind::RegisterTokens { count } = config.sink_kind {
            entries.push(ParamEntry { name: "registers".into(), tensor: randn(vec![count, d]) });
        }
        for i in 0..config.n_layers {
            let p = |s: &str| format!("layers.{i}.{s}");
            entries.push(ParamEntry { name: p("ln1.gamma"), tensor: Tensor::full(vec![d], 1.0) });
            entries.push(ParamEntry { name: p("ln1.beta"), tensor: Tensor::zeros(vec![d]) });
            entries.push(ParamEntry { name: p("attn.w_q"), tensor: randn(vec![d, d]) });
            entries.push(ParamEntry { name: p("attn.w_k"), tensor: randn(vec![d, d]) });
            entries.push(ParamEntry { name: p("attn.w_v"), tensor: randn(vec![d, d]) });
            entries.push(ParamEntry { name: p("attn.w_o"), tensor: randn(vec![d, d]) });
            if config.gate_kind != GateKind::None {
                entries.push(ParamEntry { name: p("attn.w_g"), tensor: Tensor::zeros(vec![d, h]) });
            }
            if config.sink_kind == SinkKind::LearnableSink {
                entries.push(ParamEntry { name: p("attn.sink"), tensor: Tensor::zeros(vec![h]) });
            }
            entries.push(ParamEntry { name: p("ln2.gamma"), tensor: Tensor::full(vec![d], 1.0) });
            entries.push(ParamEntry { name: p("ln2.beta"), tensor: Tensor::zeros(vec![d]) });
            entries.push(ParamEntry { name: p("mlp.fc1"), tensor: randn(vec![d, config.d_ff]) });
            entries.push(ParamEntry { name: p("mlp.fc2"), tensor: randn(vec![config.d_ff, d]) });
        }
        entries.push(ParamEntry { name: "final_ln.gamma".into(), tensor: Tensor::full(vec![d], 1.0) });
        entries.push(ParamEntry { name: "final_ln.beta".into(), tensor: Tensor::zeros(vec![d]) });
        if !config.tie_embeddings {
            entries.push(ParamEntry { name: "lm_head".into(), tensor: randn(vec![d, config.vocab_size]) });
        }
        ParamSet { entries }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|e| e.name == name).map(|e| &mut e.tensor)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }
}

// ── forward pass ─────────────────────────────────────────────────────

pub use crate::quant::QuantHook;

/// Tape nodes of one transformer block.
pub struct LayerNodes {
    pub block_in: Var,
    pub attn: AttentionNodes,
    pub attn_out: Var,
    pub mlp_out: Var,
    pub block_out: Var,
}

/// Tape nodes of a full forward pass.
pub struct ForwardNodes {
    pub param_vars: Vec<Var>,
    pub layers: Vec<LayerNodes>,
    /// Logits over the token positions (register rows already stripped).
    pub logits: Var,
}

/// Per-layer diagnostic capture: residual-stream input/output, the
/// attention trace, and the MLP branch output.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    pub input: Tensor,
    pub attn: AttentionTrace,
    pub mlp_out: Tensor,
    pub output: Tensor,
}

/// Build the model graph on a tape. Parameters are loaded as differentiable
/// leaves in entry order; `quant` intercepts activation sites when present.
pub fn forward_on_tape(
    tape: &mut Tape,
    tokens: &[usize],
    params: &ParamSet,
    config: &ModelConfig,
    quant: Option<&dyn QuantHook>,
) -> Result<ForwardNodes> {
    let n = tokens.len();
    let r = config.register_count();
    if n == 0 {
        return Err(Error::Config("empty token sequence".into()));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::IndexOutOfRange { what: "token id", index: bad, limit: config.vocab_size });
    }
    if r + n > config.max_seq_len {
        return Err(Error::Config(format!(
            "sequence length {} + {} registers exceeds max_seq_len {}",
            n, r, config.max_seq_len
        )));
    }

    let param_vars: Vec<Var> = params.entries.iter().map(|e| tape.leaf(e.tensor.clone(), true)).collect();
    let var = |name: &str| -> Var {
        param_vars[params.index_of(name).unwrap_or_else(|| panic!("missing parameter {name}"))]
    };

    let site = |tape: &mut Tape, id: String, v: Var| -> Result<Var> {
        match quant {
            Some(q) => q.site(tape, &id, v),
            None => Ok(v),
        }
    };

    let emb = tape.gather(var("tok_emb"), tokens);
    let mut x = if r > 0 {
        let regs = var("registers");
        tape.concat_rows(&[regs, emb])
    } else {
        emb
    };
    if !config.rope {
        let pos = tape.slice_rows(var("pos_emb"), 0, r + n);
        x = tape.add(x, pos);
    }

    let attn_config = config.attention_config();
    let mut layers = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        let p = |s: &str| format!("layers.{i}.{s}");
        let block_in = site(tape, format!("layers.{i}.block_in"), x)?;
        let ln1 = tape.layernorm(block_in, var(&p("ln1.gamma")), var(&p("ln1.beta")), LN_EPS);
        let attn_in = site(tape, format!("layers.{i}.attn_in"), ln1)?;

        let attn_vars = AttentionVars {
            w_q: var(&p("attn.w_q")),
            w_k: var(&p("attn.w_k")),
            w_v: var(&p("attn.w_v")),
            w_o: var(&p("attn.w_o")),
            w_g: (config.gate_kind != GateKind::None).then(|| var(&p("attn.w_g"))),
            sink_logits: (config.sink_kind == SinkKind::LearnableSink).then(|| {
                let flat = var(&p("attn.sink"));
                tape.reshape(flat, vec![1, config.n_heads])
            }),
        };
        let attn_prefix = format!("layers.{i}.attn");
        let quant_in_attn = quant.map(|q| (q, attn_prefix.as_str()));
        let (attn_out, attn_nodes) =
            attention_on_tape(tape, attn_in, &attn_vars, &attn_config, quant_in_attn)?;
        let mid = tape.add(block_in, attn_out);

        let ln2 = tape.layernorm(mid, var(&p("ln2.gamma")), var(&p("ln2.beta")), LN_EPS);
        let mlp_in = site(tape, format!("layers.{i}.mlp_in"), ln2)?;
        let h1 = tape.matmul(mlp_in, var(&p("mlp.fc1")));
        let act = tape.gelu(h1);
        let act = site(tape, format!("layers.{i}.mlp_hidden"), act)?;
        let mlp_out = tape.matmul(act, var(&p("mlp.fc2")));
        let block_out = tape.add(mid, mlp_out);
        let block_out = site(tape, format!("layers.{i}.block_out"), block_out)?;

        layers.push(LayerNodes { block_in, attn: attn_nodes, attn_out, mlp_out, block_out });
        x = block_out;
    }

    let final_ln = tape.layernorm(x, var("final_ln.gamma"), var("final_ln.beta"), LN_EPS);
    let stripped = if r > 0 { tape.slice_rows(final_ln, r, r + n) } else { final_ln };
    let head_in = site(tape, "head_in".into(), stripped)?;
    let logits = if config.tie_embeddings {
        let w = tape.transpose(var("tok_emb"));
        tape.matmul(head_in, w)
    } else {
        tape.matmul(head_in, var("lm_head"))
    };

    Ok(ForwardNodes { param_vars, layers, logits })
}

/// Mean next-token cross-entropy: logits at position t predict tokens[t+1].
pub fn lm_loss_on_tape(tape: &mut Tape, logits: Var, tokens: &[usize]) -> Var {
    let n = tokens.len();
    assert!(n >= 2, "lm loss needs at least two tokens");
    let pred = tape.slice_rows(logits, 0, n - 1);
    tape.cross_entropy(pred, &tokens[1..], None)
}

pub fn extract_block_traces(tape: &Tape, nodes: &ForwardNodes, config: &ModelConfig) -> Vec<BlockTrace> {
    let attn_config = config.attention_config();
    nodes
        .layers
        .iter()
        .map(|l| BlockTrace {
            input: tape.value(l.block_in).clone(),
            attn: extract_trace(tape, &l.attn, &attn_config),
            mlp_out: tape.value(l.mlp_out).clone(),
            output: tape.value(l.block_out).clone(),
        })
        .collect()
}

/// Causal next-token logits as a pure function; traces captured on demand.
pub fn forward(
    tokens: &[usize],
    params: &ParamSet,
    config: &ModelConfig,
    capture: bool,
) -> Result<(Tensor, Option<Vec<BlockTrace>>)> {
    let mut tape = Tape::new();
    let nodes = forward_on_tape(&mut tape, tokens, params, config, None)?;
    let traces = capture.then(|| extract_block_traces(&tape, &nodes, config));
    Ok((tape.value(nodes.logits).clone(), traces))
}
