//! Run configuration: one JSON file per run, dotted-path `--set` overrides,
//! unknown keys rejected.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use vgalab_core::attention::{GateKind, SinkKind};
use vgalab_core::data::BBConfig;
use vgalab_core::error::{Error, Result};
use vgalab_core::model::ModelConfig;
use vgalab_core::quant::QuantScheme;
use vgalab_core::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Bb,
    Corpus,
}

/// Named attention variants mapped onto (gate_kind, sink_kind).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Vanilla,
    InputGate,
    ValueGate,
    RegisterTokens,
    LearnableSink,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: Option<usize>,
    pub d_model: Option<usize>,
    pub n_heads: Option<usize>,
    pub d_ff: Option<usize>,
    pub vocab_size: Option<usize>,
    pub max_seq_len: Option<usize>,
    pub gate_kind: Option<GateKind>,
    pub sink_kind: Option<SinkKind>,
    pub rope: Option<bool>,
    pub tie_embeddings: Option<bool>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    /// UTF-8 text file; when absent, a deterministic synthetic corpus of
    /// `synthetic_bytes` is used.
    pub path: Option<PathBuf>,
    pub synthetic_bytes: usize,
    pub synthetic_seed: u64,
    pub split_ratio: f64,
    pub seq_len: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            path: None,
            synthetic_bytes: 1 << 20,
            synthetic_seed: 1,
            split_ratio: 0.9,
            seq_len: 64,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Held-out chunks per perplexity evaluation.
    pub max_eval_chunks: usize,
    /// Probe sequences for sink diagnostics.
    pub probe_sequences: usize,
    /// When set, eval exits nonzero if backcopy risk exceeds it.
    pub backcopy_threshold: Option<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { max_eval_chunks: 64, probe_sequences: 16, backcopy_threshold: None }
    }
}

fn default_precision() -> String {
    "f64".into()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/out")
}

fn default_dataset_count() -> usize {
    512
}

fn default_register_count() -> usize {
    4
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskKind,
    #[serde(default)]
    pub variant: Option<Variant>,
    #[serde(default = "default_register_count")]
    pub register_count: usize,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub bb: BBConfig,
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default)]
    pub quant: QuantScheme,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default = "default_precision")]
    pub precision: String,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Periodic checkpoint interval in steps; 0 = final only.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "default_dataset_count")]
    pub dataset_count: usize,
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &[String], out: Option<&Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config {} is not valid JSON: {e}", path.display())))?;
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        let mut config: RunConfig = serde_json::from_value(value)
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        if let Some(dir) = out {
            config.output_dir = dir.to_path_buf();
        }
        if let Ok(seed) = std::env::var("VGALAB_SEED") {
            let seed: u64 = seed
                .parse()
                .map_err(|_| Error::Config(format!("VGALAB_SEED must be an integer, got {seed}")))?;
            config.train.seed = seed;
            config.bb.seed = seed;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        match self.precision.as_str() {
            "f64" => {}
            "f32" => {
                return Err(Error::Config(
                    "precision f32 is not supported; training and checks run in f64".into(),
                ))
            }
            other => return Err(Error::Config(format!("unknown precision {other}"))),
        }
        self.train.validate()?;
        if self.task == TaskKind::Bb {
            self.bb.validate()?;
        }
        Ok(())
    }

    /// Gate/sink selection: explicit model fields win over the variant
    /// shortcut.
    fn gate_sink(&self) -> (GateKind, SinkKind) {
        let from_variant = match self.variant {
            Some(Variant::Vanilla) | None => (GateKind::None, SinkKind::None),
            Some(Variant::InputGate) => (GateKind::Input, SinkKind::None),
            Some(Variant::ValueGate) => (GateKind::Value, SinkKind::None),
            Some(Variant::RegisterTokens) => {
                (GateKind::None, SinkKind::RegisterTokens { count: self.register_count })
            }
            Some(Variant::LearnableSink) => (GateKind::None, SinkKind::LearnableSink),
        };
        (
            self.model.gate_kind.unwrap_or(from_variant.0),
            self.model.sink_kind.unwrap_or(from_variant.1),
        )
    }

    /// Concrete model config with task-specific defaults filled in.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let (gate_kind, sink_kind) = self.gate_sink();
        let registers = sink_kind.register_count();
        let (n_layers, d_model, n_heads, rope, vocab, seq) = match self.task {
            TaskKind::Bb => (1, 64, 2, false, self.bb.model_vocab(), self.bb.seq_len),
            TaskKind::Corpus => {
                (2, 128, 4, true, vgalab_core::data::corpus::BYTE_VOCAB, self.corpus.seq_len)
            }
        };
        ModelConfig {
            n_layers: self.model.n_layers.unwrap_or(n_layers),
            d_model: self.model.d_model.unwrap_or(d_model),
            n_heads: self.model.n_heads.unwrap_or(n_heads),
            d_ff: self.model.d_ff.unwrap_or(0),
            vocab_size: self.model.vocab_size.unwrap_or(vocab),
            max_seq_len: self.model.max_seq_len.unwrap_or(seq + registers),
            gate_kind,
            sink_kind,
            rope: self.model.rope.unwrap_or(rope),
            tie_embeddings: self.model.tie_embeddings.unwrap_or(false),
        }
        .validated()
    }
}

/// Apply one `key.path=value` override; the value is parsed as JSON when
/// possible and treated as a string otherwise.
pub fn apply_override(root: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set needs key=value, got `{spec}`")))?;
    let parsed: serde_json::Value =
        serde_json::from_str(raw).unwrap_or(serde_json::Value::String(raw.to_string()));
    let mut cursor = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !cursor.is_object() {
            return Err(Error::Config(format!("--set {path}: `{part}` is not an object")));
        }
        let map = cursor.as_object_mut().unwrap();
        if i + 1 == parts.len() {
            map.insert(part.to_string(), parsed);
            return Ok(());
        }
        cursor = map
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("override path was empty")
}
