//! Subcommand implementations. Each writes its artifacts under the run's
//! output directory; wall-clock timestamps live only in a sidecar so the
//! primary artifacts are byte-reproducible.

use crate::config::{RunConfig, TaskKind};
use serde_json::json;
use std::path::Path;
use vgalab_core::attention::{GateKind, SinkKind};
use vgalab_core::chart::charts_from_records;
use vgalab_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use vgalab_core::data::{bb_bayes_risks, bb_generate, bb_sample_chain, corpus};
use vgalab_core::error::{Error, Result};
use vgalab_core::metrics::{self, MetricsLog, MetricsRecord};
use vgalab_core::model::{count_params, ModelConfig, ParamSet};
use vgalab_core::quant::{calibrate, quantized_eval, QuantEvalOptions};
use vgalab_core::rng::{STREAM_CALIB, STREAM_EVAL, STREAM_PROBE};
use vgalab_core::train::{
    grad_check, gradcheck_model, gradcheck_probe, train, AdamState, TrainOutcome, TrainTask,
};

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn timestamp_sidecar(dir: &Path, phase: &str) -> Result<()> {
    use std::time::{SystemTime, UNIX_EPOCH};
    let now = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
    let path = dir.join("timestamps.json");
    let mut entries: serde_json::Value = std::fs::read_to_string(&path)
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or_else(|| json!({}));
    entries[phase] = json!(now.as_secs());
    write_json(&path, &entries)
}

/// Build the training task described by the config.
fn build_task(config: &RunConfig) -> Result<TrainTask> {
    match config.task {
        TaskKind::Bb => TrainTask::bb(config.bb.clone()),
        TaskKind::Corpus => {
            let split = load_corpus(config)?;
            Ok(TrainTask::lm(split, config.corpus.seq_len))
        }
    }
}

fn load_corpus(config: &RunConfig) -> Result<corpus::CorpusSplit> {
    match &config.corpus.path {
        Some(path) => corpus::corpus_load(path, config.corpus.split_ratio),
        None => corpus::corpus_split(
            corpus::synth_corpus(config.corpus.synthetic_bytes, config.corpus.synthetic_seed),
            config.corpus.split_ratio,
        ),
    }
}

// ── bb-gen ───────────────────────────────────────────────────────────

pub fn cmd_bb_gen(config: &RunConfig) -> Result<()> {
    if config.task != TaskKind::Bb {
        return Err(Error::Config("bb-gen requires task = bb".into()));
    }
    let chain = bb_sample_chain(&config.bb)?;
    let risks = bb_bayes_risks(&config.bb, &chain)?;
    let sequences = bb_generate(&config.bb, &chain, config.dataset_count);
    let dir = &config.output_dir;
    std::fs::create_dir_all(dir)?;

    let mut file = std::io::BufWriter::new(std::fs::File::create(dir.join("dataset.jsonl"))?);
    vgalab_core::data::bb::write_jsonl(&sequences, &mut file)?;
    use std::io::Write;
    file.flush()?;

    write_json(
        &dir.join("chain.json"),
        &json!({
            "config": config.bb,
            "transition": chain.transition,
            "trigger_ids": chain.trigger_ids,
            "bayes_risks": { "bigram": risks.bigram, "backcopy": risks.backcopy },
        }),
    )?;
    println!(
        "wrote {} sequences to {} (bigram Bayes risk {:.4})",
        sequences.len(),
        dir.join("dataset.jsonl").display(),
        risks.bigram
    );
    Ok(())
}

// ── train ────────────────────────────────────────────────────────────

fn checkpoint_of(step: usize, config_echo: serde_json::Value, params: &ParamSet, adam: &AdamState) -> Checkpoint {
    let mut tensors: Vec<(String, vgalab_core::Tensor)> = Vec::new();
    for (i, e) in params.entries.iter().enumerate() {
        tensors.push((format!("param.{}", e.name), e.tensor.clone()));
        tensors.push((format!("adam.m.{}", e.name), adam.m[i].clone()));
        tensors.push((format!("adam.v.{}", e.name), adam.v[i].clone()));
    }
    Checkpoint { step, config: config_echo, tensors }
}

fn params_from_checkpoint(ckpt: &Checkpoint, model: &ModelConfig, seed: u64) -> Result<(ParamSet, AdamState, usize)> {
    let mut params = ParamSet::init(model, seed);
    let mut adam = AdamState::zeros_like(&params);
    let load = |prefix: &str, name: &str, shape: &[usize]| -> Result<vgalab_core::Tensor> {
        let full = format!("{prefix}.{name}");
        let t = ckpt
            .get(&full)
            .ok_or_else(|| Error::CheckpointMismatch { fields: vec![full.clone()] })?;
        if t.shape != shape {
            return Err(Error::CheckpointMismatch { fields: vec![format!("{full} shape")] });
        }
        Ok(t.clone())
    };
    for (i, entry) in params.entries.iter_mut().enumerate() {
        let shape = entry.tensor.shape.clone();
        entry.tensor = load("param", &entry.name, &shape)?;
        adam.m[i] = load("adam.m", &entry.name, &shape)?;
        adam.v[i] = load("adam.v", &entry.name, &shape)?;
    }
    Ok((params, adam, ckpt.step))
}

/// Error with the names of model fields that differ between the config echo
/// inside a checkpoint and the currently resolved model config.
fn check_model_match(ckpt: &Checkpoint, model: &ModelConfig) -> Result<()> {
    let current = serde_json::to_value(model)?;
    let stored = &ckpt.config["model"];
    if stored.is_null() {
        return Ok(());
    }
    let mut divergent = Vec::new();
    if let (Some(a), Some(b)) = (stored.as_object(), current.as_object()) {
        for (k, v) in b {
            if a.get(k) != Some(v) {
                divergent.push(format!(
                    "model.{k}: checkpoint {} vs config {v}",
                    a.get(k).unwrap_or(&serde_json::Value::Null)
                ));
            }
        }
    }
    if divergent.is_empty() {
        Ok(())
    } else {
        Err(Error::CheckpointMismatch { fields: divergent })
    }
}

fn config_echo(config: &RunConfig, model: &ModelConfig) -> Result<serde_json::Value> {
    let mut run = serde_json::to_value(config)?;
    // artifact bytes must not depend on where the run was written
    run["output_dir"] = serde_json::Value::Null;
    Ok(json!({
        "run": run,
        "model": serde_json::to_value(model)?,
    }))
}

pub fn cmd_train(config: &RunConfig) -> Result<()> {
    let model = config.model_config()?;
    let task = build_task(config)?;
    let dir = &config.output_dir;
    std::fs::create_dir_all(dir)?;
    timestamp_sidecar(dir, "train_start")?;

    let echo = config_echo(config, &model)?;
    write_json(&dir.join("run_config.json"), &echo)?;

    let (mut params, adam, start_step) = match &config.checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            check_model_match(&ckpt, &model)?;
            let (p, a, s) = params_from_checkpoint(&ckpt, &model, config.train.seed)?;
            (p, Some(a), s)
        }
        None => (ParamSet::init(&model, config.train.seed), None, 0),
    };

    println!(
        "training {:?}/{:?}: {}",
        model.gate_kind,
        model.sink_kind,
        vgalab_core::train::describe_model(&model)
    );

    let mut log = MetricsLog::create(dir)?;
    let mut records: Vec<MetricsRecord> = Vec::new();
    let on_record = |rec: &MetricsRecord, log: &mut MetricsLog, records: &mut Vec<MetricsRecord>| {
        let _ = log.append(rec);
        println!(
            "step {:>6}  attn_sink {:.3}  val_norm_sink {:.4}  delta_logit {:+.3}{}{}",
            rec.step,
            rec.attn_sink,
            rec.val_norm_sink,
            rec.delta_logit_sink,
            rec.backcopy_risk.map(|r| format!("  backcopy {r:.4}")).unwrap_or_default(),
            rec.perplexity.map(|p| format!("  ppl {p:.3}")).unwrap_or_default(),
        );
        records.push(rec.clone());
    };

    // resume is exact, so periodic checkpoints come from running the loop
    // in segments up to each boundary
    let mut boundaries = Vec::new();
    if config.checkpoint_every > 0 {
        let mut b = start_step + config.checkpoint_every;
        while b < config.train.steps {
            boundaries.push(b);
            b += config.checkpoint_every;
        }
    }
    boundaries.push(config.train.steps);

    let mut cursor = start_step;
    let mut adam_state = adam;
    for &target in &boundaries {
        let segment = vgalab_core::train::TrainConfig { steps: target, ..config.train.clone() };
        let outcome: TrainOutcome = train(
            &mut params,
            &model,
            &task,
            &segment,
            cursor,
            adam_state.take(),
            |rec| on_record(rec, &mut log, &mut records),
        )?;
        let is_final = target == config.train.steps;
        let path = if is_final {
            dir.join("checkpoint.bin")
        } else {
            dir.join(format!("checkpoint_step{target:06}.bin"))
        };
        save_checkpoint(&path, &checkpoint_of(target, echo.clone(), &params, &outcome.adam))?;
        adam_state = Some(outcome.adam);
        cursor = target;
    }

    charts_from_records(&dir.join("charts"), &records)?;
    timestamp_sidecar(dir, "train_end")?;
    println!("checkpoint: {}", dir.join("checkpoint.bin").display());
    Ok(())
}

// ── gradcheck ────────────────────────────────────────────────────────

pub fn cmd_gradcheck(config: &RunConfig) -> Result<bool> {
    let variants: [(GateKind, SinkKind, &str); 5] = [
        (GateKind::None, SinkKind::None, "vanilla"),
        (GateKind::Input, SinkKind::None, "input-gate"),
        (GateKind::Value, SinkKind::None, "value-gate"),
        (GateKind::None, SinkKind::LearnableSink, "learnable-sink"),
        (GateKind::None, SinkKind::RegisterTokens { count: 2 }, "register-tokens"),
    ];
    let mut all_passed = true;
    let mut reports = serde_json::Map::new();
    for (gate, sink, name) in variants {
        let model = gradcheck_model(gate, sink);
        let mut params = ParamSet::init(&model, config.train.seed);
        // move the gate off its neutral point so the self-regulatory path
        // is exercised
        if gate != GateKind::None {
            if let Some(wg) = params.get_mut("layers.0.attn.w_g") {
                let mut rng = vgalab_core::rng::rng_at(config.train.seed, STREAM_PROBE, 7);
                *wg = vgalab_core::Tensor::randn(wg.shape.clone(), 1.0, &mut rng);
            }
        }
        let probe = gradcheck_probe(&model, 2, 8, config.train.seed);
        let report = grad_check(&params, &model, &probe, None)?;
        let worst_fd = report.fd.iter().map(|e| e.max_rel_err).fold(0.0, f64::max);
        let worst_an = report.analytic.iter().map(|e| e.max_rel_err).fold(0.0, f64::max);
        println!(
            "gradcheck {name:<16} {}  (fd max {:.2e}, analytic max {:.2e})",
            if report.passed { "PASS" } else { "FAIL" },
            worst_fd,
            worst_an
        );
        if !report.passed {
            for e in report.fd.iter().filter(|e| !e.passed) {
                println!("  fd mismatch {}: {:.3e}", e.tensor, e.max_rel_err);
            }
            for e in report.analytic.iter().filter(|e| !e.passed) {
                println!("  analytic mismatch {}: {:.3e}", e.tensor, e.max_rel_err);
            }
            all_passed = false;
        }
        reports.insert(name.to_string(), serde_json::to_value(&report)?);
    }
    std::fs::create_dir_all(&config.output_dir)?;
    write_json(&config.output_dir.join("gradcheck.json"), &serde_json::Value::Object(reports))?;
    Ok(all_passed)
}

// ── eval ─────────────────────────────────────────────────────────────

fn load_params_for_eval(config: &RunConfig, model: &ModelConfig) -> Result<ParamSet> {
    let path = config
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("eval/quantize need a checkpoint path".into()))?;
    let ckpt = load_checkpoint(path)?;
    check_model_match(&ckpt, model)?;
    let (params, _, _) = params_from_checkpoint(&ckpt, model, config.train.seed)?;
    Ok(params)
}

pub fn cmd_eval(config: &RunConfig) -> Result<bool> {
    let model = config.model_config()?;
    let params = load_params_for_eval(config, &model)?;
    let dir = &config.output_dir;
    std::fs::create_dir_all(dir)?;

    let mut report = serde_json::Map::new();
    report.insert("parameters".into(), json!(count_params(&model)));
    let mut ok = true;

    match config.task {
        TaskKind::Bb => {
            let chain = bb_sample_chain(&config.bb)?;
            let bayes = bb_bayes_risks(&config.bb, &chain)?;
            let probe = vgalab_core::data::bb_generate_at(
                &config.bb,
                &chain,
                config.eval.probe_sequences,
                config.bb.seed,
                STREAM_EVAL,
                0,
            );
            let mut risk = vgalab_core::metrics::RiskAccum::default();
            let mut traces_all = Vec::new();
            let mut attn = 0.0;
            let mut val = 0.0;
            let mut dl = 0.0;
            let mut gate_sum = 0.0;
            let mut gate_n = 0usize;
            let mut layers = 0usize;
            for seq in &probe {
                let (logits, traces) =
                    vgalab_core::model::forward(&seq.tokens, &params, &model, true)?;
                risk.add(&logits, seq)?;
                let traces = traces.unwrap();
                let mask = metrics::bb_query_mask(seq, &config.bb);
                for block in &traces {
                    attn += metrics::attn_to_sink(&block.attn, 0, &mask)?;
                    val += metrics::value_norm(&block.attn, 0);
                    dl += metrics::delta_logit(&block.attn, 0, &mask)?;
                    if let Some(g) = metrics::mean_gate_sink(&block.attn, 0) {
                        gate_sum += g;
                        gate_n += 1;
                    }
                    layers += 1;
                }
                traces_all.push(traces);
            }
            let (backcopy, bigram) = risk.finish();
            let backcopy = backcopy.unwrap_or(f64::NAN);
            let excess = bigram.map(|b| b - bayes.bigram);
            report.insert("backcopy_risk".into(), json!(backcopy));
            report.insert("bigram_excess_risk".into(), json!(excess));
            report.insert("bigram_bayes_risk".into(), json!(bayes.bigram));
            report.insert("attn_sink".into(), json!(attn / layers as f64));
            report.insert("val_norm_sink".into(), json!(val / layers as f64));
            report.insert("delta_logit_sink".into(), json!(dl / layers as f64));
            if gate_n > 0 {
                report.insert("mean_gate_sink".into(), json!(gate_sum / gate_n as f64));
            }
            report.insert("max_io_norm".into(), json!(metrics::max_io_norm(&traces_all)));
            report.insert("avg_kurtosis".into(), json!(metrics::avg_kurtosis(&traces_all)?));
            if let Some(threshold) = config.eval.backcopy_threshold {
                let within = backcopy < threshold;
                report.insert("backcopy_threshold".into(), json!(threshold));
                report.insert("backcopy_within_threshold".into(), json!(within));
                ok &= within;
            }
        }
        TaskKind::Corpus => {
            let split = load_corpus(config)?;
            let chunks =
                corpus::eval_chunks(&split.valid, config.corpus.seq_len, config.eval.max_eval_chunks);
            let ppl = metrics::perplexity(&params, &model, &chunks)?;
            let mut traces_all = Vec::new();
            for tokens in &chunks {
                let (_, traces) = vgalab_core::model::forward(tokens, &params, &model, true)?;
                traces_all.push(traces.unwrap());
            }
            report.insert("perplexity".into(), json!(ppl));
            report.insert("max_io_norm".into(), json!(metrics::max_io_norm(&traces_all)));
            report.insert("avg_kurtosis".into(), json!(metrics::avg_kurtosis(&traces_all)?));
            report.insert("eval_chunks".into(), json!(chunks.len()));
        }
    }

    let value = serde_json::Value::Object(report);
    write_json(&dir.join("eval_report.json"), &value)?;
    println!("{}", serde_json::to_string_pretty(&value)?);
    Ok(ok)
}

// ── quantize ─────────────────────────────────────────────────────────

pub fn cmd_quantize(config: &RunConfig) -> Result<()> {
    let model = config.model_config()?;
    let params = load_params_for_eval(config, &model)?;
    let dir = &config.output_dir;
    std::fs::create_dir_all(dir)?;

    let (calib, eval): (Vec<Vec<usize>>, Vec<Vec<usize>>) = match config.task {
        TaskKind::Bb => {
            let chain = bb_sample_chain(&config.bb)?;
            let calib = vgalab_core::data::bb_generate_at(
                &config.bb,
                &chain,
                config.quant.calib_batches,
                config.bb.seed,
                STREAM_CALIB,
                0,
            )
            .into_iter()
            .map(|s| s.tokens)
            .collect();
            let eval = vgalab_core::data::bb_generate_at(
                &config.bb,
                &chain,
                config.eval.probe_sequences,
                config.bb.seed,
                STREAM_EVAL,
                0,
            )
            .into_iter()
            .map(|s| s.tokens)
            .collect();
            (calib, eval)
        }
        TaskKind::Corpus => {
            let split = load_corpus(config)?;
            let calib = corpus::sample_batch(
                &split.train,
                config.corpus.seq_len,
                config.quant.calib_batches,
                config.train.seed,
                STREAM_CALIB,
                0,
            )?;
            let eval =
                corpus::eval_chunks(&split.valid, config.corpus.seq_len, config.eval.max_eval_chunks);
            (calib, eval)
        }
    };

    let ranges = calibrate(&params, &model, &calib)?;
    let report = quantized_eval(
        &params,
        &model,
        &ranges,
        &config.quant,
        &eval,
        QuantEvalOptions::default(),
    )?;
    write_json(&dir.join("quant_report.json"), &report)?;
    println!(
        "fp perplexity {:.4}  int{} perplexity {:.4}  delta {:+.4}",
        report.perplexity_fp, report.bits, report.perplexity_q, report.delta
    );
    Ok(())
}

// ── export ───────────────────────────────────────────────────────────

/// Re-render charts from an existing metrics log.
pub fn cmd_export(config: &RunConfig) -> Result<()> {
    let log_path = config.output_dir.join("metrics.jsonl");
    let records = metrics::read_jsonl_records(&log_path)?;
    if records.is_empty() {
        return Err(Error::Config(format!("no records in {}", log_path.display())));
    }
    let out = config.output_dir.join("charts");
    let written = charts_from_records(&out, &records)?;
    for p in &written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

