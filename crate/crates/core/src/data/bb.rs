//! Bigram-Backcopy synthetic task: sequences follow a fixed bigram chain
//! except that trigger tokens force the next token to copy the one that
//! preceded the trigger. The bigram half needs no attention; the backcopy
//! half does — which is exactly the regime where sink formation shows up.
//!
//! Token id layout: 0 is BOS (<s>), 1..=vocab_size are chain tokens,
//! the next num_triggers ids are triggers.

use crate::error::{Error, Result};
use crate::rng::{rng_at, STREAM_CHAIN, STREAM_DATASET};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

pub const BOS: usize = 0;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BBConfig {
    /// Non-trigger chain tokens.
    pub vocab_size: usize,
    pub num_triggers: usize,
    pub seq_len: usize,
    /// Probability an unsuppressed chain step emits a trigger instead.
    pub trigger_prob: f64,
    /// Concentration of the symmetric Dirichlet the transition rows are
    /// drawn from.
    pub bigram_dirichlet_alpha: f64,
    pub seed: u64,
}

impl Default for BBConfig {
    fn default() -> Self {
        BBConfig {
            vocab_size: 16,
            num_triggers: 3,
            seq_len: 128,
            trigger_prob: 0.05,
            bigram_dirichlet_alpha: 1.0,
            seed: 0,
        }
    }
}

impl BBConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config("bb vocab_size must be >= 2".into()));
        }
        if self.num_triggers < 1 {
            return Err(Error::Config("num_triggers must be >= 1".into()));
        }
        if !(self.trigger_prob > 0.0 && self.trigger_prob < 0.5) && self.trigger_prob != 0.0 {
            return Err(Error::Config("trigger_prob must lie in (0, 0.5) or be 0".into()));
        }
        if self.seq_len < 4 {
            return Err(Error::Config("seq_len must be >= 4".into()));
        }
        if self.bigram_dirichlet_alpha <= 0.0 {
            return Err(Error::Config("dirichlet alpha must be positive".into()));
        }
        Ok(())
    }

    /// BOS + chain tokens + triggers.
    pub fn model_vocab(&self) -> usize {
        1 + self.vocab_size + self.num_triggers
    }

    pub fn first_trigger_id(&self) -> usize {
        1 + self.vocab_size
    }

    pub fn is_trigger(&self, token: usize) -> bool {
        token >= self.first_trigger_id() && token < self.model_vocab()
    }

    /// Chain token id for matrix row index and back.
    pub fn chain_token(&self, row: usize) -> usize {
        1 + row
    }

    pub fn chain_row(&self, token: usize) -> usize {
        debug_assert!(token >= 1 && token <= self.vocab_size);
        token - 1
    }
}

/// The fixed bigram distribution plus its trigger token ids.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BbChain {
    /// vocab_size × vocab_size row-stochastic matrix over chain tokens.
    pub transition: Tensor,
    pub trigger_ids: Vec<usize>,
}

/// How each position was generated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RuleLabel {
    BigramStep,
    BackcopyStep,
    TriggerEmission,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BBSequence {
    pub tokens: Vec<usize>,
    pub rule_labels: Vec<RuleLabel>,
}

/// Sample the fixed chain: each transition row from a symmetric Dirichlet
/// via normalized Gamma draws. Determined by (config.seed).
pub fn bb_sample_chain(config: &BBConfig) -> Result<BbChain> {
    config.validate()?;
    let v = config.vocab_size;
    let mut rng = rng_at(config.seed, STREAM_CHAIN, 0);
    let gamma = Gamma::new(config.bigram_dirichlet_alpha, 1.0)
        .map_err(|e| Error::Config(format!("dirichlet alpha: {e}")))?;
    let mut transition = Tensor::zeros(vec![v, v]);
    for i in 0..v {
        let mut row: Vec<f64> = (0..v).map(|_| gamma.sample(&mut rng).max(1e-300)).collect();
        let sum: f64 = row.iter().sum();
        for x in &mut row {
            *x /= sum;
        }
        transition.data[i * v..(i + 1) * v].copy_from_slice(&row);
    }
    let trigger_ids = (0..config.num_triggers).map(|k| config.first_trigger_id() + k).collect();
    Ok(BbChain { transition, trigger_ids })
}

fn sample_categorical(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let mut dart: f64 = rng.gen::<f64>() * probs.iter().sum::<f64>();
    for (i, &p) in probs.iter().enumerate() {
        dart -= p;
        if dart <= 0.0 {
            return i;
        }
    }
    probs.len() - 1
}

fn generate_one(config: &BBConfig, chain: &BbChain, rng: &mut ChaCha8Rng) -> BBSequence {
    let v = config.vocab_size;
    let mut tokens = Vec::with_capacity(config.seq_len);
    let mut labels = Vec::with_capacity(config.seq_len);
    tokens.push(BOS);
    labels.push(RuleLabel::BigramStep); // position 0 is never predicted

    // first real token: uniform over chain tokens (triggers suppressed so
    // a backcopy can never reach back to BOS)
    tokens.push(config.chain_token(rng.gen_range(0..v)));
    labels.push(RuleLabel::BigramStep);

    for t in 2..config.seq_len {
        let prev = tokens[t - 1];
        if config.is_trigger(prev) {
            tokens.push(tokens[t - 2]);
            labels.push(RuleLabel::BackcopyStep);
            continue;
        }
        let suppressed = labels[t - 1] == RuleLabel::BackcopyStep;
        if !suppressed && rng.gen::<f64>() < config.trigger_prob {
            let k = rng.gen_range(0..config.num_triggers);
            tokens.push(chain.trigger_ids[k]);
            labels.push(RuleLabel::TriggerEmission);
        } else {
            let row = chain.transition.row(config.chain_row(prev));
            tokens.push(config.chain_token(sample_categorical(row, rng)));
            labels.push(RuleLabel::BigramStep);
        }
    }
    BBSequence { tokens, rule_labels: labels }
}

/// Generate `count` sequences; sequence i is fully determined by
/// (config.seed, i).
pub fn bb_generate(config: &BBConfig, chain: &BbChain, count: usize) -> Vec<BBSequence> {
    (0..count)
        .map(|i| generate_one(config, chain, &mut rng_at(config.seed, STREAM_DATASET, i as u64)))
        .collect()
}

/// Generate a batch keyed by an external (seed, stream, counter) triple —
/// the training loop's per-step draw.
pub fn bb_generate_at(
    config: &BBConfig,
    chain: &BbChain,
    count: usize,
    seed: u64,
    stream: u64,
    counter: u64,
) -> Vec<BBSequence> {
    let mut rng = rng_at(seed, stream, counter);
    (0..count).map(|_| generate_one(config, chain, &mut rng)).collect()
}

/// Expected per-position optimal cross-entropy, pooled the same way the
/// metrics module pools measured risks.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BbBayesRisks {
    pub bigram: f64,
    /// The backcopy rule is deterministic.
    pub backcopy: f64,
}

/// Exact Bayes risks via a forward recursion over the generation modes:
/// unsuppressed chain state, suppressed chain state (the step after a
/// backcopy), and backcopy-pending. The bigram risk is the expected optimal
/// cross-entropy pooled over BigramStep positions, which includes the
/// −ln(1−p) penalty the optimal predictor pays for holding trigger mass.
pub fn bb_bayes_risks(config: &BBConfig, chain: &BbChain) -> Result<BbBayesRisks> {
    config.validate()?;
    let v = config.vocab_size;
    let p = config.trigger_prob;
    let m = &chain.transition;
    // row entropies
    let h: Vec<f64> = (0..v)
        .map(|a| -m.row(a).iter().map(|&x| if x > 0.0 { x * x.ln() } else { 0.0 }).sum::<f64>())
        .collect();

    // position 1: uniform over chain tokens
    let mut ce_sum = (v as f64).ln();
    let mut bigram_w = 1.0;
    let mut unsup = vec![1.0 / v as f64; v];
    let mut sup = vec![0.0; v];
    let mut pending = vec![0.0; v];

    let ln_1mp = (1.0 - p).ln();
    for _t in 2..config.seq_len {
        for a in 0..v {
            ce_sum += unsup[a] * (1.0 - p) * (h[a] - ln_1mp) + sup[a] * h[a];
            bigram_w += unsup[a] * (1.0 - p) + sup[a];
        }
        let mut next_unsup = vec![0.0; v];
        let mut next_sup = vec![0.0; v];
        let mut next_pending = vec![0.0; v];
        for a in 0..v {
            let chain_mass = unsup[a] * (1.0 - p) + sup[a];
            if chain_mass > 0.0 {
                for b in 0..v {
                    next_unsup[b] += chain_mass * m.at(a, b);
                }
            }
            next_pending[a] += unsup[a] * p;
            next_sup[a] += pending[a];
        }
        unsup = next_unsup;
        sup = next_sup;
        pending = next_pending;
    }
    Ok(BbBayesRisks { bigram: ce_sum / bigram_w, backcopy: 0.0 })
}

/// The optimal predictor's distribution over the model vocabulary for
/// position t (what tokens[t] was drawn from, as inferable from the prefix).
pub fn oracle_distribution(config: &BBConfig, chain: &BbChain, tokens: &[usize], t: usize) -> Vec<f64> {
    let mv = config.model_vocab();
    let mut dist = vec![0.0; mv];
    assert!(t >= 1 && t < tokens.len());
    if t == 1 {
        for a in 0..config.vocab_size {
            dist[config.chain_token(a)] = 1.0 / config.vocab_size as f64;
        }
        return dist;
    }
    let prev = tokens[t - 1];
    if config.is_trigger(prev) {
        dist[tokens[t - 2]] = 1.0;
        return dist;
    }
    let row = chain.transition.row(config.chain_row(prev));
    let suppressed = config.is_trigger(tokens[t - 2]);
    if suppressed {
        for b in 0..config.vocab_size {
            dist[config.chain_token(b)] = row[b];
        }
    } else {
        let p = config.trigger_prob;
        for b in 0..config.vocab_size {
            dist[config.chain_token(b)] = (1.0 - p) * row[b];
        }
        for &trig in &chain.trigger_ids {
            dist[trig] = p / config.num_triggers as f64;
        }
    }
    dist
}

/// Oracle predictor as logits (ln p with a floor for zero mass), shaped
/// like model logits: row t−1 predicts position t.
pub fn oracle_logits(config: &BBConfig, chain: &BbChain, tokens: &[usize]) -> Tensor {
    let n = tokens.len();
    let mv = config.model_vocab();
    let mut logits = Tensor::full(vec![n, mv], -1e30);
    for t in 1..n {
        let dist = oracle_distribution(config, chain, tokens, t);
        for (j, &p) in dist.iter().enumerate() {
            if p > 0.0 {
                logits.data[(t - 1) * mv + j] = p.ln();
            }
        }
    }
    logits
}

// ── JSONL dataset format ─────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct JsonlRow {
    tokens: Vec<usize>,
    rule_labels: Vec<String>,
}

fn label_str(l: RuleLabel) -> &'static str {
    match l {
        RuleLabel::BigramStep => "BigramStep",
        RuleLabel::BackcopyStep => "BackcopyStep",
        RuleLabel::TriggerEmission => "TriggerEmission",
    }
}

fn label_from(s: &str) -> Result<RuleLabel> {
    match s {
        "BigramStep" => Ok(RuleLabel::BigramStep),
        "BackcopyStep" => Ok(RuleLabel::BackcopyStep),
        "TriggerEmission" => Ok(RuleLabel::TriggerEmission),
        other => Err(Error::Config(format!("unknown rule label {other}"))),
    }
}

pub fn write_jsonl(sequences: &[BBSequence], mut w: impl std::io::Write) -> Result<()> {
    for seq in sequences {
        let row = JsonlRow {
            tokens: seq.tokens.clone(),
            rule_labels: seq.rule_labels.iter().map(|&l| label_str(l).to_string()).collect(),
        };
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(r: impl std::io::BufRead) -> Result<Vec<BBSequence>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: JsonlRow = serde_json::from_str(&line)?;
        let rule_labels = row
            .rule_labels
            .iter()
            .map(|s| label_from(s))
            .collect::<Result<Vec<_>>>()?;
        out.push(BBSequence { tokens: row.tokens, rule_labels });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_rows_are_stochastic() {
        let config = BBConfig::default();
        let chain = bb_sample_chain(&config).unwrap();
        for i in 0..config.vocab_size {
            let s: f64 = chain.transition.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row {i} sums to {s}");
        }
    }

    #[test]
    fn chain_is_seed_deterministic() {
        let config = BBConfig::default();
        let a = bb_sample_chain(&config).unwrap();
        let b = bb_sample_chain(&config).unwrap();
        assert_eq!(a.transition.data, b.transition.data);
        let other = bb_sample_chain(&BBConfig { seed: 1, ..config }).unwrap();
        assert_ne!(a.transition.data, other.transition.data);
    }

    #[test]
    fn huge_alpha_rows_near_uniform() {
        // 112 rows over 7 seeds: max−min per row < 0.05 at alpha = 1e4
        for seed in 0..7 {
            let config = BBConfig { bigram_dirichlet_alpha: 1e4, seed, ..BBConfig::default() };
            let chain = bb_sample_chain(&config).unwrap();
            for i in 0..config.vocab_size {
                let row = chain.transition.row(i);
                let mx = row.iter().cloned().fold(f64::MIN, f64::max);
                let mn = row.iter().cloned().fold(f64::MAX, f64::min);
                assert!(mx - mn < 0.05, "seed {seed} row {i}: spread {}", mx - mn);
            }
        }
    }

    #[test]
    fn zero_trigger_prob_is_pure_markov() {
        let config = BBConfig { trigger_prob: 0.0, ..BBConfig::default() };
        let chain = bb_sample_chain(&config).unwrap();
        let seqs = bb_generate(&config, &chain, 20);
        for s in &seqs {
            assert!(s.rule_labels.iter().all(|&l| l == RuleLabel::BigramStep));
        }
    }

    #[test]
    fn backcopy_rule_always_holds() {
        let config = BBConfig::default();
        let chain = bb_sample_chain(&config).unwrap();
        for s in bb_generate(&config, &chain, 200) {
            assert_eq!(s.tokens[0], BOS);
            for t in 1..s.tokens.len() {
                assert_ne!(s.tokens[t], BOS, "BOS only at position 0");
                if config.is_trigger(s.tokens[t - 1]) {
                    assert_eq!(s.tokens[t], s.tokens[t - 2], "backcopy at {t}");
                    assert_eq!(s.rule_labels[t], RuleLabel::BackcopyStep);
                }
                if t >= 1 && config.is_trigger(s.tokens[t]) {
                    assert!(!config.is_trigger(s.tokens[t - 1]), "consecutive triggers at {t}");
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let config = BBConfig { seed: 123, ..BBConfig::default() };
        let chain = bb_sample_chain(&config).unwrap();
        let a = bb_generate(&config, &chain, 5);
        let b = bb_generate(&config, &chain, 5);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.tokens, y.tokens);
        }
    }

    #[test]
    fn trigger_frequency_within_3_sigma() {
        let config = BBConfig { seq_len: 512, ..BBConfig::default() };
        let chain = bb_sample_chain(&config).unwrap();
        let seqs = bb_generate(&config, &chain, 200); // ≈ 1e5 steps
        let mut eligible = 0usize;
        let mut triggers = 0usize;
        for s in &seqs {
            for t in 2..s.tokens.len() {
                let prev_nontrigger = !config.is_trigger(s.tokens[t - 1]);
                let suppressed = s.rule_labels[t - 1] == RuleLabel::BackcopyStep;
                // positions where a trigger draw actually happened
                if prev_nontrigger && !suppressed {
                    eligible += 1;
                    if s.rule_labels[t] == RuleLabel::TriggerEmission {
                        triggers += 1;
                    }
                }
            }
        }
        let freq = triggers as f64 / eligible as f64;
        let sigma = (config.trigger_prob * (1.0 - config.trigger_prob) / eligible as f64).sqrt();
        assert!(
            (freq - config.trigger_prob).abs() < 3.0 * sigma,
            "freq {freq} vs p {} (sigma {sigma})",
            config.trigger_prob
        );
    }

    #[test]
    fn bayes_risk_uniform_chain_no_triggers() {
        let config = BBConfig {
            vocab_size: 4,
            trigger_prob: 0.0,
            bigram_dirichlet_alpha: 1.0,
            ..BBConfig::default()
        };
        let mut chain = bb_sample_chain(&config).unwrap();
        chain.transition = Tensor::full(vec![4, 4], 0.25);
        let risks = bb_bayes_risks(&config, &chain).unwrap();
        assert!((risks.bigram - 4.0f64.ln()).abs() < 1e-12);
        assert_eq!(risks.backcopy, 0.0);
    }

    #[test]
    fn bayes_risk_matches_monte_carlo_oracle() {
        // pooled oracle cross-entropy over ~1e6 generated steps must agree
        // with the recursion within 1e-2
        let config = BBConfig::default();
        let chain = bb_sample_chain(&config).unwrap();
        let risks = bb_bayes_risks(&config, &chain).unwrap();

        let seqs = bb_generate(&config, &chain, 8000); // ≈ 1.02e6 positions
        let mut ce_sum = 0.0;
        let mut count = 0usize;
        let mut backcopy_max: f64 = 0.0;
        for s in &seqs {
            for t in 1..s.tokens.len() {
                let dist = oracle_distribution(&config, &chain, &s.tokens, t);
                match s.rule_labels[t] {
                    RuleLabel::BigramStep => {
                        ce_sum += -dist[s.tokens[t]].ln();
                        count += 1;
                    }
                    RuleLabel::BackcopyStep => {
                        backcopy_max = backcopy_max.max(-dist[s.tokens[t]].ln());
                    }
                    RuleLabel::TriggerEmission => {}
                }
            }
        }
        let mc = ce_sum / count as f64;
        assert!((mc - risks.bigram).abs() < 1e-2, "MC {mc} vs recursion {}", risks.bigram);
        assert!(backcopy_max < 1e-12);
    }

    #[test]
    fn jsonl_roundtrip() {
        let config = BBConfig { seq_len: 16, ..BBConfig::default() };
        let chain = bb_sample_chain(&config).unwrap();
        let seqs = bb_generate(&config, &chain, 3);
        let mut buf = Vec::new();
        write_jsonl(&seqs, &mut buf).unwrap();
        let back = read_jsonl(std::io::BufReader::new(buf.as_slice())).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in seqs.iter().zip(&back) {
            assert_eq!(a.tokens, b.tokens);
            assert_eq!(a.rule_labels, b.rule_labels);
        }
    }
}
