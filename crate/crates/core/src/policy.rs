//! The small autoregressive recommendation policy.
//!
//! One token per catalog item plus an END token keeps the reward placement
//! semantics (item-final and sequence-final tokens) at desk scale. The
//! decoder is a GRU over token embeddings conditioned on an instruction
//! context vector; logits carry learned soft penalties against repeats and
//! history items so formatting is learnable rather than hard-masked. An
//! optional set of distractor tokens that resolve to no item exercises the
//! hallucination metric, which a closed vocabulary could never trip.

use std::io::{BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, ItemId};
use crate::instructions::{InstructionSample, Intention};
use crate::nn::{Adam, Grads, GruCell, Linear, NodeId, ParamId, Params, Tape, Tensor};
use crate::rewards::{judge_legality, ItemRef, ParsedList, TokenLayout};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("empty training dataset")]
    EmptyDataset,
    #[error("vocabulary mismatch: {0} vs {1} tokens")]
    VocabularyMismatch(usize, usize),
    #[error("label {0} cannot be tokenized")]
    BadLabel(u32),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

/// Token space: one token per item, then END, then optional distractors.
/// A trailing embedding row (not a token) serves as the begin-of-sequence
/// input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub n_items: usize,
    pub n_distractors: usize,
}

impl Vocabulary {
    pub fn size(&self) -> usize {
        self.n_items + 1 + self.n_distractors
    }

    pub fn end_token(&self) -> usize {
        self.n_items
    }

    /// Embedding-table row used as the first decoder input.
    pub fn bos_row(&self) -> usize {
        self.size()
    }

    pub fn item_token(&self, item: ItemId) -> usize {
        debug_assert!(item.index() < self.n_items);
        item.index()
    }

    pub fn token_item(&self, token: usize) -> Option<ItemId> {
        (token < self.n_items).then(|| ItemId(token as u32))
    }

    pub fn is_distractor(&self, token: usize) -> bool {
        token > self.n_items && token < self.size()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub intent_dim: usize,
    pub kind_dim: usize,
    pub cat_dim: usize,
    /// Distractor tokens for the noisy-vocabulary mode (0 = closed vocab).
    pub n_distractors: usize,
    /// Output cap: at most `k + extra_budget` item tokens before END is forced.
    pub extra_budget: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            embed_dim: 32,
            hidden_dim: 64,
            intent_dim: 16,
            kind_dim: 8,
            cat_dim: 8,
            n_distractors: 0,
            extra_budget: 5,
        }
    }
}

const N_INTENTION_KINDS: usize = 7;

fn kind_index(intention: &Intention) -> usize {
    match intention {
        Intention::Implicit => 0,
        Intention::CategoryInclude(_) => 1,
        Intention::CategoryExclude(_) => 2,
        Intention::ProportionLe { .. } => 3,
        Intention::ProportionGe { .. } => 4,
        Intention::ProportionApprox { .. } => 5,
        Intention::ItemSearch(_) => 6,
        Intention::Combo(..) => unreachable!("combos encode as their atoms"),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PolicyHandles {
    e_tok: ParamId,
    e_kind: ParamId,
    e_cat: ParamId,
    intent: Linear,
    ctx: Linear,
    gru: GruCell,
    out: Linear,
    pen_repeat: ParamId,
    pen_history: ParamId,
}

/// The policy network. Immutable inference is safe to share; training
/// mutates `params` single-writer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyModel {
    pub version: u32,
    pub config: PolicyConfig,
    pub n_items: usize,
    pub n_categories: usize,
    pub vocab: Vocabulary,
    pub params: Params,
    handles: PolicyHandles,
}

impl PolicyModel {
    pub fn new(n_items: usize, n_categories: usize, config: PolicyConfig, seed: u64) -> Self {
        let mut rng = crate::stream_rng(seed, 0x70, 0);
        let vocab = Vocabulary { n_items, n_distractors: config.n_distractors };
        let mut params = Params::new();
        let d = config.embed_dim;
        // +1 row past the vocabulary for the BOS input.
        let e_tok = params.add("e_tok", Tensor::randn(vocab.size() + 1, d, 0.1, &mut rng));
        let e_kind = params.add(
            "e_kind",
            Tensor::randn(N_INTENTION_KINDS, config.kind_dim, 0.1, &mut rng),
        );
        // +1 row for "no category".
        let e_cat = params.add(
            "e_cat",
            Tensor::randn(n_categories + 1, config.cat_dim, 0.1, &mut rng),
        );
        let intent = Linear::new(
            &mut params,
            "intent",
            config.kind_dim + config.cat_dim + 1,
            config.intent_dim,
            &mut rng,
        );
        let ctx = Linear::new(
            &mut params,
            "ctx",
            d + config.intent_dim + 1,
            config.hidden_dim,
            &mut rng,
        );
        let gru = GruCell::new(&mut params, "gru", 2 * d + 1, config.hidden_dim, &mut rng);
        let out = Linear::new(&mut params, "out", config.hidden_dim, vocab.size(), &mut rng);
        // softplus(-2) ~= 0.13: penalties start soft and can be learned up.
        let pen_repeat = params.add("pen_repeat", Tensor { rows: 1, cols: 1, data: vec![-2.0] });
        let pen_history = params.add("pen_history", Tensor { rows: 1, cols: 1, data: vec![-2.0] });
        PolicyModel {
            version: 1,
            config,
            n_items,
            n_categories,
            vocab,
            params,
            handles: PolicyHandles { e_tok, e_kind, e_cat, intent, ctx, gru, out, pen_repeat, pen_history },
        }
    }

    /// Encode (history, intention, k) into the decoder's initial hidden
    /// state. Combo intentions contribute the sum of their atoms' features.
    fn encode(&self, tape: &mut Tape, sample: &InstructionSample) -> NodeId {
        let h = &self.handles;
        let hist_rows: Vec<usize> = sample
            .history
            .iter()
            .map(|it| self.vocab.item_token(*it))
            .collect();
        let hist_pool = if hist_rows.is_empty() {
            tape.value_node(vec![0.0; self.config.embed_dim])
        } else {
            tape.param_row_mean(h.e_tok, &hist_rows)
        };
        let mut feats = Vec::new();
        for atom in sample.intention.atoms() {
            let kind_row = tape.param_row(h.e_kind, kind_index(atom));
            let cat_idx = atom
                .target_category()
                .map(|c| c.index())
                .unwrap_or(self.n_categories);
            let cat_row = tape.param_row(h.e_cat, cat_idx);
            let m_node = tape.value_node(vec![atom.proportion().unwrap_or(0.0)]);
            let u = tape.concat(&[kind_row, cat_row, m_node]);
            feats.push(h.intent.forward(tape, u));
        }
        let intent_feat = tape.add_many(&feats);
        let k_node = tape.value_node(vec![sample.k as f64 / 10.0]);
        let full = tape.concat(&[hist_pool, intent_feat, k_node]);
        let pre = h.ctx.forward(tape, full);
        tape.tanh(pre)
    }

    /// Plain-value copy of the decoder step input, for consumers that must
    /// not backpropagate into the policy (the critic).
    pub fn step_input_values(&self, prev_row: usize, emitted_rows: &[usize], budget: f64) -> Vec<f64> {
        let e = self.params.get(self.handles.e_tok);
        let mut x = e.row(prev_row).to_vec();
        let mut pool = vec![0.0; self.config.embed_dim];
        for &r in emitted_rows {
            for (p, v) in pool.iter_mut().zip(e.row(r)) {
                *p += v;
            }
        }
        if !emitted_rows.is_empty() {
            let inv = 1.0 / emitted_rows.len() as f64;
            pool.iter_mut().for_each(|p| *p *= inv);
        }
        x.extend_from_slice(&pool);
        x.push(budget);
        x
    }

    /// Plain-value copy of the instruction context, for the critic.
    pub fn context_values(&self, sample: &InstructionSample) -> Vec<f64> {
        let mut tape = Tape::new(&self.params);
        let ctx = self.encode(&mut tape, sample);
        tape.value(ctx).to_vec()
    }
}

/// Incremental decoder state over one response. The same machinery drives
/// sampling, greedy decoding, and teacher-forced re-scoring, so recorded
/// log-probabilities always match a later re-score bit for bit.
pub struct DecodeState<'m> {
    model: &'m PolicyModel,
    h: NodeId,
    prev_row: usize,
    emitted_rows: Vec<usize>,
    counts: Vec<f64>,
    history_vec: Vec<f64>,
    k: usize,
    t: usize,
}

impl<'m> DecodeState<'m> {
    pub fn new(model: &'m PolicyModel, tape: &mut Tape, sample: &InstructionSample) -> Self {
        let h = model.encode(tape, sample);
        let mut history_vec = vec![0.0; model.vocab.size()];
        for it in &sample.history {
            history_vec[model.vocab.item_token(*it)] = 1.0;
        }
        DecodeState {
            model,
            h,
            prev_row: model.vocab.bos_row(),
            emitted_rows: Vec::new(),
            counts: vec![0.0; model.vocab.size()],
            history_vec,
            k: sample.k,
            t: 0,
        }
    }

    /// Logits for the next token. Advances the hidden state.
    pub fn next_logits(&mut self, tape: &mut Tape) -> NodeId {
        let hd = &self.model.handles;
        let prev = tape.param_row(hd.e_tok, self.prev_row);
        let pool = if self.emitted_rows.is_empty() {
            tape.value_node(vec![0.0; self.model.config.embed_dim])
        } else {
            tape.param_row_mean(hd.e_tok, &self.emitted_rows)
        };
        let budget = tape.value_node(vec![(self.k as f64 - self.t as f64) / 10.0]);
        let x = tape.concat(&[prev, pool, budget]);
        let h2 = hd.gru.step(tape, x, self.h);
        self.h = h2;
        let base = hd.out.forward(tape, h2);
        let rep_raw = tape.param(hd.pen_repeat);
        let rep_scale = tape.softplus(rep_raw);
        let cnt = tape.value_node(self.counts.clone());
        let rep_pen = tape.scale_by_scalar(cnt, rep_scale);
        let hist_raw = tape.param(hd.pen_history);
        let hist_scale = tape.softplus(hist_raw);
        let hv = tape.value_node(self.history_vec.clone());
        let hist_pen = tape.scale_by_scalar(hv, hist_scale);
        let pen = tape.add(rep_pen, hist_pen);
        tape.sub(base, pen)
    }

    /// Record the chosen token and update the emitted-set features.
    pub fn advance(&mut self, token: usize) {
        self.counts[token] += 1.0;
        if token != self.model.vocab.end_token() {
            self.emitted_rows.push(token);
        }
        self.prev_row = token;
        self.t += 1;
    }

    pub fn emitted_items(&self) -> usize {
        self.emitted_rows.len()
    }
}

/// A sampled (or forced) token sequence with its log-probabilities.
///
/// Invariants: the END token appears exactly once, at the very end; every
/// other token closes one item. The sequence caps at `k + extra_budget` item
/// tokens, after which END is forced (its true log-probability is still
/// recorded, so re-scoring stays exact).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub tokens: Vec<usize>,
    pub logprobs: Vec<f64>,
    pub k: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Reward placement: item slots for non-END tokens, END is final.
    pub fn layout(&self, vocab: &Vocabulary) -> TokenLayout {
        let mut slot = 0usize;
        let item_slots = self
            .tokens
            .iter()
            .map(|&t| {
                if t == vocab.end_token() {
                    None
                } else {
                    let s = Some(slot);
                    slot += 1;
                    s
                }
            })
            .collect();
        TokenLayout { item_slots, final_token: self.tokens.len() - 1 }
    }

    /// Non-END tokens as parseable item references.
    pub fn item_refs(&self, vocab: &Vocabulary) -> Vec<ItemRef> {
        self.tokens
            .iter()
            .filter(|&&t| t != vocab.end_token())
            .map(|&t| match vocab.token_item(t) {
                Some(it) => ItemRef::Id(it),
                None => ItemRef::Unresolved(format!("<distractor-{}>", t - vocab.end_token())),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub enum DecodeMode {
    Greedy,
    /// Sample from softmax(logits / temperature).
    Temperature(f64),
}

impl PolicyModel {
    /// Roll out one response. Log-probabilities are recorded under the
    /// policy's own distribution (temperature 1), whatever the sampling
    /// temperature; the END forced at the cap records its true probability.
    pub fn rollout(
        &self,
        sample: &InstructionSample,
        mode: DecodeMode,
        rng: &mut impl Rng,
    ) -> Trajectory {
        let mut tape = Tape::new(&self.params);
        let mut state = DecodeState::new(self, &mut tape, sample);
        let cap = sample.k + self.config.extra_budget;
        let end = self.vocab.end_token();
        let mut tokens = Vec::new();
        let mut logprobs = Vec::new();
        loop {
            let logits = state.next_logits(&mut tape);
            let logp_all = tape.log_softmax(logits);
            let token = if state.emitted_items() >= cap {
                end
            } else {
                match mode {
                    DecodeMode::Greedy => argmax(tape.value(logits)),
                    DecodeMode::Temperature(tau) => {
                        sample_token(tape.value(logits), tau, rng)
                    }
                }
            };
            logprobs.push(tape.value(logp_all)[token]);
            tokens.push(token);
            if token == end {
                break;
            }
            state.advance(token);
        }
        Trajectory { tokens, logprobs, k: sample.k }
    }

    /// Sample `n_samples` responses at the given temperature.
    pub fn sample_response(
        &self,
        sample: &InstructionSample,
        temperature: f64,
        n_samples: usize,
        rng: &mut impl Rng,
    ) -> Vec<Trajectory> {
        (0..n_samples)
            .map(|_| self.rollout(sample, DecodeMode::Temperature(temperature), rng))
            .collect()
    }

    pub fn greedy_decode(&self, sample: &InstructionSample) -> Trajectory {
        let mut rng = crate::stream_rng(0, 0, 0);
        self.rollout(sample, DecodeMode::Greedy, &mut rng)
    }

    /// Teacher-forced log-probabilities of a fixed token sequence.
    pub fn score_tokens(&self, sample: &InstructionSample, tokens: &[usize]) -> Vec<f64> {
        let mut tape = Tape::new(&self.params);
        let mut state = DecodeState::new(self, &mut tape, sample);
        let mut out = Vec::with_capacity(tokens.len());
        for &tok in tokens {
            let logits = state.next_logits(&mut tape);
            let logp_all = tape.log_softmax(logits);
            out.push(tape.value(logp_all)[tok]);
            if tok != self.vocab.end_token() {
                state.advance(tok);
            }
        }
        out
    }

    /// Label sequence of a supervised sample as decoder tokens plus END.
    pub fn label_tokens(&self, sample: &InstructionSample) -> Result<Vec<usize>, PolicyError> {
        let mut tokens = Vec::with_capacity(sample.labels.len() + 1);
        for it in &sample.labels {
            if it.index() >= self.n_items {
                return Err(PolicyError::BadLabel(it.0));
            }
            tokens.push(self.vocab.item_token(*it));
        }
        tokens.push(self.vocab.end_token());
        Ok(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let mut f = std::fs::File::create(path)?;
        serde_json::to_writer(&mut f, self).map_err(std::io::Error::other)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let f = std::fs::File::open(path)?;
        let model: PolicyModel = serde_json::from_reader(BufReader::new(f))
            .map_err(|e| PolicyError::BadCheckpoint(e.to_string()))?;
        if model.version != 1 {
            return Err(PolicyError::BadCheckpoint(format!(
                "unsupported checkpoint version {}",
                model.version
            )));
        }
        Ok(model)
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample_token(logits: &[f64], temperature: f64, rng: &mut impl Rng) -> usize {
    debug_assert!(temperature > 0.0);
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| ((l - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut draw = rng.gen_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        draw -= w;
        if draw <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// Map a trajectory to a judged list against the sample's history.
pub fn parse_response(
    trajectory: &Trajectory,
    catalog: &Catalog,
    history: &[ItemId],
    k: usize,
    vocab: &Vocabulary,
) -> ParsedList {
    judge_legality(trajectory.item_refs(vocab), k, history, catalog)
}

/// Parse a rendered response text (numbered titles, one per line) back to a
/// judged list. Unknown titles become unresolved entries.
pub fn parse_response_text(
    text: &str,
    catalog: &Catalog,
    history: &[ItemId],
    k: usize,
) -> ParsedList {
    let mut items = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let title = match line.split_once(". ") {
            Some((prefix, rest)) if prefix.chars().all(|c| c.is_ascii_digit()) => rest,
            _ => line,
        };
        match catalog.item_by_title(title) {
            Some(it) => items.push(ItemRef::Id(it)),
            None => items.push(ItemRef::Unresolved(title.to_string())),
        }
    }
    judge_legality(items, k, history, catalog)
}

/// Per-token log-ratio of the policy against a frozen reference: the KL
/// penalty contribution at each sampled token.
pub fn logprobs_and_kl(
    policy_logprobs: &[f64],
    reference: &PolicyModel,
    sample: &InstructionSample,
    trajectory: &Trajectory,
    vocab: &Vocabulary,
) -> Result<(Vec<f64>, Vec<f64>), PolicyError> {
    if reference.vocab.size() != vocab.size() {
        return Err(PolicyError::VocabularyMismatch(reference.vocab.size(), vocab.size()));
    }
    let ref_logprobs = reference.score_tokens(sample, &trajectory.tokens);
    let kl = policy_logprobs
        .iter()
        .zip(&ref_logprobs)
        .map(|(p, r)| p - r)
        .collect();
    Ok((ref_logprobs, kl))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SlConfig {
    fn default() -> Self {
        SlConfig { epochs: 30, lr: 1e-3, batch_size: 32, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlStats {
    pub initial_val_ce: f64,
    pub final_val_ce: f64,
    pub per_epoch_val_ce: Vec<f64>,
}

/// Mean per-token negative log-likelihood of the label sequences.
pub fn validation_ce(policy: &PolicyModel, samples: &[InstructionSample]) -> Result<f64, PolicyError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in samples {
        let tokens = policy.label_tokens(s)?;
        let lps = policy.score_tokens(s, &tokens);
        total -= lps.iter().sum::<f64>();
        count += lps.len();
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Supervised stage: teacher-forced cross-entropy over label tokens + END.
pub fn sl_train(
    policy: &mut PolicyModel,
    train: &[InstructionSample],
    val: &[InstructionSample],
    config: &SlConfig,
) -> Result<SlStats, PolicyError> {
    if train.is_empty() {
        return Err(PolicyError::EmptyDataset);
    }
    let initial_val_ce = validation_ce(policy, val)?;
    let mut adam = Adam::new(&policy.params, config.lr);
    let mut grads = Grads::zeros_like(&policy.params);
    let mut per_epoch_val_ce = Vec::with_capacity(config.epochs);
    let mut rng = crate::stream_rng(config.seed, 0x51, 0);

    for _epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(config.batch_size) {
            grads.reset();
            let mut batch_tokens = 0usize;
            for &si in chunk {
                let sample = &train[si];
                let tokens = policy.label_tokens(sample)?;
                batch_tokens += tokens.len();
                let mut tape = Tape::new(&policy.params);
                let mut state = DecodeState::new(policy, &mut tape, sample);
                let mut nlls = Vec::with_capacity(tokens.len());
                for &tok in &tokens {
                    let logits = state.next_logits(&mut tape);
                    let logp = tape.log_softmax(logits);
                    let picked = tape.pick(logp, tok);
                    nlls.push(tape.neg(picked));
                    if tok != policy.vocab.end_token() {
                        state.advance(tok);
                    }
                }
                let loss = tape.add_many(&nlls);
                tape.backward(loss, &mut grads);
            }
            grads.scale(1.0 / batch_tokens.max(1) as f64);
            adam.step(&mut policy.params, &grads);
        }
        per_epoch_val_ce.push(validation_ce(policy, val)?);
    }
    let final_val_ce = per_epoch_val_ce.last().copied().unwrap_or(initial_val_ce);
    Ok(SlStats { initial_val_ce, final_val_ce, per_epoch_val_ce })
}
