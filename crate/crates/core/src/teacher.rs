//! The teacher sequential recommender.
//!
//! Two interchangeable kinds behind one checkpoint format: a single-block
//! self-attentive next-item scorer trained with sampled softmax, and a
//! closed-form first-order markov-times-popularity ranker. Downstream code
//! consumes only full rankings, so any ranker that beats popularity works.

use std::io::{BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, ItemId, SplitDataset};
use crate::nn::{Adam, Grads, Linear, Params, Tape, Tensor};

#[derive(Debug, Error)]
pub enum TeacherError {
    #[error("no training data")]
    EmptyTrainingData,
    #[error("history is empty")]
    EmptyHistory,
    #[error("unknown item id {0} in history")]
    UnknownItem(u32),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherKind {
    Attentive,
    MarkovPopularity,
}

/// Hyperparameters for [`train_teacher`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub kind: TeacherKind,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub negatives: usize,
    /// Additive popularity smoothing for the markov kind.
    pub markov_smoothing: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            kind: TeacherKind::Attentive,
            embed_dim: 32,
            ffn_dim: 64,
            epochs: 5,
            lr: 3e-3,
            negatives: 64,
            markov_smoothing: 0.2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AttentiveNet {
    params: Params,
    embed_dim: usize,
    max_history: usize,
    // Param handles, in insertion order inside `params`.
    item_emb: crate::nn::ParamId,
    pos_emb: crate::nn::ParamId,
    wq: crate::nn::ParamId,
    wk: crate::nn::ParamId,
    wv: crate::nn::ParamId,
    ffn1: Linear,
    ffn2: Linear,
}

impl AttentiveNet {
    fn new(n_items: usize, max_history: usize, cfg: &TeacherConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.embed_dim;
        let mut params = Params::new();
        let item_emb = params.add("item_emb", Tensor::randn(n_items, d, 0.1, rng));
        let pos_emb = params.add("pos_emb", Tensor::randn(max_history, d, 0.1, rng));
        let proj_std = (1.0 / d as f64).sqrt();
        let wq = params.add("wq", Tensor::randn(d, d, proj_std, rng));
        let wk = params.add("wk", Tensor::randn(d, d, proj_std, rng));
        let wv = params.add("wv", Tensor::randn(d, d, proj_std, rng));
        let ffn1 = Linear::new(&mut params, "ffn1", d, cfg.ffn_dim, rng);
        let ffn2 = Linear::new(&mut params, "ffn2", cfg.ffn_dim, d, rng);
        AttentiveNet { params, embed_dim: d, max_history, item_emb, pos_emb, wq, wk, wv, ffn1, ffn2 }
    }

    /// Context vector for a history window: causal attention queried at the
    /// last position, residual, then a two-layer feed-forward with residual.
    fn context<'t>(&self, tape: &mut Tape<'t>, history: &[ItemId]) -> crate::nn::NodeId {
        let len = history.len().min(self.max_history);
        let window = &history[history.len() - len..];
        let xs: Vec<crate::nn::NodeId> = window
            .iter()
            .enumerate()
            .map(|(pos, it)| {
                let e = tape.param_row(self.item_emb, it.index());
                let p = tape.param_row(self.pos_emb, pos);
                tape.add(e, p)
            })
            .collect();
        let last = *xs.last().expect("non-empty history");
        let q = tape.matvec(self.wq, last);
        let scale = 1.0 / (self.embed_dim as f64).sqrt();
        let mut scores = Vec::with_capacity(xs.len());
        let mut values = Vec::with_capacity(xs.len());
        for &x in &xs {
            let k = tape.matvec(self.wk, x);
            let dot = tape.dot(q, k);
            scores.push(tape.scale(dot, scale));
            values.push(tape.matvec(self.wv, x));
        }
        let score_vec = tape.concat(&scores);
        let attn = tape.softmax(score_vec);
        let mix = tape.weighted_sum(attn, &values);
        let h0 = tape.add(mix, last);
        let f1 = self.ffn1.forward(tape, h0);
        let f1 = tape.relu(f1);
        let f2 = self.ffn2.forward(tape, f1);
        tape.add(f2, h0)
    }

    fn all_scores(&self, history: &[ItemId]) -> Vec<f64> {
        let mut tape = Tape::new(&self.params);
        let ctx = self.context(&mut tape, history);
        let u = tape.value(ctx).to_vec();
        let emb = self.params.get(self.item_emb);
        (0..emb.rows)
            .map(|i| emb.row(i).iter().zip(&u).map(|(a, b)| a * b).sum())
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MarkovNet {
    n_items: usize,
    /// Flattened transition counts, row = source item.
    transitions: Vec<u64>,
    popularity: Vec<u64>,
    smoothing: f64,
}

impl MarkovNet {
    fn all_scores(&self, history: &[ItemId]) -> Vec<f64> {
        let last = history.last().expect("non-empty history").index();
        let row = &self.transitions[last * self.n_items..(last + 1) * self.n_items];
        let total_pop: f64 = self.popularity.iter().sum::<u64>() as f64 + 1.0;
        (0..self.n_items)
            .map(|j| row[j] as f64 + self.smoothing * (self.popularity[j] as f64 + 1.0) / total_pop)
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum TeacherNet {
    Attentive(AttentiveNet),
    Markov(MarkovNet),
}

/// A trained teacher. Immutable after training; scoring is deterministic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherModel {
    pub version: u32,
    pub kind: TeacherKind,
    pub n_items: usize,
    pub config: TeacherConfig,
    net: TeacherNet,
}

/// Full ranking of the catalog for one context. `ranked_items` is a
/// permutation of all catalog items, best first; ties broke by ascending id.
#[derive(Debug, Clone)]
pub struct TeacherPredictions {
    pub context: Vec<ItemId>,
    pub ranked_items: Vec<ItemId>,
    rank_of: Vec<u32>,
}

impl TeacherPredictions {
    /// Build directly from a ranking (best first). `ranked_items` must be a
    /// permutation of `0..n` item ids.
    pub fn from_ranking(context: Vec<ItemId>, ranked_items: Vec<ItemId>) -> Self {
        let mut rank_of = vec![0u32; ranked_items.len()];
        for (pos, &it) in ranked_items.iter().enumerate() {
            rank_of[it.index()] = pos as u32 + 1;
        }
        TeacherPredictions { context, ranked_items, rank_of }
    }

    /// 1-based rank of an item.
    pub fn rank_of(&self, item: ItemId) -> u32 {
        self.rank_of[item.index()]
    }

    pub fn top(&self, n: usize) -> &[ItemId] {
        &self.ranked_items[..n.min(self.ranked_items.len())]
    }
}

pub fn train_teacher(
    catalog: &Catalog,
    split: &SplitDataset,
    config: &TeacherConfig,
    seed: u64,
) -> Result<TeacherModel, TeacherError> {
    if split.users.is_empty() {
        return Err(TeacherError::EmptyTrainingData);
    }
    let net = match config.kind {
        TeacherKind::MarkovPopularity => TeacherNet::Markov(train_markov(catalog, split, config)),
        TeacherKind::Attentive => TeacherNet::Attentive(train_attentive(catalog, split, config, seed)?),
    };
    Ok(TeacherModel {
        version: 1,
        kind: config.kind,
        n_items: catalog.n_items(),
        config: config.clone(),
        net,
    })
}

fn train_markov(catalog: &Catalog, split: &SplitDataset, config: &TeacherConfig) -> MarkovNet {
    let n = catalog.n_items();
    let mut transitions = vec![0u64; n * n];
    let mut popularity = vec![0u64; n];
    for u in &split.users {
        for w in u.train.windows(2) {
            transitions[w[0].index() * n + w[1].index()] += 1;
        }
        for it in &u.train {
            popularity[it.index()] += 1;
        }
    }
    MarkovNet { n_items: n, transitions, popularity, smoothing: config.markov_smoothing }
}

fn train_attentive(
    catalog: &Catalog,
    split: &SplitDataset,
    config: &TeacherConfig,
    seed: u64,
) -> Result<AttentiveNet, TeacherError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut net = AttentiveNet::new(catalog.n_items(), split.max_history, config, &mut rng);

    let mut pairs: Vec<(Vec<ItemId>, ItemId)> = Vec::new();
    for u in &split.users {
        pairs.extend(split.train_pairs(u));
    }
    if pairs.is_empty() {
        return Err(TeacherError::EmptyTrainingData);
    }

    let mut adam = Adam::new(&net.params, config.lr);
    let mut grads = Grads::zeros_like(&net.params);
    let n_items = catalog.n_items();
    let batch = 32usize;

    for _epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        shuffle(&mut order, &mut rng);
        for chunk in order.chunks(batch) {
            grads.reset();
            for &pi in chunk {
                let (window, target) = &pairs[pi];
                let mut tape = Tape::new(&net.params);
                let ctx = net.context(&mut tape, window);
                // Sampled softmax: positive first, then uniform negatives.
                let mut cands = Vec::with_capacity(config.negatives + 1);
                cands.push(target.index());
                for _ in 0..config.negatives {
                    let mut neg = rng.gen_range(0..n_items);
                    if neg == target.index() {
                        neg = (neg + 1) % n_items;
                    }
                    cands.push(neg);
                }
                let logits: Vec<crate::nn::NodeId> = cands
                    .iter()
                    .map(|&c| {
                        let e = tape.param_row(net.item_emb, c);
                        tape.dot(ctx, e)
                    })
                    .collect();
                let logit_vec = tape.concat(&logits);
                let logp = tape.log_softmax(logit_vec);
                let pos = tape.pick(logp, 0);
                let loss = tape.neg(pos);
                tape.backward(loss, &mut grads);
            }
            grads.scale(1.0 / chunk.len() as f64);
            adam.step(&mut net.params, &grads);
        }
    }
    Ok(net)
}

fn shuffle(order: &mut [usize], rng: &mut impl Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

impl TeacherModel {
    /// Rank every catalog item for a history window. History items are kept
    /// in the ranking; legality is judged elsewhere.
    pub fn predict_full_ranking(&self, history: &[ItemId]) -> Result<TeacherPredictions, TeacherError> {
        if history.is_empty() {
            return Err(TeacherError::EmptyHistory);
        }
        for it in history {
            if it.index() >= self.n_items {
                return Err(TeacherError::UnknownItem(it.0));
            }
        }
        let scores = match &self.net {
            TeacherNet::Attentive(net) => net.all_scores(history),
            TeacherNet::Markov(net) => net.all_scores(history),
        };
        Ok(rank_scores(history, &scores))
    }

    pub fn save(&self, path: &Path) -> Result<(), TeacherError> {
        let mut f = std::fs::File::create(path)?;
        serde_json::to_writer(&mut f, self).map_err(std::io::Error::other)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TeacherError> {
        let f = std::fs::File::open(path)?;
        let model: TeacherModel = serde_json::from_reader(BufReader::new(f))
            .map_err(|e| TeacherError::BadCheckpoint(e.to_string()))?;
        if model.version != 1 {
            return Err(TeacherError::BadCheckpoint(format!(
                "unsupported checkpoint version {}",
                model.version
            )));
        }
        Ok(model)
    }
}

/// Sort descending by score, ties by ascending item id.
fn rank_scores(history: &[ItemId], scores: &[f64]) -> TeacherPredictions {
    let mut order: Vec<u32> = (0..scores.len() as u32).collect();
    order.sort_by(|&a, &b| {
        scores[b as usize]
            .partial_cmp(&scores[a as usize])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut rank_of = vec![0u32; scores.len()];
    for (pos, &it) in order.iter().enumerate() {
        rank_of[it as usize] = pos as u32 + 1;
    }
    TeacherPredictions {
        context: history.to_vec(),
        ranked_items: order.into_iter().map(ItemId).collect(),
        rank_of,
    }
}

/// HR@k of a model over the validation labels of a split.
pub fn validation_hit_rate(
    model: &TeacherModel,
    split: &SplitDataset,
    k: usize,
) -> Result<f64, TeacherError> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for u in &split.users {
        let hist = split.valid_history(u);
        if hist.is_empty() {
            continue;
        }
        let preds = model.predict_full_ranking(hist)?;
        if preds.rank_of(u.valid) as usize <= k {
            hits += 1;
        }
        total += 1;
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{synth_catalog, leave_one_out_split, SynthSpec};

    fn small_split() -> (Catalog, SplitDataset) {
        let catalog = synth_catalog(&SynthSpec::new(40, 4, 25, 11)).unwrap();
        let split = leave_one_out_split(&catalog, 10);
        (catalog, split)
    }

    #[test]
    fn markov_trains_in_one_pass_and_is_deterministic() {
        let (catalog, split) = small_split();
        let cfg = TeacherConfig { kind: TeacherKind::MarkovPopularity, ..Default::default() };
        let a = train_teacher(&catalog, &split, &cfg, 1).unwrap();
        let b = train_teacher(&catalog, &split, &cfg, 2).unwrap();
        // Seed is irrelevant for the closed-form kind.
        let ra = a.predict_full_ranking(&[ItemId(3)]).unwrap();
        let rb = b.predict_full_ranking(&[ItemId(3)]).unwrap();
        assert_eq!(ra.ranked_items, rb.ranked_items);
    }

    #[test]
    fn attentive_same_seed_same_parameters() {
        let (catalog, split) = small_split();
        let cfg = TeacherConfig { epochs: 1, ..Default::default() };
        let a = train_teacher(&catalog, &split, &cfg, 5).unwrap();
        let b = train_teacher(&catalog, &split, &cfg, 5).unwrap();
        let ra = a.predict_full_ranking(&[ItemId(0), ItemId(7)]).unwrap();
        let rb = b.predict_full_ranking(&[ItemId(0), ItemId(7)]).unwrap();
        assert_eq!(ra.ranked_items, rb.ranked_items);
    }

    #[test]
    fn ranking_is_a_permutation_with_consistent_ranks() {
        let (catalog, split) = small_split();
        let cfg = TeacherConfig { kind: TeacherKind::MarkovPopularity, ..Default::default() };
        let model = train_teacher(&catalog, &split, &cfg, 1).unwrap();
        let preds = model.predict_full_ranking(&[ItemId(2), ItemId(9)]).unwrap();
        let mut seen = vec![false; catalog.n_items()];
        for &it in &preds.ranked_items {
            assert!(!seen[it.index()], "duplicate in ranking");
            seen[it.index()] = true;
        }
        assert!(seen.iter().all(|s| *s));
        assert_eq!(preds.rank_of(preds.ranked_items[0]), 1);
        for (pos, &it) in preds.ranked_items.iter().enumerate() {
            assert_eq!(preds.rank_of(it) as usize, pos + 1);
        }
    }

    #[test]
    fn markov_with_no_evidence_falls_back_to_popularity() {
        let n = 6usize;
        let net = MarkovNet {
            n_items: n,
            transitions: vec![0; n * n],
            popularity: vec![5, 9, 1, 9, 0, 3],
            smoothing: 0.2,
        };
        let model = TeacherModel {
            version: 1,
            kind: TeacherKind::MarkovPopularity,
            n_items: n,
            config: TeacherConfig { kind: TeacherKind::MarkovPopularity, ..Default::default() },
            net: TeacherNet::Markov(net),
        };
        let preds = model.predict_full_ranking(&[ItemId(4)]).unwrap();
        // Popularity order with ties broken by ascending id: 1, 3, 0, 5, 2, 4.
        assert_eq!(
            preds.ranked_items,
            vec![ItemId(1), ItemId(3), ItemId(0), ItemId(5), ItemId(2), ItemId(4)]
        );
    }

    #[test]
    fn ties_rank_lower_id_first() {
        let preds = rank_scores(&[ItemId(0)], &[1.0, 2.0, 2.0, 0.5]);
        assert_eq!(preds.ranked_items[0], ItemId(1));
        assert_eq!(preds.ranked_items[1], ItemId(2));
    }

    #[test]
    fn empty_history_and_unknown_ids_error() {
        let (catalog, split) = small_split();
        let cfg = TeacherConfig { kind: TeacherKind::MarkovPopularity, ..Default::default() };
        let model = train_teacher(&catalog, &split, &cfg, 1).unwrap();
        assert!(matches!(model.predict_full_ranking(&[]), Err(TeacherError::EmptyHistory)));
        assert!(matches!(
            model.predict_full_ranking(&[ItemId(999)]),
            Err(TeacherError::UnknownItem(999))
        ));
    }

    #[test]
    fn checkpoint_roundtrip_preserves_rankings() {
        let (catalog, split) = small_split();
        let cfg = TeacherConfig { epochs: 1, embed_dim: 8, ffn_dim: 16, ..Default::default() };
        let model = train_teacher(&catalog, &split, &cfg, 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("teacher.json");
        model.save(&path).unwrap();
        let back = TeacherModel::load(&path).unwrap();
        let hist = vec![ItemId(1), ItemId(2), ItemId(3)];
        assert_eq!(
            model.predict_full_ranking(&hist).unwrap().ranked_items,
            back.predict_full_ranking(&hist).unwrap().ranked_items
        );
    }

    #[test]
    fn empty_split_errors() {
        let catalog = synth_catalog(&SynthSpec::new(10, 2, 1, 0)).unwrap();
        let split = SplitDataset { users: vec![], max_history: 10, skipped: 0 };
        assert!(matches!(
            train_teacher(&catalog, &split, &TeacherConfig::default(), 0),
            Err(TeacherError::EmptyTrainingData)
        ));
    }
}
