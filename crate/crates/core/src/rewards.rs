//! The reward engine.
//!
//! Judges list legality, computes per-item preference scores and control
//! scores, position-discounted scores, the list-level control score and list
//! reward, and assembles per-token rewards with the KL penalty, list
//! amplification, and batch whitening. All logarithms are base 2 and every
//! `k * m` comparison is real-valued — no rounding anywhere.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, ItemId};
use crate::instructions::Intention;
use crate::teacher::TeacherPredictions;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("intention {0} is not supported by the reward rules")]
    UnsupportedIntention(String),
    #[error("internal error: {0}")]
    Internal(String),
}

/// A list entry as parsed from a response: either a resolved catalog item or
/// an unresolved surface string (hallucinated title or distractor token).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ItemRef {
    Id(ItemId),
    Unresolved(String),
}

impl ItemRef {
    pub fn id(&self) -> Option<ItemId> {
        match self {
            ItemRef::Id(it) => Some(*it),
            ItemRef::Unresolved(_) => None,
        }
    }
}

/// Why an entry is illegal. Variants are ordered the way conditions are
/// checked, so the reported reason is always the first that applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IllegalReason {
    Nonexistent,
    Duplicate,
    InHistory,
    OverK,
}

/// A judged response list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedList {
    pub items: Vec<ItemRef>,
    /// `None` = legal. Parallel to `items`.
    pub legality: Vec<Option<IllegalReason>>,
    pub k: usize,
    pub history: Vec<ItemId>,
}

impl ParsedList {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn is_legal(&self, i: usize) -> bool {
        self.legality[i].is_none()
    }

    pub fn n_illegal(&self) -> usize {
        self.legality.iter().filter(|l| l.is_some()).count()
    }

    /// Resolved ids of the first `n` entries (unresolved entries skipped).
    pub fn ids_in_top(&self, n: usize) -> Vec<ItemId> {
        self.items.iter().take(n).filter_map(ItemRef::id).collect()
    }
}

/// Apply the four illegality conditions: the item does not exist, duplicates
/// any preceding entry, appears in the user's history, or sits past position
/// `k`. Duplicates are judged against all preceding entries regardless of
/// their own legality; resolved entries compare by id, unresolved by exact
/// string.
pub fn judge_legality(
    items: Vec<ItemRef>,
    k: usize,
    history: &[ItemId],
    catalog: &Catalog,
) -> ParsedList {
    let hist: BTreeSet<ItemId> = history.iter().copied().collect();
    let mut legality = Vec::with_capacity(items.len());
    for (i, entry) in items.iter().enumerate() {
        let exists = match entry {
            ItemRef::Id(it) => it.index() < catalog.n_items(),
            ItemRef::Unresolved(_) => false,
        };
        let reason = if !exists {
            Some(IllegalReason::Nonexistent)
        } else if items[..i].iter().any(|prev| prev == entry) {
            Some(IllegalReason::Duplicate)
        } else if entry.id().is_some_and(|it| hist.contains(&it)) {
            Some(IllegalReason::InHistory)
        } else if i + 1 > k {
            Some(IllegalReason::OverK)
        } else {
            None
        };
        legality.push(reason);
    }
    ParsedList { items, legality, k, history: history.to_vec() }
}

/// Per-item preference score: -1 if illegal, +1 for the target item, else
/// `1 / log2(Rank_i + 3)` from the teacher's rank.
pub fn preference_scores(
    parsed: &ParsedList,
    ranks: &TeacherPredictions,
    target: Option<ItemId>,
) -> Result<Vec<f64>, RewardError> {
    parsed
        .items
        .iter()
        .zip(&parsed.legality)
        .map(|(entry, legality)| {
            if legality.is_some() {
                return Ok(-1.0);
            }
            let it = entry.id().ok_or_else(|| {
                RewardError::Internal("legal entry without a resolved id".into())
            })?;
            if Some(it) == target {
                return Ok(1.0);
            }
            let rank = ranks.rank_of(it);
            if rank == 0 {
                return Err(RewardError::Internal(format!("no rank for item {}", it.0)));
            }
            Ok(1.0 / (rank as f64 + 3.0).log2())
        })
        .collect()
}

/// Per-item control scores plus the in/out counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlScores {
    pub scores_ctl: Vec<f64>,
    pub count_in: usize,
    pub count_out: usize,
}

/// Control-score recursion over the list.
///
/// Illegal entries score -1 and leave the counters untouched; counters are
/// incremented before the per-kind branch runs. The I2 branches follow the
/// published decision order literally, including the `Count_in > k` guard
/// that is unreachable while over-k entries are illegal.
pub fn control_scores(
    parsed: &ParsedList,
    k: usize,
    intention: &Intention,
    scores: &[f64],
    catalog: &Catalog,
) -> Result<ControlScores, RewardError> {
    if !matches!(
        intention,
        Intention::Implicit
            | Intention::CategoryInclude(_)
            | Intention::CategoryExclude(_)
            | Intention::ProportionLe { .. }
            | Intention::ProportionGe { .. }
            | Intention::ProportionApprox { .. }
    ) {
        return Err(RewardError::UnsupportedIntention(intention.kind_label().to_string()));
    }
    if scores.len() != parsed.len() {
        return Err(RewardError::Internal("scores length mismatch".into()));
    }

    let target = intention.target_category();
    let kf = k as f64;
    let mut out = vec![0.0; parsed.len()];
    let mut count_in = 0usize;
    let mut count_out = 0usize;

    for i in 0..parsed.len() {
        if !parsed.is_legal(i) {
            out[i] = -1.0;
            continue;
        }
        let in_cat = match (target, parsed.items[i].id()) {
            (Some(c), Some(it)) => catalog.item_in_category(it, c),
            _ => false,
        };
        if in_cat {
            count_in += 1;
        } else {
            count_out += 1;
        }
        let cin = count_in as f64;
        let cout = count_out as f64;

        out[i] = match intention {
            Intention::Implicit => scores[i],
            Intention::CategoryInclude(_) => {
                if in_cat {
                    1.0
                } else {
                    0.0
                }
            }
            Intention::CategoryExclude(_) => {
                if in_cat {
                    0.0
                } else {
                    1.0
                }
            }
            Intention::ProportionLe { m, .. } => {
                if cout > kf - kf * m {
                    0.5
                } else if !in_cat {
                    1.0
                } else if cin < kf * m {
                    0.5
                } else {
                    0.0
                }
            }
            Intention::ProportionGe { m, .. } => {
                if cin > kf {
                    0.5
                } else if in_cat {
                    1.0
                } else if cout < kf - kf * m {
                    0.5
                } else {
                    0.0
                }
            }
            Intention::ProportionApprox { m, .. } => {
                if in_cat {
                    if cin <= kf * m {
                        1.0
                    } else {
                        0.0
                    }
                } else if cin >= kf * m {
                    1.0
                } else if cout <= kf - kf * m {
                    0.5
                } else {
                    0.0
                }
            }
            _ => unreachable!(),
        };
    }
    Ok(ControlScores { scores_ctl: out, count_in, count_out })
}

/// Item-level reward: `(1 - alpha) * Scores + alpha * Scores_ctl`.
/// `alpha = 0.5` gives the plain equal-weight rule.
pub fn item_rewards(scores: &[f64], scores_ctl: &[f64], alpha: f64) -> Result<Vec<f64>, RewardError> {
    if scores.len() != scores_ctl.len() {
        return Err(RewardError::Internal("item reward length mismatch".into()));
    }
    Ok(scores
        .iter()
        .zip(scores_ctl)
        .map(|(s, c)| (1.0 - alpha) * s + alpha * c)
        .collect())
}

/// Position-discounted preference score: -1 if illegal, else
/// `Scores_i / log2(i + 2)` with `i` the 1-based list position.
pub fn position_discounted(scores: &[f64], parsed: &ParsedList) -> Vec<f64> {
    scores
        .iter()
        .enumerate()
        .map(|(idx, s)| {
            if parsed.is_legal(idx) {
                s / ((idx + 1) as f64 + 2.0).log2()
            } else {
                -1.0
            }
        })
        .collect()
}

/// List-level control score.
pub fn list_control_score(
    intention: &Intention,
    k: usize,
    count_in: usize,
    count_out: usize,
    scores_star: &[f64],
) -> Result<f64, RewardError> {
    let kf = k as f64;
    let cin = count_in as f64;
    let cout = count_out as f64;
    let v = match intention {
        Intention::Implicit => scores_star.iter().sum(),
        Intention::CategoryInclude(_) => 1.0 / ((kf - cin) + 2.0).log2(),
        Intention::CategoryExclude(_) => 1.0 / ((kf - cout) + 2.0).log2(),
        Intention::ProportionLe { m, .. } => 1.0 / ((cin - kf * m).max(0.0) + 2.0).log2(),
        Intention::ProportionGe { m, .. } => 1.0 / ((kf * m - cin).max(0.0) + 2.0).log2(),
        Intention::ProportionApprox { m, .. } => 1.0 / ((cin - kf * m).abs() + 2.0).log2(),
        other => {
            return Err(RewardError::UnsupportedIntention(other.kind_label().to_string()))
        }
    };
    Ok(v)
}

/// List-level reward: `(1 - alpha) * sum(Scores*) + alpha * Score_ctl_list`.
pub fn list_reward(scores_star: &[f64], score_ctl_list: f64, alpha: f64) -> f64 {
    (1.0 - alpha) * scores_star.iter().sum::<f64>() + alpha * score_ctl_list
}

/// Reward weights. `alpha` balances preference against control in both the
/// item- and list-level rewards; `eta` scales the per-token KL penalty; the
/// list reward is amplified so it is not drowned out by item rewards.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardConfig {
    pub alpha: f64,
    pub eta: f64,
    pub list_amplification: f64,
    pub whitening: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig { alpha: 0.5, eta: 0.3, list_amplification: 10.0, whitening: true }
    }
}

/// Everything the reward rules derive from one (instruction, response) pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardBreakdown {
    /// 1-based teacher rank per entry; `None` for illegal entries.
    pub ranks: Vec<Option<u32>>,
    pub scores: Vec<f64>,
    pub scores_ctl: Vec<f64>,
    pub scores_star: Vec<f64>,
    pub r_item: Vec<f64>,
    pub count_in: usize,
    pub count_out: usize,
    pub score_ctl_list: f64,
    pub r_list: f64,
}

/// Run the whole per-list reward chain.
pub fn compute_breakdown(
    parsed: &ParsedList,
    ranks: &TeacherPredictions,
    target: Option<ItemId>,
    intention: &Intention,
    catalog: &Catalog,
    alpha: f64,
) -> Result<RewardBreakdown, RewardError> {
    let scores = preference_scores(parsed, ranks, target)?;
    let ctl = control_scores(parsed, parsed.k, intention, &scores, catalog)?;
    let scores_star = position_discounted(&scores, parsed);
    let r_item = item_rewards(&scores, &ctl.scores_ctl, alpha)?;
    let score_ctl_list =
        list_control_score(intention, parsed.k, ctl.count_in, ctl.count_out, &scores_star)?;
    let r_list = list_reward(&scores_star, score_ctl_list, alpha);
    let rank_list = parsed
        .items
        .iter()
        .zip(&parsed.legality)
        .map(|(entry, legality)| match (legality, entry.id()) {
            (None, Some(it)) => Some(ranks.rank_of(it)),
            _ => None,
        })
        .collect();
    Ok(RewardBreakdown {
        ranks: rank_list,
        scores,
        scores_ctl: ctl.scores_ctl,
        scores_star,
        r_item,
        count_in: ctl.count_in,
        count_out: ctl.count_out,
        score_ctl_list,
        r_list,
    })
}

/// Where rewards land inside a token sequence: each entry names the item it
/// closes (an index into `r_item`), and exactly one position is the
/// sequence-final token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenLayout {
    pub item_slots: Vec<Option<usize>>,
    pub final_token: usize,
}

/// Assemble per-token rewards: every token pays `-eta * KL`, each item-final
/// token adds its item reward, and the sequence-final token adds the
/// amplified list reward. Whitening is applied separately, over a whole
/// batch, by [`whiten_rewards`].
pub fn assemble_token_rewards(
    layout: &TokenLayout,
    r_item: &[f64],
    r_list: f64,
    kl_per_token: &[f64],
    config: &RewardConfig,
) -> Result<Vec<f64>, RewardError> {
    let n = layout.item_slots.len();
    if kl_per_token.len() != n {
        return Err(RewardError::Internal(format!(
            "kl length {} != token count {n}",
            kl_per_token.len()
        )));
    }
    if layout.final_token >= n {
        return Err(RewardError::Internal("final token out of range".into()));
    }
    let mut out = vec![0.0; n];
    for (t, slot) in layout.item_slots.iter().enumerate() {
        out[t] = -config.eta * kl_per_token[t];
        if let Some(idx) = slot {
            let r = r_item.get(*idx).ok_or_else(|| {
                RewardError::Internal(format!("item slot {idx} outside reward vector"))
            })?;
            out[t] += r;
        }
    }
    out[layout.final_token] += config.list_amplification * r_list;
    Ok(out)
}

/// Shift and scale a batch of per-token rewards to zero mean and unit
/// variance (epsilon-guarded). A constant batch becomes all zeros.
pub fn whiten_rewards(batch: &mut [Vec<f64>]) {
    let n: usize = batch.iter().map(Vec::len).sum();
    if n == 0 {
        return;
    }
    let mean: f64 = batch.iter().flatten().sum::<f64>() / n as f64;
    let var: f64 = batch.iter().flatten().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n as f64;
    let scale = 1.0 / (var.sqrt() + 1e-8);
    for traj in batch.iter_mut() {
        for r in traj.iter_mut() {
            *r = (*r - mean) * scale;
        }
    }
}
