//! Instruction dataset synthesis: typed control intentions, teacher-based
//! label augmentation, and prompt rendering.

pub mod templates;

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, CatalogError, CategoryId, ItemId, SplitDataset, UserId, UserSplit};
use crate::teacher::{TeacherModel, TeacherPredictions};
use templates::TemplateSet;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid k range [{0}, {1}]")]
    InvalidKRange(usize, usize),
    #[error("infeasible sample: {0}")]
    Infeasible(String),
    #[error("template error: {0}")]
    Template(String),
    #[error("catalog error: {0}")]
    Catalog(#[from] CatalogError),
    #[error("teacher error: {0}")]
    Teacher(#[from] crate::teacher::TeacherError),
    #[error("no eligible control category")]
    NoEligibleCategory,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad dataset record at line {line}: {msg}")]
    BadRecord { line: usize, msg: String },
}

/// A typed control intention. Variants carry exactly the data their kind
/// needs, so the "I2 carries m, I1/I2/I3 carry a category" invariants hold by
/// construction. Combos pair two non-combo intentions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Intention {
    /// Plain preference-driven recommendation.
    Implicit,
    /// All recommended items should carry the category.
    CategoryInclude(CategoryId),
    /// No recommended item should carry the category.
    CategoryExclude(CategoryId),
    /// Proportion of the category must be <= m.
    ProportionLe { category: CategoryId, m: f64 },
    /// Proportion of the category must be >= m.
    ProportionGe { category: CategoryId, m: f64 },
    /// Proportion of the category should be about m.
    ProportionApprox { category: CategoryId, m: f64 },
    /// Retrieve items of the category, no user profile involved.
    ItemSearch(CategoryId),
    /// Two simultaneous intentions (evaluation-only; never trained on).
    Combo(Box<Intention>, Box<Intention>),
}

impl Intention {
    pub fn kind_label(&self) -> &'static str {
        match self {
            Intention::Implicit => "I0",
            Intention::CategoryInclude(_) => "I1_pos",
            Intention::CategoryExclude(_) => "I1_neg",
            Intention::ProportionLe { .. } => "I2_le",
            Intention::ProportionGe { .. } => "I2_ge",
            Intention::ProportionApprox { .. } => "I2_approx",
            Intention::ItemSearch(_) => "I3",
            Intention::Combo(..) => "combo",
        }
    }

    pub fn target_category(&self) -> Option<CategoryId> {
        match self {
            Intention::Implicit => None,
            Intention::CategoryInclude(c)
            | Intention::CategoryExclude(c)
            | Intention::ItemSearch(c) => Some(*c),
            Intention::ProportionLe { category, .. }
            | Intention::ProportionGe { category, .. }
            | Intention::ProportionApprox { category, .. } => Some(*category),
            Intention::Combo(first, _) => first.target_category(),
        }
    }

    pub fn proportion(&self) -> Option<f64> {
        match self {
            Intention::ProportionLe { m, .. }
            | Intention::ProportionGe { m, .. }
            | Intention::ProportionApprox { m, .. } => Some(*m),
            Intention::Combo(first, _) => first.proportion(),
            _ => None,
        }
    }

    /// The atomic intentions: itself, or both halves of a combo.
    pub fn atoms(&self) -> Vec<&Intention> {
        match self {
            Intention::Combo(a, b) => vec![a, b],
            other => vec![other],
        }
    }

    pub fn is_proportion(&self) -> bool {
        matches!(
            self,
            Intention::ProportionLe { .. }
                | Intention::ProportionGe { .. }
                | Intention::ProportionApprox { .. }
        )
    }
}

/// One fully rendered instruction sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionSample {
    pub user: UserId,
    pub intention: Intention,
    /// Requested list length.
    pub k: usize,
    /// History window shown in the prompt (empty for I3).
    pub history: Vec<ItemId>,
    /// Held-out target; absent for I3.
    pub ground_truth: Option<ItemId>,
    /// Ordered supervised labels, length k, ground truth first (I0/I1/I2).
    pub labels: Vec<ItemId>,
    pub prompt: String,
    pub response: String,
    /// Set when the control category came from the global-popularity
    /// fallback rather than the teacher-histogram rule.
    pub fallback_category: bool,
}

/// Uniform draw of the requested list length. Training uses [1, 10];
/// formatting evaluation uses [11, 15].
pub fn draw_k(rng: &mut impl Rng, lo: usize, hi: usize) -> Result<usize, DatasetError> {
    if lo < 1 || lo > hi {
        return Err(DatasetError::InvalidKRange(lo, hi));
    }
    Ok(rng.gen_range(lo..=hi))
}

/// Instruction kinds a dataset can contain, in generation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    I0,
    I1Pos,
    I1Neg,
    I2Le,
    I2Ge,
    I2Approx,
    I3,
    /// Non-paper copy-task filler used only to exercise dataset plumbing.
    Distractor,
}

impl SampleKind {
    pub fn label(self) -> &'static str {
        match self {
            SampleKind::I0 => "I0",
            SampleKind::I1Pos => "I1_pos",
            SampleKind::I1Neg => "I1_neg",
            SampleKind::I2Le => "I2_le",
            SampleKind::I2Ge => "I2_ge",
            SampleKind::I2Approx => "I2_approx",
            SampleKind::I3 => "I3",
            SampleKind::Distractor => "distractor",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Some(match s {
            "I0" => SampleKind::I0,
            "I1_pos" => SampleKind::I1Pos,
            "I1_neg" => SampleKind::I1Neg,
            "I2_le" => SampleKind::I2Le,
            "I2_ge" => SampleKind::I2Ge,
            "I2_approx" => SampleKind::I2Approx,
            "I3" => SampleKind::I3,
            "distractor" => SampleKind::Distractor,
            _ => return None,
        })
    }
}

/// Per-kind sample counts for [`build_training_set`].
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DatasetQuota {
    pub i0: usize,
    pub i1_pos: usize,
    pub i1_neg: usize,
    pub i2_le: usize,
    pub i2_ge: usize,
    pub i2_approx: usize,
    pub i3: usize,
    #[serde(default)]
    pub distractor: usize,
}

impl DatasetQuota {
    pub fn total(&self) -> usize {
        self.i0 + self.i1_pos + self.i1_neg + self.i2_le + self.i2_ge + self.i2_approx + self.i3
            + self.distractor
    }
}

/// Proportion values drawn for I2 training samples. Evaluation pins
/// {0.2 with <=, 0.3 with >=/approx}; training mixes a small grid so the
/// policy sees varied targets.
pub const TRAINING_M_GRID: [f64; 3] = [0.2, 0.3, 0.5];

/// Evaluation-time control construction: which rule selects `C_target`.
///
/// Positive control and the >=/approx proportions use the ground-truth
/// item's category (lowest id when the item has several). Negative control
/// and the <= proportion use the most frequent category among the teacher's
/// top-10 — excluding every category of the ground-truth item — with ties
/// resolved to the lowest id. When that leaves nothing, the globally most
/// item-populated non-target category is used and the sample is flagged.
pub fn make_intention_for_eval(
    kind: SampleKind,
    ground_truth: ItemId,
    teacher_preds: &TeacherPredictions,
    catalog: &Catalog,
) -> Result<(Intention, bool), DatasetError> {
    let gt_primary = catalog.item(ground_truth)?.primary_category();
    match kind {
        SampleKind::I0 => Ok((Intention::Implicit, false)),
        SampleKind::I1Pos => Ok((Intention::CategoryInclude(gt_primary), false)),
        SampleKind::I2Ge => Ok((Intention::ProportionGe { category: gt_primary, m: 0.3 }, false)),
        SampleKind::I2Approx => {
            Ok((Intention::ProportionApprox { category: gt_primary, m: 0.3 }, false))
        }
        SampleKind::I1Neg | SampleKind::I2Le => {
            let (category, fallback) = negative_control_category(ground_truth, teacher_preds, catalog)?;
            let intent = match kind {
                SampleKind::I1Neg => Intention::CategoryExclude(category),
                _ => Intention::ProportionLe { category, m: 0.2 },
            };
            Ok((intent, fallback))
        }
        SampleKind::I3 | SampleKind::Distractor => Err(DatasetError::Infeasible(format!(
            "{} has no evaluation control construction",
            kind.label()
        ))),
    }
}

/// Most frequent category among the teacher's top-10, excluding every
/// category of the ground-truth item; ties -> lowest id. Falls back to the
/// globally most item-populated non-target category (flagged).
fn negative_control_category(
    ground_truth: ItemId,
    teacher_preds: &TeacherPredictions,
    catalog: &Catalog,
) -> Result<(CategoryId, bool), DatasetError> {
    let gt_cats = catalog.categories_of(ground_truth)?.to_vec();
    let mut counts = vec![0usize; catalog.n_categories()];
    for &it in teacher_preds.top(10) {
        for &c in catalog.categories_of(it)? {
            counts[c.index()] += 1;
        }
    }
    let best = counts
        .iter()
        .enumerate()
        .filter(|(c, n)| **n > 0 && !gt_cats.contains(&CategoryId(*c as u32)))
        .max_by(|(ca, na), (cb, nb)| na.cmp(nb).then(cb.cmp(ca)))
        .map(|(c, _)| CategoryId(c as u32));
    if let Some(c) = best {
        return Ok((c, false));
    }
    catalog
        .most_popular_category_excluding(&gt_cats)
        .map(|c| (c, true))
        .ok_or(DatasetError::NoEligibleCategory)
}

/// Build the supervised label list: ground truth first, remaining `k - 1`
/// slots from the teacher ranking, skipping history items and duplicates and
/// honoring the intention filter. For proportion intentions the in-category
/// count is steered to the feasible value nearest `k * m` that satisfies the
/// bound, counting the ground-truth item.
pub fn augment_labels(
    teacher_preds: &TeacherPredictions,
    intention: &Intention,
    ground_truth: ItemId,
    k: usize,
    history: &[ItemId],
    catalog: &Catalog,
) -> Result<Vec<ItemId>, DatasetError> {
    assert!(k >= 1);
    let hist: BTreeSet<ItemId> = history.iter().copied().collect();
    if hist.contains(&ground_truth) {
        return Err(DatasetError::Infeasible("ground truth already in history".into()));
    }

    let eligible = |it: ItemId| it != ground_truth && !hist.contains(&it);

    match intention {
        Intention::Implicit => {
            let mut labels = vec![ground_truth];
            for &it in &teacher_preds.ranked_items {
                if labels.len() == k {
                    break;
                }
                if eligible(it) && !labels.contains(&it) {
                    labels.push(it);
                }
            }
            finish(labels, k)
        }
        Intention::CategoryInclude(c) => {
            if !catalog.item_in_category(ground_truth, *c) {
                return Err(DatasetError::Infeasible(
                    "ground truth outside the include category".into(),
                ));
            }
            let mut labels = vec![ground_truth];
            for &it in &teacher_preds.ranked_items {
                if labels.len() == k {
                    break;
                }
                if eligible(it) && catalog.item_in_category(it, *c) && !labels.contains(&it) {
                    labels.push(it);
                }
            }
            finish(labels, k)
        }
        Intention::CategoryExclude(c) => {
            if catalog.item_in_category(ground_truth, *c) {
                return Err(DatasetError::Infeasible(
                    "ground truth carries the excluded category".into(),
                ));
            }
            let mut labels = vec![ground_truth];
            for &it in &teacher_preds.ranked_items {
                if labels.len() == k {
                    break;
                }
                if eligible(it) && !catalog.item_in_category(it, *c) && !labels.contains(&it) {
                    labels.push(it);
                }
            }
            finish(labels, k)
        }
        Intention::ProportionLe { category, m }
        | Intention::ProportionGe { category, m }
        | Intention::ProportionApprox { category, m } => {
            let target_in = feasible_in_count(intention, *category, *m, ground_truth, k, &hist, catalog)?;
            let gt_in = catalog.item_in_category(ground_truth, *category);
            let mut need_in = target_in - usize::from(gt_in);
            let mut need_out = (k - target_in) - usize::from(!gt_in);
            let mut labels = vec![ground_truth];
            for &it in &teacher_preds.ranked_items {
                if need_in == 0 && need_out == 0 {
                    break;
                }
                if !eligible(it) || labels.contains(&it) {
                    continue;
                }
                if catalog.item_in_category(it, *category) {
                    if need_in > 0 {
                        labels.push(it);
                        need_in -= 1;
                    }
                } else if need_out > 0 {
                    labels.push(it);
                    need_out -= 1;
                }
            }
            finish(labels, k)
        }
        Intention::ItemSearch(_) | Intention::Combo(..) => Err(DatasetError::Infeasible(format!(
            "{} labels are not teacher-augmented",
            intention.kind_label()
        ))),
    }
}

fn finish(labels: Vec<ItemId>, k: usize) -> Result<Vec<ItemId>, DatasetError> {
    if labels.len() == k {
        Ok(labels)
    } else {
        Err(DatasetError::Infeasible(format!(
            "catalog exhausted at {} of {k} labels",
            labels.len()
        )))
    }
}

/// The in-category count the label list should hit: the value nearest
/// `k * m` that satisfies the intention's bound, clamped by what the catalog
/// and history leave available. `k * m` stays real-valued throughout.
fn feasible_in_count(
    intention: &Intention,
    category: CategoryId,
    m: f64,
    ground_truth: ItemId,
    k: usize,
    history: &BTreeSet<ItemId>,
    catalog: &Catalog,
) -> Result<usize, DatasetError> {
    let km = k as f64 * m;
    let gt_in = catalog.item_in_category(ground_truth, category);

    let mut avail_in = 0usize;
    let mut avail_out = 0usize;
    for it in &catalog.items {
        if it.id == ground_truth || history.contains(&it.id) {
            continue;
        }
        if it.in_category(category) {
            avail_in += 1;
        } else {
            avail_out += 1;
        }
    }

    let satisfies = |t: usize| -> bool {
        let tf = t as f64;
        match intention {
            Intention::ProportionLe { .. } => tf <= km,
            Intention::ProportionGe { .. } => tf >= km,
            Intention::ProportionApprox { .. } => (tf - km).abs() <= 1.0,
            _ => unreachable!(),
        }
    };
    let available = |t: usize| -> bool {
        // Slots besides the ground truth must be coverable by the catalog.
        if gt_in && t == 0 {
            return false;
        }
        if !gt_in && t == k {
            return false;
        }
        let need_in = t - usize::from(gt_in && t > 0);
        let need_out = (k - t) - usize::from(!gt_in && t < k);
        need_in <= avail_in && need_out <= avail_out
    };

    let ideal = match intention {
        Intention::ProportionLe { .. } => km.floor(),
        Intention::ProportionGe { .. } => km.ceil(),
        Intention::ProportionApprox { .. } => km.round(),
        _ => unreachable!(),
    }
    .clamp(0.0, k as f64) as usize;

    // Walk outward from the ideal count, preferring the closer value and the
    // smaller one on ties.
    for dist in 0..=k {
        for cand in [ideal.checked_sub(dist), Some(ideal + dist)] {
            let Some(t) = cand else { continue };
            if t > k {
                continue;
            }
            if satisfies(t) && available(t) {
                return Ok(t);
            }
        }
    }
    Err(DatasetError::Infeasible(format!(
        "no in-category count satisfies {} with m={m} k={k}",
        intention.kind_label()
    )))
}

fn format_percent(m: f64) -> String {
    let pct = m * 100.0;
    if (pct - pct.round()).abs() < 1e-9 {
        format!("{:.0}%", pct)
    } else {
        format!("{pct}%")
    }
}

fn render_history(catalog: &Catalog, history: &[ItemId]) -> String {
    history
        .iter()
        .map(|it| format!("'{}'", catalog.items[it.index()].title))
        .collect::<Vec<_>>()
        .join(", ")
}

fn render_item_list(catalog: &Catalog, items: &[ItemId]) -> String {
    items
        .iter()
        .enumerate()
        .map(|(i, it)| format!("{}. {}", i + 1, catalog.items[it.index()].title))
        .collect::<Vec<_>>()
        .join("\n")
}

/// The intention phrase inserted into `{synthetic_intention}`. I1/I3 draw
/// uniformly from the six positive or six negative phrasings; I2 uses its
/// fixed proportion sentence.
pub fn intention_phrase(
    intention: &Intention,
    catalog: &Catalog,
    set: &TemplateSet,
    rng: &mut impl Rng,
) -> Result<String, DatasetError> {
    let cat_name = |c: CategoryId| catalog.category_name(c).to_string();
    match intention {
        Intention::Implicit => Ok(String::new()),
        Intention::CategoryInclude(c) | Intention::ItemSearch(c) => {
            let phrase = &set.positive_phrases[rng.gen_range(0..set.positive_phrases.len())];
            templates::fill(phrase, &[("target_category", &cat_name(*c))])
        }
        Intention::CategoryExclude(c) => {
            let phrase = &set.negative_phrases[rng.gen_range(0..set.negative_phrases.len())];
            templates::fill(phrase, &[("target_category", &cat_name(*c))])
        }
        Intention::ProportionLe { category, m } => templates::fill(
            &set.i2_intent_le,
            &[("target_category", &cat_name(*category)), ("category_proportion", &format_percent(*m))],
        ),
        Intention::ProportionGe { category, m } => templates::fill(
            &set.i2_intent_ge,
            &[("target_category", &cat_name(*category)), ("category_proportion", &format_percent(*m))],
        ),
        Intention::ProportionApprox { category, m } => templates::fill(
            &set.i2_intent_approx,
            &[("target_category", &cat_name(*category)), ("category_proportion", &format_percent(*m))],
        ),
        Intention::Combo(a, b) => {
            let pa = intention_phrase(a, catalog, set, rng)?;
            let pb = intention_phrase(b, catalog, set, rng)?;
            Ok(format!("{pa} and {pb}"))
        }
    }
}

/// Render the prompt text for a sample. The response text is the numbered
/// label list and is rendered by [`render_response`].
pub fn render_prompt(
    intention: &Intention,
    history: &[ItemId],
    k: usize,
    catalog: &Catalog,
    set: &TemplateSet,
    rng: &mut impl Rng,
) -> Result<String, DatasetError> {
    let hist_text = render_history(catalog, history);
    let count = k.to_string();
    match intention {
        Intention::Implicit => templates::fill(
            &set.i0_generate,
            &[("history", &hist_text), ("item_count", &count)],
        ),
        Intention::CategoryInclude(_) | Intention::CategoryExclude(_) | Intention::Combo(..) => {
            let phrase = intention_phrase(intention, catalog, set, rng)?;
            templates::fill(
                &set.i1_generate,
                &[("history", &hist_text), ("item_count", &count), ("synthetic_intention", &phrase)],
            )
        }
        Intention::ProportionLe { .. }
        | Intention::ProportionGe { .. }
        | Intention::ProportionApprox { .. } => {
            let phrase = intention_phrase(intention, catalog, set, rng)?;
            templates::fill(
                &set.i2_template,
                &[("history", &hist_text), ("item_count", &count), ("synthetic_intention", &phrase)],
            )
        }
        Intention::ItemSearch(_) => {
            let phrase = intention_phrase(intention, catalog, set, rng)?;
            templates::fill(
                &set.i3_generate,
                &[("item_count", &count), ("synthetic_intention", &phrase)],
            )
        }
    }
}

pub fn render_response(catalog: &Catalog, labels: &[ItemId]) -> String {
    render_item_list(catalog, labels)
}

/// Where a sample's history and ground truth come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplePlacement {
    /// A random position inside the train prefix (supervised/RL training).
    Train,
    /// History = train prefix, target = validation item.
    Validation,
    /// History = train prefix + validation item, target = test item.
    Test,
}

/// Generate one instruction sample.
///
/// Training placement draws a random cut inside the user's train prefix;
/// validation/test placements use the leave-one-out labels. I3 ignores the
/// user history entirely and samples `k` items from a random category with
/// enough members.
#[allow(clippy::too_many_arguments)]
pub fn gen_sample(
    kind: SampleKind,
    user: &UserSplit,
    split: &SplitDataset,
    catalog: &Catalog,
    teacher: &TeacherModel,
    set: &TemplateSet,
    rng: &mut impl Rng,
    k_range: (usize, usize),
    placement: SamplePlacement,
) -> Result<InstructionSample, DatasetError> {
    let k = draw_k(rng, k_range.0, k_range.1)?;

    if kind == SampleKind::I3 {
        return gen_item_search(user.user, catalog, set, rng, k);
    }
    if kind == SampleKind::Distractor {
        return gen_distractor(user.user, catalog, rng, k);
    }

    let (history, ground_truth) = match placement {
        SamplePlacement::Train => {
            if user.train.len() < 2 {
                return Err(DatasetError::Infeasible("train prefix too short".into()));
            }
            let cut = rng.gen_range(1..user.train.len());
            let lo = cut.saturating_sub(split.max_history);
            (user.train[lo..cut].to_vec(), user.train[cut])
        }
        SamplePlacement::Validation => (split.valid_history(user).to_vec(), user.valid),
        SamplePlacement::Test => (split.test_history(user), user.test),
    };
    if history.contains(&ground_truth) {
        return Err(DatasetError::Infeasible("target repeats inside its history window".into()));
    }

    let preds = teacher.predict_full_ranking(&history)?;
    let (intention, fallback_category) = match kind {
        SampleKind::I0 => (Intention::Implicit, false),
        SampleKind::I1Pos => (
            Intention::CategoryInclude(catalog.item(ground_truth)?.primary_category()),
            false,
        ),
        SampleKind::I1Neg => {
            let (c, fb) = negative_control_category(ground_truth, &preds, catalog)?;
            (Intention::CategoryExclude(c), fb)
        }
        SampleKind::I2Le => {
            let (c, fb) = negative_control_category(ground_truth, &preds, catalog)?;
            let m = TRAINING_M_GRID[rng.gen_range(0..TRAINING_M_GRID.len())];
            (Intention::ProportionLe { category: c, m }, fb)
        }
        SampleKind::I2Ge => {
            let c = catalog.item(ground_truth)?.primary_category();
            let m = TRAINING_M_GRID[rng.gen_range(0..TRAINING_M_GRID.len())];
            (Intention::ProportionGe { category: c, m }, false)
        }
        SampleKind::I2Approx => {
            let c = catalog.item(ground_truth)?.primary_category();
            let m = TRAINING_M_GRID[rng.gen_range(0..TRAINING_M_GRID.len())];
            (Intention::ProportionApprox { category: c, m }, false)
        }
        SampleKind::I3 | SampleKind::Distractor => unreachable!(),
    };

    let labels = augment_labels(&preds, &intention, ground_truth, k, &history, catalog)?;
    let prompt = render_prompt(&intention, &history, k, catalog, set, rng)?;
    let response = render_response(catalog, &labels);
    Ok(InstructionSample {
        user: user.user,
        intention,
        k,
        history,
        ground_truth: Some(ground_truth),
        labels,
        prompt,
        response,
        fallback_category,
    })
}

fn gen_item_search(
    user: UserId,
    catalog: &Catalog,
    set: &TemplateSet,
    rng: &mut impl Rng,
    k: usize,
) -> Result<InstructionSample, DatasetError> {
    let category = CategoryId(rng.gen_range(0..catalog.n_categories()) as u32);
    let pool = catalog.items_in_category(category);
    if pool.len() < k {
        return Err(DatasetError::Infeasible(format!(
            "category {} holds {} items, need {k}",
            catalog.category_name(category),
            pool.len()
        )));
    }
    let labels = sample_without_replacement(&pool, k, rng);
    let intention = Intention::ItemSearch(category);
    let prompt = render_prompt(&intention, &[], k, catalog, set, rng)?;
    let response = render_response(catalog, &labels);
    Ok(InstructionSample {
        user,
        intention,
        k,
        history: Vec::new(),
        ground_truth: None,
        labels,
        prompt,
        response,
        fallback_category: false,
    })
}

/// Non-paper filler: the prompt lists k titles and the response repeats
/// them, exercising the dataset plumbing without any teacher involvement.
fn gen_distractor(
    user: UserId,
    catalog: &Catalog,
    rng: &mut impl Rng,
    k: usize,
) -> Result<InstructionSample, DatasetError> {
    let all: Vec<ItemId> = catalog.items.iter().map(|it| it.id).collect();
    if all.len() < k {
        return Err(DatasetError::Infeasible("catalog smaller than k".into()));
    }
    let labels = sample_without_replacement(&all, k, rng);
    let listing = render_history(catalog, &labels);
    let prompt = format!("Instruction: Repeat the following items in order: {listing}.");
    let response = render_response(catalog, &labels);
    Ok(InstructionSample {
        user,
        intention: Intention::Implicit,
        k,
        history: Vec::new(),
        ground_truth: None,
        labels,
        prompt,
        response,
        fallback_category: false,
    })
}

fn sample_without_replacement(pool: &[ItemId], k: usize, rng: &mut impl Rng) -> Vec<ItemId> {
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    for i in 0..k {
        let j = rng.gen_range(i..idx.len());
        idx.swap(i, j);
    }
    idx[..k].iter().map(|&i| pool[i]).collect()
}

/// Outcome counters for dataset construction.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BuildStats {
    pub generated: usize,
    pub skipped: usize,
    pub fallback_categories: usize,
}

const RETRY_CAP: usize = 20;

/// Build a training dataset according to per-kind quotas. Each sample draws
/// from an independently seeded stream, so output is identical no matter how
/// generation is scheduled. Infeasible draws are retried with fresh users up
/// to a cap, then counted as skipped.
pub fn build_training_set(
    catalog: &Catalog,
    split: &SplitDataset,
    teacher: &TeacherModel,
    quotas: &DatasetQuota,
    set: &TemplateSet,
    seed: u64,
    k_range: (usize, usize),
) -> Result<(Vec<InstructionSample>, BuildStats), DatasetError> {
    let plan: [(SampleKind, usize); 8] = [
        (SampleKind::I0, quotas.i0),
        (SampleKind::I1Pos, quotas.i1_pos),
        (SampleKind::I1Neg, quotas.i1_neg),
        (SampleKind::I2Le, quotas.i2_le),
        (SampleKind::I2Ge, quotas.i2_ge),
        (SampleKind::I2Approx, quotas.i2_approx),
        (SampleKind::I3, quotas.i3),
        (SampleKind::Distractor, quotas.distractor),
    ];
    let mut out = Vec::with_capacity(quotas.total());
    let mut stats = BuildStats::default();
    for (tag, (kind, count)) in plan.iter().enumerate() {
        for idx in 0..*count {
            let mut rng = crate::stream_rng(seed, tag as u64 + 1, idx as u64);
            let mut done = false;
            for _attempt in 0..RETRY_CAP {
                if split.users.is_empty() {
                    break;
                }
                let user = &split.users[rng.gen_range(0..split.users.len())];
                match gen_sample(
                    *kind,
                    user,
                    split,
                    catalog,
                    teacher,
                    set,
                    &mut rng,
                    k_range,
                    SamplePlacement::Train,
                ) {
                    Ok(sample) => {
                        if sample.fallback_category {
                            stats.fallback_categories += 1;
                        }
                        out.push(sample);
                        stats.generated += 1;
                        done = true;
                        break;
                    }
                    Err(DatasetError::Infeasible(_)) | Err(DatasetError::NoEligibleCategory) => {
                        continue;
                    }
                    Err(other) => return Err(other),
                }
            }
            if !done {
                stats.skipped += 1;
            }
        }
    }
    Ok((out, stats))
}

/// Flat json-lines record; the external dataset format.
#[derive(Debug, Serialize, Deserialize)]
struct SampleRecord {
    user: u32,
    kind: String,
    k: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    target_category: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    m: Option<f64>,
    history: Vec<u32>,
    labels: Vec<u32>,
    prompt: String,
    response: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    fallback: bool,
}

fn is_search_kind(kind: &str) -> bool {
    kind == "I3" || kind == "distractor"
}

impl SampleRecord {
    fn from_sample(s: &InstructionSample) -> Self {
        SampleRecord {
            user: s.user.0,
            kind: s.intention.kind_label().to_string(),
            k: s.k,
            target_category: s.intention.target_category().map(|c| c.0),
            m: s.intention.proportion(),
            history: s.history.iter().map(|i| i.0).collect(),
            labels: s.labels.iter().map(|i| i.0).collect(),
            prompt: s.prompt.clone(),
            response: s.response.clone(),
            fallback: s.fallback_category,
        }
    }

    fn into_sample(self, line: usize) -> Result<InstructionSample, DatasetError> {
        let cat = self.target_category.map(CategoryId);
        let bad = |msg: &str| DatasetError::BadRecord { line, msg: msg.to_string() };
        let intention = match self.kind.as_str() {
            "I0" | "distractor" => Intention::Implicit,
            "I1_pos" => Intention::CategoryInclude(cat.ok_or_else(|| bad("I1_pos needs target_category"))?),
            "I1_neg" => Intention::CategoryExclude(cat.ok_or_else(|| bad("I1_neg needs target_category"))?),
            "I2_le" => Intention::ProportionLe {
                category: cat.ok_or_else(|| bad("I2 needs target_category"))?,
                m: self.m.ok_or_else(|| bad("I2 needs m"))?,
            },
            "I2_ge" => Intention::ProportionGe {
                category: cat.ok_or_else(|| bad("I2 needs target_category"))?,
                m: self.m.ok_or_else(|| bad("I2 needs m"))?,
            },
            "I2_approx" => Intention::ProportionApprox {
                category: cat.ok_or_else(|| bad("I2 needs target_category"))?,
                m: self.m.ok_or_else(|| bad("I2 needs m"))?,
            },
            "I3" => Intention::ItemSearch(cat.ok_or_else(|| bad("I3 needs target_category"))?),
            other => return Err(bad(&format!("unknown kind {other}"))),
        };
        let labels: Vec<ItemId> = self.labels.iter().map(|&i| ItemId(i)).collect();
        let ground_truth = if is_search_kind(&self.kind) { None } else { labels.first().copied() };
        Ok(InstructionSample {
            user: UserId(self.user),
            intention,
            k: self.k,
            history: self.history.iter().map(|&i| ItemId(i)).collect(),
            ground_truth,
            labels,
            prompt: self.prompt,
            response: self.response,
            fallback_category: self.fallback,
        })
    }
}

pub fn write_jsonl(path: &Path, samples: &[InstructionSample]) -> Result<(), DatasetError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        let rec = SampleRecord::from_sample(s);
        serde_json::to_writer(&mut f, &rec).map_err(std::io::Error::other)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<InstructionSample>, DatasetError> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| DatasetError::BadRecord {
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        out.push(rec.into_sample(lineno + 1)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{leave_one_out_split, synth_catalog, SynthSpec};
    use crate::teacher::{train_teacher, TeacherConfig, TeacherKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn fixture() -> (Catalog, SplitDataset, TeacherModel) {
        let catalog = synth_catalog(&SynthSpec::new(60, 5, 30, 77)).unwrap();
        let split = leave_one_out_split(&catalog, 10);
        let cfg = TeacherConfig { kind: TeacherKind::MarkovPopularity, ..Default::default() };
        let teacher = train_teacher(&catalog, &split, &cfg, 1).unwrap();
        (catalog, split, teacher)
    }

    #[test]
    fn draw_k_respects_bounds() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        assert_eq!(draw_k(&mut rng, 5, 5).unwrap(), 5);
        for _ in 0..200 {
            let k = draw_k(&mut rng, 1, 10).unwrap();
            assert!((1..=10).contains(&k));
            let k = draw_k(&mut rng, 11, 15).unwrap();
            assert!((11..=15).contains(&k));
        }
        assert!(draw_k(&mut rng, 0, 3).is_err());
        assert!(draw_k(&mut rng, 7, 3).is_err());
    }

    #[test]
    fn augment_fill_follows_teacher_order() {
        // Teacher order [a, g, b, c], history {a}: labels for k=3 are [g, b, c].
        let catalog = tiny_catalog(&[("a", &["X"]), ("g", &["X"]), ("b", &["X"]), ("c", &["X"])]);
        let preds = TeacherPredictions::from_ranking(
            vec![ItemId(0)],
            vec![ItemId(0), ItemId(1), ItemId(2), ItemId(3)],
        );
        let labels = augment_labels(
            &preds,
            &Intention::Implicit,
            ItemId(1),
            3,
            &[ItemId(0)],
            &catalog,
        )
        .unwrap();
        assert_eq!(labels, vec![ItemId(1), ItemId(2), ItemId(3)]);
    }

    #[test]
    fn augment_exclude_filters_category() {
        // Teacher order [x in C, y not, z not], g not in C, k=2 -> [g, y].
        let catalog = tiny_catalog(&[("x", &["C"]), ("y", &["D"]), ("z", &["D"]), ("g", &["D"])]);
        let preds = TeacherPredictions::from_ranking(
            vec![ItemId(0)],
            vec![ItemId(0), ItemId(1), ItemId(2), ItemId(3)],
        );
        let labels = augment_labels(
            &preds,
            &Intention::CategoryExclude(CategoryId(0)),
            ItemId(3),
            2,
            &[],
            &catalog,
        )
        .unwrap();
        assert_eq!(labels, vec![ItemId(3), ItemId(1)]);
    }

    #[test]
    fn augment_approx_hits_exact_count() {
        // m=0.5, k=4, ground truth in C: exactly 2 items of C.
        let catalog = tiny_catalog(&[
            ("g", &["C"]),
            ("a", &["C"]),
            ("b", &["C"]),
            ("c", &["D"]),
            ("d", &["D"]),
            ("e", &["D"]),
        ]);
        let preds = TeacherPredictions::from_ranking(
            vec![ItemId(5)],
            (0..6).map(ItemId).collect(),
        );
        let labels = augment_labels(
            &preds,
            &Intention::ProportionApprox { category: CategoryId(0), m: 0.5 },
            ItemId(0),
            4,
            &[],
            &catalog,
        )
        .unwrap();
        assert_eq!(labels.len(), 4);
        let in_c = labels
            .iter()
            .filter(|it| catalog.item_in_category(**it, CategoryId(0)))
            .count();
        assert_eq!(in_c, 2);
        assert_eq!(labels[0], ItemId(0));
    }

    #[test]
    fn augment_infeasible_when_category_too_small() {
        let catalog = tiny_catalog(&[("g", &["C"]), ("a", &["D"]), ("b", &["D"])]);
        let preds =
            TeacherPredictions::from_ranking(vec![ItemId(1)], (0..3).map(ItemId).collect());
        let err = augment_labels(
            &preds,
            &Intention::CategoryInclude(CategoryId(0)),
            ItemId(0),
            3,
            &[],
            &catalog,
        )
        .unwrap_err();
        assert!(matches!(err, DatasetError::Infeasible(_)));
    }

    #[test]
    fn negative_rule_counts_top10_histogram() {
        // Ground truth has category Action; top-10 histogram {RPG: 6, Action: 4}
        // must pick RPG.
        let mut defs: Vec<(String, Vec<&str>)> = Vec::new();
        defs.push(("gt".into(), vec!["Action"]));
        for i in 0..6 {
            defs.push((format!("r{i}"), vec!["RPG"]));
        }
        for i in 0..4 {
            defs.push((format!("a{i}"), vec!["Action"]));
        }
        let catalog = tiny_catalog_owned(&defs);
        let ranking: Vec<ItemId> = (1..11).map(|i| ItemId(i as u32)).chain([ItemId(0)]).collect();
        let preds = TeacherPredictions::from_ranking(vec![ItemId(1)], ranking);
        let (cat, fallback) = negative_control_category(ItemId(0), &preds, &catalog).unwrap();
        assert_eq!(catalog.category_name(cat), "RPG");
        assert!(!fallback);
    }

    #[test]
    fn eval_intentions_pin_m_values() {
        let (catalog, split, teacher) = fixture();
        let u = &split.users[0];
        let preds = teacher.predict_full_ranking(split.valid_history(u)).unwrap();
        let (le, _) = make_intention_for_eval(SampleKind::I2Le, u.valid, &preds, &catalog).unwrap();
        assert_eq!(le.proportion(), Some(0.2));
        let (ap, _) =
            make_intention_for_eval(SampleKind::I2Approx, u.valid, &preds, &catalog).unwrap();
        assert_eq!(ap.proportion(), Some(0.3));
        let (ge, _) = make_intention_for_eval(SampleKind::I2Ge, u.valid, &preds, &catalog).unwrap();
        assert_eq!(ge.proportion(), Some(0.3));
        assert_eq!(
            ap.target_category(),
            Some(catalog.item(u.valid).unwrap().primary_category())
        );
    }

    #[test]
    fn i3_sample_draws_from_category_only() {
        let (catalog, split, teacher) = fixture();
        let set = TemplateSet::default();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let sample = gen_sample(
            SampleKind::I3,
            &split.users[0],
            &split,
            &catalog,
            &teacher,
            &set,
            &mut rng,
            (3, 3),
            SamplePlacement::Train,
        )
        .unwrap();
        assert!(sample.history.is_empty());
        assert!(sample.ground_truth.is_none());
        assert_eq!(sample.labels.len(), 3);
        let c = sample.intention.target_category().unwrap();
        for it in &sample.labels {
            assert!(catalog.item_in_category(*it, c));
        }
        assert!(!sample.prompt.contains("historical interactions"));
    }

    #[test]
    fn prompts_contain_paper_texture() {
        let (catalog, split, teacher) = fixture();
        let set = TemplateSet::default();
        for (kind, needle) in [
            (SampleKind::I0, "generate a recommendation list considering user's preference"),
            (SampleKind::I2Approx, "should be approximately"),
            (SampleKind::I2Le, "less than or equal to"),
            (SampleKind::I2Ge, "more than or equal to"),
        ] {
            let mut found = false;
            for (idx, user) in split.users.iter().enumerate().take(20) {
                let mut rng = ChaCha20Rng::seed_from_u64(idx as u64);
                if let Ok(sample) = gen_sample(
                    kind,
                    user,
                    &split,
                    &catalog,
                    &teacher,
                    &set,
                    &mut rng,
                    (5, 10),
                    SamplePlacement::Train,
                ) {
                    assert!(
                        sample.prompt.contains(needle),
                        "{} prompt missing {needle:?}: {}",
                        kind.label(),
                        sample.prompt
                    );
                    assert!(sample.prompt.starts_with("Instruction: You are an expert recommender engine."));
                    found = true;
                    break;
                }
            }
            assert!(found, "no feasible sample for {}", kind.label());
        }
    }

    #[test]
    fn negative_prompt_uses_one_of_the_six_phrasings() {
        let (catalog, split, teacher) = fixture();
        let set = TemplateSet::default();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        for user in split.users.iter().take(20) {
            if let Ok(sample) = gen_sample(
                SampleKind::I1Neg,
                user,
                &split,
                &catalog,
                &teacher,
                &set,
                &mut rng,
                (5, 10),
                SamplePlacement::Train,
            ) {
                let cat = catalog.category_name(sample.intention.target_category().unwrap());
                let hit = templates::NEGATIVE_PHRASES.iter().any(|p| {
                    let rendered = p.replace("{target_category}", cat);
                    sample.prompt.contains(&rendered)
                });
                assert!(hit, "prompt lacks a negative phrasing: {}", sample.prompt);
                return;
            }
        }
        panic!("no feasible I1_neg sample");
    }

    #[test]
    fn build_is_deterministic_and_honors_quotas() {
        let (catalog, split, teacher) = fixture();
        let set = TemplateSet::default();
        let quotas = DatasetQuota { i0: 8, i1_pos: 4, i1_neg: 4, i2_le: 3, i2_ge: 3, i2_approx: 3, i3: 5, distractor: 2 };
        let (a, stats_a) =
            build_training_set(&catalog, &split, &teacher, &quotas, &set, 99, (1, 10)).unwrap();
        let (b, _) =
            build_training_set(&catalog, &split, &teacher, &quotas, &set, 99, (1, 10)).unwrap();
        assert_eq!(a, b);
        assert_eq!(stats_a.generated + stats_a.skipped, quotas.total());

        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("d1.jsonl");
        let p2 = dir.path().join("d2.jsonl");
        write_jsonl(&p1, &a).unwrap();
        write_jsonl(&p2, &b).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let back = read_jsonl(&p1).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn zero_quotas_give_empty_dataset() {
        let (catalog, split, teacher) = fixture();
        let set = TemplateSet::default();
        let (samples, stats) = build_training_set(
            &catalog,
            &split,
            &teacher,
            &DatasetQuota::default(),
            &set,
            1,
            (1, 10),
        )
        .unwrap();
        assert!(samples.is_empty());
        assert_eq!(stats.generated, 0);
    }

    #[test]
    fn even_quota_split_is_exact() {
        let (catalog, split, teacher) = fixture();
        let set = TemplateSet::default();
        let q = 6;
        let quotas = DatasetQuota { i1_pos: q, i1_neg: q, ..Default::default() };
        let (samples, stats) =
            build_training_set(&catalog, &split, &teacher, &quotas, &set, 3, (1, 10)).unwrap();
        assert_eq!(stats.skipped, 0, "fixture should be feasible");
        let pos = samples
            .iter()
            .filter(|s| matches!(s.intention, Intention::CategoryInclude(_)))
            .count();
        let neg = samples
            .iter()
            .filter(|s| matches!(s.intention, Intention::CategoryExclude(_)))
            .count();
        assert_eq!(pos, q);
        assert_eq!(neg, q);
    }

    fn tiny_catalog(defs: &[(&str, &[&str])]) -> Catalog {
        let owned: Vec<(String, Vec<&str>)> =
            defs.iter().map(|(t, cs)| (t.to_string(), cs.to_vec())).collect();
        tiny_catalog_owned(&owned)
    }

    fn tiny_catalog_owned(defs: &[(String, Vec<&str>)]) -> Catalog {
        let mut categories: Vec<String> = Vec::new();
        let mut items = Vec::new();
        for (i, (title, cats)) in defs.iter().enumerate() {
            let mut ids = Vec::new();
            for c in cats {
                let id = categories.iter().position(|x| x == c).unwrap_or_else(|| {
                    categories.push(c.to_string());
                    categories.len() - 1
                });
                ids.push(CategoryId(id as u32));
            }
            ids.sort_unstable();
            ids.dedup();
            items.push(crate::catalog::Item {
                id: ItemId(i as u32),
                title: title.clone(),
                categories: ids,
            });
        }
        Catalog { items, categories, users: vec![], user_names: vec![] }
    }
}
