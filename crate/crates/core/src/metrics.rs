//! Evaluation measures and the evaluation harness.
//!
//! HR@K / NDCG@K for accuracy, TCP@K and CPA for controllability, the four
//! formatting metrics, and the combinatorial-control variant TC1not2P@K.
//! Metrics count only the first K emitted positions; positions holding
//! illegal or missing items contribute zero.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, CategoryId, ItemId, SplitDataset};
use crate::instructions::{
    make_intention_for_eval, render_prompt, templates::TemplateSet, DatasetError,
    InstructionSample, Intention, SampleKind,
};
use crate::policy::{parse_response, PolicyModel};
use crate::rewards::{IllegalReason, ItemRef, ParsedList};
use crate::teacher::{TeacherError, TeacherModel};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("CPA is defined only for proportion intentions, got {0}")]
    NotProportion(String),
    #[error("combinatorial TCP needs two distinct categories")]
    SameCategory,
    #[error("dataset error: {0}")]
    Dataset(#[from] DatasetError),
    #[error("teacher error: {0}")]
    Teacher(#[from] TeacherError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Hit ratio and NDCG at cutoff `k_cut` for a single relevant item.
/// Every parsed position counts, legal or not, so a duplicate still pushes
/// later items down.
pub fn hr_ndcg(parsed: &ParsedList, target: ItemId, k_cut: usize) -> (f64, f64) {
    for (pos, entry) in parsed.items.iter().take(k_cut).enumerate() {
        if entry.id() == Some(target) {
            let ndcg = 1.0 / ((pos + 2) as f64).log2();
            return (1.0, ndcg);
        }
    }
    (0.0, 0.0)
}

/// Target-category proportion: the fraction of the first `k_cut` positions
/// holding a legal item of the category.
pub fn tcp(parsed: &ParsedList, category: CategoryId, k_cut: usize, catalog: &Catalog) -> f64 {
    let mut hits = 0usize;
    for i in 0..parsed.len().min(k_cut) {
        if !parsed.is_legal(i) {
            continue;
        }
        if let Some(it) = parsed.items[i].id() {
            if catalog.item_in_category(it, category) {
                hits += 1;
            }
        }
    }
    hits as f64 / k_cut as f64
}

/// Legal in-category count among the first `k` positions.
pub fn count_in(parsed: &ParsedList, category: CategoryId, k: usize, catalog: &Catalog) -> usize {
    (0..parsed.len().min(k))
        .filter(|&i| {
            parsed.is_legal(i)
                && parsed.items[i]
                    .id()
                    .is_some_and(|it| catalog.item_in_category(it, category))
        })
        .count()
}

/// Binary proportion compliance given the in-category count. All `k * m`
/// comparisons are real-valued.
pub fn cpa_from_count(intention: &Intention, count_in: usize, k: usize) -> Result<bool, MetricsError> {
    let km = k as f64 * intention.proportion().ok_or_else(|| {
        MetricsError::NotProportion(intention.kind_label().to_string())
    })?;
    let c = count_in as f64;
    let ok = match intention {
        Intention::ProportionLe { .. } => c <= km,
        Intention::ProportionGe { .. } => c >= km,
        Intention::ProportionApprox { .. } => (c - km).abs() <= 1.0,
        other => return Err(MetricsError::NotProportion(other.kind_label().to_string())),
    };
    Ok(ok)
}

/// Category-proportion accuracy of a parsed list (0 or 1).
pub fn cpa(
    parsed: &ParsedList,
    intention: &Intention,
    k: usize,
    catalog: &Catalog,
) -> Result<f64, MetricsError> {
    let category = intention
        .target_category()
        .ok_or_else(|| MetricsError::NotProportion(intention.kind_label().to_string()))?;
    let cin = count_in(parsed, category, k, catalog);
    Ok(if cpa_from_count(intention, cin, k)? { 1.0 } else { 0.0 })
}

/// Fraction of the first `k_cut` positions holding a legal item in `c1` but
/// not in `c2`.
pub fn combinatorial_tcp(
    parsed: &ParsedList,
    c1: CategoryId,
    c2: CategoryId,
    k_cut: usize,
    catalog: &Catalog,
) -> Result<f64, MetricsError> {
    if c1 == c2 {
        return Err(MetricsError::SameCategory);
    }
    let mut hits = 0usize;
    for i in 0..parsed.len().min(k_cut) {
        if !parsed.is_legal(i) {
            continue;
        }
        if let Some(it) = parsed.items[i].id() {
            if catalog.item_in_category(it, c1) && !catalog.item_in_category(it, c2) {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / k_cut as f64)
}

/// The four formatting measures, averaged over responses. CorrectCount is
/// the fraction of responses emitting exactly `k` items; the other three are
/// per-slot rates over each response's emitted slots.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FormattingMetrics {
    pub correct_count: f64,
    pub repeat_item: f64,
    pub non_exist: f64,
    pub in_history: f64,
}

pub fn formatting_metrics(responses: &[ParsedList]) -> FormattingMetrics {
    if responses.is_empty() {
        return FormattingMetrics::default();
    }
    let mut out = FormattingMetrics::default();
    for parsed in responses {
        if parsed.len() == parsed.k {
            out.correct_count += 1.0;
        }
        let slots = parsed.len();
        if slots == 0 {
            continue;
        }
        let rate = |reason: IllegalReason| {
            parsed.legality.iter().filter(|l| **l == Some(reason)).count() as f64 / slots as f64
        };
        out.repeat_item += rate(IllegalReason::Duplicate);
        out.non_exist += rate(IllegalReason::Nonexistent);
        out.in_history += rate(IllegalReason::InHistory);
    }
    let n = responses.len() as f64;
    out.correct_count /= n;
    out.repeat_item /= n;
    out.non_exist /= n;
    out.in_history /= n;
    out
}

/// Control construction for one evaluation setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlSetting {
    I0,
    I1Pos,
    I1Neg,
    I2Le,
    I2Approx,
    I2Ge,
    /// Include C1 (from the target item) while excluding C2 (negative rule).
    ComboPosNeg,
    /// C1 proportion <= 20% while excluding C2.
    ComboLeNeg,
}

impl ControlSetting {
    fn eval_kind(self) -> Option<SampleKind> {
        match self {
            ControlSetting::I0 => Some(SampleKind::I0),
            ControlSetting::I1Pos => Some(SampleKind::I1Pos),
            ControlSetting::I1Neg => Some(SampleKind::I1Neg),
            ControlSetting::I2Le => Some(SampleKind::I2Le),
            ControlSetting::I2Approx => Some(SampleKind::I2Approx),
            ControlSetting::I2Ge => Some(SampleKind::I2Ge),
            ControlSetting::ComboPosNeg | ControlSetting::ComboLeNeg => None,
        }
    }

    pub fn is_combo(self) -> bool {
        matches!(self, ControlSetting::ComboPosNeg | ControlSetting::ComboLeNeg)
    }
}

/// One evaluation setting: a control construction, the metric cutoff K, the
/// requested-length range, and how many test users to draw.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSetting {
    pub name: String,
    pub control: ControlSetting,
    pub k_cut: usize,
    pub k_range: (usize, usize),
    pub n_samples: usize,
}

impl EvalSetting {
    pub fn new(name: &str, control: ControlSetting, n_samples: usize) -> Self {
        EvalSetting { name: name.into(), control, k_cut: 10, k_range: (10, 10), n_samples }
    }

    /// The formatting probe: k beyond the training range.
    pub fn formatting(n_samples: usize) -> Self {
        EvalSetting {
            name: "formatting".into(),
            control: ControlSetting::I0,
            k_cut: 10,
            k_range: (11, 15),
            n_samples,
        }
    }

    /// The six standard control settings at K = 10, k = 10.
    pub fn standard(n_samples: usize) -> Vec<Self> {
        vec![
            EvalSetting::new("i0", ControlSetting::I0, n_samples),
            EvalSetting::new("i1_pos", ControlSetting::I1Pos, n_samples),
            EvalSetting::new("i1_neg", ControlSetting::I1Neg, n_samples),
            EvalSetting::new("i2_le20", ControlSetting::I2Le, n_samples),
            EvalSetting::new("i2_approx30", ControlSetting::I2Approx, n_samples),
            EvalSetting::new("i2_ge30", ControlSetting::I2Ge, n_samples),
        ]
    }

    pub fn combos(n_samples: usize) -> Vec<Self> {
        vec![
            EvalSetting::new("combo_pos_neg", ControlSetting::ComboPosNeg, n_samples),
            EvalSetting::new("combo_le_neg", ControlSetting::ComboLeNeg, n_samples),
        ]
    }
}

/// Mean metrics of the matching uncontrolled (I0) decodes, reported in
/// parentheses next to the controlled numbers.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct BaselineAggregates {
    pub hr: f64,
    pub ndcg: f64,
    pub tcp: Option<f64>,
    pub cpa: Option<f64>,
    pub tc1not2: Option<f64>,
    pub tcp_c2: Option<f64>,
}

/// Aggregated metrics for one setting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SettingReport {
    pub name: String,
    pub control: ControlSetting,
    pub n_samples: usize,
    pub k_cut: usize,
    pub hr: f64,
    pub ndcg: f64,
    pub tcp: Option<f64>,
    pub cpa: Option<f64>,
    pub tc1not2: Option<f64>,
    pub tcp_c2: Option<f64>,
    pub formatting: FormattingMetrics,
    pub baseline: Option<BaselineAggregates>,
    /// Samples whose control category required the global fallback.
    pub fallback_categories: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub settings: Vec<SettingReport>,
}

impl MetricsReport {
    pub fn setting(&self, name: &str) -> Option<&SettingReport> {
        self.settings.iter().find(|s| s.name == name)
    }
}

/// Evaluate an arbitrary responder. The responder sees a fully rendered
/// instruction (labels empty) and returns its recommendation list; legality
/// judging, metrics, and the uncontrolled baseline decode happen here.
/// Deterministic for a fixed seed.
pub fn run_eval_with<F>(
    mut respond: F,
    teacher: &TeacherModel,
    split: &SplitDataset,
    catalog: &Catalog,
    settings: &[EvalSetting],
    set: &TemplateSet,
    seed: u64,
) -> Result<MetricsReport, MetricsError>
where
    F: FnMut(&InstructionSample) -> Vec<ItemRef>,
{
    let mut out = Vec::with_capacity(settings.len());
    for (si, setting) in settings.iter().enumerate() {
        let mut hr_sum = 0.0;
        let mut ndcg_sum = 0.0;
        let mut tcp_sum = 0.0;
        let mut tcp_n = 0usize;
        let mut cpa_sum = 0.0;
        let mut cpa_n = 0usize;
        let mut tc12_sum = 0.0;
        let mut tc12_n = 0usize;
        let mut tcp_c2_sum = 0.0;
        let mut tcp_c2_n = 0usize;
        let mut fallbacks = 0usize;
        let mut parsed_lists = Vec::with_capacity(setting.n_samples);
        let mut base = BaselineAggregates::default();
        let mut base_tcp_sum = 0.0;
        let mut base_cpa_sum = 0.0;
        let mut base_tc12_sum = 0.0;
        let mut base_tcp_c2_sum = 0.0;

        let mut evaluated = 0usize;
        let mut attempt = 0u64;
        while evaluated < setting.n_samples && !split.users.is_empty() {
            let mut rng = crate::stream_rng(seed, 0xE0 + si as u64, attempt);
            attempt += 1;
            if attempt > 20 * setting.n_samples as u64 {
                break;
            }
            let user = &split.users[rng.gen_range(0..split.users.len())];
            let history = split.test_history(user);
            let target = user.test;
            if history.contains(&target) {
                continue;
            }
            let preds = teacher.predict_full_ranking(&history)?;
            let k = rng.gen_range(setting.k_range.0..=setting.k_range.1);
            let k_cut = setting.k_cut.min(k);

            let (intention, fallback) = match setting.control {
                ControlSetting::ComboPosNeg | ControlSetting::ComboLeNeg => {
                    let c1 = catalog.item(target).map_err(DatasetError::from)?.primary_category();
                    let (neg, fb) = match make_intention_for_eval(
                        SampleKind::I1Neg,
                        target,
                        &preds,
                        catalog,
                    ) {
                        Ok((Intention::CategoryExclude(c2), fb)) => (c2, fb),
                        Ok(_) => unreachable!(),
                        Err(DatasetError::NoEligibleCategory) => continue,
                        Err(e) => return Err(e.into()),
                    };
                    let first = match setting.control {
                        ControlSetting::ComboPosNeg => Intention::CategoryInclude(c1),
                        _ => Intention::ProportionLe { category: c1, m: 0.2 },
                    };
                    (
                        Intention::Combo(Box::new(first), Box::new(Intention::CategoryExclude(neg))),
                        fb,
                    )
                }
                other => {
                    let kind = other.eval_kind().expect("non-combo setting");
                    match make_intention_for_eval(kind, target, &preds, catalog) {
                        Ok(v) => v,
                        Err(DatasetError::NoEligibleCategory) => continue,
                        Err(e) => return Err(e.into()),
                    }
                }
            };
            if fallback {
                fallbacks += 1;
            }

            let prompt = render_prompt(&intention, &history, k, catalog, set, &mut rng)
                .map_err(MetricsError::Dataset)?;
            let sample = InstructionSample {
                user: user.user,
                intention: intention.clone(),
                k,
                history: history.clone(),
                ground_truth: Some(target),
                labels: Vec::new(),
                prompt,
                response: String::new(),
                fallback_category: fallback,
            };

            let items = respond(&sample);
            let parsed = crate::rewards::judge_legality(items, k, &history, catalog);

            let (hr, ndcg) = hr_ndcg(&parsed, target, k_cut);
            hr_sum += hr;
            ndcg_sum += ndcg;

            match &intention {
                Intention::CategoryInclude(c) | Intention::CategoryExclude(c) => {
                    tcp_sum += tcp(&parsed, *c, k_cut, catalog);
                    tcp_n += 1;
                }
                i if i.is_proportion() => {
                    cpa_sum += cpa(&parsed, i, k, catalog)?;
                    cpa_n += 1;
                    tcp_sum += tcp(&parsed, i.target_category().unwrap(), k_cut, catalog);
                    tcp_n += 1;
                }
                Intention::Combo(first, second) => {
                    let c1 = first.target_category().unwrap();
                    let c2 = second.target_category().unwrap();
                    tc12_sum += combinatorial_tcp(&parsed, c1, c2, k_cut, catalog)?;
                    tc12_n += 1;
                    tcp_c2_sum += tcp(&parsed, c2, k_cut, catalog);
                    tcp_c2_n += 1;
                    if first.is_proportion() {
                        cpa_sum += cpa(&parsed, first, k, catalog)?;
                        cpa_n += 1;
                    }
                }
                _ => {}
            }

            // Uncontrolled counterpart: same user and k, implicit intention.
            if setting.control != ControlSetting::I0 {
                let base_prompt =
                    render_prompt(&Intention::Implicit, &history, k, catalog, set, &mut rng)
                        .map_err(MetricsError::Dataset)?;
                let base_sample = InstructionSample {
                    intention: Intention::Implicit,
                    prompt: base_prompt,
                    ..sample.clone()
                };
                let base_items = respond(&base_sample);
                let base_parsed = crate::rewards::judge_legality(base_items, k, &history, catalog);
                let (bhr, bndcg) = hr_ndcg(&base_parsed, target, k_cut);
                base.hr += bhr;
                base.ndcg += bndcg;
                match &intention {
                    Intention::CategoryInclude(c) | Intention::CategoryExclude(c) => {
                        base_tcp_sum += tcp(&base_parsed, *c, k_cut, catalog);
                    }
                    i if i.is_proportion() => {
                        base_cpa_sum += cpa(&base_parsed, i, k, catalog)?;
                        base_tcp_sum += tcp(&base_parsed, i.target_category().unwrap(), k_cut, catalog);
                    }
                    Intention::Combo(first, second) => {
                        let c1 = first.target_category().unwrap();
                        let c2 = second.target_category().unwrap();
                        base_tc12_sum += combinatorial_tcp(&base_parsed, c1, c2, k_cut, catalog)?;
                        base_tcp_c2_sum += tcp(&base_parsed, c2, k_cut, catalog);
                        if first.is_proportion() {
                            base_cpa_sum += cpa(&base_parsed, first, k, catalog)?;
                        }
                    }
                    _ => {}
                }
            }

            parsed_lists.push(parsed);
            evaluated += 1;
        }

        let n = evaluated.max(1) as f64;
        let baseline = if setting.control != ControlSetting::I0 && evaluated > 0 {
            Some(BaselineAggregates {
                hr: base.hr / n,
                ndcg: base.ndcg / n,
                tcp: (tcp_n > 0).then_some(base_tcp_sum / tcp_n as f64),
                cpa: (cpa_n > 0).then_some(base_cpa_sum / cpa_n as f64),
                tc1not2: (tc12_n > 0).then_some(base_tc12_sum / tc12_n as f64),
                tcp_c2: (tcp_c2_n > 0).then_some(base_tcp_c2_sum / tcp_c2_n as f64),
            })
        } else {
            None
        };
        out.push(SettingReport {
            name: setting.name.clone(),
            control: setting.control,
            n_samples: evaluated,
            k_cut: setting.k_cut,
            hr: hr_sum / n,
            ndcg: ndcg_sum / n,
            tcp: (tcp_n > 0).then_some(tcp_sum / tcp_n as f64),
            cpa: (cpa_n > 0).then_some(cpa_sum / cpa_n as f64),
            tc1not2: (tc12_n > 0).then_some(tc12_sum / tc12_n as f64),
            tcp_c2: (tcp_c2_n > 0).then_some(tcp_c2_sum / tcp_c2_n as f64),
            formatting: formatting_metrics(&parsed_lists),
            baseline,
            fallback_categories: fallbacks,
        });
    }
    Ok(MetricsReport { settings: out })
}

/// Evaluate a policy checkpoint with greedy decoding.
pub fn run_eval(
    policy: &PolicyModel,
    teacher: &TeacherModel,
    split: &SplitDataset,
    catalog: &Catalog,
    settings: &[EvalSetting],
    set: &TemplateSet,
    seed: u64,
) -> Result<MetricsReport, MetricsError> {
    run_eval_with(
        |sample| {
            let traj = policy.greedy_decode(sample);
            traj.item_refs(&policy.vocab)
        },
        teacher,
        split,
        catalog,
        settings,
        set,
        seed,
    )
}

/// Greedy decode + legality judgment for one instruction.
pub fn decode_and_parse(
    policy: &PolicyModel,
    sample: &InstructionSample,
    catalog: &Catalog,
) -> ParsedList {
    let traj = policy.greedy_decode(sample);
    parse_response(&traj, catalog, &sample.history, sample.k, &policy.vocab)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let mean = (n as f64 + 1.0) / 2.0;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for i in 0..n {
        num += (rx[i] - mean) * (ry[i] - mean);
        dx += (rx[i] - mean).powi(2);
        dy += (ry[i] - mean).powi(2);
    }
    if dx == 0.0 || dy == 0.0 {
        return 0.0;
    }
    num / (dx * dy).sqrt()
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}
