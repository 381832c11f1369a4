//! Evaluation: confusion matrices, accuracy/precision/recall/F1 in both
//! binary and support-weighted form, ROC/AUC, and the two scenario splits
//! (known attacks everywhere vs. attack families held out of training).
//!
//! Weighted averaging is the default for comparisons against reported
//! results: support-weighted recall equals accuracy identically, which is
//! the only averaging consistent with published tables where accuracy and
//! recall coincide row by row.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::AttackCategory;
use crate::sentence::CombinedSentence;

/// Binary confusion counts; the attack class (label 1) is positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub true_pos: usize,
    pub true_neg: usize,
    pub false_pos: usize,
    pub false_neg: usize,
}

impl ConfusionMatrix {
    pub fn new(true_pos: usize, true_neg: usize, false_pos: usize, false_neg: usize) -> Self {
        Self {
            true_pos,
            true_neg,
            false_pos,
            false_neg,
        }
    }

    pub fn total(&self) -> usize {
        self.true_pos + self.true_neg + self.false_pos + self.false_neg
    }
}

/// Counts prediction outcomes against ground truth.
pub fn confusion_matrix(predicted: &[u8], actual: &[u8]) -> Result<ConfusionMatrix> {
    if predicted.len() != actual.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} labels",
            predicted.len(),
            actual.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::EmptyInput("empty prediction set".into()));
    }
    let mut cm = ConfusionMatrix::new(0, 0, 0, 0);
    for (&p, &a) in predicted.iter().zip(actual) {
        match (p != 0, a != 0) {
            (true, true) => cm.true_pos += 1,
            (false, false) => cm.true_neg += 1,
            (true, false) => cm.false_pos += 1,
            (false, true) => cm.false_neg += 1,
        }
    }
    Ok(cm)
}

/// Derived metrics. Division-by-zero cases yield 0 and set `zero_division`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub binary_precision: f64,
    pub binary_recall: f64,
    pub binary_f1: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub zero_division: bool,
}

fn ratio(num: usize, den: usize, flag: &mut bool) -> f64 {
    if den == 0 {
        *flag = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1_of(p: f64, r: f64, flag: &mut bool) -> f64 {
    if p + r == 0.0 {
        *flag = true;
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Accuracy, binary precision/recall/F1 on the attack class, and
/// support-weighted averages of the per-class scores.
pub fn classification_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyInput("empty confusion matrix".into()));
    }
    let mut zero_division = false;
    let flag = &mut zero_division;

    let accuracy = (cm.true_pos + cm.true_neg) as f64 / total as f64;

    // Attack class (positive).
    let p1 = ratio(cm.true_pos, cm.true_pos + cm.false_pos, flag);
    let r1 = ratio(cm.true_pos, cm.true_pos + cm.false_neg, flag);
    let f1 = f1_of(p1, r1, flag);

    // Normal class.
    let p0 = ratio(cm.true_neg, cm.true_neg + cm.false_neg, flag);
    let r0 = ratio(cm.true_neg, cm.true_neg + cm.false_pos, flag);
    let f0 = f1_of(p0, r0, flag);

    // Support weights; zero-support classes contribute nothing.
    let s1 = (cm.true_pos + cm.false_neg) as f64;
    let s0 = (cm.true_neg + cm.false_pos) as f64;
    let weighted = |x1: f64, x0: f64| (s1 * x1 + s0 * x0) / (s1 + s0);

    Ok(MetricsReport {
        accuracy,
        binary_precision: p1,
        binary_recall: r1,
        binary_f1: f1,
        weighted_precision: weighted(p1, p0),
        weighted_recall: weighted(r1, r0),
        weighted_f1: weighted(f1, f0),
        zero_division,
    })
}

/// One operating point of a ROC curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub false_positive_rate: f64,
    pub true_positive_rate: f64,
}

/// ROC curve with trapezoidal AUC. The AUC equals the probability that a
/// random positive outscores a random negative, ties counted one half.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// Sweeps a threshold over every distinct score, highest first.
pub fn roc_curve_and_auc(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&l| l != 0).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        false_positive_rate: 0.0,
        true_positive_rate: 0.0,
    }];
    let mut tp = 0usize;
    let mut fp = 0usize;
    // Trapezoid area accumulated in integers: sum of dFP * (TP before + TP
    // after) per threshold group, divided once by 2 P N. This makes the
    // trapezoid rule agree exactly with concordant-pair counting.
    let mut area2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let score = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == score {
            if labels[order[i]] != 0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += ((fp - fp0) as u128) * ((tp0 + tp) as u128);
        points.push(RocPoint {
            threshold: score,
            false_positive_rate: fp as f64 / negatives as f64,
            true_positive_rate: tp as f64 / positives as f64,
        });
    }
    let auc = area2 as f64 / (2.0 * positives as f64 * negatives as f64);
    Ok(RocCurve { points, auc })
}

/// Writes `threshold,fpr,tpr` rows with a final `auc,<value>` footer.
pub fn write_roc_csv(curve: &RocCurve, path: &Path) -> Result<()> {
    let mut out = String::from("threshold,fpr,tpr\n");
    for p in &curve.points {
        let _ = writeln!(
            out,
            "{},{},{}",
            p.threshold, p.false_positive_rate, p.true_positive_rate
        );
    }
    let _ = writeln!(out, "auc,{}", curve.auc);
    fs::write(path, out).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Counts per category in each of the three splits.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CompositionReport {
    /// category -> [train, validation, test] sentence counts.
    pub counts: BTreeMap<AttackCategory, [usize; 3]>,
}

impl CompositionReport {
    fn add(&mut self, category: AttackCategory, split: usize) {
        self.counts.entry(category).or_default()[split] += 1;
    }

    pub fn totals(&self) -> [usize; 3] {
        let mut t = [0; 3];
        for v in self.counts.values() {
            for i in 0..3 {
                t[i] += v[i];
            }
        }
        t
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("category,train,validation,test\n");
        for (cat, v) in &self.counts {
            let _ = writeln!(out, "{},{},{},{}", cat.name(), v[0], v[1], v[2]);
        }
        let t = self.totals();
        let _ = writeln!(out, "total,{},{},{}", t[0], t[1], t[2]);
        out
    }
}

/// Train/validation/test partition of a combined-sentence corpus.
#[derive(Debug, Clone)]
pub struct ScenarioSplit {
    pub scenario: u8,
    pub train: Vec<CombinedSentence>,
    pub validation: Vec<CombinedSentence>,
    pub test: Vec<CombinedSentence>,
    pub composition: CompositionReport,
}

/// Scenario-1 split fractions, derived from the published distribution
/// (58,461 / 10,317 / 17,195 of 85,973).
pub const SCENARIO1_TRAIN_FRACTION: f64 = 0.68;
pub const SCENARIO1_VAL_FRACTION: f64 = 0.12;

/// Scenario-2 fractions applied within each trainable category
/// (14,626 / 1,625 / 855 of 17,106 normal sentences; the attack-side counts
/// are consistent with the same per-category ratios).
pub const SCENARIO2_TRAIN_FRACTION: f64 = 14626.0 / 17106.0;
pub const SCENARIO2_VAL_FRACTION: f64 = 1625.0 / 17106.0;

/// Families allowed into scenario-2 training and validation.
pub const SCENARIO2_TRAIN_FAMILIES: [AttackCategory; 3] = [
    AttackCategory::Normal,
    AttackCategory::Ddos,
    AttackCategory::Dos,
];

fn scenario2_trainable(sentence: &CombinedSentence) -> bool {
    sentence
        .group_categories
        .iter()
        .all(|c| SCENARIO2_TRAIN_FAMILIES.contains(c))
}

/// Largest-remainder allocation of `target` slots across categories with the
/// given exact shares, capped by availability.
fn allocate(
    available: &BTreeMap<AttackCategory, usize>,
    shares: &BTreeMap<AttackCategory, f64>,
    target: usize,
) -> BTreeMap<AttackCategory, usize> {
    let mut alloc: BTreeMap<AttackCategory, usize> = BTreeMap::new();
    let mut remainders: Vec<(AttackCategory, f64)> = Vec::new();
    let mut given = 0usize;
    for (&cat, &avail) in available {
        let share = shares.get(&cat).copied().unwrap_or(0.0);
        let base = (share.floor() as usize).min(avail);
        alloc.insert(cat, base);
        given += base;
        remainders.push((cat, share - share.floor()));
    }
    remainders.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut left = target.saturating_sub(given);
    while left > 0 {
        let mut progressed = false;
        for (cat, _) in &remainders {
            if left == 0 {
                break;
            }
            let a = alloc.get_mut(cat).expect("initialized above");
            if *a < available[cat] {
                *a += 1;
                left -= 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    alloc
}

/// Builds the split for a scenario.
///
/// Scenario 1 stratifies every category at 0.68 / 0.12 / 0.20. Scenario 2
/// draws train and validation only from sentences whose members are all
/// normal, DDoS, or DoS, at the published per-category ratios; everything
/// else (all held-out-family sentences plus held-out normal/DDoS/DoS) forms
/// the test set. Membership is seeded and deterministic.
pub fn build_scenario_split(
    sentences: &[CombinedSentence],
    scenario: u8,
    seed: u64,
) -> Result<ScenarioSplit> {
    if sentences.is_empty() {
        return Err(Error::EmptyInput("no sentences to split".into()));
    }
    match scenario {
        1 => build_scenario1(sentences, seed),
        2 => build_scenario2(sentences, seed),
        other => Err(Error::InvalidArgument(format!(
            "scenario must be 1 or 2, got {other}"
        ))),
    }
}

fn by_category(indices: impl Iterator<Item = usize>, sentences: &[CombinedSentence]) -> BTreeMap<AttackCategory, Vec<usize>> {
    let mut map: BTreeMap<AttackCategory, Vec<usize>> = BTreeMap::new();
    for i in indices {
        map.entry(sentences[i].category()).or_default().push(i);
    }
    map
}

fn build_scenario1(sentences: &[CombinedSentence], seed: u64) -> Result<ScenarioSplit> {
    let pools = by_category(0..sentences.len(), sentences);
    if !pools.contains_key(&AttackCategory::Normal) || pools.len() < 2 {
        return Err(Error::InvalidArgument(
            "scenario 1 requires normal traffic and at least one attack family".into(),
        ));
    }
    let n = sentences.len() as f64;
    let available: BTreeMap<AttackCategory, usize> =
        pools.iter().map(|(&c, v)| (c, v.len())).collect();

    let train_target = (n * SCENARIO1_TRAIN_FRACTION).round() as usize;
    let val_target = (n * SCENARIO1_VAL_FRACTION).round() as usize;
    let train_shares: BTreeMap<AttackCategory, f64> = available
        .iter()
        .map(|(&c, &a)| (c, a as f64 * SCENARIO1_TRAIN_FRACTION))
        .collect();
    let train_alloc = allocate(&available, &train_shares, train_target);

    let remaining: BTreeMap<AttackCategory, usize> = available
        .iter()
        .map(|(&c, &a)| (c, a - train_alloc[&c]))
        .collect();
    let val_shares: BTreeMap<AttackCategory, f64> = available
        .iter()
        .map(|(&c, &a)| (c, a as f64 * SCENARIO1_VAL_FRACTION))
        .collect();
    let val_alloc = allocate(&remaining, &val_shares, val_target);

    assemble(sentences, 1, pools, &train_alloc, &val_alloc, Vec::new(), seed)
}

fn build_scenario2(sentences: &[CombinedSentence], seed: u64) -> Result<ScenarioSplit> {
    let (eligible, held_out): (Vec<usize>, Vec<usize>) =
        (0..sentences.len()).partition(|&i| scenario2_trainable(&sentences[i]));
    let pools = by_category(eligible.into_iter(), sentences);
    for required in SCENARIO2_TRAIN_FAMILIES {
        if !pools.contains_key(&required) {
            return Err(Error::InvalidArgument(format!(
                "scenario 2 requires {} sentences in the trainable pool",
                required.name()
            )));
        }
    }

    // Per-category largest remainder across the three parts.
    let mut train_alloc = BTreeMap::new();
    let mut val_alloc = BTreeMap::new();
    for (&cat, pool) in &pools {
        let n = pool.len() as f64;
        let shares = [
            n * SCENARIO2_TRAIN_FRACTION,
            n * SCENARIO2_VAL_FRACTION,
            n * (1.0 - SCENARIO2_TRAIN_FRACTION - SCENARIO2_VAL_FRACTION),
        ];
        let mut parts = [0usize; 3];
        let mut rem: Vec<(usize, f64)> = Vec::new();
        let mut used = 0;
        for (i, s) in shares.iter().enumerate() {
            parts[i] = s.floor() as usize;
            used += parts[i];
            rem.push((i, s - s.floor()));
        }
        rem.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for (i, _) in rem.into_iter().take(pool.len() - used) {
            parts[i] += 1;
        }
        train_alloc.insert(cat, parts[0]);
        val_alloc.insert(cat, parts[1]);
    }

    assemble(sentences, 2, pools, &train_alloc, &val_alloc, held_out, seed)
}

fn assemble(
    sentences: &[CombinedSentence],
    scenario: u8,
    pools: BTreeMap<AttackCategory, Vec<usize>>,
    train_alloc: &BTreeMap<AttackCategory, usize>,
    val_alloc: &BTreeMap<AttackCategory, usize>,
    forced_test: Vec<usize>,
    seed: u64,
) -> Result<ScenarioSplit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = ScenarioSplit {
        scenario,
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        composition: CompositionReport::default(),
    };
    for (cat, mut pool) in pools {
        pool.shuffle(&mut rng);
        let n_train = train_alloc.get(&cat).copied().unwrap_or(0);
        let n_val = val_alloc.get(&cat).copied().unwrap_or(0);
        for (slot, &idx) in pool.iter().enumerate() {
            let bucket = if slot < n_train {
                0
            } else if slot < n_train + n_val {
                1
            } else {
                2
            };
            split.composition.add(sentences[idx].category(), bucket);
            match bucket {
                0 => split.train.push(sentences[idx].clone()),
                1 => split.validation.push(sentences[idx].clone()),
                _ => split.test.push(sentences[idx].clone()),
            }
        }
    }
    for idx in forced_test {
        split.composition.add(sentences[idx].category(), 2);
        split.test.push(sentences[idx].clone());
    }
    Ok(split)
}

/// Human-readable matrix + metrics block.
pub fn metrics_text(cm: &ConfusionMatrix, report: &MetricsReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "confusion matrix (positive = attack)");
    let _ = writeln!(out, "  TP = {:<8} FN = {}", cm.true_pos, cm.false_neg);
    let _ = writeln!(out, "  FP = {:<8} TN = {}", cm.false_pos, cm.true_neg);
    let _ = writeln!(out, "accuracy           = {:.6}", report.accuracy);
    let _ = writeln!(out, "binary precision   = {:.6}", report.binary_precision);
    let _ = writeln!(out, "binary recall      = {:.6}", report.binary_recall);
    let _ = writeln!(out, "binary f1          = {:.6}", report.binary_f1);
    let _ = writeln!(out, "weighted precision = {:.6}", report.weighted_precision);
    let _ = writeln!(out, "weighted recall    = {:.6}", report.weighted_recall);
    let _ = writeln!(out, "weighted f1        = {:.6}", report.weighted_f1);
    if report.zero_division {
        let _ = writeln!(out, "note: zero-division cases reported as 0");
    }
    out
}

/// `metric,value` rows covering the matrix and every derived metric.
pub fn write_metrics_csv(cm: &ConfusionMatrix, report: &MetricsReport, path: &Path) -> Result<()> {
    let mut out = String::from("metric,value\n");
    let _ = writeln!(out, "tp,{}", cm.true_pos);
    let _ = writeln!(out, "tn,{}", cm.true_neg);
    let _ = writeln!(out, "fp,{}", cm.false_pos);
    let _ = writeln!(out, "fn,{}", cm.false_neg);
    let _ = writeln!(out, "accuracy,{}", report.accuracy);
    let _ = writeln!(out, "binary_precision,{}", report.binary_precision);
    let _ = writeln!(out, "binary_recall,{}", report.binary_recall);
    let _ = writeln!(out, "binary_f1,{}", report.binary_f1);
    let _ = writeln!(out, "weighted_precision,{}", report.weighted_precision);
    let _ = writeln!(out, "weighted_recall,{}", report.weighted_recall);
    let _ = writeln!(out, "weighted_f1,{}", report.weighted_f1);
    fs::write(path, out).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
