//! Bag-level metrics, TIR grouping and bootstrap intervals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_BOOTSTRAP: usize = 1000;
pub const DEFAULT_LEVEL: f64 = 0.95;
const MAX_REDRAWS: usize = 1000;

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Invalid(format!("score {i} is NaN")));
    }
    if let Some((index, &value)) = labels.iter().enumerate().find(|(_, &l)| l > 1) {
        return Err(Error::InvalidLabel { index, value });
    }
    Ok(())
}

/// Area under the ROC curve as the Mann–Whitney statistic, ties counted 1/2.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Twice the concordance count, so ties stay integral.
    let mut twice: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice += 2 * pos * neg_below + pos * neg;
        neg_below += neg;
        i = j;
    }
    Ok(twice as f64 / (2 * n_pos * n_neg) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn count(scores: &[f64], labels: &[u8], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&s, &l) in scores.iter().zip(labels) {
            match (s >= threshold, l == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Threshold metrics. A metric whose denominator is zero is reported as 0
/// with its `degenerate` flag set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdMetrics {
    pub confusion: Confusion,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_degenerate: bool,
    pub recall_degenerate: bool,
    pub f1_degenerate: bool,
}

fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn threshold_metrics(
    scores: &[f64],
    labels: &[u8],
    threshold: f64,
) -> Result<ThresholdMetrics> {
    check_inputs(scores, labels)?;
    if scores.is_empty() {
        return Err(Error::Invalid("no scores to evaluate".into()));
    }
    let c = Confusion::count(scores, labels, threshold);
    let (accuracy, _) = ratio(c.tp + c.tn, c.total());
    let (precision, precision_degenerate) = ratio(c.tp, c.tp + c.fp);
    let (recall, recall_degenerate) = ratio(c.tp, c.tp + c.fn_);
    let (f1, f1_degenerate) = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_);
    Ok(ThresholdMetrics {
        confusion: c,
        accuracy,
        precision,
        recall,
        f1,
        precision_degenerate,
        recall_degenerate,
        f1_degenerate,
    })
}

/// Fraction of positive instances in a bag.
pub fn tir(instance_labels: &[u8]) -> Result<f64> {
    if instance_labels.is_empty() {
        return Err(Error::EmptyBag);
    }
    let ones = instance_labels.iter().filter(|&&l| l == 1).count();
    Ok(ones as f64 / instance_labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TirBucket {
    Below0p5,
    From0p5To1,
    From1To10,
    AtLeast10,
}

impl TirBucket {
    pub const ALL: [TirBucket; 4] = [
        TirBucket::Below0p5,
        TirBucket::From0p5To1,
        TirBucket::From1To10,
        TirBucket::AtLeast10,
    ];

    /// `[low, high)`; the last bucket also includes 1.
    pub fn bounds(self) -> (f64, f64) {
        match self {
            TirBucket::Below0p5 => (0.0, 0.005),
            TirBucket::From0p5To1 => (0.005, 0.01),
            TirBucket::From1To10 => (0.01, 0.10),
            TirBucket::AtLeast10 => (0.10, 1.0),
        }
    }

    pub fn of(tir: f64) -> Self {
        if tir < 0.005 {
            TirBucket::Below0p5
        } else if tir < 0.01 {
            TirBucket::From0p5To1
        } else if tir < 0.10 {
            TirBucket::From1To10
        } else {
            TirBucket::AtLeast10
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            TirBucket::Below0p5 => "<0.5%",
            TirBucket::From0p5To1 => "0.5-1%",
            TirBucket::From1To10 => "1-10%",
            TirBucket::AtLeast10 => ">=10%",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TirGroup {
    pub bucket: TirBucket,
    pub n_bags: usize,
    pub n_detected: usize,
    /// `None` for a group without bags.
    pub recall: Option<f64>,
}

/// Recall of positive bags grouped by their TIR. `instance_labels[i]` may be
/// `None` only for negative bags.
pub fn grouped_recall(
    scores: &[f64],
    bag_labels: &[u8],
    instance_labels: &[Option<&[u8]>],
    threshold: f64,
) -> Result<Vec<TirGroup>> {
    check_inputs(scores, bag_labels)?;
    if instance_labels.len() != bag_labels.len() {
        return Err(Error::Shape(format!(
            "{} bag labels but {} instance label sets",
            bag_labels.len(),
            instance_labels.len()
        )));
    }
    let mut groups: Vec<TirGroup> = TirBucket::ALL
        .iter()
        .map(|&bucket| TirGroup {
            bucket,
            n_bags: 0,
            n_detected: 0,
            recall: None,
        })
        .collect();
    for i in 0..scores.len() {
        if bag_labels[i] != 1 {
            continue;
        }
        let labels = instance_labels[i]
            .ok_or_else(|| Error::Invalid(format!("positive bag {i} has no instance labels")))?;
        let g = &mut groups[TirBucket::of(tir(labels)?) as usize];
        g.n_bags += 1;
        if scores[i] >= threshold {
            g.n_detected += 1;
        }
    }
    for g in &mut groups {
        if g.n_bags > 0 {
            g.recall = Some(g.n_detected as f64 / g.n_bags as f64);
        }
    }
    Ok(groups)
}

/// CSV `group,low,high,n_bags,recall`; empty groups leave `recall` blank.
pub fn group_csv(groups: &[TirGroup]) -> String {
    let mut out = String::from("group,low,high,n_bags,recall\n");
    for g in groups {
        let (low, high) = g.bucket.bounds();
        let recall = g.recall.map(|r| r.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            g.bucket.label(),
            low,
            high,
            g.n_bags,
            recall
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Auc,
    Accuracy,
    Precision,
    Recall,
    F1,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::Auc,
        Metric::Accuracy,
        Metric::Precision,
        Metric::Recall,
        Metric::F1,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Auc => "auc",
            Metric::Accuracy => "accuracy",
            Metric::Precision => "precision",
            Metric::Recall => "recall",
            Metric::F1 => "f1",
        }
    }

    pub fn compute(self, scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
        if self == Metric::Auc {
            return roc_auc(scores, labels);
        }
        let m = threshold_metrics(scores, labels, threshold)?;
        Ok(match self {
            Metric::Accuracy => m.accuracy,
            Metric::Precision => m.precision,
            Metric::Recall => m.recall,
            Metric::F1 => m.f1,
            Metric::Auc => unreachable!(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapConfig {
    pub n: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            n: DEFAULT_BOOTSTRAP,
            level: DEFAULT_LEVEL,
            seed: 0,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("bootstrap count must be at least 1".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config(format!(
                "confidence level must be in (0, 1), got {}",
                self.level
            )));
        }
        Ok(())
    }
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

/// Percentile bootstrap over bags. Resample `i` draws from its own ChaCha
/// stream, so the interval does not depend on thread scheduling. Resamples
/// that lose a class are redrawn.
pub fn bootstrap_ci(
    scores: &[f64],
    labels: &[u8],
    metric: Metric,
    threshold: f64,
    cfg: &BootstrapConfig,
) -> Result<(f64, f64)> {
    cfg.validate()?;
    metric.compute(scores, labels, threshold)?;
    let n = scores.len();
    let values = (0..cfg.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            let mut s = vec![0.0; n];
            let mut l = vec![0u8; n];
            for _ in 0..MAX_REDRAWS {
                for k in 0..n {
                    let j = rng.random_range(0..n);
                    s[k] = scores[j];
                    l[k] = labels[j];
                }
                if l.contains(&0) && l.contains(&1) {
                    return metric.compute(&s, &l, threshold);
                }
            }
            Err(Error::SingleClass)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut sorted = values;
    sorted.sort_by(f64::total_cmp);
    let alpha = (1.0 - cfg.level) / 2.0;
    Ok((quantile(&sorted, alpha), quantile(&sorted, 1.0 - alpha)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricValue {
    pub value: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub auc: MetricValue,
    pub accuracy: MetricValue,
    pub precision: MetricValue,
    pub recall: MetricValue,
    pub f1: MetricValue,
    pub threshold: f64,
    pub n_bootstrap: usize,
    pub confusion: Confusion,
}

impl MetricsReport {
    pub fn metrics(&self) -> [(Metric, &MetricValue); 5] {
        [
            (Metric::Auc, &self.auc),
            (Metric::Accuracy, &self.accuracy),
            (Metric::Precision, &self.precision),
            (Metric::Recall, &self.recall),
            (Metric::F1, &self.f1),
        ]
    }

    /// CSV `metric,value,ci_lower,ci_upper`: five metrics, then the threshold.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value,ci_lower,ci_upper\n");
        for (m, v) in self.metrics() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                m.name(),
                v.value,
                v.ci_lower,
                v.ci_upper
            ));
        }
        let t = self.threshold;
        out.push_str(&format!("threshold,{t},{t},{t}\n"));
        out
    }
}

/// Point metrics with bootstrap intervals. Intervals are widened to contain
/// the point estimate when the resample distribution does not.
pub fn evaluate(
    scores: &[f64],
    labels: &[u8],
    threshold: f64,
    boot: &BootstrapConfig,
) -> Result<MetricsReport> {
    let auc = roc_auc(scores, labels)?;
    let tm = threshold_metrics(scores, labels, threshold)?;
    let value = |metric: Metric, point: f64, degenerate: bool| -> Result<MetricValue> {
        let (lo, hi) = bootstrap_ci(scores, labels, metric, threshold, boot)?;
        Ok(MetricValue {
            value: point,
            ci_lower: lo.min(point),
            ci_upper: hi.max(point),
            degenerate,
        })
    };
    Ok(MetricsReport {
        auc: value(Metric::Auc, auc, false)?,
        accuracy: value(Metric::Accuracy, tm.accuracy, false)?,
        precision: value(Metric::Precision, tm.precision, tm.precision_degenerate)?,
        recall: value(Metric::Recall, tm.recall, tm.recall_degenerate)?,
        f1: value(Metric::F1, tm.f1, tm.f1_degenerate)?,
        threshold,
        n_bootstrap: boot.n,
        confusion: tm.confusion,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmplificationRow {
    pub bucket: TirBucket,
    pub n_bags: usize,
    pub mean_original_tir: f64,
    pub mean_salient_tir: f64,
    pub ratio: f64,
}

/// Mean TIR per group before and after instance selection. Pairs are
/// (original instance labels, retained instance labels) for positive bags;
/// groups follow the original TIR and empty groups are omitted.
pub fn tir_amplification_report(pairs: &[(&[u8], &[u8])]) -> Result<Vec<AmplificationRow>> {
    let mut acc = [(0usize, 0.0f64, 0.0f64); 4];
    for (orig, kept) in pairs {
        let before = tir(orig)?;
        let after = tir(kept)?;
        let slot = &mut acc[TirBucket::of(before) as usize];
        slot.0 += 1;
        slot.1 += before;
        slot.2 += after;
    }
    Ok(TirBucket::ALL
        .iter()
        .zip(acc)
        .filter(|(_, (n, _, _))| *n > 0)
        .map(|(&bucket, (n, before, after))| {
            let mean_original_tir = before / n as f64;
            let mean_salient_tir = after / n as f64;
            AmplificationRow {
                bucket,
                n_bags: n,
                mean_original_tir,
                mean_salient_tir,
                ratio: mean_salient_tir / mean_original_tir,
            }
        })
        .collect())
}

pub fn amplification_csv(rows: &[AmplificationRow]) -> String {
    let mut out = String::from("group,n_bags,mean_original_tir,mean_salient_tir,ratio\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.bucket.label(),
            r.n_bags,
            r.mean_original_tir,
            r.mean_salient_tir,
            r.ratio
        ));
    }
    out
}
