//! Ordering metrics, bootstrap intervals, the Sim–F1 control and the
//! fraction-pairwise logit analysis.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dataio::{FractionRecord, OrderedPair};
use crate::error::{Error, Result};
use crate::model::SiameseModel;

/// Model output for one pair with its metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitRecord {
    pub patient_id: String,
    pub first_fraction: u32,
    pub second_fraction: u32,
    pub interval_days: i32,
    pub interval_fractions: i32,
    pub logit: f64,
    pub label: f64,
}

/// Scores every pair with `model`, encoding each distinct record once.
/// Identical pairs (label 0.5) are skipped.
pub fn collect_logits(model: &mut SiameseModel, pairs: &[OrderedPair]) -> Result<Vec<LogitRecord>> {
    let mut cache: HashMap<*const FractionRecord, usize> = HashMap::new();
    let mut records: Vec<&Arc<FractionRecord>> = Vec::new();
    let kept: Vec<&OrderedPair> = pairs.iter().filter(|p| !p.is_identical()).collect();
    for p in &kept {
        for r in [&p.first, &p.second] {
            cache.entry(Arc::as_ptr(r)).or_insert_with(|| {
                records.push(r);
                records.len() - 1
            });
        }
    }
    let inputs = records
        .iter()
        .map(|r| model.prepare(&r.image))
        .collect::<Result<Vec<_>>>()?;
    let feats = model.encode_prepared(&inputs)?;
    Ok(kept
        .iter()
        .map(|p| {
            let a = &feats[cache[&Arc::as_ptr(&p.first)]];
            let b = &feats[cache[&Arc::as_ptr(&p.second)]];
            LogitRecord {
                patient_id: p.patient_id().to_string(),
                first_fraction: p.first.fraction_index,
                second_fraction: p.second.fraction_index,
                interval_days: p.interval_days,
                interval_fractions: p.interval_fractions,
                logit: model.logit_from_features(a, b),
                label: p.label,
            }
        })
        .collect())
}

fn check_binary(records: &[LogitRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::InsufficientData("no records".into()));
    }
    if let Some(r) = records.iter().find(|r| r.label != 0.0 && r.label != 1.0) {
        return Err(Error::Invalid(format!("label {} is not binary", r.label)));
    }
    Ok(())
}

/// Fraction of records where `logit > 0` agrees with `label == 1`. A logit
/// of exactly zero is never correct.
pub fn accuracy(records: &[LogitRecord]) -> Result<f64> {
    check_binary(records)?;
    let correct = records.iter().filter(|r| is_correct(r)).count();
    Ok(correct as f64 / records.len() as f64)
}

pub fn is_correct(r: &LogitRecord) -> bool {
    if r.label == 1.0 {
        r.logit > 0.0
    } else {
        r.logit < 0.0
    }
}

/// Mann–Whitney AUC: `P(pos > neg) + 0.5·P(pos = neg)` over logits.
pub fn auc(records: &[LogitRecord]) -> Result<f64> {
    check_binary(records)?;
    let scored: Vec<(f64, bool)> = records.iter().map(|r| (r.logit, r.label == 1.0)).collect();
    auc_scores(&scored)
}

/// AUC of `(score, is_positive)` pairs, counted in doubled units so the
/// result is exact: each tie group contributes `2·pos·neg_below + pos·neg_tied`.
pub fn auc_scores(scored: &[(f64, bool)]) -> Result<f64> {
    if scored.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::NonFinite("NaN score".into()));
    }
    let n_pos = scored.iter().filter(|s| s.1).count() as u64;
    let n_neg = scored.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Degenerate("AUC needs both classes".into()));
    }
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut twice = 0u64;
    let mut neg_below = 0u64;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            if sorted[j].1 {
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

/// Percentile bootstrap interval of a metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub low: f64,
    pub high: f64,
    /// Standard deviation of the resampled metric values.
    pub sd: f64,
    pub n_resamples: usize,
    /// Resamples discarded because the metric was undefined on them.
    pub redraws: usize,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Resample indices with replacement until `n_resamples` draws give a defined
/// value of every metric. Returns the per-metric values and the redraw count.
fn bootstrap_values(
    n: usize,
    metrics: &[&dyn Fn(&[usize]) -> Result<f64>],
    n_resamples: usize,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![Vec::with_capacity(n_resamples); metrics.len()];
    let mut redraws = 0usize;
    let max_redraws = 100 * n_resamples.max(1);
    let mut idx = vec![0usize; n];
    while values[0].len() < n_resamples {
        idx.iter_mut().for_each(|i| *i = rng.random_range(0..n));
        let got: Result<Vec<f64>> = metrics.iter().map(|m| m(&idx)).collect();
        match got {
            Ok(v) => v.into_iter().zip(values.iter_mut()).for_each(|(x, out)| out.push(x)),
            Err(Error::Degenerate(_)) => {
                redraws += 1;
                if redraws > max_redraws {
                    return Err(Error::Degenerate(format!(
                        "metric undefined on {redraws} bootstrap resamples"
                    )));
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok((values, redraws))
}

fn summarize(mut v: Vec<f64>, level: f64, redraws: usize) -> BootstrapCi {
    v.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    BootstrapCi {
        low: quantile_sorted(&v, alpha),
        high: quantile_sorted(&v, 1.0 - alpha),
        sd: sample_sd(&v),
        n_resamples: v.len(),
        redraws,
    }
}

fn check_level(level: f64, n_resamples: usize) -> Result<()> {
    if !(level > 0.0 && level < 1.0) || n_resamples == 0 {
        return Err(Error::Invalid(format!(
            "bootstrap needs 0 < level < 1 and resamples >= 1 (got {level}, {n_resamples})"
        )));
    }
    Ok(())
}

/// Percentile bootstrap at the record level. Resamples on which `metric`
/// reports [`Error::Degenerate`] are redrawn and counted.
pub fn bootstrap_ci(
    records: &[LogitRecord],
    metric: impl Fn(&[LogitRecord]) -> Result<f64>,
    n_resamples: usize,
    level: f64,
    seed: u64,
) -> Result<BootstrapCi> {
    check_level(level, n_resamples)?;
    if records.is_empty() {
        return Err(Error::InsufficientData("no records to resample".into()));
    }
    let f = |idx: &[usize]| {
        let sample: Vec<LogitRecord> = idx.iter().map(|&i| records[i].clone()).collect();
        metric(&sample)
    };
    let (mut values, redraws) = bootstrap_values(records.len(), &[&f], n_resamples, seed)?;
    Ok(summarize(values.remove(0), level, redraws))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub auc: f64,
    pub accuracy_ci_low: f64,
    pub accuracy_ci_high: f64,
    pub auc_ci_low: f64,
    pub auc_ci_high: f64,
    /// Bootstrap standard deviations.
    pub accuracy_sd: f64,
    pub auc_sd: f64,
    pub n_pairs: usize,
    pub n_bootstrap: usize,
    pub redraws: usize,
}

/// Accuracy and AUC with percentile intervals from one shared set of
/// resamples.
pub fn metric_report(records: &[LogitRecord], n_bootstrap: usize, level: f64, seed: u64) -> Result<MetricReport> {
    check_level(level, n_bootstrap)?;
    let acc = accuracy(records)?;
    let point_auc = auc(records)?;
    let correct: Vec<bool> = records.iter().map(is_correct).collect();
    let scored: Vec<(f64, bool)> = records.iter().map(|r| (r.logit, r.label == 1.0)).collect();
    let acc_f = |idx: &[usize]| Ok(idx.iter().filter(|&&i| correct[i]).count() as f64 / idx.len() as f64);
    let auc_f = |idx: &[usize]| auc_scores(&idx.iter().map(|&i| scored[i]).collect::<Vec<_>>());
    let (mut values, redraws) = bootstrap_values(records.len(), &[&acc_f, &auc_f], n_bootstrap, seed)?;
    let auc_ci = summarize(values.pop().unwrap(), level, redraws);
    let acc_ci = summarize(values.pop().unwrap(), level, redraws);
    Ok(MetricReport {
        accuracy: acc,
        auc: point_auc,
        accuracy_ci_low: acc_ci.low,
        accuracy_ci_high: acc_ci.high,
        auc_ci_low: auc_ci.low,
        auc_ci_high: auc_ci.high,
        accuracy_sd: acc_ci.sd,
        auc_sd: auc_ci.sd,
        n_pairs: records.len(),
        n_bootstrap,
        redraws,
    })
}

/// Metrics of `model` on Sim–F1 (or any no-change) pairs.
pub fn evaluate_control(
    model: &mut SiameseModel,
    pairs: &[OrderedPair],
    n_bootstrap: usize,
    seed: u64,
) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::InsufficientData("no control pairs".into()));
    }
    let records = collect_logits(model, pairs)?;
    metric_report(&records, n_bootstrap, 0.95, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    /// Two-sided p from `t = r·√((n-2)/(1-r²))` with `n - 2` degrees of freedom.
    pub p: f64,
    pub n: usize,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<Correlation> {
    if x.len() != y.len() {
        return Err(Error::Invalid(format!("lengths {} and {} differ", x.len(), y.len())));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::InsufficientData(format!("correlation needs 3 points, got {n}")));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::Degenerate("correlation undefined for constant input".into()));
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p = if r.abs() == 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
        (2.0 * dist.sf(t.abs())).min(1.0)
    };
    Ok(Correlation { r, p, n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairGroup {
    pub first_fraction: u32,
    pub second_fraction: u32,
    pub n: usize,
    pub mean: f64,
    /// Sample SD; 0 for single-record groups.
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseAnalysis {
    /// Sorted by first fraction, then second.
    pub groups: Vec<PairGroup>,
    pub correlation: Correlation,
}

impl PairwiseAnalysis {
    /// Whether group means never decrease with the interval among groups
    /// sharing a first fraction.
    pub fn is_trend_monotone(&self) -> bool {
        self.groups
            .windows(2)
            .filter(|w| w[0].first_fraction == w[1].first_fraction)
            .all(|w| w[1].mean >= w[0].mean)
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(
            w,
            "first_fraction,second_fraction,interval_fractions,n,mean_logit,sd_logit"
        )?;
        for g in &self.groups {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                g.first_fraction,
                g.second_fraction,
                g.second_fraction as i64 - g.first_fraction as i64,
                g.n,
                g.mean,
                g.sd
            )?;
        }
        Ok(())
    }
}

/// Groups correctly ordered pairs by `(first, second)` fraction and
/// correlates the fraction interval with the logit.
pub fn pairwise_logit_analysis(records: &[LogitRecord]) -> Result<PairwiseAnalysis> {
    if let Some(r) = records.iter().find(|r| r.label != 1.0) {
        return Err(Error::Invalid(format!(
            "pairwise analysis takes correctly ordered pairs only (found label {})",
            r.label
        )));
    }
    let mut by_pair: BTreeMap<(u32, u32), Vec<f64>> = BTreeMap::new();
    for r in records {
        by_pair
            .entry((r.first_fraction, r.second_fraction))
            .or_default()
            .push(r.logit);
    }
    let groups = by_pair
        .into_iter()
        .map(|((a, b), v)| PairGroup {
            first_fraction: a,
            second_fraction: b,
            n: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            sd: sample_sd(&v),
        })
        .collect();
    let x: Vec<f64> = records.iter().map(|r| r.interval_fractions as f64).collect();
    let y: Vec<f64> = records.iter().map(|r| r.logit).collect();
    Ok(PairwiseAnalysis {
        groups,
        correlation: pearson(&x, &y)?,
    })
}
