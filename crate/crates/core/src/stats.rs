//! Random-slope mixed model, rank and t tests, and organ change analysis.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal, StudentsT};

use crate::dataio::Organ;
use crate::error::{Error, Result};
use crate::evaluation::LogitRecord;
use crate::phantom::PatientSeries;

/// One observation for the trend model: `y` measured at covariate `x` in `group`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmeObservation {
    pub group: String,
    pub x: f64,
    pub y: f64,
}

/// F1–FX observations (X > 1) with the fraction interval as covariate.
pub fn lme_observations(records: &[LogitRecord]) -> Vec<LmeObservation> {
    records
        .iter()
        .filter(|r| r.first_fraction == 1 && r.second_fraction > 1 && r.label == 1.0)
        .map(|r| LmeObservation {
            group: r.patient_id.clone(),
            x: r.interval_fractions as f64,
            y: r.logit,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientSlope {
    pub group: String,
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmeFit {
    pub fixed_slope: f64,
    pub random_slope_sd: f64,
    pub residual_sd: f64,
    /// Empirical-Bayes slope `β + û` per group; equals `β` without the random effect.
    pub patient_slopes: Vec<PatientSlope>,
    pub log_likelihood: f64,
    pub n_obs: usize,
    pub n_patients: usize,
    pub random_effect: bool,
}

impl LmeFit {
    pub fn write_slopes_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "patient_id,slope")?;
        for p in &self.patient_slopes {
            writeln!(w, "{},{}", p.group, p.slope)?;
        }
        Ok(())
    }
}

/// Sufficient statistics of one group: Σx², Σxy, Σy², n.
#[derive(Debug, Clone)]
struct GroupStats {
    group: String,
    sxx: f64,
    sxy: f64,
    syy: f64,
    n: usize,
}

fn group_stats(obs: &[LmeObservation]) -> Result<Vec<GroupStats>> {
    let mut groups: BTreeMap<&str, GroupStats> = BTreeMap::new();
    for o in obs {
        if !o.x.is_finite() || !o.y.is_finite() {
            return Err(Error::NonFinite(format!("observation in group {}", o.group)));
        }
        let g = groups.entry(&o.group).or_insert_with(|| GroupStats {
            group: o.group.clone(),
            sxx: 0.0,
            sxy: 0.0,
            syy: 0.0,
            n: 0,
        });
        g.sxx += o.x * o.x;
        g.sxy += o.x * o.y;
        g.syy += o.y * o.y;
        g.n += 1;
    }
    if groups.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} patient(s), need ≥ 2",
            groups.len()
        )));
    }
    let mut xs: Vec<f64> = obs.iter().map(|o| o.x).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() < 2 {
        return Err(Error::InsufficientData("need ≥ 2 distinct intervals".into()));
    }
    Ok(groups.into_values().collect())
}

/// Profiled fit at variance ratio `lambda = τ²/σ²`: (β, σ², log-likelihood).
///
/// With `V = σ²(I + λxxᵀ)` per group, `xᵀV⁻¹x ∝ s/(1+λs)` and
/// `det V = σ²ⁿ(1+λs)`, so everything reduces to per-group sums.
fn profile(groups: &[GroupStats], lambda: f64) -> (f64, f64, f64) {
    let (mut num, mut den) = (0.0, 0.0);
    for g in groups {
        let w = 1.0 / (1.0 + lambda * g.sxx);
        num += g.sxy * w;
        den += g.sxx * w;
    }
    let beta = if den > 0.0 { num / den } else { 0.0 };
    let mut rss = 0.0;
    let mut logdet = 0.0;
    let mut n = 0usize;
    for g in groups {
        let rr = g.syy - 2.0 * beta * g.sxy + beta * beta * g.sxx;
        let xr = g.sxy - beta * g.sxx;
        rss += rr - lambda * xr * xr / (1.0 + lambda * g.sxx);
        logdet += (1.0 + lambda * g.sxx).ln();
        n += g.n;
    }
    let nf = n as f64;
    let sigma2 = (rss / nf).max(0.0);
    let ll = -0.5 * nf * ((2.0 * std::f64::consts::PI).ln() + sigma2.ln() + 1.0) - 0.5 * logdet;
    (beta, sigma2, ll)
}

fn assemble(groups: &[GroupStats], lambda: f64, random_effect: bool) -> Result<LmeFit> {
    let (beta, sigma2, ll) = profile(groups, lambda);
    if sigma2 <= 0.0 || !ll.is_finite() {
        return Err(Error::Degenerate(
            "zero residual variance; the data fit the model exactly".into(),
        ));
    }
    let patient_slopes = groups
        .iter()
        .map(|g| {
            let xr = g.sxy - beta * g.sxx;
            PatientSlope {
                group: g.group.clone(),
                slope: beta + lambda * xr / (1.0 + lambda * g.sxx),
            }
        })
        .collect();
    Ok(LmeFit {
        fixed_slope: beta,
        random_slope_sd: (lambda * sigma2).sqrt(),
        residual_sd: sigma2.sqrt(),
        patient_slopes,
        log_likelihood: ll,
        n_obs: groups.iter().map(|g| g.n).sum(),
        n_patients: groups.len(),
        random_effect,
    })
}

const LOG_KAPPA_RANGE: (f64, f64) = (-18.0, 18.0);
const GRID_STEPS: usize = 145;
const GOLDEN_ITERS: usize = 80;

/// Maximum-likelihood fit of `y = β·x + u_g·x + ε` with no intercepts,
/// `u_g ~ N(0, τ²)`, `ε ~ N(0, σ²)`.
pub fn fit_lme(obs: &[LmeObservation]) -> Result<LmeFit> {
    let groups = group_stats(obs)?;
    // Search ln κ with κ = λ·mean(Σx²) so the grid does not depend on the covariate scale.
    let scale = groups.iter().map(|g| g.sxx).sum::<f64>() / groups.len() as f64;
    let lam = |t: f64| t.exp() / scale;
    let ll_at = |t: f64| profile(&groups, lam(t)).2;
    let (lo, hi) = LOG_KAPPA_RANGE;
    let step = (hi - lo) / (GRID_STEPS - 1) as f64;
    let mut best = (0usize, f64::NEG_INFINITY);
    for i in 0..GRID_STEPS {
        let v = ll_at(lo + step * i as f64);
        if v > best.1 {
            best = (i, v);
        }
    }
    let ll_zero = profile(&groups, 0.0).2;
    if best.0 == GRID_STEPS - 1 {
        return Err(Error::NonConvergence {
            iterations: GRID_STEPS,
            detail: format!(
                "variance ratio at search bound (ln κ = {hi}, ll = {:.6}); residual variance vanishing",
                best.1
            ),
        });
    }
    if ll_zero >= best.1 {
        return assemble(&groups, 0.0, true);
    }
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (
        lo + step * best.0.saturating_sub(1) as f64,
        lo + step * (best.0 + 1) as f64,
    );
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (ll_at(c), ll_at(d));
    for _ in 0..GOLDEN_ITERS {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = ll_at(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = ll_at(d);
        }
    }
    let t = 0.5 * (a + b);
    if ll_zero >= ll_at(t) {
        return assemble(&groups, 0.0, true);
    }
    assemble(&groups, lam(t), true)
}

/// Fit without the random slope: ordinary least squares through the origin.
pub fn fit_fixed_only(obs: &[LmeObservation]) -> Result<LmeFit> {
    let groups = group_stats(obs)?;
    assemble(&groups, 0.0, false)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrtResult {
    pub statistic: f64,
    pub p: f64,
}

/// Likelihood ratio test of `τ = 0` against a 50:50 mixture of a point mass
/// at zero and χ²(1).
pub fn lrt_random_slope(full: &LmeFit, reduced: &LmeFit) -> Result<LrtResult> {
    if full.n_obs != reduced.n_obs || full.n_patients != reduced.n_patients {
        return Err(Error::Invalid("models were fit to different data".into()));
    }
    let gap = full.log_likelihood - reduced.log_likelihood;
    let tol = 1e-8 * (1.0 + full.log_likelihood.abs());
    if gap < -tol {
        return Err(Error::NonConvergence {
            iterations: GRID_STEPS + GOLDEN_ITERS,
            detail: format!("full model log-likelihood below reduced by {:.3e}", -gap),
        });
    }
    let statistic = (2.0 * gap).max(0.0);
    let p = if statistic <= 2.0 * tol {
        1.0
    } else {
        let chi = ChiSquared::new(1.0).expect("valid df");
        0.5 * chi.sf(statistic)
    };
    Ok(LrtResult { statistic, p })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    TwoSided,
    /// `y` tends to exceed `x` (or `a` exceeds `b`).
    Greater,
    Less,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p: f64,
    /// Degrees of freedom for t tests; sample size after zero removal for rank tests.
    pub df: f64,
    pub exact: bool,
}

/// Largest sample size using the exact null distribution.
pub const WILCOXON_EXACT_MAX: usize = 25;

/// Average ranks of `v` (1-based), ties sharing the mean rank.
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && v[idx[j]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Wilcoxon signed-rank test on `y - x`; the statistic is the positive rank sum.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64], alternative: Alternative) -> Result<TestResult> {
    if x.len() != y.len() {
        return Err(Error::Invalid(format!(
            "paired lengths differ: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| b - a).filter(|v| *v != 0.0).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("paired difference".into()));
    }
    if d.is_empty() && !x.is_empty() {
        return Err(Error::Degenerate("all paired differences are zero".into()));
    }
    let n = d.len();
    if n < 5 {
        return Err(Error::InsufficientData(format!("{n} nonzero differences, need ≥ 5")));
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let nf = n as f64;
    let (p_le, p_ge, exact) = if n <= WILCOXON_EXACT_MAX {
        // Doubled ranks are integers even with ties; count sign assignments by subset sum.
        let twice: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let total: usize = twice.iter().sum();
        let mut counts = vec![0f64; total + 1];
        counts[0] = 1.0;
        let mut reach = 0;
        for &r in &twice {
            for s in (0..=reach).rev() {
                if counts[s] > 0.0 {
                    counts[s + r] += counts[s];
                }
            }
            reach += r;
        }
        let all = 2f64.powi(n as i32);
        let w2 = (2.0 * w_plus).round() as usize;
        let le: f64 = counts[..=w2].iter().sum::<f64>() / all;
        let ge: f64 = counts[w2..].iter().sum::<f64>() / all;
        (le, ge, true)
    } else {
        let mean = nf * (nf + 1.0) / 4.0;
        let mut groups: BTreeMap<u64, usize> = BTreeMap::new();
        for r in &ranks {
            *groups.entry((2.0 * r) as u64).or_default() += 1;
        }
        let tie: f64 = groups.values().map(|&t| (t * t * t - t) as f64).sum();
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie / 48.0;
        if var <= 0.0 {
            return Err(Error::Degenerate("zero variance of the rank statistic".into()));
        }
        let z = (w_plus - mean) / var.sqrt();
        let norm = Normal::standard();
        (norm.cdf(z), norm.sf(z), false)
    };
    let p = match alternative {
        Alternative::TwoSided => (2.0 * p_le.min(p_ge)).min(1.0),
        Alternative::Greater => p_ge,
        Alternative::Less => p_le,
    };
    Ok(TestResult {
        statistic: w_plus,
        p,
        df: nf,
        exact,
    })
}

/// Sample mean and SD.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(v: &[f64]) -> Result<Summary> {
        if v.len() < 2 {
            return Err(Error::InsufficientData(format!("{} value(s), need ≥ 2", v.len())));
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Ok(Summary {
            mean,
            sd: var.sqrt(),
            n: v.len(),
        })
    }
}

/// Welch–Satterthwaite degrees of freedom.
pub fn welch_df(a: &Summary, b: &Summary) -> f64 {
    let va = a.sd * a.sd / a.n as f64;
    let vb = b.sd * b.sd / b.n as f64;
    (va + vb).powi(2) / (va * va / (a.n as f64 - 1.0) + vb * vb / (b.n as f64 - 1.0))
}

/// Two-sample t test from summaries; the statistic is for `a - b`.
pub fn ttest_summaries(a: &Summary, b: &Summary, welch: bool, alternative: Alternative) -> Result<TestResult> {
    if a.n < 2 || b.n < 2 {
        return Err(Error::InsufficientData("each sample needs ≥ 2 values".into()));
    }
    if !(a.sd > 0.0 && b.sd > 0.0) {
        return Err(Error::Degenerate("sample variance is zero".into()));
    }
    let (na, nb) = (a.n as f64, b.n as f64);
    let (se, df) = if welch {
        ((a.sd * a.sd / na + b.sd * b.sd / nb).sqrt(), welch_df(a, b))
    } else {
        let df = na + nb - 2.0;
        let pooled = ((na - 1.0) * a.sd * a.sd + (nb - 1.0) * b.sd * b.sd) / df;
        ((pooled * (1.0 / na + 1.0 / nb)).sqrt(), df)
    };
    let t = (a.mean - b.mean) / se;
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Degenerate(e.to_string()))?;
    let p = match alternative {
        Alternative::TwoSided => (2.0 * dist.sf(t.abs())).min(1.0),
        Alternative::Greater => dist.sf(t),
        Alternative::Less => dist.cdf(t),
    };
    Ok(TestResult {
        statistic: t,
        p,
        df,
        exact: false,
    })
}

/// Independent two-sample t test (Student or Welch), two-sided.
pub fn ttest_ind(a: &[f64], b: &[f64], welch: bool) -> Result<TestResult> {
    ttest_summaries(&Summary::of(a)?, &Summary::of(b)?, welch, Alternative::TwoSided)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    VolumeMm3,
    MeanIntensity,
    IntensitySd,
}

impl Quantity {
    pub const ALL: [Quantity; 3] = [Quantity::VolumeMm3, Quantity::MeanIntensity, Quantity::IntensitySd];

    pub fn name(self) -> &'static str {
        match self {
            Quantity::VolumeMm3 => "volume_mm3",
            Quantity::MeanIntensity => "mean_intensity",
            Quantity::IntensitySd => "intensity_sd",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedValue {
    pub patient_id: String,
    pub first: f64,
    pub last: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantityChange {
    pub organ: Organ,
    pub quantity: Quantity,
    pub values: Vec<PairedValue>,
    pub median_change: f64,
    /// Two-sided signed-rank test of FL against F1; `None` when there are
    /// fewer than 5 nonzero changes.
    pub wilcoxon: Option<TestResult>,
    /// Two-sided Welch test of FL against F1; `None` for zero variance.
    pub welch: Option<TestResult>,
}

impl QuantityChange {
    pub fn p_value(&self) -> Option<f64> {
        self.wilcoxon.map(|t| t.p)
    }

    /// Sign of the median change when significant at `alpha`, else 0.
    pub fn significant_direction(&self, alpha: f64) -> i8 {
        match self.p_value() {
            Some(p) if p < alpha && self.median_change > 0.0 => 1,
            Some(p) if p < alpha && self.median_change < 0.0 => -1,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganChangeReport {
    pub changes: Vec<QuantityChange>,
}

impl OrganChangeReport {
    pub fn get(&self, organ: Organ, quantity: Quantity) -> Option<&QuantityChange> {
        self.changes.iter().find(|c| c.organ == organ && c.quantity == quantity)
    }

    pub fn any_significant(&self, alpha: f64) -> bool {
        self.changes.iter().any(|c| c.p_value().is_some_and(|p| p < alpha))
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "organ,quantity,patient_id,first,last")?;
        for c in &self.changes {
            for v in &c.values {
                writeln!(
                    w,
                    "{},{},{},{},{}",
                    c.organ,
                    c.quantity.name(),
                    v.patient_id,
                    v.first,
                    v.last
                )?;
            }
        }
        Ok(())
    }

    pub fn write_tests_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(
            w,
            "organ,quantity,n,median_change,wilcoxon_w,wilcoxon_p,welch_t,welch_df,welch_p"
        )?;
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for c in &self.changes {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                c.organ,
                c.quantity.name(),
                c.values.len(),
                c.median_change,
                fmt(c.wilcoxon.map(|t| t.statistic)),
                fmt(c.wilcoxon.map(|t| t.p)),
                fmt(c.welch.map(|t| t.statistic)),
                fmt(c.welch.map(|t| t.df)),
                fmt(c.welch.map(|t| t.p)),
            )?;
        }
        Ok(())
    }
}

/// Volume (mm³), interior mean and interior SD of `organ` in one record.
pub fn organ_measurements(record: &crate::dataio::FractionRecord, organ: Organ) -> Result<[f64; 3]> {
    let mask = record.mask(organ)?;
    let count = mask.count_nonzero();
    if count == 0 {
        return Err(Error::EmptyMask(format!("{organ} in {}", record.patient_id)));
    }
    let (mean, sd) = record.image.masked_mean_sd(mask).ok_or_else(|| {
        Error::InsufficientData(format!(
            "{organ} in {} has {count} voxel(s); SD undefined",
            record.patient_id
        ))
    })?;
    Ok([count as f64 * mask.voxel_volume_mm3(), mean, sd])
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// F1 against FL change of each quantity for each organ, with tests.
pub fn organ_change(cohort: &[PatientSeries], organs: &[Organ]) -> Result<OrganChangeReport> {
    if cohort.is_empty() {
        return Err(Error::InsufficientData("empty cohort".into()));
    }
    let mut changes = Vec::new();
    for &organ in organs {
        let mut per_quantity: [Vec<PairedValue>; 3] = Default::default();
        for s in cohort {
            let (first, last) = match (s.first_fraction(), s.last_fraction()) {
                (Some(f), Some(l)) if f.fraction_index != l.fraction_index => (f, l),
                _ => {
                    return Err(Error::InsufficientData(format!(
                        "{} lacks distinct F1 and FL records",
                        s.patient_id
                    )))
                }
            };
            let a = organ_measurements(first, organ)?;
            let b = organ_measurements(last, organ)?;
            for q in 0..3 {
                per_quantity[q].push(PairedValue {
                    patient_id: s.patient_id.clone(),
                    first: a[q],
                    last: b[q],
                });
            }
        }
        for (q, values) in Quantity::ALL.into_iter().zip(per_quantity) {
            let x: Vec<f64> = values.iter().map(|v| v.first).collect();
            let y: Vec<f64> = values.iter().map(|v| v.last).collect();
            let mut diffs: Vec<f64> = values.iter().map(|v| v.last - v.first).collect();
            let wilcoxon = match wilcoxon_signed_rank(&x, &y, Alternative::TwoSided) {
                Ok(t) => Some(t),
                Err(Error::InsufficientData(_) | Error::Degenerate(_)) => None,
                Err(e) => return Err(e),
            };
            let welch = match (Summary::of(&y), Summary::of(&x)) {
                (Ok(b), Ok(a)) => ttest_summaries(&b, &a, true, Alternative::TwoSided).ok(),
                _ => None,
            };
            changes.push(QuantityChange {
                organ,
                quantity: q,
                median_change: median(&mut diffs),
                values,
                wilcoxon,
                welch,
            });
        }
    }
    Ok(OrganChangeReport { changes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::strategy::Strategy;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal as RNormal};

    fn simulate(beta: f64, tau: f64, sigma: f64, n: usize, seed: u64) -> Vec<LmeObservation> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = RNormal::new(0.0, 1.0).unwrap();
        let mut out = Vec::new();
        for g in 0..n {
            let u = tau * z.sample(&mut rng);
            for x in 1..=4 {
                let x = x as f64;
                out.push(LmeObservation {
                    group: format!("g{g:03}"),
                    x,
                    y: (beta + u) * x + sigma * z.sample(&mut rng),
                });
            }
        }
        out
    }

    /// Direct Gaussian log-likelihood with the dense per-group covariance.
    fn dense_ll(obs: &[LmeObservation], beta: f64, tau: f64, sigma: f64) -> f64 {
        let mut groups: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
        for o in obs {
            groups.entry(&o.group).or_default().push((o.x, o.y));
        }
        let mut ll = 0.0;
        for pts in groups.values() {
            let n = pts.len();
            let mut v = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..n {
                    v[i][j] = tau * tau * pts[i].0 * pts[j].0 + if i == j { sigma * sigma } else { 0.0 };
                }
            }
            // Cholesky.
            let mut l = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..=i {
                    let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
                    if i == j {
                        l[i][i] = (v[i][i] - s).sqrt();
                    } else {
                        l[i][j] = (v[i][j] - s) / l[j][j];
                    }
                }
            }
            let r: Vec<f64> = pts.iter().map(|(x, y)| y - beta * x).collect();
            let mut z = vec![0.0; n];
            for i in 0..n {
                let s: f64 = (0..i).map(|k| l[i][k] * z[k]).sum();
                z[i] = (r[i] - s) / l[i][i];
            }
            let logdet: f64 = (0..n).map(|i| 2.0 * l[i][i].ln()).sum();
            ll += -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + z.iter().map(|v| v * v).sum::<f64>());
        }
        ll
    }

    #[test]
    fn profiled_likelihood_matches_dense_evaluation() {
        let obs = simulate(1.0, 0.3, 0.1, 20, 3);
        let fit = fit_lme(&obs).unwrap();
        let direct = dense_ll(&obs, fit.fixed_slope, fit.random_slope_sd, fit.residual_sd);
        assert_relative_eq!(fit.log_likelihood, direct, max_relative = 1e-9);
        // The optimum beats nearby parameter values.
        for (db, dt, ds) in [
            (0.01, 0.0, 0.0),
            (0.0, 0.02, 0.0),
            (0.0, 0.0, 0.005),
            (-0.01, -0.02, -0.005),
        ] {
            let other = dense_ll(
                &obs,
                fit.fixed_slope + db,
                fit.random_slope_sd + dt,
                fit.residual_sd + ds,
            );
            assert!(other <= fit.log_likelihood + 1e-9);
        }
    }

    #[test]
    fn recovers_parameters() {
        let fit = fit_lme(&simulate(1.0, 0.3, 0.1, 60, 11)).unwrap();
        assert!((fit.fixed_slope - 1.0).abs() < 0.1, "{fit:?}");
        assert!((fit.random_slope_sd - 0.3).abs() < 0.1);
        assert!((fit.residual_sd - 0.1).abs() < 0.02);
    }

    #[test]
    fn zero_logits_give_zero_slope() {
        let mut obs = simulate(0.0, 0.0, 0.0, 5, 1);
        // Exact zeros leave no residual variance; add a tiny symmetric perturbation.
        for (i, o) in obs.iter_mut().enumerate() {
            o.y = if i % 2 == 0 { 1e-6 } else { -1e-6 };
        }
        let fit = fit_lme(&obs).unwrap();
        assert!(fit.fixed_slope.abs() < 1e-6);
        assert!(fit.random_slope_sd < 1e-6);
        let all_zero = simulate(0.0, 0.0, 0.0, 5, 1);
        assert!(matches!(fit_lme(&all_zero), Err(Error::Degenerate(_))));
    }

    #[test]
    fn scale_equivariance() {
        let obs = simulate(1.0, 0.3, 0.1, 30, 5);
        let scaled: Vec<_> = obs
            .iter()
            .map(|o| LmeObservation {
                y: o.y * 3.0,
                ..o.clone()
            })
            .collect();
        let (a, b) = (fit_lme(&obs).unwrap(), fit_lme(&scaled).unwrap());
        assert_relative_eq!(b.fixed_slope, 3.0 * a.fixed_slope, max_relative = 1e-6);
        assert_relative_eq!(b.random_slope_sd, 3.0 * a.random_slope_sd, max_relative = 1e-4);
        assert_relative_eq!(b.residual_sd, 3.0 * a.residual_sd, max_relative = 1e-6);
        let la = lrt_random_slope(&a, &fit_fixed_only(&obs).unwrap()).unwrap();
        let lb = lrt_random_slope(&b, &fit_fixed_only(&scaled).unwrap()).unwrap();
        assert_relative_eq!(la.statistic, lb.statistic, max_relative = 1e-6);
    }

    #[test]
    fn lrt_identical_models() {
        let obs = simulate(1.0, 0.3, 0.1, 10, 2);
        let r = fit_fixed_only(&obs).unwrap();
        let t = lrt_random_slope(&r, &r).unwrap();
        assert_eq!(t.statistic, 0.0);
        assert_eq!(t.p, 1.0);
    }

    #[test]
    fn lme_preconditions() {
        let one = simulate(1.0, 0.3, 0.1, 1, 2);
        assert!(matches!(fit_lme(&one), Err(Error::InsufficientData(_))));
        let same_x: Vec<_> = simulate(1.0, 0.3, 0.1, 4, 2)
            .into_iter()
            .filter(|o| o.x == 2.0)
            .collect();
        assert!(matches!(fit_lme(&same_x), Err(Error::InsufficientData(_))));
    }

    /// Enumerates all 2ⁿ sign assignments of the ranks.
    fn enumerate_p(d: &[f64], alternative: Alternative) -> f64 {
        let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
        let ranks = average_ranks(&abs);
        let obs: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
        let n = d.len();
        let (mut le, mut ge) = (0u64, 0u64);
        for m in 0u64..(1 << n) {
            let w: f64 = (0..n).filter(|i| m >> i & 1 == 1).map(|i| ranks[i]).sum();
            if w <= obs + 1e-9 {
                le += 1;
            }
            if w >= obs - 1e-9 {
                ge += 1;
            }
        }
        let all = (1u64 << n) as f64;
        match alternative {
            Alternative::TwoSided => (2.0 * (le.min(ge) as f64) / all).min(1.0),
            Alternative::Greater => ge as f64 / all,
            Alternative::Less => le as f64 / all,
        }
    }

    #[test]
    fn wilcoxon_all_positive() {
        let x: Vec<f64> = (0..10).map(|i| i as f64 * 0.7).collect();
        let y: Vec<f64> = x.iter().map(|v| v + 1.0).collect();
        let t = wilcoxon_signed_rank(&x, &y, Alternative::Greater).unwrap();
        assert_eq!(t.statistic, 55.0);
        assert_eq!(t.p, 1.0 / 1024.0);
        assert!(t.exact);
    }

    #[test]
    fn wilcoxon_errors() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!(matches!(
            wilcoxon_signed_rank(&x, &[2.0, 3.0, 4.0, 5.0], Alternative::TwoSided),
            Err(Error::InsufficientData(_))
        ));
        assert!(matches!(
            wilcoxon_signed_rank(&x, &x, Alternative::TwoSided),
            Err(Error::Degenerate(_))
        ));
        assert!(wilcoxon_signed_rank(&x, &x[..3], Alternative::TwoSided).is_err());
    }

    #[test]
    fn wilcoxon_symmetric_differences() {
        let d = [-3.0, -2.0, -1.0, 1.0, 2.0, 3.0, -0.5, 0.5];
        let x = vec![0.0; d.len()];
        let t = wilcoxon_signed_rank(&x, &d, Alternative::TwoSided).unwrap();
        assert!(t.p > 0.5);
    }

    #[test]
    fn wilcoxon_large_sample_is_normal_approximation() {
        let x: Vec<f64> = (0..40).map(|i| (i as f64).sin()).collect();
        let y: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(i, v)| v + 0.3 + (i as f64 * 1.7).cos())
            .collect();
        let t = wilcoxon_signed_rank(&x, &y, Alternative::TwoSided).unwrap();
        assert!(!t.exact);
        assert!(t.p > 0.0 && t.p < 1.0);
    }

    proptest::proptest! {
        #[test]
        fn wilcoxon_exact_matches_enumeration(
            d in proptest::collection::vec((-4i32..=4).prop_filter("nonzero", |v| *v != 0), 5..=10),
        ) {
            let d: Vec<f64> = d.into_iter().map(f64::from).collect();
            let x = vec![0.0; d.len()];
            for alt in [Alternative::TwoSided, Alternative::Greater, Alternative::Less] {
                let t = wilcoxon_signed_rank(&x, &d, alt).unwrap();
                proptest::prop_assert!((t.p - enumerate_p(&d, alt)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn organ_change_volume_and_errors() {
        use crate::phantom::{cohort, PhantomConfig};
        let cfg = PhantomConfig {
            grid_size: 48,
            ..PhantomConfig::default()
        };
        let mut cfg = cfg;
        for o in cfg.organs.iter_mut() {
            o.base_shape = o.base_shape.scaled(0.7);
            o.base_shape.center = o.base_shape.center.map(|c| c * 0.75);
        }
        let series = cohort(&cfg, 6, 4).unwrap();
        let rep = organ_change(&series, &[Organ::Prostate, Organ::Bladder]).unwrap();
        let vol = rep.get(Organ::Prostate, Quantity::VolumeMm3).unwrap();
        let m = series[0].first_fraction().unwrap().mask(Organ::Prostate).unwrap();
        assert_eq!(vol.values[0].first, m.count_nonzero() as f64 * 1.5f64.powi(3));
        assert_eq!(rep.changes.len(), 6);

        let mut tiny = (*series[0].first_fraction().unwrap().as_ref()).clone();
        let mask = tiny.masks.get_mut(&Organ::Prostate).unwrap();
        mask.values_mut().fill(0);
        mask.set(3, 3, 3, 1);
        assert!(matches!(
            organ_measurements(&tiny, Organ::Prostate),
            Err(Error::InsufficientData(_))
        ));
        tiny.masks.get_mut(&Organ::Prostate).unwrap().values_mut().fill(0);
        assert!(matches!(
            organ_measurements(&tiny, Organ::Prostate),
            Err(Error::EmptyMask(_))
        ));
    }

    #[test]
    fn ttest_identical_and_welch_df() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let t = ttest_ind(&a, &a, false).unwrap();
        assert_eq!(t.statistic, 0.0);
        assert_relative_eq!(t.p, 1.0, epsilon = 1e-12);
        // Hand-computed: var_a = 1.6667, var_b = 10, n = 4 and 3.
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [2.0, 5.0, 8.0];
        let t = ttest_ind(&a, &b, true).unwrap();
        let (va, vb) = (5.0 / 3.0 / 4.0, 9.0 / 3.0);
        let df = (va + vb) * (va + vb) / (va * va / 3.0 + vb * vb / 2.0);
        assert_relative_eq!(t.df, df, max_relative = 1e-12);
        assert_relative_eq!(t.statistic, (2.5 - 5.0) / (va + vb).sqrt(), max_relative = 1e-12);
        assert!(ttest_ind(&[1.0, 1.0], &[2.0, 3.0], true).is_err());
        assert!(ttest_ind(&[1.0], &[2.0, 3.0], false).is_err());
    }

    #[test]
    fn student_matches_pooled_formula() {
        let a = [0.5, 1.5, 2.0, 3.5, 4.0];
        let b = [2.0, 2.5, 4.5, 6.0];
        let t = ttest_ind(&a, &b, false).unwrap();
        let sa = Summary::of(&a).unwrap();
        let sb = Summary::of(&b).unwrap();
        let sp2 = (4.0 * sa.sd.powi(2) + 3.0 * sb.sd.powi(2)) / 7.0;
        assert_relative_eq!(
            t.statistic,
            (sa.mean - sb.mean) / (sp2 * (0.2 + 0.25)).sqrt(),
            max_relative = 1e-12
        );
        assert_eq!(t.df, 7.0);
    }
}
