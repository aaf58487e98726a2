//! Accuracy and uncertainty analyses over evaluated structures.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::model::EnsemblePrediction;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum UqError {
    #[error("need at least {needed} records, got {got}")]
    TooFewRecords { needed: usize, got: usize },
    #[error("all target energies are equal; R² is undefined")]
    DegenerateTargets,
    #[error("group '{0}' is empty")]
    EmptyGroup(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("input has zero rank variance")]
    ConstantInput,
}

pub type Result<T> = std::result::Result<T, UqError>;

/// In-domain, out-of-domain, or unlabeled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DomainTag {
    In,
    Out,
    Unlabeled,
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DomainTag::In => "in",
            DomainTag::Out => "out",
            DomainTag::Unlabeled => "unlabeled",
        })
    }
}

impl FromStr for DomainTag {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "in" => Ok(DomainTag::In),
            "out" => Ok(DomainTag::Out),
            "unlabeled" => Ok(DomainTag::Unlabeled),
            other => Err(format!("unknown domain tag '{other}' (expected in, out or unlabeled)")),
        }
    }
}

/// One evaluated structure.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub id: String,
    pub n_atoms: usize,
    /// eV
    pub true_energy: f64,
    /// eV
    pub predicted_mean: f64,
    /// eV²
    pub variance: f64,
    /// eV/atom
    pub sigma_per_atom: f64,
    /// eV
    pub abs_error: f64,
    pub domain_tag: DomainTag,
}

impl EvalRecord {
    pub fn new(id: impl Into<String>, pred: &EnsemblePrediction, true_energy: f64, domain_tag: DomainTag) -> Self {
        EvalRecord {
            id: id.into(),
            n_atoms: pred.n_atoms,
            true_energy,
            predicted_mean: pred.mean,
            variance: pred.variance,
            sigma_per_atom: pred.sigma_per_atom,
            abs_error: (pred.mean - true_energy).abs(),
            domain_tag,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParityMetrics {
    /// `None` when every target is equal.
    pub r2: Option<f64>,
    /// eV
    pub rmse: f64,
    /// eV
    pub mae: f64,
}

impl ParityMetrics {
    pub fn r2(&self) -> Result<f64> {
        self.r2.ok_or(UqError::DegenerateTargets)
    }
}

/// R², RMSE and MAE of the predicted means against the targets.
pub fn parity_metrics(records: &[EvalRecord]) -> Result<ParityMetrics> {
    let n = records.len();
    if n < 2 {
        return Err(UqError::TooFewRecords { needed: 2, got: n });
    }
    let nf = n as f64;
    let mean_true = records.iter().map(|r| r.true_energy).sum::<f64>() / nf;
    let (mut ss_res, mut ss_tot, mut abs_sum) = (0.0, 0.0, 0.0);
    for r in records {
        let res = r.true_energy - r.predicted_mean;
        ss_res += res * res;
        ss_tot += (r.true_energy - mean_true).powi(2);
        abs_sum += res.abs();
    }
    let degenerate = records.iter().all(|r| r.true_energy == records[0].true_energy);
    Ok(ParityMetrics {
        r2: (!degenerate).then(|| 1.0 - ss_res / ss_tot),
        rmse: (ss_res / nf).sqrt(),
        mae: abs_sum / nf,
    })
}

/// One point of a bond or volume scan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanPoint {
    pub coordinate: f64,
    pub mean: f64,
    pub variance: f64,
    pub true_energy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeEnergy {
    pub coordinate: f64,
    /// predicted − true, eV
    pub delta: f64,
    /// eV
    pub sigma: f64,
}

/// `Δ(x) = ȳ(x) − E(x)` paired with `σ(x)`.
pub fn relative_energy_curve(scan: &[ScanPoint]) -> Vec<RelativeEnergy> {
    scan.iter()
        .map(|p| RelativeEnergy { coordinate: p.coordinate, delta: p.mean - p.true_energy, sigma: p.variance.sqrt() })
        .collect()
}

/// Box-plot statistics; quartiles by linear interpolation between ranks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiveNumberSummary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl FiveNumberSummary {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(FiveNumberSummary {
            min: v[0],
            q1: quantile_sorted(&v, 0.25),
            median: quantile_sorted(&v, 0.5),
            q3: quantile_sorted(&v, 0.75),
            max: v[v.len() - 1],
            mean: v.iter().sum::<f64>() / v.len() as f64,
        })
    }
}

/// Per-tag summaries of σ/atom (eV/atom) and of the variance (eV²).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupSummary {
    pub count: usize,
    pub sigma_per_atom: FiveNumberSummary,
    pub variance: FiveNumberSummary,
}

pub fn variance_summary(records: &[EvalRecord]) -> Result<BTreeMap<DomainTag, GroupSummary>> {
    if records.is_empty() {
        return Err(UqError::EmptyGroup("all".into()));
    }
    let mut groups: BTreeMap<DomainTag, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.domain_tag).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(tag, rs)| {
            let sig: Vec<f64> = rs.iter().map(|r| r.sigma_per_atom).collect();
            let var: Vec<f64> = rs.iter().map(|r| r.variance).collect();
            let empty = || UqError::EmptyGroup(tag.to_string());
            Ok((
                tag,
                GroupSummary {
                    count: rs.len(),
                    sigma_per_atom: FiveNumberSummary::from_values(&sig).ok_or_else(empty)?,
                    variance: FiveNumberSummary::from_values(&var).ok_or_else(empty)?,
                },
            ))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileBin {
    /// 0 holds the lowest energies.
    pub bin: usize,
    pub count: usize,
    /// eV
    pub mean_energy: f64,
    /// eV²
    pub mean_variance: f64,
    /// eV
    pub mean_abs_error: f64,
}

/// Sorts by true energy and averages variance and error over `n_bins`
/// equal-count bins. The first `len % n_bins` bins hold one extra record.
pub fn energy_sorted_profile(records: &[EvalRecord], n_bins: usize) -> Result<Vec<ProfileBin>> {
    if n_bins == 0 || records.len() < n_bins {
        return Err(UqError::TooFewRecords { needed: n_bins.max(1), got: records.len() });
    }
    let mut sorted: Vec<&EvalRecord> = records.iter().collect();
    // Full key so that ties land in the same bin regardless of input order.
    sorted.sort_by(|a, b| {
        a.true_energy
            .total_cmp(&b.true_energy)
            .then(a.variance.total_cmp(&b.variance))
            .then(a.abs_error.total_cmp(&b.abs_error))
            .then(a.id.cmp(&b.id))
    });
    let base = records.len() / n_bins;
    let extra = records.len() % n_bins;
    let mut out = Vec::with_capacity(n_bins);
    let mut start = 0;
    for bin in 0..n_bins {
        let len = base + usize::from(bin < extra);
        let chunk = &sorted[start..start + len];
        let mean = |f: fn(&EvalRecord) -> f64| chunk.iter().map(|r| f(r)).sum::<f64>() / len as f64;
        out.push(ProfileBin {
            bin,
            count: len,
            mean_energy: mean(|r| r.true_energy),
            mean_variance: mean(|r| r.variance),
            mean_abs_error: mean(|r| r.abs_error),
        });
        start += len;
    }
    Ok(out)
}

/// 1-based ranks, ties share their average rank.
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut k = 0;
    while k < order.len() {
        let mut end = k + 1;
        while end < order.len() && v[order[end]] == v[order[k]] {
            end += 1;
        }
        let avg = (k + 1 + end) as f64 / 2.0;
        for &idx in &order[k..end] {
            ranks[idx] = avg;
        }
        k = end;
    }
    ranks
}

/// Spearman rank correlation with average-rank ties.
pub fn rank_correlation(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(UqError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 3 {
        return Err(UqError::TooFewRecords { needed: 3, got: xs.len() });
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    // Average ranks always have mean (n+1)/2.
    let centre = (xs.len() + 1) as f64 / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        let (da, db) = (a - centre, b - centre);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(UqError::ConstantInput);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}
