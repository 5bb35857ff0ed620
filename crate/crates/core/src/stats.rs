//! Rating statistics: Creativity Support Index scoring, paired t-test,
//! Kruskal-Wallis H, and Tukey HSD with studentized-range p-values.

use std::collections::BTreeMap;
use std::f64::consts::{PI, SQRT_2};
use std::fmt::Write as _;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

pub mod io;

pub const SIGNIFICANCE: f64 = 0.05;
pub const CSI_COMPARISONS: u32 = 15;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("pair counts sum to {0}, expected 15")]
    InvalidWeights(u32),
    #[error("rating {0} is out of range")]
    InvalidRating(f64),
    #[error("samples have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("differences have zero variance")]
    ZeroVariance,
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("not enough data: {0}")]
    InsufficientData(String),
    #[error("schema violation: {0}")]
    Schema(String),
}

/// Degrees of freedom of a test statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Df {
    One(f64),
    Two(f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub df: Df,
    pub p_value: f64,
    /// Adjusted pairwise p-values (symmetric, unit diagonal).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairwise: Option<Vec<Vec<f64>>>,
    /// Pairwise studentized range statistics (symmetric, zero diagonal).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairwise_statistic: Option<Vec<Vec<f64>>>,
}

// ---------------------------------------------------------------- CSI

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CsiFactor {
    Enjoyment,
    Exploration,
    Expressiveness,
    Immersion,
    Collaboration,
    ResultsWorthEffort,
}

impl CsiFactor {
    pub const ALL: [CsiFactor; 6] = [
        Self::Enjoyment,
        Self::Exploration,
        Self::Expressiveness,
        Self::Immersion,
        Self::Collaboration,
        Self::ResultsWorthEffort,
    ];

    pub fn parse(s: &str) -> Option<Self> {
        let norm: String = s
            .trim()
            .to_ascii_lowercase()
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect();
        Some(match norm.as_str() {
            "enjoyment" => Self::Enjoyment,
            "exploration" => Self::Exploration,
            "expressiveness" => Self::Expressiveness,
            "immersion" => Self::Immersion,
            "collaboration" => Self::Collaboration,
            "resultswortheffort" => Self::ResultsWorthEffort,
            _ => return None,
        })
    }
}

/// One participant's CSI answers: a 0-10 agreement rating per factor and the
/// number of times each factor won the 15 paired comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsiResponse {
    pub factor_ratings: [f64; 6],
    pub pair_counts: [u32; 6],
}

/// CSI score in [0, 100]: `sum(2 * rating * count) / 3`.
///
/// Ratings are doubled because each factor was asked once on a 0-10 scale
/// while the index is defined on two-item 0-20 factor scores.
pub fn csi_score(resp: &CsiResponse) -> Result<f64, StatsError> {
    let total: u32 = resp.pair_counts.iter().sum();
    if total != CSI_COMPARISONS {
        return Err(StatsError::InvalidWeights(total));
    }
    if let Some(&r) = resp.factor_ratings.iter().find(|r| !(0.0..=10.0).contains(*r)) {
        return Err(StatsError::InvalidRating(r));
    }
    Ok(resp
        .factor_ratings
        .iter()
        .zip(&resp.pair_counts)
        .map(|(r, &c)| 2.0 * r * f64::from(c))
        .sum::<f64>()
        / 3.0)
}

// ---------------------------------------------------------------- t-test

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Two-sided paired t-test on `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TestResult, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(StatsError::InsufficientData("paired t-test needs n >= 2".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let m = mean(&diffs);
    let var = diffs.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    let t = m / (var / n as f64).sqrt();
    let df = (n - 1) as f64;
    let dist = StudentsT::new(0.0, 1.0, df).expect("df is positive");
    let p = (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0);
    Ok(TestResult {
        statistic: t,
        df: Df::One(df),
        p_value: p,
        pairwise: None,
        pairwise_statistic: None,
    })
}

// ---------------------------------------------------------------- Kruskal-Wallis

/// Mid-ranks (1-based) of all observations, in input order.
fn average_ranks(values: &[f64]) -> (Vec<f64>, f64) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = rank;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    (ranks, tie_term)
}

/// Kruskal-Wallis H with tie correction; p from the chi-square upper tail.
pub fn kruskal_wallis<G: AsRef<[f64]>>(groups: &[G]) -> Result<TestResult, StatsError> {
    if groups.len() < 2 {
        return Err(StatsError::InsufficientData("need at least two groups".into()));
    }
    if groups.iter().any(|g| g.as_ref().is_empty()) {
        return Err(StatsError::InsufficientData("every group needs an observation".into()));
    }
    let all: Vec<f64> = groups.iter().flat_map(|g| g.as_ref().iter().copied()).collect();
    let n = all.len() as f64;
    if all.len() < 3 {
        return Err(StatsError::InsufficientData("need at least three observations".into()));
    }
    let (ranks, tie_term) = average_ranks(&all);
    let correction = 1.0 - tie_term / (n * n * n - n);
    if correction <= 0.0 {
        return Err(StatsError::DegenerateData("all observations are identical".into()));
    }
    let mut offset = 0;
    let mut sum = 0.0;
    for g in groups {
        let len = g.as_ref().len();
        let r: f64 = ranks[offset..offset + len].iter().sum();
        sum += r * r / len as f64;
        offset += len;
    }
    let h = ((12.0 / (n * (n + 1.0)) * sum - 3.0 * (n + 1.0)) / correction).max(0.0);
    let df = (groups.len() - 1) as f64;
    let p = ChiSquared::new(df).expect("df is positive").sf(h).clamp(0.0, 1.0);
    Ok(TestResult {
        statistic: h,
        df: Df::One(df),
        p_value: p,
        pairwise: None,
        pairwise_statistic: None,
    })
}

// ---------------------------------------------------------------- studentized range

/// 16-point Gauss-Legendre nodes and weights on [-1, 1].
fn gauss_legendre() -> &'static [(f64, f64)] {
    static NODES: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    NODES.get_or_init(|| {
        let n = 16;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for j in 2..=n {
                    let j = j as f64;
                    let p2 = ((2.0 * j - 1.0) * x * p1 - (j - 1.0) * p0) / j;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            out.push((x, 2.0 / ((1.0 - x * x) * dp * dp)));
        }
        out
    })
}

/// Composite Gauss-Legendre quadrature of `f` over [a, b] with `panels`
/// equal panels.
fn integrate(a: f64, b: f64, panels: usize, mut f: impl FnMut(f64) -> f64) -> f64 {
    let nodes = gauss_legendre();
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let mid = a + (p as f64 + 0.5) * h;
        let half = h / 2.0;
        for &(x, w) in nodes {
            total += w * half * f(mid + half * x);
        }
    }
    total
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// P(range of k iid standard normals <= w).
fn normal_range_cdf(w: f64, k: usize) -> f64 {
    if w <= 0.0 {
        return 0.0;
    }
    let k_f = k as f64;
    let v = integrate(-8.5, 8.5, 40, |z| {
        let d = normal_cdf(z) - normal_cdf(z - w);
        normal_pdf(z) * d.max(0.0).powi(k as i32 - 1)
    });
    (k_f * v).clamp(0.0, 1.0)
}

/// CDF of the studentized range distribution with `k` means and `df`
/// error degrees of freedom.
pub fn studentized_range_cdf(q: f64, k: usize, df: f64) -> f64 {
    if q <= 0.0 {
        return 0.0;
    }
    if df > 25_000.0 {
        return normal_range_cdf(q, k);
    }
    // density of s = sqrt(chi2_df / df)
    let log_norm = (df / 2.0) * df.ln() - ln_gamma(df / 2.0) - (df / 2.0 - 1.0) * 2f64.ln();
    let spread = 12.0 / (2.0 * df).sqrt();
    let lo = (1.0 - spread).max(0.0);
    let hi = 1.0 + spread;
    let v = integrate(lo, hi, 64, |s| {
        if s <= 0.0 {
            return 0.0;
        }
        let log_f = log_norm + (df - 1.0) * s.ln() - df * s * s / 2.0;
        log_f.exp() * normal_range_cdf(q * s, k)
    });
    v.clamp(0.0, 1.0)
}

// ---------------------------------------------------------------- Tukey HSD

/// Tukey HSD over all pairs of groups using the pooled within-group variance.
/// `statistic` is the largest pairwise studentized range.
pub fn tukey_hsd<G: AsRef<[f64]>>(groups: &[G]) -> Result<TestResult, StatsError> {
    let k = groups.len();
    if k < 2 {
        return Err(StatsError::InsufficientData("need at least two groups".into()));
    }
    if groups.iter().any(|g| g.as_ref().len() < 2) {
        return Err(StatsError::InsufficientData("every group needs two observations".into()));
    }
    let means: Vec<f64> = groups.iter().map(|g| mean(g.as_ref())).collect();
    let n_total: usize = groups.iter().map(|g| g.as_ref().len()).sum();
    let ssw: f64 = groups
        .iter()
        .zip(&means)
        .map(|(g, m)| g.as_ref().iter().map(|x| (x - m).powi(2)).sum::<f64>())
        .sum();
    let df = (n_total - k) as f64;
    let mse = ssw / df;
    if mse == 0.0 {
        return Err(StatsError::DegenerateData("zero pooled variance".into()));
    }
    let mut p = vec![vec![1.0; k]; k];
    let mut q = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let (ni, nj) = (groups[i].as_ref().len() as f64, groups[j].as_ref().len() as f64);
            let se = (mse / 2.0 * (1.0 / ni + 1.0 / nj)).sqrt();
            let stat = (means[i] - means[j]).abs() / se;
            let pv = (1.0 - studentized_range_cdf(stat, k, df)).clamp(0.0, 1.0);
            q[i][j] = stat;
            q[j][i] = stat;
            p[i][j] = pv;
            p[j][i] = pv;
        }
    }
    let max_q = q.iter().flatten().copied().fold(0.0, f64::max);
    let min_p = p.iter().flatten().copied().fold(1.0, f64::min);
    Ok(TestResult {
        statistic: max_q,
        df: Df::Two(k as f64, df),
        p_value: min_p,
        pairwise: Some(p),
        pairwise_statistic: Some(q),
    })
}

// ---------------------------------------------------------------- survey analysis

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Harmony,
    Valence,
    Arousal,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Self::Harmony, Self::Valence, Self::Arousal];

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "harmony" => Some(Self::Harmony),
            "valence" => Some(Self::Valence),
            "arousal" => Some(Self::Arousal),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rating {
    pub participant: String,
    pub condition: String,
    pub format: crate::palette::PaletteFormat,
    pub combination: String,
    pub metric: Metric,
    /// 1..=9
    pub rating: u8,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RatingsTable {
    pub rows: Vec<Rating>,
}

impl RatingsTable {
    pub fn push(&mut self, r: Rating) -> Result<(), StatsError> {
        if !(1..=9).contains(&r.rating) {
            return Err(StatsError::InvalidRating(f64::from(r.rating)));
        }
        self.rows.push(r);
        Ok(())
    }

    pub fn combinations(&self) -> Vec<String> {
        let mut c: Vec<String> = self.rows.iter().map(|r| r.combination.clone()).collect();
        c.sort();
        c.dedup();
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grouping {
    /// Compare palette formats, overall and within each color combination.
    Format,
    /// Compare color combinations.
    Combination,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairComparison {
    pub a: String,
    pub b: String,
    pub p_value: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisRow {
    /// "All" or a combination id.
    pub label: String,
    pub omnibus: TestResult,
    pub significant: bool,
    /// Post-hoc comparisons, run only when the omnibus test is significant.
    pub pairwise: Vec<PairComparison>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricAnalysis {
    pub metric: Metric,
    pub rows: Vec<AnalysisRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub grouping: Grouping,
    pub group_labels: Vec<String>,
    pub metrics: Vec<MetricAnalysis>,
}

fn analyze_groups(label: String, names: &[String], groups: &[Vec<f64>]) -> Result<AnalysisRow, StatsError> {
    let omnibus = kruskal_wallis(groups)?;
    let significant = omnibus.p_value < SIGNIFICANCE;
    let mut pairwise = Vec::new();
    if significant {
        let hsd = tukey_hsd(groups)?;
        let p = hsd.pairwise.expect("tukey returns a matrix");
        for i in 0..groups.len() {
            for j in i + 1..groups.len() {
                pairwise.push(PairComparison {
                    a: names[i].clone(),
                    b: names[j].clone(),
                    p_value: p[i][j],
                    significant: p[i][j] < SIGNIFICANCE,
                });
            }
        }
    }
    Ok(AnalysisRow {
        label,
        omnibus,
        significant,
        pairwise,
    })
}

/// Omnibus Kruskal-Wallis per metric, followed by Tukey HSD where
/// significant at 0.05.
///
/// With [`Grouping::Format`] each metric gets an "All" row plus one row per
/// color combination, comparing 1D, 1D+ and 2D ratings. With
/// [`Grouping::Combination`] each metric gets a single row comparing the
/// combinations.
pub fn analyze_ratings(table: &RatingsTable, grouping: Grouping) -> Result<AnalysisReport, StatsError> {
    use crate::palette::PaletteFormat;
    if table.rows.is_empty() {
        return Err(StatsError::InsufficientData("ratings table is empty".into()));
    }
    let combos = table.combinations();
    let group_labels: Vec<String> = match grouping {
        Grouping::Format => PaletteFormat::ALL.iter().map(|f| f.to_string()).collect(),
        Grouping::Combination => combos.clone(),
    };
    let mut metrics = Vec::new();
    for metric in Metric::ALL {
        let rows_m: Vec<&Rating> = table.rows.iter().filter(|r| r.metric == metric).collect();
        if rows_m.is_empty() {
            continue;
        }
        let mut rows = Vec::new();
        match grouping {
            Grouping::Format => {
                let by_format = |filter: &dyn Fn(&Rating) -> bool| -> Vec<Vec<f64>> {
                    PaletteFormat::ALL
                        .iter()
                        .map(|f| {
                            rows_m
                                .iter()
                                .filter(|r| r.format == *f && filter(r))
                                .map(|r| f64::from(r.rating))
                                .collect()
                        })
                        .collect()
                };
                rows.push(analyze_groups("All".into(), &group_labels, &by_format(&|_| true))?);
                for c in &combos {
                    rows.push(analyze_groups(
                        c.clone(),
                        &group_labels,
                        &by_format(&|r: &Rating| &r.combination == c),
                    )?);
                }
            }
            Grouping::Combination => {
                let mut by_combo: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
                for r in &rows_m {
                    by_combo.entry(&r.combination).or_default().push(f64::from(r.rating));
                }
                let groups: Vec<Vec<f64>> = combos
                    .iter()
                    .map(|c| by_combo.remove(c.as_str()).unwrap_or_default())
                    .collect();
                rows.push(analyze_groups("All".into(), &group_labels, &groups)?);
            }
        }
        metrics.push(MetricAnalysis { metric, rows });
    }
    Ok(AnalysisReport {
        grouping,
        group_labels,
        metrics,
    })
}

fn fmt_p(p: f64) -> String {
    if p < 0.001 {
        "<.001".to_string()
    } else {
        format!("{p:.3}")
    }
}

/// Plain-text table: one block per metric, one line per row, significant
/// entries marked with `*`.
pub fn render_report(report: &AnalysisReport) -> String {
    let mut out = String::new();
    for m in &report.metrics {
        let _ = writeln!(out, "{:?}", m.metric);
        let _ = write!(out, "  {:<8} {:>10} {:>8}", "row", "H(df)", "p");
        let pairs: Vec<(usize, usize)> = (0..report.group_labels.len())
            .flat_map(|i| (i + 1..report.group_labels.len()).map(move |j| (i, j)))
            .collect();
        for &(i, j) in &pairs {
            let name = format!("{} vs {}", report.group_labels[i], report.group_labels[j]);
            let _ = write!(out, " {name:>14}");
        }
        out.push('\n');
        for row in &m.rows {
            let df = match row.omnibus.df {
                Df::One(d) => d,
                Df::Two(a, _) => a,
            };
            let h = format!("{:.3}({})", row.omnibus.statistic, df);
            let mark = if row.significant { "*" } else { " " };
            let _ = write!(out, "  {:<8} {:>10} {:>7}{}", row.label, h, fmt_p(row.omnibus.p_value), mark);
            for &(i, j) in &pairs {
                let cell = row
                    .pairwise
                    .iter()
                    .find(|c| c.a == report.group_labels[i] && c.b == report.group_labels[j])
                    .map(|c| format!("{}{}", fmt_p(c.p_value), if c.significant { "*" } else { " " }))
                    .unwrap_or_else(|| "-".into());
                let _ = write!(out, " {cell:>14}");
            }
            out.push('\n');
        }
    }
    out
}
