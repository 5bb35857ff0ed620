//! Deterministic palette-guided recoloring.
//!
//! Block `i` of an edited palette recolors source cluster `i`. Pixels are
//! moved in Lab by the difference between the target and source block colors,
//! so texture inside a cluster is kept. 1D+ targets additionally rebalance
//! cluster membership toward the requested proportions, and 2D targets use a
//! smoothly interpolated per-cell offset field.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::color::{LabColor, RgbColor};
use crate::palette::{
    cell_index, ColorClusters, Extraction, Palette, Palette1D, Palette1DPlus, Palette2D, PaletteFormat,
};
use crate::raster::Image;
use crate::segmentation::{squared_distance, FeatureMatrix};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RecolorError {
    #[error("target format {got} does not match source format {expected}")]
    FormatMismatch { expected: PaletteFormat, got: PaletteFormat },
    #[error("target has {got} colors (k={got_k}), source has {expected} (k={expected_k})")]
    KMismatch {
        expected: usize,
        got: usize,
        expected_k: usize,
        got_k: usize,
    },
    #[error("target grid {got}x{got} does not match source grid {expected}x{expected}")]
    GridMismatch { expected: usize, got: usize },
    #[error("all cluster centers coincide")]
    DegenerateCenters,
    #[error("invalid target proportions: {0}")]
    InvalidTargets(String),
    #[error("invalid recolor options: {0}")]
    InvalidOptions(String),
    #[error("source extraction carries no pixel clusters")]
    MissingClusters,
    #[error("source was extracted from a different image")]
    ImageMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecolorOptions {
    /// Largest accepted |achieved - target| proportion error.
    pub balance_eps: f64,
    pub balance_max_iter: usize,
    /// 1 = bilinear offset field, 0 = constant offset per grid cell.
    pub feather: f64,
    pub seed: u64,
}

impl Default for RecolorOptions {
    fn default() -> Self {
        Self {
            balance_eps: 0.02,
            balance_max_iter: 200,
            feather: 1.0,
            seed: 0,
        }
    }
}

impl RecolorOptions {
    pub fn validate(&self) -> Result<(), RecolorError> {
        if !(self.balance_eps > 0.0 && self.balance_eps < 1.0) {
            return Err(RecolorError::InvalidOptions(format!(
                "balance_eps {} not in (0, 1)",
                self.balance_eps
            )));
        }
        if self.balance_max_iter == 0 {
            return Err(RecolorError::InvalidOptions("balance_max_iter must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.feather) {
            return Err(RecolorError::InvalidOptions(format!(
                "feather {} not in [0, 1]",
                self.feather
            )));
        }
        Ok(())
    }
}

/// Result of [`balanced_assign`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalancedAssignment {
    pub assignments: Vec<usize>,
    pub biases: Vec<f64>,
    pub achieved: Vec<f64>,
    /// max_i |achieved_i - target_i|.
    pub residual: f64,
    /// Bias sweeps performed.
    pub iterations: usize,
    pub residual_history: Vec<f64>,
    /// Whether the final quota pass had to move points the biases could not
    /// separate (e.g. identical points).
    pub repaired: bool,
}

/// Smallest bias step tried before falling back to quota repair.
const MIN_STEP: f64 = 1.0 / (1u64 << 30) as f64;

/// Points grouped by identical coordinates, in first-appearance order.
struct Groups {
    rows: Vec<Vec<f64>>,
    weights: Vec<usize>,
}

struct GroupedBalance {
    /// Per group: (cluster, member count) slices, in member order.
    allocation: Vec<Vec<(usize, usize)>>,
    biases: Vec<f64>,
    achieved: Vec<f64>,
    residual: f64,
    iterations: usize,
    residual_history: Vec<f64>,
    repaired: bool,
}

fn validate_targets(targets: &[f64], k: usize) -> Result<(), RecolorError> {
    if targets.len() != k {
        return Err(RecolorError::InvalidTargets(format!(
            "{} targets for {k} centers",
            targets.len()
        )));
    }
    if targets.iter().any(|t| !(*t > 0.0)) {
        return Err(RecolorError::InvalidTargets("targets must be positive".into()));
    }
    let sum: f64 = targets.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(RecolorError::InvalidTargets(format!("targets sum to {sum}")));
    }
    Ok(())
}

fn biased_argmin(costs: &[f64], biases: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_v = f64::INFINITY;
    for i in 0..costs.len() {
        let v = costs[i] - biases[i];
        let tie_wins = v == best_v
            && centers[i]
                .iter()
                .zip(&centers[best])
                .map(|(a, b)| a.total_cmp(b))
                .find(|o| o.is_ne())
                .is_some_and(|o| o.is_lt());
        if v < best_v || tie_wins {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Integer cluster sizes closest to `targets * n` (largest remainder).
fn quotas(targets: &[f64], n: usize) -> Vec<usize> {
    let raw: Vec<f64> = targets.iter().map(|t| t * n as f64).collect();
    let mut q: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut left = n.saturating_sub(q.iter().sum());
    let mut order: Vec<usize> = (0..targets.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    for i in order.into_iter().cycle() {
        if left == 0 {
            break;
        }
        q[i] += 1;
        left -= 1;
    }
    q
}

fn balance_groups(
    groups: &Groups,
    centers: &[Vec<f64>],
    targets: &[f64],
    opts: &RecolorOptions,
) -> Result<GroupedBalance, RecolorError> {
    let k = centers.len();
    let n: usize = groups.weights.iter().sum();
    let g = groups.rows.len();

    if k == 1 {
        return Ok(GroupedBalance {
            allocation: groups.weights.iter().map(|&w| vec![(0, w)]).collect(),
            biases: vec![0.0],
            achieved: vec![1.0],
            residual: 0.0,
            iterations: 1,
            residual_history: vec![0.0],
            repaired: false,
        });
    }

    let mut pair_sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..k {
        for j in i + 1..k {
            pair_sum += squared_distance(&centers[i], &centers[j]);
            pairs += 1;
        }
    }
    let scale = pair_sum / pairs as f64;
    if scale == 0.0 {
        return Err(RecolorError::DegenerateCenters);
    }

    let costs: Vec<Vec<f64>> = groups
        .rows
        .iter()
        .map(|r| centers.iter().map(|c| squared_distance(r, c)).collect())
        .collect();

    let sweep = |biases: &[f64]| {
        let assign: Vec<usize> = costs.iter().map(|c| biased_argmin(c, biases, centers)).collect();
        let mut counts = vec![0usize; k];
        for (a, w) in assign.iter().zip(&groups.weights) {
            counts[*a] += w;
        }
        let achieved: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
        let residual = achieved
            .iter()
            .zip(targets)
            .map(|(a, t)| (a - t).abs())
            .fold(0.0, f64::max);
        (assign, achieved, residual)
    };

    let mut biases = vec![0.0; k];
    let (mut assign, mut achieved, mut residual) = sweep(&biases);
    let mut history = vec![residual];
    let mut iterations = 1;
    // a step is kept only if it lowers the residual; otherwise it is halved
    let mut step = 1.0;
    while residual > opts.balance_eps && iterations < opts.balance_max_iter && step >= MIN_STEP {
        iterations += 1;
        let proposal: Vec<f64> = (0..k)
            .map(|i| biases[i] + step * (targets[i] - achieved[i]) * scale)
            .collect();
        let (a, ach, r) = sweep(&proposal);
        if r < residual {
            biases = proposal;
            assign = a;
            achieved = ach;
            residual = r;
            history.push(r);
            step = (step * 2.0).min(1.0);
        } else {
            step *= 0.5;
        }
    }
    let converged = residual <= opts.balance_eps;
    let best_biases = biases;

    let mut allocation: Vec<Vec<(usize, usize)>> =
        assign.iter().zip(&groups.weights).map(|(&a, &w)| vec![(a, w)]).collect();
    let mut counts = vec![0usize; k];
    for (a, w) in assign.iter().zip(&groups.weights) {
        counts[*a] += w;
    }

    let repaired = !converged;
    if repaired {
        let quota = quotas(targets, n);
        let mut moves: Vec<(f64, usize, usize)> = Vec::new();
        for gi in 0..g {
            let from = assign[gi];
            if counts[from] <= quota[from] {
                continue;
            }
            for j in 0..k {
                if counts[j] < quota[j] {
                    moves.push((costs[gi][j] - costs[gi][from], gi, j));
                }
            }
        }
        moves.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut remaining: Vec<usize> = groups.weights.clone();
        for (_, gi, j) in moves {
            let from = assign[gi];
            let excess = counts[from].saturating_sub(quota[from]);
            let deficit = quota[j].saturating_sub(counts[j]);
            let m = excess.min(deficit).min(remaining[gi]);
            if m == 0 {
                continue;
            }
            remaining[gi] -= m;
            counts[from] -= m;
            counts[j] += m;
            allocation[gi][0].1 -= m;
            allocation[gi].push((j, m));
        }
        for a in &mut allocation {
            a.retain(|&(_, c)| c > 0);
        }
    }

    let achieved: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
    let residual = achieved
        .iter()
        .zip(targets)
        .map(|(a, t)| (a - t).abs())
        .fold(0.0, f64::max);
    if repaired {
        history.push(residual);
    }
    Ok(GroupedBalance {
        allocation,
        biases: best_biases,
        achieved,
        residual,
        iterations,
        residual_history: history,
        repaired,
    })
}

/// Assigns points to centers so cluster shares approach `targets`.
///
/// Each sweep assigns every point to `argmin_i(|p - c_i|^2 - bias_i)`; biases
/// then move by `step * (target_i - achieved_i) * s`, where `s` is the mean
/// squared distance between centers. `step` starts at 1 and is halved
/// whenever a move fails to lower the residual, so the residual history never
/// increases. If the sweeps cannot reach
/// `balance_eps` (identical points cannot be split by biases alone) the
/// cheapest reassignments are applied until integer quotas are met.
pub fn balanced_assign(
    points: &FeatureMatrix,
    centers: &[Vec<f64>],
    targets: &[f64],
    opts: &RecolorOptions,
) -> Result<BalancedAssignment, RecolorError> {
    opts.validate()?;
    if centers.is_empty() {
        return Err(RecolorError::InvalidTargets("no centers".into()));
    }
    validate_targets(targets, centers.len())?;
    if points.is_empty() {
        return Err(RecolorError::InvalidTargets("no points".into()));
    }

    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut groups = Groups {
        rows: Vec::new(),
        weights: Vec::new(),
    };
    let mut member_group = Vec::with_capacity(points.len());
    for r in points.rows() {
        let key: Vec<u64> = r.iter().map(|v| (v + 0.0).to_bits()).collect();
        let gi = *index.entry(key).or_insert_with(|| {
            groups.rows.push(r.to_vec());
            groups.weights.push(0);
            groups.rows.len() - 1
        });
        groups.weights[gi] += 1;
        member_group.push(gi);
    }

    let balance = balance_groups(&groups, centers, targets, opts)?;
    let mut cursor = vec![(0usize, 0usize); groups.rows.len()];
    let assignments = member_group
        .iter()
        .map(|&gi| next_slot(&balance.allocation[gi], &mut cursor[gi]))
        .collect();
    Ok(BalancedAssignment {
        assignments,
        biases: balance.biases,
        achieved: balance.achieved,
        residual: balance.residual,
        iterations: balance.iterations,
        residual_history: balance.residual_history,
        repaired: balance.repaired,
    })
}

/// Next cluster from a group's allocation list; `cursor` is (slice, used).
fn next_slot(alloc: &[(usize, usize)], cursor: &mut (usize, usize)) -> usize {
    while cursor.1 >= alloc[cursor.0].1 {
        cursor.0 += 1;
        cursor.1 = 0;
    }
    cursor.1 += 1;
    alloc[cursor.0].0
}

/// Everything needed to recolor an image against a previously extracted
/// palette.
#[derive(Debug, Clone, Copy)]
pub struct RecolorRequest<'a> {
    pub image: &'a Image,
    pub source: &'a Extraction,
    pub target: &'a Palette,
    pub options: RecolorOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecolorOutcome {
    pub image: Image,
    /// Present for 1D+ targets.
    pub balance: Option<BalancedAssignment>,
}

fn check_k(source_colors: usize, source_k: usize, target_colors: usize, target_k: usize) -> Result<(), RecolorError> {
    if source_colors != target_colors || source_k != target_k {
        return Err(RecolorError::KMismatch {
            expected: source_colors,
            got: target_colors,
            expected_k: source_k,
            got_k: target_k,
        });
    }
    Ok(())
}

fn clusters_for<'a>(image: &Image, source: &'a Extraction) -> Result<&'a ColorClusters, RecolorError> {
    let c = source.clusters.as_ref().ok_or(RecolorError::MissingClusters)?;
    if c.labels.len() != image.len() {
        return Err(RecolorError::ImageMismatch);
    }
    Ok(c)
}

/// Recolors `req.image`, dispatching on the palette format.
pub fn recolor(req: &RecolorRequest<'_>) -> Result<RecolorOutcome, RecolorError> {
    req.options.validate()?;
    let (sf, tf) = (req.source.palette.format(), req.target.format());
    if sf != tf {
        return Err(RecolorError::FormatMismatch {
            expected: sf,
            got: tf,
        });
    }
    match (&req.source.palette, req.target) {
        (Palette::Uniform(src), Palette::Uniform(tgt)) => {
            let clusters = clusters_for(req.image, req.source)?;
            Ok(RecolorOutcome {
                image: recolor_1d(req.image, src, clusters, tgt)?,
                balance: None,
            })
        }
        (Palette::Proportional(src), Palette::Proportional(tgt)) => {
            let clusters = clusters_for(req.image, req.source)?;
            let (image, balance) = recolor_1d_plus(req.image, src, clusters, tgt, &req.options)?;
            Ok(RecolorOutcome {
                image,
                balance: Some(balance),
            })
        }
        (Palette::Spatial(src), Palette::Spatial(tgt)) => Ok(RecolorOutcome {
            image: recolor_2d(req.image, src, tgt, &req.options)?,
            balance: None,
        }),
        _ => unreachable!("formats compared above"),
    }
}

/// Lab values after the per-cluster offset, before gamut clamping.
#[cfg(test)]
pub(crate) fn offset_lab(
    image: &Image,
    labels: &[usize],
    source: &[RgbColor],
    target: &[RgbColor],
) -> Vec<LabColor> {
    let shift: Vec<LabColor> = source
        .iter()
        .zip(target)
        .map(|(s, t)| t.to_lab() - s.to_lab())
        .collect();
    image
        .to_lab()
        .into_iter()
        .zip(labels)
        .map(|(p, &l)| p + shift[l])
        .collect()
}

fn render(image: &Image, lab: impl Iterator<Item = LabColor>) -> Image {
    let pixels = lab.map(LabColor::to_rgb).collect();
    Image::new(image.width(), image.height(), pixels).expect("same dimensions as the source")
}

/// Shifts every pixel of cluster `i` by `target_i - source_i` in Lab.
pub fn recolor_1d(
    image: &Image,
    source: &Palette1D,
    clusters: &ColorClusters,
    target: &Palette1D,
) -> Result<Image, RecolorError> {
    check_k(source.colors.len(), source.k, target.colors.len(), target.k)?;
    if clusters.labels.len() != image.len() {
        return Err(RecolorError::ImageMismatch);
    }
    let mut memo: HashMap<(RgbColor, usize), RgbColor> = HashMap::new();
    let pixels = image
        .pixels()
        .iter()
        .zip(&clusters.labels)
        .map(|(&p, &l)| {
            *memo.entry((p, l)).or_insert_with(|| {
                let shift = target.colors[l].to_lab() - source.colors[l].to_lab();
                (p.to_lab() + shift).to_rgb()
            })
        })
        .collect();
    Ok(Image::new(image.width(), image.height(), pixels).expect("same dimensions as the source"))
}

/// Rebalances cluster membership toward the target proportions, then moves
/// each pixel by `target_assigned - source_own`, where `source_own` is the
/// source color of the cluster the pixel naturally belongs to.
pub fn recolor_1d_plus(
    image: &Image,
    source: &Palette1DPlus,
    clusters: &ColorClusters,
    target: &Palette1DPlus,
    opts: &RecolorOptions,
) -> Result<(Image, BalancedAssignment), RecolorError> {
    opts.validate()?;
    check_k(source.colors.len(), source.k, target.colors.len(), target.k)?;
    if clusters.labels.len() != image.len() {
        return Err(RecolorError::ImageMismatch);
    }
    validate_targets(&target.proportions, clusters.centers.len())?;

    // identical colors always share a cluster, so group by color
    let mut index: HashMap<RgbColor, usize> = HashMap::new();
    let mut groups = Groups {
        rows: Vec::new(),
        weights: Vec::new(),
    };
    let mut natural = Vec::new();
    let mut member_group = Vec::with_capacity(image.len());
    for (&p, &l) in image.pixels().iter().zip(&clusters.labels) {
        let gi = *index.entry(p).or_insert_with(|| {
            groups.rows.push(p.to_lab().to_array().to_vec());
            groups.weights.push(0);
            natural.push(l);
            groups.rows.len() - 1
        });
        groups.weights[gi] += 1;
        member_group.push(gi);
    }
    let centers: Vec<Vec<f64>> = clusters.centers.iter().map(|c| c.to_array().to_vec()).collect();
    let balance = balance_groups(&groups, &centers, &target.proportions, opts)?;

    let source_lab: Vec<LabColor> = source.colors.iter().map(|c| c.to_lab()).collect();
    let target_lab: Vec<LabColor> = target.colors.iter().map(|c| c.to_lab()).collect();
    let mut memo: HashMap<(usize, usize), RgbColor> = HashMap::new();
    let mut cursor = vec![(0usize, 0usize); groups.rows.len()];
    let mut assignments = Vec::with_capacity(image.len());
    let pixels = member_group
        .iter()
        .map(|&gi| {
            let assigned = next_slot(&balance.allocation[gi], &mut cursor[gi]);
            assignments.push(assigned);
            *memo.entry((gi, assigned)).or_insert_with(|| {
                let p = LabColor::from_slice(&groups.rows[gi]);
                (target_lab[assigned] + (p - source_lab[natural[gi]])).to_rgb()
            })
        })
        .collect();
    let out = Image::new(image.width(), image.height(), pixels).expect("same dimensions as the source");
    Ok((
        out,
        BalancedAssignment {
            assignments,
            biases: balance.biases,
            achieved: balance.achieved,
            residual: balance.residual,
            iterations: balance.iterations,
            residual_history: balance.residual_history,
            repaired: balance.repaired,
        },
    ))
}

/// Interpolation position of pixel `i` along an axis of `len` pixels split
/// into `grid` cells: (lower cell, upper cell, weight of the upper cell).
fn axis_weights(i: usize, len: usize, grid: usize) -> (usize, usize, f64) {
    let u = (i as f64 + 0.5) * grid as f64 / len as f64 - 0.5;
    let lo = (u.floor().max(0.0) as usize).min(grid - 1);
    let hi = (lo + 1).min(grid - 1);
    let frac = (u - lo as f64).clamp(0.0, 1.0);
    (lo, hi, if hi == lo { 0.0 } else { frac })
}

/// Per-pixel Lab offset of a 2D edit: bilinear between cell centers, mixed
/// with the constant per-cell offset by `1 - feather`.
pub fn offset_field(
    source: &Palette2D,
    target: &Palette2D,
    width: usize,
    height: usize,
    feather: f64,
) -> Result<Vec<LabColor>, RecolorError> {
    let g = source.size();
    if target.size() != g {
        return Err(RecolorError::GridMismatch {
            expected: g,
            got: target.size(),
        });
    }
    let cell: Vec<Vec<LabColor>> = source
        .grid
        .iter()
        .zip(&target.grid)
        .map(|(s, t)| s.iter().zip(t).map(|(s, t)| t.to_lab() - s.to_lab()).collect())
        .collect();
    let xs: Vec<_> = (0..width).map(|x| axis_weights(x, width, g)).collect();
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let (y0, y1, fy) = axis_weights(y, height, g);
        let gy = cell_index(y, height, g);
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            let top = cell[y0][x0] * (1.0 - fx) + cell[y0][x1] * fx;
            let bottom = cell[y1][x0] * (1.0 - fx) + cell[y1][x1] * fx;
            let smooth = top * (1.0 - fy) + bottom * fy;
            let blocky = cell[gy][cell_index(x, width, g)];
            out.push(smooth * feather + blocky * (1.0 - feather));
        }
    }
    Ok(out)
}

pub fn recolor_2d(
    image: &Image,
    source: &Palette2D,
    target: &Palette2D,
    opts: &RecolorOptions,
) -> Result<Image, RecolorError> {
    opts.validate()?;
    let field = offset_field(source, target, image.width(), image.height(), opts.feather)?;
    let lab = image.to_lab();
    Ok(render(image, lab.into_iter().zip(field).map(|(p, d)| p + d)))
}
