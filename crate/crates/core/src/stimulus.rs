//! Survey stimulus generation: representative palettes, a canonical color
//! proportion, standardized spatial layouts, and the 31 rating conditions
//! per color combination.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::color::{delta_e, LabColor, RgbColor};
use crate::palette::{
    self, cell_index, ExtractionParams, Palette, Palette1D, Palette1DPlus, Palette2D, PaletteError, PaletteFormat,
};
use crate::raster::Image;
use crate::segmentation::{self, kmeans, squared_distance, FeatureMatrix, SegmentationError};

/// Colors per stimulus palette.
pub const STIMULUS_COLORS: usize = 5;
/// Clusters used for palette and layout selection.
pub const DEFAULT_CLUSTERS: usize = 5;
/// Candidates kept per palette cluster.
pub const DEFAULT_TOP: usize = 30;
pub const CONDITIONS_PER_COMBINATION: usize = 1 + STIMULUS_COLORS + STIMULUS_COLORS * STIMULUS_COLORS;

pub const STRIP_SWATCH: (usize, usize) = (500, 100);
pub const GRID_SWATCH: (usize, usize) = (250, 250);

#[derive(Debug, thiserror::Error)]
pub enum StimulusError {
    #[error("palettes have different sizes ({0} vs {1})")]
    SizeMismatch(usize, usize),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("corpus entry {id}: {reason}")]
    InvalidEntry { id: String, reason: String },
    #[error("layout has {got} distinct colors, expected {expected}")]
    ColorCountMismatch { expected: usize, got: usize },
    #[error("{distinct} distinct layouts available, {needed} required")]
    InsufficientLayouts { distinct: usize, needed: usize },
    #[error("wrong input size: {0}")]
    ArityError(String),
    #[error(transparent)]
    Clustering(#[from] SegmentationError),
    #[error(transparent)]
    Palette(#[from] PaletteError),
}

// ---------------------------------------------------------------- matching

/// Minimum-cost perfect matching on a square cost matrix (Hungarian method
/// with row/column potentials). Returns the column matched to each row.
fn min_cost_matching(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    // 1-based arrays; index 0 is a sentinel column
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut min_to = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < min_to[j] {
                    min_to[j] = cur;
                    way[j] = j0;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0; n];
    for j in 1..=n {
        if row_of[j] > 0 {
            col_of[row_of[j] - 1] = j - 1;
        }
    }
    col_of
}

fn lab_matching_distance(a: &[LabColor], b: &[LabColor]) -> f64 {
    let cost: Vec<Vec<f64>> = a.iter().map(|x| b.iter().map(|y| delta_e(*x, *y)).collect()).collect();
    min_cost_matching(&cost)
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i][j])
        .sum()
}

/// Order-independent palette distance: total ΔE of the cheapest one-to-one
/// pairing of colors.
pub fn palette_distance(a: &Palette1D, b: &Palette1D) -> Result<f64, StimulusError> {
    if a.colors.len() != b.colors.len() {
        return Err(StimulusError::SizeMismatch(a.colors.len(), b.colors.len()));
    }
    let la: Vec<LabColor> = a.colors.iter().map(|c| c.to_lab()).collect();
    let lb: Vec<LabColor> = b.colors.iter().map(|c| c.to_lab()).collect();
    Ok(lab_matching_distance(&la, &lb))
}

// ---------------------------------------------------------------- corpus

/// One design: its five dominant colors (largest share first) and its
/// spatial palette.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    #[serde(with = "uniform_palette")]
    pub palette: Palette1D,
    #[serde(with = "spatial_palette")]
    pub layout: Palette2D,
}

mod uniform_palette {
    use super::*;
    use serde::{de::Error, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(p: &Palette1D, s: S) -> Result<S::Ok, S::Error> {
        Palette::Uniform(p.clone()).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Palette1D, D::Error> {
        match Palette::deserialize(d)? {
            Palette::Uniform(p) => Ok(p),
            Palette::Proportional(p) => Ok(Palette1D { k: p.k, colors: p.colors }),
            Palette::Spatial(_) => Err(D::Error::custom("expected a 1d palette")),
        }
    }
}

mod spatial_palette {
    use super::*;
    use serde::{de::Error, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(p: &Palette2D, s: S) -> Result<S::Ok, S::Error> {
        Palette::Spatial(p.clone()).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Palette2D, D::Error> {
        match Palette::deserialize(d)? {
            Palette::Spatial(p) => Ok(p),
            _ => Err(D::Error::custom("expected a 2d palette")),
        }
    }
}

impl CorpusEntry {
    /// Extracts both palettes from a design image with five colors.
    pub fn from_image(id: impl Into<String>, image: &Image, seed: u64) -> Result<Self, StimulusError> {
        let id = id.into();
        let params = ExtractionParams::with_any_k(STIMULUS_COLORS).seed(seed);
        let entry = Self {
            palette: palette::extract_1d(image, &params)?,
            layout: palette::extract_2d(image, &params)?,
            id,
        };
        entry.validate()?;
        Ok(entry)
    }

    pub fn validate(&self) -> Result<(), StimulusError> {
        if self.palette.colors.len() != STIMULUS_COLORS {
            return Err(StimulusError::InvalidEntry {
                id: self.id.clone(),
                reason: format!("palette has {} colors, expected {STIMULUS_COLORS}", self.palette.colors.len()),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PaletteCorpus {
    pub entries: Vec<CorpusEntry>,
}

impl PaletteCorpus {
    pub fn new(entries: Vec<CorpusEntry>) -> Result<Self, StimulusError> {
        for e in &entries {
            e.validate()?;
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

// ---------------------------------------------------------------- representatives

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Index into the corpus.
    pub index: usize,
    pub id: String,
    /// Matching distance to the cluster center.
    pub distance: f64,
}

fn palette_embedding(p: &Palette1D) -> Vec<f64> {
    p.colors.iter().flat_map(|c| c.to_lab().to_array()).collect()
}

/// Clusters the corpus palettes with k-means on their concatenated Lab
/// colors and returns, per cluster, up to `top` members ordered by matching
/// distance to the cluster center.
pub fn select_representatives(
    corpus: &PaletteCorpus,
    k: usize,
    top: usize,
    seed: u64,
) -> Result<Vec<Vec<Candidate>>, StimulusError> {
    if corpus.is_empty() {
        return Err(StimulusError::EmptyCorpus);
    }
    let rows: Vec<Vec<f64>> = corpus.entries.iter().map(|e| palette_embedding(&e.palette)).collect();
    let points = FeatureMatrix::from_rows(&rows)?;
    let clustering = kmeans(&points, k, seed, segmentation::DEFAULT_KMEANS_MAX_ITER)?;
    let mut out = Vec::with_capacity(k);
    for (c, center) in clustering.centers.iter().enumerate() {
        let center_colors: Vec<LabColor> = center.chunks(3).map(LabColor::from_slice).collect();
        let mut members: Vec<Candidate> = clustering
            .assignments
            .iter()
            .enumerate()
            .filter(|&(_, &a)| a == c)
            .map(|(i, _)| {
                let colors: Vec<LabColor> = corpus.entries[i].palette.colors.iter().map(|x| x.to_lab()).collect();
                Candidate {
                    index: i,
                    id: corpus.entries[i].id.clone(),
                    distance: lab_matching_distance(&colors, &center_colors),
                }
            })
            .collect();
        members.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index)));
        members.truncate(top);
        out.push(members);
    }
    Ok(out)
}

// ---------------------------------------------------------------- proportion

/// Cell shares of the grid colors, largest first, padded with zeros to
/// [`STIMULUS_COLORS`] entries.
fn sorted_shares(p: &Palette2D) -> Vec<f64> {
    let cells = (p.size() * p.size()) as f64;
    let mut shares: Vec<f64> = p.color_cells().iter().map(|&(_, n)| n as f64 / cells).collect();
    shares.resize(shares.len().max(STIMULUS_COLORS), 0.0);
    shares.truncate(STIMULUS_COLORS);
    shares
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Component-wise median of the sorted color shares of every spatial
/// palette, renormalized to sum to one.
pub fn canonical_proportion(corpus: &PaletteCorpus) -> Result<Vec<f64>, StimulusError> {
    if corpus.is_empty() {
        return Err(StimulusError::EmptyCorpus);
    }
    let shares: Vec<Vec<f64>> = corpus.entries.iter().map(|e| sorted_shares(&e.layout)).collect();
    let med: Vec<f64> = (0..STIMULUS_COLORS)
        .map(|i| median(&mut shares.iter().map(|s| s[i]).collect::<Vec<_>>()))
        .collect();
    let total: f64 = med.iter().sum();
    Ok(med.iter().map(|m| m / total).collect())
}

// ---------------------------------------------------------------- layouts

/// A color-free spatial layout: each cell holds the area rank of its color
/// (0 = most cells).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LayoutSignature {
    pub size: usize,
    /// Row-major ranks.
    pub ranks: Vec<u8>,
}

impl LayoutSignature {
    pub fn new(size: usize, ranks: Vec<u8>) -> Result<Self, StimulusError> {
        if size == 0 || ranks.len() != size * size {
            return Err(StimulusError::ArityError(format!("{} ranks for a {size}x{size} layout", ranks.len())));
        }
        if let Some(r) = ranks.iter().find(|&&r| usize::from(r) >= STIMULUS_COLORS) {
            return Err(StimulusError::ArityError(format!("rank {r} out of range")));
        }
        Ok(Self { size, ranks })
    }

    pub fn rank(&self, row: usize, col: usize) -> u8 {
        self.ranks[row * self.size + col]
    }

    /// Cells per rank.
    pub fn rank_counts(&self) -> [usize; STIMULUS_COLORS] {
        let mut out = [0; STIMULUS_COLORS];
        for &r in &self.ranks {
            out[usize::from(r)] += 1;
        }
        out
    }

    fn one_hot(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.ranks.len() * STIMULUS_COLORS];
        for (i, &r) in self.ranks.iter().enumerate() {
            v[i * STIMULUS_COLORS + usize::from(r)] = 1.0;
        }
        v
    }

    /// Paints rank `r` cells with `colors[r]`.
    pub fn paint(&self, colors: &[RgbColor]) -> Vec<Vec<RgbColor>> {
        (0..self.size)
            .map(|row| (0..self.size).map(|col| colors[usize::from(self.rank(row, col))]).collect())
            .collect()
    }
}

/// Replaces each cell's color by the area rank of that color. Equal areas
/// rank by first appearance in a row-major scan.
pub fn standardize_layout(p: &Palette2D) -> Result<LayoutSignature, StimulusError> {
    let mut first_seen: Vec<RgbColor> = Vec::new();
    let mut counts: HashMap<RgbColor, usize> = HashMap::new();
    for &c in p.grid.iter().flatten() {
        let n = counts.entry(c).or_default();
        if *n == 0 {
            first_seen.push(c);
        }
        *n += 1;
    }
    if first_seen.len() != STIMULUS_COLORS {
        return Err(StimulusError::ColorCountMismatch {
            expected: STIMULUS_COLORS,
            got: first_seen.len(),
        });
    }
    let mut order: Vec<usize> = (0..first_seen.len()).collect();
    // stable sort keeps first-appearance order among equal counts
    order.sort_by(|&a, &b| counts[&first_seen[b]].cmp(&counts[&first_seen[a]]));
    let mut rank_of: HashMap<RgbColor, u8> = HashMap::new();
    for (rank, &i) in order.iter().enumerate() {
        rank_of.insert(first_seen[i], rank as u8);
    }
    LayoutSignature::new(p.size(), p.grid.iter().flatten().map(|c| rank_of[c]).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutChoice {
    pub signature: LayoutSignature,
    pub cluster_size: usize,
    /// Whether the choice satisfied the proportion filter. False means no
    /// cluster member did and the nearest member was taken instead.
    pub matches_proportion: bool,
}

fn matches_proportion(sig: &LayoutSignature, proportion: &[f64]) -> bool {
    let cells = sig.ranks.len() as f64;
    sig.rank_counts()
        .iter()
        .zip(proportion)
        .all(|(&n, &p)| (n as f64 - p * cells).abs() <= 1.0)
}

/// k-means over one-hot encoded layouts. Each cluster contributes the member
/// nearest its centroid, preferring members whose rank counts lie within one
/// cell of `proportion` (when given).
pub fn cluster_layouts(
    sigs: &[LayoutSignature],
    k: usize,
    proportion: Option<&[f64]>,
    seed: u64,
) -> Result<Vec<LayoutChoice>, StimulusError> {
    let mut distinct: Vec<&LayoutSignature> = sigs.iter().collect();
    distinct.sort();
    distinct.dedup();
    if distinct.len() < k || k == 0 {
        return Err(StimulusError::InsufficientLayouts {
            distinct: distinct.len(),
            needed: k,
        });
    }
    if let Some(s) = sigs.iter().find(|s| s.size != sigs[0].size) {
        return Err(StimulusError::ArityError(format!(
            "layouts of size {} and {} cannot be clustered together",
            sigs[0].size, s.size
        )));
    }
    let rows: Vec<Vec<f64>> = sigs.iter().map(LayoutSignature::one_hot).collect();
    let clustering = kmeans(&FeatureMatrix::from_rows(&rows)?, k, seed, segmentation::DEFAULT_KMEANS_MAX_ITER)?;
    let sizes = clustering.cluster_sizes();
    let mut out = Vec::with_capacity(k);
    for (c, center) in clustering.centers.iter().enumerate() {
        let mut members: Vec<(f64, usize)> = clustering
            .assignments
            .iter()
            .enumerate()
            .filter(|&(_, &a)| a == c)
            .map(|(i, _)| (squared_distance(&rows[i], center), i))
            .collect();
        members.sort_by(|a, b| a.0.total_cmp(&b.0).then(sigs[a.1].cmp(&sigs[b.1])));
        let filtered = proportion.and_then(|p| members.iter().find(|&&(_, i)| matches_proportion(&sigs[i], p)));
        let (pick, ok) = match (filtered, proportion) {
            (Some(&(_, i)), _) => (i, true),
            (None, None) => (members[0].1, true),
            (None, Some(_)) => (members[0].1, false),
        };
        out.push(LayoutChoice {
            signature: sigs[pick].clone(),
            cluster_size: sizes[c],
            matches_proportion: ok,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------- conditions

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyCondition {
    pub id: String,
    pub format: PaletteFormat,
    /// Colors in display order: input order for 1d, by proportion slot for
    /// 1d+ and 2d.
    pub colors: Vec<RgbColor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proportions: Option<Vec<f64>>,
    /// Rotation r: proportion slot s is held by input color (s + r) mod 5.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proportion_assignment: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<Vec<Vec<RgbColor>>>,
}

impl SurveyCondition {
    pub fn palette(&self) -> Palette {
        match self.format {
            PaletteFormat::Uniform => Palette::Uniform(Palette1D {
                k: STIMULUS_COLORS,
                colors: self.colors.clone(),
            }),
            PaletteFormat::Proportional => Palette::Proportional(Palette1DPlus {
                k: STIMULUS_COLORS,
                colors: self.colors.clone(),
                proportions: self.proportions.clone().unwrap_or_default(),
            }),
            PaletteFormat::Spatial => Palette::Spatial(Palette2D {
                grid: self.grid.clone().unwrap_or_default(),
                color_count: STIMULUS_COLORS,
            }),
        }
    }
}

fn rotated(colors: &[RgbColor], r: usize) -> Vec<RgbColor> {
    (0..colors.len()).map(|s| colors[(s + r) % colors.len()]).collect()
}

/// The 31 conditions for one color combination: one 1d, five 1d+ (one per
/// cyclic color-to-slot rotation) and 25 2d (rotation x layout), shuffled
/// into a seeded presentation order.
pub fn generate_conditions(
    colors: &[RgbColor],
    proportion: &[f64],
    layouts: &[LayoutSignature],
    seed: u64,
) -> Result<Vec<SurveyCondition>, StimulusError> {
    let n = STIMULUS_COLORS;
    if colors.len() != n || proportion.len() != n || layouts.len() != n {
        return Err(StimulusError::ArityError(format!(
            "expected {n} colors, proportions and layouts, got {}, {} and {}",
            colors.len(),
            proportion.len(),
            layouts.len()
        )));
    }
    let mut props = proportion.to_vec();
    props.sort_by(|a, b| b.total_cmp(a));
    let mut out = Vec::with_capacity(CONDITIONS_PER_COMBINATION);
    out.push(SurveyCondition {
        id: "1d".into(),
        format: PaletteFormat::Uniform,
        colors: colors.to_vec(),
        proportions: None,
        proportion_assignment: None,
        layout: None,
        grid: None,
    });
    for r in 0..n {
        out.push(SurveyCondition {
            id: format!("1dplus-r{r}"),
            format: PaletteFormat::Proportional,
            colors: rotated(colors, r),
            proportions: Some(props.clone()),
            proportion_assignment: Some(r),
            layout: None,
            grid: None,
        });
    }
    for r in 0..n {
        let slots = rotated(colors, r);
        for (l, layout) in layouts.iter().enumerate() {
            out.push(SurveyCondition {
                id: format!("2d-r{r}-l{l}"),
                format: PaletteFormat::Spatial,
                colors: slots.clone(),
                proportions: None,
                proportion_assignment: Some(r),
                layout: Some(l),
                grid: Some(layout.paint(&slots)),
            });
        }
    }
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(out)
}

/// Splits `total` pixels into blocks proportional to `weights` by largest
/// remainder.
fn block_widths(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut widths: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest = total - widths.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        widths[i] += 1;
        rest -= 1;
    }
    widths
}

/// Renders a condition as an image: equal blocks for 1d, proportional
/// blocks for 1d+, the upsampled grid for 2d.
pub fn render_swatch(cond: &SurveyCondition) -> Image {
    match cond.format {
        PaletteFormat::Spatial => {
            let (w, h) = GRID_SWATCH;
            let grid = cond.grid.as_deref().unwrap_or_default();
            let g = grid.len();
            Image::from_fn(w, h, |x, y| grid[cell_index(y, h, g)][cell_index(x, w, g)]).expect("fixed positive size")
        }
        _ => {
            let (w, h) = STRIP_SWATCH;
            let weights = match (&cond.format, &cond.proportions) {
                (PaletteFormat::Proportional, Some(p)) => p.clone(),
                _ => vec![1.0; cond.colors.len()],
            };
            let mut column = Vec::with_capacity(w);
            for (c, width) in cond.colors.iter().zip(block_widths(w, &weights)) {
                column.extend(std::iter::repeat_n(*c, width));
            }
            Image::from_fn(w, h, |x, _| column[x]).expect("fixed positive size")
        }
    }
}

// ---------------------------------------------------------------- pipeline

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Combination {
    /// "C1", "C2", ...
    pub id: String,
    pub source_id: String,
    pub colors: Vec<RgbColor>,
    pub conditions: Vec<SurveyCondition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusSet {
    pub proportion: Vec<f64>,
    pub candidates: Vec<Vec<Candidate>>,
    pub layouts: Vec<LayoutChoice>,
    /// Corpus entries whose spatial palette lacked five colors.
    pub skipped_layouts: Vec<String>,
    pub combinations: Vec<Combination>,
}

/// Full stimulus pipeline. `picks` names one corpus id per palette cluster
/// (the expert choice); without it the candidate nearest each center is used.
pub fn build_stimuli(corpus: &PaletteCorpus, picks: Option<&[String]>, seed: u64) -> Result<StimulusSet, StimulusError> {
    if corpus.is_empty() {
        return Err(StimulusError::EmptyCorpus);
    }
    let candidates = select_representatives(corpus, DEFAULT_CLUSTERS, DEFAULT_TOP, seed)?;
    let proportion = canonical_proportion(corpus)?;

    let mut sigs = Vec::new();
    let mut skipped = Vec::new();
    for e in &corpus.entries {
        match standardize_layout(&e.layout) {
            Ok(s) => sigs.push(s),
            Err(StimulusError::ColorCountMismatch { .. }) => skipped.push(e.id.clone()),
            Err(other) => return Err(other),
        }
    }
    let layouts = cluster_layouts(&sigs, DEFAULT_CLUSTERS, Some(&proportion), seed)?;
    let layout_sigs: Vec<LayoutSignature> = layouts.iter().map(|l| l.signature.clone()).collect();

    if let Some(p) = picks {
        if p.len() != candidates.len() {
            return Err(StimulusError::ArityError(format!(
                "{} picks for {} palette clusters",
                p.len(),
                candidates.len()
            )));
        }
    }
    let mut combinations = Vec::with_capacity(candidates.len());
    for (c, list) in candidates.iter().enumerate() {
        let chosen = match picks {
            Some(p) => corpus
                .entries
                .iter()
                .position(|e| e.id == p[c])
                .ok_or_else(|| StimulusError::InvalidEntry {
                    id: p[c].clone(),
                    reason: "picked id is not in the corpus".into(),
                })?,
            None => list[0].index,
        };
        let entry = &corpus.entries[chosen];
        let conditions =
            generate_conditions(&entry.palette.colors, &proportion, &layout_sigs, seed.wrapping_add(c as u64))?;
        combinations.push(Combination {
            id: format!("C{}", c + 1),
            source_id: entry.id.clone(),
            colors: entry.palette.colors.clone(),
            conditions,
        });
    }
    Ok(StimulusSet {
        proportion,
        candidates,
        layouts,
        skipped_layouts: skipped,
        combinations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn rgb(r: u8, g: u8, b: u8) -> RgbColor {
        RgbColor::new(r, g, b)
    }

    const FIVE: [RgbColor; 5] = [
        RgbColor { r: 200, g: 30, b: 30 },
        RgbColor { r: 30, g: 160, b: 40 },
        RgbColor { r: 20, g: 40, b: 190 },
        RgbColor { r: 240, g: 220, b: 40 },
        RgbColor { r: 90, g: 90, b: 90 },
    ];

    fn p1(colors: &[RgbColor]) -> Palette1D {
        Palette1D {
            k: colors.len(),
            colors: colors.to_vec(),
        }
    }

    /// Minimum over all permutations.
    fn brute_distance(a: &[RgbColor], b: &[RgbColor]) -> f64 {
        fn perms(n: usize) -> Vec<Vec<usize>> {
            if n == 0 {
                return vec![vec![]];
            }
            let mut out = Vec::new();
            for p in perms(n - 1) {
                for i in 0..=p.len() {
                    let mut q = p.clone();
                    q.insert(i, n - 1);
                    out.push(q);
                }
            }
            out
        }
        perms(a.len())
            .iter()
            .map(|p| p.iter().enumerate().map(|(i, &j)| delta_e(a[i].to_lab(), b[j].to_lab())).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn distance_basics() {
        let p = p1(&FIVE);
        assert_eq!(palette_distance(&p, &p).unwrap(), 0.0);
        let mut shuffled = FIVE;
        shuffled.reverse();
        assert!(palette_distance(&p, &p1(&shuffled)).unwrap().abs() < 1e-12);
        let red = rgb(255, 0, 0);
        let blue = rgb(0, 0, 255);
        let green = rgb(0, 255, 0);
        let d = palette_distance(&p1(&[red, blue]), &p1(&[red, green])).unwrap();
        assert!((d - delta_e(blue.to_lab(), green.to_lab())).abs() < 1e-9);
        assert!(matches!(
            palette_distance(&p1(&[red]), &p1(&[red, blue])),
            Err(StimulusError::SizeMismatch(1, 2))
        ));
    }

    #[test]
    fn distance_matches_permutation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..60 {
            let n = rng.random_range(1..=6);
            let mut gen = || -> Vec<RgbColor> { (0..n).map(|_| rgb(rng.random(), rng.random(), rng.random())).collect() };
            let (a, b) = (gen(), gen());
            let fast = palette_distance(&p1(&a), &p1(&b)).unwrap();
            assert!((fast - brute_distance(&a, &b)).abs() < 1e-9);
        }
    }

    fn grid_from(size: usize, cells: &[usize]) -> Palette2D {
        Palette2D {
            grid: cells.chunks(size).map(|r| r.iter().map(|&i| FIVE[i]).collect()).collect(),
            color_count: 5,
        }
    }

    fn entry(id: &str, colors: &[RgbColor], layout: Palette2D) -> CorpusEntry {
        CorpusEntry {
            id: id.into(),
            palette: p1(colors),
            layout,
        }
    }

    // 5x5 layout with 13/6/3/2/1 cells of colors 2, 0, 4, 1, 3
    const CRAFTED: [usize; 25] = [
        2, 2, 2, 2, 2, //
        2, 2, 2, 2, 2, //
        2, 2, 2, 0, 0, //
        0, 0, 0, 0, 4, //
        4, 4, 1, 1, 3,
    ];

    #[test]
    fn standardize_by_counting() {
        let sig = standardize_layout(&grid_from(5, &CRAFTED)).unwrap();
        // counting oracle
        let mut counts = [0usize; 5];
        for &c in &CRAFTED {
            counts[c] += 1;
        }
        for (i, &c) in CRAFTED.iter().enumerate() {
            let expected = counts.iter().filter(|&&n| n > counts[c]).count();
            assert_eq!(usize::from(sig.ranks[i]), expected);
        }
        assert_eq!(sig.rank_counts(), [13, 6, 3, 2, 1]);

        let permuted: Vec<usize> = CRAFTED.iter().map(|&c| (c + 3) % 5).collect();
        assert_eq!(standardize_layout(&grid_from(5, &permuted)).unwrap(), sig);
    }

    #[test]
    fn standardize_ties_and_errors() {
        // 21 cells of color 0, one each of 1..4 (in scan order 4, 3, 2, 1)
        let mut cells = vec![0; 25];
        cells[3] = 4;
        cells[9] = 3;
        cells[15] = 2;
        cells[24] = 1;
        let sig = standardize_layout(&grid_from(5, &cells)).unwrap();
        assert_eq!(sig.ranks.iter().filter(|&&r| r == 0).count(), 21);
        assert_eq!((sig.ranks[3], sig.ranks[9], sig.ranks[15], sig.ranks[24]), (1, 2, 3, 4));
        let four = grid_from(2, &[0, 1, 2, 3]);
        assert!(matches!(
            standardize_layout(&four),
            Err(StimulusError::ColorCountMismatch { expected: 5, got: 4 })
        ));
    }

    #[test]
    fn canonical_proportion_cases() {
        // 8:4:2:1:1 of 16 cells on a 4x4 grid
        let cells = [0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 3, 4];
        let corpus = PaletteCorpus::new(vec![entry("a", &FIVE, grid_from(4, &cells)); 3]).unwrap();
        let p = canonical_proportion(&corpus).unwrap();
        let expected = [0.5, 0.25, 0.125, 0.0625, 0.0625];
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        let single = PaletteCorpus::new(vec![entry("b", &FIVE, grid_from(5, &CRAFTED))]).unwrap();
        let p = canonical_proportion(&single).unwrap();
        for (a, b) in p.iter().zip([13.0, 6.0, 3.0, 2.0, 1.0]) {
            assert!((a - b / 25.0).abs() < 1e-12);
        }
        assert!(matches!(
            canonical_proportion(&PaletteCorpus::default()),
            Err(StimulusError::EmptyCorpus)
        ));
    }

    fn family(base: RgbColor, spread: u8) -> Vec<RgbColor> {
        (0..5)
            .map(|i| {
                let s = spread.wrapping_mul(i as u8);
                rgb(base.r.saturating_add(s), base.g.saturating_add(s / 2), base.b)
            })
            .collect()
    }

    #[test]
    fn representatives_of_identical_palettes_fail() {
        let corpus = PaletteCorpus::new(vec![entry("x", &FIVE, grid_from(5, &CRAFTED)); 5]).unwrap();
        assert!(matches!(
            select_representatives(&corpus, 5, 30, 0),
            Err(StimulusError::Clustering(SegmentationError::InvalidK { k: 5, distinct: 1 }))
        ));
    }

    /// Best 2-partition by within-group squared error, by enumeration.
    fn best_split(rows: &[Vec<f64>]) -> Vec<bool> {
        let n = rows.len();
        let mut best = (f64::INFINITY, vec![]);
        for mask in 1..(1u32 << n) - 1 {
            let side: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
            let mut cost = 0.0;
            for flag in [false, true] {
                let members: Vec<&Vec<f64>> = rows.iter().zip(&side).filter(|(_, &s)| s == flag).map(|(r, _)| r).collect();
                let dim = members[0].len();
                let mean: Vec<f64> = (0..dim).map(|d| members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64).collect();
                cost += members.iter().map(|m| squared_distance(m, &mean)).sum::<f64>();
            }
            if cost < best.0 {
                best = (cost, side);
            }
        }
        best.1
    }

    #[test]
    fn representatives_split_two_groups() {
        let warm = family(rgb(180, 40, 20), 12);
        let cool = family(rgb(10, 40, 170), 9);
        let mut entries = Vec::new();
        for i in 0..4u8 {
            let jitter = |c: &RgbColor| rgb(c.r.saturating_add(i), c.g, c.b.saturating_add(i));
            entries.push(entry(&format!("w{i}"), &warm.iter().map(jitter).collect::<Vec<_>>(), grid_from(5, &CRAFTED)));
            entries.push(entry(&format!("c{i}"), &cool.iter().map(jitter).collect::<Vec<_>>(), grid_from(5, &CRAFTED)));
        }
        let corpus = PaletteCorpus::new(entries).unwrap();
        let rows: Vec<Vec<f64>> = corpus.entries.iter().map(|e| palette_embedding(&e.palette)).collect();
        let oracle = best_split(&rows);
        let lists = select_representatives(&corpus, 2, 30, 3).unwrap();
        assert_eq!(lists.len(), 2);
        assert_eq!(lists.iter().map(Vec::len).sum::<usize>(), 8);
        for list in &lists {
            let side = oracle[list[0].index];
            assert!(list.iter().all(|c| oracle[c.index] == side));
            assert!(list.windows(2).all(|w| w[0].distance <= w[1].distance));
        }
        let short = select_representatives(&corpus, 2, 3, 3).unwrap();
        for (s, l) in short.iter().zip(&lists) {
            assert_eq!(s.as_slice(), &l[..3]);
        }
    }

    fn distinct_layouts() -> Vec<LayoutSignature> {
        // five layouts: the crafted one plus shifted row orders
        (0..5)
            .map(|shift| {
                let cells: Vec<usize> = (0..25).map(|i| CRAFTED[(i + 5 * shift) % 25]).collect();
                standardize_layout(&grid_from(5, &cells)).unwrap()
            })
            .collect()
    }

    #[test]
    fn layouts_five_copies_each() {
        let base = distinct_layouts();
        let sigs: Vec<LayoutSignature> = base.iter().flat_map(|s| std::iter::repeat_n(s.clone(), 5)).collect();
        let mut picked: Vec<LayoutSignature> =
            cluster_layouts(&sigs, 5, None, 1).unwrap().into_iter().map(|c| c.signature).collect();
        picked.sort();
        let mut expected = base.clone();
        expected.sort();
        assert_eq!(picked, expected);
        assert!(matches!(
            cluster_layouts(&vec![base[0].clone(); 8], 5, None, 1),
            Err(StimulusError::InsufficientLayouts { distinct: 1, needed: 5 })
        ));
    }

    #[test]
    fn layouts_two_families() {
        // family A: big color on the top rows; family B: on the bottom rows
        let top = CRAFTED.to_vec();
        let bottom: Vec<usize> = CRAFTED.iter().rev().copied().collect();
        let mut sigs = Vec::new();
        for (cells, n) in [(&top, 3), (&bottom, 3)] {
            for v in 0..n {
                let mut c = cells.clone();
                c.swap(12, 12 + v);
                sigs.push(standardize_layout(&grid_from(5, &c)).unwrap());
            }
        }
        let rows: Vec<Vec<f64>> = sigs.iter().map(LayoutSignature::one_hot).collect();
        let oracle = best_split(&rows);
        let picks = cluster_layouts(&sigs, 2, None, 9).unwrap();
        let sides: Vec<bool> = picks
            .iter()
            .map(|p| oracle[sigs.iter().position(|s| *s == p.signature).unwrap()])
            .collect();
        assert_ne!(sides[0], sides[1]);
    }

    #[test]
    fn proportion_filter_prefers_matching_layout() {
        let base = distinct_layouts();
        let p = [13.0 / 25.0, 6.0 / 25.0, 3.0 / 25.0, 2.0 / 25.0, 1.0 / 25.0];
        let picks = cluster_layouts(&base, 5, Some(&p), 0).unwrap();
        assert!(picks.iter().all(|c| c.matches_proportion));
        let far = [0.2; 5];
        let picks = cluster_layouts(&base, 5, Some(&far), 0).unwrap();
        assert!(picks.iter().all(|c| !c.matches_proportion));
    }

    #[test]
    fn conditions_counts_and_rotation() {
        let props = [0.5, 0.25, 0.125, 0.0625, 0.0625];
        let conds = generate_conditions(&FIVE, &props, &distinct_layouts(), 4).unwrap();
        assert_eq!(conds.len(), 31);
        let count = |f: PaletteFormat| conds.iter().filter(|c| c.format == f).count();
        assert_eq!(
            (count(PaletteFormat::Uniform), count(PaletteFormat::Proportional), count(PaletteFormat::Spatial)),
            (1, 5, 25)
        );
        let mut ids: Vec<&str> = conds.iter().map(|c| c.id.as_str()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 31);
        let r0 = conds.iter().find(|c| c.id == "1dplus-r0").unwrap();
        assert_eq!(r0.colors[0], FIVE[0]);
        assert_eq!(r0.proportions.as_deref().unwrap()[0], 0.5);
        let r2 = conds.iter().find(|c| c.id == "1dplus-r2").unwrap();
        assert_eq!(r2.colors[0], FIVE[2]);
        assert!(matches!(
            generate_conditions(&FIVE[..4], &props, &distinct_layouts(), 4),
            Err(StimulusError::ArityError(_))
        ));
    }

    #[test]
    fn spatial_conditions_round_trip_through_swatches() {
        let layouts = distinct_layouts();
        let props = [0.52, 0.24, 0.12, 0.08, 0.04];
        for cond in generate_conditions(&FIVE, &props, &layouts, 8).unwrap() {
            let img = render_swatch(&cond);
            match cond.format {
                PaletteFormat::Spatial => {
                    let grid = palette::downsample_majority(&img, 5).unwrap();
                    assert_eq!(Some(&grid), cond.grid.as_ref());
                    let sig = standardize_layout(&Palette2D { grid, color_count: 5 }).unwrap();
                    assert_eq!(sig, layouts[cond.layout.unwrap()]);
                }
                PaletteFormat::Proportional => {
                    let widths: Vec<usize> = cond
                        .colors
                        .iter()
                        .map(|c| img.pixels()[..img.width()].iter().filter(|p| *p == c).count())
                        .collect();
                    assert_eq!(widths, vec![260, 120, 60, 40, 20]);
                }
                PaletteFormat::Uniform => assert_eq!(img.get(0, 0), FIVE[0]),
            }
        }
    }

    #[test]
    fn corpus_json_round_trip() {
        let e = entry("design-1", &FIVE, grid_from(5, &CRAFTED));
        let text = serde_json::to_string(&e).unwrap();
        assert!(text.contains(r#""format":"1d""#) && text.contains(r#""format":"2d""#));
        assert_eq!(serde_json::from_str::<CorpusEntry>(&text).unwrap(), e);
        let short = entry("bad", &FIVE[..3], grid_from(5, &CRAFTED));
        assert!(matches!(PaletteCorpus::new(vec![short]), Err(StimulusError::InvalidEntry { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn distance_is_a_pseudometric(
            a in prop::collection::vec(any::<(u8, u8, u8)>(), 5),
            b in prop::collection::vec(any::<(u8, u8, u8)>(), 5),
            rot in 0usize..5,
        ) {
            let a: Vec<RgbColor> = a.into_iter().map(|(r, g, b)| rgb(r, g, b)).collect();
            let b: Vec<RgbColor> = b.into_iter().map(|(r, g, b)| rgb(r, g, b)).collect();
            let ab = palette_distance(&p1(&a), &p1(&b)).unwrap();
            let ba = palette_distance(&p1(&b), &p1(&a)).unwrap();
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!(ab >= 0.0);
            prop_assert!(palette_distance(&p1(&a), &p1(&rotated(&a, rot))).unwrap().abs() < 1e-9);
        }

        #[test]
        fn conditions_always_31(seed in any::<u64>(), shift in 0usize..5) {
            let colors = rotated(&FIVE, shift);
            let conds = generate_conditions(&colors, &[0.4, 0.3, 0.15, 0.1, 0.05], &distinct_layouts(), seed).unwrap();
            prop_assert_eq!(conds.len(), CONDITIONS_PER_COMBINATION);
            let again = generate_conditions(&colors, &[0.4, 0.3, 0.15, 0.1, 0.05], &distinct_layouts(), seed).unwrap();
            prop_assert_eq!(conds, again);
        }

        #[test]
        fn standardize_ignores_color_identity(cells in prop::collection::vec(0usize..5, 25), perm_seed in any::<u64>()) {
            let mut cells = cells;
            cells[..5].copy_from_slice(&[0, 1, 2, 3, 4]);
            let mut perm = [0usize, 1, 2, 3, 4];
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
            let recolored: Vec<usize> = cells.iter().map(|&c| perm[c]).collect();
            let a = standardize_layout(&grid_from(5, &cells)).unwrap();
            let b = standardize_layout(&grid_from(5, &recolored)).unwrap();
            prop_assert_eq!(a.rank_counts().iter().sum::<usize>(), 25);
            prop_assert!(a.rank_counts().windows(2).all(|w| w[0] >= w[1]));
            prop_assert_eq!(a, b);
        }

        #[test]
        fn canonical_proportion_sums_to_one(layouts in prop::collection::vec(prop::collection::vec(0usize..5, 16), 1..6)) {
            let entries: Vec<CorpusEntry> = layouts.iter().map(|c| entry("e", &FIVE, grid_from(4, c))).collect();
            let p = canonical_proportion(&PaletteCorpus::new(entries).unwrap()).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.windows(2).all(|w| w[0] >= w[1]));
        }
    }
}
