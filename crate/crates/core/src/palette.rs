//! Uniform (1D), proportional (1D+) and spatial (2D) palettes, their
//! extraction from images and their JSON representation.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::color::{LabColor, RgbColor};
use crate::raster::Image;
use crate::segmentation::{
    self, color_frequencies, kmeans, nearest_center, slic, FeatureMatrix, SegmentationError,
};

pub const MIN_K: usize = 4;
pub const MAX_K: usize = 12;
pub const DEFAULT_GRID: usize = 5;
pub const DEFAULT_N_SUPERPIXELS: usize = 256;
/// Pixel clustering runs on at most this many pixels.
pub const KMEANS_SAMPLE_LIMIT: usize = 100_000;

#[derive(Debug, thiserror::Error)]
pub enum PaletteError {
    #[error("color count k = {0} is outside 4..=12")]
    KOutOfRange(usize),
    #[error("invalid extraction parameters: {0}")]
    InvalidParams(String),
    #[error("image {width}x{height} is smaller than the {grid}x{grid} palette grid")]
    ImageTooSmall { width: usize, height: usize, grid: usize },
    #[error("invalid palette: {0}")]
    InvalidPalette(String),
    #[error(transparent)]
    Segmentation(#[from] SegmentationError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PaletteFormat {
    #[serde(rename = "1d")]
    Uniform,
    #[serde(rename = "1d+", alias = "1dplus")]
    Proportional,
    #[serde(rename = "2d")]
    Spatial,
}

impl PaletteFormat {
    pub const ALL: [PaletteFormat; 3] = [Self::Uniform, Self::Proportional, Self::Spatial];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Uniform => "1d",
            Self::Proportional => "1d+",
            Self::Spatial => "2d",
        }
    }
}

impl fmt::Display for PaletteFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PaletteFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "1d" => Ok(Self::Uniform),
            "1d+" | "1dplus" => Ok(Self::Proportional),
            "2d" => Ok(Self::Spatial),
            other => Err(format!("unknown palette format {other:?} (expected 1d, 1dplus or 2d)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionParams {
    /// Number of palette colors (the global color-count slider).
    pub k: usize,
    pub seed: u64,
    pub n_superpixels: usize,
    pub grid: usize,
    pub compactness: f64,
    pub slic_iters: usize,
    /// Accept `k` outside 4..=12.
    #[serde(default)]
    pub allow_any_k: bool,
}

impl Default for ExtractionParams {
    fn default() -> Self {
        Self {
            k: 5,
            seed: 0,
            n_superpixels: DEFAULT_N_SUPERPIXELS,
            grid: DEFAULT_GRID,
            compactness: segmentation::DEFAULT_COMPACTNESS,
            slic_iters: segmentation::DEFAULT_SLIC_ITERS,
            allow_any_k: false,
        }
    }
}

impl ExtractionParams {
    pub fn with_k(k: usize) -> Self {
        Self {
            k,
            ..Self::default()
        }
    }

    /// Parameters with an arbitrary positive `k`, bypassing the slider range.
    pub fn with_any_k(k: usize) -> Self {
        Self {
            k,
            allow_any_k: true,
            ..Self::default()
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn grid(mut self, grid: usize) -> Self {
        self.grid = grid;
        self
    }

    pub fn n_superpixels(mut self, n: usize) -> Self {
        self.n_superpixels = n;
        self
    }

    pub fn validate(&self) -> Result<(), PaletteError> {
        if self.k == 0 || (!self.allow_any_k && !(MIN_K..=MAX_K).contains(&self.k)) {
            return Err(PaletteError::KOutOfRange(self.k));
        }
        if self.grid < 2 {
            return Err(PaletteError::InvalidParams(format!("grid size {} < 2", self.grid)));
        }
        if self.n_superpixels < self.grid * self.grid {
            return Err(PaletteError::InvalidParams(format!(
                "n_superpixels {} < grid^2 = {}",
                self.n_superpixels,
                self.grid * self.grid
            )));
        }
        if !(self.compactness > 0.0) || self.slic_iters == 0 {
            return Err(PaletteError::InvalidParams(
                "compactness and slic_iters must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Dominant colors shown as equal-sized blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Palette1D {
    pub k: usize,
    pub colors: Vec<RgbColor>,
}

/// Dominant colors with their pixel shares.
#[derive(Debug, Clone, PartialEq)]
pub struct Palette1DPlus {
    pub k: usize,
    pub colors: Vec<RgbColor>,
    pub proportions: Vec<f64>,
}

/// A G×G grid of colors laid out like the image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Palette2D {
    pub grid: Vec<Vec<RgbColor>>,
    /// Requested color count K.
    pub color_count: usize,
}

impl Palette2D {
    pub fn size(&self) -> usize {
        self.grid.len()
    }

    /// Distinct grid colors with their cell counts, most cells first
    /// (ties by ascending color).
    pub fn color_cells(&self) -> Vec<(RgbColor, usize)> {
        let mut counts: HashMap<RgbColor, usize> = HashMap::new();
        for c in self.grid.iter().flatten() {
            *counts.entry(*c).or_default() += 1;
        }
        let mut out: Vec<_> = counts.into_iter().collect();
        out.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        out
    }

    pub fn distinct_colors(&self) -> Vec<RgbColor> {
        self.color_cells().into_iter().map(|(c, _)| c).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PaletteJson", into = "PaletteJson")]
pub enum Palette {
    Uniform(Palette1D),
    Proportional(Palette1DPlus),
    Spatial(Palette2D),
}

impl Palette {
    pub fn format(&self) -> PaletteFormat {
        match self {
            Self::Uniform(_) => PaletteFormat::Uniform,
            Self::Proportional(_) => PaletteFormat::Proportional,
            Self::Spatial(_) => PaletteFormat::Spatial,
        }
    }

    /// Requested color count.
    pub fn k(&self) -> usize {
        match self {
            Self::Uniform(p) => p.k,
            Self::Proportional(p) => p.k,
            Self::Spatial(p) => p.color_count,
        }
    }

    pub fn grid_size(&self) -> Option<usize> {
        match self {
            Self::Spatial(p) => Some(p.size()),
            _ => None,
        }
    }

    /// Palette colors: block colors for 1D/1D+, distinct cell colors for 2D.
    pub fn colors(&self) -> Vec<RgbColor> {
        match self {
            Self::Uniform(p) => p.colors.clone(),
            Self::Proportional(p) => p.colors.clone(),
            Self::Spatial(p) => p.distinct_colors(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("palette serialization is infallible")
    }

    pub fn from_json(s: &str) -> Result<Self, PaletteError> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Wire form shared by the CLI and the HTTP service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaletteJson {
    pub format: PaletteFormat,
    #[serde(default)]
    pub colors: Vec<RgbColor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proportions: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<Vec<Vec<RgbColor>>>,
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_size: Option<usize>,
}

impl From<Palette> for PaletteJson {
    fn from(p: Palette) -> Self {
        let format = p.format();
        let k = p.k();
        let colors = p.colors();
        match p {
            Palette::Uniform(_) => Self {
                format,
                colors,
                proportions: None,
                grid: None,
                k,
                grid_size: None,
            },
            Palette::Proportional(q) => Self {
                format,
                colors,
                proportions: Some(q.proportions),
                grid: None,
                k,
                grid_size: None,
            },
            Palette::Spatial(q) => Self {
                format,
                colors,
                proportions: None,
                grid_size: Some(q.size()),
                grid: Some(q.grid),
                k,
            },
        }
    }
}

impl TryFrom<PaletteJson> for Palette {
    type Error = PaletteError;

    fn try_from(j: PaletteJson) -> Result<Self, Self::Error> {
        let bad = |m: String| Err(PaletteError::InvalidPalette(m));
        if j.k == 0 {
            return bad("k must be positive".into());
        }
        match j.format {
            PaletteFormat::Uniform => {
                if j.colors.is_empty() {
                    return bad("palette has no colors".into());
                }
                Ok(Palette::Uniform(Palette1D {
                    k: j.k,
                    colors: j.colors,
                }))
            }
            PaletteFormat::Proportional => {
                let Some(props) = j.proportions else {
                    return bad("1d+ palette needs proportions".into());
                };
                if j.colors.is_empty() || props.len() != j.colors.len() {
                    return bad(format!(
                        "{} proportions for {} colors",
                        props.len(),
                        j.colors.len()
                    ));
                }
                if props.iter().any(|p| !(*p > 0.0)) {
                    return bad("proportions must be positive".into());
                }
                let sum: f64 = props.iter().sum();
                if (sum - 1.0).abs() > 1e-6 {
                    return bad(format!("proportions sum to {sum}, expected 1"));
                }
                Ok(Palette::Proportional(Palette1DPlus {
                    k: j.k,
                    colors: j.colors,
                    proportions: props,
                }))
            }
            PaletteFormat::Spatial => {
                let Some(grid) = j.grid else {
                    return bad("2d palette needs a grid".into());
                };
                let g = grid.len();
                if g < 2 || grid.iter().any(|row| row.len() != g) {
                    return bad("grid must be square with size >= 2".into());
                }
                if j.grid_size.is_some_and(|s| s != g) {
                    return bad(format!("grid_size {:?} does not match grid {g}", j.grid_size));
                }
                Ok(Palette::Spatial(Palette2D {
                    grid,
                    color_count: j.k,
                }))
            }
        }
    }
}

/// Pixel membership of the clusters behind a 1D/1D+ palette, in palette
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorClusters {
    /// Lab cluster centers.
    pub centers: Vec<LabColor>,
    /// Cluster index of each pixel.
    pub labels: Vec<usize>,
    pub counts: Vec<usize>,
}

/// A palette together with what is needed to recolor its source image.
#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub palette: Palette,
    pub params: ExtractionParams,
    /// Present for 1D and 1D+.
    pub clusters: Option<ColorClusters>,
}

struct ImageClusters {
    colors: Vec<RgbColor>,
    clusters: ColorClusters,
}

fn strided_sample(n: usize, seed: u64) -> Vec<usize> {
    if n <= KMEANS_SAMPLE_LIMIT {
        return (0..n).collect();
    }
    let stride = n.div_ceil(KMEANS_SAMPLE_LIMIT);
    let offset = (seed % stride as u64) as usize;
    (offset..n).step_by(stride).collect()
}

fn lab_rows(labs: impl Iterator<Item = LabColor>) -> FeatureMatrix {
    let mut m = FeatureMatrix::new(3);
    for c in labs {
        m.push(&c.to_array()).expect("rows have three components");
    }
    m
}

/// k-means over pixel colors in Lab, then one modal color per cluster.
fn cluster_image(image: &Image, k: usize, seed: u64) -> Result<ImageClusters, PaletteError> {
    let lab = image.to_lab();
    let sample = strided_sample(lab.len(), seed);
    let points = lab_rows(sample.iter().map(|&i| lab[i]));
    let k = k.min(points.distinct_count());
    let clustering = kmeans(&points, k, seed, segmentation::DEFAULT_KMEANS_MAX_ITER)?;

    let mut memo: HashMap<RgbColor, usize> = HashMap::new();
    let raw_labels: Vec<usize> = image
        .pixels()
        .iter()
        .zip(&lab)
        .map(|(p, l)| {
            *memo
                .entry(*p)
                .or_insert_with(|| nearest_center(&l.to_array(), &clustering.centers).0)
        })
        .collect();

    let mut regions = vec![Vec::new(); k];
    for (i, &l) in raw_labels.iter().enumerate() {
        regions[l].push(i);
    }
    struct Group {
        center: LabColor,
        region: Vec<usize>,
        freqs: Vec<(RgbColor, usize)>,
    }
    let mut groups: Vec<Group> = regions
        .into_iter()
        .zip(&clustering.centers)
        .filter(|(r, _)| !r.is_empty())
        .map(|(region, c)| Group {
            center: LabColor::from_slice(c),
            freqs: color_frequencies(image, &region),
            region,
        })
        .collect();
    groups.sort_by(|a, b| {
        b.region
            .len()
            .cmp(&a.region.len())
            .then(a.freqs[0].0.cmp(&b.freqs[0].0))
    });

    let mut colors: Vec<RgbColor> = Vec::with_capacity(groups.len());
    for g in &groups {
        let pick = g
            .freqs
            .iter()
            .map(|&(c, _)| c)
            .find(|c| !colors.contains(c))
            .unwrap_or_else(|| unused_near(g.center.to_rgb(), &colors));
        colors.push(pick);
    }

    let mut labels = vec![0; image.len()];
    for (idx, g) in groups.iter().enumerate() {
        for &p in &g.region {
            labels[p] = idx;
        }
    }
    Ok(ImageClusters {
        colors,
        clusters: ColorClusters {
            centers: groups.iter().map(|g| g.center).collect(),
            counts: groups.iter().map(|g| g.region.len()).collect(),
            labels,
        },
    })
}

/// `c` itself if unused, otherwise the closest unused color found by
/// stepping away from it one channel unit at a time.
fn unused_near(c: RgbColor, used: &[RgbColor]) -> RgbColor {
    if !used.contains(&c) {
        return c;
    }
    for step in 1..=255i16 {
        for ch in 0..3 {
            for sign in [1i16, -1] {
                let mut v = c.channels();
                let nv = i16::from(v[ch]) + sign * step;
                if !(0..=255).contains(&nv) {
                    continue;
                }
                v[ch] = nv as u8;
                let cand = RgbColor::new(v[0], v[1], v[2]);
                if !used.contains(&cand) {
                    return cand;
                }
            }
        }
    }
    c
}

fn extract_clusters(image: &Image, params: &ExtractionParams) -> Result<ImageClusters, PaletteError> {
    params.validate()?;
    cluster_image(image, params.k, params.seed)
}

pub fn extract_1d(image: &Image, params: &ExtractionParams) -> Result<Palette1D, PaletteError> {
    let c = extract_clusters(image, params)?;
    Ok(Palette1D {
        k: params.k,
        colors: c.colors,
    })
}

pub fn extract_1d_plus(image: &Image, params: &ExtractionParams) -> Result<Palette1DPlus, PaletteError> {
    let c = extract_clusters(image, params)?;
    Ok(Palette1DPlus {
        k: params.k,
        colors: c.colors,
        proportions: proportions_of(&c.clusters.counts),
    })
}

fn proportions_of(counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

/// Grid cell of pixel column/row `i` in an axis of `len` pixels split into
/// `grid` cells.
pub fn cell_index(i: usize, len: usize, grid: usize) -> usize {
    i * grid / len
}

/// Area-majority downsampling: each cell takes the color covering the most
/// pixels mapped to it (ties by ascending color).
pub fn downsample_majority(image: &Image, grid: usize) -> Result<Vec<Vec<RgbColor>>, PaletteError> {
    let (w, h) = (image.width(), image.height());
    if grid == 0 || w < grid || h < grid {
        return Err(PaletteError::ImageTooSmall {
            width: w,
            height: h,
            grid,
        });
    }
    let mut counts: Vec<HashMap<RgbColor, usize>> = vec![HashMap::new(); grid * grid];
    for y in 0..h {
        let gy = cell_index(y, h, grid);
        for x in 0..w {
            let gx = cell_index(x, w, grid);
            *counts[gy * grid + gx].entry(image.get(x, y)).or_default() += 1;
        }
    }
    Ok(counts
        .chunks(grid)
        .map(|row| {
            row.iter()
                .map(|cell| {
                    cell.iter()
                        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                        .map(|(c, _)| *c)
                        .expect("every cell covers at least one pixel")
                })
                .collect()
        })
        .collect())
}

/// The image with every pixel replaced by the quantized color of its
/// superpixel.
pub fn quantized_superpixel_image(image: &Image, params: &ExtractionParams) -> Result<Image, PaletteError> {
    params.validate()?;
    let map = slic(image, params.n_superpixels, params.compactness, params.slic_iters)?;
    let regions = map.regions();
    let dominant: Vec<RgbColor> = regions
        .iter()
        .map(|r| segmentation::dominant_color(image, r))
        .collect::<Result<_, _>>()?;
    let points = lab_rows(dominant.iter().map(|c| c.to_lab()));
    let k = params.k.min(points.distinct_count());
    let clustering = kmeans(&points, k, params.seed, segmentation::DEFAULT_KMEANS_MAX_ITER)?;

    // representative of a quantized cluster: the member superpixel color
    // covering the largest area
    let mut area: Vec<HashMap<RgbColor, usize>> = vec![HashMap::new(); k];
    for ((color, region), &cluster) in dominant.iter().zip(&regions).zip(&clustering.assignments) {
        *area[cluster].entry(*color).or_default() += region.len();
    }
    let reps: Vec<Option<RgbColor>> = area
        .iter()
        .map(|m| {
            m.iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(c, _)| *c)
        })
        .collect();

    let superpixel_color: Vec<RgbColor> = clustering
        .assignments
        .iter()
        .map(|&c| reps[c].expect("assigned clusters are non-empty"))
        .collect();
    let pixels = map.labels.iter().map(|&l| superpixel_color[l]).collect();
    Ok(Image::new(image.width(), image.height(), pixels).expect("same dimensions as the source"))
}

pub fn extract_2d(image: &Image, params: &ExtractionParams) -> Result<Palette2D, PaletteError> {
    params.validate()?;
    if image.width() < params.grid || image.height() < params.grid {
        return Err(PaletteError::ImageTooSmall {
            width: image.width(),
            height: image.height(),
            grid: params.grid,
        });
    }
    let quantized = quantized_superpixel_image(image, params)?;
    Ok(Palette2D {
        grid: downsample_majority(&quantized, params.grid)?,
        color_count: params.k,
    })
}

/// Nearest-neighbor upsampling of a 2D palette to `width`×`height`.
pub fn upsample_preview(p: &Palette2D, width: usize, height: usize) -> Image {
    let g = p.size();
    Image::from_fn(width, height, |x, y| {
        p.grid[cell_index(y, height, g)][cell_index(x, width, g)]
    })
    .expect("dimensions are positive")
}

/// Extracts a palette of the given format, keeping the pixel clusters needed
/// for recoloring.
pub fn extract(image: &Image, format: PaletteFormat, params: &ExtractionParams) -> Result<Extraction, PaletteError> {
    match format {
        PaletteFormat::Uniform | PaletteFormat::Proportional => {
            let c = extract_clusters(image, params)?;
            let palette = if format == PaletteFormat::Uniform {
                Palette::Uniform(Palette1D {
                    k: params.k,
                    colors: c.colors,
                })
            } else {
                Palette::Proportional(Palette1DPlus {
                    k: params.k,
                    colors: c.colors,
                    proportions: proportions_of(&c.clusters.counts),
                })
            };
            Ok(Extraction {
                palette,
                params: params.clone(),
                clusters: Some(c.clusters),
            })
        }
        PaletteFormat::Spatial => Ok(Extraction {
            palette: Palette::Spatial(extract_2d(image, params)?),
            params: params.clone(),
            clusters: None,
        }),
    }
}
