//! Clustering primitives: seeded k-means over feature vectors, SLIC superpixels,
//! and modal-color queries over pixel regions.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::color::{delta_e, RgbColor};
use crate::raster::Image;

pub const DEFAULT_COMPACTNESS: f64 = 10.0;
pub const DEFAULT_SLIC_ITERS: usize = 10;
pub const DEFAULT_KMEANS_MAX_ITER: usize = 100;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SegmentationError {
    #[error("no points to cluster")]
    EmptyInput,
    #[error("k = {k} is invalid for {distinct} distinct points")]
    InvalidK { k: usize, distinct: usize },
    #[error("feature vectors must share one length (expected {expected}, got {got})")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("cannot make {requested} superpixels from {pixels} pixels")]
    InvalidCount { requested: usize, pixels: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
    #[error("region is empty")]
    EmptyRegion,
}

/// A dense set of equal-length feature vectors, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            data: Vec::new(),
        }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, SegmentationError> {
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        let mut m = Self::new(dim);
        for r in rows {
            m.push(r.as_ref())?;
        }
        Ok(m)
    }

    pub fn push(&mut self, row: &[f64]) -> Result<(), SegmentationError> {
        if self.data.is_empty() && self.dim == 0 {
            self.dim = row.len();
        }
        if row.len() != self.dim {
            return Err(SegmentationError::DimensionMismatch {
                expected: self.dim,
                got: row.len(),
            });
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    /// Number of distinct rows (bitwise, with -0.0 folded into 0.0).
    pub fn distinct_count(&self) -> usize {
        let mut seen = HashSet::new();
        for r in self.rows() {
            let key: Vec<u64> = r.iter().map(|v| (v + 0.0).to_bits()).collect();
            seen.insert(key);
        }
        seen.len()
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            o => return o,
        }
    }
    std::cmp::Ordering::Equal
}

/// Index of the nearest center and its squared distance.
///
/// Exact ties go to the lexicographically smaller center so the answer does
/// not depend on the order the centers are listed in.
pub fn nearest_center(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centers.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best_d || (d == best_d && lex_cmp(c, &centers[best]).is_lt()) {
            best = i;
            best_d = d;
        }
    }
    (best, best_d)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub centers: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Total squared distance of points to their assigned centers.
    pub inertia: f64,
    /// Inertia after every assignment step, starting with the seeding.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl Clustering {
    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.centers.len()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

fn assign_all(points: &FeatureMatrix, centers: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    points.rows().map(|p| nearest_center(p, centers)).unzip()
}

fn kmeans_plus_plus(points: &FeatureMatrix, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let first = rng.random_range(0..n);
    let mut centers = vec![points.row(first).to_vec()];
    let mut d2: Vec<f64> = points.rows().map(|p| squared_distance(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &w) in d2.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            acc += w;
            pick = Some(i);
            if acc > target {
                break;
            }
        }
        let pick = pick.expect("k does not exceed the number of distinct points");
        let c = points.row(pick).to_vec();
        for (w, p) in d2.iter_mut().zip(points.rows()) {
            *w = w.min(squared_distance(p, &c));
        }
        centers.push(c);
    }
    centers
}

/// Lloyd's k-means with k-means++ seeding.
///
/// Deterministic for a given `seed`. Stops once an iteration changes no
/// assignment, or after `max_iter` update steps.
pub fn kmeans(
    points: &FeatureMatrix,
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<Clustering, SegmentationError> {
    if points.is_empty() {
        return Err(SegmentationError::EmptyInput);
    }
    let distinct = points.distinct_count();
    if k < 1 || k > distinct {
        return Err(SegmentationError::InvalidK { k, distinct });
    }
    if max_iter < 1 {
        return Err(SegmentationError::InvalidParameter("max_iter must be positive"));
    }
    let dim = points.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = kmeans_plus_plus(points, k, &mut rng);
    let (mut assignments, mut dists) = assign_all(points, &centers);
    let mut inertia: f64 = dists.iter().sum();
    let mut history = vec![inertia];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iter {
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.rows().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // move an empty cluster onto the worst-served point
                let (far, &far_d) = dists
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                    .expect("points are non-empty");
                if far_d > 0.0 {
                    centers[c] = points.row(far).to_vec();
                    dists[far] = 0.0;
                }
            }
        }
        let (next, next_d) = assign_all(points, &centers);
        let changed = next != assignments;
        assignments = next;
        dists = next_d;
        inertia = dists.iter().sum();
        history.push(inertia);
        if !changed {
            converged = true;
            break;
        }
    }

    Ok(Clustering {
        centers,
        assignments,
        inertia,
        inertia_history: history,
        iterations,
        converged,
    })
}

/// Colors of `region` with their counts, most frequent first; equal counts
/// are ordered by ascending (r, g, b).
pub fn color_frequencies(image: &Image, region: &[usize]) -> Vec<(RgbColor, usize)> {
    let mut counts: HashMap<RgbColor, usize> = HashMap::new();
    for &i in region {
        *counts.entry(image.pixels()[i]).or_default() += 1;
    }
    let mut out: Vec<_> = counts.into_iter().collect();
    out.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    out
}

/// The most frequent exact color in `region` (ties: smallest (r, g, b)).
pub fn dominant_color(image: &Image, region: &[usize]) -> Result<RgbColor, SegmentationError> {
    color_frequencies(image, region)
        .first()
        .map(|&(c, _)| c)
        .ok_or(SegmentationError::EmptyRegion)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperpixelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<usize>,
    pub count: usize,
}

impl SuperpixelMap {
    /// Pixel indices of each superpixel, in raster order.
    pub fn regions(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.count];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut out = vec![0; self.count];
        for &l in &self.labels {
            out[l] += 1;
        }
        out
    }
}

struct SlicCenter {
    lab: [f64; 3],
    x: f64,
    y: f64,
}

/// SLIC superpixels.
///
/// Seeds sit on a regular grid with spacing `S = sqrt(W*H/n)`; each center
/// searches a `2S x 2S` window using `delta_e + (compactness / S) * dxy`.
/// Disconnected fragments are afterwards absorbed into their largest
/// neighboring superpixel, so the final `count` may differ slightly from
/// `n_superpixels`.
pub fn slic(
    image: &Image,
    n_superpixels: usize,
    compactness: f64,
    iters: usize,
) -> Result<SuperpixelMap, SegmentationError> {
    let (w, h) = (image.width(), image.height());
    let n_pixels = w * h;
    if n_superpixels == 0 || n_superpixels > n_pixels {
        return Err(SegmentationError::InvalidCount {
            requested: n_superpixels,
            pixels: n_pixels,
        });
    }
    if !(compactness > 0.0) {
        return Err(SegmentationError::InvalidParameter("compactness must be positive"));
    }
    if iters == 0 {
        return Err(SegmentationError::InvalidParameter("iterations must be positive"));
    }

    let lab: Vec<[f64; 3]> = image.to_lab().into_iter().map(|c| c.to_array()).collect();
    let step = (n_pixels as f64 / n_superpixels as f64).sqrt();
    let nx = ((w as f64 / step).round() as usize).clamp(1, w);
    let ny = ((h as f64 / step).round() as usize).clamp(1, h);

    let mut centers = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let x = (i as f64 + 0.5) * w as f64 / nx as f64 - 0.5;
            let y = (j as f64 + 0.5) * h as f64 / ny as f64 - 0.5;
            let px = (x.round() as usize).min(w - 1);
            let py = (y.round() as usize).min(h - 1);
            centers.push(SlicCenter {
                lab: lab[py * w + px],
                x,
                y,
            });
        }
    }

    let mut labels: Vec<usize> = (0..n_pixels)
        .map(|p| {
            let (x, y) = (p % w, p / w);
            (y * ny / h) * nx + x * nx / w
        })
        .collect();
    let spatial_weight = compactness / step;
    let mut dist = vec![f64::INFINITY; n_pixels];

    for _ in 0..iters {
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        for (k, c) in centers.iter().enumerate() {
            let x0 = (c.x - step).ceil().max(0.0) as usize;
            let x1 = ((c.x + step).floor().max(0.0) as usize).min(w - 1);
            let y0 = (c.y - step).ceil().max(0.0) as usize;
            let y1 = ((c.y + step).floor().max(0.0) as usize).min(h - 1);
            let center_lab = crate::color::LabColor::from_slice(&c.lab);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let p = y * w + x;
                    let dc = delta_e(crate::color::LabColor::from_slice(&lab[p]), center_lab);
                    let dx = x as f64 - c.x;
                    let dy = y as f64 - c.y;
                    let d = dc + spatial_weight * (dx * dx + dy * dy).sqrt();
                    if d < dist[p] {
                        dist[p] = d;
                        labels[p] = k;
                    }
                }
            }
        }

        let mut sums = vec![[0.0f64; 5]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (p, &l) in labels.iter().enumerate() {
            let s = &mut sums[l];
            s[0] += lab[p][0];
            s[1] += lab[p][1];
            s[2] += lab[p][2];
            s[3] += (p % w) as f64;
            s[4] += (p / w) as f64;
            counts[l] += 1;
        }
        for (k, c) in centers.iter_mut().enumerate() {
            if counts[k] == 0 {
                continue;
            }
            let n = counts[k] as f64;
            c.lab = [sums[k][0] / n, sums[k][1] / n, sums[k][2] / n];
            c.x = sums[k][3] / n;
            c.y = sums[k][4] / n;
        }
    }

    let labels = enforce_connectivity(&labels, w, h, centers.len());
    let count = labels.iter().max().map_or(0, |m| m + 1);
    Ok(SuperpixelMap {
        width: w,
        height: h,
        labels,
        count,
    })
}

fn neighbors4(p: usize, w: usize, h: usize) -> impl Iterator<Item = usize> {
    let (x, y) = (p % w, p / w);
    let mut out = [usize::MAX; 4];
    if x > 0 {
        out[0] = p - 1;
    }
    if x + 1 < w {
        out[1] = p + 1;
    }
    if y > 0 {
        out[2] = p - w;
    }
    if y + 1 < h {
        out[3] = p + w;
    }
    out.into_iter().filter(|&q| q != usize::MAX)
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Keeps the largest 4-connected component of every label and merges each
/// remaining fragment, smallest first, into the adjacent superpixel with the
/// most pixels. Returns labels renumbered by first appearance.
fn enforce_connectivity(labels: &[usize], w: usize, h: usize, n_labels: usize) -> Vec<usize> {
    let n = labels.len();
    let mut comp = vec![usize::MAX; n];
    let mut comp_label = Vec::new();
    let mut comp_size = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = comp_label.len();
        let l = labels[start];
        comp[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(p) = queue.pop_front() {
            size += 1;
            for q in neighbors4(p, w, h) {
                if comp[q] == usize::MAX && labels[q] == l {
                    comp[q] = id;
                    queue.push_back(q);
                }
            }
        }
        comp_label.push(l);
        comp_size.push(size);
    }

    let n_comp = comp_label.len();
    let mut adjacency = vec![BTreeSet::new(); n_comp];
    for p in 0..n {
        for q in neighbors4(p, w, h) {
            if comp[p] != comp[q] {
                adjacency[comp[p]].insert(comp[q]);
            }
        }
    }

    let mut primary = vec![usize::MAX; n_labels];
    for c in 0..n_comp {
        let l = comp_label[c];
        if primary[l] == usize::MAX || comp_size[c] > comp_size[primary[l]] {
            primary[l] = c;
        }
    }
    let mut orphans: Vec<usize> = (0..n_comp).filter(|&c| primary[comp_label[c]] != c).collect();
    orphans.sort_by_key(|&c| (comp_size[c], c));

    let mut label_size = vec![0usize; n_labels];
    for c in 0..n_comp {
        label_size[comp_label[c]] += comp_size[c];
    }
    let mut parent: Vec<usize> = (0..n_comp).collect();
    let root_label = &comp_label;

    for o in orphans {
        let neigh: BTreeSet<usize> = adjacency[o]
            .iter()
            .map(|&c| find(&mut parent, c))
            .filter(|&r| r != o)
            .collect();
        let Some(&target) = neigh.iter().max_by(|&&a, &&b| {
            let (la, lb) = (root_label[a], root_label[b]);
            label_size[la].cmp(&label_size[lb]).then(lb.cmp(&la)).then(b.cmp(&a))
        }) else {
            continue;
        };
        let size: usize = comp_size[o];
        label_size[root_label[o]] -= size;
        label_size[root_label[target]] += size;
        comp_size[target] += size;
        parent[o] = target;
        let moved = std::mem::take(&mut adjacency[o]);
        adjacency[target].extend(moved);
    }

    let mut renumber = HashMap::new();
    let mut out = Vec::with_capacity(n);
    for p in 0..n {
        let r = find(&mut parent, comp[p]);
        let l = root_label[r];
        let next = renumber.len();
        out.push(*renumber.entry(l).or_insert(next));
    }
    out
}

/// True when every label's pixel set is a single 4-connected component.
pub fn labels_are_connected(map: &SuperpixelMap) -> bool {
    let (w, h) = (map.width, map.height);
    let mut seen = vec![false; map.labels.len()];
    let mut started = vec![false; map.count];
    for start in 0..map.labels.len() {
        if seen[start] {
            continue;
        }
        let l = map.labels[start];
        if started[l] {
            return false;
        }
        started[l] = true;
        seen[start] = true;
        let mut stack = vec![start];
        while let Some(p) = stack.pop() {
            for q in neighbors4(p, w, h) {
                if !seen[q] && map.labels[q] == l {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn points1(v: &[f64]) -> FeatureMatrix {
        let rows: Vec<Vec<f64>> = v.iter().map(|&x| vec![x]).collect();
        FeatureMatrix::from_rows(&rows).unwrap()
    }

    /// Minimum inertia over every 2-partition of a small 1-D point set.
    fn best_two_partition(v: &[f64]) -> (f64, f64, f64) {
        let n = v.len();
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for mask in 1..(1u32 << n) - 1 {
            let (a, b): (Vec<f64>, Vec<f64>) = {
                let mut a = Vec::new();
                let mut b = Vec::new();
                for (i, &x) in v.iter().enumerate() {
                    if mask & (1 << i) != 0 {
                        a.push(x);
                    } else {
                        b.push(x);
                    }
                }
                (a, b)
            };
            let ma = a.iter().sum::<f64>() / a.len() as f64;
            let mb = b.iter().sum::<f64>() / b.len() as f64;
            let cost: f64 = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>()
                + b.iter().map(|x| (x - mb).powi(2)).sum::<f64>();
            if cost < best.0 {
                best = (cost, ma.min(mb), ma.max(mb));
            }
        }
        best
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let c = kmeans(&points1(&[0.0, 2.0, 4.0]), 1, 7, 50).unwrap();
        assert_eq!(c.centers, vec![vec![2.0]]);
        assert!((c.inertia - 8.0).abs() < 1e-12);
    }

    #[test]
    fn two_blobs_match_brute_force() {
        let v = [0.0, 0.1, 10.0, 10.1];
        let (cost, lo, hi) = best_two_partition(&v);
        for seed in 0..10 {
            let c = kmeans(&points1(&v), 2, seed, 50).unwrap();
            let mut centers: Vec<f64> = c.centers.iter().map(|c| c[0]).collect();
            centers.sort_by(f64::total_cmp);
            assert!((centers[0] - lo).abs() < 1e-12 && (centers[1] - hi).abs() < 1e-12);
            assert!((c.inertia - cost).abs() < 1e-12);
        }
        assert!((lo - 0.05).abs() < 1e-12 && (hi - 10.05).abs() < 1e-12);
    }

    #[test]
    fn kmeans_errors() {
        assert_eq!(
            kmeans(&FeatureMatrix::new(3), 1, 0, 10).unwrap_err(),
            SegmentationError::EmptyInput
        );
        assert_eq!(
            kmeans(&points1(&[1.0, 1.0, 2.0]), 3, 0, 10).unwrap_err(),
            SegmentationError::InvalidK { k: 3, distinct: 2 }
        );
        assert!(matches!(
            kmeans(&points1(&[1.0]), 0, 0, 10),
            Err(SegmentationError::InvalidK { k: 0, .. })
        ));
        assert!(FeatureMatrix::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn dominant_color_rules() {
        let red = RgbColor::new(255, 0, 0);
        let blue = RgbColor::new(0, 0, 255);
        let img = Image::new(5, 1, vec![red, blue, red, blue, red]).unwrap();
        assert_eq!(dominant_color(&img, &[0, 2]).unwrap(), red);
        assert_eq!(dominant_color(&img, &[0, 1, 2, 3, 4]).unwrap(), red);
        assert_eq!(dominant_color(&img, &[0, 1, 2, 3]).unwrap(), blue);
        assert_eq!(dominant_color(&img, &[]).unwrap_err(), SegmentationError::EmptyRegion);
    }

    #[test]
    fn slic_uniform_image_is_a_regular_grid() {
        let img = Image::filled(100, 100, RgbColor::new(120, 130, 140)).unwrap();
        let map = slic(&img, 25, DEFAULT_COMPACTNESS, DEFAULT_SLIC_ITERS).unwrap();
        assert_eq!(map.count, 25);
        for s in map.sizes() {
            assert!((360..=440).contains(&s), "size {s}");
        }
        assert!(labels_are_connected(&map));
    }

    #[test]
    fn slic_tiny_image_one_pixel_each() {
        let img = Image::from_fn(2, 2, |x, y| RgbColor::new((x * 100) as u8, (y * 100) as u8, 0)).unwrap();
        let map = slic(&img, 4, DEFAULT_COMPACTNESS, DEFAULT_SLIC_ITERS).unwrap();
        assert_eq!(map.count, 4);
        assert_eq!(map.sizes(), vec![1, 1, 1, 1]);
    }

    #[test]
    fn slic_splits_along_color_boundary() {
        let (w, h) = (20, 10);
        let red = RgbColor::new(220, 20, 30);
        let blue = RgbColor::new(20, 40, 210);
        let img = Image::from_fn(w, h, |x, _| if x < 8 { red } else { blue }).unwrap();
        let lab = img.to_lab();
        // oracle: the vertical cut with the lowest total color distance to the
        // two halves' mean colors
        let mut best = (f64::INFINITY, 0);
        for cut in 1..w {
            let mut cost = 0.0;
            for side in [0..cut, cut..w] {
                let idx: Vec<usize> = (0..w * h).filter(|p| side.contains(&(p % w))).collect();
                let n = idx.len() as f64;
                let mean = idx.iter().fold(crate::color::LabColor::default(), |acc, &p| acc + lab[p]) * (1.0 / n);
                cost += idx.iter().map(|&p| delta_e(lab[p], mean)).sum::<f64>();
            }
            if cost < best.0 {
                best = (cost, cut);
            }
        }
        assert_eq!(best.1, 8);
        let map = slic(&img, 2, DEFAULT_COMPACTNESS, DEFAULT_SLIC_ITERS).unwrap();
        assert_eq!(map.count, 2);
        for y in 0..h {
            for x in 0..w {
                let expect = usize::from(x >= best.1);
                assert_eq!(map.labels[y * w + x], expect, "pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn slic_rejects_too_many_superpixels() {
        let img = Image::filled(3, 3, RgbColor::default()).unwrap();
        assert_eq!(
            slic(&img, 10, 10.0, 10).unwrap_err(),
            SegmentationError::InvalidCount { requested: 10, pixels: 9 }
        );
    }

    #[test]
    fn connectivity_absorbs_fragments() {
        // label 0 has a stray pixel inside label 1's territory
        let labels = vec![0, 0, 1, 1, 0, 0, 1, 0, 1];
        let out = enforce_connectivity(&labels, 3, 3, 2);
        let map = SuperpixelMap {
            width: 3,
            height: 3,
            count: out.iter().max().unwrap() + 1,
            labels: out,
        };
        assert!(labels_are_connected(&map));
        assert_eq!(map.sizes().iter().sum::<usize>(), 9);
    }

    fn small_image() -> impl Strategy<Value = Image> {
        (2usize..12, 2usize..12, any::<u64>()).prop_map(|(w, h, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let palette: Vec<RgbColor> = (0..4)
                .map(|_| RgbColor::new(rng.random(), rng.random(), rng.random()))
                .collect();
            Image::from_fn(w, h, |_, _| palette[rng.random_range(0..4)]).unwrap()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn kmeans_invariants(values in prop::collection::vec((-50.0..50.0f64, -50.0..50.0f64), 1..40), k in 1usize..6, seed: u64) {
            let rows: Vec<Vec<f64>> = values.iter().map(|&(a, b)| vec![a, b]).collect();
            let pts = FeatureMatrix::from_rows(&rows).unwrap();
            prop_assume!(k <= pts.distinct_count());
            let c = kmeans(&pts, k, seed, 200).unwrap();
            for w in c.inertia_history.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
            }
            prop_assert!(c.assignments.iter().all(|&a| a < k));
            if c.converged {
                for (p, &a) in pts.rows().zip(&c.assignments) {
                    let (best, d) = nearest_center(p, &c.centers);
                    prop_assert!((squared_distance(p, &c.centers[a]) - d).abs() < 1e-12 || best == a);
                }
            }
            let again = kmeans(&pts, k, seed, 200).unwrap();
            prop_assert_eq!(c, again);
        }

        #[test]
        fn slic_invariants(img in small_image(), n in 1usize..8) {
            prop_assume!(n <= img.len());
            let map = slic(&img, n, 10.0, 5).unwrap();
            prop_assert_eq!(map.sizes().iter().sum::<usize>(), img.len());
            prop_assert!(map.sizes().iter().all(|&s| s > 0));
            prop_assert!(labels_are_connected(&map));
            prop_assert_eq!(map.clone(), slic(&img, n, 10.0, 5).unwrap());
        }
    }
}
