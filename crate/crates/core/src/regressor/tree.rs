//! Per-landmark regression forests producing local binary features.
//!
//! Each tree splits on the difference of two 8-bit pixel intensities sampled
//! at offsets (canonical units) around its landmark. Trees of one landmark are
//! fitted in sequence to the residual of the 2-D landmark offset, each split
//! chosen as the best of a random candidate set by variance reduction with an
//! exhaustive threshold search.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Frame, Point2, Shape};
use crate::image::ImageView;
use crate::rng;

/// Number of distinct quantized pixel differences, `-255..=255`.
const DIFF_LEVELS: usize = 511;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub a: Point2,
    pub b: Point2,
    /// Samples go right iff `q(a) - q(b) > threshold`.
    pub threshold: i32,
}

impl Split {
    /// A split that routes everything left.
    pub fn degenerate() -> Split {
        Split { a: Point2::ZERO, b: Point2::ZERO, threshold: i32::MAX }
    }
}

/// A complete binary tree of fixed depth; nodes are stored breadth-first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub depth: usize,
    pub splits: Vec<Split>,
    /// Fitted landmark offset per leaf (canonical units).
    pub leaf_values: Vec<Point2>,
}

impl RegressionTree {
    pub fn leaf_count(&self) -> usize {
        1 << self.depth
    }

    /// Leaf reached by a landmark at `center` (local to `view`).
    pub fn leaf(&self, view: &ImageView<'_>, center: Point2, frame: &Frame) -> usize {
        let mut node = 0;
        for _ in 0..self.depth {
            let s = &self.splits[node];
            let right = s.threshold != i32::MAX && {
                let qa = view.nearest_u8(center + frame.to_image(s.a)) as i32;
                let qb = view.nearest_u8(center + frame.to_image(s.b)) as i32;
                qa - qb > s.threshold
            };
            node = 2 * node + 1 + right as usize;
        }
        node - (self.leaf_count() - 1)
    }
}

/// Forests for every landmark of one cascade stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalMappingStage {
    /// Sampling radius in canonical units.
    pub radius: f64,
    pub trees_per_landmark: usize,
    pub depth: usize,
    /// `forests[l][k]`: tree `k` of landmark `l`.
    pub forests: Vec<Vec<RegressionTree>>,
}

impl LocalMappingStage {
    pub fn landmark_count(&self) -> usize {
        self.forests.len()
    }

    pub fn leaves_per_tree(&self) -> usize {
        1 << self.depth
    }

    /// Dimension of the concatenated binary feature.
    pub fn feature_dim(&self) -> usize {
        self.forests.len() * self.trees_per_landmark * self.leaves_per_tree()
    }

    /// Indices of the active entries of the sparse binary feature; exactly one per tree.
    pub fn binary_features(&self, view: &ImageView<'_>, local: &Shape, frame: &Frame) -> Vec<u32> {
        let leaves = self.leaves_per_tree();
        let mut out = Vec::with_capacity(self.forests.len() * self.trees_per_landmark);
        for (l, forest) in self.forests.iter().enumerate() {
            let c = local.point(l);
            for (k, tree) in forest.iter().enumerate() {
                let base = (l * self.trees_per_landmark + k) * leaves;
                out.push((base + tree.leaf(view, c, frame)) as u32);
            }
        }
        out
    }
}

/// One training row for a stage: the current estimate and its target offsets.
#[derive(Debug, Clone)]
pub struct StageSample<'a> {
    pub view: ImageView<'a>,
    /// Current shape in coordinates local to `view`.
    pub shape: Shape,
    pub frame: Frame,
    /// Per-landmark offset to the ground truth, in canonical units.
    pub target: Vec<Point2>,
    pub survives: bool,
}

#[derive(Debug, Clone)]
pub struct StageConfig {
    pub trees_per_landmark: usize,
    pub depth: usize,
    pub radius: f64,
    pub candidates_per_split: usize,
    pub pixel_pool_size: usize,
    pub seed: u64,
}

pub fn train_local_mappings(samples: &[StageSample<'_>], cfg: &StageConfig) -> Result<LocalMappingStage> {
    let rows: Vec<&StageSample<'_>> = samples.iter().filter(|s| s.survives).collect();
    if rows.is_empty() {
        return Err(Error::NoSurvivors);
    }
    if cfg.pixel_pool_size < 2 || cfg.candidates_per_split == 0 {
        return Err(Error::config("pixel pool needs >= 2 points and >= 1 candidate per split"));
    }
    let landmarks = rows[0].shape.len();
    let forests = (0..landmarks).into_par_iter().map(|l| fit_forest(&rows, l, cfg)).collect();
    Ok(LocalMappingStage { radius: cfg.radius, trees_per_landmark: cfg.trees_per_landmark, depth: cfg.depth, forests })
}

fn fit_forest(rows: &[&StageSample<'_>], l: usize, cfg: &StageConfig) -> Vec<RegressionTree> {
    let mut residual: Vec<Point2> = rows.iter().map(|r| r.target[l]).collect();
    let mut trees = Vec::with_capacity(cfg.trees_per_landmark);
    for k in 0..cfg.trees_per_landmark {
        let mut rng = rng::stream(cfg.seed, &[l as u64, k as u64]);
        let pool: Vec<Point2> = (0..cfg.pixel_pool_size).map(|_| sample_disk(&mut rng, cfg.radius)).collect();
        // column-major intensities: values[p * n + i] is pool pixel p seen by row i
        let n = rows.len();
        let mut values = vec![0u8; pool.len() * n];
        for (i, r) in rows.iter().enumerate() {
            let c = r.shape.point(l);
            let basis = r.frame.image_basis();
            for (p, &o) in pool.iter().enumerate() {
                values[p * n + i] = r.view.nearest_u8(c + basis.apply(o));
            }
        }
        let (tree, pairs) = grow_tree(&values, n, &residual, &pool, cfg, &mut rng);
        for (i, res) in residual.iter_mut().enumerate() {
            let leaf = route_pooled(&pairs, tree.depth, |p| values[p * n + i]);
            *res = *res - tree.leaf_values[leaf];
        }
        trees.push(tree);
    }
    trees
}

fn sample_disk(rng: &mut impl Rng, radius: f64) -> Point2 {
    let r = radius * rng.random::<f64>().sqrt();
    let theta = rng.random::<f64>() * std::f64::consts::TAU;
    Point2::new(r * theta.cos(), r * theta.sin())
}

/// Candidate feature: a pair of pool indices.
type Candidate = (usize, usize);

/// Pixel pair and threshold of a split node.
type PairSplit = (usize, usize, i32);

fn grow_tree(
    values: &[u8],
    n: usize,
    targets: &[Point2],
    pool: &[Point2],
    cfg: &StageConfig,
    rng: &mut impl Rng,
) -> (RegressionTree, Vec<Option<PairSplit>>) {
    let internal = (1usize << cfg.depth) - 1;
    let mut splits = Vec::with_capacity(internal);
    let mut split_pairs: Vec<Option<PairSplit>> = Vec::with_capacity(internal);
    let mut members: Vec<Vec<usize>> = vec![(0..n).collect()];
    let mut scratch = SplitScratch::new();
    for node in 0..internal {
        let idx = std::mem::take(&mut members[node]);
        let candidates: Vec<Candidate> = (0..cfg.candidates_per_split)
            .map(|_| {
                let a = rng.random_range(0..pool.len());
                let mut b = rng.random_range(0..pool.len() - 1);
                if b >= a {
                    b += 1;
                }
                (a, b)
            })
            .collect();
        let best = best_split(
            &idx,
            targets,
            &candidates,
            |i, (a, b)| values[a * n + i] as i32 - values[b * n + i] as i32,
            &mut scratch,
        );
        let (left, right): (Vec<usize>, Vec<usize>) = match best {
            Some(((a, b), t)) => {
                splits.push(Split { a: pool[a], b: pool[b], threshold: t });
                split_pairs.push(Some((a, b, t)));
                idx.iter().partition(|&&i| values[a * n + i] as i32 - values[b * n + i] as i32 <= t)
            }
            None => {
                splits.push(Split::degenerate());
                split_pairs.push(None);
                (idx, Vec::new())
            }
        };
        members.push(left);
        members.push(right);
    }
    let leaf_values = members[internal..]
        .iter()
        .map(|idx| {
            if idx.is_empty() {
                Point2::ZERO
            } else {
                let s = idx.iter().fold(Point2::ZERO, |acc, &i| acc + targets[i]);
                s * (1.0 / idx.len() as f64)
            }
        })
        .collect();
    (RegressionTree { depth: cfg.depth, splits, leaf_values }, split_pairs)
}

fn route_pooled(pairs: &[Option<PairSplit>], depth: usize, value: impl Fn(usize) -> u8) -> usize {
    let mut node = 0;
    for _ in 0..depth {
        let right = match pairs[node] {
            Some((a, b, t)) => value(a) as i32 - value(b) as i32 > t,
            None => false,
        };
        node = 2 * node + 1 + right as usize;
    }
    node + 1 - (1 << depth)
}

struct SplitScratch {
    count: Vec<u32>,
    sx: Vec<f64>,
    sy: Vec<f64>,
    diffs: Vec<i32>,
    order: Vec<(usize, usize)>,
}

impl SplitScratch {
    fn new() -> Self {
        SplitScratch {
            count: vec![0; DIFF_LEVELS],
            sx: vec![0.0; DIFF_LEVELS],
            sy: vec![0.0; DIFF_LEVELS],
            diffs: Vec::new(),
            order: Vec::new(),
        }
    }
}

/// Best `(candidate, threshold)` over all candidates and all thresholds that
/// leave both children nonempty, maximizing `|S_L|²/n_L + |S_R|²/n_R`
/// (equivalently minimizing the children's summed squared error). The first
/// maximum in candidate-then-threshold order wins.
fn best_split<C: Copy>(
    idx: &[usize],
    targets: &[Point2],
    candidates: &[C],
    feature: impl Fn(usize, C) -> i32,
    scratch: &mut SplitScratch,
) -> Option<(C, i32)> {
    if idx.len() < 2 {
        return None;
    }
    let (tx, ty) = idx.iter().fold((0.0, 0.0), |(x, y), &i| (x + targets[i].x, y + targets[i].y));
    let n = idx.len() as u32;
    let mut best: Option<(C, i32)> = None;
    let mut best_gain = f64::NEG_INFINITY;
    for &cand in candidates {
        scratch.diffs.clear();
        let (mut lo, mut hi) = (usize::MAX, 0usize);
        for &i in idx {
            let d = (feature(i, cand) + 255) as usize;
            lo = lo.min(d);
            hi = hi.max(d);
            scratch.diffs.push(d as i32);
        }
        if lo == hi {
            continue;
        }
        let mut consider = |d: usize, ln: u32, lx: f64, ly: f64| {
            let rn = n - ln;
            let (rx, ry) = (tx - lx, ty - ly);
            let gain = (lx * lx + ly * ly) / ln as f64 + (rx * rx + ry * ry) / rn as f64;
            if gain > best_gain {
                best_gain = gain;
                best = Some((cand, d as i32 - 255));
            }
        };
        if idx.len() * 4 < hi - lo {
            // sparse node: scan sorted rows instead of the histogram
            scratch.order.clear();
            scratch.order.extend(scratch.diffs.iter().zip(idx).map(|(&d, &i)| (d as usize, i)));
            scratch.order.sort_unstable();
            let (mut ln, mut lx, mut ly) = (0u32, 0.0, 0.0);
            for (k, &(d, i)) in scratch.order.iter().enumerate() {
                ln += 1;
                lx += targets[i].x;
                ly += targets[i].y;
                match scratch.order.get(k + 1) {
                    Some(&(next, _)) if next != d => consider(d, ln, lx, ly),
                    _ => {}
                }
            }
            continue;
        }
        scratch.count[lo..=hi].iter_mut().for_each(|c| *c = 0);
        scratch.sx[lo..=hi].iter_mut().for_each(|c| *c = 0.0);
        scratch.sy[lo..=hi].iter_mut().for_each(|c| *c = 0.0);
        for (&d, &i) in scratch.diffs.iter().zip(idx) {
            let d = d as usize;
            scratch.count[d] += 1;
            scratch.sx[d] += targets[i].x;
            scratch.sy[d] += targets[i].y;
        }
        let (mut ln, mut lx, mut ly) = (0u32, 0.0, 0.0);
        for d in lo..hi {
            if scratch.count[d] == 0 {
                continue;
            }
            ln += scratch.count[d];
            lx += scratch.sx[d];
            ly += scratch.sy[d];
            consider(d, ln, lx, ly);
        }
    }
    best
}
