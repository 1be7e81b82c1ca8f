//! Local-appearance validation with per-landmark naive-Bayes classifiers.
//!
//! Classifiers are trained on descriptors sampled at Gaussian perturbations of
//! ground-truth landmarks, labelled valid when the perturbation is shorter than
//! a distance threshold. A shape's appearance score is the fraction of its
//! landmarks classified valid.

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{anchored, FeatureConfig, FeatureExtractor};
use crate::geometry::{Frame, Point2, Shape};
use crate::image::GrayImage;
use crate::rng;

pub const DEFAULT_BINS: usize = 8;
pub const DEFAULT_SMOOTHING: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    /// Standard deviation of the isotropic perturbation, pixels.
    pub sigma: f64,
    /// Perturbations strictly shorter than this are valid, pixels.
    pub d_t: f64,
    /// Draws per landmark, spread cyclically over the seed images.
    pub samples_per_landmark: usize,
    pub rng_seed: u64,
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !(self.d_t > 0.0) || !self.sigma.is_finite() || !self.d_t.is_finite() {
            return Err(Error::config("sigma and d_t must be positive"));
        }
        if self.samples_per_landmark < 2 {
            return Err(Error::config("samples_per_landmark must be >= 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Validity {
    Valid,
    Invalid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedSample {
    pub landmark: usize,
    pub location: Point2,
    pub distance: f64,
    pub positive: bool,
    pub descriptor: Vec<f64>,
}

/// Perturbation offset of draw `draw` for landmark `landmark`.
pub fn perturbation_offset(cfg: &PerturbationConfig, landmark: usize, draw: usize) -> Point2 {
    let mut rng = rng::stream(cfg.rng_seed, &[landmark as u64, draw as u64]);
    let n = Normal::new(0.0, cfg.sigma).expect("sigma validated");
    Point2::new(n.sample(&mut rng), n.sample(&mut rng))
}

/// Valid iff strictly closer than `d_t`.
pub fn is_positive(distance: f64, d_t: f64) -> bool {
    distance < d_t
}

/// Draws perturbed landmarks around manual labels and extracts their descriptors.
///
/// Descriptors are sampled in the canonical frame of the labelled shape
/// relative to `reference`.
pub fn generate_training_samples(
    labeled: &[(&GrayImage, &Shape)],
    reference: &Shape,
    extractor: &FeatureExtractor,
    cfg: &PerturbationConfig,
) -> Result<Vec<PerturbedSample>> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(Error::EmptySeed);
    }
    let prepared: Vec<((i64, i64), Shape, Frame)> = labeled
        .iter()
        .map(|(_, s)| {
            let (anchor, local) = anchored(s);
            let frame = Frame::of(&local, reference)?;
            Ok((anchor, local, frame))
        })
        .collect::<Result<_>>()?;
    let l = reference.len();
    let jobs: Vec<(usize, usize)> = (0..l).flat_map(|lm| (0..cfg.samples_per_landmark).map(move |d| (lm, d))).collect();
    Ok(jobs
        .par_iter()
        .map(|&(lm, draw)| {
            let k = draw % labeled.len();
            let (anchor, local, frame) = &prepared[k];
            let offset = perturbation_offset(cfg, lm, draw);
            let distance = offset.norm();
            let view = labeled[k].0.view(anchor.0, anchor.1);
            let descriptor = extractor.landmark(&view, local.point(lm) + offset, frame);
            PerturbedSample {
                landmark: lm,
                location: labeled[k].1.point(lm) + offset,
                distance,
                positive: is_positive(distance, cfg.d_t),
                descriptor,
            }
        })
        .collect())
}

const VALID: usize = 0;
const INVALID: usize = 1;
/// Log-posterior gaps within this relative band are rounding noise and count as ties.
const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkClassifier {
    /// `[P(valid), P(invalid)]`.
    pub priors: [f64; 2],
    /// Per component, ascending bin edges; the bin of `x` is the number of edges below it.
    pub edges: Vec<Vec<f64>>,
    /// Per component and class, bin probabilities.
    pub conditionals: Vec<[Vec<f64>; 2]>,
    #[serde(skip)]
    log_priors: [f64; 2],
    #[serde(skip)]
    log_conditionals: Vec<[Vec<f64>; 2]>,
}

impl LandmarkClassifier {
    pub fn from_parts(priors: [f64; 2], edges: Vec<Vec<f64>>, conditionals: Vec<[Vec<f64>; 2]>) -> Result<Self> {
        if edges.len() != conditionals.len() {
            return Err(Error::DimensionMismatch { expected: edges.len(), found: conditionals.len() });
        }
        for (e, c) in edges.iter().zip(&conditionals) {
            if c[0].len() != e.len() + 1 || c[1].len() != e.len() + 1 {
                return Err(Error::DimensionMismatch { expected: e.len() + 1, found: c[0].len().min(c[1].len()) });
            }
        }
        let log_priors = [priors[0].ln(), priors[1].ln()];
        let log_conditionals = conditionals
            .iter()
            .map(|c| [c[0].iter().map(|p| p.ln()).collect(), c[1].iter().map(|p| p.ln()).collect()])
            .collect();
        Ok(LandmarkClassifier { priors, edges, conditionals, log_priors, log_conditionals })
    }

    /// Fits class statistics on fixed bin edges.
    pub fn fit_with_edges(edges: Vec<Vec<f64>>, samples: &[(&[f64], bool)], smoothing: f64) -> Result<Self> {
        let n_pos = samples.iter().filter(|s| s.1).count();
        let n_neg = samples.len() - n_pos;
        let class_n = [n_pos as f64, n_neg as f64];
        let total = samples.len() as f64;
        let conditionals = edges
            .iter()
            .enumerate()
            .map(|(k, e)| {
                let mut counts = [vec![0.0f64; e.len() + 1], vec![0.0f64; e.len() + 1]];
                for (desc, pos) in samples {
                    counts[if *pos { VALID } else { INVALID }][bin_index(e, desc[k])] += 1.0;
                }
                let b = (e.len() + 1) as f64;
                for c in [VALID, INVALID] {
                    let denom = class_n[c] + smoothing * b;
                    counts[c].iter_mut().for_each(|v| *v = (*v + smoothing) / denom);
                }
                counts
            })
            .collect();
        LandmarkClassifier::from_parts([class_n[0] / total, class_n[1] / total], edges, conditionals)
    }

    pub fn components(&self) -> usize {
        self.edges.len()
    }

    pub fn bins(&self, descriptor: &[f64]) -> Vec<usize> {
        self.edges.iter().zip(descriptor).map(|(e, &x)| bin_index(e, x)).collect()
    }

    /// `[log P(valid) + Σ log P(bin_k | valid), same for invalid]`.
    pub fn log_posteriors(&self, descriptor: &[f64]) -> Result<[f64; 2]> {
        if descriptor.len() != self.components() {
            return Err(Error::DimensionMismatch { expected: self.components(), found: descriptor.len() });
        }
        let mut s = self.log_priors;
        for ((e, lc), &x) in self.edges.iter().zip(&self.log_conditionals).zip(descriptor) {
            let b = bin_index(e, x);
            s[VALID] += lc[VALID][b];
            s[INVALID] += lc[INVALID][b];
        }
        Ok(s)
    }

    fn restore_logs(&mut self) {
        *self = LandmarkClassifier::from_parts(
            self.priors,
            std::mem::take(&mut self.edges),
            std::mem::take(&mut self.conditionals),
        )
        .expect("shapes checked at construction");
    }
}

fn bin_index(edges: &[f64], x: f64) -> usize {
    edges.partition_point(|&e| x > e)
}

/// Type-1 sample quantiles at `k / bins`, deduplicated.
pub fn quantile_edges(values: &mut [f64], bins: usize) -> Vec<f64> {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let mut edges: Vec<f64> = (1..bins)
        .map(|k| {
            let q = k as f64 / bins as f64;
            let idx = ((q * n as f64).ceil() as usize).clamp(1, n) - 1;
            values[idx]
        })
        .collect();
    edges.dedup();
    edges
}

/// Argmax of the log posterior; ties go to invalid.
pub fn classify_landmark(clf: &LandmarkClassifier, descriptor: &[f64]) -> Result<Validity> {
    let s = clf.log_posteriors(descriptor)?;
    let (v, i) = (s[VALID], s[INVALID]);
    let valid =
        if v.is_finite() && i.is_finite() { v - i > TIE_TOLERANCE * v.abs().max(i.abs()).max(1.0) } else { v > i };
    Ok(if valid { Validity::Valid } else { Validity::Invalid })
}

/// One classifier per landmark, with edges from the pooled quantiles of that landmark's samples.
pub fn train_classifiers(samples: &[PerturbedSample], bins: usize, smoothing: f64) -> Result<Vec<LandmarkClassifier>> {
    if bins < 2 {
        return Err(Error::config("at least two bins per component are required"));
    }
    if !(smoothing >= 0.0) {
        return Err(Error::config("smoothing must be nonnegative"));
    }
    let landmarks = samples.iter().map(|s| s.landmark + 1).max().ok_or(Error::EmptyInput("no perturbed samples"))?;
    let mut groups: Vec<Vec<&PerturbedSample>> = vec![Vec::new(); landmarks];
    for s in samples {
        groups[s.landmark].push(s);
    }
    groups
        .par_iter()
        .enumerate()
        .map(|(l, g)| {
            if !g.iter().any(|s| s.positive) {
                return Err(Error::InsufficientClass { landmark: l, missing: "valid" });
            }
            if !g.iter().any(|s| !s.positive) {
                return Err(Error::InsufficientClass { landmark: l, missing: "invalid" });
            }
            let m = g[0].descriptor.len();
            if let Some(bad) = g.iter().find(|s| s.descriptor.len() != m) {
                return Err(Error::DimensionMismatch { expected: m, found: bad.descriptor.len() });
            }
            let edges = (0..m)
                .map(|k| {
                    let mut col: Vec<f64> = g.iter().map(|s| s.descriptor[k]).collect();
                    quantile_edges(&mut col, bins)
                })
                .collect();
            let rows: Vec<(&[f64], bool)> = g.iter().map(|s| (s.descriptor.as_slice(), s.positive)).collect();
            LandmarkClassifier::fit_with_edges(edges, &rows, smoothing)
        })
        .collect()
}

/// Trained classifiers with the frame reference and descriptor layout they expect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkClassifierSet {
    pub reference: Shape,
    pub features: FeatureConfig,
    pub classifiers: Vec<LandmarkClassifier>,
}

impl LandmarkClassifierSet {
    pub fn new(reference: Shape, features: FeatureConfig, classifiers: Vec<LandmarkClassifier>) -> Result<Self> {
        if classifiers.len() != reference.len() {
            return Err(Error::LandmarkMismatch { expected: reference.len(), found: classifiers.len() });
        }
        let m = features.landmark_len();
        if let Some(c) = classifiers.iter().find(|c| c.components() != m) {
            return Err(Error::DimensionMismatch { expected: m, found: c.components() });
        }
        Ok(LandmarkClassifierSet { reference, features, classifiers })
    }

    /// Rebuilds cached log tables after deserialization.
    pub fn restore(mut self) -> Self {
        self.classifiers.iter_mut().for_each(LandmarkClassifier::restore_logs);
        self
    }

    pub fn extractor(&self) -> Result<FeatureExtractor> {
        FeatureExtractor::new(self.features.clone())
    }

    /// Validity of every landmark of `shape`.
    pub fn landmark_validity(
        &self,
        extractor: &FeatureExtractor,
        img: &GrayImage,
        shape: &Shape,
    ) -> Result<Vec<Validity>> {
        if shape.len() != self.classifiers.len() {
            return Err(Error::LandmarkMismatch { expected: self.classifiers.len(), found: shape.len() });
        }
        let (anchor, local) = anchored(shape);
        let frame = Frame::of(&local, &self.reference)?;
        let view = img.view(anchor.0, anchor.1);
        self.classifiers
            .iter()
            .enumerate()
            .map(|(l, c)| classify_landmark(c, &extractor.landmark(&view, local.point(l), &frame)))
            .collect()
    }
}

/// Fraction of landmarks classified valid.
pub fn appearance_score(
    img: &GrayImage,
    shape: &Shape,
    set: &LandmarkClassifierSet,
    extractor: &FeatureExtractor,
) -> Result<f64> {
    let v = set.landmark_validity(extractor, img, shape)?;
    Ok(fraction_valid(&v))
}

pub fn fraction_valid(v: &[Validity]) -> f64 {
    v.iter().filter(|&&x| x == Validity::Valid).count() as f64 / v.len() as f64
}

/// Perturbs the seed labels, extracts descriptors and trains one classifier per landmark.
pub fn fit_classifier_set(
    labeled: &[(&GrayImage, &Shape)],
    reference: &Shape,
    features: &FeatureConfig,
    perturbation: &PerturbationConfig,
    bins: usize,
    smoothing: f64,
) -> Result<LandmarkClassifierSet> {
    let extractor = FeatureExtractor::new(features.clone())?;
    let samples = generate_training_samples(labeled, reference, &extractor, perturbation)?;
    let classifiers = train_classifiers(&samples, bins, smoothing)?;
    LandmarkClassifierSet::new(reference.clone(), features.clone(), classifiers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(landmark: usize, descriptor: Vec<f64>, positive: bool) -> PerturbedSample {
        PerturbedSample {
            landmark,
            location: Point2::ZERO,
            distance: if positive { 0.0 } else { 9.0 },
            positive,
            descriptor,
        }
    }

    #[test]
    fn boundary_rule() {
        assert!(is_positive(0.0, 2.0));
        assert!(!is_positive(2.0, 2.0));
    }

    #[test]
    fn positive_fraction_matches_chi_square() {
        let cfg = PerturbationConfig { sigma: 2.0, d_t: 2.0, samples_per_landmark: 100_000, rng_seed: 5 };
        let pos = (0..cfg.samples_per_landmark)
            .filter(|&d| is_positive(perturbation_offset(&cfg, 0, d).norm(), cfg.d_t))
            .count();
        let frac = pos as f64 / cfg.samples_per_landmark as f64;
        assert!((frac - (1.0 - (-0.5f64).exp())).abs() < 0.01, "{frac}");
    }

    #[test]
    fn separable_one_component() {
        let mut s: Vec<PerturbedSample> = (0..10).map(|i| sample(0, vec![i as f64], true)).collect();
        s.extend((0..10).map(|i| sample(0, vec![100.0 + i as f64], false)));
        let c = train_classifiers(&s, 8, 1.0).unwrap();
        for x in &s {
            let v = classify_landmark(&c[0], &x.descriptor).unwrap();
            assert_eq!(v == Validity::Valid, x.positive);
        }
    }

    #[test]
    fn duplication_invariance_without_smoothing() {
        let s: Vec<PerturbedSample> =
            (0..23).map(|i| sample(0, vec![(i * 7 % 11) as f64, (i % 3) as f64 * 0.5], i % 4 != 0)).collect();
        let mut d = s.clone();
        d.extend(s.iter().cloned());
        assert_eq!(train_classifiers(&s, 8, 0.0).unwrap(), train_classifiers(&d, 8, 0.0).unwrap());
    }

    #[test]
    fn symmetric_classes() {
        let s: Vec<PerturbedSample> = (0..8).map(|i| sample(0, vec![1.0, 2.0], i % 2 == 0)).collect();
        let c = &train_classifiers(&s, 8, 1.0).unwrap()[0];
        assert_eq!(c.priors, [0.5, 0.5]);
        for cond in &c.conditionals {
            assert_eq!(cond[0], cond[1]);
        }
        assert_eq!(classify_landmark(c, &[1.0, 2.0]).unwrap(), Validity::Invalid);
    }

    #[test]
    fn rounded_ties_go_to_invalid() {
        // equal posteriors 2/4 · (2/4)³ on both sides, whose log sums differ in the last bit
        let descs = [[0.0, 0.0, 0.0], [1.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 0.0, 0.0]];
        let samples: Vec<(&[f64], bool)> =
            descs.iter().zip([true, true, false, false]).map(|(d, v)| (&d[..], v)).collect();
        let c = LandmarkClassifier::fit_with_edges(vec![vec![0.5]; 3], &samples, 1.0).unwrap();
        assert_eq!(classify_landmark(&c, &[0.0, 0.0, 0.0]).unwrap(), Validity::Invalid);
    }

    #[test]
    fn empty_invalid_class_is_valid() {
        let c = LandmarkClassifier::from_parts([1.0, 0.0], vec![vec![0.0]], vec![[vec![0.5, 0.5], vec![0.5, 0.5]]])
            .unwrap();
        assert_eq!(classify_landmark(&c, &[3.0]).unwrap(), Validity::Valid);
    }

    #[test]
    fn prior_dominance() {
        let cond = vec![[vec![0.5, 0.5], vec![0.5, 0.5]]];
        let c = LandmarkClassifier::from_parts([1.0 - 1e-9, 1e-9], vec![vec![0.0]], cond).unwrap();
        assert_eq!(classify_landmark(&c, &[3.0]).unwrap(), Validity::Valid);
        assert!(matches!(classify_landmark(&c, &[3.0, 1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn missing_class_is_reported() {
        let s = vec![sample(0, vec![1.0], true), sample(0, vec![2.0], false), sample(1, vec![1.0], true)];
        assert!(matches!(train_classifiers(&s, 8, 1.0), Err(Error::InsufficientClass { landmark: 1, .. })));
    }

    #[test]
    fn score_fractions() {
        let mut v = vec![Validity::Valid; 34];
        v.extend(vec![Validity::Invalid; 34]);
        assert_eq!(fraction_valid(&v), 0.5);
        assert_eq!(fraction_valid(&[Validity::Valid; 5]), 1.0);
        assert_eq!(fraction_valid(&[Validity::Invalid; 5]), 0.0);
    }

    proptest! {
        #[test]
        fn conditionals_normalized(vals in prop::collection::vec((0.0f64..1.0, any::<bool>()), 4..60)) {
            let mut s: Vec<PerturbedSample> = vals.iter().map(|(v, p)| sample(0, vec![*v, (v * 10.0).floor()], *p)).collect();
            s.push(sample(0, vec![0.5, 5.0], true));
            s.push(sample(0, vec![0.5, 5.0], false));
            let c = &train_classifiers(&s, 8, 1.0).unwrap()[0];
            prop_assert!((c.priors[0] + c.priors[1] - 1.0).abs() < 1e-12);
            for cond in &c.conditionals {
                for row in cond {
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    prop_assert!(row.iter().all(|&p| p > 0.0));
                }
            }
        }

        #[test]
        fn log_domain_stays_finite(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = 10_000;
            let rows: Vec<(Vec<f64>, bool)> = (0..40).map(|i| ((0..m).map(|_| rng.random::<f64>()).collect(), i % 2 == 0)).collect();
            let refs: Vec<(&[f64], bool)> = rows.iter().map(|(d, p)| (d.as_slice(), *p)).collect();
            let edges = vec![vec![0.25, 0.5, 0.75]; m];
            let c = LandmarkClassifier::fit_with_edges(edges, &refs, 1.0).unwrap();
            let probe: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
            let s = c.log_posteriors(&probe).unwrap();
            prop_assert!(s[0].is_finite() && s[1].is_finite());
        }

        #[test]
        fn adding_positive_never_lowers_its_bin(vals in prop::collection::vec((0.0f64..1.0, any::<bool>()), 2..40), x in 0.0f64..1.0) {
            let edges = vec![vec![0.2, 0.4, 0.6, 0.8]];
            let rows: Vec<(Vec<f64>, bool)> = vals.iter().map(|(v, p)| (vec![*v], *p)).collect();
            let mut refs: Vec<(&[f64], bool)> = rows.iter().map(|(d, p)| (d.as_slice(), *p)).collect();
            let before = LandmarkClassifier::fit_with_edges(edges.clone(), &refs, 1.0).unwrap();
            let extra = vec![x];
            refs.push((&extra, true));
            let after = LandmarkClassifier::fit_with_edges(edges.clone(), &refs, 1.0).unwrap();
            let b = bin_index(&edges[0], x);
            prop_assert!(after.conditionals[0][VALID][b] >= before.conditionals[0][VALID][b]);
        }

        #[test]
        fn depends_only_on_bins(a in prop::collection::vec(0.0f64..1.0, 3), jitter in prop::collection::vec(0.0f64..1.0, 3)) {
            let edges = vec![vec![0.3, 0.7]; 3];
            let cond = vec![[vec![0.2, 0.3, 0.5], vec![0.4, 0.4, 0.2]]; 3];
            let c = LandmarkClassifier::from_parts([0.4, 0.6], edges.clone(), cond).unwrap();
            // move each component within its own bin
            let b: Vec<f64> = a.iter().zip(&jitter).map(|(&x, &j)| {
                let k = bin_index(&edges[0], x);
                let lo = if k == 0 { 0.0 } else { edges[0][k - 1] };
                let hi = if k == 2 { 1.0 } else { edges[0][k] };
                let y = lo + j * (hi - lo);
                if bin_index(&edges[0], y) == k { y } else { x }
            }).collect();
            prop_assert_eq!(classify_landmark(&c, &a).unwrap(), classify_landmark(&c, &b).unwrap());
        }
    }
}
