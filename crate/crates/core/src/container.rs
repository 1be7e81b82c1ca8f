//! Binary model container and its JSON export.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! "LSRM" u32 version  u32 L  u32 T  feature-config
//! shape(mean) shape(init)  T × stage
//! zero or more sections: tag[4] u64 byte-length payload   ("NBCL", "GEOM")
//! ```
//!
//! Floats are stored as their IEEE-754 bit patterns, so a round trip is bit-exact.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::appearance::{LandmarkClassifier, LandmarkClassifierSet};
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::geometry::{Point2, Shape};
use crate::geometry_validator::{GeometryModel, IntrinsicRange, StableCombination};
use crate::regressor::{CascadeModel, CascadeStage, GlobalLinearStage, LocalMappingStage, RegressionTree, Split};

pub const MAGIC: &[u8; 4] = b"LSRM";
pub const FORMAT_VERSION: u32 = 1;
const TAG_CLASSIFIERS: &[u8; 4] = b"NBCL";
const TAG_GEOMETRY: &[u8; 4] = b"GEOM";

/// A cascade with the validators trained alongside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub cascade: CascadeModel,
    pub classifiers: Option<LandmarkClassifierSet>,
    pub geometry: Option<GeometryModel>,
}

impl ModelBundle {
    pub fn new(cascade: CascadeModel) -> Self {
        ModelBundle { cascade, classifiers: None, geometry: None }
    }

    /// The feature configuration recorded in the header.
    fn header_features(&self) -> FeatureConfig {
        self.classifiers.as_ref().map(|c| c.features.clone()).unwrap_or_default()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        put_u32(&mut w, FORMAT_VERSION);
        put_u32(&mut w, self.cascade.landmark_count as u32);
        put_u32(&mut w, self.cascade.stages.len() as u32);
        put_features(&mut w, &self.header_features());
        put_u32(&mut w, self.cascade.version);
        put_shape(&mut w, &self.cascade.mean_shape);
        put_shape(&mut w, &self.cascade.init_shape);
        for s in &self.cascade.stages {
            put_stage(&mut w, s);
        }
        if let Some(c) = &self.classifiers {
            let mut p = Vec::new();
            put_classifiers(&mut p, c);
            put_section(&mut w, TAG_CLASSIFIERS, &p);
        }
        if let Some(g) = &self.geometry {
            let mut p = Vec::new();
            put_geometry(&mut p, g);
            put_section(&mut w, TAG_GEOMETRY, &p);
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| corrupt("truncated header"))?;
        if &magic != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = get_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Container(format!("unsupported format version {version}")));
        }
        let l = get_u32(&mut r)? as usize;
        let t = get_u32(&mut r)? as usize;
        let _features = get_features(&mut r)?;
        let model_version = get_u32(&mut r)?;
        let mean_shape = get_shape(&mut r)?;
        let init_shape = get_shape(&mut r)?;
        if mean_shape.len() != l || init_shape.len() != l {
            return Err(corrupt("shape length disagrees with header"));
        }
        let stages = (0..t).map(|_| get_stage(&mut r, l)).collect::<Result<Vec<_>>>()?;
        let cascade = CascadeModel { version: model_version, landmark_count: l, mean_shape, init_shape, stages };
        let mut bundle = ModelBundle::new(cascade);
        while (r.position() as usize) < bytes.len() {
            let mut tag = [0u8; 4];
            r.read_exact(&mut tag).map_err(|_| corrupt("truncated section tag"))?;
            let len = get_u64(&mut r)? as usize;
            let start = r.position() as usize;
            let payload = bytes.get(start..start + len).ok_or_else(|| corrupt("section overruns file"))?;
            let mut pr = Cursor::new(payload);
            match &tag {
                t if t == TAG_CLASSIFIERS => bundle.classifiers = Some(get_classifiers(&mut pr)?),
                t if t == TAG_GEOMETRY => bundle.geometry = Some(get_geometry(&mut pr)?),
                _ => return Err(Error::Container(format!("unknown section {:?}", String::from_utf8_lossy(&tag)))),
            }
            if pr.position() as usize != len {
                return Err(corrupt("section length mismatch"));
            }
            r.set_position((start + len) as u64);
        }
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        ModelBundle::from_bytes(&fs::read(path)?)
    }

    /// Pretty JSON; floats print in shortest round-trip form.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut b: ModelBundle = serde_json::from_str(text)?;
        b.classifiers = b.classifiers.map(LandmarkClassifierSet::restore);
        Ok(b)
    }
}

fn corrupt(msg: &str) -> Error {
    Error::Container(msg.to_string())
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.write_u32::<LE>(v).expect("vec write");
}

fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.write_u64::<LE>(v).expect("vec write");
}

fn put_f64(w: &mut Vec<u8>, v: f64) {
    w.write_u64::<LE>(v.to_bits()).expect("vec write");
}

fn put_f64s(w: &mut Vec<u8>, v: &[f64]) {
    put_u64(w, v.len() as u64);
    v.iter().for_each(|&x| put_f64(w, x));
}

fn get_u32(r: &mut Cursor<&[u8]>) -> Result<u32> {
    r.read_u32::<LE>().map_err(|_| corrupt("unexpected end of data"))
}

fn get_i32(r: &mut Cursor<&[u8]>) -> Result<i32> {
    r.read_i32::<LE>().map_err(|_| corrupt("unexpected end of data"))
}

fn get_u64(r: &mut Cursor<&[u8]>) -> Result<u64> {
    r.read_u64::<LE>().map_err(|_| corrupt("unexpected end of data"))
}

fn get_f64(r: &mut Cursor<&[u8]>) -> Result<f64> {
    get_u64(r).map(f64::from_bits)
}

/// Reads a length prefix, refusing counts that cannot fit in the remaining bytes.
fn get_len(r: &mut Cursor<&[u8]>, elem_size: usize) -> Result<usize> {
    let n = get_u64(r)? as usize;
    let remaining = r.get_ref().len() - r.position() as usize;
    if n.checked_mul(elem_size).is_none_or(|b| b > remaining) {
        return Err(corrupt("length prefix exceeds data"));
    }
    Ok(n)
}

fn get_f64s(r: &mut Cursor<&[u8]>) -> Result<Vec<f64>> {
    let n = get_len(r, 8)?;
    (0..n).map(|_| get_f64(r)).collect()
}

fn put_section(w: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    w.extend_from_slice(tag);
    put_u64(w, payload.len() as u64);
    w.extend_from_slice(payload);
}

fn put_features(w: &mut Vec<u8>, f: &FeatureConfig) {
    put_u32(w, f.patch_size as u32);
    put_u32(w, f.hog_cells as u32);
    put_u32(w, f.hog_bins as u32);
    put_f64s(w, &f.ring_radii);
    put_u32(w, f.points_per_ring as u32);
    put_u32(w, f.comparison_pairs as u32);
    put_f64(w, f.reference_radius);
}

fn get_features(r: &mut Cursor<&[u8]>) -> Result<FeatureConfig> {
    Ok(FeatureConfig {
        patch_size: get_u32(r)? as usize,
        hog_cells: get_u32(r)? as usize,
        hog_bins: get_u32(r)? as usize,
        ring_radii: get_f64s(r)?,
        points_per_ring: get_u32(r)? as usize,
        comparison_pairs: get_u32(r)? as usize,
        reference_radius: get_f64(r)?,
    })
}

fn put_point(w: &mut Vec<u8>, p: Point2) {
    put_f64(w, p.x);
    put_f64(w, p.y);
}

fn get_point(r: &mut Cursor<&[u8]>) -> Result<Point2> {
    Ok(Point2::new(get_f64(r)?, get_f64(r)?))
}

fn put_shape(w: &mut Vec<u8>, s: &Shape) {
    put_u64(w, s.len() as u64);
    s.points().iter().for_each(|&p| put_point(w, p));
}

fn get_shape(r: &mut Cursor<&[u8]>) -> Result<Shape> {
    let n = get_len(r, 16)?;
    let pts = (0..n).map(|_| get_point(r)).collect::<Result<Vec<_>>>()?;
    Shape::new(pts).map_err(|e| Error::Container(format!("invalid shape: {e}")))
}

fn put_stage(w: &mut Vec<u8>, s: &CascadeStage) {
    let local = &s.local;
    put_f64(w, local.radius);
    put_u32(w, local.trees_per_landmark as u32);
    put_u32(w, local.depth as u32);
    for forest in &local.forests {
        for tree in forest {
            for sp in &tree.splits {
                put_point(w, sp.a);
                put_point(w, sp.b);
                w.write_i32::<LE>(sp.threshold).expect("vec write");
            }
            tree.leaf_values.iter().for_each(|&p| put_point(w, p));
        }
    }
    let g = &s.global;
    put_u64(w, g.feature_dim as u64);
    put_u32(w, g.output_dim as u32);
    put_f64(w, g.mu);
    put_f64s(w, &g.weights);
}

fn get_stage(r: &mut Cursor<&[u8]>, l: usize) -> Result<CascadeStage> {
    let radius = get_f64(r)?;
    let trees = get_u32(r)? as usize;
    let depth = get_u32(r)? as usize;
    if depth == 0 || depth > 20 {
        return Err(corrupt("implausible tree depth"));
    }
    let mut forests = Vec::with_capacity(l);
    for _ in 0..l {
        let mut forest = Vec::with_capacity(trees);
        for _ in 0..trees {
            let splits = (0..(1usize << depth) - 1)
                .map(|_| Ok(Split { a: get_point(r)?, b: get_point(r)?, threshold: get_i32(r)? }))
                .collect::<Result<Vec<_>>>()?;
            let leaf_values = (0..1usize << depth).map(|_| get_point(r)).collect::<Result<Vec<_>>>()?;
            forest.push(RegressionTree { depth, splits, leaf_values });
        }
        forests.push(forest);
    }
    let local = LocalMappingStage { radius, trees_per_landmark: trees, depth, forests };
    let feature_dim = get_u64(r)? as usize;
    let output_dim = get_u32(r)? as usize;
    let mu = get_f64(r)?;
    let weights = get_f64s(r)?;
    if feature_dim != local.feature_dim() || output_dim != 2 * l || weights.len() != feature_dim * output_dim {
        return Err(corrupt("stage dimensions disagree"));
    }
    Ok(CascadeStage { local, global: GlobalLinearStage { feature_dim, output_dim, mu, weights } })
}

fn put_classifiers(w: &mut Vec<u8>, c: &LandmarkClassifierSet) {
    put_shape(w, &c.reference);
    put_features(w, &c.features);
    put_u32(w, c.classifiers.len() as u32);
    for k in &c.classifiers {
        put_f64(w, k.priors[0]);
        put_f64(w, k.priors[1]);
        put_u32(w, k.edges.len() as u32);
        for (e, cond) in k.edges.iter().zip(&k.conditionals) {
            put_f64s(w, e);
            cond[0].iter().chain(&cond[1]).for_each(|&p| put_f64(w, p));
        }
    }
}

fn get_classifiers(r: &mut Cursor<&[u8]>) -> Result<LandmarkClassifierSet> {
    let reference = get_shape(r)?;
    let features = get_features(r)?;
    let n = get_u32(r)? as usize;
    let mut classifiers = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let priors = [get_f64(r)?, get_f64(r)?];
        let m = get_u32(r)? as usize;
        let mut edges = Vec::with_capacity(m.min(1 << 20));
        let mut conditionals = Vec::with_capacity(m.min(1 << 20));
        for _ in 0..m {
            let e = get_f64s(r)?;
            let b = e.len() + 1;
            let valid = (0..b).map(|_| get_f64(r)).collect::<Result<Vec<_>>>()?;
            let invalid = (0..b).map(|_| get_f64(r)).collect::<Result<Vec<_>>>()?;
            edges.push(e);
            conditionals.push([valid, invalid]);
        }
        classifiers.push(LandmarkClassifier::from_parts(priors, edges, conditionals)?);
    }
    LandmarkClassifierSet::new(reference, features, classifiers)
}

fn put_geometry(w: &mut Vec<u8>, g: &GeometryModel) {
    put_u32(w, g.landmark_count as u32);
    put_u32(w, g.stable_subset.len() as u32);
    g.stable_subset.iter().for_each(|&i| put_u32(w, i as u32));
    put_u32(w, g.combinations.len() as u32);
    for c in &g.combinations {
        put_u32(w, c.indices.len() as u32);
        c.indices.iter().for_each(|&i| put_u32(w, i as u32));
        for v in [c.range.c_min, c.range.c_max, c.range.mean, c.range.std] {
            put_f64(w, v);
        }
    }
}

fn get_geometry(r: &mut Cursor<&[u8]>) -> Result<GeometryModel> {
    let landmark_count = get_u32(r)? as usize;
    let ns = get_u32(r)? as usize;
    let stable_subset = (0..ns).map(|_| get_u32(r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let nc = get_u32(r)? as usize;
    let mut combinations = Vec::with_capacity(nc.min(1 << 16));
    for _ in 0..nc {
        let k = get_u32(r)? as usize;
        if k != 5 && k != 6 {
            return Err(corrupt("combination size must be 5 or 6"));
        }
        let indices = (0..k).map(|_| get_u32(r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        if indices.iter().any(|&i| i >= landmark_count) {
            return Err(corrupt("combination index out of range"));
        }
        let range = IntrinsicRange { c_min: get_f64(r)?, c_max: get_f64(r)?, mean: get_f64(r)?, std: get_f64(r)? };
        combinations.push(StableCombination { indices, range });
    }
    Ok(GeometryModel { landmark_count, stable_subset, combinations })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_bundle() -> ModelBundle {
        let shape = Shape::from_xy(&[(0.1, 0.2), (0.9, 0.15), (0.5, 0.5), (0.2, 0.8), (0.8, 0.85)]).unwrap();
        let tree = RegressionTree {
            depth: 1,
            splits: vec![Split { a: Point2::new(0.1, -0.2), b: Point2::new(1.0 / 3.0, 0.0), threshold: -7 }],
            leaf_values: vec![Point2::new(1e-300, -0.0), Point2::new(f64::MIN_POSITIVE, 2.5)],
        };
        let local = LocalMappingStage { radius: 0.6, trees_per_landmark: 1, depth: 1, forests: vec![vec![tree]; 5] };
        let weights: Vec<f64> = (0..100).map(|i| (i as f64).sin() / 7.0).collect();
        let global = GlobalLinearStage { feature_dim: 10, output_dim: 10, mu: 0.01, weights };
        let cascade = CascadeModel {
            version: 1,
            landmark_count: 5,
            mean_shape: shape.clone(),
            init_shape: shape,
            stages: vec![CascadeStage { local, global }],
        };
        let geometry = GeometryModel {
            landmark_count: 5,
            stable_subset: vec![0, 1, 2, 3, 4],
            combinations: vec![StableCombination {
                indices: vec![0, 1, 2, 3, 4],
                range: IntrinsicRange { c_min: 0.1, c_max: 0.3, mean: 0.2, std: 0.01 },
            }],
        };
        ModelBundle { cascade, classifiers: None, geometry: Some(geometry) }
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let b = tiny_bundle();
        let bytes = b.to_bytes();
        assert_eq!(&bytes[..4], MAGIC);
        let back = ModelBundle::from_bytes(&bytes).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let b = tiny_bundle();
        let back = ModelBundle::from_json(&b.to_json().unwrap()).unwrap();
        assert_eq!(back.to_bytes(), b.to_bytes());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = tiny_bundle().to_bytes();
        assert!(ModelBundle::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ModelBundle::from_bytes(&bad).is_err());
        assert!(ModelBundle::from_bytes(&[]).is_err());
    }
}
