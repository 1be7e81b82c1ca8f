//! Datasets: bounding boxes, manifests, splits, `.pts` files and synthetic faces.

mod pts;
pub mod synth;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use pts::{format_pts, load_pts, parse_pts, write_pts};
pub use synth::{synthesize_dataset, SyntheticFace, SyntheticFaceConfig};

use crate::error::{Error, Result};
use crate::evaluation::PupilIndices;
use crate::geometry::Shape;
use crate::image::GrayImage;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || ![x, y, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::config(format!(
                "bounding box needs finite values and positive size, got {x} {y} {w} {h}"
            )));
        }
        Ok(BoundingBox { x, y, w, h })
    }

    /// Tight box around `shape`, grown by `margin` times its size on every side.
    pub fn around(shape: &Shape, margin: f64) -> Result<Self> {
        let (lo, hi) = shape.bounds();
        let (w, h) = (hi.x - lo.x, hi.y - lo.y);
        BoundingBox::new(lo.x - margin * w, lo.y - margin * h, w * (1.0 + 2.0 * margin), h * (1.0 + 2.0 * margin))
    }

    /// Integer corner used as the sampling anchor.
    pub fn anchor(&self) -> (i64, i64) {
        (self.x.floor() as i64, self.y.floor() as i64)
    }

    /// Sidecar format: `x y w h`.
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let v: Vec<f64> = text
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| format!("non-numeric value `{t}`")))
            .collect::<std::result::Result<_, _>>()?;
        let [x, y, w, h] = v[..] else {
            return Err(format!("expected 4 values `x y w h`, found {}", v.len()));
        };
        BoundingBox::new(x, y, w, h).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        BoundingBox::parse(&text).map_err(|r| Error::malformed(path.display().to_string(), r))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, format!("{:?} {:?} {:?} {:?}\n", self.x, self.y, self.w, self.h))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Unlabeled,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest's directory unless absolute.
    pub image: PathBuf,
    #[serde(default)]
    pub pts: Option<PathBuf>,
    pub bbox: BoundingBox,
    pub split: SplitTag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestHeader {
    landmarks: usize,
    pupils: PupilIndices,
}

/// A list of faces with their split tags; stored as JSON lines (a header line, then one entry per line).
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub landmark_count: usize,
    pub pupils: PupilIndices,
    pub entries: Vec<ManifestEntry>,
    /// Directory relative paths resolve against.
    pub base_dir: PathBuf,
}

/// A manifest entry with its image and (if present) label loaded.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub id: String,
    pub image: GrayImage,
    pub bbox: BoundingBox,
    pub shape: Option<Shape>,
    pub split: SplitTag,
}

impl DatasetManifest {
    pub fn new(
        landmark_count: usize,
        pupils: PupilIndices,
        entries: Vec<ManifestEntry>,
        base_dir: PathBuf,
    ) -> Result<Self> {
        pupils.validate(landmark_count)?;
        Ok(DatasetManifest { landmark_count, pupils, entries, base_dir })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path)?;
        let name = path.display().to_string();
        let mut lines = BufReader::new(file).lines();
        let header_line = lines.next().ok_or_else(|| Error::malformed(&name, "empty manifest"))??;
        let header: ManifestHeader =
            serde_json::from_str(&header_line).map_err(|e| Error::malformed(&name, format!("header: {e}")))?;
        let mut entries = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry =
                serde_json::from_str(&line).map_err(|e| Error::malformed(&name, format!("line {}: {e}", n + 2)))?;
            entries.push(e);
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        DatasetManifest::new(header.landmarks, header.pupils, entries, base)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        let header = ManifestHeader { landmarks: self.landmark_count, pupils: self.pupils.clone() };
        serde_json::to_writer(&mut out, &header)?;
        out.push(b'\n');
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.push(b'\n');
        }
        fs::File::create(path)?.write_all(&out)?;
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn with_split(&self, tag: SplitTag) -> DatasetManifest {
        DatasetManifest { entries: self.entries.iter().filter(|e| e.split == tag).cloned().collect(), ..self.clone() }
    }

    /// Loads images and labels in entry order.
    pub fn load_samples(&self) -> Result<Vec<LoadedSample>> {
        self.entries
            .par_iter()
            .map(|e| {
                let image = GrayImage::load_png(&self.resolve(&e.image))?;
                let shape = match &e.pts {
                    Some(p) => {
                        let s = load_pts(&self.resolve(p))?;
                        if s.len() != self.landmark_count {
                            return Err(Error::LandmarkMismatch { expected: self.landmark_count, found: s.len() });
                        }
                        Some(s)
                    }
                    None => None,
                };
                Ok(LoadedSample { id: e.id.clone(), image, bbox: e.bbox, shape, split: e.split })
            })
            .collect()
    }
}

/// Seeded shuffle, then partition into train / unlabeled / test by `ratios`.
///
/// Counts are `round(ratio · n)` for the first two parts; the test part takes the rest.
pub fn split_manifest(
    m: &DatasetManifest,
    ratios: [f64; 3],
    rng_seed: u64,
) -> Result<(DatasetManifest, DatasetManifest, DatasetManifest)> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidRatios(ratios.to_vec()));
    }
    let n = m.entries.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(rng_seed, &[]));
    let n_train = ((ratios[0] * n as f64).round() as usize).min(n);
    let n_unl = ((ratios[1] * n as f64).round() as usize).min(n - n_train);
    let tagged = |range: &[usize], tag: SplitTag| DatasetManifest {
        entries: range.iter().map(|&i| ManifestEntry { split: tag, ..m.entries[i].clone() }).collect(),
        ..m.clone()
    };
    Ok((
        tagged(&order[..n_train], SplitTag::Train),
        tagged(&order[n_train..n_train + n_unl], SplitTag::Unlabeled),
        tagged(&order[n_train + n_unl..], SplitTag::Test),
    ))
}
