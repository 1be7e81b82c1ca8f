//! The ibug `.pts` landmark format.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Point2, Shape};

pub fn load_pts(path: &Path) -> Result<Shape> {
    let text = fs::read_to_string(path)?;
    parse_pts(&text).map_err(|reason| Error::malformed(path.display().to_string(), reason))
}

/// Parses `version: 1`, `n_points: N`, `{`, N coordinate pairs, `}`.
/// Coordinates are kept exactly as written.
pub fn parse_pts(text: &str) -> std::result::Result<Shape, String> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let version = lines.next().ok_or("empty file")?;
    match version.split_once(':') {
        Some((k, v)) if k.trim() == "version" && v.trim() == "1" => {}
        _ => return Err(format!("expected `version: 1`, found `{version}`")),
    }
    let header = lines.next().ok_or("missing n_points")?;
    let n: usize = match header.split_once(':') {
        Some((k, v)) if k.trim() == "n_points" => {
            v.trim().parse().map_err(|_| format!("bad n_points `{}`", v.trim()))?
        }
        _ => return Err(format!("expected `n_points: N`, found `{header}`")),
    };
    if lines.next() != Some("{") {
        return Err("expected `{`".into());
    }
    let mut points = Vec::with_capacity(n);
    let mut closed = false;
    for line in lines.by_ref() {
        if line == "}" {
            closed = true;
            break;
        }
        let mut it = line.split_whitespace();
        let (Some(x), Some(y), None) = (it.next(), it.next(), it.next()) else {
            return Err(format!("expected `x y`, found `{line}`"));
        };
        let parse = |s: &str| s.parse::<f64>().map_err(|_| format!("non-numeric coordinate `{s}`"));
        points.push(Point2::new(parse(x)?, parse(y)?));
    }
    if !closed {
        return Err("missing `}`".into());
    }
    if let Some(extra) = lines.next() {
        return Err(format!("unexpected content after `}}`: `{extra}`"));
    }
    if points.len() != n {
        return Err(format!("n_points is {n} but {} pairs were given", points.len()));
    }
    Shape::new(points).map_err(|e| e.to_string())
}

/// Formats with the shortest representation that parses back to the same `f64`.
pub fn format_pts(shape: &Shape) -> String {
    let mut out = format!("version: 1\nn_points: {}\n{{\n", shape.len());
    for p in shape.points() {
        let _ = writeln!(out, "{:?} {:?}", p.x, p.y);
    }
    out.push_str("}\n");
    out
}

pub fn write_pts(path: &Path, shape: &Shape) -> Result<()> {
    fs::write(path, format_pts(shape))?;
    Ok(())
}
