//! ASCII PLY export with per-vertex colour, and a reader for the same
//! subset.

use std::fmt::Write as _;
use std::path::Path;

use crate::binio::{read_file, write_atomic};
use crate::error::{Error, Result};
use crate::flownet::{point_errors, strict_accurate};
use crate::geometry::{FlowField, Point, PointCloud};

pub type Rgb = [u8; 3];

pub const BLUE: Rgb = [0, 0, 255];
pub const GREEN: Rgb = [0, 255, 0];
pub const RED: Rgb = [255, 0, 0];

pub fn ply_string(points: &[Point], colors: &[Rgb]) -> Result<String> {
    if points.len() != colors.len() {
        return Err(Error::Argument(format!(
            "{} points with {} colours",
            points.len(),
            colors.len()
        )));
    }
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    writeln!(s, "element vertex {}", points.len()).unwrap();
    for prop in ["float x", "float y", "float z", "uchar red", "uchar green", "uchar blue"] {
        writeln!(s, "property {prop}").unwrap();
    }
    s.push_str("end_header\n");
    for (p, c) in points.iter().zip(colors) {
        writeln!(s, "{} {} {} {} {} {}", p[0], p[1], p[2], c[0], c[1], c[2]).unwrap();
    }
    Ok(s)
}

pub fn export_ply(points: &[Point], colors: &[Rgb], path: &Path) -> Result<()> {
    write_atomic(path, ply_string(points, colors)?.as_bytes())
}

/// Source points in blue followed by the predicted warp of each source
/// point, green where it passes the strict accuracy test and red elsewhere.
pub fn correctness_view(
    source: &PointCloud,
    pred: &FlowField,
    gt: &FlowField,
) -> Result<(Vec<Point>, Vec<Rgb>)> {
    if pred.len() != source.len() || gt.len() != source.len() {
        return Err(Error::Argument(format!(
            "{} source points, {} predicted and {} true vectors",
            source.len(),
            pred.len(),
            gt.len()
        )));
    }
    let mut points = source.points().to_vec();
    let mut colors = vec![BLUE; source.len()];
    for ((p, s), t) in source.points().iter().zip(pred.vectors()).zip(gt.vectors()) {
        let (epe, rel) = point_errors(s, t);
        points.push(std::array::from_fn(|j| p[j] + s[j]));
        colors.push(if strict_accurate(epe, rel) { GREEN } else { RED });
    }
    Ok((points, colors))
}

/// Parses the ASCII vertex subset written by [`ply_string`].
pub fn parse_ply(text: &str) -> Result<(Vec<Point>, Vec<Rgb>)> {
    let mut offset = 0u64;
    let mut lines = text.split_inclusive('\n').map(|l| {
        let at = offset;
        offset += l.len() as u64;
        (at, l.trim_end())
    });
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| Error::format(text.len() as u64, format!("missing {what}")))
    };
    let (at, magic) = next("magic")?;
    if magic != "ply" {
        return Err(Error::format(at, "not a PLY file"));
    }
    let (at, fmt) = next("format line")?;
    if fmt != "format ascii 1.0" {
        return Err(Error::format(at, format!("unsupported format line {fmt:?}")));
    }
    let mut count = None;
    let mut props = Vec::new();
    loop {
        let (at, line) = next("end_header")?;
        if line == "end_header" {
            break;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| {
                    Error::format(at, format!("bad vertex count {n:?}"))
                })?)
            }
            ["property", _, name] => props.push(name.to_string()),
            ["comment", ..] => {}
            _ => return Err(Error::format(at, format!("unexpected header line {line:?}"))),
        }
    }
    if props != ["x", "y", "z", "red", "green", "blue"] {
        return Err(Error::format(0, format!("unsupported vertex properties {props:?}")));
    }
    let count = count.ok_or_else(|| Error::format(0, "no vertex element"))?;
    let mut points = Vec::with_capacity(count);
    let mut colors = Vec::with_capacity(count);
    for _ in 0..count {
        let (at, line) = next("vertex")?;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(Error::format(at, format!("vertex line has {} fields", f.len())));
        }
        let bad = || Error::format(at, format!("unparsable vertex {line:?}"));
        let mut p = [0.0; 3];
        for (v, s) in p.iter_mut().zip(&f[..3]) {
            *v = s.parse().map_err(|_| bad())?;
        }
        let mut c: Rgb = [0; 3];
        for (v, s) in c.iter_mut().zip(&f[3..]) {
            *v = s.parse().map_err(|_| bad())?;
        }
        points.push(p);
        colors.push(c);
    }
    Ok((points, colors))
}

pub fn read_ply(path: &Path) -> Result<(Vec<Point>, Vec<Rgb>)> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::format(e.utf8_error().valid_up_to() as u64, "not UTF-8"))?;
    parse_ply(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_header() {
        let s = ply_string(&[[1.0, -2.5, 3.25]], &[RED]).unwrap();
        assert!(s.contains("element vertex 1\n"));
        let (p, c) = parse_ply(&s).unwrap();
        assert_eq!(p, vec![[1.0, -2.5, 3.25]]);
        assert_eq!(c, vec![RED]);
    }

    #[test]
    fn exact_prediction_is_all_green() {
        let src = PointCloud::new(vec![[0.; 3], [1., 1., 1.], [2., 0., 1.]]).unwrap();
        let gt = FlowField::new(vec![[0.5, 0., 0.], [0., 0.2, 0.], [0.; 3]]).unwrap();
        let (pts, cols) = correctness_view(&src, &gt, &gt).unwrap();
        assert_eq!(pts.len(), 6);
        assert_eq!(&cols[..3], &[BLUE; 3]);
        assert_eq!(&cols[3..], &[GREEN; 3]);
        let wrong = FlowField::new(vec![[0.5, 0.5, 0.], [0., 0.2, 0.], [0.; 3]]).unwrap();
        let (_, cols) = correctness_view(&src, &wrong, &gt).unwrap();
        assert_eq!(&cols[3..], &[RED, GREEN, GREEN]);
    }

    #[test]
    fn file_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.ply");
        let pts = vec![[0.1, 1.0 / 3.0, -7e-9], [1e6, -0.0, 2.5]];
        export_ply(&pts, &[GREEN, BLUE], &path).unwrap();
        let (p, c) = read_ply(&path).unwrap();
        assert_eq!(p, pts);
        assert_eq!(c, vec![GREEN, BLUE]);
        assert!(matches!(parse_ply("ply\nformat binary\n"), Err(Error::Format { offset: 4, .. })));
    }
}
