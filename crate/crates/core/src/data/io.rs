use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{IbtError, Result};
use crate::geometry::PointCloud;

pub const PALETTE_SIZE: usize = 50;

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| IbtError::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| IbtError::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> IbtError {
    IbtError::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned())
}

fn parse_f64(path: &Path, line: usize, tok: &str) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| parse_err(path, line, format!("{tok:?} is not a number")))?;
    if !v.is_finite() {
        return Err(parse_err(path, line, format!("non-finite coordinate {tok}")));
    }
    Ok(v)
}

/// `x y z [label]` per line. Blank lines and `#` comments are skipped; the
/// label column must be present on all lines or on none.
pub fn load_xyz(path: &Path) -> Result<PointCloud> {
    let text = read(path)?;
    let mut coords = Vec::new();
    let mut labels = Vec::new();
    let mut labelled = None;
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        let has_label = match toks.len() {
            3 => false,
            4 => true,
            n => return Err(parse_err(path, lineno, format!("expected 3 or 4 fields, found {n}"))),
        };
        if *labelled.get_or_insert(has_label) != has_label {
            return Err(parse_err(path, lineno, "label column present on some lines only"));
        }
        coords.push([
            parse_f64(path, lineno, toks[0])?,
            parse_f64(path, lineno, toks[1])?,
            parse_f64(path, lineno, toks[2])?,
        ]);
        if has_label {
            labels.push(
                toks[3]
                    .parse::<usize>()
                    .map_err(|_| parse_err(path, lineno, format!("label {:?} is not a non-negative integer", toks[3])))?,
            );
        }
    }
    if coords.is_empty() {
        return Err(parse_err(path, 1, "no points"));
    }
    let cloud = PointCloud::new(coords, stem(path))?;
    if labelled == Some(true) {
        cloud.with_labels(labels)
    } else {
        Ok(cloud)
    }
}

/// Shortest round-trip float formatting, so reading back is exact.
pub fn write_xyz(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(cloud.len() * 32);
    for (i, p) in cloud.coords.iter().enumerate() {
        let _ = write!(out, "{} {} {}", p[0], p[1], p[2]);
        if let Some(l) = &cloud.point_labels {
            let _ = write!(out, " {}", l[i]);
        }
        out.push('\n');
    }
    write(path, &out)
}

/// ASCII OFF. Only the vertices are kept. Also accepts the common variant
/// where the counts are glued to the keyword (`OFF490 518 0`).
pub fn load_off(path: &Path) -> Result<PointCloud> {
    let text = read(path)?;
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());

    let (first_no, first) = lines.next().ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let rest = first
        .strip_prefix("OFF")
        .ok_or_else(|| parse_err(path, first_no, format!("expected OFF header, found {first:?}")))?
        .trim();
    let (count_no, counts) = if rest.is_empty() {
        lines
            .next()
            .ok_or_else(|| parse_err(path, first_no, "missing vertex/face counts"))?
    } else {
        (first_no, rest)
    };
    let counts: Vec<usize> = counts
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| parse_err(path, count_no, format!("bad counts line {counts:?}")))?;
    let &[nv, _nf, _ne] = counts.as_slice() else {
        return Err(parse_err(path, count_no, "counts line needs 3 integers"));
    };
    if nv == 0 {
        return Err(parse_err(path, count_no, "OFF file declares no vertices"));
    }

    let mut coords = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (no, line) = lines
            .next()
            .ok_or_else(|| parse_err(path, count_no, format!("expected {nv} vertices, found {}", coords.len())))?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 3 {
            return Err(parse_err(path, no, "vertex line needs 3 coordinates"));
        }
        coords.push([parse_f64(path, no, toks[0])?, parse_f64(path, no, toks[1])?, parse_f64(path, no, toks[2])?]);
    }
    PointCloud::new(coords, stem(path))
}

/// Fixed label palette: hues stepped by the golden angle, three brightness
/// tiers. All 50 colors are distinct.
pub fn palette_color(label: usize) -> Option<[u8; 3]> {
    if label >= PALETTE_SIZE {
        return None;
    }
    let h = (label as f64 * 137.507_764_05) % 360.0;
    let (s, v) = [(0.85, 0.95), (0.65, 0.75), (0.95, 0.55)][label % 3];
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0) % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match (h / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let q = |v: f64| ((v + m) * 255.0).round() as u8;
    Some([q(r), q(g), q(b)])
}

pub fn palette_label(rgb: [u8; 3]) -> Option<usize> {
    (0..PALETTE_SIZE).find(|&l| palette_color(l) == Some(rgb))
}

/// ASCII PLY, one `x y z red green blue` row per point.
pub fn write_colored_ply(cloud: &PointCloud, labels: &[usize], path: &Path) -> Result<()> {
    if labels.len() != cloud.len() {
        return Err(IbtError::Data(format!(
            "{} labels for {} points",
            labels.len(),
            cloud.len()
        )));
    }
    let mut out = String::new();
    let _ = write!(
        out,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        cloud.len()
    );
    for (p, &l) in cloud.coords.iter().zip(labels) {
        let [r, g, b] = palette_color(l)
            .ok_or_else(|| IbtError::Data(format!("label {l} has no palette color (max {})", PALETTE_SIZE - 1)))?;
        let _ = writeln!(out, "{} {} {} {r} {g} {b}", p[0], p[1], p[2]);
    }
    write(path, &out)
}

/// Reads back a file written by [`write_colored_ply`], inverting the
/// palette to recover labels.
pub fn read_colored_ply(path: &Path) -> Result<(PointCloud, Vec<usize>)> {
    let text = read(path)?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let mut count = None;
    let mut props = Vec::new();
    loop {
        let (no, line) = lines.next().ok_or_else(|| parse_err(path, 1, "missing end_header"))?;
        match line.split_whitespace().collect::<Vec<_>>().as_slice() {
            ["ply"] | ["format", "ascii", _] | ["comment", ..] => {}
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| parse_err(path, no, "bad vertex count"))?)
            }
            ["property", _, name] => props.push(name.to_string()),
            ["end_header"] => break,
            _ => return Err(parse_err(path, no, format!("unsupported header line {line:?}"))),
        }
    }
    if props != ["x", "y", "z", "red", "green", "blue"] {
        return Err(parse_err(path, 1, format!("expected x y z red green blue, found {props:?}")));
    }
    let n = count.ok_or_else(|| parse_err(path, 1, "no vertex element"))?;
    let mut coords = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let (no, line) = lines.next().ok_or_else(|| parse_err(path, 1, "fewer vertices than declared"))?;
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.len() != 6 {
            return Err(parse_err(path, no, "vertex row needs 6 fields"));
        }
        coords.push([parse_f64(path, no, t[0])?, parse_f64(path, no, t[1])?, parse_f64(path, no, t[2])?]);
        let mut rgb = [0u8; 3];
        for (c, tok) in rgb.iter_mut().zip(&t[3..]) {
            *c = tok.parse().map_err(|_| parse_err(path, no, format!("bad color {tok:?}")))?;
        }
        labels.push(palette_label(rgb).ok_or_else(|| parse_err(path, no, format!("color {rgb:?} not in palette")))?);
    }
    Ok((PointCloud::new(coords, stem(path))?, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn palette_is_distinct() {
        let colors: HashSet<[u8; 3]> = (0..PALETTE_SIZE).filter_map(palette_color).collect();
        assert_eq!(colors.len(), PALETTE_SIZE);
        assert_eq!(palette_color(PALETTE_SIZE), None);
    }

    #[test]
    fn xyz_two_points() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.xyz");
        fs::write(&p, "0 0 0\n1 0 0\n").unwrap();
        let c = load_xyz(&p).unwrap();
        assert_eq!(c.coords, vec![[0.0; 3], [1.0, 0.0, 0.0]]);
        assert!(c.point_labels.is_none());
    }

    #[test]
    fn xyz_bad_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.xyz");
        fs::write(&p, "0 0 0\n1 0\n").unwrap();
        match load_xyz(&p).unwrap_err() {
            IbtError::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn off_header_variants() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.off");
        fs::write(&p, "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n").unwrap();
        assert_eq!(load_off(&p).unwrap().len(), 3);
        fs::write(&p, "OFF3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n").unwrap();
        assert_eq!(load_off(&p).unwrap().len(), 3);
        fs::write(&p, "PLY\n3 1 0\n").unwrap();
        assert!(matches!(load_off(&p), Err(IbtError::Parse { line: 1, .. })));
    }

    #[test]
    fn single_point_ply() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.ply");
        let c = PointCloud::new(vec![[0.5, -1.0, 2.0]], "one").unwrap();
        write_colored_ply(&c, &[0], &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains("element vertex 1\n"));
        let [r, g, b] = palette_color(0).unwrap();
        assert!(text.ends_with(&format!("0.5 -1 2 {r} {g} {b}\n")));
        let (back, labels) = read_colored_ply(&p).unwrap();
        assert_eq!(back.coords, c.coords);
        assert_eq!(labels, vec![0]);
    }
}
