//! File formats: `.pts` landmark files and Wavefront OBJ export.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector2;

use crate::camera::LandmarkSet;
use crate::error::{Error, Result};
use crate::model::{Coefficients, MorphableModel};

/// Parses a `.pts` document. Files are y-down; points are flipped to y-up.
pub fn parse_pts(text: &str) -> Result<LandmarkSet> {
    let err = |line: usize, message: String| Error::Parse { line, message };
    let mut lines = text.lines().map(str::trim_end).enumerate().map(|(i, l)| (i + 1, l));

    let mut next = |what: &str| lines.next().ok_or_else(|| err(0, format!("unexpected end of file, expected {what}")));

    let (ln, version) = next("version header")?;
    match version.split_once(':') {
        Some((key, value)) if key.trim() == "version" && !value.trim().is_empty() => {}
        _ => return Err(err(ln, format!("expected `version: 1`, found `{version}`"))),
    }

    let (ln, header) = next("n_points header")?;
    let count = match header.split_once(':') {
        Some((key, value)) if key.trim() == "n_points" => value
            .trim()
            .parse::<usize>()
            .map_err(|_| err(ln, format!("invalid point count `{}`", value.trim())))?,
        _ => return Err(err(ln, format!("expected `n_points: <K>`, found `{header}`"))),
    };
    if count == 0 {
        return Err(err(ln, "n_points must be positive".into()));
    }

    let (ln, open) = next("`{`")?;
    if open.trim() != "{" {
        return Err(err(ln, format!("expected `{{`, found `{open}`")));
    }

    let mut points = Vec::with_capacity(count);
    loop {
        let (ln, line) = next("`}`")?;
        let line = line.trim();
        if line == "}" {
            break;
        }
        if points.len() == count {
            return Err(err(ln, format!("point count mismatch: header declares {count}, found more")));
        }
        let mut tokens = line.split_whitespace();
        let mut coord = |axis: &str| -> Result<f64> {
            let tok = tokens
                .next()
                .ok_or_else(|| err(ln, format!("missing {axis} coordinate")))?;
            tok.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(ln, format!("non-numeric token `{tok}`")))
        };
        let x = coord("x")?;
        let y = coord("y")?;
        if let Some(extra) = tokens.next() {
            return Err(err(ln, format!("unexpected token `{extra}`")));
        }
        points.push(Vector2::new(x, -y));
    }
    if points.len() != count {
        return Err(err(
            3 + points.len() + 1,
            format!("point count mismatch: header declares {count}, found {}", points.len()),
        ));
    }
    for (ln, rest) in lines {
        if !rest.trim().is_empty() {
            return Err(err(ln, format!("trailing content `{rest}`")));
        }
    }
    Ok(LandmarkSet::all_visible(points)?.with_y_flipped(true))
}

/// Renders a `.pts` document (y flipped back to y-down, 6 decimals).
pub fn write_pts(landmarks: &LandmarkSet) -> String {
    let mut out = format!("version: 1\nn_points: {}\n{{\n", landmarks.len());
    for p in landmarks.points() {
        // `+ 0.0` turns a negative zero into a positive one
        let _ = writeln!(out, "{:.6} {:.6}", p.x + 0.0, -p.y + 0.0);
    }
    out.push_str("}\n");
    out
}

/// Renders the synthesized mesh as OBJ text: `v` records, then 1-based `f` records.
pub fn obj_string(model: &MorphableModel, coeffs: &Coefficients) -> Result<String> {
    let shape = model.synthesize_shape(coeffs)?;
    let mut out = String::with_capacity(40 * model.n_vertices());
    for v in shape.as_slice().chunks_exact(3) {
        let _ = writeln!(out, "v {:.6} {:.6} {:.6}", v[0], v[1], v[2]);
    }
    for f in model.faces().unwrap_or_default() {
        let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    Ok(out)
}

pub fn export_obj(model: &MorphableModel, coeffs: &Coefficients, path: impl AsRef<Path>) -> Result<()> {
    let text = obj_string(model, coeffs)?;
    write_atomic(path.as_ref(), text.as_bytes())
}

/// Writes to a sibling temporary file and renames it into place, so a failed
/// write never leaves a partial file at `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("`{}` is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".{}.tmp", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    if let Err(e) = std::fs::write(&tmp, bytes) {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::make_synthetic_model;

    fn doc(points: &[(f64, f64)]) -> String {
        let mut s = format!("version: 1\nn_points: {}\n{{\n", points.len());
        for (x, y) in points {
            s.push_str(&format!("{x} {y}\n"));
        }
        s.push_str("}\n");
        s
    }

    #[test]
    fn parses_68_points_with_flip() {
        let pts: Vec<(f64, f64)> = (0..68).map(|i| (i as f64 * 1.5, 100.0 + i as f64)).collect();
        let set = parse_pts(&doc(&pts)).unwrap();
        assert_eq!(set.len(), 68);
        assert!(set.y_flipped());
        assert_eq!(set.points()[3], Vector2::new(4.5, -103.0));
        assert!(set.visibility().iter().all(|v| *v));
    }

    #[test]
    fn tolerates_crlf_and_trailing_whitespace() {
        let text = "version: 1  \r\nn_points: 2\r\n{ \r\n1.0 2.0   \r\n3 4\r\n}\r\n\r\n";
        let set = parse_pts(text).unwrap();
        assert_eq!(set.points(), &[Vector2::new(1.0, -2.0), Vector2::new(3.0, -4.0)]);
    }

    #[test]
    fn count_mismatch_names_the_line() {
        let text = "version: 1\nn_points: 2\n{\n1 2\n3 4\n5 6\n}\n";
        match parse_pts(text) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 6);
                assert!(message.contains("mismatch"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        let short = "version: 1\nn_points: 3\n{\n1 2\n}\n";
        assert!(matches!(parse_pts(short), Err(Error::Parse { .. })));
    }

    #[test]
    fn bad_header_and_tokens() {
        assert!(matches!(parse_pts("n_points: 1\n{\n1 2\n}\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(
            parse_pts("version: 1\nn_points: 1\n{\n1 abc\n}\n"),
            Err(Error::Parse { line: 4, .. })
        ));
        assert!(matches!(parse_pts("version: 1\nn_points: 1\n{\n1 2\n"), Err(Error::Parse { .. })));
        assert!(matches!(parse_pts(""), Err(Error::Parse { .. })));
    }

    #[test]
    fn single_point_document() {
        let set = LandmarkSet::all_visible(vec![Vector2::new(1.5, -2.0)]).unwrap();
        let text = write_pts(&set);
        assert_eq!(text, "version: 1\nn_points: 1\n{\n1.500000 2.000000\n}\n");
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn write_then_parse_is_stable() {
        let text = "version: 1\nn_points: 3\n{\n  12.5   -3.25\n0 0\n7.123456 99.000001\n}\n";
        let first = parse_pts(text).unwrap();
        let again = parse_pts(&write_pts(&first)).unwrap();
        assert_eq!(first, again);
    }

    #[test]
    fn obj_vertices_match_mean_shape() {
        let m = make_synthetic_model(2, 30, 3, 2, 8).unwrap();
        let text = obj_string(&m, &Coefficients::zeros(&m)).unwrap();
        let verts: Vec<f64> = text
            .lines()
            .filter_map(|l| l.strip_prefix("v "))
            .flat_map(|l| l.split_whitespace().map(|t| t.parse::<f64>().unwrap()))
            .collect();
        assert_eq!(verts.len(), 90);
        for (a, b) in verts.iter().zip(m.mean_shape().iter()) {
            assert!((a - b).abs() <= 5e-7);
        }
        assert!(!text.contains("\nf "));
    }

    #[test]
    fn atomic_write_leaves_no_temp_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.txt");
        write_atomic(&path, b"hello").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "hello");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
        let missing = dir.path().join("nope").join("out.txt");
        assert!(matches!(write_atomic(&missing, b"x"), Err(Error::Io { .. })));
        assert!(!missing.exists());
    }
}
