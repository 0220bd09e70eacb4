//! Box files: one `x,y,w,h` line per frame. Tabs and spaces are accepted
//! as separators too, since several public benchmarks ship them.

use std::fs;
use std::path::Path;

use super::bbox::BoundingBox;
use crate::{Error, Result};

pub fn parse_boxes(text: &str, origin: &Path) -> Result<Vec<BoundingBox>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse { path: origin.to_path_buf(), line: i + 1, message };
        let vals = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f64>().map_err(|e| bad(format!("{t:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != 4 {
            return Err(bad(format!("expected 4 values, found {}", vals.len())));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite coordinate".into()));
        }
        let b = BoundingBox::new(vals[0], vals[1], vals[2], vals[3]);
        if b.w < 0.0 || b.h < 0.0 {
            return Err(bad(format!("negative box size {}x{}", b.w, b.h)));
        }
        out.push(b);
    }
    Ok(out)
}

pub fn read_boxes(path: &Path) -> Result<Vec<BoundingBox>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_boxes(&text, path)
}

/// Four decimals per coordinate.
pub fn format_boxes(boxes: &[BoundingBox]) -> String {
    boxes.iter().map(|b| format!("{:.4},{:.4},{:.4},{:.4}\n", b.x, b.y, b.w, b.h)).collect()
}

pub fn write_boxes(path: &Path, boxes: &[BoundingBox]) -> Result<()> {
    fs::write(path, format_boxes(boxes)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_mixed_separators() {
        let boxes = parse_boxes("1,2,3,4\n\n5\t6\t7\t8\n9 10 11.5 12\n", Path::new("gt.txt")).unwrap();
        assert_eq!(boxes.len(), 3);
        assert_eq!(boxes[2], BoundingBox::new(9.0, 10.0, 11.5, 12.0));
    }

    #[test]
    fn reports_line_of_bad_entry() {
        let err = parse_boxes("1,2,3,4\n1,2,3\n", Path::new("gt.txt")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn format_round_trips_four_decimals() {
        let boxes = vec![BoundingBox::new(1.25, 2.5, 30.0, 40.125)];
        assert_eq!(parse_boxes(&format_boxes(&boxes), Path::new("r")).unwrap(), boxes);
    }
}
