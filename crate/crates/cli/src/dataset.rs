//! Sequence directories and benchmark manifests.
//!
//! A sequence directory holds
//!
//! ```text
//! visible/        frames, sorted by file name
//! infrared/       frames, same count
//! visible.txt     one x,y,w,h line per frame
//! infrared.txt    optional thermal annotations
//! attributes.txt  optional 0/1 flags on one line
//! ```
//!
//! A manifest lists sequences relative to its own directory:
//!
//! ```text
//! schema lasher
//! sequence seq_a visible,infrared
//! sequence seq_b visible
//! ```
//!
//! The second column names the annotation files that take part in
//! evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use rgbt_prompt::evalkit::{read_boxes, AttributeFlags, AttributeSchema, BoundingBox, SequenceRecord};
use rgbt_prompt::pipeline::ModalFramePair;
use rgbt_prompt::{Error, Result};

use crate::imaging::load_image;

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub visible_frames: Vec<PathBuf>,
    pub thermal_frames: Vec<PathBuf>,
    pub gt_visible: Vec<BoundingBox>,
    pub gt_thermal: Option<Vec<BoundingBox>>,
    pub attributes: Option<AttributeFlags>,
}

fn list_frames(dir: &Path, seq: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Input(format!("{}: missing modality directory {}", seq.display(), dir.display())));
    }
    let mut frames: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    frames.sort();
    Ok(frames)
}

/// Reads a sequence directory and checks that frame and annotation counts
/// agree. Attribute flags are read only when `schema` is given.
pub fn ingest_sequence(dir: &Path, schema: Option<AttributeSchema>) -> Result<Sequence> {
    let name = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Input(format!("{}: not a sequence directory", dir.display())))?
        .to_string();
    let visible_frames = list_frames(&dir.join("visible"), dir)?;
    let thermal_frames = list_frames(&dir.join("infrared"), dir)?;
    let n = visible_frames.len();
    if thermal_frames.len() != n {
        return Err(Error::Input(format!(
            "{}: frame count mismatch: visible={n} thermal={}",
            dir.display(),
            thermal_frames.len()
        )));
    }
    if n == 0 {
        return Err(Error::Input(format!("{}: no frames", dir.display())));
    }
    let count_check = |file: &str, boxes: &[BoundingBox]| {
        if boxes.len() == n {
            Ok(())
        } else {
            Err(Error::Input(format!("{}: frame count mismatch: visible={n} {file}={}", dir.display(), boxes.len())))
        }
    };
    let gt_visible = read_boxes(&dir.join("visible.txt"))?;
    count_check("visible.txt", &gt_visible)?;
    let thermal_path = dir.join("infrared.txt");
    let gt_thermal = if thermal_path.is_file() {
        let b = read_boxes(&thermal_path)?;
        count_check("infrared.txt", &b)?;
        Some(b)
    } else {
        None
    };
    let attributes = match schema {
        Some(s) => {
            let p = dir.join("attributes.txt");
            if p.is_file() {
                let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                Some(AttributeFlags::parse(s, &text)?)
            } else {
                None
            }
        }
        None => None,
    };
    Ok(Sequence { name, visible_frames, thermal_frames, gt_visible, gt_thermal, attributes })
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.visible_frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visible_frames.is_empty()
    }

    pub fn frame(&self, i: usize) -> Result<ModalFramePair> {
        ModalFramePair::new(load_image(&self.visible_frames[i])?, load_image(&self.thermal_frames[i])?)
    }

    /// Frames in order, loaded on demand.
    pub fn frames(&self) -> impl Iterator<Item = Result<ModalFramePair>> + '_ {
        (0..self.len()).map(|i| self.frame(i))
    }

    /// Evaluation record with the given predictions.
    pub fn record(&self, predicted: Vec<BoundingBox>, use_thermal: bool) -> SequenceRecord {
        let mut r = SequenceRecord::new(self.name.clone(), predicted, self.gt_visible.clone());
        if use_thermal {
            if let Some(t) = &self.gt_thermal {
                r = r.with_thermal(t.clone());
            }
        }
        if let Some(a) = &self.attributes {
            r = r.with_attributes(a.clone());
        }
        r
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub dir: PathBuf,
    pub thermal_gt: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub schema: Option<AttributeSchema>,
    pub sequences: Vec<ManifestEntry>,
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let bad = |line: usize, message: String| Error::Parse { path: path.to_path_buf(), line, message };
    let mut schema = None;
    let mut sequences = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["schema", s] => schema = Some(s.parse().map_err(|e: Error| bad(i + 1, e.to_string()))?),
            ["sequence", dir, gts] => {
                let mut thermal_gt = false;
                for g in gts.split(',') {
                    match g {
                        "visible" => {}
                        "infrared" => thermal_gt = true,
                        other => return Err(bad(i + 1, format!("unknown annotation {other:?}"))),
                    }
                }
                sequences.push(ManifestEntry { dir: base.join(dir), thermal_gt });
            }
            ["sequence", dir] => sequences.push(ManifestEntry { dir: base.join(dir), thermal_gt: false }),
            _ => return Err(bad(i + 1, format!("expected `schema NAME` or `sequence DIR [GTS]`, got {line:?}"))),
        }
    }
    if sequences.is_empty() {
        return Err(Error::Input(format!("{}: manifest lists no sequences", path.display())));
    }
    Ok(Manifest { schema, sequences })
}

/// Manifest text for sequences given as `(directory name, thermal GT)`.
pub fn manifest_text(schema: Option<AttributeSchema>, sequences: &[(String, bool)]) -> String {
    let mut out = String::new();
    if let Some(s) = schema {
        out.push_str(&format!("schema {s}\n"));
    }
    for (name, thermal) in sequences {
        let gts = if *thermal { "visible,infrared" } else { "visible" };
        out.push_str(&format!("sequence {name} {gts}\n"));
    }
    out
}
