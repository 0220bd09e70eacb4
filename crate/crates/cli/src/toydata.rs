//! Small synthetic RGB-T benchmark written in the sequence-directory
//! layout, for smoke runs of `track` and `eval`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rgbt_prompt::evalkit::{format_boxes, AttributeFlags, AttributeSchema, BoundingBox};
use rgbt_prompt::foundation::Image;
use rgbt_prompt::{Error, Result};

use crate::dataset::manifest_text;
use crate::imaging::save_image;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyBenchmark {
    pub sequences: usize,
    pub frames: usize,
    /// Frame `(height, width)` in pixels.
    pub frame_size: (usize, usize),
    pub seed: u64,
}

impl Default for ToyBenchmark {
    fn default() -> Self {
        Self { sequences: 3, frames: 6, frame_size: (96, 128), seed: 0 }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Condition {
    Clear,
    /// Visible frames nearly uniform and dark.
    LowLight,
    /// Thermal frames without target contrast.
    ThermalCrossover,
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write(p: &Path, body: &str) -> Result<()> {
    fs::write(p, body).map_err(|e| Error::io(p, e))
}

/// Writes `seqNN/` directories and `manifest.txt` into `dir`. Returns the
/// sequence names.
pub fn write_toy_benchmark(dir: &Path, spec: &ToyBenchmark) -> Result<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let (fh, fw) = spec.frame_size;
    let mut names = Vec::new();
    for s in 0..spec.sequences {
        let name = format!("seq{s:02}");
        let root = dir.join(&name);
        mkdir(&root.join("visible"))?;
        mkdir(&root.join("infrared"))?;
        let condition = match s % 3 {
            0 => Condition::Clear,
            1 => Condition::LowLight,
            _ => Condition::ThermalCrossover,
        };
        let (bw, bh) = (rng.random_range(12.0..24.0_f64).round(), rng.random_range(12.0..24.0_f64).round());
        let mut x = rng.random_range(0.0..fw as f64 - bw).round();
        let mut y = rng.random_range(0.0..fh as f64 - bh).round();
        let mut vx = rng.random_range(-4.0..4.0_f64).round();
        let mut vy = rng.random_range(-3.0..3.0_f64).round();
        let target = [rng.random_range(0.6..1.0), rng.random_range(0.0..0.4), rng.random_range(0.2..0.8)];
        let background = [rng.random_range(0.0..0.3), rng.random_range(0.3..0.6), rng.random_range(0.0..0.3)];
        let mut gt_v = Vec::new();
        let mut gt_t = Vec::new();
        for f in 0..spec.frames {
            let b = BoundingBox::new(x, y, bw, bh);
            let inside = |py: usize, px: usize| {
                let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
                cx >= b.x && cx < b.right() && cy >= b.y && cy < b.bottom()
            };
            let mut visible = Image::zeros((fh, fw, 3));
            let mut thermal = Image::zeros((fh, fw, 3));
            for py in 0..fh {
                for px in 0..fw {
                    let on = inside(py, px);
                    for c in 0..3 {
                        let base = if on { target[c] } else { background[c] + 0.2 * px as f64 / fw as f64 };
                        visible[[py, px, c]] = match condition {
                            Condition::LowLight => 0.05 + 0.1 * base + 0.01 * noise.sample(&mut rng),
                            _ => base + 0.02 * noise.sample(&mut rng),
                        };
                    }
                    let heat = match condition {
                        Condition::ThermalCrossover => 0.5 + 0.01 * noise.sample(&mut rng),
                        _ => (if on { 0.9 } else { 0.2 }) + 0.02 * noise.sample(&mut rng),
                    };
                    for c in 0..3 {
                        thermal[[py, px, c]] = heat;
                    }
                }
            }
            save_image(&root.join("visible").join(format!("{f:05}.png")), &visible)?;
            save_image(&root.join("infrared").join(format!("{f:05}.png")), &thermal)?;
            gt_v.push(b);
            gt_t.push(b.translated(1.0, 0.0));
            if x + vx < 0.0 || x + vx + bw > fw as f64 {
                vx = -vx;
            }
            if y + vy < 0.0 || y + vy + bh > fh as f64 {
                vy = -vy;
            }
            x += vx;
            y += vy;
        }
        write(&root.join("visible.txt"), &format_boxes(&gt_v))?;
        write(&root.join("infrared.txt"), &format_boxes(&gt_t))?;
        let flags = match condition {
            Condition::Clear => vec!["NO"],
            Condition::LowLight => vec!["LI"],
            Condition::ThermalCrossover => vec!["TC"],
        };
        let attrs = AttributeFlags::from_names(AttributeSchema::LasHeR, &flags)?;
        write(&root.join("attributes.txt"), &format!("{}\n", attrs.to_line()))?;
        names.push(name);
    }
    let entries: Vec<(String, bool)> = names.iter().map(|n| (n.clone(), true)).collect();
    write(&dir.join("manifest.txt"), &manifest_text(Some(AttributeSchema::LasHeR), &entries))?;
    Ok(names)
}
