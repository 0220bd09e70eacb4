use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::ops::RangeInclusive;
use std::path::Path;

use rgbt_prompt::archive::{apply_archive, foundation_archive, WeightArchive};
use rgbt_prompt::evalkit::{
    attribute_breakdown, evaluate, export_report, read_boxes, summary_text, write_boxes, BoundingBox,
};
use rgbt_prompt::foundation::Foundation;
use rgbt_prompt::params::Param;
use rgbt_prompt::pipeline::{cost_model, track, ModalFramePair, ParamBudget};
use rgbt_prompt::prompters::{PrompterBank, PROMPTER_PREFIX};
use rgbt_prompt::training::{dataset_loss, generate_synthetic, train, TrainState, TrainingSample};
use rgbt_prompt::{Error, Result};

use crate::config::RunConfig;
use crate::dataset::{ingest_sequence, read_manifest, Sequence};
use crate::imaging::{crop_resize, CropWindow};
use crate::toydata::{write_toy_benchmark, ToyBenchmark};
use crate::{CliError, CliResult};

fn write_file(path: &Path, body: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Foundation from `weights` (or random with the configured seed) and the
/// prompter bank from, in order of preference, `prompter`, the `prompter/`
/// entries of `weights`, or a fresh bank.
pub fn load_models(
    cfg: &RunConfig,
    weights: Option<&Path>,
    prompter: Option<&Path>,
) -> Result<(Foundation, PrompterBank<Param>)> {
    let tc = &cfg.tracker;
    tc.validate()?;
    let mut foundation = Foundation::random(tc.foundation.clone(), cfg.foundation_seed)?;
    let archive = weights.map(WeightArchive::load).transpose()?;
    if let Some(a) = &archive {
        apply_archive(a, &mut foundation)?;
    }
    let bank = match (prompter, &archive) {
        (Some(p), _) => PrompterBank::from_archive(&WeightArchive::load(p)?, tc)?,
        (None, Some(a)) if a.names().any(|n| n.starts_with(PROMPTER_PREFIX)) => PrompterBank::from_archive(a, tc)?,
        _ => PrompterBank::init(tc, cfg.prompter_seed)?,
    };
    Ok((foundation, bank))
}

fn crop_pair(pair: &ModalFramePair, win: &CropWindow, size: (usize, usize)) -> Result<ModalFramePair> {
    ModalFramePair::new(crop_resize(&pair.visible, win, size), crop_resize(&pair.thermal, win, size))
}

/// Tracks through `seq` from its first annotation. The template is cut
/// once from frame 0; each search region is centred on the previous box.
/// A degenerate prediction keeps the previous box.
pub fn track_sequence(
    cfg: &RunConfig,
    foundation: &Foundation,
    bank: &PrompterBank<Param>,
    seq: &Sequence,
) -> Result<Vec<BoundingBox>> {
    let init = seq.gt_visible[0];
    if init.is_absent() || !init.is_valid() || init.w <= 0.0 || init.h <= 0.0 {
        return Err(Error::Input(format!("{}: first frame has no usable annotation", seq.name)));
    }
    let f = &cfg.tracker.foundation;
    let first = seq.frame(0)?;
    let template = crop_pair(&first, &CropWindow::around(&init, cfg.crop.template_factor), f.template_size)?;
    let mut boxes = vec![init];
    let mut prev = init;
    for i in 1..seq.len() {
        let frame = seq.frame(i)?;
        let (h, w, _) = frame.visible.dim();
        let win = CropWindow::around(&prev, cfg.crop.search_factor);
        let search = crop_pair(&frame, &win, f.search_size)?;
        let (local, _) = track(foundation, bank, &cfg.tracker, &template, &search)?;
        let b = win.to_frame(&local, f.search_size).clip_to(w as f64, h as f64);
        if b.is_valid() && b.w >= 1.0 && b.h >= 1.0 {
            prev = b;
        }
        boxes.push(prev);
    }
    Ok(boxes)
}

pub fn run_track(
    cfg: &RunConfig,
    sequence: &Path,
    weights: &Path,
    prompter: Option<&Path>,
    results: &Path,
    out: &mut dyn Write,
) -> CliResult<()> {
    let seq = ingest_sequence(sequence, None)?;
    let (foundation, bank) = load_models(cfg, Some(weights), prompter)?;
    let boxes = track_sequence(cfg, &foundation, &bank, &seq)?;
    if let Some(dir) = results.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_boxes(results, &boxes)?;
    writeln!(out, "{}: {} frames -> {}", seq.name, boxes.len(), results.display())?;
    Ok(())
}

/// Trains on synthetic pairs and writes `prompter.rgbtw`, `loss.csv` and
/// `run.txt` into `dir`.
pub fn run_train(cfg: &RunConfig, weights: Option<&Path>, dir: &Path, out: &mut dyn Write) -> CliResult<()> {
    cfg.train.validate()?;
    let (foundation, bank) = load_models(cfg, weights, None)?;
    let data: Vec<TrainingSample> = generate_synthetic(cfg.train.seed, cfg.train_pairs, &cfg.tracker.foundation)
        .into_iter()
        .map(|s| s.sample)
        .collect();
    let frozen = foundation.checksum();
    let initial = dataset_loss(&foundation, &bank, &cfg.tracker, &data, &cfg.train.loss)?;
    let mut state = TrainState::new(bank);
    let mut csv = String::from("step,loss\n");
    train(&mut state, &foundation, &cfg.tracker, &data, &cfg.train, |step, loss| {
        writeln!(csv, "{step},{loss}").unwrap();
    })?;
    let fin = dataset_loss(&foundation, &state.bank, &cfg.tracker, &data, &cfg.train.loss)?;

    write_file(&dir.join("prompter.rgbtw"), &state.bank.to_archive().to_bytes())?;
    write_file(&dir.join("loss.csv"), csv.as_bytes())?;
    let mut run = String::new();
    writeln!(run, "config_hash = {}", cfg.hash()).unwrap();
    writeln!(run, "steps = {}", state.step).unwrap();
    writeln!(run, "initial_loss = {initial}").unwrap();
    writeln!(run, "final_loss = {fin}").unwrap();
    writeln!(run, "foundation_checksum = {frozen}").unwrap();
    writeln!(run, "prompter_checksum = {}", state.bank.checksum()).unwrap();
    writeln!(run, "\n# configuration").unwrap();
    run.push_str(&cfg.canonical());
    write_file(&dir.join("run.txt"), run.as_bytes())?;

    writeln!(out, "steps={} loss {initial:.6} -> {fin:.6}", state.step)?;
    writeln!(out, "checkpoint {}", dir.join("prompter.rgbtw").display())?;
    Ok(())
}

/// Scores `results/<sequence>.txt` for every sequence in the manifest.
pub fn run_eval(cfg: &RunConfig, manifest: &Path, results: &Path, report: &Path, out: &mut dyn Write) -> CliResult<()> {
    let m = read_manifest(manifest)?;
    let mut records = Vec::new();
    for entry in &m.sequences {
        let seq = ingest_sequence(&entry.dir, m.schema)?;
        let path = results.join(format!("{}.txt", seq.name));
        let predicted = read_boxes(&path)?;
        if predicted.len() != seq.len() {
            return Err(Error::Input(format!(
                "{}: frame count mismatch: visible={} results={}",
                path.display(),
                seq.len(),
                predicted.len()
            ))
            .into());
        }
        records.push(seq.record(predicted, entry.thermal_gt));
    }
    let e = evaluate(&records, &cfg.eval)?;
    let rows = m.schema.map(|s| attribute_breakdown(&records, s, &cfg.eval).map(|r| (s, r))).transpose()?;
    export_report(&e, &cfg.eval, rows.as_ref().map(|(s, r)| (*s, r.as_slice())), report)?;
    out.write_all(summary_text(&e, &cfg.eval, rows.as_ref().map(|(_, r)| r.as_slice())).as_bytes())?;
    Ok(())
}

pub fn run_params(cfg: &RunConfig, out: &mut dyn Write) -> CliResult<()> {
    let budget = ParamBudget::from_config(&cfg.tracker)?;
    out.write_all(budget.render().as_bytes())?;
    writeln!(out, "config_hash={}", cfg.hash())?;
    Ok(())
}

/// Parses `A..B` (inclusive) or `A..=B`.
pub fn parse_sweep(text: &str) -> CliResult<RangeInclusive<usize>> {
    let bad = || CliError::Usage(format!("sweep range must look like 1..11, got {text:?}"));
    let (a, b) = text.split_once("..").ok_or_else(bad)?;
    let b = b.strip_prefix('=').unwrap_or(b);
    let (a, b) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
    if a > b {
        return Err(bad());
    }
    Ok(a..=b)
}

/// Multiply-accumulate and FLOP (2 per MAC) estimates per fusion location.
/// Without a sweep only the configured location is shown.
pub fn run_cost(cfg: &RunConfig, sweep: Option<RangeInclusive<usize>>, out: &mut dyn Write) -> CliResult<()> {
    cfg.tracker.validate()?;
    let l = cfg.tracker.foundation.num_blocks;
    let locations = sweep.unwrap_or(cfg.tracker.first_stage_blocks..=cfg.tracker.first_stage_blocks);
    if *locations.start() < 1 || *locations.end() >= l {
        return Err(CliError::Usage(format!(
            "fusion locations must lie in 1..{}, got {}..{}",
            l - 1,
            locations.start(),
            locations.end()
        )));
    }
    writeln!(
        out,
        "{:>8} {:>16} {:>14} {:>14} {:>16} {:>10}",
        "location", "backbone_macs", "prompter_macs", "embed_macs", "total_macs", "GFLOPs"
    )?;
    for n in locations {
        let c = cost_model(&cfg.tracker.with_fusion_location(n))?;
        writeln!(
            out,
            "{:>8} {:>16} {:>14} {:>14} {:>16} {:>10.3}",
            n,
            c.backbone,
            c.prompters,
            c.embed_head,
            c.total(),
            2.0 * c.total() as f64 / 1e9
        )?;
    }
    Ok(())
}

/// Writes the random foundation for the configured seed as an archive.
pub fn run_init_weights(cfg: &RunConfig, path: &Path, out: &mut dyn Write) -> CliResult<()> {
    let (foundation, _) = load_models(cfg, None, None)?;
    write_file(path, &foundation_archive(&foundation).to_bytes())?;
    writeln!(out, "foundation {} parameters, checksum {}", foundation.param_count(), foundation.checksum())?;
    Ok(())
}

pub fn run_make_toy(spec: &ToyBenchmark, dir: &Path, out: &mut dyn Write) -> CliResult<()> {
    let names = write_toy_benchmark(dir, spec)?;
    writeln!(out, "{} sequences in {}", names.len(), dir.display())?;
    Ok(())
}
