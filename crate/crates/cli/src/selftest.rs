//! Fast invariant checks on toy-scale models. Output is deterministic.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rgbt_prompt::archive::WeightArchive;
use rgbt_prompt::evalkit::{
    center_error, evaluate, giou, iou, AttributeFlags, AttributeSchema, BoundingBox, EvalConfig, SequenceRecord,
};
use rgbt_prompt::foundation::{argmax_first, patchify, Foundation, Image};
use rgbt_prompt::graph::{Graph, Tensor};
use rgbt_prompt::params::Param;
use rgbt_prompt::pipeline::{baseline_track, track, ModalFramePair, TrackerConfig};
use rgbt_prompt::prompters::{mfp_fuse, PrompterBank};
use rgbt_prompt::training::{generate_synthetic, train, TrainConfig, TrainState, TrainingSample};
use rgbt_prompt::Result;

use crate::config::RunConfig;
use crate::{CliError, CliResult};

type Check = fn() -> Result<bool>;

const CHECKS: &[(&str, Check)] = &[
    ("iou_examples", iou_examples),
    ("center_error_3_4_5", center_error_3_4_5),
    ("giou_of_disjoint_boxes", giou_of_disjoint_boxes),
    ("perfect_tracker_curves", perfect_tracker_curves),
    ("attribute_flag_counts", attribute_flag_counts),
    ("patch_grid_divisibility", patch_grid_divisibility),
    ("score_map_tie_break", score_map_tie_break),
    ("fresh_bank_up_projections_are_zero", fresh_bank_up_projections_are_zero),
    ("bank_init_is_deterministic", bank_init_is_deterministic),
    ("fresh_bank_matches_baseline", fresh_bank_matches_baseline),
    ("fusion_weights_sum_to_one", fusion_weights_sum_to_one),
    ("prompter_archive_round_trip", prompter_archive_round_trip),
    ("config_round_trip", config_round_trip),
    ("learning_rate_decay", learning_rate_decay),
    ("training_freezes_the_foundation", training_freezes_the_foundation),
];

/// Runs every check and prints `ok`/`FAIL` lines plus a summary. Fails
/// with [`CliError::SelfTest`] if any check fails or errors.
pub fn run_selftest(out: &mut dyn Write) -> CliResult<()> {
    let mut failed = 0;
    for (name, check) in CHECKS {
        match check() {
            Ok(true) => writeln!(out, "ok   {name}")?,
            Ok(false) => {
                failed += 1;
                writeln!(out, "FAIL {name}")?;
            }
            Err(e) => {
                failed += 1;
                writeln!(out, "FAIL {name}: {e}")?;
            }
        }
    }
    writeln!(out, "selftest: {}/{} passed", CHECKS.len() - failed, CHECKS.len())?;
    if failed > 0 {
        return Err(CliError::SelfTest { failed, total: CHECKS.len() });
    }
    Ok(())
}

fn toy_pair(rng: &mut ChaCha8Rng, (h, w): (usize, usize)) -> Result<ModalFramePair> {
    let mut img = || Image::from_shape_fn((h, w, 3), |_| rng.random_range(0.0..1.0));
    let v = img();
    ModalFramePair::new(v, img())
}

fn iou_examples() -> Result<bool> {
    let a = BoundingBox::new(0.0, 0.0, 10.0, 10.0);
    Ok(iou(&a, &a) == 1.0
        && iou(&a, &BoundingBox::new(20.0, 0.0, 10.0, 10.0)) == 0.0
        && (iou(&a, &BoundingBox::new(5.0, 0.0, 10.0, 10.0)) - 1.0 / 3.0).abs() < 1e-15)
}

fn center_error_3_4_5() -> Result<bool> {
    let e = center_error(&BoundingBox::new(0.0, 0.0, 2.0, 2.0), &BoundingBox::new(3.0, 4.0, 2.0, 2.0));
    Ok(e == Some(5.0))
}

fn giou_of_disjoint_boxes() -> Result<bool> {
    // Union 2, hull 3.
    let g = giou(&BoundingBox::new(0.0, 0.0, 1.0, 1.0), &BoundingBox::new(2.0, 0.0, 1.0, 1.0));
    Ok((g + 1.0 / 3.0).abs() < 1e-15)
}

fn perfect_tracker_curves() -> Result<bool> {
    let gt: Vec<BoundingBox> = (0..10).map(|i| BoundingBox::new(3.0 * i as f64, 7.0, 11.0, 13.0)).collect();
    let e = evaluate(&[SequenceRecord::new("s", gt.clone(), gt)], &EvalConfig::default())?;
    Ok(e.pr.representative == 1.0 && e.sr.representative == 20.0 / 21.0)
}

fn attribute_flag_counts() -> Result<bool> {
    let ok = AttributeFlags::parse(AttributeSchema::LasHeR, &["0"; 19].join(" ")).is_ok();
    let short = AttributeFlags::parse(AttributeSchema::LasHeR, &["0"; 12].join(" ")).is_err();
    Ok(ok && short)
}

fn patch_grid_divisibility() -> Result<bool> {
    Ok(patchify(&Image::zeros((32, 32, 3)), 16)?.dim() == (4, 768)
        && patchify(&Image::zeros((130, 128, 3)), 16).is_err())
}

fn score_map_tie_break() -> Result<bool> {
    Ok(argmax_first(&Tensor::from_elem((4, 4), 0.25)) == (0, 0))
}

fn fresh_bank_up_projections_are_zero() -> Result<bool> {
    let bank = PrompterBank::init(&TrackerConfig::toy(), 0)?;
    let mut all_zero = true;
    bank.visit("", &mut |name, p| {
        if name.contains(".up.") || name.starts_with("prompts.") {
            all_zero &= p.iter().all(|&v| v == 0.0);
        }
    });
    Ok(all_zero)
}

fn bank_init_is_deterministic() -> Result<bool> {
    let cfg = TrackerConfig::toy();
    let a = PrompterBank::init(&cfg, 7)?;
    let b = PrompterBank::init(&cfg, 7)?;
    let c = PrompterBank::init(&cfg, 8)?;
    Ok(a == b && a.checksum() == b.checksum() && a.checksum() != c.checksum())
}

fn fresh_bank_matches_baseline() -> Result<bool> {
    let cfg = TrackerConfig::toy();
    let f = Foundation::random(cfg.foundation.clone(), 1)?;
    let bank = PrompterBank::init(&cfg, 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z = toy_pair(&mut rng, cfg.foundation.template_size)?;
    let x = toy_pair(&mut rng, cfg.foundation.search_size)?;
    let (b1, s1) = track(&f, &bank, &cfg, &z, &x)?;
    let (b2, s2) = baseline_track(&f, &cfg, &z, &x)?;
    let same_map = s1.iter().zip(s2.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
    Ok(same_map && [b1.x, b1.y, b1.w, b1.h].map(f64::to_bits) == [b2.x, b2.y, b2.w, b2.h].map(f64::to_bits))
}

fn fusion_weights_sum_to_one() -> Result<bool> {
    let cfg = TrackerConfig::toy();
    let bank = PrompterBank::init(&cfg, 2)?.perturbed(3, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = cfg.foundation.embed_dim;
    let mut g = Graph::new();
    let b = bank.bind_constants(&mut g);
    let ev = g.constant(Tensor::from_shape_fn((20, d), |_| rng.random_range(-3.0..3.0)));
    let et = g.constant(Tensor::from_shape_fn((20, d), |_| rng.random_range(-3.0..3.0)));
    let out = mfp_fuse(&mut g, &b.mfp, ev, et)?;
    let w = g.value(out.weights);
    Ok(w.rows().into_iter().all(|r| (r.sum() - 1.0).abs() <= 1e-6))
}

fn prompter_archive_round_trip() -> Result<bool> {
    let cfg = TrackerConfig::toy();
    let bank = PrompterBank::init(&cfg, 5)?.perturbed(6, 0.1);
    let back = PrompterBank::from_archive(&WeightArchive::from_bytes(&bank.to_archive().to_bytes())?, &cfg)?;
    Ok(back == bank)
}

fn config_round_trip() -> Result<bool> {
    let cfg = RunConfig::parse("first_stage_blocks = 9\nuep_layers = 1,4\n")?;
    let again = RunConfig::parse(&cfg.canonical())?;
    let bad = RunConfig::parse("first_stage_blocks = 12\n").is_err();
    Ok(again == cfg && again.hash() == cfg.hash() && bad)
}

fn learning_rate_decay() -> Result<bool> {
    let tc = TrainConfig::default();
    Ok(tc.lr_at_epoch(47) == 4e-4 && (tc.lr_at_epoch(48) - 4e-5).abs() < 1e-18)
}

fn training_freezes_the_foundation() -> Result<bool> {
    let cfg = TrackerConfig::toy();
    let f = Foundation::random(cfg.foundation.clone(), 0)?;
    let before = f.checksum();
    let data: Vec<TrainingSample> = generate_synthetic(0, 4, &cfg.foundation).into_iter().map(|s| s.sample).collect();
    let bank: PrompterBank<Param> = PrompterBank::init(&cfg, 0)?;
    let start = bank.checksum();
    let mut state = TrainState::new(bank);
    let tc = TrainConfig { batch_size: 2, max_steps: Some(2), ..TrainConfig::toy() };
    train(&mut state, &f, &cfg, &data, &tc, |_, _| {})?;
    Ok(f.checksum() == before && state.bank.checksum() != start)
}
