use std::fs;
use std::path::Path;
use std::process::Command;

use rgbt_cli::commands::{parse_sweep, run_eval, run_track};
use rgbt_cli::config::RunConfig;
use rgbt_cli::dataset::{ingest_sequence, read_manifest};
use rgbt_cli::toydata::{write_toy_benchmark, ToyBenchmark};
use rgbt_prompt::evalkit::AttributeSchema;
use rgbt_prompt::Error;

fn toy_bench(dir: &Path, frames: usize) {
    write_toy_benchmark(dir, &ToyBenchmark { frames, ..ToyBenchmark::default() }).unwrap();
}

fn rgbt(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_rgbt")).args(args).output().unwrap()
}

#[test]
fn five_frame_sequence_is_ingested() {
    let dir = tempfile::tempdir().unwrap();
    toy_bench(dir.path(), 5);
    let seq = ingest_sequence(&dir.path().join("seq00"), Some(AttributeSchema::LasHeR)).unwrap();
    assert_eq!(seq.len(), 5);
    assert_eq!(seq.gt_visible.len(), 5);
    assert_eq!(seq.gt_thermal.as_ref().map(Vec::len), Some(5));
    assert_eq!(seq.attributes.as_ref().unwrap().flags.len(), 19);
    let frame = seq.frame(4).unwrap();
    assert_eq!(frame.visible.dim(), (96, 128, 3));
}

#[test]
fn modality_count_mismatch_names_both_counts() {
    let dir = tempfile::tempdir().unwrap();
    toy_bench(dir.path(), 5);
    let seq = dir.path().join("seq00");
    fs::remove_file(seq.join("infrared/00004.png")).unwrap();
    let err = ingest_sequence(&seq, None).unwrap_err().to_string();
    assert!(err.contains("visible=5 thermal=4"), "{err}");
}

#[test]
fn annotation_count_mismatch_and_missing_modality() {
    let dir = tempfile::tempdir().unwrap();
    toy_bench(dir.path(), 5);
    let seq = dir.path().join("seq01");
    let gt = fs::read_to_string(seq.join("visible.txt")).unwrap();
    fs::write(seq.join("visible.txt"), gt.lines().take(3).collect::<Vec<_>>().join("\n")).unwrap();
    let err = ingest_sequence(&seq, None).unwrap_err().to_string();
    assert!(err.contains("visible=5 visible.txt=3"), "{err}");

    fs::remove_dir_all(dir.path().join("seq02/infrared")).unwrap();
    let err = ingest_sequence(&dir.path().join("seq02"), None).unwrap_err().to_string();
    assert!(err.contains("missing modality directory"), "{err}");
}

#[test]
fn attribute_file_must_match_the_schema() {
    let dir = tempfile::tempdir().unwrap();
    toy_bench(dir.path(), 2);
    let seq = dir.path().join("seq00");
    fs::write(seq.join("attributes.txt"), ["0"; 12].join(" ")).unwrap();
    let err = ingest_sequence(&seq, Some(AttributeSchema::LasHeR)).unwrap_err();
    assert!(matches!(err, Error::Schema { expected: 19, found: 12, .. }), "{err}");
    assert!(ingest_sequence(&seq, None).is_ok());
}

#[test]
fn manifest_resolves_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    toy_bench(dir.path(), 2);
    let m = read_manifest(&dir.path().join("manifest.txt")).unwrap();
    assert_eq!(m.schema, Some(AttributeSchema::LasHeR));
    assert_eq!(m.sequences.len(), 3);
    assert!(m.sequences.iter().all(|e| e.thermal_gt && e.dir.is_dir()));

    fs::write(dir.path().join("bad.txt"), "sequence seq00 visible,depth\n").unwrap();
    let err = read_manifest(&dir.path().join("bad.txt")).unwrap_err().to_string();
    assert!(err.contains("bad.txt:1"), "{err}");
}

#[test]
fn perfect_oracle_results_score_full_precision() {
    let dir = tempfile::tempdir().unwrap();
    let bench = dir.path().join("bench");
    toy_bench(&bench, 4);
    let results = dir.path().join("results");
    fs::create_dir(&results).unwrap();
    for s in ["seq00", "seq01", "seq02"] {
        fs::copy(bench.join(s).join("visible.txt"), results.join(format!("{s}.txt"))).unwrap();
    }
    let mut out = Vec::new();
    let report = dir.path().join("report");
    run_eval(&RunConfig::default(), &bench.join("manifest.txt"), &results, &report, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert!(text.contains("PR@20=1.000"), "{text}");
    assert!(text.contains("SR-AUC=0.952"), "{text}");
    assert!(report.join("curves.csv").is_file() && report.join("attributes.csv").is_file());
    assert_eq!(fs::read_to_string(report.join("summary.txt")).unwrap(), text);
}

#[test]
fn short_result_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let bench = dir.path().join("bench");
    toy_bench(&bench, 3);
    let results = dir.path().join("results");
    fs::create_dir(&results).unwrap();
    for s in ["seq00", "seq01", "seq02"] {
        fs::write(results.join(format!("{s}.txt")), "1,1,5,5\n").unwrap();
    }
    let err =
        run_eval(&RunConfig::default(), &bench.join("manifest.txt"), &results, &dir.path().join("r"), &mut Vec::new())
            .unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("visible=3 results=1"), "{err}");
}

#[test]
fn tracking_writes_one_box_per_frame() {
    let dir = tempfile::tempdir().unwrap();
    let bench = dir.path().join("bench");
    toy_bench(&bench, 3);
    let cfg =
        RunConfig::parse(&fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/toy.cfg")).unwrap())
            .unwrap();
    let weights = dir.path().join("w.rgbtw");
    rgbt_cli::commands::run_init_weights(&cfg, &weights, &mut Vec::new()).unwrap();
    let out = dir.path().join("res/seq00.txt");
    run_track(&cfg, &bench.join("seq00"), &weights, None, &out, &mut Vec::new()).unwrap();
    let lines: Vec<String> = fs::read_to_string(&out).unwrap().lines().map(String::from).collect();
    let gt = fs::read_to_string(bench.join("seq00/visible.txt")).unwrap();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], gt.lines().next().unwrap());

    // Reference-sized weights do not fit the toy tracker.
    let err =
        run_track(&RunConfig::default(), &bench.join("seq00"), &weights, None, &out, &mut Vec::new()).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}

#[test]
fn sweep_ranges() {
    assert_eq!(parse_sweep("1..11").unwrap(), 1..=11);
    assert_eq!(parse_sweep("2..=5").unwrap(), 2..=5);
    for bad in ["5..2", "1-11", "a..3"] {
        assert_eq!(parse_sweep(bad).unwrap_err().exit_code(), 1);
    }
}

#[test]
fn binary_exit_codes() {
    let ok = rgbt(&["selftest"]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("selftest: 15/15 passed"));

    assert_eq!(rgbt(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(rgbt(&["params", "--set", "first_stage_blocks=12"]).status.code(), Some(1));
    assert_eq!(rgbt(&["params", "--set", "no_such_key=1"]).status.code(), Some(1));
    assert_eq!(rgbt(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing.txt");
    let out = rgbt(&["eval", "--manifest", missing.to_str().unwrap(), "--results", ".", "--out", "r"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nothing.txt"));
}

#[test]
fn binary_cost_sweep_covers_every_location() {
    let out = rgbt(&["cost", "--sweep"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let totals: Vec<u64> =
        text.lines().skip(1).map(|l| l.split_whitespace().nth(4).unwrap().parse().unwrap()).collect();
    assert_eq!(totals.len(), 11);
    assert!(totals.windows(2).all(|w| w[1] > w[0]));
}
