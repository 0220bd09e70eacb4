//! Flat `key = value` run configuration.
//!
//! One document covers the tracker, training, evaluation grids and crop
//! geometry. Lines starting with `#` are comments. Every key is optional;
//! an empty document yields the reference configuration. Unknown keys,
//! malformed values and constraint violations are collected and reported
//! together.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rgbt_prompt::evalkit::{Aggregation, EvalConfig, GtReference};
use rgbt_prompt::pipeline::TrackerConfig;
use rgbt_prompt::training::TrainConfig;
use rgbt_prompt::{Error, Result};
use sha2::{Digest, Sha256};

/// Crop geometry used by `track`: square windows of side
/// `factor · sqrt(w·h)` around the target.
#[derive(Clone, Debug, PartialEq)]
pub struct CropSettings {
    pub template_factor: f64,
    pub search_factor: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub tracker: TrackerConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub crop: CropSettings,
    pub foundation_seed: u64,
    pub prompter_seed: u64,
    /// Synthetic pairs generated for `train`.
    pub train_pairs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tracker: TrackerConfig::reference(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            crop: CropSettings { template_factor: 2.0, search_factor: 4.0 },
            foundation_seed: 0,
            prompter_seed: 0,
            train_pairs: 20,
        }
    }
}

fn size(v: (usize, usize)) -> String {
    format!("{}x{}", v.0, v.1)
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    Ok((parse(h)?, parse(w)?))
}

fn parse<T: FromStr>(s: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.trim().parse().map_err(|e| format!("{s:?}: {e}"))
}

fn parse_list(s: &str) -> std::result::Result<Vec<usize>, String> {
    s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(parse).collect()
}

impl RunConfig {
    /// Canonical `(key, value)` pairs, sorted by key.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.tracker;
        let f = &t.foundation;
        let tr = &self.train;
        let e = &self.eval;
        let mut v = vec![
            (
                "aggregation",
                match e.aggregation {
                    Aggregation::Frames => "frames".into(),
                    Aggregation::Sequences => "sequences".into(),
                },
            ),
            ("batch_size", tr.batch_size.to_string()),
            ("decay_epoch", tr.decay_epoch.to_string()),
            ("decay_factor", tr.decay_factor.to_string()),
            ("embed_dim", f.embed_dim.to_string()),
            ("epochs", tr.epochs.to_string()),
            ("fep_low_dim", t.fep_low_dim.to_string()),
            ("first_stage_blocks", t.first_stage_blocks.to_string()),
            ("focal_alpha", tr.loss.focal_alpha.to_string()),
            ("focal_beta", tr.loss.focal_beta.to_string()),
            ("foundation_seed", self.foundation_seed.to_string()),
            (
                "gt_reference",
                match e.reference {
                    GtReference::Visible => "visible".into(),
                    GtReference::Max => "max".into(),
                },
            ),
            ("ip_low_dim", t.ip_low_dim.to_string()),
            ("ip_per_direction", t.ip_per_direction.to_string()),
            ("lambda_giou", tr.loss.giou.to_string()),
            ("lambda_l1", tr.loss.l1.to_string()),
            ("learning_rate", tr.learning_rate.to_string()),
            ("max_steps", tr.max_steps.map_or("none".into(), |s| s.to_string())),
            ("mfp_low_dim", t.mfp_low_dim.to_string()),
            ("mlp_ratio", f.mlp_ratio.to_string()),
            ("norm_precision_at", e.norm_precision_at.to_string()),
            ("norm_precision_max", e.norm_precision.max.to_string()),
            ("norm_precision_steps", e.norm_precision.steps.to_string()),
            ("num_blocks", f.num_blocks.to_string()),
            ("num_heads", f.num_heads.to_string()),
            ("patch_size", f.patch_size.to_string()),
            ("precision_at", e.precision_at.to_string()),
            ("precision_max", e.precision.max.to_string()),
            ("precision_steps", e.precision.steps.to_string()),
            ("prompt_tokens", t.prompt_tokens.to_string()),
            ("prompter_seed", self.prompter_seed.to_string()),
            ("samples_per_epoch", tr.samples_per_epoch.to_string()),
            ("search_factor", self.crop.search_factor.to_string()),
            ("search_size", size(f.search_size)),
            ("seed", tr.seed.to_string()),
            ("success_max", e.success.max.to_string()),
            ("success_steps", e.success.steps.to_string()),
            ("template_factor", self.crop.template_factor.to_string()),
            ("template_size", size(f.template_size)),
            ("train_pairs", self.train_pairs.to_string()),
            ("uep_layers", t.uep_layers.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")),
            ("uep_low_dim", t.uep_low_dim.to_string()),
            ("weight_decay", tr.weight_decay.to_string()),
        ];
        v.sort_by_key(|(k, _)| *k);
        v
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let value = value.trim();
        let t = &mut self.tracker;
        let tr = &mut self.train;
        let e = &mut self.eval;
        match key {
            "aggregation" => {
                e.aggregation = match value {
                    "frames" => Aggregation::Frames,
                    "sequences" => Aggregation::Sequences,
                    other => return Err(format!("expected frames or sequences, got {other:?}")),
                }
            }
            "batch_size" => tr.batch_size = parse(value)?,
            "decay_epoch" => tr.decay_epoch = parse(value)?,
            "decay_factor" => tr.decay_factor = parse(value)?,
            "embed_dim" => t.foundation.embed_dim = parse(value)?,
            "epochs" => tr.epochs = parse(value)?,
            "fep_low_dim" => t.fep_low_dim = parse(value)?,
            "first_stage_blocks" => t.first_stage_blocks = parse(value)?,
            "focal_alpha" => tr.loss.focal_alpha = parse(value)?,
            "focal_beta" => tr.loss.focal_beta = parse(value)?,
            "foundation_seed" => self.foundation_seed = parse(value)?,
            "gt_reference" => {
                e.reference = match value {
                    "visible" => GtReference::Visible,
                    "max" => GtReference::Max,
                    other => return Err(format!("expected visible or max, got {other:?}")),
                }
            }
            "ip_low_dim" => t.ip_low_dim = parse(value)?,
            "ip_per_direction" => t.ip_per_direction = parse(value)?,
            "lambda_giou" => tr.loss.giou = parse(value)?,
            "lambda_l1" => tr.loss.l1 = parse(value)?,
            "learning_rate" => tr.learning_rate = parse(value)?,
            "max_steps" => tr.max_steps = if value == "none" { None } else { Some(parse(value)?) },
            "mfp_low_dim" => t.mfp_low_dim = parse(value)?,
            "mlp_ratio" => t.foundation.mlp_ratio = parse(value)?,
            "norm_precision_at" => e.norm_precision_at = parse(value)?,
            "norm_precision_max" => e.norm_precision.max = parse(value)?,
            "norm_precision_steps" => e.norm_precision.steps = parse(value)?,
            "num_blocks" => t.foundation.num_blocks = parse(value)?,
            "num_heads" => t.foundation.num_heads = parse(value)?,
            "patch_size" => t.foundation.patch_size = parse(value)?,
            "precision_at" => e.precision_at = parse(value)?,
            "precision_max" => e.precision.max = parse(value)?,
            "precision_steps" => e.precision.steps = parse(value)?,
            "prompt_tokens" => t.prompt_tokens = parse(value)?,
            "prompter_seed" => self.prompter_seed = parse(value)?,
            "samples_per_epoch" => tr.samples_per_epoch = parse(value)?,
            "search_factor" => self.crop.search_factor = parse(value)?,
            "search_size" => t.foundation.search_size = parse_size(value)?,
            "seed" => tr.seed = parse(value)?,
            "success_max" => e.success.max = parse(value)?,
            "success_steps" => e.success.steps = parse(value)?,
            "template_factor" => self.crop.template_factor = parse(value)?,
            "template_size" => t.foundation.template_size = parse_size(value)?,
            "train_pairs" => self.train_pairs = parse(value)?,
            "uep_layers" => t.uep_layers = parse_list(value)?,
            "uep_low_dim" => t.uep_low_dim = parse(value)?,
            "weight_decay" => tr.weight_decay = parse(value)?,
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = self.tracker.problems();
        out.extend(self.train.problems());
        let e = &self.eval;
        for (name, grid) in [("precision", e.precision), ("norm_precision", e.norm_precision), ("success", e.success)] {
            if grid.steps == 0 || !(grid.max > 0.0 && grid.max.is_finite()) {
                out.push(format!("{name} grid needs a positive max and at least one step"));
            }
        }
        for (name, v) in [("template_factor", self.crop.template_factor), ("search_factor", self.crop.search_factor)] {
            if !(v > 0.0 && v.is_finite()) {
                out.push(format!("{name} must be positive, got {v}"));
            }
        }
        if self.train_pairs == 0 {
            out.push("train_pairs must be positive".into());
        }
        out
    }

    /// Reads `text` on top of the defaults, then applies `overrides`
    /// (`key=value` each). All problems are reported in one error.
    pub fn parse_with(text: &str, origin: &str, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        let mut problems = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = format!("{origin}:{}", i + 1);
            let Some((key, value)) = line.split_once('=') else {
                problems.push(format!("{at}: expected key = value, got {line:?}"));
                continue;
            };
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                problems.push(format!("{at}: duplicate key {key:?}"));
            }
            if let Err(e) = cfg.set(key, value) {
                problems.push(format!("{at}: {key}: {e}"));
            }
        }
        for o in overrides {
            match o.split_once('=') {
                Some((key, value)) => {
                    if let Err(e) = cfg.set(key.trim(), value) {
                        problems.push(format!("--set {o}: {e}"));
                    }
                }
                None => problems.push(format!("--set {o}: expected key=value")),
            }
        }
        problems.extend(cfg.problems());
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with(text, "<config>", &[])
    }

    /// Loads `path`, or the defaults when `None`, and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::parse_with(&text, &p.display().to_string(), overrides)
            }
            None => Self::parse_with("", "<defaults>", overrides),
        }
    }

    /// Every key in sorted order, one `key = value` per line.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }

    /// SHA-256 of [`RunConfig::canonical`], hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_reference_setup() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.tracker.first_stage_blocks, 10);
        assert_eq!(cfg.tracker.uep_layers, vec![2, 5, 8]);
        assert_eq!(cfg.tracker.prompt_tokens, 2);
        assert_eq!(cfg.tracker.foundation.num_blocks, 12);
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn no_second_stage_is_rejected() {
        let err = RunConfig::parse("first_stage_blocks = 12").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn problems_are_aggregated() {
        let text = "colour = red\nbatch_size = many\nuep_layers = 2,11\n";
        let Error::Config(p) = RunConfig::parse(text).unwrap_err() else { panic!() };
        assert!(p.len() >= 3, "{p:?}");
        assert!(p[0].contains("<config>:1") && p[0].contains("unknown key"));
        assert!(p[1].contains("<config>:2"));
        assert!(p.iter().any(|m| m.contains("11")));
    }

    #[test]
    fn canonical_form_round_trips() {
        let cfg = RunConfig::parse("learning_rate = 0.005\nmax_steps = 200\nuep_layers = 1,2\nfirst_stage_blocks=4\n")
            .unwrap();
        let again = RunConfig::parse(&cfg.canonical()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.hash(), again.hash());
        assert_ne!(cfg.hash(), RunConfig::default().hash());
        assert_eq!(cfg.entries().len(), cfg.canonical().lines().count());
    }

    #[test]
    fn overrides_apply_after_the_file() {
        let cfg = RunConfig::parse_with("seed = 1\n", "f", &["seed=7".into(), "gt_reference=max".into()]).unwrap();
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.eval.reference, GtReference::Max);
        assert!(RunConfig::parse_with("", "f", &["seed".into()]).is_err());
    }

    #[test]
    fn duplicate_keys_and_comments() {
        assert!(RunConfig::parse("seed = 1 # first\nseed = 2\n").is_err());
        assert_eq!(RunConfig::parse("# only a comment\n\n  seed = 3  # trailing\n").unwrap().train.seed, 3);
    }

    #[test]
    fn every_entry_is_settable() {
        let mut cfg = RunConfig::default();
        for (k, v) in RunConfig::default().entries() {
            cfg.set(k, &v).unwrap_or_else(|e| panic!("{k}: {e}"));
        }
        assert_eq!(cfg, RunConfig::default());
    }
}
