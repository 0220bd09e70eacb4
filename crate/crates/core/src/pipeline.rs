//! The two-stage middle-fusion tracker.
//!
//! Blocks `1..=N` run twice, once per modality, with UEP deltas added to
//! block outputs and IP exchanging template information between the
//! streams. The streams are fused by the MFP, and blocks `N+1..=L` run
//! once on the fused tokens with an FEP prompt added after every block.

use std::fmt::Write as _;

use crate::evalkit::BoundingBox;
use crate::foundation::{
    encoder_forward, head_forward, patch_embed, Foundation, FoundationConfig, FoundationWeights, HeadOutput, Image,
    Role, SegmentLayout, TokenSeq,
};
use crate::graph::{Graph, Tensor, Var};
use crate::params::{numel, Param};
use crate::prompters::{fep_forward, ip_forward, mfp_forward, uep_forward, Family, Ip, PrompterBank, KERNEL};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerConfig {
    pub foundation: FoundationConfig,
    /// `N`, also the fusion location.
    pub first_stage_blocks: usize,
    /// 1-based block indices carrying a UEP pair.
    pub uep_layers: Vec<usize>,
    /// `P`, tokens per learnable prompt table.
    pub prompt_tokens: usize,
    pub uep_low_dim: usize,
    pub ip_low_dim: usize,
    pub mfp_low_dim: usize,
    pub fep_low_dim: usize,
    /// Separate IP instances for the thermal→visible direction.
    pub ip_per_direction: bool,
}

impl TrackerConfig {
    pub fn reference() -> Self {
        Self {
            foundation: FoundationConfig::reference(),
            first_stage_blocks: 10,
            uep_layers: vec![2, 5, 8],
            prompt_tokens: 2,
            uep_low_dim: 8,
            ip_low_dim: 8,
            mfp_low_dim: 16,
            fep_low_dim: 8,
            ip_per_direction: false,
        }
    }

    /// Toy backbone with two blocks per stage.
    pub fn toy() -> Self {
        Self { foundation: FoundationConfig::toy(), first_stage_blocks: 2, uep_layers: vec![1, 2], ..Self::reference() }
    }

    pub fn fusion_location(&self) -> usize {
        self.first_stage_blocks
    }

    /// `M = L − N`.
    pub fn second_stage_blocks(&self) -> usize {
        self.foundation.num_blocks.saturating_sub(self.first_stage_blocks)
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = self.foundation.problems();
        let l = self.foundation.num_blocks;
        let n = self.first_stage_blocks;
        if n == 0 || n >= l {
            out.push(format!("first_stage_blocks {n} must lie in 1..={} so both stages have a block", l.max(1) - 1));
        }
        for (i, &u) in self.uep_layers.iter().enumerate() {
            if u == 0 || u > n {
                out.push(format!("uep layer {u} outside 1..={n}"));
            }
            if i > 0 && u <= self.uep_layers[i - 1] {
                out.push("uep_layers must be strictly increasing".to_string());
            }
        }
        for (name, v) in [
            ("uep_low_dim", self.uep_low_dim),
            ("ip_low_dim", self.ip_low_dim),
            ("mfp_low_dim", self.mfp_low_dim),
            ("fep_low_dim", self.fep_low_dim),
        ] {
            if v == 0 {
                out.push(format!("{name} must be positive"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// Same config split at another fusion location, with UEP layers beyond
    /// the new first stage dropped.
    pub fn with_fusion_location(&self, n: usize) -> Self {
        Self {
            first_stage_blocks: n,
            uep_layers: self.uep_layers.iter().copied().filter(|&u| u <= n).collect(),
            ..self.clone()
        }
    }
}

/// Visible and thermal images of the same size.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalFramePair {
    pub visible: Image,
    pub thermal: Image,
}

impl ModalFramePair {
    pub fn new(visible: Image, thermal: Image) -> Result<Self> {
        if visible.dim() != thermal.dim() {
            return Err(Error::Input(format!(
                "visible image is {:?} but thermal is {:?}",
                visible.dim(),
                thermal.dim()
            )));
        }
        Ok(Self { visible, thermal })
    }

    pub fn swapped(&self) -> Self {
        Self { visible: self.thermal.clone(), thermal: self.visible.clone() }
    }
}

/// Where an FEP took its prompt input from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FepSource {
    /// The block input `H^m`.
    BlockInput,
    /// The previous FEP output `P^{m−1}`.
    PreviousPrompt,
}

/// Prompter invocations of one forward pass.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CallTrace {
    pub uep_visible: usize,
    pub uep_thermal: usize,
    pub ip_v2t: usize,
    pub ip_t2v: usize,
    pub mfp: usize,
    pub fep: Vec<FepSource>,
}

/// Prepends `prompt` (may be `None` when `P = 0`) to the joined
/// template+search tokens of one modality.
fn embed_modality(
    g: &mut Graph,
    fw: &FoundationWeights<Var>,
    cfg: &TrackerConfig,
    template: &Image,
    search: &Image,
    prompt: Option<Var>,
) -> Result<TokenSeq> {
    let z = patch_embed(g, fw, &cfg.foundation, template, Role::Template)?;
    let x = patch_embed(g, fw, &cfg.foundation, search, Role::Search)?;
    let joined = TokenSeq::join(g, &z, &x)?;
    let p = prompt.map_or(0, |_| cfg.prompt_tokens);
    TokenSeq::from_parts(g, prompt, joined.data, joined.layout.with_prompt(p))
}

/// Embeds both modalities with their learnable prompts prepended.
pub fn embed_pair(
    g: &mut Graph,
    fw: &FoundationWeights<Var>,
    bank: &PrompterBank<Var>,
    cfg: &TrackerConfig,
    template: &ModalFramePair,
    search: &ModalFramePair,
) -> Result<(TokenSeq, TokenSeq)> {
    let (pv, pt) =
        if cfg.prompt_tokens > 0 { (Some(bank.prompts.visible), Some(bank.prompts.thermal)) } else { (None, None) };
    let v = embed_modality(g, fw, cfg, &template.visible, &search.visible, pv)?;
    let t = embed_modality(g, fw, cfg, &template.thermal, &search.thermal, pt)?;
    Ok((v, t))
}

/// Replaces the template rows of `seq`.
fn with_template(g: &mut Graph, seq: &TokenSeq, template: Var) -> Result<TokenSeq> {
    let prompt = seq.prompt_part(g)?;
    let search = seq.search_part(g)?;
    let mut parts = Vec::with_capacity(3);
    parts.extend(prompt);
    parts.push(template);
    parts.push(search);
    let data = g.concat_rows(&parts)?;
    TokenSeq::new(g, data, seq.layout)
}

fn check_stage_input(g: &Graph, cfg: &TrackerConfig, seq: &TokenSeq) -> Result<()> {
    let f = &cfg.foundation;
    let expected = SegmentLayout::image(Some(f.template_grid()), Some(f.search_grid())).with_prompt(cfg.prompt_tokens);
    if seq.layout != expected || seq.dim(g) != f.embed_dim {
        return Err(Error::Shape(format!(
            "stage input has layout {:?} and dim {}, expected {:?} and dim {}",
            seq.layout,
            seq.dim(g),
            expected,
            f.embed_dim
        )));
    }
    Ok(())
}

fn ip_t2v(bank: &PrompterBank<Var>, n: usize) -> &Ip<Var> {
    bank.ip_t2v.get(n - 1).unwrap_or(&bank.ip[n - 1])
}

/// Dual-stream first stage. Returns the visible tokens prompted for block
/// `N+1` and the thermal output of block `N`.
pub fn stage1_forward(
    g: &mut Graph,
    fw: &FoundationWeights<Var>,
    bank: &PrompterBank<Var>,
    cfg: &TrackerConfig,
    visible: &TokenSeq,
    thermal: &TokenSeq,
    trace: &mut CallTrace,
) -> Result<(TokenSeq, TokenSeq)> {
    check_stage_input(g, cfg, visible)?;
    check_stage_input(g, cfg, thermal)?;
    let f = &cfg.foundation;
    let mut h_v = *visible;
    let mut e_t_prev = *thermal;
    for n in 1..=cfg.first_stage_blocks {
        let uep = bank.uep_layers.iter().position(|&l| l == n);

        let mut e_v = encoder_forward(g, fw, f, n, &h_v)?;
        if let Some(k) = uep {
            let p = uep_forward(g, &bank.uep_visible[k], &h_v)?;
            let data = g.add(e_v.data, p)?;
            e_v = TokenSeq::new(g, data, e_v.layout)?;
            trace.uep_visible += 1;
        }

        let prompted = e_t_prev.template_part(g)?;
        let prompting = e_v.template_part(g)?;
        let z = ip_forward(g, &bank.ip[n - 1], prompted, prompting)?;
        trace.ip_v2t += 1;
        let h_t = with_template(g, &e_t_prev, z)?;

        let mut e_t = encoder_forward(g, fw, f, n, &h_t)?;
        if let Some(k) = uep {
            let p = uep_forward(g, &bank.uep_thermal[k], &h_t)?;
            let data = g.add(e_t.data, p)?;
            e_t = TokenSeq::new(g, data, e_t.layout)?;
            trace.uep_thermal += 1;
        }

        let prompted = e_v.template_part(g)?;
        let prompting = e_t.template_part(g)?;
        let z = ip_forward(g, ip_t2v(bank, n), prompted, prompting)?;
        trace.ip_t2v += 1;
        h_v = with_template(g, &e_v, z)?;
        e_t_prev = e_t;
    }
    Ok((h_v, e_t_prev))
}

/// Fuses the stage-one streams. The prompt segment is the sum of the
/// visible, thermal and fusion prompt tables.
pub fn middle_fuse(
    g: &mut Graph,
    bank: &PrompterBank<Var>,
    cfg: &TrackerConfig,
    visible: &TokenSeq,
    thermal: &TokenSeq,
    trace: &mut CallTrace,
) -> Result<TokenSeq> {
    let (fused, _) = mfp_forward(g, &bank.mfp, visible, thermal)?;
    trace.mfp += 1;
    let prompt = if cfg.prompt_tokens > 0 {
        let s = g.add(bank.prompts.visible, bank.prompts.thermal)?;
        Some(g.add(s, bank.prompts.fusion)?)
    } else {
        None
    };
    TokenSeq::from_parts(g, prompt, fused.data, fused.layout.with_prompt(cfg.prompt_tokens))
}

/// Single-stream second stage with FEP prompts on the image rows.
pub fn stage2_forward(
    g: &mut Graph,
    fw: &FoundationWeights<Var>,
    bank: &PrompterBank<Var>,
    cfg: &TrackerConfig,
    fused: &TokenSeq,
    trace: &mut CallTrace,
) -> Result<TokenSeq> {
    check_stage_input(g, cfg, fused)?;
    let grids = fused.layout.image_grids();
    let mut h = *fused;
    let mut prev: Option<Var> = None;
    for (k, fep) in bank.fep.iter().enumerate() {
        let m = cfg.first_stage_blocks + k + 1;
        let e = encoder_forward(g, fw, &cfg.foundation, m, &h)?;
        let e_img = e.image_part(g)?;
        let (prompt_in, source) = match prev {
            None => (h.image_part(g)?, FepSource::BlockInput),
            Some(p) => (p, FepSource::PreviousPrompt),
        };
        let p = fep_forward(g, fep, prompt_in, e_img, &grids)?;
        trace.fep.push(source);
        let img = g.add(e_img, p)?;
        let prompt = e.prompt_part(g)?;
        h = TokenSeq::from_parts(g, prompt, img, e.layout)?;
        prev = Some(p);
    }
    Ok(h)
}

/// Search rows of a final token sequence, ready for the head.
pub fn search_tokens(g: &mut Graph, seq: &TokenSeq) -> Result<TokenSeq> {
    let x = seq.search_part(g)?;
    TokenSeq::new(g, x, SegmentLayout::image(None, seq.layout.search))
}

/// Full forward pass on one template/search pair.
pub fn forward(
    g: &mut Graph,
    fw: &FoundationWeights<Var>,
    bank: &PrompterBank<Var>,
    cfg: &TrackerConfig,
    template: &ModalFramePair,
    search: &ModalFramePair,
    trace: &mut CallTrace,
) -> Result<HeadOutput> {
    let (v, t) = embed_pair(g, fw, bank, cfg, template, search)?;
    let (v, t) = stage1_forward(g, fw, bank, cfg, &v, &t, trace)?;
    let fused = middle_fuse(g, bank, cfg, &v, &t, trace)?;
    let out = stage2_forward(g, fw, bank, cfg, &fused, trace)?;
    let x = search_tokens(g, &out)?;
    head_forward(g, fw, &cfg.foundation, &x)
}

/// Box in search-region pixels and the `[H_X/p, W_X/p]` score map.
pub fn track(
    foundation: &Foundation,
    bank: &PrompterBank<Param>,
    cfg: &TrackerConfig,
    template: &ModalFramePair,
    search: &ModalFramePair,
) -> Result<(BoundingBox, Tensor)> {
    check_foundation(foundation, cfg)?;
    let mut g = Graph::new();
    let fw = foundation.bind(&mut g);
    let b = bank.bind_constants(&mut g);
    let out = forward(&mut g, &fw, &b, cfg, template, search, &mut CallTrace::default())?;
    Ok((out.bbox, out.score_map))
}

pub(crate) fn check_foundation(foundation: &Foundation, cfg: &TrackerConfig) -> Result<()> {
    cfg.validate()?;
    if foundation.cfg != cfg.foundation {
        return Err(Error::Config(vec![format!(
            "foundation config {:?} does not match tracker config {:?}",
            foundation.cfg, cfg.foundation
        )]));
    }
    Ok(())
}

/// Prompter-free middle fusion: both modalities run blocks `1..=N`
/// independently behind `P` zero tokens, image tokens are fused by
/// addition, and blocks `N+1..=L` run unprompted.
pub fn baseline_track(
    foundation: &Foundation,
    cfg: &TrackerConfig,
    template: &ModalFramePair,
    search: &ModalFramePair,
) -> Result<(BoundingBox, Tensor)> {
    check_foundation(foundation, cfg)?;
    let mut g = Graph::new();
    let fw = foundation.bind(&mut g);
    let f = &cfg.foundation;
    let zeros = |g: &mut Graph| (cfg.prompt_tokens > 0).then(|| g.zeros(cfg.prompt_tokens, f.embed_dim));
    let pv = zeros(&mut g);
    let pt = zeros(&mut g);
    let mut v = embed_modality(&mut g, &fw, cfg, &template.visible, &search.visible, pv)?;
    let mut t = embed_modality(&mut g, &fw, cfg, &template.thermal, &search.thermal, pt)?;
    for n in 1..=cfg.first_stage_blocks {
        v = encoder_forward(&mut g, &fw, f, n, &v)?;
        t = encoder_forward(&mut g, &fw, f, n, &t)?;
    }
    let vi = v.image_part(&mut g)?;
    let ti = t.image_part(&mut g)?;
    let fused = g.add(vi, ti)?;
    let prompt = zeros(&mut g);
    let mut h = TokenSeq::from_parts(&mut g, prompt, fused, v.layout)?;
    for m in cfg.first_stage_blocks + 1..=f.num_blocks {
        h = encoder_forward(&mut g, &fw, f, m, &h)?;
    }
    let x = search_tokens(&mut g, &h)?;
    let out = head_forward(&mut g, &fw, f, &x)?;
    Ok((out.bbox, out.score_map))
}

/// Trainable versus frozen parameter counts.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBudget {
    pub foundation_params: usize,
    pub tuned_params: usize,
    pub total_params: usize,
    /// `tuned / foundation`.
    pub tuned_fraction: f64,
    pub per_component: Vec<(Family, usize)>,
}

impl ParamBudget {
    fn new(foundation_params: usize, per_component: Vec<(Family, usize)>) -> Self {
        let tuned_params = per_component.iter().map(|(_, n)| n).sum();
        Self {
            foundation_params,
            tuned_params,
            total_params: foundation_params + tuned_params,
            tuned_fraction: tuned_params as f64 / foundation_params as f64,
            per_component,
        }
    }

    /// Counts from tensor shapes alone; nothing is allocated.
    pub fn from_config(cfg: &TrackerConfig) -> Result<Self> {
        cfg.validate()?;
        let foundation = FoundationWeights::plan(&cfg.foundation).count();
        Ok(Self::new(foundation, PrompterBank::plan(cfg).family_counts(numel)))
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{:<16} {:>12}", "component", "parameters").unwrap();
        for (fam, n) in &self.per_component {
            writeln!(out, "{:<16} {:>12}", fam.name(), n).unwrap();
        }
        writeln!(out, "{:<16} {:>12}", "tuned", self.tuned_params).unwrap();
        writeln!(out, "{:<16} {:>12}", "foundation", self.foundation_params).unwrap();
        writeln!(out, "{:<16} {:>12}", "total", self.total_params).unwrap();
        writeln!(
            out,
            "tuned: {:.2}M ({:.3}% of foundation)",
            self.tuned_params as f64 / 1e6,
            100.0 * self.tuned_fraction
        )
        .unwrap();
        out
    }
}

pub fn count_parameters(bank: &PrompterBank<Param>, foundation: &Foundation) -> ParamBudget {
    ParamBudget::new(foundation.param_count(), bank.family_counts(|p| p.len()))
}

/// Multiply-accumulate estimate of one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CostBreakdown {
    /// Encoder blocks: stage one twice, stage two once.
    pub backbone: u64,
    pub prompters: u64,
    /// Patch embedding of both modalities plus the head.
    pub embed_head: u64,
}

impl CostBreakdown {
    pub fn total(&self) -> u64 {
        self.backbone + self.prompters + self.embed_head
    }
}

/// MACs of one encoder block on `t` tokens.
pub fn block_macs(t: u64, d: u64, hidden: u64) -> u64 {
    // qkv, attention logits and mixing, output projection, MLP.
    t * d * 3 * d + 2 * t * t * d + t * d * d + 2 * t * d * hidden
}

pub fn cost_model(cfg: &TrackerConfig) -> Result<CostBreakdown> {
    cfg.validate()?;
    let f = &cfg.foundation;
    let d = f.embed_dim as u64;
    let (nz, nx) = (f.template_tokens() as u64, f.search_tokens() as u64);
    let img = nz + nx;
    let t = img + cfg.prompt_tokens as u64;
    let block = block_macs(t, d, f.mlp_hidden() as u64);
    let n = cfg.first_stage_blocks as u64;
    let m = cfg.second_stage_blocks() as u64;
    let backbone = (2 * n + m) * block;

    let k2 = (KERNEL * KERNEL) as u64;
    let lu = cfg.uep_low_dim as u64;
    let uep = img * (d * lu + lu * lu + k2 * lu + k2 * lu * lu + lu * lu + lu * d);
    let li = cfg.ip_low_dim as u64;
    let ip = nz * (2 * d * li + (li + 1) * li + li * d);
    let lm = cfg.mfp_low_dim as u64;
    let mfp = img * (2 * d * lm + 5 * lm * 2 + lm * d);
    let lf = cfg.fep_low_dim as u64;
    let fep = img * (2 * d * lf + lf * d);
    let prompters = 2 * cfg.uep_layers.len() as u64 * uep + 2 * n * ip + mfp + m * fep;

    let patch = (f.patch_size * f.patch_size * crate::foundation::IMAGE_CHANNELS) as u64;
    let embed_head = 2 * img * patch * d + nx * d * 5;
    Ok(CostBreakdown { backbone, prompters, embed_head })
}

/// Cost at every fusion location `1..=L−1`.
pub fn cost_sweep(cfg: &TrackerConfig) -> Result<Vec<(usize, CostBreakdown)>> {
    (1..cfg.foundation.num_blocks).map(|n| Ok((n, cost_model(&cfg.with_fusion_location(n))?))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ModalFramePair {
        let mut img = || Image::from_shape_fn((h, w, 3), |_| rng.random_range(0.0..1.0));
        let v = img();
        let t = img();
        ModalFramePair::new(v, t).unwrap()
    }

    fn inputs(cfg: &TrackerConfig, seed: u64) -> (ModalFramePair, ModalFramePair) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (th, tw) = cfg.foundation.template_size;
        let (sh, sw) = cfg.foundation.search_size;
        (pair(&mut rng, th, tw), pair(&mut rng, sh, sw))
    }

    #[test]
    fn reference_budget_brackets_published_figure() {
        let b = ParamBudget::from_config(&TrackerConfig::reference()).unwrap();
        assert_eq!(b.tuned_params, 357_058);
        assert!((0.0030..=0.0045).contains(&b.tuned_fraction), "{}", b.tuned_fraction);
    }

    #[test]
    fn budget_matches_closed_form_on_toy() {
        let cfg = TrackerConfig::toy();
        let (d, u, i, m, f, p) = (16, 8, 8, 16, 8, 2);
        let uep = (d * u + u) + (u * u + u) + (9 * u + u) + (9 * u * u + u) + (u * u + u) + (u * d + d);
        let ip = 2 * (d * i + i) + ((i + 1) * i + i) + (i * d + d);
        let mfp = 2 * (d * m + m) + (5 * m * 2 + 2) + (m * d + d);
        let fep = 2 * (d * f + f) + (f * d + d);
        let expected = 2 * 2 * uep + 2 * ip + mfp + 2 * fep + 3 * p * d;
        let bank = PrompterBank::init(&cfg, 0).unwrap();
        let foundation = Foundation::random(cfg.foundation.clone(), 0).unwrap();
        let b = count_parameters(&bank, &foundation);
        assert_eq!(b.tuned_params, expected);
        assert_eq!(b, ParamBudget::from_config(&cfg).unwrap());
    }

    #[test]
    fn minimal_config_counts_only_fusion_prompters() {
        let cfg = TrackerConfig { first_stage_blocks: 1, uep_layers: vec![], prompt_tokens: 0, ..TrackerConfig::toy() };
        let b = ParamBudget::from_config(&cfg).unwrap();
        let get = |f| b.per_component.iter().find(|(x, _)| *x == f).unwrap().1;
        // N = 1 still carries one IP.
        assert_eq!(b.tuned_params, get(Family::Mfp) + get(Family::Fep) + get(Family::Ip));
        assert_eq!(get(Family::Uep) + get(Family::Prompts), 0);
    }

    #[test]
    fn config_violations_are_reported_together() {
        let cfg = TrackerConfig { first_stage_blocks: 12, uep_layers: vec![13], ..TrackerConfig::reference() };
        match cfg.validate() {
            Err(Error::Config(p)) => assert_eq!(p.len(), 2, "{p:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn call_counts_follow_the_schedule() {
        let cfg = TrackerConfig {
            foundation: FoundationConfig { num_blocks: 5, ..FoundationConfig::toy() },
            first_stage_blocks: 3,
            uep_layers: vec![2],
            ..TrackerConfig::toy()
        };
        let foundation = Foundation::random(cfg.foundation.clone(), 1).unwrap();
        let bank = PrompterBank::init(&cfg, 1).unwrap();
        let (z, x) = inputs(&cfg, 2);
        let mut g = Graph::new();
        let fw = foundation.bind(&mut g);
        let b = bank.bind_constants(&mut g);
        let mut trace = CallTrace::default();
        forward(&mut g, &fw, &b, &cfg, &z, &x, &mut trace).unwrap();
        assert_eq!(
            trace,
            CallTrace {
                uep_visible: 1,
                uep_thermal: 1,
                ip_v2t: 3,
                ip_t2v: 3,
                mfp: 1,
                fep: vec![FepSource::BlockInput, FepSource::PreviousPrompt],
            }
        );
    }

    #[test]
    fn fresh_bank_matches_baseline_bitwise() {
        let cfg = TrackerConfig::toy();
        let foundation = Foundation::random(cfg.foundation.clone(), 3).unwrap();
        let bank = PrompterBank::init(&cfg, 4).unwrap();
        for seed in 0..3 {
            let (z, x) = inputs(&cfg, seed);
            let (b1, m1) = track(&foundation, &bank, &cfg, &z, &x).unwrap();
            let (b2, m2) = baseline_track(&foundation, &cfg, &z, &x).unwrap();
            assert_eq!(b1, b2);
            assert_eq!(m1, m2);
        }
    }

    #[test]
    fn track_is_deterministic_and_inside_search_region() {
        let cfg = TrackerConfig::toy();
        let foundation = Foundation::random(cfg.foundation.clone(), 3).unwrap();
        let bank = PrompterBank::init(&cfg, 4).unwrap().perturbed(5, 0.3);
        let (z, x) = inputs(&cfg, 9);
        let (b1, m1) = track(&foundation, &bank, &cfg, &z, &x).unwrap();
        let (b2, m2) = track(&foundation, &bank, &cfg, &z, &x).unwrap();
        assert_eq!((b1, m1.clone()), (b2, m2));
        assert!(b1.x >= 0.0 && b1.y >= 0.0 && b1.right() <= 64.0 && b1.bottom() <= 64.0);
        assert_eq!(m1.dim(), (4, 4));
    }

    #[test]
    fn prompt_segment_leads_fused_tokens() {
        let cfg = TrackerConfig::toy();
        let foundation = Foundation::random(cfg.foundation.clone(), 3).unwrap();
        let bank = PrompterBank::init(&cfg, 4).unwrap();
        let (z, x) = inputs(&cfg, 1);
        let mut g = Graph::new();
        let fw = foundation.bind(&mut g);
        let b = bank.bind_constants(&mut g);
        let mut trace = CallTrace::default();
        let (v, t) = embed_pair(&mut g, &fw, &b, &cfg, &z, &x).unwrap();
        let (v, t) = stage1_forward(&mut g, &fw, &b, &cfg, &v, &t, &mut trace).unwrap();
        let fused = middle_fuse(&mut g, &b, &cfg, &v, &t, &mut trace).unwrap();
        assert_eq!(g.shape(fused.data).0, 2 + 4 + 16);
        assert_eq!(fused.layout.prompt, 2);
        let p = fused.prompt_part(&mut g).unwrap().unwrap();
        assert!(g.value(p).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cost_grows_with_fusion_location() {
        let sweep = cost_sweep(&TrackerConfig::reference()).unwrap();
        assert_eq!(sweep.len(), 11);
        assert!(sweep.windows(2).all(|w| w[0].1.total() < w[1].1.total()));
        let l = 12.0;
        let ratio = sweep[10].1.backbone as f64 / sweep[0].1.backbone as f64;
        assert!((ratio - (2.0 * l - 1.0) / (l + 1.0)).abs() < 1e-12);
    }
}
