//! Trainable prompt components: the uni-modal exploration prompter (UEP),
//! the inter-modal prompter (IP), the middle fusion prompter (MFP), the
//! fusion-enhancing prompter (FEP) and the learnable prompt tokens.
//!
//! All convolutions act on token grids stored channels-last, one row per
//! grid cell. A 1×1 convolution is therefore a [`Linear`] layer. Template
//! and search segments are reshaped to their own grids and never mixed by a
//! spatial kernel. Prompt tokens are excluded from every prompter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::archive::{DType, WeightArchive};
use crate::foundation::TokenSeq;
use crate::graph::{Graph, Grid, Tensor, Var};
use crate::params::{fan_in_uniform, join, numel, param_leaves, param_tree, Checksum, Linear, Param, Shape};
use crate::pipeline::TrackerConfig;
use crate::{Error, Result};

/// Archive namespace of prompter tensors.
pub const PROMPTER_PREFIX: &str = "prompter/";

/// Spatial kernel of the depthwise and dilated convolutions.
pub const KERNEL: usize = 3;
pub const DILATION: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct Uep<T> {
    pub down: Linear<T>,
    pub std_conv: Linear<T>,
    /// Depthwise 3×3: weight `[9, d]`, one column per channel.
    pub dw_conv: Linear<T>,
    /// Dilated 3×3 over all channels: weight `[9·d, d]`.
    pub dl_conv: Linear<T>,
    pub merge: Linear<T>,
    pub up: Linear<T>,
}

param_tree!(Uep { down, std_conv, dw_conv, dl_conv, merge, up });

impl Uep<Shape> {
    pub fn plan(dim: usize, low: usize) -> Self {
        let k2 = KERNEL * KERNEL;
        Uep {
            down: Linear::shape(dim, low),
            std_conv: Linear::shape(low, low),
            dw_conv: Linear { weight: [k2, low], bias: [1, low] },
            dl_conv: Linear::shape(k2 * low, low),
            merge: Linear::shape(low, low),
            up: Linear::shape(low, dim),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ip<T> {
    pub down_prompting: Linear<T>,
    pub down_prompted: Linear<T>,
    /// Input channel 0 is the pooled prompt, channels `1..=d` the prompted
    /// features.
    pub merge: Linear<T>,
    pub up: Linear<T>,
}

param_tree!(Ip { down_prompting, down_prompted, merge, up });

impl Ip<Shape> {
    pub fn plan(dim: usize, low: usize) -> Self {
        Ip {
            down_prompting: Linear::shape(dim, low),
            down_prompted: Linear::shape(dim, low),
            merge: Linear::shape(low + 1, low),
            up: Linear::shape(low, dim),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mfp<T> {
    pub down_v: Linear<T>,
    pub down_t: Linear<T>,
    /// `5m → 2` over `(F'_V, F'_S, F'_A, F'_S, F'_T)`.
    pub weight_fc: Linear<T>,
    pub up: Linear<T>,
}

param_tree!(Mfp { down_v, down_t, weight_fc, up });

impl Mfp<Shape> {
    pub fn plan(dim: usize, low: usize) -> Self {
        Mfp {
            down_v: Linear::shape(dim, low),
            down_t: Linear::shape(dim, low),
            weight_fc: Linear::shape(5 * low, 2),
            up: Linear::shape(low, dim),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fep<T> {
    pub down_prompt: Linear<T>,
    pub down_feat: Linear<T>,
    pub up: Linear<T>,
}

param_tree!(Fep { down_prompt, down_feat, up });

impl Fep<Shape> {
    pub fn plan(dim: usize, low: usize) -> Self {
        Fep { down_prompt: Linear::shape(dim, low), down_feat: Linear::shape(dim, low), up: Linear::shape(low, dim) }
    }
}

/// Modality and stage prompt tokens, each `[P, D]`. They carry no
/// positional encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnablePrompts<T> {
    pub visible: T,
    pub thermal: T,
    pub fusion: T,
}

param_leaves!(LearnablePrompts { visible, thermal, fusion });

/// Every trainable tensor of the tracker.
#[derive(Clone, Debug, PartialEq)]
pub struct PrompterBank<T> {
    /// Block indices (1-based) that carry a UEP pair, ascending.
    pub uep_layers: Vec<usize>,
    pub uep_visible: Vec<Uep<T>>,
    pub uep_thermal: Vec<Uep<T>>,
    /// One per first-stage block. Used in both directions unless
    /// `ip_t2v` is non-empty, in which case it only prompts the thermal
    /// stream.
    pub ip: Vec<Ip<T>>,
    pub ip_t2v: Vec<Ip<T>>,
    pub mfp: Mfp<T>,
    /// One per second-stage block.
    pub fep: Vec<Fep<T>>,
    pub prompts: LearnablePrompts<T>,
}

/// Prompter families, used for audits and the freeze contract.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Family {
    Uep,
    Ip,
    Mfp,
    Fep,
    Prompts,
}

impl Family {
    pub const ALL: [Family; 5] = [Family::Uep, Family::Ip, Family::Mfp, Family::Fep, Family::Prompts];

    pub fn name(self) -> &'static str {
        match self {
            Family::Uep => "UEP",
            Family::Ip => "IP",
            Family::Mfp => "MFP",
            Family::Fep => "FEP",
            Family::Prompts => "prompt tokens",
        }
    }

    /// Family of a tensor name produced by [`PrompterBank::visit`].
    pub fn of(name: &str) -> Option<Family> {
        let rest = name.strip_prefix(PROMPTER_PREFIX).unwrap_or(name);
        let head = rest.split('.').next()?;
        Some(match head {
            "uep" => Family::Uep,
            "ip" | "ip_t2v" => Family::Ip,
            "mfp" => Family::Mfp,
            "fep" => Family::Fep,
            "prompts" => Family::Prompts,
            _ => return None,
        })
    }
}

impl<T> PrompterBank<T> {
    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
        for (l, u) in self.uep_layers.iter().zip(&self.uep_visible) {
            u.visit(&join(prefix, &format!("uep.visible.{l}")), f);
        }
        for (l, u) in self.uep_layers.iter().zip(&self.uep_thermal) {
            u.visit(&join(prefix, &format!("uep.thermal.{l}")), f);
        }
        for (i, ip) in self.ip.iter().enumerate() {
            ip.visit(&join(prefix, &format!("ip.{}", i + 1)), f);
        }
        for (i, ip) in self.ip_t2v.iter().enumerate() {
            ip.visit(&join(prefix, &format!("ip_t2v.{}", i + 1)), f);
        }
        self.mfp.visit(&join(prefix, "mfp"), f);
        for (i, fep) in self.fep.iter().enumerate() {
            fep.visit(&join(prefix, &format!("fep.{}", i + 1)), f);
        }
        self.prompts.visit(&join(prefix, "prompts"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        for (l, u) in self.uep_layers.iter().zip(&mut self.uep_visible) {
            u.visit_mut(&join(prefix, &format!("uep.visible.{l}")), f);
        }
        for (l, u) in self.uep_layers.iter().zip(&mut self.uep_thermal) {
            u.visit_mut(&join(prefix, &format!("uep.thermal.{l}")), f);
        }
        for (i, ip) in self.ip.iter_mut().enumerate() {
            ip.visit_mut(&join(prefix, &format!("ip.{}", i + 1)), f);
        }
        for (i, ip) in self.ip_t2v.iter_mut().enumerate() {
            ip.visit_mut(&join(prefix, &format!("ip_t2v.{}", i + 1)), f);
        }
        self.mfp.visit_mut(&join(prefix, "mfp"), f);
        for (i, fep) in self.fep.iter_mut().enumerate() {
            fep.visit_mut(&join(prefix, &format!("fep.{}", i + 1)), f);
        }
        self.prompts.visit_mut(&join(prefix, "prompts"), f);
    }

    pub fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> PrompterBank<U> {
        let uep = |side: &str, v: &[Uep<T>], f: &mut dyn FnMut(&str, &T) -> U| -> Vec<Uep<U>> {
            self.uep_layers
                .iter()
                .zip(v)
                .map(|(l, u)| u.map_named(&join(prefix, &format!("uep.{side}.{l}")), f))
                .collect()
        };
        let uep_visible = uep("visible", &self.uep_visible, f);
        let uep_thermal = uep("thermal", &self.uep_thermal, f);
        let ips = |key: &str, v: &[Ip<T>], f: &mut dyn FnMut(&str, &T) -> U| -> Vec<Ip<U>> {
            v.iter().enumerate().map(|(i, ip)| ip.map_named(&join(prefix, &format!("{key}.{}", i + 1)), f)).collect()
        };
        let ip = ips("ip", &self.ip, f);
        let ip_t2v = ips("ip_t2v", &self.ip_t2v, f);
        let mfp = self.mfp.map_named(&join(prefix, "mfp"), f);
        let fep = self
            .fep
            .iter()
            .enumerate()
            .map(|(i, x)| x.map_named(&join(prefix, &format!("fep.{}", i + 1)), f))
            .collect();
        let prompts = self.prompts.map_named(&join(prefix, "prompts"), f);
        PrompterBank { uep_layers: self.uep_layers.clone(), uep_visible, uep_thermal, ip, ip_t2v, mfp, fep, prompts }
    }

    /// Parameter counts per family, using `size` to measure a leaf.
    pub fn family_counts(&self, size: impl Fn(&T) -> usize) -> Vec<(Family, usize)> {
        let mut counts = Family::ALL.map(|f| (f, 0usize));
        self.visit(PROMPTER_PREFIX, &mut |n, t| {
            let fam = Family::of(n).expect("bank names carry a family");
            counts.iter_mut().find(|(f, _)| *f == fam).unwrap().1 += size(t);
        });
        counts.to_vec()
    }
}

impl PrompterBank<Shape> {
    pub fn plan(cfg: &TrackerConfig) -> Self {
        let d = cfg.foundation.embed_dim;
        let n = cfg.first_stage_blocks;
        let uep = cfg.uep_layers.iter().map(|_| Uep::plan(d, cfg.uep_low_dim)).collect::<Vec<_>>();
        PrompterBank {
            uep_layers: cfg.uep_layers.clone(),
            uep_visible: uep.clone(),
            uep_thermal: uep,
            ip: vec![Ip::plan(d, cfg.ip_low_dim); n],
            ip_t2v: if cfg.ip_per_direction { vec![Ip::plan(d, cfg.ip_low_dim); n] } else { Vec::new() },
            mfp: Mfp::plan(d, cfg.mfp_low_dim),
            fep: vec![Fep::plan(d, cfg.fep_low_dim); cfg.second_stage_blocks()],
            prompts: LearnablePrompts {
                visible: [cfg.prompt_tokens, d],
                thermal: [cfg.prompt_tokens, d],
                fusion: [cfg.prompt_tokens, d],
            },
        }
    }

    pub fn count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, s| n += numel(s));
        n
    }
}

impl PrompterBank<Param> {
    /// Fresh bank: up-projections and prompt tokens are zero, biases are
    /// zero, remaining weights are fan-in uniform. Deterministic in `seed`.
    pub fn init(cfg: &TrackerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(PrompterBank::plan(cfg).map_named(PROMPTER_PREFIX, &mut |name, shape| {
            let zero = name.contains(".up.") || name.contains("prompts.") || name.ends_with(".bias");
            let t = if zero {
                Tensor::zeros((shape[0], shape[1]))
            } else if name.ends_with("dw_conv.weight") {
                fan_in_uniform(&mut rng, *shape, KERNEL * KERNEL)
            } else {
                fan_in_uniform(&mut rng, *shape, shape[0])
            };
            Param::new(t)
        }))
    }

    /// Copy with Gaussian noise of standard deviation `std` added to every
    /// tensor, zero-initialized ones included. Used to exercise non-trivial
    /// paths in tests and audits.
    pub fn perturbed(&self, seed: u64, std: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, std).expect("finite std");
        self.map_named("", &mut |_, p| Param::new(p.mapv(|v| v + dist.sample(&mut rng))))
    }

    /// Binds every tensor as a trainable graph leaf.
    pub fn bind(&self, g: &mut Graph) -> PrompterBank<Var> {
        self.map_named("", &mut |_, p| g.param(p))
    }

    /// Binds every tensor as a constant, for inference.
    pub fn bind_constants(&self, g: &mut Graph) -> PrompterBank<Var> {
        self.map_named("", &mut |_, p| g.constant_shared(p))
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.len());
        n
    }

    pub fn checksum(&self) -> String {
        let mut c = Checksum::default();
        self.visit(PROMPTER_PREFIX, &mut |name, p| c.update(name, p));
        c.finish()
    }

    /// Double-precision archive holding only `prompter/` entries.
    pub fn to_archive(&self) -> WeightArchive {
        let mut a = WeightArchive::new();
        self.visit(PROMPTER_PREFIX, &mut |name, p| a.insert(name, p, DType::F64).expect("bank names are unique"));
        a
    }

    pub fn from_archive(archive: &WeightArchive, cfg: &TrackerConfig) -> Result<Self> {
        cfg.validate()?;
        let plan = PrompterBank::plan(cfg);
        archive.read_tree(|f| plan.map_named(PROMPTER_PREFIX, f))
    }
}

fn check_rows(g: &Graph, what: &str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    Ok(())
}

fn check_grids(g: &Graph, x: Var, grids: &[(usize, Grid)]) -> Result<()> {
    let rows = g.shape(x).0;
    let covered: usize = grids.iter().map(|(_, gr)| gr.len()).sum();
    let contiguous = grids.iter().scan(0, |next, (off, gr)| {
        let ok = *off == *next;
        *next = off + gr.len();
        Some(ok)
    });
    if covered != rows || !contiguous.clone().all(|ok| ok) {
        return Err(Error::Shape(format!("{rows} tokens do not tile the grids {grids:?}")));
    }
    Ok(())
}

/// Applies `f` to each grid segment of `x` and stacks the results.
fn per_segment(
    g: &mut Graph,
    x: Var,
    grids: &[(usize, Grid)],
    mut f: impl FnMut(&mut Graph, Var, Grid) -> Result<Var>,
) -> Result<Var> {
    let mut parts = Vec::with_capacity(grids.len());
    for &(off, grid) in grids {
        let seg = g.slice_rows(x, off, grid.len())?;
        parts.push(f(g, seg, grid)?);
    }
    g.concat_rows(&parts)
}

/// UEP delta on image rows: `up(GELU(merge(std(F) + dl(F) + dw(F))))`
/// with `F = down(x)`. The UEP output including its residual is
/// `x + delta`; only the delta is added to the encoder output.
pub fn uep_delta(g: &mut Graph, uep: &Uep<Var>, x: Var, grids: &[(usize, Grid)]) -> Result<Var> {
    check_grids(g, x, grids)?;
    let low = uep.down.forward(g, x)?;
    let sum = per_segment(g, low, grids, |g, f, grid| {
        let s = uep.std_conv.forward(g, f)?;
        let dw = g.depthwise_conv(f, uep.dw_conv.weight, grid, KERNEL, 1)?;
        let dw = g.add_row(dw, uep.dw_conv.bias)?;
        let cols = g.im2col(f, grid, KERNEL, DILATION)?;
        let dl = uep.dl_conv.forward(g, cols)?;
        let s = g.add(s, dl)?;
        g.add(s, dw)
    })?;
    let merged = uep.merge.forward(g, sum)?;
    let merged = g.gelu(merged);
    uep.up.forward(g, merged)
}

/// UEP prompt for a whole sequence: the delta on template and search rows,
/// zero on prompt rows.
pub fn uep_forward(g: &mut Graph, uep: &Uep<Var>, tokens: &TokenSeq) -> Result<Var> {
    let image = tokens.image_part(g)?;
    let delta = uep_delta(g, uep, image, &tokens.layout.image_grids())?;
    match tokens.layout.prompt {
        0 => Ok(delta),
        p => {
            let dim = g.shape(delta).1;
            let z = g.zeros(p, dim);
            g.concat_rows(&[z, delta])
        }
    }
}

/// Inter-modal prompting on template tokens:
/// `prompted + up(merge([mean_c(down_prompting(prompting)), down_prompted(prompted)]))`.
pub fn ip_forward(g: &mut Graph, ip: &Ip<Var>, prompted: Var, prompting: Var) -> Result<Var> {
    check_rows(g, "inter-modal prompter inputs", prompted, prompting)?;
    let p = ip.down_prompting.forward(g, prompting)?;
    let pooled = g.mean_cols(p);
    let x = ip.down_prompted.forward(g, prompted)?;
    let cat = g.concat_cols(&[pooled, x])?;
    let merged = ip.merge.forward(g, cat)?;
    let up = ip.up.forward(g, merged)?;
    g.add(prompted, up)
}

/// Intermediate values of one middle-fusion pass.
#[derive(Clone, Copy, Debug)]
pub struct MfpOutput {
    /// Fused image tokens, `E_V + E_T + up(fused_low)`.
    pub fused: Var,
    /// `[n, 2]`: per-location `(w_V, w_T)`.
    pub weights: Var,
    /// `σ(F_V − F_T)` and `σ(F_T − F_V)`.
    pub sigma_v: Var,
    pub sigma_t: Var,
    /// `F'_S + F_V∘w_V + F_T∘w_T` before up-projection.
    pub fused_low: Var,
}

/// Fuses image tokens of both modalities. Inputs are `[n, D]` image rows
/// in matching order.
pub fn mfp_fuse(g: &mut Graph, mfp: &Mfp<Var>, ev: Var, et: Var) -> Result<MfpOutput> {
    check_rows(g, "middle fusion inputs", ev, et)?;
    let fv = mfp.down_v.forward(g, ev)?;
    let ft = mfp.down_t.forward(g, et)?;
    let shared = g.mul(fv, ft)?;
    let all = g.add(fv, ft)?;
    let dv = g.sub(fv, ft)?;
    let sigma_v = g.sigmoid(dv);
    let dt = g.sub(ft, fv)?;
    let sigma_t = g.sigmoid(dt);
    let cat = g.concat_cols(&[sigma_v, shared, all, shared, sigma_t])?;
    let logits = mfp.weight_fc.forward(g, cat)?;
    let weights = g.softmax_rows(logits);
    let wv = g.slice_cols(weights, 0, 1)?;
    let wt = g.slice_cols(weights, 1, 1)?;
    let a = g.mul_col(fv, wv)?;
    let b = g.mul_col(ft, wt)?;
    let low = g.add(shared, a)?;
    let fused_low = g.add(low, b)?;
    let up = mfp.up.forward(g, fused_low)?;
    let base = g.add(ev, et)?;
    let fused = g.add(base, up)?;
    Ok(MfpOutput { fused, weights, sigma_v, sigma_t, fused_low })
}

/// Sequence-level fusion: both sequences must share their segment layout.
/// Returns the fused image tokens as a prompt-free sequence.
pub fn mfp_forward(g: &mut Graph, mfp: &Mfp<Var>, v: &TokenSeq, t: &TokenSeq) -> Result<(TokenSeq, MfpOutput)> {
    if v.layout != t.layout {
        return Err(Error::Shape(format!("segment mismatch: {:?} vs {:?}", v.layout, t.layout)));
    }
    let ev = v.image_part(g)?;
    let et = t.image_part(g)?;
    let out = mfp_fuse(g, mfp, ev, et)?;
    let seq = TokenSeq::new(g, out.fused, v.layout.with_prompt(0))?;
    Ok((seq, out))
}

/// `z ∘ softmax(z)` with the softmax taken over the cells of each grid,
/// separately per channel.
pub fn fovea(g: &mut Graph, z: Var, grids: &[(usize, Grid)]) -> Result<Var> {
    check_grids(g, z, grids)?;
    per_segment(g, z, grids, |g, seg, _| {
        let w = g.softmax_cols(seg);
        g.mul(seg, w)
    })
}

/// `up(fovea(down_prompt(prompt_in)) + down_feat(feat))` on image rows.
pub fn fep_forward(g: &mut Graph, fep: &Fep<Var>, prompt_in: Var, feat: Var, grids: &[(usize, Grid)]) -> Result<Var> {
    check_rows(g, "fusion-enhancing prompter inputs", prompt_in, feat)?;
    let z = fep.down_prompt.forward(g, prompt_in)?;
    let z = fovea(g, z, grids)?;
    let f = fep.down_feat.forward(g, feat)?;
    let s = g.add(z, f)?;
    fep.up.forward(g, s)
}
