//! Straight-line reference implementations and check drivers shared by
//! the integration and acceptance tests. The prompter and metric oracles
//! work on plain `f64` arrays with explicit loops; only encoder blocks and
//! the finite-difference driver call into the library.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rgbt_prompt::evalkit::{BoundingBox, EvalConfig, SequenceRecord};
use rgbt_prompt::foundation::{encoder_forward, Foundation, SegmentLayout, TokenSeq};
use rgbt_prompt::graph::{Graph, Grid, Tensor};
use rgbt_prompt::params::{Linear, Param};
use rgbt_prompt::pipeline::TrackerConfig;
use rgbt_prompt::prompters::{Fep, Ip, Mfp, PrompterBank, Uep};
use rgbt_prompt::training::{generate_synthetic, sample_gradients, sample_loss, LossWeights};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

/// Two image grids of random size, as `(row offset, grid)` pairs.
pub fn random_grids(rng: &mut impl Rng) -> Vec<(usize, Grid)> {
    let a = Grid::new(rng.random_range(1..=4), rng.random_range(1..=4));
    let b = Grid::new(rng.random_range(1..=5), rng.random_range(1..=5));
    vec![(0, a), (a.len(), b)]
}

pub fn grid_rows(grids: &[(usize, Grid)]) -> usize {
    grids.iter().map(|(o, g)| o + g.len()).max().unwrap_or(0)
}

/// Toy bank with every tensor, zero-initialized ones included, moved off
/// its initial value.
pub fn perturbed_bank(cfg: &TrackerConfig, seed: u64, std: f64) -> PrompterBank<Param> {
    PrompterBank::init(cfg, seed).unwrap().perturbed(seed ^ 0x5eed, std)
}

/// Largest absolute difference divided by the largest reference
/// magnitude.
pub fn rel_err(actual: &Tensor, reference: &Tensor) -> f64 {
    assert_eq!(actual.dim(), reference.dim(), "shape mismatch");
    let mut diff = 0.0_f64;
    let mut mag = 0.0_f64;
    for (a, r) in actual.iter().zip(reference) {
        diff = diff.max((a - r).abs());
        mag = mag.max(r.abs());
    }
    if mag == 0.0 {
        diff
    } else {
        diff / mag
    }
}

pub fn linear(x: &Tensor, l: &Linear<Param>) -> Tensor {
    let (n, inputs) = x.dim();
    assert_eq!(l.weight.nrows(), inputs);
    let outputs = l.weight.ncols();
    let mut out = Tensor::zeros((n, outputs));
    for r in 0..n {
        for c in 0..outputs {
            let mut acc = l.bias[[0, c]];
            for k in 0..inputs {
                acc += x[[r, k]] * l.weight[[k, c]];
            }
            out[[r, c]] = acc;
        }
    }
    out
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / 2.0_f64.sqrt()))
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Index inside the grid of tap `(ky, kx)` of a same-padded 3×3 kernel
/// centred on `(y, x)`.
fn tap(grid: Grid, y: usize, x: usize, ky: usize, kx: usize, dilation: isize) -> Option<usize> {
    let yy = y as isize + (ky as isize - 1) * dilation;
    let xx = x as isize + (kx as isize - 1) * dilation;
    if yy < 0 || xx < 0 || yy >= grid.rows as isize || xx >= grid.cols as isize {
        return None;
    }
    Some(yy as usize * grid.cols + xx as usize)
}

/// `up(GELU(merge(std(F) + dilated(F) + depthwise(F))))`, `F = down(x)`.
pub fn uep_delta(u: &Uep<Param>, x: &Tensor, grids: &[(usize, Grid)]) -> Tensor {
    let f = linear(x, &u.down);
    let d = f.ncols();
    let mut sum = Tensor::zeros(f.dim());
    for &(off, grid) in grids {
        for y in 0..grid.rows {
            for xx in 0..grid.cols {
                let o = off + y * grid.cols + xx;
                for c in 0..d {
                    let mut standard = u.std_conv.bias[[0, c]];
                    for k in 0..d {
                        standard += f[[o, k]] * u.std_conv.weight[[k, c]];
                    }
                    let mut depthwise = u.dw_conv.bias[[0, c]];
                    let mut dilated = u.dl_conv.bias[[0, c]];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let t = ky * 3 + kx;
                            if let Some(i) = tap(grid, y, xx, ky, kx, 1) {
                                depthwise += f[[off + i, c]] * u.dw_conv.weight[[t, c]];
                            }
                            if let Some(i) = tap(grid, y, xx, ky, kx, 2) {
                                for k in 0..d {
                                    dilated += f[[off + i, k]] * u.dl_conv.weight[[t * d + k, c]];
                                }
                            }
                        }
                    }
                    sum[[o, c]] = standard + dilated + depthwise;
                }
            }
        }
    }
    let merged = linear(&sum, &u.merge).mapv(gelu);
    linear(&merged, &u.up)
}

/// Zero rows for the prompt segment, the UEP delta on image rows.
pub fn uep_prompt(u: &Uep<Param>, tokens: &Tensor, prompt: usize, grids: &[(usize, Grid)]) -> Tensor {
    let (n, dim) = tokens.dim();
    let image = tokens.slice(ndarray::s![prompt.., ..]).to_owned();
    let delta = uep_delta(u, &image, grids);
    let mut out = Tensor::zeros((n, dim));
    out.slice_mut(ndarray::s![prompt.., ..]).assign(&delta);
    out
}

/// `prompted + up(merge([ACP(down(prompting)), down(prompted)]))`.
pub fn ip(ip: &Ip<Param>, prompted: &Tensor, prompting: &Tensor) -> Tensor {
    let p = linear(prompting, &ip.down_prompting);
    let x = linear(prompted, &ip.down_prompted);
    let (n, d) = x.dim();
    let mut cat = Tensor::zeros((n, d + 1));
    for r in 0..n {
        let mut mean = 0.0;
        for c in 0..p.ncols() {
            mean += p[[r, c]];
        }
        cat[[r, 0]] = mean / p.ncols() as f64;
        for c in 0..d {
            cat[[r, c + 1]] = x[[r, c]];
        }
    }
    let merged = linear(&cat, &ip.merge);
    prompted + &linear(&merged, &ip.up)
}

pub struct MfpReference {
    pub fused: Tensor,
    pub w_v: Vec<f64>,
    pub w_t: Vec<f64>,
    pub sigma_v: Tensor,
    pub sigma_t: Tensor,
    pub fused_low: Tensor,
}

pub fn mfp(m: &Mfp<Param>, ev: &Tensor, et: &Tensor) -> MfpReference {
    let fv = linear(ev, &m.down_v);
    let ft = linear(et, &m.down_t);
    let (n, d) = fv.dim();
    let mut sigma_v = Tensor::zeros((n, d));
    let mut sigma_t = Tensor::zeros((n, d));
    let mut fused_low = Tensor::zeros((n, d));
    let (mut w_v, mut w_t) = (Vec::new(), Vec::new());
    for r in 0..n {
        let mut features = Vec::with_capacity(5 * d);
        for c in 0..d {
            sigma_v[[r, c]] = sigmoid(fv[[r, c]] - ft[[r, c]]);
            sigma_t[[r, c]] = sigmoid(ft[[r, c]] - fv[[r, c]]);
        }
        features.extend((0..d).map(|c| sigma_v[[r, c]]));
        features.extend((0..d).map(|c| fv[[r, c]] * ft[[r, c]]));
        features.extend((0..d).map(|c| fv[[r, c]] + ft[[r, c]]));
        features.extend((0..d).map(|c| fv[[r, c]] * ft[[r, c]]));
        features.extend((0..d).map(|c| sigma_t[[r, c]]));
        let mut logits = [m.weight_fc.bias[[0, 0]], m.weight_fc.bias[[0, 1]]];
        for (k, v) in features.iter().enumerate() {
            logits[0] += v * m.weight_fc.weight[[k, 0]];
            logits[1] += v * m.weight_fc.weight[[k, 1]];
        }
        let top = logits[0].max(logits[1]);
        let e0 = (logits[0] - top).exp();
        let e1 = (logits[1] - top).exp();
        let (wv, wt) = (e0 / (e0 + e1), e1 / (e0 + e1));
        for c in 0..d {
            fused_low[[r, c]] = fv[[r, c]] * ft[[r, c]] + fv[[r, c]] * wv + ft[[r, c]] * wt;
        }
        w_v.push(wv);
        w_t.push(wt);
    }
    let fused = ev + et + linear(&fused_low, &m.up);
    MfpReference { fused, w_v, w_t, sigma_v, sigma_t, fused_low }
}

/// `z ∘ softmax(z)` over the cells of each grid, per channel.
pub fn fovea(z: &Tensor, grids: &[(usize, Grid)]) -> Tensor {
    let mut out = Tensor::zeros(z.dim());
    for &(off, grid) in grids {
        for c in 0..z.ncols() {
            let mut top = f64::NEG_INFINITY;
            for i in off..off + grid.len() {
                top = top.max(z[[i, c]]);
            }
            let mut total = 0.0;
            for i in off..off + grid.len() {
                total += (z[[i, c]] - top).exp();
            }
            for i in off..off + grid.len() {
                out[[i, c]] = z[[i, c]] * (z[[i, c]] - top).exp() / total;
            }
        }
    }
    out
}

pub fn fep(f: &Fep<Param>, prompt_in: &Tensor, feat: &Tensor, grids: &[(usize, Grid)]) -> Tensor {
    let z = fovea(&linear(prompt_in, &f.down_prompt), grids);
    let s = z + linear(feat, &f.down_feat);
    linear(&s, &f.up)
}

/// One frozen encoder block applied to a plain token matrix.
pub fn block(foundation: &Foundation, index: usize, tokens: &Tensor, layout: SegmentLayout) -> Tensor {
    let mut g = Graph::new();
    let fw = foundation.bind(&mut g);
    let x = g.constant(tokens.clone());
    let seq = TokenSeq::new(&g, x, layout).unwrap();
    let out = encoder_forward(&mut g, &fw, &foundation.cfg, index, &seq).unwrap();
    g.value(out.data).clone()
}

fn rows(t: &Tensor, start: usize, len: usize) -> Tensor {
    t.slice(ndarray::s![start..start + len, ..]).to_owned()
}

fn with_rows(t: &Tensor, start: usize, rows: &Tensor) -> Tensor {
    let mut out = t.clone();
    out.slice_mut(ndarray::s![start..start + rows.nrows(), ..]).assign(rows);
    out
}

/// First stage on embedded token matrices:
/// `E_V^n = Enc^n(H_V^n) + UEP_V^n(H_V^n)`,
/// `H_T^n = Enc^{n-1} output with template rows IP^n(E_T^{n-1}, E_V^n)`,
/// `E_T^n = Enc^n(H_T^n) + UEP_T^n(H_T^n)`,
/// `H_V^{n+1} = E_V^n with template rows IP^n(E_V^n, E_T^n)`.
pub fn stage1(
    foundation: &Foundation,
    bank: &PrompterBank<Param>,
    cfg: &TrackerConfig,
    visible: &Tensor,
    thermal: &Tensor,
) -> (Tensor, Tensor) {
    let f = &cfg.foundation;
    let layout = SegmentLayout::image(Some(f.template_grid()), Some(f.search_grid())).with_prompt(cfg.prompt_tokens);
    let grids = layout.image_grids();
    let (z0, zn) = (cfg.prompt_tokens, f.template_tokens());
    let mut h_v = visible.clone();
    let mut e_t_prev = thermal.clone();
    for n in 1..=cfg.first_stage_blocks {
        let uep = bank.uep_layers.iter().position(|&l| l == n);
        let mut e_v = block(foundation, n, &h_v, layout);
        if let Some(k) = uep {
            e_v = e_v + uep_prompt(&bank.uep_visible[k], &h_v, cfg.prompt_tokens, &grids);
        }
        let z = ip(&bank.ip[n - 1], &rows(&e_t_prev, z0, zn), &rows(&e_v, z0, zn));
        let h_t = with_rows(&e_t_prev, z0, &z);
        let mut e_t = block(foundation, n, &h_t, layout);
        if let Some(k) = uep {
            e_t = e_t + uep_prompt(&bank.uep_thermal[k], &h_t, cfg.prompt_tokens, &grids);
        }
        let back = bank.ip_t2v.get(n - 1).unwrap_or(&bank.ip[n - 1]);
        let z = ip(back, &rows(&e_v, z0, zn), &rows(&e_t, z0, zn));
        h_v = with_rows(&e_v, z0, &z);
        e_t_prev = e_t;
    }
    (h_v, e_t_prev)
}

/// Middle fusion followed by the FEP-prompted second stage.
pub fn stage2(
    foundation: &Foundation,
    bank: &PrompterBank<Param>,
    cfg: &TrackerConfig,
    visible: &Tensor,
    thermal: &Tensor,
) -> Tensor {
    let f = &cfg.foundation;
    let p = cfg.prompt_tokens;
    let layout = SegmentLayout::image(Some(f.template_grid()), Some(f.search_grid())).with_prompt(p);
    let grids = layout.image_grids();
    let n_img = layout.image_len();
    let fused = mfp(&bank.mfp, &rows(visible, p, n_img), &rows(thermal, p, n_img)).fused;
    let prompt = bank.prompts.visible.as_ref() + bank.prompts.thermal.as_ref() + bank.prompts.fusion.as_ref();
    let mut h = Tensor::zeros((p + n_img, f.embed_dim));
    h.slice_mut(ndarray::s![..p, ..]).assign(&prompt);
    h.slice_mut(ndarray::s![p.., ..]).assign(&fused);
    let mut prev: Option<Tensor> = None;
    for (k, fep_k) in bank.fep.iter().enumerate() {
        let m = cfg.first_stage_blocks + k + 1;
        let e = block(foundation, m, &h, layout);
        let e_img = rows(&e, p, n_img);
        let prompt_in = prev.take().unwrap_or_else(|| rows(&h, p, n_img));
        let out = fep(fep_k, &prompt_in, &e_img, &grids);
        h = with_rows(&e, p, &(&e_img + &out));
        prev = Some(out);
    }
    h
}

/// Per-frame brute-force curve. A frame counts when `score` against the
/// visible annotation is `Some`; with `thermal` the better of both
/// scores is thresholded.
pub fn brute_force_curve(
    records: &[SequenceRecord],
    thresholds: &[f64],
    thermal: bool,
    score: impl Fn(&BoundingBox, &BoundingBox) -> Option<f64>,
    passes: impl Fn(f64, f64) -> bool,
    better: impl Fn(f64, f64) -> f64,
) -> (Vec<f64>, usize) {
    let mut values = Vec::new();
    let mut frames = 0;
    for (ti, &t) in thresholds.iter().enumerate() {
        let mut pass = 0usize;
        let mut total = 0usize;
        for r in records {
            for i in 0..r.predicted.len() {
                let v = score(&r.predicted[i], &r.gt_visible[i]);
                let th = if thermal { r.gt_thermal.as_ref().and_then(|g| score(&r.predicted[i], &g[i])) } else { None };
                let s = match (v, th) {
                    (Some(a), Some(b)) => better(a, b),
                    (Some(a), None) => a,
                    (None, _) => continue,
                };
                total += 1;
                if passes(s, t) {
                    pass += 1;
                }
            }
        }
        if ti == 0 {
            frames = total;
        }
        values.push(pass as f64 / total as f64);
    }
    (values, frames)
}

pub fn center_distance(p: &BoundingBox, g: &BoundingBox) -> Option<f64> {
    if g.x == 0.0 && g.y == 0.0 && g.w == 0.0 && g.h == 0.0 {
        return None;
    }
    let dx = (p.x + p.w / 2.0) - (g.x + g.w / 2.0);
    let dy = (p.y + p.h / 2.0) - (g.y + g.h / 2.0);
    Some((dx * dx + dy * dy).sqrt())
}

pub fn norm_center_distance(p: &BoundingBox, g: &BoundingBox) -> Option<f64> {
    if g.x == 0.0 && g.y == 0.0 && g.w == 0.0 && g.h == 0.0 {
        return None;
    }
    let dx = ((p.x + p.w / 2.0) - (g.x + g.w / 2.0)) / g.w;
    let dy = ((p.y + p.h / 2.0) - (g.y + g.h / 2.0)) / g.h;
    Some((dx * dx + dy * dy).sqrt())
}

pub fn overlap(p: &BoundingBox, g: &BoundingBox) -> Option<f64> {
    if g.x == 0.0 && g.y == 0.0 && g.w == 0.0 && g.h == 0.0 {
        return None;
    }
    let ix = ((p.x + p.w).min(g.x + g.w) - p.x.max(g.x)).max(0.0);
    let iy = ((p.y + p.h).min(g.y + g.h) - p.y.max(g.y)).max(0.0);
    let inter = ix * iy;
    let union = p.w * p.h + g.w * g.h - inter;
    Some(if union > 0.0 { (inter / union).min(1.0) } else { 0.0 })
}

/// Four sequences of 12 frames with random jitter, one absent-target
/// frame, one exact hit per sequence and thermal annotations that drift
/// away from the visible ones.
pub fn synthetic_benchmark(seed: u64) -> Vec<SequenceRecord> {
    let mut rng = rng(seed);
    (0..4)
        .map(|s| {
            let mut pred = Vec::new();
            let mut gt_v = Vec::new();
            let mut gt_t = Vec::new();
            for i in 0..12 {
                let gt = BoundingBox::new(
                    rng.random_range(20.0..200.0),
                    rng.random_range(20.0..200.0),
                    rng.random_range(8.0..60.0),
                    rng.random_range(8.0..60.0),
                );
                let jitter = 4.0 + 12.0 * s as f64;
                let p = if i == 0 {
                    gt
                } else {
                    BoundingBox::new(
                        gt.x + rng.random_range(-jitter..jitter),
                        gt.y + rng.random_range(-jitter..jitter),
                        gt.w * rng.random_range(0.7..1.3),
                        gt.h * rng.random_range(0.7..1.3),
                    )
                };
                let drift = rng.random_range(-10.0..10.0);
                if i == 5 && s == 1 {
                    gt_v.push(BoundingBox::default());
                } else {
                    gt_v.push(gt);
                }
                gt_t.push(gt.translated(drift, -drift));
                pred.push(p);
            }
            SequenceRecord::new(format!("seq{s}"), pred, gt_v).with_thermal(gt_t)
        })
        .collect()
}

pub const FD_STEP: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-5;
/// Gradients below this magnitude are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-3;

fn with_element(bank: &PrompterBank<Param>, tensor: usize, element: usize, delta: f64) -> PrompterBank<Param> {
    let mut k = 0;
    bank.map_named("", &mut |_, p| {
        let out = if k == tensor {
            let mut t = p.as_ref().clone();
            let v = t.iter_mut().nth(element).unwrap();
            *v += delta;
            Param::new(t)
        } else {
            p.clone()
        };
        k += 1;
        out
    })
}

/// Worst relative error over every prompter parameter, with the name of
/// the tensor it occurred in.
pub fn worst_gradient_error(cfg: &TrackerConfig, seed: u64) -> (f64, String) {
    let foundation = Foundation::random(cfg.foundation.clone(), seed).unwrap();
    let bank = perturbed_bank(cfg, seed, 0.1);
    let sample = generate_synthetic(seed, 1, &cfg.foundation).remove(0).sample;
    let w = LossWeights::default();
    let (_, grads) = sample_gradients(&foundation, &bank, cfg, &sample, &w).unwrap();

    let mut names = Vec::new();
    bank.visit("", &mut |n, p| names.push((n.to_string(), p.len())));
    let jobs: Vec<(usize, usize)> =
        names.iter().enumerate().flat_map(|(k, (_, len))| (0..*len).map(move |j| (k, j))).collect();
    let errors: Vec<(f64, usize)> = jobs
        .par_iter()
        .map(|&(k, j)| {
            let up = sample_loss(&foundation, &with_element(&bank, k, j, FD_STEP), cfg, &sample, &w).unwrap().total;
            let down = sample_loss(&foundation, &with_element(&bank, k, j, -FD_STEP), cfg, &sample, &w).unwrap().total;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = *grads[k].iter().nth(j).unwrap();
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
            (err, k)
        })
        .collect();
    let (err, k) = errors.into_iter().fold((0.0, 0), |a, b| if b.0 > a.0 { b } else { a });
    (err, names[k].0.clone())
}

/// The same prompter with the roles of the two modalities exchanged:
/// projections swapped, the `σ` blocks of the weight layer swapped and
/// its two outputs swapped.
pub fn mirrored_mfp(m: &Mfp<Param>) -> Mfp<Param> {
    let w = m.weight_fc.weight.as_ref();
    let d = w.nrows() / 5;
    let mut mw = w.clone();
    for r in 0..w.nrows() {
        let src = match r / d {
            0 => r + 4 * d,
            4 => r - 4 * d,
            _ => r,
        };
        mw[[r, 0]] = w[[src, 1]];
        mw[[r, 1]] = w[[src, 0]];
    }
    let b = m.weight_fc.bias.as_ref();
    let mut mb = b.clone();
    mb[[0, 0]] = b[[0, 1]];
    mb[[0, 1]] = b[[0, 0]];
    let mut out = m.clone();
    out.down_v = m.down_t.clone();
    out.down_t = m.down_v.clone();
    out.weight_fc.weight = Param::new(mw);
    out.weight_fc.bias = Param::new(mb);
    out
}

/// Brute-force evaluation of every curve.
pub fn curve_oracle(records: &[SequenceRecord], cfg: &EvalConfig) -> [(Vec<f64>, usize); 5] {
    let le = |s: f64, t: f64| s <= t;
    let gt = |s: f64, t: f64| s > t;
    let pr_t = cfg.precision.thresholds();
    let npr_t = cfg.norm_precision.thresholds();
    let sr_t = cfg.success.thresholds();
    [
        brute_force_curve(records, &pr_t, false, center_distance, le, f64::min),
        brute_force_curve(records, &npr_t, false, norm_center_distance, le, f64::min),
        brute_force_curve(records, &sr_t, false, overlap, gt, f64::max),
        brute_force_curve(records, &pr_t, true, center_distance, le, f64::min),
        brute_force_curve(records, &sr_t, true, overlap, gt, f64::max),
    ]
}
