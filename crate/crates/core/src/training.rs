//! Prompt tuning: box loss, AdamW on the prompter bank only, step-decay
//! schedule, and a synthetic RGB-T scene generator for desk-scale runs.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::evalkit::BoundingBox;
use crate::foundation::{Foundation, FoundationConfig, Image};
use crate::graph::{Graph, Tensor, Var};
use crate::params::Param;
use crate::pipeline::{check_foundation, forward, CallTrace, ModalFramePair, TrackerConfig};
use crate::prompters::PrompterBank;
use crate::{Error, Result};

/// Score clamp used by the focal loss.
const SCORE_EPS: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub giou: f64,
    pub l1: f64,
    pub focal_alpha: f64,
    pub focal_beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { giou: 2.0, l1: 5.0, focal_alpha: 2.0, focal_beta: 4.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub cls: f64,
    /// `1 − GIoU`.
    pub giou: f64,
    /// Mean absolute error of normalized `(cx, cy, w, h)`.
    pub l1: f64,
}

/// Gaussian center map over the search grid, `[N_X, 1]`, exactly 1 at the
/// cell holding the box center.
pub fn gaussian_target(gt: &BoundingBox, cfg: &FoundationConfig) -> Tensor {
    let grid = cfg.search_grid();
    let p = cfg.patch_size as f64;
    let (cx, cy) = gt.center();
    let ci = ((cy / p).floor() as isize).clamp(0, grid.rows as isize - 1);
    let cj = ((cx / p).floor() as isize).clamp(0, grid.cols as isize - 1);
    let sigma = ((gt.w / p) * (gt.h / p)).sqrt() / 6.0;
    let sigma = sigma.max(0.5);
    Tensor::from_shape_fn((grid.len(), 1), |(k, _)| {
        let di = (k / grid.cols) as isize - ci;
        let dj = (k % grid.cols) as isize - cj;
        if di == 0 && dj == 0 {
            1.0
        } else {
            (-((di * di + dj * dj) as f64) / (2.0 * sigma * sigma)).exp()
        }
    })
}

fn one_minus(g: &mut Graph, x: Var) -> Var {
    let n = g.scale(x, -1.0);
    g.offset(n, 1.0)
}

/// Focal loss against [`gaussian_target`], normalized by the number of
/// positive cells.
fn focal_loss(g: &mut Graph, score: Var, target: &Tensor, w: &LossWeights) -> Result<Var> {
    let pos = target.mapv(|t| if t == 1.0 { 1.0_f64 } else { 0.0 });
    let num_pos = pos.sum().max(1.0);
    let neg = target.mapv(|t| if t == 1.0 { 0.0 } else { (1.0 - t).powf(w.focal_beta) });
    let p = g.clamp(score, SCORE_EPS, 1.0 - SCORE_EPS);
    let q = one_minus(g, p);
    let ln_p = g.ln(p);
    let ln_q = g.ln(q);
    let pow = |g: &mut Graph, x: Var| -> Var {
        let l = g.ln(x);
        let s = g.scale(l, w.focal_alpha);
        g.exp(s)
    };
    let q_a = pow(g, q);
    let p_a = pow(g, p);
    let pos = g.constant(pos);
    let neg = g.constant(neg);
    let a = g.mul(q_a, ln_p)?;
    let a = g.mul(a, pos)?;
    let b = g.mul(p_a, ln_q)?;
    let b = g.mul(b, neg)?;
    let s = g.add(a, b)?;
    let s = g.sum(s);
    Ok(g.scale(s, -1.0 / num_pos))
}

/// `1 − GIoU` between a predicted `(cx, cy, w, h)` row and a fixed box.
fn giou_loss(g: &mut Graph, pred: Var, gt: &BoundingBox) -> Result<Var> {
    let col = |g: &mut Graph, i| g.slice_cols(pred, i, 1);
    let (cx, cy, w, h) = (col(g, 0)?, col(g, 1)?, col(g, 2)?, col(g, 3)?);
    let hw = g.scale(w, 0.5);
    let hh = g.scale(h, 0.5);
    let x1 = g.sub(cx, hw)?;
    let x2 = g.add(cx, hw)?;
    let y1 = g.sub(cy, hh)?;
    let y2 = g.add(cy, hh)?;
    let c = |g: &mut Graph, v: f64| g.scalar(v);
    let (gx1, gx2, gy1, gy2) = (c(g, gt.x), c(g, gt.right()), c(g, gt.y), c(g, gt.bottom()));
    let zero = c(g, 0.0);

    let ix1 = g.maximum(x1, gx1)?;
    let ix2 = g.minimum(x2, gx2)?;
    let iy1 = g.maximum(y1, gy1)?;
    let iy2 = g.minimum(y2, gy2)?;
    let iw = g.sub(ix2, ix1)?;
    let iw = g.maximum(iw, zero)?;
    let ih = g.sub(iy2, iy1)?;
    let ih = g.maximum(ih, zero)?;
    let inter = g.mul(iw, ih)?;
    let area = g.mul(w, h)?;
    let union = g.offset(area, gt.area());
    let union = g.sub(union, inter)?;
    let iou = g.div(inter, union)?;

    let ex1 = g.minimum(x1, gx1)?;
    let ex2 = g.maximum(x2, gx2)?;
    let ey1 = g.minimum(y1, gy1)?;
    let ey2 = g.maximum(y2, gy2)?;
    let ew = g.sub(ex2, ex1)?;
    let eh = g.sub(ey2, ey1)?;
    let enclose = g.mul(ew, eh)?;
    let gap = g.sub(enclose, union)?;
    let penalty = g.div(gap, enclose)?;
    let giou = g.sub(iou, penalty)?;
    Ok(one_minus(g, giou))
}

/// Builds the weighted loss on a graph. `pred` is `[1, 4]` as
/// `(cx, cy, w, h)` in search pixels, `score` is `[N_X, 1]` in `[0, 1]`.
pub fn loss_graph(
    g: &mut Graph,
    pred: Var,
    score: Var,
    gt: &BoundingBox,
    cfg: &FoundationConfig,
    w: &LossWeights,
) -> Result<(Var, LossParts)> {
    if !(gt.w > 0.0 && gt.h > 0.0) {
        return Err(Error::Input(format!("degenerate ground-truth box {gt:?}")));
    }
    if g.shape(pred) != (1, 4) || g.shape(score) != (cfg.search_tokens(), 1) {
        return Err(Error::Shape(format!(
            "loss expects pred [1, 4] and score [{}, 1], got {:?} and {:?}",
            cfg.search_tokens(),
            g.shape(pred),
            g.shape(score)
        )));
    }
    let target = gaussian_target(gt, cfg);
    let cls = focal_loss(g, score, &target, w)?;
    let giou = giou_loss(g, pred, gt)?;

    let (sh, sw) = (cfg.search_size.0 as f64, cfg.search_size.1 as f64);
    let norm = g.constant(Tensor::from_shape_vec((1, 4), vec![1.0 / sw, 1.0 / sh, 1.0 / sw, 1.0 / sh]).unwrap());
    let (gcx, gcy) = gt.center();
    let gt_norm = g.constant(Tensor::from_shape_vec((1, 4), vec![gcx / sw, gcy / sh, gt.w / sw, gt.h / sh]).unwrap());
    let p = g.mul(pred, norm)?;
    let d = g.sub(p, gt_norm)?;
    let d = g.abs(d);
    let l1 = g.mean(d);

    let a = g.scale(giou, w.giou);
    let b = g.scale(l1, w.l1);
    let total = g.add(cls, a)?;
    let total = g.add(total, b)?;
    let parts = LossParts { total: g.item(total), cls: g.item(cls), giou: g.item(giou), l1: g.item(l1) };
    Ok((total, parts))
}

/// Loss of a decoded box and score map, both in search coordinates.
pub fn compute_loss(
    pred: &BoundingBox,
    score_map: &Tensor,
    gt: &BoundingBox,
    cfg: &FoundationConfig,
    w: &LossWeights,
) -> Result<LossParts> {
    let mut g = Graph::new();
    let (cx, cy) = pred.center();
    let p = g.constant(Tensor::from_shape_vec((1, 4), vec![cx, cy, pred.w, pred.h]).unwrap());
    let flat = score_map.iter().copied().collect::<Vec<_>>();
    let n = flat.len();
    let s = g.constant(Tensor::from_shape_vec((n, 1), flat).unwrap());
    loss_graph(&mut g, p, s, gt, cfg, w).map(|(_, parts)| parts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub decay_epoch: usize,
    pub decay_factor: f64,
    pub seed: u64,
    /// Stops early when set.
    pub max_steps: Option<usize>,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 60,
            samples_per_epoch: 60_000,
            learning_rate: 4e-4,
            weight_decay: 1e-4,
            decay_epoch: 48,
            decay_factor: 0.1,
            seed: 0,
            max_steps: None,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale run: 200 steps of batch 8 at a constant rate. The toy
    /// model is far smaller than the reference one and needs a larger step.
    pub fn toy() -> Self {
        Self {
            batch_size: 8,
            epochs: 2,
            samples_per_epoch: 1600,
            learning_rate: 5e-3,
            decay_epoch: 1,
            decay_factor: 1.0,
            max_steps: Some(200),
            ..Self::default()
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.batch_size == 0 {
            out.push("batch_size must be positive".into());
        }
        if self.samples_per_epoch == 0 {
            out.push("samples_per_epoch must be positive".into());
        }
        if self.decay_epoch >= self.epochs {
            out.push(format!("decay_epoch {} must be below epochs {}", self.decay_epoch, self.epochs));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
            ("decay_factor", self.decay_factor),
            ("lambda_giou", self.loss.giou),
            ("lambda_l1", self.loss.l1),
            ("focal_alpha", self.loss.focal_alpha),
            ("focal_beta", self.loss.focal_beta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                out.push(format!("{name} must be a non-negative number, got {v}"));
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

    pub fn steps_per_epoch(&self) -> usize {
        (self.samples_per_epoch / self.batch_size.max(1)).max(1)
    }

    pub fn total_steps(&self) -> usize {
        let full = self.epochs * self.steps_per_epoch();
        self.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if epoch < self.decay_epoch {
            self.learning_rate
        } else {
            self.learning_rate * self.decay_factor
        }
    }

    pub fn lr_at_step(&self, step: usize) -> f64 {
        self.lr_at_epoch(step / self.steps_per_epoch())
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl AdamW {
    pub fn new(bank: &PrompterBank<Param>) -> Self {
        let mut m = Vec::new();
        bank.visit("", &mut |_, p| m.push(Tensor::zeros(p.raw_dim())));
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, v: m.clone(), m, t: 0 }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// `grads` in [`PrompterBank::visit`] order.
    pub fn step(&mut self, bank: &mut PrompterBank<Param>, grads: &[Tensor], lr: f64, weight_decay: f64) {
        assert_eq!(grads.len(), self.m.len(), "one gradient per bank tensor");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let mut i = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        bank.visit_mut("", &mut |_, p| {
            let g = &grads[i];
            let m = &mut ms[i];
            let v = &mut vs[i];
            let p = Arc::make_mut(p);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                *p -= lr * (update + weight_decay * *p);
            });
            i += 1;
        });
    }
}

/// One labelled training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub template: ModalFramePair,
    pub search: ModalFramePair,
    /// Target box in search-region pixels.
    pub gt: BoundingBox,
}

/// Loss and bank gradients (in visit order) for one sample.
pub fn sample_gradients(
    foundation: &Foundation,
    bank: &PrompterBank<Param>,
    cfg: &TrackerConfig,
    sample: &TrainingSample,
    w: &LossWeights,
) -> Result<(LossParts, Vec<Tensor>)> {
    let mut g = Graph::new();
    let fw = foundation.bind(&mut g);
    let b = bank.bind(&mut g);
    let out = forward(&mut g, &fw, &b, cfg, &sample.template, &sample.search, &mut CallTrace::default())?;
    let (loss, parts) = loss_graph(&mut g, out.pred, out.score, &sample.gt, &cfg.foundation, w)?;
    let grads = g.backward(loss)?;
    let mut out = Vec::new();
    b.visit("", &mut |_, v| out.push(grads.get_or_zeros(*v, g.shape(*v))));
    Ok((parts, out))
}

/// Loss of one sample without gradients.
pub fn sample_loss(
    foundation: &Foundation,
    bank: &PrompterBank<Param>,
    cfg: &TrackerConfig,
    sample: &TrainingSample,
    w: &LossWeights,
) -> Result<LossParts> {
    let mut g = Graph::new();
    let fw = foundation.bind(&mut g);
    let b = bank.bind_constants(&mut g);
    let out = forward(&mut g, &fw, &b, cfg, &sample.template, &sample.search, &mut CallTrace::default())?;
    loss_graph(&mut g, out.pred, out.score, &sample.gt, &cfg.foundation, w).map(|(_, p)| p)
}

/// Mean total loss over a data set.
pub fn dataset_loss(
    foundation: &Foundation,
    bank: &PrompterBank<Param>,
    cfg: &TrackerConfig,
    data: &[TrainingSample],
    w: &LossWeights,
) -> Result<f64> {
    let losses = data
        .par_iter()
        .map(|s| sample_loss(foundation, bank, cfg, s, w).map(|p| p.total))
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Trainable state: the bank and its optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub bank: PrompterBank<Param>,
    pub opt: AdamW,
    pub step: usize,
}

impl TrainState {
    pub fn new(bank: PrompterBank<Param>) -> Self {
        let opt = AdamW::new(&bank);
        Self { bank, opt, step: 0 }
    }
}

/// One optimizer step on the mean loss of `batch`. Only the bank moves.
/// Per-sample gradients run in parallel and are summed in batch order, so
/// the result does not depend on scheduling.
pub fn training_step(
    state: &mut TrainState,
    foundation: &Foundation,
    cfg: &TrackerConfig,
    batch: &[TrainingSample],
    tc: &TrainConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Input("empty training batch".into()));
    }
    check_foundation(foundation, cfg)?;
    let results = batch
        .par_iter()
        .map(|s| sample_gradients(foundation, &state.bank, cfg, s, &tc.loss))
        .collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grads: Vec<Tensor> = Vec::new();
    for (i, (parts, g)) in results.into_iter().enumerate() {
        if !parts.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "step {} sample {i}: loss {} (cls {}, giou {}, l1 {})",
                state.step, parts.total, parts.cls, parts.giou, parts.l1
            )));
        }
        loss += parts.total * scale;
        if grads.is_empty() {
            grads = g.into_iter().map(|t| t * scale).collect();
        } else {
            for (acc, t) in grads.iter_mut().zip(g) {
                acc.scaled_add(scale, &t);
            }
        }
    }
    if let Some(k) = grads.iter().position(|t| t.iter().any(|v| !v.is_finite())) {
        let mut names = Vec::new();
        state.bank.visit("", &mut |n, _| names.push(n.to_string()));
        return Err(Error::NonFinite(format!("step {}: gradient of {}", state.step, names[k])));
    }
    let lr = tc.lr_at_step(state.step);
    state.opt.step(&mut state.bank, &grads, lr, tc.weight_decay);
    state.step += 1;
    Ok(loss)
}

/// Deterministic batch order: reshuffles the data set every pass.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub fn new(len: usize, seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), order: (0..len).collect(), pos: len }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size && !self.order.is_empty() {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Runs `tc.total_steps()` steps over `data`, reporting each step's batch
/// loss to `on_step`.
pub fn train(
    state: &mut TrainState,
    foundation: &Foundation,
    cfg: &TrackerConfig,
    data: &[TrainingSample],
    tc: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<()> {
    tc.validate()?;
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let mut sampler = BatchSampler::new(data.len(), tc.seed);
    for _ in 0..tc.total_steps() {
        let batch: Vec<TrainingSample> =
            sampler.next_batch(tc.batch_size).into_iter().map(|i| data[i].clone()).collect();
        let loss = training_step(state, foundation, cfg, &batch, tc)?;
        on_step(state.step, loss);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneKind {
    Normal,
    /// Visible modality saturated to a nearly constant image.
    VisibleWashedOut,
    /// Thermal modality without contrast.
    ThermalFlat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub kind: SceneKind,
    pub sample: TrainingSample,
}

struct Appearance {
    target_rgb: [f64; 3],
    background_rgb: [f64; 3],
    gradient: [f64; 2],
    target_heat: f64,
    background_heat: f64,
}

fn render(
    rng: &mut ChaCha8Rng,
    (h, w): (usize, usize),
    target: &BoundingBox,
    look: &Appearance,
    kind: SceneKind,
) -> ModalFramePair {
    let noise = Normal::new(0.0, 1.0).unwrap();
    let inside = |y: usize, x: usize| {
        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
        fx >= target.x && fx < target.right() && fy >= target.y && fy < target.bottom()
    };
    let mut visible = Image::zeros((h, w, 3));
    let mut thermal = Image::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let on = inside(y, x);
            let ramp = look.gradient[0] * x as f64 / w as f64 + look.gradient[1] * y as f64 / h as f64;
            for c in 0..3 {
                visible[[y, x, c]] = match kind {
                    SceneKind::VisibleWashedOut => 0.95 + 0.01 * noise.sample(rng),
                    _ => {
                        let base = if on { look.target_rgb[c] } else { look.background_rgb[c] + ramp };
                        base + 0.03 * noise.sample(rng)
                    }
                };
            }
            let heat = match kind {
                SceneKind::ThermalFlat => 0.5 + 0.01 * noise.sample(rng),
                _ => (if on { look.target_heat } else { look.background_heat }) + 0.02 * noise.sample(rng),
            };
            for c in 0..3 {
                thermal[[y, x, c]] = heat;
            }
        }
    }
    ModalFramePair { visible, thermal }
}

/// Deterministic synthetic pairs. Sample `i` is a normal scene unless
/// `i % 3` selects a washed-out visible (1) or flat thermal (2) scene. The
/// template shows the target centered; the search region shows it at a
/// random position, fully inside the region.
pub fn generate_synthetic(seed: u64, n: usize, cfg: &FoundationConfig) -> Vec<SyntheticSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (th, tw) = cfg.template_size;
    let (sh, sw) = cfg.search_size;
    (0..n)
        .map(|i| {
            let kind = match i % 3 {
                0 => SceneKind::Normal,
                1 => SceneKind::VisibleWashedOut,
                _ => SceneKind::ThermalFlat,
            };
            let tw_px = (tw as f64 / 2.0).floor();
            let th_px = (th as f64 / 2.0).floor();
            let bw = rng.random_range((tw_px / 2.0).max(1.0)..=tw_px).round();
            let bh = rng.random_range((th_px / 2.0).max(1.0)..=th_px).round();
            let look = Appearance {
                target_rgb: [rng.random_range(0.5..1.0), rng.random_range(0.0..0.5), rng.random_range(0.0..1.0)],
                background_rgb: [rng.random_range(0.0..0.4), rng.random_range(0.2..0.6), rng.random_range(0.0..0.4)],
                gradient: [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)],
                target_heat: rng.random_range(0.75..1.0),
                background_heat: rng.random_range(0.1..0.3),
            };
            let z_box = BoundingBox::from_center(tw as f64 / 2.0, th as f64 / 2.0, bw, bh);
            let x0 = rng.random_range(0..=(sw as f64 - bw) as usize) as f64;
            let y0 = rng.random_range(0..=(sh as f64 - bh) as usize) as f64;
            let gt = BoundingBox::new(x0, y0, bw, bh);
            let template = render(&mut rng, (th, tw), &z_box, &look, kind);
            let search = render(&mut rng, (sh, sw), &gt, &look, kind);
            SyntheticSample { kind, sample: TrainingSample { template, search, gt } }
        })
        .collect()
}
