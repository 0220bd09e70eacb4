//! Frozen one-stream tracking foundation: patch embedding, a stack of
//! pre-norm transformer encoder blocks over the joint template+search token
//! sequence, and a center-map box head.
//!
//! Weights are always bound into a [`Graph`] as constants, so no gradient
//! can reach them.

use std::ops::Range;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::evalkit::BoundingBox;
use crate::graph::{Graph, Grid, Tensor, Var};
use crate::params::{
    fan_in_uniform, normal, numel, param_leaves, param_tree, to_f32_grid, Checksum, Linear, Norm, Param, Shape,
};
use crate::{Error, Result};

/// Image tensor `[H, W, C]`.
pub type Image = Array3<f64>;

/// Input channels expected by the patch embedding.
pub const IMAGE_CHANNELS: usize = 3;

/// Size logits are clamped to this magnitude before exponentiation.
const SIZE_LOGIT_LIMIT: f64 = 8.0;

#[derive(Clone, Debug, PartialEq)]
pub struct FoundationConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    /// `(height, width)` in pixels.
    pub template_size: (usize, usize),
    /// `(height, width)` in pixels.
    pub search_size: (usize, usize),
}

impl FoundationConfig {
    /// ViT-Base sized backbone with 128/256 template/search crops.
    pub fn reference() -> Self {
        Self {
            patch_size: 16,
            embed_dim: 768,
            num_blocks: 12,
            num_heads: 12,
            mlp_ratio: 4.0,
            template_size: (128, 128),
            search_size: (256, 256),
        }
    }

    /// Small backbone used by tests and the toy benchmark.
    pub fn toy() -> Self {
        Self {
            patch_size: 16,
            embed_dim: 16,
            num_blocks: 4,
            num_heads: 2,
            mlp_ratio: 2.0,
            template_size: (32, 32),
            search_size: (64, 64),
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.patch_size == 0 {
            out.push("patch_size must be positive".to_string());
            return out;
        }
        for (name, (h, w)) in [("template_size", self.template_size), ("search_size", self.search_size)] {
            if h == 0 || w == 0 || h % self.patch_size != 0 || w % self.patch_size != 0 {
                out.push(format!("{name} {h}x{w} must be a positive multiple of patch_size {}", self.patch_size));
            }
        }
        if self.embed_dim == 0 || self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            out.push(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.num_blocks < 2 {
            out.push(format!("num_blocks {} must be at least 2", self.num_blocks));
        }
        if !(self.mlp_ratio > 0.0 && self.mlp_ratio.is_finite()) {
            out.push(format!("mlp_ratio {} must be positive", self.mlp_ratio));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn template_grid(&self) -> Grid {
        Grid::new(self.template_size.0 / self.patch_size, self.template_size.1 / self.patch_size)
    }

    pub fn search_grid(&self) -> Grid {
        Grid::new(self.search_size.0 / self.patch_size, self.search_size.1 / self.patch_size)
    }

    /// `N_Z`.
    pub fn template_tokens(&self) -> usize {
        self.template_grid().len()
    }

    /// `N_X`.
    pub fn search_tokens(&self) -> usize {
        self.search_grid().len()
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Template,
    Search,
}

/// Token counts of the `(prompt | template | search)` segments, in that
/// order. Template and search carry their spatial grids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentLayout {
    pub prompt: usize,
    pub template: Option<Grid>,
    pub search: Option<Grid>,
}

impl SegmentLayout {
    pub fn image(template: Option<Grid>, search: Option<Grid>) -> Self {
        Self { prompt: 0, template, search }
    }

    pub fn with_prompt(self, prompt: usize) -> Self {
        Self { prompt, ..self }
    }

    pub fn template_len(&self) -> usize {
        self.template.map_or(0, |g| g.len())
    }

    pub fn search_len(&self) -> usize {
        self.search.map_or(0, |g| g.len())
    }

    pub fn image_len(&self) -> usize {
        self.template_len() + self.search_len()
    }

    pub fn total(&self) -> usize {
        self.prompt + self.image_len()
    }

    pub fn prompt_range(&self) -> Range<usize> {
        0..self.prompt
    }

    pub fn template_range(&self) -> Range<usize> {
        self.prompt..self.prompt + self.template_len()
    }

    pub fn search_range(&self) -> Range<usize> {
        let start = self.prompt + self.template_len();
        start..start + self.search_len()
    }

    /// Grids of the image segments with their row offset inside the image
    /// part (the rows after the prompt segment).
    pub fn image_grids(&self) -> Vec<(usize, Grid)> {
        let mut out = Vec::with_capacity(2);
        if let Some(t) = self.template {
            out.push((0, t));
        }
        if let Some(s) = self.search {
            out.push((self.template_len(), s));
        }
        out
    }
}

/// Ordered `[num_tokens, D]` token matrix bound into a graph, with its
/// segment layout.
#[derive(Clone, Copy, Debug)]
pub struct TokenSeq {
    pub data: Var,
    pub layout: SegmentLayout,
}

impl TokenSeq {
    pub fn new(g: &Graph, data: Var, layout: SegmentLayout) -> Result<Self> {
        let rows = g.shape(data).0;
        if rows != layout.total() {
            return Err(Error::Shape(format!(
                "token matrix has {rows} rows but the segment layout covers {}",
                layout.total()
            )));
        }
        Ok(Self { data, layout })
    }

    pub fn dim(&self, g: &Graph) -> usize {
        g.shape(self.data).1
    }

    /// Joins an embedded template and an embedded search sequence.
    pub fn join(g: &mut Graph, template: &TokenSeq, search: &TokenSeq) -> Result<Self> {
        if template.layout.prompt != 0 || search.layout.prompt != 0 {
            return Err(Error::Shape("join expects prompt-free sequences".into()));
        }
        let data = g.concat_rows(&[template.data, search.data])?;
        let layout = SegmentLayout::image(
            template.layout.template.or(template.layout.search),
            search.layout.search.or(search.layout.template),
        );
        Self::new(g, data, layout)
    }

    /// Prompt rows, if any.
    pub fn prompt_part(&self, g: &mut Graph) -> Result<Option<Var>> {
        if self.layout.prompt == 0 {
            return Ok(None);
        }
        g.slice_rows(self.data, 0, self.layout.prompt).map(Some)
    }

    /// Template and search rows.
    pub fn image_part(&self, g: &mut Graph) -> Result<Var> {
        if self.layout.prompt == 0 {
            return Ok(self.data);
        }
        g.slice_rows(self.data, self.layout.prompt, self.layout.image_len())
    }

    pub fn template_part(&self, g: &mut Graph) -> Result<Var> {
        let r = self.layout.template_range();
        g.slice_rows(self.data, r.start, r.len())
    }

    pub fn search_part(&self, g: &mut Graph) -> Result<Var> {
        let r = self.layout.search_range();
        g.slice_rows(self.data, r.start, r.len())
    }

    /// Reassembles a sequence from an optional prompt block and image rows.
    pub fn from_parts(g: &mut Graph, prompt: Option<Var>, image: Var, layout: SegmentLayout) -> Result<Self> {
        let data = match prompt {
            Some(p) => g.concat_rows(&[p, image])?,
            None => image,
        };
        Self::new(g, data, layout)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock<T> {
    pub norm1: Norm<T>,
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub norm2: Norm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

param_tree!(EncoderBlock { norm1, qkv, proj, norm2, fc1, fc2 });

#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights<T> {
    /// Center-classification logit per search token.
    pub score: Linear<T>,
    /// Sub-cell offset of the center, in cells, relative to the cell center.
    pub offset: Linear<T>,
    /// Log box size in cells.
    pub size: Linear<T>,
}

param_tree!(HeadWeights { score, offset, size });

#[derive(Clone, Debug, PartialEq)]
pub struct PositionTables<T> {
    pub template: T,
    pub search: T,
}

param_leaves!(PositionTables { template, search });

#[derive(Clone, Debug, PartialEq)]
pub struct FoundationWeights<T> {
    pub patch_embed: Linear<T>,
    pub pos_embed: PositionTables<T>,
    pub blocks: Vec<EncoderBlock<T>>,
    pub norm: Norm<T>,
    pub head: HeadWeights<T>,
}

impl<T> FoundationWeights<T> {
    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
        use crate::params::join;
        self.patch_embed.visit(&join(prefix, "patch_embed"), f);
        self.pos_embed.visit(&join(prefix, "pos_embed"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit(&join(prefix, "norm"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        use crate::params::join;
        self.patch_embed.visit_mut(&join(prefix, "patch_embed"), f);
        self.pos_embed.visit_mut(&join(prefix, "pos_embed"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }

    pub fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> FoundationWeights<U> {
        use crate::params::join;
        FoundationWeights {
            patch_embed: self.patch_embed.map_named(&join(prefix, "patch_embed"), f),
            pos_embed: self.pos_embed.map_named(&join(prefix, "pos_embed"), f),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map_named(&join(prefix, &format!("blocks.{i}")), f))
                .collect(),
            norm: self.norm.map_named(&join(prefix, "norm"), f),
            head: self.head.map_named(&join(prefix, "head"), f),
        }
    }
}

impl FoundationWeights<Shape> {
    pub fn plan(cfg: &FoundationConfig) -> Self {
        let d = cfg.embed_dim;
        let hidden = cfg.mlp_hidden();
        let p = cfg.patch_size;
        let block = EncoderBlock {
            norm1: Norm::shape(d),
            qkv: Linear::shape(d, 3 * d),
            proj: Linear::shape(d, d),
            norm2: Norm::shape(d),
            fc1: Linear::shape(d, hidden),
            fc2: Linear::shape(hidden, d),
        };
        FoundationWeights {
            patch_embed: Linear::shape(p * p * IMAGE_CHANNELS, d),
            pos_embed: PositionTables { template: [cfg.template_tokens(), d], search: [cfg.search_tokens(), d] },
            blocks: vec![block; cfg.num_blocks],
            norm: Norm::shape(d),
            head: HeadWeights { score: Linear::shape(d, 1), offset: Linear::shape(d, 2), size: Linear::shape(d, 2) },
        }
    }

    pub fn count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, s| n += numel(s));
        n
    }
}

/// The frozen foundation model. Immutable after construction except
/// through [`crate::archive::apply_archive`].
#[derive(Clone, Debug)]
pub struct Foundation {
    pub cfg: FoundationConfig,
    pub weights: FoundationWeights<Param>,
}

impl Foundation {
    /// Randomly initialized foundation. Values lie on the `f32` grid so
    /// single-precision archives reproduce them bitwise.
    pub fn random(cfg: FoundationConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = FoundationWeights::plan(&cfg).map_named("", &mut |name, shape| {
            let t = if name.ends_with(".gamma") {
                Tensor::ones((shape[0], shape[1]))
            } else if name.ends_with(".beta") || name.ends_with(".bias") {
                Tensor::zeros((shape[0], shape[1]))
            } else if name.starts_with("pos_embed") {
                normal(&mut rng, *shape, 0.02)
            } else {
                fan_in_uniform(&mut rng, *shape, shape[0])
            };
            Param::new(to_f32_grid(t))
        });
        Ok(Self { cfg, weights })
    }

    /// Binds every weight as a graph constant.
    pub fn bind(&self, g: &mut Graph) -> FoundationWeights<Var> {
        self.weights.map_named("", &mut |_, p| g.constant_shared(p))
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.weights.visit("", &mut |_, p| n += p.len());
        n
    }

    pub fn checksum(&self) -> String {
        let mut c = Checksum::default();
        self.weights.visit("", &mut |name, p| c.update(name, p));
        c.finish()
    }
}

/// Splits an image into non-overlapping patches: `[n_patches, p·p·C]`,
/// patches in row-major grid order, columns ordered `(py, px, c)`.
pub fn patchify(image: &Image, patch: usize) -> Result<Tensor> {
    let (h, w, c) = image.dim();
    if h % patch != 0 {
        return Err(Error::Dimension { axis: "H", size: h, patch });
    }
    if w % patch != 0 {
        return Err(Error::Dimension { axis: "W", size: w, patch });
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Tensor::zeros((gh * gw, patch * patch * c));
    for gy in 0..gh {
        for gx in 0..gw {
            let mut row = out.row_mut(gy * gw + gx);
            let mut k = 0;
            for py in 0..patch {
                for px in 0..patch {
                    for ch in 0..c {
                        row[k] = image[[gy * patch + py, gx * patch + px, ch]];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Embeds a template or search image into position-encoded tokens.
pub fn patch_embed(
    g: &mut Graph,
    w: &FoundationWeights<Var>,
    cfg: &FoundationConfig,
    image: &Image,
    role: Role,
) -> Result<TokenSeq> {
    let (h, wd, c) = image.dim();
    let patches = patchify(image, cfg.patch_size)?;
    if c != IMAGE_CHANNELS {
        return Err(Error::Input(format!("expected {IMAGE_CHANNELS} image channels, found {c}")));
    }
    let (expected, pos) = match role {
        Role::Template => (cfg.template_size, w.pos_embed.template),
        Role::Search => (cfg.search_size, w.pos_embed.search),
    };
    if (h, wd) != expected {
        return Err(Error::Shape(format!(
            "{role:?} image is {h}x{wd}, configured size is {}x{}",
            expected.0, expected.1
        )));
    }
    let grid = Grid::new(h / cfg.patch_size, wd / cfg.patch_size);
    let x = g.constant(patches);
    let tokens = w.patch_embed.forward(g, x)?;
    let data = g.add(tokens, pos)?;
    let layout = match role {
        Role::Template => SegmentLayout::image(Some(grid), None),
        Role::Search => SegmentLayout::image(None, Some(grid)),
    };
    TokenSeq::new(g, data, layout)
}

/// Multi-head self-attention over all tokens of `x`.
fn attention(g: &mut Graph, block: &EncoderBlock<Var>, heads: usize, x: Var) -> Result<Var> {
    let d = g.shape(x).1;
    let dh = d / heads;
    let qkv = block.qkv.forward(g, x)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = g.slice_cols(qkv, h * dh, dh)?;
        let k = g.slice_cols(qkv, d + h * dh, dh)?;
        let v = g.slice_cols(qkv, 2 * d + h * dh, dh)?;
        let kt = g.transpose(k);
        let logits = g.matmul(q, kt)?;
        let logits = g.scale(logits, scale);
        let attn = g.softmax_rows(logits);
        outs.push(g.matmul(attn, v)?);
    }
    let merged = g.concat_cols(&outs)?;
    block.proj.forward(g, merged)
}

/// One pre-norm encoder block on a raw `[N, D]` token matrix.
pub fn block_forward(g: &mut Graph, block: &EncoderBlock<Var>, heads: usize, x: Var) -> Result<Var> {
    let d = g.shape(block.norm1.gamma).1;
    if g.shape(x).1 != d {
        return Err(Error::Shape(format!("encoder block expects dim {d}, tokens have {}", g.shape(x).1)));
    }
    let n1 = block.norm1.forward(g, x)?;
    let a = attention(g, block, heads, n1)?;
    let x = g.add(x, a)?;
    let n2 = block.norm2.forward(g, x)?;
    let h = block.fc1.forward(g, n2)?;
    let h = g.gelu(h);
    let m = block.fc2.forward(g, h)?;
    g.add(x, m)
}

/// Runs encoder block `block_index` (1-based) on a token sequence.
pub fn encoder_forward(
    g: &mut Graph,
    w: &FoundationWeights<Var>,
    cfg: &FoundationConfig,
    block_index: usize,
    tokens: &TokenSeq,
) -> Result<TokenSeq> {
    if block_index == 0 || block_index > w.blocks.len() {
        return Err(Error::Shape(format!("block index {block_index} outside 1..={}", w.blocks.len())));
    }
    let out = block_forward(g, &w.blocks[block_index - 1], cfg.num_heads, tokens.data)?;
    TokenSeq::new(g, out, tokens.layout)
}

/// Head outputs for one search region.
#[derive(Clone, Debug)]
pub struct HeadOutput {
    /// Sigmoid center scores, `[N_X, 1]`.
    pub score: Var,
    /// Raw center offsets in cells, `[N_X, 2]` as `(x, y)`.
    pub offset: Var,
    /// Raw log sizes in cells, `[N_X, 2]` as `(w, h)`.
    pub log_size: Var,
    /// Selected cell `(row, col)`.
    pub cell: (usize, usize),
    /// Decoded, unclipped `(cx, cy, w, h)` in search pixels, `[1, 4]`.
    pub pred: Var,
    /// Decoded box clipped to the search region.
    pub bbox: BoundingBox,
    /// Score map reshaped to the search grid.
    pub score_map: Tensor,
}

/// First maximum in row-major order.
pub fn argmax_first(values: &Tensor) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_v = f64::NEG_INFINITY;
    for ((r, c), &v) in values.indexed_iter() {
        if v > best_v {
            best_v = v;
            best = (r, c);
        }
    }
    best
}

/// Estimates the target box from exactly `N_X` search tokens.
pub fn head_forward(
    g: &mut Graph,
    w: &FoundationWeights<Var>,
    cfg: &FoundationConfig,
    search_tokens: &TokenSeq,
) -> Result<HeadOutput> {
    let grid = cfg.search_grid();
    let n = g.shape(search_tokens.data).0;
    if n != grid.len() || search_tokens.layout.prompt != 0 || search_tokens.layout.template.is_some() {
        return Err(Error::Shape(format!(
            "head expects exactly {} search tokens, got {n} rows with layout {:?}",
            grid.len(),
            search_tokens.layout
        )));
    }
    let x = w.norm.forward(g, search_tokens.data)?;
    let logits = w.head.score.forward(g, x)?;
    let score = g.sigmoid(logits);
    let offset = w.head.offset.forward(g, x)?;
    let log_size = w.head.size.forward(g, x)?;

    let score_map = g
        .value(score)
        .clone()
        .into_shape_with_order((grid.rows, grid.cols))
        .map_err(|e| Error::Shape(e.to_string()))?;
    let cell = argmax_first(&score_map);
    let idx = cell.0 * grid.cols + cell.1;
    let patch = cfg.patch_size as f64;

    let off = g.slice_rows(offset, idx, 1)?;
    let cell_center =
        g.constant(Tensor::from_shape_vec((1, 2), vec![cell.1 as f64 + 0.5, cell.0 as f64 + 0.5]).unwrap());
    let center = g.add(off, cell_center)?;
    let center = g.scale(center, patch);
    let ls = g.slice_rows(log_size, idx, 1)?;
    let ls = g.clamp(ls, -SIZE_LOGIT_LIMIT, SIZE_LOGIT_LIMIT);
    let size = g.exp(ls);
    let size = g.scale(size, patch);
    let pred = g.concat_cols(&[center, size])?;

    let p = g.value(pred);
    let bbox = BoundingBox::from_center(p[[0, 0]], p[[0, 1]], p[[0, 2]], p[[0, 3]])
        .clip_to(cfg.search_size.1 as f64, cfg.search_size.0 as f64);
    Ok(HeadOutput { score, offset, log_size, cell, pred, bbox, score_map })
}
