//! The masked point transformer and its two in-context assemblies.
//!
//! Both variants see the same four token segments, `[prompt input | prompt
//! target | query input | query target]`, each `N` patches long.
//!
//! * [`Variant::Sep`] runs the input segments and the target segments as two
//!   streams through the first `merge_block` encoder blocks (shared weights),
//!   averages them position-wise and finishes the stack on the fused
//!   sequence.
//! * [`Variant::Cat`] runs the single concatenated `4N` sequence.
//!
//! Masked positions carry a learned mask token and the positional embedding
//! of their aligned *input* center, so no coordinate of a masked target patch
//! ever enters the network.

mod layers;
mod params;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use layers::{Block, BlockCache, Init, LayerNorm, Linear, NormCache, PatchEmbed, PatchEmbedCache, PosEmbed, PosEmbedCache};
pub use params::{ParamId, ParamStore};

use crate::geometry::Point;
use crate::linalg::Real;
use crate::tokenize::{MaskPlan, PatchBatch, Segment};
use crate::{rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Variant {
    #[default]
    Sep,
    Cat,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Sep => "sep",
            Variant::Cat => "cat",
        }
    }

    /// Training mask ratio used when none is configured.
    pub fn default_mask_ratio(self) -> f64 {
        match self {
            Variant::Sep => 0.7,
            Variant::Cat => 0.6,
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ModelConfig {
    pub variant: Variant,
    pub dim: usize,
    pub enc_depth: usize,
    pub dec_depth: usize,
    pub heads: usize,
    /// Number of leading encoder blocks run per stream before fusion (sep only).
    pub merge_block: usize,
    pub mlp_ratio: usize,
    /// Width of the point-wise patch MLP; its second layer is twice as wide.
    pub embed_hidden: usize,
    pub pos_hidden: usize,
    /// Patches per cloud (`N`).
    pub n_patches: usize,
    /// Points per patch (`M`).
    pub patch_size: usize,
    pub mask_ratio: f64,
    pub role_embedding: bool,
}

impl ModelConfig {
    /// Full-size architecture: width 384, 6 + 6 blocks, 6 heads.
    pub fn full(variant: Variant) -> Self {
        Self {
            variant,
            dim: 384,
            enc_depth: 6,
            dec_depth: 6,
            heads: 6,
            merge_block: 3,
            mlp_ratio: 4,
            embed_hidden: 128,
            pos_hidden: 128,
            n_patches: 64,
            patch_size: 32,
            mask_ratio: variant.default_mask_ratio(),
            role_embedding: false,
        }
    }

    /// Laptop-scale architecture: width 128, 3 + 3 blocks.
    pub fn desk(variant: Variant) -> Self {
        Self { dim: 128, enc_depth: 3, dec_depth: 3, heads: 4, embed_hidden: 32, pos_hidden: 64, ..Self::full(variant) }
    }

    /// Gradient-check scale: width 16, 1 + 1 blocks, 4 patches of 4 points.
    pub fn tiny(variant: Variant) -> Self {
        Self {
            dim: 16,
            enc_depth: 1,
            dec_depth: 1,
            heads: 2,
            merge_block: 1,
            mlp_ratio: 2,
            embed_hidden: 8,
            pos_hidden: 8,
            n_patches: 4,
            patch_size: 4,
            ..Self::full(variant)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.merge_block > self.enc_depth {
            return bad(format!("merge_block {} exceeds enc_depth {}", self.merge_block, self.enc_depth));
        }
        if self.n_patches == 0 || self.patch_size == 0 || self.mlp_ratio == 0 || self.embed_hidden == 0 || self.pos_hidden == 0 {
            return bad("sizes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad(format!("mask_ratio {} outside [0, 1)", self.mask_ratio));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let lin = |i: usize, o: usize| i * o + o;
        let (d, h, ph) = (self.dim, self.embed_hidden, self.pos_hidden);
        let block = 4 * d + lin(d, 3 * d) + lin(d, d) + lin(d, self.mlp_ratio * d) + lin(self.mlp_ratio * d, d);
        lin(3, h) + lin(h, 2 * h) + lin(2 * h, d)
            + lin(3, ph) + lin(ph, d)
            + d
            + if self.role_embedding { 4 * d } else { 0 }
            + (self.enc_depth + self.dec_depth) * block
            + 2 * d
            + lin(d, 3 * self.patch_size)
    }

    /// Sequence length seen by each block.
    pub fn tokens(&self) -> usize {
        match self.variant {
            Variant::Sep => 2 * self.n_patches,
            Variant::Cat => 4 * self.n_patches,
        }
    }
}

#[derive(Debug, Clone)]
struct Arch {
    patch: PatchEmbed,
    pos: PosEmbed,
    mask_token: ParamId,
    role: Option<ParamId>,
    encoder: Vec<Block>,
    decoder: Vec<Block>,
    norm: LayerNorm,
    head: Linear,
}

fn build<T: Real>(config: &ModelConfig, seed: u64) -> (Arch, ParamStore<T>) {
    let mut r = rng::seeded(seed);
    let mut init = Init { rng: &mut r };
    let mut ps = ParamStore::new();
    let (d, h) = (config.dim, config.embed_hidden);
    let patch = PatchEmbed {
        fc1: Linear::register(&mut ps, &mut init, "patch_embed.fc1", 3, h),
        fc2: Linear::register(&mut ps, &mut init, "patch_embed.fc2", h, 2 * h),
        proj: Linear::register(&mut ps, &mut init, "patch_embed.proj", 2 * h, d),
    };
    let pos = PosEmbed {
        fc1: Linear::register(&mut ps, &mut init, "pos_embed.fc1", 3, config.pos_hidden),
        fc2: Linear::register(&mut ps, &mut init, "pos_embed.fc2", config.pos_hidden, d),
    };
    let mask_token = ps.add("mask_token".into(), &[d], init.small(d, 0.02));
    let role = config.role_embedding.then(|| ps.add("role_embed".into(), &[4, d], init.small(4 * d, 0.02)));
    let encoder = (0..config.enc_depth)
        .map(|i| Block::register(&mut ps, &mut init, &format!("encoder.{i}"), d, config.heads, config.mlp_ratio))
        .collect();
    let decoder = (0..config.dec_depth)
        .map(|i| Block::register(&mut ps, &mut init, &format!("decoder.{i}"), d, config.heads, config.mlp_ratio))
        .collect();
    let norm = LayerNorm::register(&mut ps, "norm", d);
    let out = 3 * config.patch_size;
    let head_w = init.small(d * out, 0.02);
    let head = Linear::register_with(&mut ps, "head", d, out, head_w);
    (Arch { patch, pos, mask_token, role, encoder, decoder, norm, head }, ps)
}

/// Decoded patches at the masked positions, in ascending slot order.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions<T> {
    /// Slot index in the canonical `4N` order.
    pub slots: Vec<usize>,
    /// `slots.len() x patch_size x 3`, absolute coordinates.
    pub points: Vec<T>,
    pub patch_size: usize,
}

impl<T: Real> Predictions<T> {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn patch(&self, k: usize) -> &[T] {
        let w = self.patch_size * 3;
        &self.points[k * w..(k + 1) * w]
    }

    pub fn patch_points(&self, k: usize) -> Vec<Point> {
        self.patch(k).chunks_exact(3).map(|c| core::array::from_fn(|i| c[i].to_f64().unwrap_or(f64::NAN))).collect()
    }
}

enum StreamCache<T> {
    Cat(Vec<BlockCache<T>>),
    Sep { a: Vec<BlockCache<T>>, b: Vec<BlockCache<T>>, fused: Vec<BlockCache<T>> },
}

/// Activations kept by [`Model::forward_train`] for [`Model::backward`].
pub struct ForwardCache<T> {
    masked_slots: Vec<usize>,
    visible_slots: Vec<usize>,
    patch: Option<PatchEmbedCache<T>>,
    pos: PosEmbedCache<T>,
    stream: StreamCache<T>,
    final_norm: NormCache<T>,
    head_in: Vec<T>,
    head_rows: Vec<usize>,
    rows: usize,
}

#[inline]
fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).unwrap_or_else(T::nan)
}

fn gather<T: Copy>(src: &[T], width: usize, rows: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        out.extend_from_slice(&src[r * width..(r + 1) * width]);
    }
    out
}

fn scatter_add<T: Real>(dst: &mut [T], width: usize, rows: &[usize], src: &[T]) {
    for (k, &r) in rows.iter().enumerate() {
        for (a, b) in dst[r * width..(r + 1) * width].iter_mut().zip(&src[k * width..(k + 1) * width]) {
            *a += *b;
        }
    }
}

/// Pre-norm transformer over point-patch tokens.
#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    arch: Arch,
    params: ParamStore<T>,
}

impl<T: Real> Model<T> {
    /// Fresh, seeded initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (arch, params) = build(&config, seed);
        Ok(Self { config, arch, params })
    }

    /// Wraps existing parameters after checking every name and shape.
    pub fn with_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::Shape(format!("expected {} arrays, got {}", model.params.len(), params.len())));
        }
        for id in model.params.ids() {
            if params.name(id) != model.params.name(id) || params.shape(id) != model.params.shape(id) {
                return Err(Error::Shape(format!(
                    "array {} is {} {:?}, expected {} {:?}",
                    id.index(),
                    params.name(id),
                    params.shape(id),
                    model.params.name(id),
                    model.params.shape(id)
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    /// Embeds one center-relative patch of `patch_size` points.
    pub fn embed_patch(&self, patch: &[Point]) -> Result<Vec<T>> {
        if patch.len() != self.config.patch_size {
            return Err(Error::Shape(format!("patch has {} points, expected {}", patch.len(), self.config.patch_size)));
        }
        let pts = patch.iter().flatten().map(|&x| lit(x)).collect();
        Ok(self.arch.patch.forward(&self.params, pts, self.config.patch_size).0)
    }

    pub fn embed_position(&self, center: Point) -> Vec<T> {
        self.arch.pos.forward(&self.params, center.iter().map(|&x| lit(x)).collect()).0
    }

    /// Linear head: `patch_size` offsets added to `aligned_center`.
    pub fn decode_head(&self, feature: &[T], aligned_center: Point) -> Result<Vec<[T; 3]>> {
        if feature.len() != self.config.dim {
            return Err(Error::Shape(format!("feature width {} != dim {}", feature.len(), self.config.dim)));
        }
        let out = self.arch.head.forward(&self.params, feature, 1);
        Ok(out
            .chunks_exact(3)
            .map(|c| core::array::from_fn(|k| c[k] + lit::<T>(aligned_center[k])))
            .collect())
    }

    /// Runs the configured variant.
    pub fn forward(&self, prompt: &PatchBatch, query: &PatchBatch, mask: &MaskPlan) -> Result<Predictions<T>> {
        Ok(self.forward_train(prompt, query, mask)?.0)
    }

    pub fn forward_sep(&self, prompt: &PatchBatch, query: &PatchBatch, mask: &MaskPlan) -> Result<Predictions<T>> {
        if self.config.variant != Variant::Sep {
            return Err(Error::InvalidConfig("model is not a sep variant".into()));
        }
        self.forward(prompt, query, mask)
    }

    pub fn forward_cat(&self, prompt: &PatchBatch, query: &PatchBatch, mask: &MaskPlan) -> Result<Predictions<T>> {
        if self.config.variant != Variant::Cat {
            return Err(Error::InvalidConfig("model is not a cat variant".into()));
        }
        self.forward(prompt, query, mask)
    }

    fn check_inputs(&self, prompt: &PatchBatch, query: &PatchBatch, mask: &MaskPlan) -> Result<()> {
        let (n, m) = (self.config.n_patches, self.config.patch_size);
        for (name, b) in [("prompt", prompt), ("query", query)] {
            if b.n_patches != n || b.patch_size != m {
                return Err(Error::Shape(format!(
                    "{name} batch is {}x{}, model expects {n}x{m}",
                    b.n_patches, b.patch_size
                )));
            }
            if b.input_patches.len() != n * m
                || b.target_patches.len() != n * m
                || b.input_centers.len() != n
                || b.target_centers.len() != n
            {
                return Err(Error::Shape(format!("{name} batch arrays are inconsistent")));
            }
        }
        if mask.masked.len() != 4 * n {
            return Err(Error::Shape(format!("mask covers {} tokens, expected {}", mask.masked.len(), 4 * n)));
        }
        if self.config.variant == Variant::Sep
            && mask.masked.iter().enumerate().any(|(s, &x)| x && !Segment::of_slot(s, n).is_target())
        {
            return Err(Error::Shape("sep masks may only cover target tokens".into()));
        }
        Ok(())
    }

    /// Forward pass that keeps the activations needed by [`Self::backward`].
    pub fn forward_train(
        &self,
        prompt: &PatchBatch,
        query: &PatchBatch,
        mask: &MaskPlan,
    ) -> Result<(Predictions<T>, ForwardCache<T>)> {
        self.check_inputs(prompt, query, mask)?;
        let cfg = &self.config;
        let (n, m, d) = (cfg.n_patches, cfg.patch_size, cfg.dim);
        let ps = &self.params;
        let source = |slot: usize| -> (&PatchBatch, Segment, usize) {
            let seg = Segment::of_slot(slot, n);
            (if seg.is_prompt() { prompt } else { query }, seg, slot % n)
        };

        let masked_slots = mask.masked_slots();
        let visible_slots: Vec<usize> = (0..4 * n).filter(|&s| !mask.masked[s]).collect();

        // Only visible patches are ever read.
        let mut pts = Vec::with_capacity(visible_slots.len() * m * 3);
        for &s in &visible_slots {
            let (b, seg, p) = source(s);
            let patch = if seg.is_target() { b.target_patch(p) } else { b.input_patch(p) };
            pts.extend(patch.iter().flatten().map(|&x| lit::<T>(x)));
        }
        let (tokens, patch_cache) = if visible_slots.is_empty() {
            (Vec::new(), None)
        } else {
            let (t, c) = self.arch.patch.forward(ps, pts, m);
            (t, Some(c))
        };

        let mut x = vec![T::zero(); 4 * n * d];
        let mask_tok = ps.get(self.arch.mask_token);
        for (k, &s) in visible_slots.iter().enumerate() {
            x[s * d..(s + 1) * d].copy_from_slice(&tokens[k * d..(k + 1) * d]);
        }
        for &s in &masked_slots {
            x[s * d..(s + 1) * d].copy_from_slice(mask_tok);
        }
        if let Some(role) = self.arch.role {
            let role = ps.get(role);
            for s in 0..4 * n {
                let seg = Segment::of_slot(s, n) as usize;
                for (a, b) in x[s * d..(s + 1) * d].iter_mut().zip(&role[seg * d..(seg + 1) * d]) {
                    *a += *b;
                }
            }
        }

        let mut centers = Vec::with_capacity(4 * n * 3);
        for s in 0..4 * n {
            let (b, seg, p) = source(s);
            let c = if seg.is_target() && !mask.masked[s] { b.target_centers[p] } else { b.input_centers[p] };
            centers.extend(c.iter().map(|&v| lit::<T>(v)));
        }
        let (pos, pos_cache) = self.arch.pos.forward(ps, centers);

        let (seq, stream, head_rows, rows) = match cfg.variant {
            Variant::Cat => {
                let mut h = x;
                let mut caches = Vec::with_capacity(cfg.enc_depth + cfg.dec_depth);
                for blk in self.arch.encoder.iter().chain(&self.arch.decoder) {
                    let (out, c) = blk.forward(ps, &h, &pos);
                    caches.push(c);
                    h = out;
                }
                (h, StreamCache::Cat(caches), masked_slots.clone(), 4 * n)
            }
            Variant::Sep => {
                let (rows_a, rows_b) = sep_rows(n);
                let (mut xa, mut xb) = (gather(&x, d, &rows_a), gather(&x, d, &rows_b));
                let (pa, pb) = (gather(&pos, d, &rows_a), gather(&pos, d, &rows_b));
                let mut ca = Vec::new();
                let mut cb = Vec::new();
                for blk in &self.arch.encoder[..cfg.merge_block] {
                    let (oa, c1) = blk.forward(ps, &xa, &pa);
                    let (ob, c2) = blk.forward(ps, &xb, &pb);
                    ca.push(c1);
                    cb.push(c2);
                    xa = oa;
                    xb = ob;
                }
                let half = lit::<T>(0.5);
                let mut h: Vec<T> = xa.iter().zip(&xb).map(|(a, b)| (*a + *b) * half).collect();
                let pf: Vec<T> = pa.iter().zip(&pb).map(|(a, b)| (*a + *b) * half).collect();
                let mut cf = Vec::new();
                for blk in self.arch.encoder[cfg.merge_block..].iter().chain(&self.arch.decoder) {
                    let (out, c) = blk.forward(ps, &h, &pf);
                    cf.push(c);
                    h = out;
                }
                let head_rows = masked_slots.iter().map(|&s| if s < 2 * n { s - n } else { s - 2 * n }).collect();
                (h, StreamCache::Sep { a: ca, b: cb, fused: cf }, head_rows, 2 * n)
            }
        };

        let (feats, final_norm) = self.arch.norm.forward(ps, &seq);
        let head_in = gather(&feats, d, &head_rows);
        let k = masked_slots.len();
        let mut points = self.arch.head.forward(ps, &head_in, k);
        for (i, &s) in masked_slots.iter().enumerate() {
            let (b, _, p) = source(s);
            let c = b.input_centers[p];
            for j in 0..m {
                for a in 0..3 {
                    points[(i * m + j) * 3 + a] += lit::<T>(c[a]);
                }
            }
        }
        let preds = Predictions { slots: masked_slots.clone(), points, patch_size: m };
        let cache = ForwardCache {
            masked_slots,
            visible_slots,
            patch: patch_cache,
            pos: pos_cache,
            stream,
            final_norm,
            head_in,
            head_rows,
            rows,
        };
        Ok((preds, cache))
    }

    /// Accumulates `d loss / d params` into `grads` given the gradient of the
    /// loss with respect to the predicted points.
    pub fn backward(&self, cache: &ForwardCache<T>, dpred: &[T], grads: &mut ParamStore<T>) -> Result<()> {
        let cfg = &self.config;
        let (n, m, d) = (cfg.n_patches, cfg.patch_size, cfg.dim);
        let k = cache.masked_slots.len();
        if dpred.len() != k * m * 3 {
            return Err(Error::Shape(format!("prediction gradient has {} values, expected {}", dpred.len(), k * m * 3)));
        }
        let ps = &self.params;
        let dhead = self.arch.head.backward(ps, grads, &cache.head_in, dpred, k, true);
        let mut dfeat = vec![T::zero(); cache.rows * d];
        scatter_add(&mut dfeat, d, &cache.head_rows, &dhead);
        let mut dx = self.arch.norm.backward(ps, grads, &cache.final_norm, &dfeat);

        let mut dtok = vec![T::zero(); 4 * n * d];
        let mut dpos = vec![T::zero(); 4 * n * d];
        match &cache.stream {
            StreamCache::Cat(caches) => {
                let blocks: Vec<&Block> = self.arch.encoder.iter().chain(&self.arch.decoder).collect();
                for (blk, c) in blocks.iter().zip(caches).rev() {
                    dx = blk.backward(ps, grads, c, &dx);
                    dpos.iter_mut().zip(&dx).for_each(|(a, b)| *a += *b);
                }
                dtok = dx;
            }
            StreamCache::Sep { a, b, fused } => {
                let blocks: Vec<&Block> =
                    self.arch.encoder[cfg.merge_block..].iter().chain(&self.arch.decoder).collect();
                let mut dpf = vec![T::zero(); 2 * n * d];
                for (blk, c) in blocks.iter().zip(fused).rev() {
                    dx = blk.backward(ps, grads, c, &dx);
                    dpf.iter_mut().zip(&dx).for_each(|(a, b)| *a += *b);
                }
                let half = lit::<T>(0.5);
                dx.iter_mut().for_each(|v| *v *= half);
                dpf.iter_mut().for_each(|v| *v *= half);
                let (rows_a, rows_b) = sep_rows(n);
                for (caches, rows) in [(a, &rows_a), (b, &rows_b)] {
                    let mut ds = dx.clone();
                    let mut dps = dpf.clone();
                    for (blk, c) in self.arch.encoder[..cfg.merge_block].iter().zip(caches).rev() {
                        ds = blk.backward(ps, grads, c, &ds);
                        dps.iter_mut().zip(&ds).for_each(|(a, b)| *a += *b);
                    }
                    scatter_add(&mut dtok, d, rows, &ds);
                    scatter_add(&mut dpos, d, rows, &dps);
                }
            }
        }

        self.arch.pos.backward(ps, grads, &cache.pos, &dpos);
        if let Some(role) = self.arch.role {
            let g = grads.get_mut(role);
            for s in 0..4 * n {
                let seg = Segment::of_slot(s, n) as usize;
                for (a, b) in g[seg * d..(seg + 1) * d].iter_mut().zip(&dtok[s * d..(s + 1) * d]) {
                    *a += *b;
                }
            }
        }
        {
            let g = grads.get_mut(self.arch.mask_token);
            for &s in &cache.masked_slots {
                for (a, b) in g.iter_mut().zip(&dtok[s * d..(s + 1) * d]) {
                    *a += *b;
                }
            }
        }
        if let Some(pc) = &cache.patch {
            let dvis = gather(&dtok, d, &cache.visible_slots);
            self.arch.patch.backward(ps, grads, pc, &dvis);
        }
        Ok(())
    }
}

/// Sequence rows of the input stream and the target stream in sep mode.
fn sep_rows(n: usize) -> (Vec<usize>, Vec<usize>) {
    ((0..n).chain(2 * n..3 * n).collect(), (n..2 * n).chain(3 * n..4 * n).collect())
}

#[cfg(test)]
mod tests;
