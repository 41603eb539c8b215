//! Toy Vision Transformer: patch embedding, pre-norm blocks with pluggable
//! attention, mean-pooled classifier, and an AdamW trainer.

pub mod checkpoint;
mod optim;
mod train;

use crate::attention::{AttentionKind, DiffAttnParams, MhsaParams, Projection, DEFAULT_LAMBDA_INIT, PROJ_INIT_STD};
use crate::error::{Result, VcaError};
use crate::tensor::{init::Initializer, Binding, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::vca::{default_pool_side, VcaAblationFlags, VcaGrid, VcaParams};

pub use optim::AdamW;
pub use train::{accuracy, Batch, TrainState};

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    /// `(height, width, channels)`
    pub image_size: (usize, usize, usize),
    pub patch_size: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub attention_kind: AttentionKind,
    pub vca_flags: VcaAblationFlags,
    /// Contrast grid; `None` derives it from the token grid.
    pub pool: Option<(usize, usize)>,
    pub num_classes: usize,
    /// Bias on the attention and patch projections.
    pub bias: bool,
    pub lambda_init: f64,
    /// Use `0.8 - 0.6 exp(-0.3 (l - 1))` per layer instead of `lambda_init`.
    pub lambda_depth_schedule: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            image_size: (16, 16, 1),
            patch_size: 4,
            depth: 4,
            width: 64,
            heads: 2,
            mlp_ratio: 4.0,
            attention_kind: AttentionKind::Vca,
            vca_flags: VcaAblationFlags::default(),
            pool: None,
            num_classes: 10,
            bias: false,
            lambda_init: DEFAULT_LAMBDA_INIT,
            lambda_depth_schedule: false,
        }
    }
}

impl BackboneConfig {
    /// Token grid `(H, W)`.
    pub fn token_grid(&self) -> (usize, usize) {
        (self.image_size.0 / self.patch_size, self.image_size.1 / self.patch_size)
    }

    pub fn tokens(&self) -> usize {
        let (h, w) = self.token_grid();
        h * w
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.image_size.2
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.width as f64) * self.mlp_ratio).round().max(1.0) as usize
    }

    pub fn vca_grid(&self) -> Result<VcaGrid> {
        let (h, w) = self.token_grid();
        let (ph, pw) = self.pool.unwrap_or((default_pool_side(h), default_pool_side(w)));
        VcaGrid::new(h, w, ph, pw)
    }

    /// `lambda_init` of layer `layer` (zero-based).
    pub fn layer_lambda_init(&self, layer: usize) -> f64 {
        if self.lambda_depth_schedule {
            0.8 - 0.6 * (-0.3 * layer as f64).exp()
        } else {
            self.lambda_init
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (ih, iw, ch) = self.image_size;
        let ps = self.patch_size;
        if ps == 0 || ih == 0 || iw == 0 || ch == 0 {
            return Err(VcaError::config("image sizes and patch_size must be positive"));
        }
        if ih % ps != 0 || iw % ps != 0 {
            return Err(VcaError::config(format!(
                "image {ih}x{iw} is not divisible by patch size {ps}"
            )));
        }
        if self.depth == 0 || self.num_classes < 2 || self.mlp_ratio <= 0.0 {
            return Err(VcaError::config(
                "depth must be positive, num_classes at least 2, mlp_ratio positive",
            ));
        }
        if self.heads == 0 || self.width == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(VcaError::config(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        match self.attention_kind {
            AttentionKind::Diff if !(self.width / self.heads).is_multiple_of(2) => {
                Err(VcaError::config("differential attention needs an even head dim"))
            }
            AttentionKind::Vca => self.vca_grid().map(|_| ()),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    fn init<T: Real>(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> Self {
        LayerNormParams {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::ones(&[dim]), true),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[dim]), true),
        }
    }

    fn apply<T: Real>(&self, tape: &mut Tape<T>, b: &Binding, x: Var) -> Result<Var> {
        tape.layer_norm(x, b[self.gamma], b[self.beta], T::lit(LAYER_NORM_EPS))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AttentionLayer {
    Mhsa(MhsaParams),
    Diff(DiffAttnParams),
    Vca(VcaParams),
}

impl AttentionLayer {
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, b: &Binding, z: Var, tokens: usize) -> Result<Var> {
        match self {
            AttentionLayer::Mhsa(p) => Ok(p.forward(tape, b, z, tokens)?.out),
            AttentionLayer::Diff(p) => Ok(p.forward(tape, b, z, tokens)?.out),
            AttentionLayer::Vca(p) => Ok(p.forward(tape, b, z)?.out),
        }
    }

    /// Output projection `Wo`.
    pub fn output_projection(&self) -> Projection {
        match self {
            AttentionLayer::Mhsa(p) => p.wo,
            AttentionLayer::Diff(p) => p.wo,
            AttentionLayer::Vca(p) => p.wo,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub ln1: LayerNormParams,
    pub attn: AttentionLayer,
    pub ln2: LayerNormParams,
    pub fc1: Projection,
    pub fc2: Projection,
}

impl Block {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &BackboneConfig,
        layer: usize,
        init: &mut Initializer,
    ) -> Result<Self> {
        let c = cfg.width;
        let ln1 = LayerNormParams::init(store, &format!("{prefix}.ln1"), c);
        let attn_prefix = format!("{prefix}.attn");
        let lambda_init = cfg.layer_lambda_init(layer);
        let attn = match cfg.attention_kind {
            AttentionKind::Mhsa => {
                AttentionLayer::Mhsa(MhsaParams::init(store, &attn_prefix, c, cfg.heads, cfg.bias, init)?)
            }
            AttentionKind::Diff => AttentionLayer::Diff(DiffAttnParams::init(
                store,
                &attn_prefix,
                c,
                cfg.heads,
                cfg.bias,
                lambda_init,
                init,
            )?),
            AttentionKind::Vca => AttentionLayer::Vca(VcaParams::init(
                store,
                &attn_prefix,
                c,
                cfg.heads,
                cfg.vca_grid()?,
                cfg.vca_flags,
                cfg.bias,
                (lambda_init, lambda_init),
                init,
            )?),
        };
        let ln2 = LayerNormParams::init(store, &format!("{prefix}.ln2"), c);
        let hidden = cfg.mlp_hidden();
        let fc1 = Projection::init(store, &format!("{prefix}.mlp.fc1"), c, hidden, true, init);
        let fc2 = Projection::init(store, &format!("{prefix}.mlp.fc2"), hidden, c, true, init);
        Ok(Block {
            ln1,
            attn,
            ln2,
            fc1,
            fc2,
        })
    }

    /// `z + Attn(LN(z))`, then `+ MLP(LN(.))`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, b: &Binding, z: Var, tokens: usize) -> Result<Var> {
        let n1 = self.ln1.apply(tape, b, z)?;
        let a = self.attn.forward(tape, b, n1, tokens)?;
        let z = tape.add(z, a)?;
        let n2 = self.ln2.apply(tape, b, z)?;
        let h = self.fc1.apply(tape, b, n2)?;
        let h = tape.gelu(h)?;
        let m = self.fc2.apply(tape, b, h)?;
        tape.add(z, m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VitModel {
    pub cfg: BackboneConfig,
    pub patch: Projection,
    pub pos_embed: ParamId,
    pub blocks: Vec<Block>,
    pub norm: LayerNormParams,
    pub head: Projection,
}

impl VitModel {
    /// Builds the model and its freshly initialised parameters.
    pub fn new<T: Real>(cfg: &BackboneConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut init = Initializer::new(seed);
        let mut store = ParamStore::new();
        let c = cfg.width;
        let patch = Projection::init(&mut store, "patch_embed", cfg.patch_dim(), c, cfg.bias, &mut init);
        let pos_embed = store.add("pos_embed", init.trunc_normal(&[cfg.tokens(), c], PROJ_INIT_STD), true);
        let blocks = (0..cfg.depth)
            .map(|l| Block::init(&mut store, &format!("blocks.{l}"), cfg, l, &mut init))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNormParams::init(&mut store, "norm", c);
        let head = Projection::init(&mut store, "head", c, cfg.num_classes, true, &mut init);
        let model = VitModel {
            cfg: cfg.clone(),
            patch,
            pos_embed,
            blocks,
            norm,
            head,
        };
        Ok((model, store))
    }

    /// Tokens `[B*N x C]` for a batch of images `[B x Hi x Wi x ch]`.
    pub fn patch_embed<T: Real>(&self, tape: &mut Tape<T>, b: &Binding, images: &Tensor<T>) -> Result<Var> {
        let patches = patchify(images, &self.cfg)?;
        let samples = patches.dims2()?.0 / self.cfg.tokens();
        let x = tape.constant(patches);
        let tokens = self.patch.apply(tape, b, x)?;
        let pos = if samples == 1 {
            b[self.pos_embed]
        } else {
            tape.concat_rows(&vec![b[self.pos_embed]; samples])?
        };
        tape.add(tokens, pos)
    }

    /// Mean over each sample's tokens, final layer norm, linear head.
    pub fn classify<T: Real>(&self, tape: &mut Tape<T>, b: &Binding, z: Var) -> Result<Var> {
        let pooled = tape.mean_rows(z, self.cfg.tokens())?;
        let normed = self.norm.apply(tape, b, pooled)?;
        self.head.apply(tape, b, normed)
    }

    /// Logits `[B x num_classes]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, b: &Binding, images: &Tensor<T>) -> Result<Var> {
        let mut z = self.patch_embed(tape, b, images)?;
        let tokens = self.cfg.tokens();
        for block in &self.blocks {
            z = block.forward(tape, b, z, tokens)?;
        }
        self.classify(tape, b, z)
    }

    /// Sum of VCA-only scalars over all layers; zero for other kinds.
    pub fn attention_overhead<T: Real>(&self, store: &ParamStore<T>) -> usize {
        self.blocks
            .iter()
            .map(|blk| match &blk.attn {
                AttentionLayer::Vca(p) => p.overhead_scalars(store),
                _ => 0,
            })
            .sum()
    }
}

/// Rearranges `[B x Hi x Wi x ch]` (or a single `Hi x Wi x ch`) images into
/// `[B*N x ps*ps*ch]` rows, patches in row-major grid order and each patch
/// flattened row-major over `(dy, dx, channel)`.
pub fn patchify<T: Real>(images: &Tensor<T>, cfg: &BackboneConfig) -> Result<Tensor<T>> {
    let (ih, iw, ch) = cfg.image_size;
    let ps = cfg.patch_size;
    let per_image = ih * iw * ch;
    let shape = images.shape();
    let ok = match shape {
        [h, w, c] => (*h, *w, *c) == (ih, iw, ch),
        [_, h, w, c] => (*h, *w, *c) == (ih, iw, ch),
        _ => false,
    };
    if !ok {
        return Err(VcaError::dim("patch_embed", shape, &[ih, iw, ch]));
    }
    if ps == 0 || ih % ps != 0 || iw % ps != 0 {
        return Err(VcaError::config(format!(
            "image {ih}x{iw} is not divisible by patch size {ps}"
        )));
    }
    let samples = images.len() / per_image;
    let (gh, gw) = (ih / ps, iw / ps);
    let dim = ps * ps * ch;
    let src = images.data();
    let mut out = Vec::with_capacity(images.len());
    for s in 0..samples {
        let img = &src[s * per_image..(s + 1) * per_image];
        for py in 0..gh {
            for px in 0..gw {
                for dy in 0..ps {
                    let row = py * ps + dy;
                    let start = (row * iw + px * ps) * ch;
                    out.extend_from_slice(&img[start..start + ps * ch]);
                }
            }
        }
    }
    Tensor::new(vec![samples * gh * gw, dim], out)
}
