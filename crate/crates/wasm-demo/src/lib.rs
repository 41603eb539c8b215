//! Browser bindings for the demo page in `www/`.
//!
//! Three operations: a synthetic grating image, the contrast maps one VCA
//! layer builds on it, and the analytic core cost of MHSA against VCA over
//! a range of token counts. Plain-Rust versions of each are public so they
//! run and test natively; the `#[wasm_bindgen]` wrappers only convert
//! errors.

use wasm_bindgen::prelude::*;

use vca::attention::AttentionKind;
use vca::bench::{analytic_flops, projection_flops, BenchShape};
use vca::data::make_synthetic;
use vca::tensor::{init::Initializer, ParamStore, Tape, Tensor};
use vca::vit::{AttentionLayer, BackboneConfig, VitModel};
use vca::Result;

pub const IMAGE_SIDE: usize = 16;
pub const PATCH: usize = 2;
/// Token grid side: `IMAGE_SIDE / PATCH`.
pub const GRID_SIDE: usize = IMAGE_SIDE / PATCH;
pub const CLASSES: usize = 10;
const WIDTH: usize = 16;
/// Weight scale of the demo layer; the training init would give
/// near-uniform maps.
const DEMO_WEIGHT_STD: f64 = 0.4;

fn js_err(e: vca::VcaError) -> JsError {
    JsError::new(&e.to_string())
}

/// One `16 x 16` grating of class `class`, row-major, values in `[0, 1]`.
pub fn grating_pixels(class: usize, noise: f64, seed: u64) -> Result<Vec<f32>> {
    let ds = make_synthetic(seed, CLASSES, CLASSES * 4, (IMAGE_SIDE, IMAGE_SIDE, 1), noise)?;
    let i = ds
        .labels
        .iter()
        .position(|&l| l == class % CLASSES)
        .expect("every class is present");
    let per = IMAGE_SIDE * IMAGE_SIDE;
    Ok(ds.images.data()[i * per..(i + 1) * per].to_vec())
}

#[wasm_bindgen]
pub fn grating(class: usize, noise: f64, seed: u64) -> std::result::Result<Vec<f32>, JsError> {
    grating_pixels(class, noise, seed).map_err(js_err)
}

/// Rows `[N, mhsa_core, vca_core, projections]` for `N = 16, 32, ...`
/// up to `max_tokens`, flattened.
pub fn cost_table(contrast: usize, width: usize, heads: usize, max_tokens: usize) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    let mut tokens = 16;
    while tokens <= max_tokens {
        let shape = BenchShape::new(tokens, contrast.min(tokens), width, heads);
        out.extend([
            tokens as f64,
            analytic_flops(AttentionKind::Mhsa, shape)? as f64,
            analytic_flops(AttentionKind::Vca, shape)? as f64,
            projection_flops(shape) as f64,
        ]);
        tokens *= 2;
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn cost_curves(
    contrast: usize,
    width: usize,
    heads: usize,
    max_tokens: usize,
) -> std::result::Result<Vec<f64>, JsError> {
    cost_table(contrast, width, heads, max_tokens).map_err(js_err)
}

/// Maps of a single-head VCA layer with random weights applied to the patch
/// tokens of one grating.
#[wasm_bindgen]
pub struct ContrastView {
    image: Vec<f32>,
    pool: usize,
    /// `n x N`
    stage1_pos: Tensor<f32>,
    /// `n x N`
    stage1_neg: Tensor<f32>,
    /// `N x n`, the differential map `A1 - lambda A2`.
    stage2: Tensor<f32>,
    lambda1: f32,
    lambda2: f32,
}

impl ContrastView {
    pub fn build(class: usize, pool: usize, seed: u64) -> Result<Self> {
        let image = grating_pixels(class, 0.05, seed)?;
        let cfg = BackboneConfig {
            image_size: (IMAGE_SIDE, IMAGE_SIDE, 1),
            patch_size: PATCH,
            depth: 1,
            width: WIDTH,
            heads: 1,
            pool: Some((pool, pool)),
            attention_kind: AttentionKind::Vca,
            ..Default::default()
        };
        let (model, mut store): (VitModel, ParamStore<f32>) = VitModel::new(&cfg, seed)?;
        let mut init = Initializer::new(seed ^ 0xdeed);
        for e in store
            .entries_mut()
            .iter_mut()
            .filter(|e| e.trainable && e.value.rank() == 2)
        {
            e.value = init.normal(e.value.shape(), DEMO_WEIGHT_STD);
        }
        let AttentionLayer::Vca(layer) = &model.blocks[0].attn else {
            unreachable!("the demo backbone uses VCA attention")
        };
        let mut tape = Tape::new();
        let b = store.bind_frozen(&mut tape);
        let images = Tensor::new(vec![1, IMAGE_SIDE, IMAGE_SIDE, 1], image.clone())?;
        let z = model.patch_embed(&mut tape, &b, &images)?;
        let out = layer.forward(&mut tape, &b, z)?;
        let head = &out.heads[0];
        let neg = head.stage1.map_neg.expect("full VCA keeps both streams");
        Ok(ContrastView {
            image,
            pool,
            stage1_pos: tape.value(head.stage1.map_pos).clone(),
            stage1_neg: tape.value(neg).clone(),
            stage2: tape.value(head.stage2.a).clone(),
            lambda1: tape.value(out.lambda1).item(),
            lambda2: tape.value(out.lambda2).item(),
        })
    }

    fn row(t: &Tensor<f32>, i: usize) -> Vec<f32> {
        let c = t.last_dim();
        let rows = t.len() / c;
        let i = i.min(rows - 1);
        t.data()[i * c..(i + 1) * c].to_vec()
    }
}

#[wasm_bindgen]
impl ContrastView {
    /// `pool` must divide the token grid side (8): 1, 2, 4 or 8.
    #[wasm_bindgen(constructor)]
    pub fn new(class: usize, pool: usize, seed: u64) -> std::result::Result<ContrastView, JsError> {
        Self::build(class, pool, seed).map_err(js_err)
    }

    pub fn grid_side(&self) -> usize {
        GRID_SIDE
    }

    pub fn pool_side(&self) -> usize {
        self.pool
    }

    pub fn image(&self) -> Vec<f32> {
        self.image.clone()
    }

    pub fn lambda1(&self) -> f32 {
        self.lambda1
    }

    pub fn lambda2(&self) -> f32 {
        self.lambda2
    }

    /// Stage II weights of query token `query` over the `n` contrast cells.
    pub fn stage2_row(&self, query: usize) -> Vec<f32> {
        Self::row(&self.stage2, query)
    }

    /// Stage I map of positive contrast token `token` over all `N` tokens.
    pub fn stage1_pos(&self, token: usize) -> Vec<f32> {
        Self::row(&self.stage1_pos, token)
    }

    pub fn stage1_neg(&self, token: usize) -> Vec<f32> {
        Self::row(&self.stage1_neg, token)
    }

    /// Contrast cell covering query token `query`.
    pub fn cell_of(&self, query: usize) -> usize {
        let (r, c) = (query / GRID_SIDE, query % GRID_SIDE);
        let k = GRID_SIDE / self.pool;
        let cells = self.pool;
        (r / k).min(cells - 1) * cells + (c / k).min(cells - 1)
    }
}
