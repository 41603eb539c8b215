//! Visual-contrast attention.
//!
//! Each head pools its queries over the `H x W` token grid down to an
//! `h x w` grid of `n` contrast tokens and adds two learned positional
//! embeddings, giving a positive and a negative stream. Stage I lets both
//! streams attend to all keys and values and subtracts the results
//! (`n x N` maps). Stage II lets every query attend to both streams and
//! subtracts the two `N x n` maps before reading out the Stage I result.
//! No `N x N` map is ever built.

use std::fmt;
use std::str::FromStr;

use crate::attention::{check_heads, check_width, compute_lambda, scaled_scores, LambdaParams, Projection, RMS_EPS};
use crate::error::{Result, VcaError};
use crate::tensor::{init::Initializer, Binding, ParamId, ParamStore, Real, Tape, Tensor, Var};

/// Standard deviation of the truncated-normal init of `e_pos` / `e_neg`.
pub const EMBED_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StageKind {
    /// Differential combination of both streams, RMSNorm, `1 - lambda_init`.
    Vca,
    /// Positive stream only: no subtraction, no lambda, no RMSNorm.
    Vanilla,
}

/// Which terms build one stream of contrast tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StreamSource {
    Emb,
    Pool,
    PoolEmb,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VcaAblationFlags {
    pub stage1: StageKind,
    pub stage2: StageKind,
    pub pos_stream: StreamSource,
    pub neg_stream: StreamSource,
}

impl Default for VcaAblationFlags {
    fn default() -> Self {
        VcaAblationFlags {
            stage1: StageKind::Vca,
            stage2: StageKind::Vca,
            pos_stream: StreamSource::PoolEmb,
            neg_stream: StreamSource::PoolEmb,
        }
    }
}

impl StageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StageKind::Vca => "vca",
            StageKind::Vanilla => "vanilla",
        }
    }
}

impl StreamSource {
    pub fn as_str(self) -> &'static str {
        match self {
            StreamSource::Emb => "emb",
            StreamSource::Pool => "pool",
            StreamSource::PoolEmb => "pool+emb",
        }
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for StreamSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageKind {
    type Err = VcaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vca" => Ok(StageKind::Vca),
            "vanilla" => Ok(StageKind::Vanilla),
            other => Err(VcaError::config(format!("unknown stage kind {other:?}"))),
        }
    }
}

impl FromStr for StreamSource {
    type Err = VcaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "emb" => Ok(StreamSource::Emb),
            "pool" => Ok(StreamSource::Pool),
            "pool+emb" => Ok(StreamSource::PoolEmb),
            other => Err(VcaError::config(format!("unknown stream source {other:?}"))),
        }
    }
}

/// Token grid `H x W` and contrast grid `h x w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VcaGrid {
    pub height: usize,
    pub width: usize,
    pub pool_h: usize,
    pub pool_w: usize,
}

impl VcaGrid {
    pub fn new(height: usize, width: usize, pool_h: usize, pool_w: usize) -> Result<Self> {
        let g = VcaGrid {
            height,
            width,
            pool_h,
            pool_w,
        };
        g.validate()?;
        Ok(g)
    }

    /// Grid with the default contrast size on each side.
    pub fn with_default_pool(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, default_pool_side(height), default_pool_side(width))
    }

    pub fn validate(&self) -> Result<()> {
        let VcaGrid {
            height,
            width,
            pool_h,
            pool_w,
        } = *self;
        if height == 0 || width == 0 || pool_h == 0 || pool_w == 0 {
            return Err(VcaError::config(format!("grid sizes must be positive: {self:?}")));
        }
        if height % pool_h != 0 || width % pool_w != 0 {
            return Err(VcaError::config(format!(
                "contrast grid must divide token grid: H={height}, W={width}, h={pool_h}, w={pool_w}"
            )));
        }
        Ok(())
    }

    /// `N = H * W`.
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    /// `n = h * w`.
    pub fn contrast_tokens(&self) -> usize {
        self.pool_h * self.pool_w
    }
}

/// 8 when it divides `side`, otherwise the largest divisor of `side` below 8.
pub fn default_pool_side(side: usize) -> usize {
    (1..=8.min(side)).rev().find(|k| side.is_multiple_of(*k)).unwrap_or(1)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VcaParams {
    pub wq: Projection,
    pub wk: Projection,
    pub wv: Projection,
    pub wo: Projection,
    /// `h x w x d` each, shared by all heads.
    pub e_pos: ParamId,
    pub e_neg: ParamId,
    pub lambda1: LambdaParams,
    pub lambda2: LambdaParams,
    pub rms_gain1: ParamId,
    pub rms_gain2: ParamId,
    pub width: usize,
    pub heads: usize,
    pub grid: VcaGrid,
    pub flags: VcaAblationFlags,
}

#[derive(Clone, Copy, Debug)]
pub struct ContrastTokens {
    pub t_pos: Var,
    pub t_neg: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Stage1Output {
    pub map_pos: Var,
    pub v_pos: Var,
    /// Absent for a vanilla stage.
    pub map_neg: Option<Var>,
    pub v_neg: Option<Var>,
    pub out: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Stage2Output {
    pub a1: Var,
    pub a2: Option<Var>,
    /// Final `N x n` weights; equal to `a1` for a vanilla stage.
    pub a: Var,
    pub out: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct VcaHeadTrace {
    pub tokens: ContrastTokens,
    pub stage1: Stage1Output,
    pub stage2: Stage2Output,
}

#[derive(Clone, Debug)]
pub struct VcaOutput {
    pub out: Var,
    pub lambda1: Var,
    pub lambda2: Var,
    /// Sample-major, then head.
    pub heads: Vec<VcaHeadTrace>,
}

/// Differential-stage constants shared by all heads of one forward.
#[derive(Clone, Copy, Debug)]
pub struct StageWeights<T> {
    pub lambda: Var,
    pub lambda_init: T,
    pub gain: Var,
}

/// Builds the positive and negative contrast tokens of one head from its
/// `N x d` queries.
pub fn generate_contrast_tokens<T: Real>(
    tape: &mut Tape<T>,
    q_head: Var,
    e_pos: Var,
    e_neg: Var,
    grid: &VcaGrid,
    flags: &VcaAblationFlags,
) -> Result<ContrastTokens> {
    grid.validate()?;
    let (rows, d) = tape.value(q_head).dims2()?;
    if rows != grid.tokens() {
        return Err(VcaError::config(format!(
            "query rows {rows} != H*W = {}",
            grid.tokens()
        )));
    }
    let n = grid.contrast_tokens();
    let needs_pool = [flags.pos_stream, flags.neg_stream]
        .iter()
        .any(|s| *s != StreamSource::Emb);
    let pooled = if needs_pool {
        let field = tape.reshape(q_head, vec![grid.height, grid.width, d])?;
        let p = tape.avg_pool_2d(field, grid.pool_h, grid.pool_w)?;
        Some(tape.reshape(p, vec![n, d])?)
    } else {
        None
    };
    let stream = |tape: &mut Tape<T>, source: StreamSource, emb: Var| -> Result<Var> {
        let expected = [grid.pool_h, grid.pool_w, d];
        if tape.shape(emb) != expected {
            return Err(VcaError::dim("contrast embedding", tape.shape(emb), &expected));
        }
        let emb = tape.reshape(emb, vec![n, d])?;
        match (source, pooled) {
            (StreamSource::Emb, _) => Ok(emb),
            (StreamSource::Pool, Some(p)) => Ok(p),
            (StreamSource::PoolEmb, Some(p)) => tape.add(p, emb),
            _ => unreachable!("pooled tokens exist whenever a stream pools"),
        }
    };
    let t_pos = stream(tape, flags.pos_stream, e_pos)?;
    let t_neg = stream(tape, flags.neg_stream, e_neg)?;
    Ok(ContrastTokens { t_pos, t_neg })
}

/// Stage I: both token streams attend to all keys and values; the results are
/// combined differentially into an `n x d` contrast summary.
pub fn stage1_global_contrast<T: Real>(
    tape: &mut Tape<T>,
    tokens: &ContrastTokens,
    k: Var,
    v: Var,
    weights: &StageWeights<T>,
    kind: StageKind,
) -> Result<Stage1Output> {
    let d = tape.value(k).dims2()?.1;
    let map_pos = scaled_scores(tape, tokens.t_pos, k, d)?;
    let v_pos = tape.matmul(map_pos, v)?;
    if kind == StageKind::Vanilla {
        return Ok(Stage1Output {
            map_pos,
            v_pos,
            map_neg: None,
            v_neg: None,
            out: v_pos,
        });
    }
    let map_neg = scaled_scores(tape, tokens.t_neg, k, d)?;
    let v_neg = tape.matmul(map_neg, v)?;
    let weighted = tape.scale_by(v_neg, weights.lambda)?;
    let contrast = tape.sub(v_pos, weighted)?;
    let normed = tape.rmsnorm(contrast, weights.gain, T::lit(RMS_EPS))?;
    let out = tape.scale(normed, T::one() - weights.lambda_init)?;
    Ok(Stage1Output {
        map_pos,
        v_pos,
        map_neg: Some(map_neg),
        v_neg: Some(v_neg),
        out,
    })
}

/// Stage II: every query attends to both token streams; the difference of
/// the two `N x n` maps reads out the Stage I summary.
pub fn stage2_patchwise_diff<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    tokens: &ContrastTokens,
    v_hat: Var,
    weights: &StageWeights<T>,
    kind: StageKind,
) -> Result<Stage2Output> {
    let d = tape.value(q).dims2()?.1;
    let a1 = scaled_scores(tape, q, tokens.t_pos, d)?;
    if kind == StageKind::Vanilla {
        let out = tape.matmul(a1, v_hat)?;
        return Ok(Stage2Output {
            a1,
            a2: None,
            a: a1,
            out,
        });
    }
    let a2 = scaled_scores(tape, q, tokens.t_neg, d)?;
    let weighted = tape.scale_by(a2, weights.lambda)?;
    let a = tape.sub(a1, weighted)?;
    let h_hat = tape.matmul(a, v_hat)?;
    let normed = tape.rmsnorm(h_hat, weights.gain, T::lit(RMS_EPS))?;
    let out = tape.scale(normed, T::one() - weights.lambda_init)?;
    Ok(Stage2Output {
        a1,
        a2: Some(a2),
        a,
        out,
    })
}

impl VcaParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        width: usize,
        heads: usize,
        grid: VcaGrid,
        flags: VcaAblationFlags,
        bias: bool,
        lambda_init: (f64, f64),
        init: &mut Initializer,
    ) -> Result<Self> {
        let d = check_heads(width, heads)?;
        grid.validate()?;
        let mut proj = |n: &str| Projection::init(store, &format!("{prefix}.{n}"), width, width, bias, init);
        let (wq, wk, wv, wo) = (proj("wq"), proj("wk"), proj("wv"), proj("wo"));
        let emb_shape = [grid.pool_h, grid.pool_w, d];
        let e_pos = store.add(
            format!("{prefix}.e_pos"),
            init.trunc_normal(&emb_shape, EMBED_INIT_STD),
            true,
        );
        let e_neg = store.add(
            format!("{prefix}.e_neg"),
            init.trunc_normal(&emb_shape, EMBED_INIT_STD),
            true,
        );
        let lambda1 = LambdaParams::init(store, &format!("{prefix}.lambda1"), d, lambda_init.0, init);
        let lambda2 = LambdaParams::init(store, &format!("{prefix}.lambda2"), d, lambda_init.1, init);
        let rms_gain1 = store.add(format!("{prefix}.rms_gain1"), Tensor::ones(&[d]), true);
        let rms_gain2 = store.add(format!("{prefix}.rms_gain2"), Tensor::ones(&[d]), true);
        Ok(VcaParams {
            wq,
            wk,
            wv,
            wo,
            e_pos,
            e_neg,
            lambda1,
            lambda2,
            rms_gain1,
            rms_gain2,
            width,
            heads,
            grid,
            flags,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Scalars this layer carries beyond the four projections shared with
    /// vanilla attention: both embeddings, both lambda sets (vectors and
    /// init scalars) and both RMSNorm gains.
    pub fn overhead_scalars<T: Real>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.e_pos).len()
            + store.get(self.e_neg).len()
            + self.lambda1.scalar_count(store)
            + self.lambda2.scalar_count(store)
            + store.get(self.rms_gain1).len()
            + store.get(self.rms_gain2).len()
    }

    /// `z` stacks samples of `H * W` tokens each.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, b: &Binding, z: Var) -> Result<VcaOutput> {
        check_width(tape, z, self.width, self.grid.tokens())?;
        let q = self.wq.apply(tape, b, z)?;
        let k = self.wk.apply(tape, b, z)?;
        let v = self.wv.apply(tape, b, z)?;
        let (h, mut output) = self.core(tape, b, q, k, v)?;
        output.out = self.wo.apply(tape, b, h)?;
        Ok(output)
    }

    /// Everything between the input projections and `Wo`: token generation
    /// and both stages for every head. Returns the concatenated heads.
    pub fn core<T: Real>(&self, tape: &mut Tape<T>, b: &Binding, q: Var, k: Var, v: Var) -> Result<(Var, VcaOutput)> {
        let tokens = self.grid.tokens();
        let samples = check_width(tape, q, self.width, tokens)?;
        let lambda1 = compute_lambda(tape, b, &self.lambda1)?;
        let lambda2 = compute_lambda(tape, b, &self.lambda2)?;
        let w1 = StageWeights {
            lambda: lambda1,
            lambda_init: self.lambda1.lambda_init_value(tape, b),
            gain: b[self.rms_gain1],
        };
        let w2 = StageWeights {
            lambda: lambda2,
            lambda_init: self.lambda2.lambda_init_value(tape, b),
            gain: b[self.rms_gain2],
        };

        let d = self.head_dim();
        let mut traces = Vec::with_capacity(samples * self.heads);
        let mut rows = Vec::with_capacity(samples);
        for s in 0..samples {
            let r = s * tokens..(s + 1) * tokens;
            let mut heads = Vec::with_capacity(self.heads);
            for m in 0..self.heads {
                let c = m * d..(m + 1) * d;
                let qh = tape.slice(q, r.clone(), c.clone())?;
                let kh = tape.slice(k, r.clone(), c.clone())?;
                let vh = tape.slice(v, r.clone(), c)?;
                let t = generate_contrast_tokens(tape, qh, b[self.e_pos], b[self.e_neg], &self.grid, &self.flags)?;
                let s1 = stage1_global_contrast(tape, &t, kh, vh, &w1, self.flags.stage1)?;
                let s2 = stage2_patchwise_diff(tape, qh, &t, s1.out, &w2, self.flags.stage2)?;
                heads.push(s2.out);
                traces.push(VcaHeadTrace {
                    tokens: t,
                    stage1: s1,
                    stage2: s2,
                });
            }
            rows.push(tape.concat_cols(&heads)?);
        }
        let h = tape.concat_rows(&rows)?;
        Ok((
            h,
            VcaOutput {
                out: h,
                lambda1,
                lambda2,
                heads: traces,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(
        width: usize,
        heads: usize,
        grid: VcaGrid,
        flags: VcaAblationFlags,
        seed: u64,
    ) -> (ParamStore<f64>, VcaParams, Initializer) {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let p = VcaParams::init(
            &mut store,
            "vca",
            width,
            heads,
            grid,
            flags,
            false,
            (0.8, 0.8),
            &mut init,
        )
        .unwrap();
        for e in store.entries_mut().iter_mut().filter(|e| e.trainable) {
            e.value = init.normal(e.value.shape(), 0.5);
        }
        (store, p, init)
    }

    #[test]
    fn default_pool_rule() {
        assert_eq!(default_pool_side(14), 7);
        assert_eq!(default_pool_side(16), 8);
        assert_eq!(default_pool_side(4), 4);
        assert_eq!(default_pool_side(9), 3);
        assert_eq!(default_pool_side(11), 1);
    }

    #[test]
    fn grid_divisibility() {
        assert!(VcaGrid::new(4, 4, 2, 2).is_ok());
        assert!(matches!(VcaGrid::new(4, 6, 3, 2), Err(VcaError::Config(_))));
        assert!(matches!(VcaGrid::new(4, 4, 0, 2), Err(VcaError::Config(_))));
    }

    #[test]
    fn zero_embeddings_give_pooled_queries() {
        let grid = VcaGrid::new(4, 4, 2, 2).unwrap();
        let mut init = Initializer::new(1);
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(init.normal(&[16, 3], 1.0));
        let zero = tape.constant(Tensor::zeros(&[2, 2, 3]));
        let t = generate_contrast_tokens(&mut tape, q, zero, zero, &grid, &VcaAblationFlags::default()).unwrap();
        assert_eq!(tape.value(t.t_pos), tape.value(t.t_neg));
        assert_eq!(tape.shape(t.t_pos), &[4, 3]);
        // cell (0, 1) pools tokens (0,2), (0,3), (1,2), (1,3)
        let qv = tape.value(q).clone();
        for ch in 0..3 {
            let mean = [2, 3, 6, 7].iter().map(|&r| qv.at(r, ch)).sum::<f64>() / 4.0;
            assert!((tape.value(t.t_pos).at(1, ch) - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_queries_plus_embeddings() {
        let grid = VcaGrid::new(4, 2, 2, 1).unwrap();
        let mut init = Initializer::new(2);
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::full(&[8, 2], 0.75));
        let ep: Tensor<f64> = init.normal(&[2, 1, 2], 1.0);
        let en: Tensor<f64> = init.normal(&[2, 1, 2], 1.0);
        let (epv, env) = (tape.constant(ep.clone()), tape.constant(en.clone()));
        let t = generate_contrast_tokens(&mut tape, q, epv, env, &grid, &VcaAblationFlags::default()).unwrap();
        for i in 0..4 {
            assert!((tape.value(t.t_pos).data()[i] - (0.75 + ep.data()[i])).abs() < 1e-15);
            assert!((tape.value(t.t_neg).data()[i] - (0.75 + en.data()[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn stream_sources() {
        let grid = VcaGrid::new(2, 2, 1, 1).unwrap();
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_fn(&[4, 1], |i| i as f64));
        let ep = tape.constant(Tensor::full(&[1, 1, 1], 10.0));
        let en = tape.constant(Tensor::full(&[1, 1, 1], -10.0));
        let flags = VcaAblationFlags {
            pos_stream: StreamSource::Emb,
            neg_stream: StreamSource::Pool,
            ..Default::default()
        };
        let t = generate_contrast_tokens(&mut tape, q, ep, en, &grid, &flags).unwrap();
        assert_eq!(tape.value(t.t_pos).data(), &[10.0]);
        assert_eq!(tape.value(t.t_neg).data(), &[1.5]);
    }

    #[test]
    fn wrong_token_count() {
        let grid = VcaGrid::new(4, 4, 2, 2).unwrap();
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::zeros(&[12, 3]));
        let e = tape.constant(Tensor::zeros(&[2, 2, 3]));
        let r = generate_contrast_tokens(&mut tape, q, e, e, &grid, &VcaAblationFlags::default());
        assert!(matches!(r, Err(VcaError::Config(_))));
    }

    #[test]
    fn stage1_single_token_collapse() {
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::full(&[1, 1], 0.3));
        let tokens = ContrastTokens { t_pos: t, t_neg: t };
        let k = tape.constant(Tensor::full(&[1, 1], -1.2));
        let v = tape.constant(Tensor::full(&[1, 1], 2.0));
        let lambda = tape.constant(Tensor::scalar(0.8));
        let gain = tape.constant(Tensor::ones(&[1]));
        let w = StageWeights {
            lambda,
            lambda_init: 0.8,
            gain,
        };
        let s1 = stage1_global_contrast(&mut tape, &tokens, k, v, &w, StageKind::Vca).unwrap();
        let out = tape.value(s1.out).item();
        // rmsnorm(0.4) with eps 1e-5 is 0.4 / sqrt(0.16 + 1e-5)
        let expect = 0.2 * 0.4 / (0.16f64 + RMS_EPS).sqrt();
        assert!((out - expect).abs() < 1e-15);
        assert!((out - 0.2).abs() < 1e-5);
    }

    #[test]
    fn stage2_single_contrast_token() {
        let mut tape = Tape::<f64>::new();
        let mut init = Initializer::new(4);
        let q = tape.constant(init.normal(&[6, 3], 1.0));
        let t = tape.constant(init.normal(&[1, 3], 1.0));
        let tokens = ContrastTokens { t_pos: t, t_neg: t };
        let v_hat = tape.constant(init.normal(&[1, 3], 1.0));
        let lambda = tape.constant(Tensor::scalar(0.35));
        let gain = tape.constant(Tensor::ones(&[3]));
        let w = StageWeights {
            lambda,
            lambda_init: 0.8,
            gain,
        };
        let s2 = stage2_patchwise_diff(&mut tape, q, &tokens, v_hat, &w, StageKind::Vca).unwrap();
        assert!(tape.value(s2.a1).data().iter().all(|&x| x == 1.0));
        assert!(tape.value(s2.a).data().iter().all(|&x| (x - 0.65).abs() < 1e-15));
        let rows: Vec<&[f64]> = tape.value(s2.out).data().chunks(3).collect();
        assert!(rows.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn shapes_and_row_sums() {
        for &(h, w, ph, pw, c, m) in &[(2, 2, 1, 1, 4, 1), (4, 4, 2, 2, 8, 2), (8, 8, 4, 2, 12, 3)] {
            let grid = VcaGrid::new(h, w, ph, pw).unwrap();
            let (store, p, mut init) = layer(c, m, grid, VcaAblationFlags::default(), 9);
            let mut tape = Tape::new();
            let b = store.bind(&mut tape);
            let z = tape.constant(init.normal(&[2 * h * w, c], 1.0));
            let out = p.forward(&mut tape, &b, z).unwrap();
            assert_eq!(tape.shape(out.out), &[2 * h * w, c]);
            let lambda2 = tape.value(out.lambda2).item();
            let (nn, n) = (grid.tokens(), grid.contrast_tokens());
            for tr in &out.heads {
                assert_eq!(tape.shape(tr.stage1.map_pos), &[n, nn]);
                assert_eq!(tape.shape(tr.stage2.a), &[nn, n]);
                for s in tape.value(tr.stage1.map_pos).row_sums() {
                    assert!((s - 1.0).abs() < 1e-10);
                }
                for s in tape.value(tr.stage2.a).row_sums() {
                    assert!((s - (1.0 - lambda2)).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn ablation_arms_differ() {
        let grid = VcaGrid::new(4, 4, 2, 2).unwrap();
        let arms = [
            (StageKind::Vca, StageKind::Vanilla),
            (StageKind::Vanilla, StageKind::Vca),
            (StageKind::Vca, StageKind::Vca),
        ];
        let mut outs = Vec::new();
        for (s1, s2) in arms {
            let flags = VcaAblationFlags {
                stage1: s1,
                stage2: s2,
                ..Default::default()
            };
            let (store, p, _) = layer(8, 2, grid, flags, 10);
            let z: Tensor<f64> = Initializer::new(99).normal(&[16, 8], 1.0);
            let mut tape = Tape::new();
            let b = store.bind(&mut tape);
            let zv = tape.constant(z);
            let out = p.forward(&mut tape, &b, zv).unwrap();
            outs.push(tape.value(out.out).clone());
        }
        for i in 0..3 {
            for j in i + 1..3 {
                assert!(
                    outs[i].max_abs_diff(&outs[j]).unwrap() > 1e-6,
                    "arms {i} and {j} coincide"
                );
            }
        }
    }
}
