//! Cost model for the attention core, exact multiply counting against it,
//! and log-log scaling fits over token-count sweeps.
//!
//! The core is everything between the input projections and `Wo`. Softmax,
//! norm and other elementwise work is not counted; only matrix-product
//! multiplies are.

use std::io::Write;
use std::time::Instant;

use crate::attention::{AttentionKind, DiffAttnParams, LambdaParams, MhsaParams, Projection};
use crate::error::{Result, VcaError};
use crate::tensor::flops::count_mults;
use crate::tensor::{init::Initializer, Binding, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::vca::{
    stage1_global_contrast, stage2_patchwise_diff, ContrastTokens, StageKind, StageWeights, VcaAblationFlags, VcaGrid,
    VcaParams,
};

pub const CSV_HEADER: &str = "kind,N,n,C,M,analytic_mults,measured_mults,wall_time_ns";

/// Smallest sweep a scaling fit accepts.
pub const MIN_SWEEP_POINTS: usize = 5;
pub const MIN_SWEEP_SPAN: f64 = 16.0;

/// Shortest timed run; cheap shapes repeat the core to reach it.
pub const MIN_RUN_NS: u64 = 50_000_000;

/// One attention layer shape: `N` tokens, `n` contrast tokens (VCA only),
/// width `C` and `M` heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BenchShape {
    pub tokens: usize,
    pub contrast: usize,
    pub width: usize,
    pub heads: usize,
}

impl BenchShape {
    pub fn new(tokens: usize, contrast: usize, width: usize, heads: usize) -> Self {
        BenchShape {
            tokens,
            contrast,
            width,
            heads,
        }
    }

    /// Head dimension `d = C / M`.
    pub fn validate(&self, kind: AttentionKind) -> Result<usize> {
        let BenchShape {
            tokens,
            contrast,
            width,
            heads,
        } = *self;
        if tokens == 0 || width == 0 || heads == 0 {
            return Err(VcaError::config(format!("bench shape has a zero dimension: {self:?}")));
        }
        if width % heads != 0 {
            return Err(VcaError::config(format!("C = {width} is not divisible by M = {heads}")));
        }
        let d = width / heads;
        match kind {
            AttentionKind::Vca if contrast == 0 || contrast > tokens => Err(VcaError::config(format!(
                "contrast tokens n = {contrast} must lie in 1..=N = {tokens}"
            ))),
            AttentionKind::Diff if d % 2 != 0 => Err(VcaError::config(format!(
                "differential attention needs an even head dim, got {d}"
            ))),
            _ => Ok(d),
        }
    }
}

/// Core multiplies of one layer over one sample.
///
/// VCA: `M * (4Nnd + 3Nnd)`. MHSA and differential attention:
/// `M * 2N^2 d` (map build plus map times values; the differential variant
/// builds two maps from half-width queries).
pub fn analytic_flops(kind: AttentionKind, shape: BenchShape) -> Result<u64> {
    let d = shape.validate(kind)? as u64;
    let (m, n_tok, n_con) = (shape.heads as u64, shape.tokens as u64, shape.contrast as u64);
    Ok(match kind {
        AttentionKind::Vca => 7 * m * n_tok * n_con * d,
        AttentionKind::Mhsa | AttentionKind::Diff => 2 * m * n_tok * n_tok * d,
    })
}

/// `4 N C^2`: `Wq`, `Wk`, `Wv` and `Wo`, the same for every kind.
pub fn projection_flops(shape: BenchShape) -> u64 {
    4 * shape.tokens as u64 * (shape.width as u64).pow(2)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopReport {
    pub kind: AttentionKind,
    pub shape: BenchShape,
    pub head_dim: usize,
    pub analytic_mults: u64,
    pub measured_mults: u64,
    /// Measured multiplies of the four projections.
    pub projection_mults: u64,
    pub wall_time_ns: Option<u64>,
}

impl FlopReport {
    pub fn total_mults(&self) -> u64 {
        self.measured_mults + self.projection_mults
    }

    pub fn csv_row(&self) -> String {
        let s = self.shape;
        let wall = self.wall_time_ns.map(|t| t.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.kind, s.tokens, s.contrast, s.width, s.heads, self.analytic_mults, self.measured_mults, wall
        )
    }
}

/// Most nearly square `H x W` token grid with an `h x w` pooling grid of
/// `n` cells, if `n` tiles `N` at all.
pub fn grid_for(tokens: usize, contrast: usize) -> Option<VcaGrid> {
    let divisors = |x: usize| (1..=x).filter(move |k| x.is_multiple_of(*k));
    let mut best: Option<(usize, usize, VcaGrid)> = None;
    for h in divisors(tokens) {
        let w = tokens / h;
        for ph in divisors(contrast) {
            let pw = contrast / ph;
            if h % ph != 0 || !w.is_multiple_of(pw) {
                continue;
            }
            let score = (h.abs_diff(w), ph.abs_diff(pw));
            if best.as_ref().is_none_or(|b| score < (b.0, b.1)) {
                let grid = VcaGrid::new(h, w, ph, pw).ok()?;
                best = Some((score.0, score.1, grid));
            }
        }
    }
    best.map(|b| b.2)
}

/// Stage weights and tokens for a VCA core whose contrast count does not
/// tile the token grid. The stages run on free `n x d` tokens per head
/// (the embedding-only stream), which costs the same multiplies.
#[derive(Clone, Debug)]
struct FreeTokens {
    lambda1: LambdaParams,
    lambda2: LambdaParams,
    gain1: ParamId,
    gain2: ParamId,
    /// Per head: positive and negative tokens.
    streams: Vec<(ParamId, ParamId)>,
}

#[derive(Clone, Debug)]
enum Layer {
    Mhsa(MhsaParams),
    Diff(DiffAttnParams),
    Vca(VcaParams),
    VcaFree { proj: [Projection; 4], free: FreeTokens },
}

/// One attention layer with random weights and a random single-sample input,
/// ready to be counted or timed.
#[derive(Clone, Debug)]
pub struct CoreHarness<T> {
    pub kind: AttentionKind,
    pub shape: BenchShape,
    store: ParamStore<T>,
    layer: Layer,
    z: Tensor<T>,
    /// Projected inputs of the core, computed once.
    inputs: Vec<Tensor<T>>,
}

impl<T: Real> CoreHarness<T> {
    pub fn new(kind: AttentionKind, shape: BenchShape, seed: u64) -> Result<Self> {
        let d = shape.validate(kind)?;
        let BenchShape {
            tokens,
            contrast,
            width,
            heads,
        } = shape;
        let mut init = Initializer::new(seed);
        let mut store = ParamStore::new();
        let layer = match kind {
            AttentionKind::Mhsa => Layer::Mhsa(MhsaParams::init(&mut store, "attn", width, heads, false, &mut init)?),
            AttentionKind::Diff => Layer::Diff(DiffAttnParams::init(
                &mut store, "attn", width, heads, false, 0.8, &mut init,
            )?),
            AttentionKind::Vca => match grid_for(tokens, contrast) {
                Some(grid) => Layer::Vca(VcaParams::init(
                    &mut store,
                    "attn",
                    width,
                    heads,
                    grid,
                    VcaAblationFlags::default(),
                    false,
                    (0.8, 0.8),
                    &mut init,
                )?),
                None => {
                    let mut p =
                        |n: &str| Projection::init(&mut store, &format!("attn.{n}"), width, width, false, &mut init);
                    let proj = [p("wq"), p("wk"), p("wv"), p("wo")];
                    let lambda1 = LambdaParams::init(&mut store, "attn.lambda1", d, 0.8, &mut init);
                    let lambda2 = LambdaParams::init(&mut store, "attn.lambda2", d, 0.8, &mut init);
                    let gain1 = store.add("attn.rms_gain1", Tensor::ones(&[d]), true);
                    let gain2 = store.add("attn.rms_gain2", Tensor::ones(&[d]), true);
                    let streams = (0..heads)
                        .map(|m| {
                            let pos = store.add(format!("attn.t_pos{m}"), init.normal(&[contrast, d], 1.0), true);
                            let neg = store.add(format!("attn.t_neg{m}"), init.normal(&[contrast, d], 1.0), true);
                            (pos, neg)
                        })
                        .collect();
                    Layer::VcaFree {
                        proj,
                        free: FreeTokens {
                            lambda1,
                            lambda2,
                            gain1,
                            gain2,
                            streams,
                        },
                    }
                }
            },
        };
        let z = init.normal(&[tokens, width], 1.0);
        let mut harness = CoreHarness {
            kind,
            shape,
            store,
            layer,
            z,
            inputs: Vec::new(),
        };
        let mut tape = Tape::new();
        let b = harness.store.bind_frozen(&mut tape);
        let vars = harness.project_inputs(&mut tape, &b)?;
        harness.inputs = vars.iter().map(|&v| tape.value(v).clone()).collect();
        Ok(harness)
    }

    fn input_projections(&self) -> Vec<&Projection> {
        match &self.layer {
            Layer::Mhsa(p) => vec![&p.wq, &p.wk, &p.wv],
            Layer::Diff(p) => vec![&p.wq1, &p.wq2, &p.wk1, &p.wk2, &p.wv],
            Layer::Vca(p) => vec![&p.wq, &p.wk, &p.wv],
            Layer::VcaFree { proj, .. } => proj[..3].iter().collect(),
        }
    }

    fn output_projection(&self) -> &Projection {
        match &self.layer {
            Layer::Mhsa(p) => &p.wo,
            Layer::Diff(p) => &p.wo,
            Layer::Vca(p) => &p.wo,
            Layer::VcaFree { proj, .. } => &proj[3],
        }
    }

    fn project_inputs(&self, tape: &mut Tape<T>, b: &Binding) -> Result<Vec<Var>> {
        let z = tape.constant(self.z.clone());
        self.input_projections().iter().map(|p| p.apply(tape, b, z)).collect()
    }

    fn core(&self, tape: &mut Tape<T>, b: &Binding, x: &[Var]) -> Result<Var> {
        let tokens = self.shape.tokens;
        match &self.layer {
            Layer::Mhsa(p) => Ok(p.core(tape, x[0], x[1], x[2], tokens)?.0),
            Layer::Diff(p) => Ok(p.core(tape, b, [x[0], x[1], x[2], x[3]], x[4], tokens)?.0),
            Layer::Vca(p) => Ok(p.core(tape, b, x[0], x[1], x[2])?.0),
            Layer::VcaFree { free, .. } => {
                let d = self.shape.width / self.shape.heads;
                let weights = |tape: &mut Tape<T>, lp: &LambdaParams, gain: ParamId| -> Result<StageWeights<T>> {
                    Ok(StageWeights {
                        lambda: crate::attention::compute_lambda(tape, b, lp)?,
                        lambda_init: lp.lambda_init_value(tape, b),
                        gain: b[gain],
                    })
                };
                let w1 = weights(tape, &free.lambda1, free.gain1)?;
                let w2 = weights(tape, &free.lambda2, free.gain2)?;
                let mut heads = Vec::with_capacity(free.streams.len());
                for (m, &(pos, neg)) in free.streams.iter().enumerate() {
                    let c = m * d..(m + 1) * d;
                    let qh = tape.slice(x[0], 0..tokens, c.clone())?;
                    let kh = tape.slice(x[1], 0..tokens, c.clone())?;
                    let vh = tape.slice(x[2], 0..tokens, c)?;
                    let t = ContrastTokens {
                        t_pos: b[pos],
                        t_neg: b[neg],
                    };
                    let s1 = stage1_global_contrast(tape, &t, kh, vh, &w1, StageKind::Vca)?;
                    heads.push(stage2_patchwise_diff(tape, qh, &t, s1.out, &w2, StageKind::Vca)?.out);
                }
                tape.concat_cols(&heads)
            }
        }
    }

    /// One pass of the core on the precomputed projected inputs.
    pub fn run_core(&self) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = self.store.bind_frozen(&mut tape);
        let x: Vec<Var> = self.inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let h = self.core(&mut tape, &b, &x)?;
        Ok(tape.value(h).clone())
    }

    /// Full layer forward: input projections, core, `Wo`.
    pub fn run_layer(&self) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = self.store.bind_frozen(&mut tape);
        let x = self.project_inputs(&mut tape, &b)?;
        let h = self.core(&mut tape, &b, &x)?;
        let out = self.output_projection().apply(&mut tape, &b, h)?;
        Ok(tape.value(out).clone())
    }

    /// Exact multiplies of `(core, whole layer)`.
    pub fn count(&self) -> Result<(u64, u64)> {
        let (core, core_mults) = count_mults(|| self.run_core());
        core?;
        let (layer, layer_mults) = count_mults(|| self.run_layer());
        layer?;
        Ok((core_mults, layer_mults))
    }

    /// Median core wall time in nanoseconds over `repeats` timed runs; see
    /// [`time_sweep`].
    pub fn time_core(&self, repeats: usize) -> Result<u64> {
        Ok(time_sweep(std::slice::from_ref(self), repeats)?[0])
    }

    /// Calls per timed run so that one run spans at least [`MIN_RUN_NS`].
    /// Doubles as the discarded warm-up.
    fn calls_per_run(&self) -> Result<u64> {
        let start = Instant::now();
        std::hint::black_box(self.run_core()?);
        let single = (start.elapsed().as_nanos() as u64).max(1);
        Ok(MIN_RUN_NS.div_ceil(single).max(1))
    }

    fn timed_run(&self, calls: u64) -> Result<u64> {
        let start = Instant::now();
        for _ in 0..calls {
            std::hint::black_box(self.run_core()?);
        }
        Ok(start.elapsed().as_nanos() as u64 / calls)
    }
}

/// Median per-call core wall time of each harness, in nanoseconds.
///
/// Every harness first gets one discarded warm-up run, which also sizes its
/// timed runs: a run calls the core back to back until it spans at least
/// [`MIN_RUN_NS`]. The `repeats` rounds then visit the harnesses in turn,
/// so slow drift of the machine is spread over all sweep points.
pub fn time_sweep<T: Real>(harnesses: &[CoreHarness<T>], repeats: usize) -> Result<Vec<u64>> {
    if repeats == 0 {
        return Err(VcaError::config("timing needs at least one repeat"));
    }
    let calls = harnesses
        .iter()
        .map(|h| h.calls_per_run())
        .collect::<Result<Vec<_>>>()?;
    let mut samples = vec![Vec::with_capacity(repeats); harnesses.len()];
    for _ in 0..repeats {
        for ((h, &c), out) in harnesses.iter().zip(&calls).zip(&mut samples) {
            out.push(h.timed_run(c)?);
        }
    }
    Ok(samples
        .into_iter()
        .map(|mut s| {
            s.sort_unstable();
            s[repeats / 2]
        })
        .collect())
}

/// Counts one layer and checks the count against the cost model: core
/// multiplies against [`analytic_flops`] and the remainder against
/// [`projection_flops`], both as exact integers.
pub fn measure_mults(kind: AttentionKind, shape: BenchShape, seed: u64) -> Result<FlopReport> {
    let analytic = analytic_flops(kind, shape)?;
    let harness = CoreHarness::<f64>::new(kind, shape, seed)?;
    let (core, layer) = harness.count()?;
    if core != analytic {
        return Err(VcaError::ModelViolation {
            kind: format!("{kind} core"),
            analytic,
            measured: core,
        });
    }
    let projections = layer - core;
    if projections != projection_flops(shape) {
        return Err(VcaError::ModelViolation {
            kind: format!("{kind} projections"),
            analytic: projection_flops(shape),
            measured: projections,
        });
    }
    Ok(FlopReport {
        kind,
        shape,
        head_dim: shape.width / shape.heads,
        analytic_mults: analytic,
        measured_mults: core,
        projection_mults: projections,
        wall_time_ns: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Metric {
    /// Whole-layer multiplies, core plus projections.
    Mults,
    /// Median core wall time.
    WallTime,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingReport {
    pub kind: AttentionKind,
    pub metric: Metric,
    /// `(N, metric)`
    pub points: Vec<(usize, f64)>,
    pub slope: f64,
    /// Root-mean-square residual of the fit in log space.
    pub residual: f64,
}

/// Ordinary least squares of `ln metric` on `ln N`; returns
/// `(slope, rms residual)`.
pub fn fit_log_log(points: &[(usize, f64)]) -> Result<(f64, f64)> {
    if points.len() < MIN_SWEEP_POINTS {
        return Err(VcaError::config(format!(
            "scaling fit needs at least {MIN_SWEEP_POINTS} points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|&(n, m)| n == 0 || !(m > 0.0 && m.is_finite())) {
        return Err(VcaError::config(
            "scaling fit needs positive N and positive finite metrics",
        ));
    }
    let lo = points.iter().map(|p| p.0).min().unwrap_or(0) as f64;
    let hi = points.iter().map(|p| p.0).max().unwrap_or(0) as f64;
    if hi / lo < MIN_SWEEP_SPAN {
        return Err(VcaError::config(format!(
            "sweep spans {}x in N, needs at least {MIN_SWEEP_SPAN}x",
            hi / lo
        )));
    }
    let xs: Vec<f64> = points.iter().map(|p| (p.0 as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    Ok((slope, (sse / k).sqrt()))
}

/// Measures `metric` at every `N` of the sweep (other dimensions taken from
/// `base`) and fits the log-log slope.
pub fn fit_scaling(
    kind: AttentionKind,
    sweep: &[usize],
    base: BenchShape,
    metric: Metric,
    repeats: usize,
    seed: u64,
) -> Result<ScalingReport> {
    let shapes: Vec<BenchShape> = sweep.iter().map(|&tokens| BenchShape { tokens, ..base }).collect();
    let values: Vec<f64> = match metric {
        Metric::Mults => shapes
            .iter()
            .map(|&s| Ok(measure_mults(kind, s, seed)?.total_mults() as f64))
            .collect::<Result<_>>()?,
        Metric::WallTime => {
            let hs = shapes
                .iter()
                .map(|&s| CoreHarness::<f32>::new(kind, s, seed))
                .collect::<Result<Vec<_>>>()?;
            time_sweep(&hs, repeats)?.into_iter().map(|t| t as f64).collect()
        }
    };
    let points: Vec<(usize, f64)> = sweep.iter().copied().zip(values).collect();
    let (slope, residual) = fit_log_log(&points)?;
    Ok(ScalingReport {
        kind,
        metric,
        points,
        slope,
        residual,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BenchConfig {
    pub kinds: Vec<AttentionKind>,
    pub sweep: Vec<usize>,
    pub contrast: usize,
    pub width: usize,
    pub heads: usize,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            kinds: vec![AttentionKind::Mhsa, AttentionKind::Vca],
            sweep: vec![64, 128, 256, 512, 1024],
            contrast: 16,
            width: 64,
            heads: 1,
            repeats: 5,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kinds.is_empty() || self.sweep.is_empty() {
            return Err(VcaError::config("bench needs at least one kind and one sweep point"));
        }
        for &kind in &self.kinds {
            for &tokens in &self.sweep {
                BenchShape::new(tokens, self.contrast, self.width, self.heads).validate(kind)?;
            }
        }
        Ok(())
    }
}

/// Counts and, when `repeats > 0`, times every `(kind, N)` point, kind-major.
pub fn run_bench(cfg: &BenchConfig, seed: u64) -> Result<Vec<FlopReport>> {
    cfg.validate()?;
    let mut reports = Vec::with_capacity(cfg.kinds.len() * cfg.sweep.len());
    for &kind in &cfg.kinds {
        let shapes: Vec<BenchShape> = cfg
            .sweep
            .iter()
            .map(|&tokens| BenchShape::new(tokens, cfg.contrast, cfg.width, cfg.heads))
            .collect();
        let mut rows = shapes
            .iter()
            .map(|&s| measure_mults(kind, s, seed))
            .collect::<Result<Vec<_>>>()?;
        if cfg.repeats > 0 {
            let hs = shapes
                .iter()
                .map(|&s| CoreHarness::<f32>::new(kind, s, seed))
                .collect::<Result<Vec<_>>>()?;
            for (row, t) in rows.iter_mut().zip(time_sweep(&hs, cfg.repeats)?) {
                row.wall_time_ns = Some(t);
            }
        }
        reports.extend(rows);
    }
    Ok(reports)
}

pub fn write_csv(reports: &[FlopReport], mut out: impl Write) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in reports {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}
