//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! fails. Runs without the libtest harness so the lines always print.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{max_abs_diff, to_mat, Mat};
use vca::attention::{AttentionKind, DiffAttnParams, MhsaParams};
use vca::bench::{fit_scaling, measure_mults, BenchShape, Metric};
use vca::commands::{cmd_train, gradcheck_target, CHECKPOINT, LOSS_LOG, METRICS};
use vca::config::{Command, GradTarget, GradcheckConfig, RunConfig};
use vca::tensor::{init::Initializer, ParamStore, Tape, Tensor};
use vca::vca::{StageKind, StreamSource, VcaAblationFlags, VcaGrid, VcaParams};
use vca::vit::{AttentionLayer, BackboneConfig, Block, VitModel};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: vca::VcaError) -> String {
    e.to_string()
}

#[derive(Clone, Debug)]
struct Case {
    grid: VcaGrid,
    width: usize,
    heads: usize,
    samples: usize,
    bias: bool,
    flags: VcaAblationFlags,
    lambda_init: (f64, f64),
    param_std: f64,
}

/// Every `(H, W, h, w)` with `H W <= max_tokens`, `h | H`, `w | W` and
/// `h w <= max_contrast`.
fn grids(max_tokens: usize, max_contrast: usize) -> Vec<VcaGrid> {
    let mut out = Vec::new();
    for hh in 1..=max_tokens {
        for ww in 1..=max_tokens / hh {
            for ph in (1..=hh).filter(|p| hh % p == 0) {
                for pw in (1..=ww).filter(|p| ww % p == 0) {
                    if ph * pw <= max_contrast && hh * ww >= 2 {
                        out.push(VcaGrid::new(hh, ww, ph, pw).unwrap());
                    }
                }
            }
        }
    }
    out
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, xs: &[T]) -> T {
    xs[rng.random_range(0..xs.len())]
}

fn random_case(rng: &mut ChaCha8Rng, grids: &[VcaGrid], shapes: &[(usize, usize)], ablate: bool) -> Case {
    let (width, heads) = pick(rng, shapes);
    let flags = if ablate {
        let stages = [StageKind::Vca, StageKind::Vanilla];
        let streams = [StreamSource::Emb, StreamSource::Pool, StreamSource::PoolEmb];
        VcaAblationFlags {
            stage1: pick(rng, &stages),
            stage2: pick(rng, &stages),
            pos_stream: pick(rng, &streams),
            neg_stream: pick(rng, &streams),
        }
    } else {
        VcaAblationFlags::default()
    };
    Case {
        grid: pick(rng, grids),
        width,
        heads,
        samples: rng.random_range(1..=2),
        bias: rng.random_bool(0.5),
        flags,
        lambda_init: (rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)),
        param_std: rng.random_range(0.2..0.8),
    }
}

struct Layers {
    store: ParamStore<f64>,
    mhsa: MhsaParams,
    diff: DiffAttnParams,
    vca: VcaParams,
    z: Tensor<f64>,
}

fn build(case: &Case, seed: u64) -> Layers {
    let mut init = Initializer::new(seed);
    let mut store = ParamStore::new();
    let (c, m) = (case.width, case.heads);
    let mhsa = MhsaParams::init(&mut store, "mhsa", c, m, case.bias, &mut init).unwrap();
    let diff = DiffAttnParams::init(&mut store, "diff", c, m, case.bias, case.lambda_init.0, &mut init).unwrap();
    let vca = VcaParams::init(
        &mut store,
        "vca",
        c,
        m,
        case.grid,
        case.flags,
        case.bias,
        case.lambda_init,
        &mut init,
    )
    .unwrap();
    for e in store.entries_mut().iter_mut().filter(|e| e.trainable) {
        e.value = init.normal(e.value.shape(), case.param_std);
    }
    let z = init.normal(&[case.samples * case.grid.tokens(), c], 1.0);
    Layers {
        store,
        mhsa,
        diff,
        vca,
        z,
    }
}

fn c1_scope() -> Outcome {
    Ok(
        "ImageNet classification (DeiT-T 72.2 -> 75.6) and DiT/SiT FID gains need full ImageNet \
        training and are out of scope; the criteria below are property-based substitutes"
            .into(),
    )
}

fn c2_gradients() -> Outcome {
    let g = GradcheckConfig {
        grid: (4, 4),
        pool: (2, 2),
        width: 8,
        heads: 2,
        step: 1e-5,
        tolerance: 1e-4,
        ..GradcheckConfig::default()
    };
    let start = Instant::now();
    let mut parts = Vec::new();
    for target in GradTarget::ALL {
        let r = gradcheck_target(target, &g, 0).map_err(err)?;
        let worst = r.max_rel_err();
        ensure(worst < 1e-4, || format!("{target}: max rel err {worst:.3e} >= 1e-4"))?;
        parts.push(format!("{target} {worst:.1e} ({} elems)", r.elements()));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!("N=16 n=4 C=8 M=2: {} in {secs:.1} s", parts.join(", ")))
}

fn c3_oracle() -> Outcome {
    let grids = grids(8, 4);
    let shapes = [(4, 1), (4, 2), (8, 1), (8, 2), (8, 4)];
    let mut worst = 0.0f64;
    let mut forwards = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let case = random_case(&mut rng, &grids, &shapes, seed % 2 == 1);
        let l = build(&case, seed);
        let tokens = case.grid.tokens();
        let zm = to_mat(&l.z);
        let mut tape = Tape::new();
        let b = l.store.bind_frozen(&mut tape);
        let z = tape.constant(l.z.clone());
        let got = [
            l.mhsa.forward(&mut tape, &b, z, tokens).map_err(err)?.out,
            l.diff.forward(&mut tape, &b, z, tokens).map_err(err)?.out,
            l.vca.forward(&mut tape, &b, z).map_err(err)?.out,
        ];
        let want = [
            common::mhsa(&l.store, "mhsa", &zm, tokens, case.heads),
            common::diff(&l.store, "diff", &zm, tokens, case.heads),
            common::vca(&l.store, "vca", &zm, case.heads, &case.grid, &case.flags),
        ];
        for (name, (g, w)) in ["mhsa", "diff", "vca"].iter().zip(got.iter().zip(&want)) {
            let e = max_abs_diff(&to_mat(tape.value(*g)), w);
            ensure(e <= 1e-10, || format!("seed {seed} {name} {case:?}: max abs {e:.3e}"))?;
            worst = worst.max(e);
            forwards += 1;
        }

        // one full block per seed, cycling the attention kind
        let kind = AttentionKind::ALL[seed as usize % 3];
        let cfg = BackboneConfig {
            image_size: (case.grid.height, case.grid.width, 1),
            patch_size: 1,
            depth: 1,
            width: case.width,
            heads: case.heads,
            pool: Some((case.grid.pool_h, case.grid.pool_w)),
            attention_kind: kind,
            vca_flags: case.flags,
            bias: case.bias,
            ..Default::default()
        };
        let mut init = Initializer::new(seed ^ 0xb10c);
        let mut store = ParamStore::new();
        let blk = Block::init(&mut store, "blk", &cfg, 0, &mut init).map_err(err)?;
        for e in store.entries_mut().iter_mut().filter(|e| e.trainable) {
            e.value = init.normal(e.value.shape(), case.param_std);
        }
        let mut tape = Tape::new();
        let b = store.bind_frozen(&mut tape);
        let z = tape.constant(l.z.clone());
        let out = blk.forward(&mut tape, &b, z, tokens).map_err(err)?;
        let want = common::block(&store, "blk", &zm, |x: &Mat| match &blk.attn {
            AttentionLayer::Mhsa(_) => common::mhsa(&store, "blk.attn", x, tokens, case.heads),
            AttentionLayer::Diff(_) => common::diff(&store, "blk.attn", x, tokens, case.heads),
            AttentionLayer::Vca(_) => common::vca(&store, "blk.attn", x, case.heads, &case.grid, &case.flags),
        });
        let e = max_abs_diff(&to_mat(tape.value(out)), &want);
        ensure(e <= 1e-10, || format!("seed {seed} block({kind}): max abs {e:.3e}"))?;
        worst = worst.max(e);
        forwards += 1;
    }
    Ok(format!(
        "{forwards} forwards over 20 seeds, max abs diff {worst:.2e} (tol 1e-10)"
    ))
}

fn c4_row_sums() -> Outcome {
    let grids = grids(16, 8);
    let shapes = [(4, 1), (4, 2), (8, 1), (8, 2), (8, 4), (12, 2), (16, 4)];
    let mut worst = 0.0f64;
    let mut rows = 0usize;
    for case_id in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(50_000 + case_id);
        let case = random_case(&mut rng, &grids, &shapes, false);
        let l = build(&case, case_id);
        let tokens = case.grid.tokens();
        let mut tape = Tape::new();
        let b = l.store.bind_frozen(&mut tape);
        let z = tape.constant(l.z.clone());
        let mhsa = l.mhsa.forward(&mut tape, &b, z, tokens).map_err(err)?;
        let diff = l.diff.forward(&mut tape, &b, z, tokens).map_err(err)?;
        let vca = l.vca.forward(&mut tape, &b, z).map_err(err)?;
        let (lam, _) = common::lambda(&l.store, "diff.lambda");
        let (lam2, _) = common::lambda(&l.store, "vca.lambda2");

        let mut check = |t: &Tensor<f64>, target: f64, what: &str| -> Result<(), String> {
            for s in t.row_sums() {
                let e = (s - target).abs();
                ensure(e <= 1e-10, || format!("case {case_id} {what}: row sum {s} vs {target}"))?;
                worst = worst.max(e);
                rows += 1;
            }
            Ok(())
        };
        for &m in &mhsa.maps {
            check(tape.value(m), 1.0, "mhsa")?;
        }
        for h in &diff.heads {
            check(tape.value(h.a), 1.0 - lam, "diff")?;
        }
        for h in &vca.heads {
            check(tape.value(h.stage1.map_pos), 1.0, "stage I pos")?;
            check(tape.value(h.stage1.map_neg.unwrap()), 1.0, "stage I neg")?;
            check(tape.value(h.stage2.a), 1.0 - lam2, "stage II")?;
        }
    }
    Ok(format!(
        "1000 cases, {rows} rows, max deviation {worst:.2e} (tol 1e-10)"
    ))
}

fn c5_flops() -> Outcome {
    let mut checked = Vec::new();
    for &tokens in &[64usize, 196, 1024] {
        for &(contrast, d, heads) in &[(4usize, 16usize, 2usize), (16, 32, 1), (64, 64, 1)] {
            let shape = BenchShape::new(tokens, contrast, d * heads, heads);
            let (n, nn, dd, m) = (tokens as u64, contrast as u64, d as u64, heads as u64);
            for (kind, want) in [
                (AttentionKind::Vca, 7 * m * n * nn * dd),
                (AttentionKind::Mhsa, 2 * m * n * n * dd),
            ] {
                let r = measure_mults(kind, shape, 3).map_err(err)?;
                ensure(r.measured_mults == want, || {
                    format!(
                        "{kind} N={tokens} n={contrast} d={d} M={heads}: {} != {want}",
                        r.measured_mults
                    )
                })?;
            }
            checked.push((tokens, contrast, d));
        }
    }
    ensure(checked.contains(&(196, 64, 64)), || "grid misses (196, 64, 64)".into())?;
    Ok(format!(
        "{} shapes x {{vca, mhsa}} exact, incl. N=196 n=64 d=64",
        checked.len()
    ))
}

fn ols_slope(points: &[(f64, f64)]) -> f64 {
    let k = points.len() as f64;
    let (xs, ys): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    num / den
}

const SWEEP: [usize; 5] = [64, 128, 256, 512, 1024];

fn c6_scaling() -> Outcome {
    let start = Instant::now();
    let base = BenchShape::new(64, 16, 64, 1);
    let core: Vec<u64> = SWEEP
        .iter()
        .map(|&t| Ok(measure_mults(AttentionKind::Vca, BenchShape { tokens: t, ..base }, 0)?.measured_mults))
        .collect::<vca::Result<_>>()
        .map_err(err)?;
    for (i, &t) in SWEEP.iter().enumerate() {
        ensure(core[i] * SWEEP[0] as u64 == core[0] * t as u64, || {
            format!("VCA core mults not proportional to N at N={t}")
        })?;
    }
    let pts: Vec<(f64, f64)> = SWEEP.iter().zip(&core).map(|(&t, &c)| (t as f64, c as f64)).collect();
    let mult_slope = ols_slope(&pts);
    ensure((mult_slope - 1.0).abs() < 1e-12, || {
        format!("VCA mult slope {mult_slope}")
    })?;

    let vca = fit_scaling(AttentionKind::Vca, &SWEEP, base, Metric::WallTime, 5, 0).map_err(err)?;
    let mhsa = fit_scaling(AttentionKind::Mhsa, &SWEEP, base, Metric::WallTime, 5, 0).map_err(err)?;
    let secs = start.elapsed().as_secs_f64();
    let summary = format!(
        "mult slope {mult_slope:.12}, wall slopes vca {:.3} mhsa {:.3}, {secs:.1} s",
        vca.slope, mhsa.slope
    );
    ensure((vca.slope - 1.0).abs() <= 0.15, || {
        format!("VCA wall slope out of 1.0 +- 0.15: {summary}")
    })?;
    ensure((mhsa.slope - 2.0).abs() <= 0.2, || {
        format!("MHSA wall slope out of 2.0 +- 0.2: {summary}")
    })?;
    ensure(secs < 300.0, || format!("bench over 5 min: {summary}"))?;
    Ok(format!("n=16 C=64 M=1: {summary}"))
}

fn c7_ratio() -> Outcome {
    let mut lines = Vec::new();
    for &(contrast, width, heads) in &[(16usize, 64usize, 1usize), (4, 32, 2)] {
        let mut prev = 0.0f64;
        for &t in &SWEEP {
            let shape = BenchShape::new(t, contrast, width, heads);
            let m = measure_mults(AttentionKind::Mhsa, shape, 0)
                .map_err(err)?
                .measured_mults;
            let v = measure_mults(AttentionKind::Vca, shape, 0).map_err(err)?.measured_mults;
            ensure(m * 7 * contrast as u64 == v * 2 * t as u64, || {
                format!("N={t} n={contrast}: {m}/{v} != 2N/(7n)")
            })?;
            let ratio = m as f64 / v as f64;
            ensure(ratio > prev, || format!("n={contrast}: ratio not increasing at N={t}"))?;
            prev = ratio;
        }
        lines.push(format!("n={contrast}: ratio up to {prev:.2}"));
    }
    Ok(format!(
        "MHSA/VCA = 2N/(7n) exactly, increasing in N ({})",
        lines.join(", ")
    ))
}

fn c8_degenerate() -> Outcome {
    let grids = grids(16, 8);
    let shapes = [(4, 1), (4, 2), (8, 1), (8, 2), (8, 4), (16, 2)];
    let mut worst = 0.0f64;
    for cfg_id in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(90_000 + cfg_id);
        let case = random_case(&mut rng, &grids, &shapes, false);
        let mut l = build(&case, cfg_id);
        let e = l.store.get(l.vca.e_pos).clone();
        *l.store.get_mut(l.vca.e_neg) = e;
        let mut tape = Tape::new();
        let b = l.store.bind_frozen(&mut tape);
        let z = tape.constant(l.z.clone());
        let out = l.vca.forward(&mut tape, &b, z).map_err(err)?.out;
        let want = common::vca_single_stream(&l.store, "vca", &to_mat(&l.z), case.heads, &case.grid);
        let d = max_abs_diff(&to_mat(tape.value(out)), &want);
        ensure(d <= 1e-10, || format!("config {cfg_id} {case:?}: max abs {d:.3e}"))?;
        worst = worst.max(d);
    }
    Ok(format!("50 configs, max abs diff {worst:.2e} (tol 1e-10)"))
}

fn train_config(kind: AttentionKind, dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::new(Command::Train);
    cfg.seed = 0;
    cfg.output_dir = dir.to_path_buf();
    cfg.backbone.depth = 4;
    cfg.backbone.width = 64;
    cfg.backbone.heads = 2;
    cfg.backbone.attention_kind = kind;
    cfg.dataset.seed = 0;
    cfg.dataset.classes = 10;
    cfg
}

fn c9_training() -> Outcome {
    let mut parts = Vec::new();
    for kind in AttentionKind::ALL {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut cfg = train_config(kind, dir.path());
        cfg.optimizer.steps = 2000;
        cfg.train.target_accuracy = Some(0.9);
        let start = Instant::now();
        let s = cmd_train(&cfg).map_err(err)?;
        let secs = start.elapsed().as_secs_f64();
        let held = s.held_out_accuracy.unwrap_or(0.0);
        let line = format!(
            "{kind}: train {:.3} held-out {held:.3} at step {} in {secs:.0} s",
            s.train_accuracy, s.steps
        );
        ensure(s.train_accuracy >= 0.9 && s.steps <= 2000, || {
            format!("{line}: train accuracy below 0.9")
        })?;
        ensure(held >= 0.5, || format!("{line}: held-out below 0.5"))?;
        ensure(secs < 900.0, || format!("{line}: over 15 min"))?;
        parts.push(line);
    }
    Ok(parts.join("; "))
}

/// Largest divisor of `side` that is at most 8.
fn pool_side(side: usize) -> usize {
    (1..=8.min(side)).rev().find(|p| side.is_multiple_of(*p)).unwrap()
}

fn c10_overhead() -> Outcome {
    let configs = [
        BackboneConfig::default(),
        BackboneConfig {
            image_size: (32, 32, 3),
            heads: 4,
            lambda_depth_schedule: true,
            ..Default::default()
        },
        BackboneConfig {
            image_size: (24, 24, 1),
            patch_size: 2,
            depth: 2,
            width: 48,
            heads: 3,
            ..Default::default()
        },
    ];
    let mut parts = Vec::new();
    for base in configs {
        let count = |kind| -> vca::Result<(usize, VitModel, ParamStore<f64>)> {
            let cfg = BackboneConfig {
                attention_kind: kind,
                ..base.clone()
            };
            let (m, s) = VitModel::new::<f64>(&cfg, 0)?;
            Ok((s.scalar_count(), m, s))
        };
        let (vca_n, model, store) = count(AttentionKind::Vca).map_err(err)?;
        let (mhsa_n, _, _) = count(AttentionKind::Mhsa).map_err(err)?;
        let (gh, gw) = (base.image_size.0 / base.patch_size, base.image_size.1 / base.patch_size);
        let n = pool_side(gh) * pool_side(gw);
        let d = base.width / base.heads;
        // e_pos + e_neg, two sets of four lambda vectors and one init scalar,
        // two RMSNorm gains
        let per_layer = 2 * n * d + 2 * (4 * d + 1) + 2 * d;
        let want = base.depth * per_layer;
        let delta = vca_n - mhsa_n;
        ensure(delta == want, || format!("delta {delta} != {want} for {base:?}"))?;
        ensure(model.attention_overhead(&store) == want, || {
            "attention_overhead disagrees".into()
        })?;
        parts.push(format!("{delta} (N={}, n={n}, d={d}, L={})", gh * gw, base.depth));
    }
    Ok(format!("VCA - MHSA = {}", parts.join(", ")))
}

fn c11_determinism() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let mut cfg = train_config(AttentionKind::Vca, d.path());
        cfg.optimizer.steps = 40;
        cfg.train.eval_every = 20;
        cmd_train(&cfg).map_err(err)?;
    }
    let mut bytes = 0;
    for file in [LOSS_LOG, CHECKPOINT, METRICS] {
        let a = std::fs::read(dirs[0].path().join(file)).map_err(|e| e.to_string())?;
        let b = std::fs::read(dirs[1].path().join(file)).map_err(|e| e.to_string())?;
        ensure(!a.is_empty() && a == b, || format!("{file} differs between runs"))?;
        bytes += a.len();
    }
    Ok(format!(
        "loss log, checkpoint and metrics byte-identical ({bytes} bytes)"
    ))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("scope", c1_scope),
        ("gradient suite", c2_gradients),
        ("oracle equivalence", c3_oracle),
        ("row-sum invariants", c4_row_sums),
        ("exact FLOP model", c5_flops),
        ("scaling exponents", c6_scaling),
        ("cost-ratio law", c7_ratio),
        ("degenerate-stream identity", c8_degenerate),
        ("desk-scale training", c9_training),
        ("parameter overhead", c10_overhead),
        ("determinism", c11_determinism),
    ];
    let only: Vec<usize> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect())
        .unwrap_or_default();
    let total = Instant::now();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let res = std::panic::catch_unwind(f)
            .unwrap_or_else(|p| Err(p.downcast_ref::<String>().cloned().unwrap_or_else(|| "panicked".into())));
        let t = fmt_secs(start.elapsed());
        match res {
            Ok(msg) => println!("PASS [{id:>2}] {name} ({t}): {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL [{id:>2}] {name} ({t}): {msg}");
            }
        }
    }
    println!("acceptance: {failed} failed, total {}", fmt_secs(total.elapsed()));
    if failed > 0 {
        std::process::exit(1);
    }
}

fn fmt_secs(d: Duration) -> String {
    format!("{:.1} s", d.as_secs_f64())
}
