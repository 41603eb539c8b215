//! The three entry points behind the command-line front end. Each writes its
//! artifacts into `output_dir` together with an echo of the effective
//! configuration.

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::PathBuf;

use crate::attention::{AttentionKind, DiffAttnParams, MhsaParams};
use crate::bench::{self, FlopReport, Metric};
use crate::config::{Command, DatasetKind, GradTarget, GradcheckConfig, RunConfig};
use crate::data::{self, Dataset};
use crate::error::{Result, VcaError};
use crate::tensor::gradcheck::{self, GradReport};
use crate::tensor::{init::Initializer, Binding, ParamStore, Tape, Tensor, Var};
use crate::vca::{VcaAblationFlags, VcaGrid, VcaParams};
use crate::vit::checkpoint::Checkpoint;
use crate::vit::{accuracy, BackboneConfig, Batch, Block, TrainState};

pub const LOSS_LOG: &str = "loss.csv";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const METRICS: &str = "metrics.csv";
pub const BENCH_CSV: &str = "bench.csv";
pub const GRADCHECK_REPORT: &str = "gradcheck.txt";

/// Samples per forward when scoring accuracy.
const EVAL_CHUNK: usize = 256;

/// Standard deviation of the random parameters used by the gradient suite.
/// Larger than the training init so the maps are far from uniform.
pub const GRADCHECK_PARAM_STD: f64 = 0.3;

/// Range of the random LayerNorm and RMSNorm gains in the gradient suite. A
/// gain near zero scales whole rows of upstream gradients below what central
/// differences resolve at step 1e-5.
pub const GRADCHECK_GAIN_RANGE: (f64, f64) = (0.5, 1.5);

#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    Train(TrainSummary),
    Bench(Vec<FlopReport>),
    Gradcheck(Vec<(GradTarget, GradReport)>),
}

impl Outcome {
    /// Whether every check the command ran passed.
    pub fn success(&self, cfg: &RunConfig) -> bool {
        match self {
            Outcome::Gradcheck(reports) => reports.iter().all(|(_, r)| r.passed(cfg.gradcheck.tolerance)),
            _ => true,
        }
    }
}

pub fn run(cfg: &RunConfig) -> Result<Outcome> {
    match cfg.command {
        Command::Train => cmd_train(cfg).map(Outcome::Train),
        Command::Bench => cmd_bench(cfg).map(Outcome::Bench),
        Command::Gradcheck => cmd_gradcheck(cfg).map(Outcome::Gradcheck),
    }
}

/// Loads the configured dataset and checks it against the backbone.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let d = &cfg.dataset;
    let b = &cfg.backbone;
    let ds = match d.kind {
        DatasetKind::Synthetic => data::make_synthetic(d.seed, d.classes, d.samples, b.image_size, d.noise_std)?,
        DatasetKind::Idx => {
            let missing = || VcaError::config("idx datasets need images_path and labels_path");
            let images = d.images_path.as_ref().ok_or_else(missing)?;
            let labels = d.labels_path.as_ref().ok_or_else(missing)?;
            data::load_idx(images, labels, Some(b.num_classes))?
        }
    };
    if ds.class_count > b.num_classes {
        return Err(VcaError::config(format!(
            "dataset has {} classes, backbone.num_classes is {}",
            ds.class_count, b.num_classes
        )));
    }
    if ds.image_size() != b.image_size {
        return Err(VcaError::config(format!(
            "dataset images are {:?}, backbone.image_size is {:?}",
            ds.image_size(),
            b.image_size
        )));
    }
    if d.held_out >= ds.len() {
        return Err(VcaError::config(format!(
            "held_out {} leaves no training samples out of {}",
            d.held_out,
            ds.len()
        )));
    }
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub final_loss: Option<f64>,
    /// Training accuracy at the end of the run.
    pub train_accuracy: f64,
    pub held_out_accuracy: Option<f64>,
    /// `(step, train accuracy)` at every evaluation.
    pub evaluations: Vec<(usize, f64)>,
    pub loss_log: PathBuf,
    pub checkpoint: PathBuf,
}

/// Configuration text stored in checkpoints: the echo without the output
/// directory, so identical runs into different directories stay
/// byte-identical.
fn checkpoint_config(cfg: &RunConfig) -> String {
    cfg.to_text()
        .lines()
        .filter(|l| !l.starts_with("output_dir"))
        .map(|l| format!("{l}\n"))
        .collect()
}

/// Trains the toy backbone. The loss log has one row per step; `train_acc`
/// is filled every `train.eval_every` steps and at the last step, and is
/// empty otherwise. Stops early once `train.target_accuracy` is reached.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.write_echo()?;
    let ds = load_dataset(cfg)?;
    let (train, held) = ds.split(cfg.dataset.held_out);
    let o = &cfg.optimizer;
    let mut state = TrainState::<f32>::new(&cfg.backbone, cfg.seed, o.lr, o.weight_decay)?;

    let mut log = String::from("step,loss,train_acc\n");
    let mut evaluations = Vec::new();
    let mut final_loss = None;
    let mut last_acc = None;
    for step in 1..=o.steps {
        let idx = state.next_indices(train.len(), o.batch);
        let part = train.subset(&idx);
        let loss = state.train_step(&Batch {
            images: part.images,
            labels: part.labels,
        })?;
        final_loss = Some(loss);
        let mut acc_field = String::new();
        let mut stop = false;
        if step % cfg.train.eval_every == 0 || step == o.steps {
            let acc = accuracy(&state.model, &state.store, &train.images, &train.labels, EVAL_CHUNK)?;
            evaluations.push((step, acc));
            last_acc = Some(acc);
            acc_field = format!("{acc:.6}");
            stop = cfg.train.target_accuracy.is_some_and(|t| acc >= t);
        }
        writeln!(log, "{step},{loss:.9},{acc_field}").expect("writing to a String");
        if stop {
            break;
        }
    }

    let train_accuracy = match last_acc {
        Some(a) => a,
        None => accuracy(&state.model, &state.store, &train.images, &train.labels, EVAL_CHUNK)?,
    };
    let held_out_accuracy = if held.is_empty() {
        None
    } else {
        Some(accuracy(
            &state.model,
            &state.store,
            &held.images,
            &held.labels,
            EVAL_CHUNK,
        )?)
    };

    let loss_log = cfg.output_dir.join(LOSS_LOG);
    fs::write(&loss_log, log)?;
    let checkpoint = cfg.output_dir.join(CHECKPOINT);
    Checkpoint::from_store(&checkpoint_config(cfg), &state.store).save(&checkpoint)?;
    let held_field = held_out_accuracy.map(|a| format!("{a:.6}")).unwrap_or_default();
    fs::write(
        cfg.output_dir.join(METRICS),
        format!(
            "steps,train_acc,held_out_acc,params\n{},{train_accuracy:.6},{held_field},{}\n",
            state.step,
            state.param_count()
        ),
    )?;
    Ok(TrainSummary {
        steps: state.step,
        final_loss,
        train_accuracy,
        held_out_accuracy,
        evaluations,
        loss_log,
        checkpoint,
    })
}

/// Counts every sweep point against the cost model, times the cores when
/// `bench.repeats > 0`, and writes the CSV.
pub fn cmd_bench(cfg: &RunConfig) -> Result<Vec<FlopReport>> {
    cfg.write_echo()?;
    let reports = bench::run_bench(&cfg.bench, cfg.seed)?;
    let file = fs::File::create(cfg.output_dir.join(BENCH_CSV))?;
    bench::write_csv(&reports, BufWriter::new(file))?;
    Ok(reports)
}

/// Log-log slopes of each kind's sweep, for whichever metrics the reports
/// carry. Sweeps too small to fit are skipped.
pub fn bench_slopes(reports: &[FlopReport]) -> Vec<(AttentionKind, Metric, f64)> {
    let mut kinds: Vec<AttentionKind> = reports.iter().map(|r| r.kind).collect();
    kinds.dedup();
    let mut out = Vec::new();
    for kind in kinds {
        let rows: Vec<&FlopReport> = reports.iter().filter(|r| r.kind == kind).collect();
        let mults: Vec<(usize, f64)> = rows.iter().map(|r| (r.shape.tokens, r.total_mults() as f64)).collect();
        if let Ok((slope, _)) = bench::fit_log_log(&mults) {
            out.push((kind, Metric::Mults, slope));
        }
        let wall: Option<Vec<(usize, f64)>> = rows
            .iter()
            .map(|r| r.wall_time_ns.map(|t| (r.shape.tokens, t as f64)))
            .collect();
        if let Some(Ok((slope, _))) = wall.map(|w| bench::fit_log_log(&w)) {
            out.push((kind, Metric::WallTime, slope));
        }
    }
    out
}

/// Store, layer, input `z` and loss weights `R`.
type GradFixture = (ParamStore<f64>, GradLayer, Tensor<f64>, Tensor<f64>);

/// Builds the layer a gradient target names, with random parameters of
/// standard deviation [`GRADCHECK_PARAM_STD`] (norm gains uniform in
/// [`GRADCHECK_GAIN_RANGE`]), and returns it with a random
/// single-sample input `[N x C]`. Attention projections carry no bias, as in
/// the default backbone: a key bias has an identically zero gradient, which
/// central differences only resolve to rounding noise.
fn grad_fixture(target: GradTarget, g: &GradcheckConfig, seed: u64) -> Result<GradFixture> {
    let mut init = Initializer::new(seed);
    let mut store = ParamStore::new();
    let grid = VcaGrid::new(g.grid.0, g.grid.1, g.pool.0, g.pool.1)?;
    let layer = match target {
        GradTarget::Mhsa => GradLayer::Mhsa(MhsaParams::init(
            &mut store, "mhsa", g.width, g.heads, false, &mut init,
        )?),
        GradTarget::Diff => GradLayer::Diff(DiffAttnParams::init(
            &mut store, "diff", g.width, g.heads, false, 0.8, &mut init,
        )?),
        GradTarget::Vca => GradLayer::Vca(VcaParams::init(
            &mut store,
            "vca",
            g.width,
            g.heads,
            grid,
            VcaAblationFlags::default(),
            false,
            (0.8, 0.8),
            &mut init,
        )?),
        GradTarget::Block => {
            let cfg = BackboneConfig {
                image_size: (g.grid.0, g.grid.1, 1),
                patch_size: 1,
                depth: 1,
                width: g.width,
                heads: g.heads,
                pool: Some(g.pool),
                attention_kind: AttentionKind::Vca,
                ..Default::default()
            };
            GradLayer::Block(Block::init(&mut store, "block", &cfg, 0, &mut init)?)
        }
    };
    for e in store.entries_mut().iter_mut().filter(|e| e.trainable) {
        let gain = e.name.ends_with(".gamma") || e.name.contains(".rms_gain");
        e.value = if gain {
            init.uniform(e.value.shape(), GRADCHECK_GAIN_RANGE.0, GRADCHECK_GAIN_RANGE.1)
        } else {
            init.normal(e.value.shape(), GRADCHECK_PARAM_STD)
        };
    }
    let tokens = grid.tokens();
    let z = init.normal(&[tokens, g.width], 1.0);
    let weights = init.normal(&[tokens, g.width], 1.0);
    Ok((store, layer, z, weights))
}

#[derive(Clone, Debug)]
enum GradLayer {
    Mhsa(MhsaParams),
    Diff(DiffAttnParams),
    Vca(VcaParams),
    Block(Block),
}

impl GradLayer {
    fn forward(&self, tape: &mut Tape<f64>, b: &Binding, z: Var, tokens: usize) -> Result<Var> {
        match self {
            GradLayer::Mhsa(p) => Ok(p.forward(tape, b, z, tokens)?.out),
            GradLayer::Diff(p) => Ok(p.forward(tape, b, z, tokens)?.out),
            GradLayer::Vca(p) => Ok(p.forward(tape, b, z)?.out),
            GradLayer::Block(p) => p.forward(tape, b, z, tokens),
        }
    }
}

/// Finite-difference check of one target on the scalar loss
/// `sum(out * R)` for a fixed random `R`.
pub fn gradcheck_target(target: GradTarget, g: &GradcheckConfig, seed: u64) -> Result<GradReport> {
    let (store, layer, z, weights) = grad_fixture(target, g, seed)?;
    let tokens = g.grid.0 * g.grid.1;
    gradcheck::check(&store, g.step, |tape, b| {
        let zv = tape.constant(z.clone());
        let out = layer.forward(tape, b, zv, tokens)?;
        let r = tape.constant(weights.clone());
        tape.dot(out, r)
    })
}

/// Runs every configured target and writes one report line per parameter
/// group; an overall verdict line closes the report.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<Vec<(GradTarget, GradReport)>> {
    cfg.write_echo()?;
    let g = &cfg.gradcheck;
    let mut reports = Vec::with_capacity(g.targets.len());
    let mut text = String::new();
    writeln!(text, "# step {:e}, tolerance {:e}", g.step, g.tolerance).expect("writing to a String");
    for &target in &g.targets {
        let report = gradcheck_target(target, g, cfg.seed)?;
        for group in &report.groups {
            let verdict = if group.max_rel_err < g.tolerance {
                "PASS"
            } else {
                "FAIL"
            };
            writeln!(
                text,
                "{verdict} {target} {} elements={} max_rel_err={:.3e}",
                group.name, group.elements, group.max_rel_err
            )
            .expect("writing to a String");
        }
        reports.push((target, report));
    }
    let all = reports.iter().all(|(_, r)| r.passed(g.tolerance));
    writeln!(text, "{}", if all { "ALL PASS" } else { "SOME FAILED" }).expect("writing to a String");
    fs::write(cfg.output_dir.join(GRADCHECK_REPORT), text)?;
    Ok(reports)
}
