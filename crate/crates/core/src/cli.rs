//! Batch front-end: `qsdt <train|eval|fuse|analyze|energy>`.
//!
//! Every command writes its resolved settings to `<out>/config.resolved`.
//! Exit codes: 0 success, 2 usage or configuration, 3 data format, 4 numeric.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use serde::Serialize;

use crate::data::{load_dataset, Dataset, DatasetKind, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::analysis::{analyze_attention, write_levels_csv, AttentionAnalysis};
use crate::model::checkpoint::{self, Checkpoint};
use crate::model::train::{evaluate, evaluate_infer, train, train_teacher, write_metrics_header, write_metrics_row};
use crate::model::{Model, ModelConfig, Settings, TrainConfig};
use crate::param::Mode;
use crate::rng::Rng;
use crate::ste::ClipRound;

pub const CHECKPOINT_FILE: &str = "model.qsdt";
pub const FUSED_FILE: &str = "model_fused.qsdt";
pub const TEACHER_FILE: &str = "teacher.qsdt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Train,
    Eval,
    Fuse,
    Analyze,
    Energy,
}

#[derive(Clone, Debug, Parser)]
#[command(name = "qsdt", about = "Quantized spike-driven transformer: train, fuse, evaluate, analyze, account energy")]
pub struct Args {
    #[arg(value_enum)]
    pub command: Command,
    /// Settings file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory (ignored for synthetic data).
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory, created if needed.
    #[arg(long)]
    pub out: PathBuf,
    /// Override a setting, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Checkpoint to read (default: `<out>/model.qsdt`).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Binary-baseline checkpoint to compare against (analyze).
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Also write CSV next to JSON reports.
    #[arg(long)]
    pub csv: bool,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Input(_) | Error::State(_) | Error::Shape(_) => 2,
        Error::Format(_) | Error::Io(_) => 3,
        Error::Numeric(_) | Error::Degenerate(_) | Error::Domain(_) | Error::Accounting(_) | Error::Training { .. } => 4,
    }
}

/// Parse arguments, run, report errors on stderr, return the exit code.
pub fn main_with<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(args) {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    match run(&args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("qsdt: {e}");
            if let Error::Training { diagnostics, .. } = &e {
                eprintln!("{diagnostics}");
                let _ = fs::write(args.out.join("diagnostics.txt"), diagnostics);
            }
            exit_code(&e)
        }
    }
}

fn settings(args: &Args) -> Result<Settings> {
    let mut s = match &args.config {
        Some(p) if !p.is_file() => return Err(Error::Config(format!("config file {} does not exist", p.display()))),
        Some(p) => Settings::parse(&fs::read_to_string(p)?)?,
        None => Settings::default(),
    };
    for kv in &args.overrides {
        s.apply_override(kv)?;
    }
    Ok(s)
}

fn synthetic_spec(s: &Settings, split: Split) -> Result<SyntheticSpec> {
    Ok(SyntheticSpec {
        samples: s.get(match split {
            Split::Train => "data.synthetic.train",
            Split::Test => "data.synthetic.test",
        })?,
        classes: s.get("data.synthetic.classes")?,
        channels: 1,
        size: s.get("data.synthetic.size")?,
        noise: s.get("data.synthetic.noise")?,
        seed: s.get("train.seed")?,
    })
}

fn dataset(args: &Args, s: &Settings, split: Split) -> Result<Dataset> {
    let kind: DatasetKind = s.raw("data.kind").parse()?;
    if kind != DatasetKind::Synthetic && !args.data.is_dir() {
        return Err(Error::Config(format!("dataset directory {} does not exist", args.data.display())));
    }
    let d = load_dataset(&args.data, kind, split, synthetic_spec(s, split)?)?;
    let limit: usize = s.get(match split {
        Split::Train => "data.train_limit",
        Split::Test => "data.test_limit",
    })?;
    let d = d.take(limit);
    if d.is_empty() {
        return Err(Error::Config(format!("dataset at {} has no samples", args.data.display())));
    }
    Ok(d)
}

/// Record the dataset geometry in the model settings.
fn bind_geometry(s: &mut Settings, d: &Dataset) -> Result<()> {
    let [c, h, w] = d.sample_shape;
    s.set("model.in_channels", &c.to_string())?;
    s.set("model.height", &h.to_string())?;
    s.set("model.width", &w.to_string())?;
    s.set("model.classes", &d.classes.to_string())
}

fn check_geometry(m: &ModelConfig, d: &Dataset) -> Result<()> {
    if [m.in_channels, m.height, m.width] != d.sample_shape || m.classes != d.classes {
        return Err(Error::Config(format!(
            "checkpoint expects {}x{}x{} inputs and {} classes, data has {:?} and {}",
            m.in_channels, m.height, m.width, m.classes, d.sample_shape, d.classes
        )));
    }
    Ok(())
}

fn write_json<V: Serialize>(path: &Path, v: &V) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, v).map_err(|e| Error::Io(e.into()))?;
    writeln!(f)?;
    Ok(())
}

fn load_checkpoint(args: &Args) -> Result<Checkpoint<f32>> {
    let path = args.checkpoint.clone().unwrap_or_else(|| args.out.join(CHECKPOINT_FILE));
    checkpoint::load(&path)
}

/// Settings for a command on a checkpoint: the stored ones, with the data
/// and evaluation keys taken from the command line.
fn checkpoint_settings(args: &Args, stored: &Settings) -> Result<Settings> {
    let cli = settings(args)?;
    let mut s = stored.clone();
    for key in [
        "data.kind",
        "data.test_limit",
        "data.train_limit",
        "data.synthetic.test",
        "data.synthetic.train",
        "data.synthetic.classes",
        "data.synthetic.size",
        "data.synthetic.noise",
        "eval.batch_size",
    ] {
        s.set(key, cli.raw(key))?;
    }
    Ok(s)
}

pub fn run(args: &Args) -> Result<()> {
    fs::create_dir_all(&args.out)?;
    match args.command {
        Command::Train => cmd_train(args),
        Command::Eval => cmd_eval(args),
        Command::Fuse => cmd_fuse(args),
        Command::Analyze => cmd_analyze(args),
        Command::Energy => cmd_energy(args),
    }
}

#[derive(Serialize)]
struct TrainSummary {
    params: usize,
    teacher_params: Option<usize>,
    teacher: Option<crate::model::train::TeacherReport>,
    final_test_acc: f64,
}

fn cmd_train(args: &Args) -> Result<()> {
    let mut s = settings(args)?;
    let train_set = dataset(args, &s, Split::Train)?;
    let test_set = dataset(args, &s, Split::Test)?;
    bind_geometry(&mut s, &train_set)?;
    fs::write(args.out.join("config.resolved"), s.to_string())?;
    let mcfg = ModelConfig::from_settings(&s)?;
    let tcfg = TrainConfig::from_settings(&s)?;
    let mut rng = Rng::new(tcfg.seed);
    let mut student = Model::<f32>::build(&mcfg, &mut rng)?;
    eprintln!("student: {} parameters", student.param_count());
    let mut teacher = None;
    let mut report = None;
    if tcfg.fgd.lambda > 0.0 {
        let mut t = Model::<f32>::build(&mcfg.teacher(), &mut rng.fork())?;
        let r = train_teacher(&mut t, &train_set, &tcfg)?;
        eprintln!(
            "teacher: {} epochs, best val loss {:.4}, val acc {:.4}",
            r.epochs_run, r.best_val_loss, r.val_acc
        );
        let mut ts = s.clone();
        mcfg.teacher().store(&mut ts)?;
        checkpoint::save(&args.out.join(TEACHER_FILE), &t, &ts, &rng)?;
        report = Some(r);
        teacher = Some(t);
    }
    let mut csv = BufWriter::new(File::create(args.out.join("metrics.csv"))?);
    write_metrics_header(&mut csv)?;
    let metrics = train(&mut student, teacher.as_mut(), &train_set, &test_set, &tcfg, &mut |m| {
        eprintln!(
            "epoch {}: ce {:.4} fgd {:.4} total {:.4} train {:.4} test {:.4}",
            m.epoch, m.ce, m.fgd, m.total, m.train_acc, m.test_acc
        );
        write_metrics_row(&mut csv, m)?;
        csv.flush()?;
        Ok(())
    })?;
    checkpoint::save(&args.out.join(CHECKPOINT_FILE), &student, &s, &rng)?;
    write_json(
        &args.out.join("train.json"),
        &TrainSummary {
            params: student.param_count(),
            teacher_params: teacher.as_ref().map(|t| t.param_count()),
            teacher: report,
            final_test_acc: metrics.last().map_or(0.0, |m| m.test_acc),
        },
    )
}

#[derive(Serialize)]
struct EvalReport {
    samples: usize,
    fused: bool,
    /// Training-path accuracy with frozen statistics.
    accuracy: f64,
    loss: f64,
    /// Spike-count path accuracy (fused spiking models only).
    infer_accuracy: Option<f64>,
}

fn cmd_eval(args: &Args) -> Result<()> {
    let mut ck = load_checkpoint(args)?;
    let s = checkpoint_settings(args, &ck.settings)?;
    fs::write(args.out.join("config.resolved"), s.to_string())?;
    let test = dataset(args, &s, Split::Test)?;
    check_geometry(&ck.model.config, &test)?;
    let tcfg = TrainConfig::from_settings(&s)?;
    let (accuracy, loss) = evaluate(&mut ck.model, &test, tcfg.eval_batch, tcfg.smoothing)?;
    let infer_accuracy = if ck.model.is_fused() && ck.model.is_spiking() {
        Some(evaluate_infer(&ck.model, &test, tcfg.eval_batch)?.0)
    } else {
        None
    };
    eprintln!("accuracy {accuracy:.4} loss {loss:.4}");
    write_json(
        &args.out.join("eval.json"),
        &EvalReport {
            samples: test.len(),
            fused: ck.model.is_fused(),
            accuracy,
            loss,
            infer_accuracy,
        },
    )
}

#[derive(Serialize)]
struct FuseReport {
    samples: usize,
    /// Largest `|fused − unfused| / max(|unfused|, 1)` over the logits.
    max_rel_deviation: f64,
    /// Mean absolute logit difference; single spike flips at rounding
    /// boundaries dominate the maximum but barely move the mean.
    mean_abs_deviation: f64,
    /// Fraction of samples whose predicted class is unchanged.
    argmax_agreement: f64,
    /// Largest `|train path − spike path|` logit difference after fusion.
    max_infer_deviation: Option<f64>,
}

fn cmd_fuse(args: &Args) -> Result<()> {
    let ck = load_checkpoint(args)?;
    let s = checkpoint_settings(args, &ck.settings)?;
    fs::write(args.out.join("config.resolved"), s.to_string())?;
    let test = dataset(args, &s, Split::Test)?;
    check_geometry(&ck.model.config, &test)?;
    let mut unfused = ck.model.clone();
    let mut fused = ck.model;
    fused.fuse()?;
    let batch: usize = s.get("eval.batch_size")?;
    let idx: Vec<usize> = (0..test.len()).collect();
    let (mut dev, mut infer_dev) = (0.0f64, None::<f64>);
    let (mut abs_sum, mut agree) = (0.0f64, 0usize);
    for chunk in idx.chunks(batch) {
        let (x, _) = test.batch(chunk);
        let a = unfused.forward(&x, Mode::Eval, &mut ClipRound::exact())?.logits;
        let b = fused.forward(&x, Mode::Eval, &mut ClipRound::exact())?.logits;
        for (&u, &f) in a.data().iter().zip(b.data()) {
            dev = dev.max((u - f).abs() as f64 / (u.abs() as f64).max(1.0));
            abs_sum += (u - f).abs() as f64;
        }
        let k = a.shape()[1];
        agree += a
            .data()
            .chunks(k)
            .zip(b.data().chunks(k))
            .filter(|(p, q)| argmax(p) == argmax(q))
            .count();
        if fused.is_spiking() {
            let c = fused.forward_infer(&x)?.logits;
            let d = b.data().iter().zip(c.data()).map(|(&p, &q)| (p - q).abs() as f64).fold(0.0, f64::max);
            infer_dev = Some(infer_dev.unwrap_or(0.0).max(d));
        }
    }
    checkpoint::save(&args.out.join(FUSED_FILE), &fused, &s, &ck.rng)?;
    eprintln!("fused; max relative logit deviation {dev:.3e}");
    write_json(
        &args.out.join("fuse.json"),
        &FuseReport {
            samples: test.len(),
            max_rel_deviation: dev,
            mean_abs_deviation: abs_sum / (test.len() * fused.config.classes) as f64,
            argmax_agreement: agree as f64 / test.len() as f64,
            max_infer_deviation: infer_dev,
        },
    )
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

fn fused_copy(m: Model<f32>) -> Result<Model<f32>> {
    if m.is_fused() {
        return Ok(m);
    }
    let mut m = m;
    m.fuse()?;
    Ok(m)
}

#[derive(Serialize)]
struct AnalyzeReport {
    model: AttentionAnalysis,
    baseline: Option<AttentionAnalysis>,
    /// `model.mean_entropy − baseline.mean_entropy`.
    entropy_gain: Option<f64>,
}

fn cmd_analyze(args: &Args) -> Result<()> {
    let ck = load_checkpoint(args)?;
    let s = checkpoint_settings(args, &ck.settings)?;
    fs::write(args.out.join("config.resolved"), s.to_string())?;
    let test = dataset(args, &s, Split::Test)?;
    check_geometry(&ck.model.config, &test)?;
    let batch: usize = s.get("eval.batch_size")?;
    let model = analyze_attention(&fused_copy(ck.model)?, &test, batch)?;
    let baseline = match &args.baseline {
        Some(p) => {
            let b = checkpoint::load::<f32>(p)?;
            check_geometry(&b.model.config, &test)?;
            Some(analyze_attention(&fused_copy(b.model)?, &test, batch)?)
        }
        None => None,
    };
    let mut csv = BufWriter::new(File::create(args.out.join("levels.csv"))?);
    write_levels_csv(&mut csv, &model)?;
    if let Some(b) = &baseline {
        let mut csv = BufWriter::new(File::create(args.out.join("levels_baseline.csv"))?);
        write_levels_csv(&mut csv, b)?;
    }
    eprintln!("mean attention-level entropy {:.4} nats", model.mean_entropy);
    write_json(
        &args.out.join("entropy.json"),
        &AnalyzeReport {
            entropy_gain: baseline.as_ref().map(|b| model.mean_entropy - b.mean_entropy),
            model,
            baseline,
        },
    )
}

fn cmd_energy(args: &Args) -> Result<()> {
    let ck = load_checkpoint(args)?;
    let s = checkpoint_settings(args, &ck.settings)?;
    fs::write(args.out.join("config.resolved"), s.to_string())?;
    let test = dataset(args, &s, Split::Test)?;
    check_geometry(&ck.model.config, &test)?;
    let model = fused_copy(ck.model)?;
    let batch: usize = s.get("eval.batch_size")?;
    let (acc, firing) = evaluate_infer(&model, &test, batch)?;
    let ledger = model.energy_ledger(&firing)?;
    let measurement = format!(
        "inference-time firing rates over {} samples of the {} test split, {} binary steps per sample",
        test.len(),
        s.raw("data.kind"),
        model.config.t_infer()
    );
    let report = ledger.report(model.config.weight_bits.is_some(), &measurement)?;
    eprintln!("accuracy {acc:.4}, energy {:.6} mJ per sample", report.total_energy_mj);
    let mut f = BufWriter::new(File::create(args.out.join("energy.json"))?);
    report.write_json(&mut f)?;
    if args.csv {
        let mut f = BufWriter::new(File::create(args.out.join("energy.csv"))?);
        report.write_csv(&mut f)?;
    }
    write_json(&args.out.join("firing.json"), &firing)
}
