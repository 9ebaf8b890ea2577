//! `etcn`: train, evaluate, quantize and deploy the ECG-TCN from one binary.
//!
//! Exit status: 0 success, 1 usage, 2 data or container problem, 3 numeric
//! divergence during training, 4 infeasible tile budget.

mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ecg_tcn::codegen::{self, EmitOptions, SourceBundle};
use ecg_tcn::cost::{self, MacMode};
use ecg_tcn::data::{self, Dataset, CLASS_NAMES};
use ecg_tcn::engine::{format_golden, qpredict, qpredict_dataset};
use ecg_tcn::model::{self, Model};
use ecg_tcn::parallel::Execution;
use ecg_tcn::quant::{self, QNetwork};
use ecg_tcn::synthetic::{synthetic_dataset, ECG5000_TRAIN_SHARES};
use ecg_tcn::tcn::{ArchConfig, FeatureMap, Network, Precision, TrainConfig};
use ecg_tcn::tiling;
use ecg_tcn::Error;

use config::ConfigFile;

#[derive(Debug, Parser)]
#[command(
    name = "etcn",
    version,
    about = "ECG heartbeat TCN: training, INT-8 quantization and C deployment"
)]
struct Cli {
    /// Seed for every random choice (initialization, splits, shuffling, sampling).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// key=value file overriding defaults; explicit flags still win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Worker threads for batch work. Results are identical for any value.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    jobs: u16,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Train a float model on a UCR-format file.
    Train(TrainArgs),
    /// Accuracy, balanced accuracy and confusion matrix on a labelled file.
    Eval { model: PathBuf, data: PathBuf },
    /// Fold batch norm, calibrate on a labelled file and write an INT-8 model.
    Quantize {
        model: PathBuf,
        calib: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Classify every beat in a file (140 samples per line, optionally preceded by a label).
    Infer { model: PathBuf, beats: PathBuf },
    /// Parameter, MAC and memory accounting.
    Report {
        model: PathBuf,
        /// Also write the figures as key=value lines.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Split every layer into tiles that fit an L1 budget.
    Tileplan(TileArgs),
    /// Emit net.h, net.c, main.c and golden vectors for a quantized model.
    Codegen(CodegenArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    data: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Share of the training file held out for model selection.
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Train in f64 (the stored model stays f32).
    #[arg(long)]
    high_precision: bool,
    /// Write the per-epoch history as CSV.
    #[arg(long, value_name = "FILE")]
    history: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TileArgs {
    model: PathBuf,
    /// Bytes, or with a B/kB/MB suffix (binary multiples).
    #[arg(long)]
    budget: Option<String>,
    /// Count one in-flight buffer per stream instead of two.
    #[arg(long)]
    single_buffer: bool,
    /// Write the plan as key=value lines.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CodegenArgs {
    model: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Golden vectors to sample.
    #[arg(long)]
    golden: Option<usize>,
    /// Labelled beats to draw golden vectors from; synthetic beats otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Rewrite dilated kernels as dense zero-stuffed ones.
    #[arg(long)]
    zero_stuff: bool,
    /// Omit the static-arena entry point.
    #[arg(long)]
    no_static_buffers: bool,
    /// Compile the bundle with $ETCN_CC (or cc) and check the golden vectors.
    #[arg(long)]
    verify: bool,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Usage(_) => 1,
            Error::Diverged { .. } => 3,
            _ => 2,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

type CmdResult = Result<String, Failure>;

struct Ctx {
    seed: u64,
    exec: Execution,
    conf: ConfigFile,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("etcn: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    let conf = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let exec = if cli.jobs > 1 {
        #[cfg(feature = "parallel")]
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs as usize)
            .build_global()
            .map_err(|e| Error::Usage(format!("cannot start {} workers: {e}", cli.jobs)))?;
        Execution::Parallel
    } else {
        Execution::Sequential
    };
    let ctx = Ctx {
        seed: cli.seed,
        exec,
        conf,
    };
    match cli.cmd {
        Cmd::Train(a) => cmd_train(&ctx, a),
        Cmd::Eval { model, data } => cmd_eval(&ctx, &model, &data),
        Cmd::Quantize { model, calib, out } => cmd_quantize(&ctx, &model, &calib, &out),
        Cmd::Infer { model, beats } => cmd_infer(&model, &beats),
        Cmd::Report { model, out } => cmd_report(&model, out.as_deref()),
        Cmd::Tileplan(a) => cmd_tileplan(&ctx, a),
        Cmd::Codegen(a) => cmd_codegen(&ctx, a),
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure {
        code: 2,
        msg: format!("{}: {e}", path.display()),
    })
}

fn load_data(path: &Path, len: usize) -> Result<Dataset, Failure> {
    data::load_ucr(path, len).map_err(|e| match e {
        Error::Parse { .. } | Error::Domain(_) => Failure {
            code: 2,
            msg: format!("{}: {e}", path.display()),
        },
        other => other.into(),
    })
}

fn load_quantized(path: &Path, what: &str) -> Result<QNetwork, Failure> {
    match Model::read(path)?.0 {
        Model::Quantized(q) => Ok(q),
        Model::Float(_) => Err(Failure {
            code: 2,
            msg: format!(
                "{}: {what} needs a quantized model; run `etcn quantize` first",
                path.display()
            ),
        }),
    }
}

fn cmd_train(ctx: &Ctx, a: TrainArgs) -> CmdResult {
    let c = &ctx.conf;
    let precision = match c.pick("precision", None, "standard".to_string())?.as_str() {
        _ if a.high_precision => Precision::High,
        "high" => Precision::High,
        "standard" => Precision::Standard,
        other => {
            return Err(
                Error::Usage(format!("precision {other:?} is neither standard nor high")).into(),
            )
        }
    };
    let cfg = TrainConfig {
        batch_size: c.pick("batch_size", a.batch_size, 30)?,
        lr: c.pick("lr", a.lr, 1e-3)?,
        epochs: c.pick("epochs", a.epochs, 20)?,
        beta1: c.pick("beta1", None, 0.9)?,
        beta2: c.pick("beta2", None, 0.999)?,
        eps: c.pick("eps", None, 1e-8)?,
        seed: ctx.seed,
        precision,
        exec: ctx.exec,
    };
    cfg.validate()?;
    let arch = ArchConfig {
        dropout_p: c.pick("dropout", a.dropout, ArchConfig::ecg5000().dropout_p)?,
        ..ArchConfig::ecg5000()
    };
    let val_fraction: f64 = c.pick("val_fraction", a.val_fraction, 0.1)?;
    let ds = load_data(&a.data, arch.input_len)?;
    let net = Network::<f32>::build(&arch, ctx.seed)?;

    let mut out = String::new();
    let (net, best_epoch) = if cfg.epochs == 0 {
        let _ = writeln!(out, "epochs=0: writing the initialized network");
        (net, 0)
    } else {
        let (fit, val) = data::stratified_holdout(&ds, val_fraction, ctx.seed)?;
        let _ = writeln!(
            out,
            "training on {} beats, selecting on {} held out; {} epochs, batch {}, lr {}",
            fit.len(),
            val.len(),
            cfg.epochs,
            cfg.batch_size,
            cfg.lr
        );
        let outcome = ecg_tcn::tcn::train(net, &fit, &val, &cfg)?;
        let _ = writeln!(
            out,
            "{:>5} {:>11} {:>9} {:>8} {:>8}",
            "epoch", "train_loss", "val_loss", "val_acc", "val_bal"
        );
        let mut csv =
            String::from("epoch,train_loss,val_loss,val_accuracy,val_balanced_accuracy\n");
        for h in &outcome.history {
            let _ = writeln!(
                out,
                "{:>5} {:>11.5} {:>9.5} {:>8.4} {:>8.4}",
                h.epoch, h.train_loss, h.val_loss, h.val_accuracy, h.val_balanced_accuracy
            );
            let _ = writeln!(
                csv,
                "{},{},{},{},{}",
                h.epoch, h.train_loss, h.val_loss, h.val_accuracy, h.val_balanced_accuracy
            );
        }
        if let Some(p) = &a.history {
            write_file(p, &csv)?;
        }
        let best = &outcome.history[outcome.best_epoch - 1];
        let _ = writeln!(
            out,
            "selected epoch {} (val accuracy {:.4}, val loss {:.5})",
            outcome.best_epoch, best.val_accuracy, best.val_loss
        );
        (outcome.network, outcome.best_epoch)
    };
    let mut c = model::encode_float(&net);
    model::put_train_config(&mut c, &cfg);
    c.set_meta("train.selected_epoch", best_epoch);
    c.set_meta("train.val_fraction", val_fraction);
    c.write(&a.out)?;
    let _ = writeln!(out, "wrote {}", a.out.display());
    Ok(out)
}

fn cmd_eval(ctx: &Ctx, model_path: &Path, data_path: &Path) -> CmdResult {
    let (m, c) = Model::read(model_path)?;
    let ds = load_data(data_path, m.arch().input_len)?;
    let preds: Vec<usize> = match &m {
        Model::Float(net) => {
            let xs: Vec<FeatureMap<f32>> = ds
                .beats
                .iter()
                .map(|b| FeatureMap::from_signal(&b.samples))
                .collect();
            net.predict_batch(&xs, ctx.exec)?
        }
        Model::Quantized(q) => qpredict_dataset(q, &ds, ctx.exec)?
            .into_iter()
            .map(|(p, _)| p)
            .collect(),
    };
    let cm = data::confusion(&preds, &ds.labels(), m.arch().n_classes)?;
    let mut out = String::new();
    let _ = writeln!(out, "quantized={}", c.is_quantized() as u8);
    let _ = writeln!(out, "beats: {}", ds.len());
    let _ = writeln!(out, "accuracy: {:.3}", data::accuracy(&cm)?);
    let _ = writeln!(
        out,
        "balanced accuracy: {:.3} (mean per-class recall)",
        data::balanced_accuracy(&cm)?
    );
    let _ = writeln!(
        out,
        "confusion matrix (rows: true class, columns: predicted):"
    );
    let k = cm.classes();
    let _ = write!(out, "{:>12}", "");
    for p in 1..=k {
        let _ = write!(out, "{p:>7}");
    }
    out.push('\n');
    for (t, row) in cm.counts.iter().enumerate() {
        let _ = write!(out, "{:>12}", truncate(data::class_name(t + 1), 12));
        for v in row {
            let _ = write!(out, "{v:>7}");
        }
        out.push('\n');
    }
    Ok(out)
}

fn truncate(s: &str, n: usize) -> &str {
    s.char_indices().nth(n).map_or(s, |(i, _)| &s[..i])
}

fn cmd_quantize(ctx: &Ctx, model_path: &Path, calib_path: &Path, out_path: &Path) -> CmdResult {
    let (m, src) = Model::read(model_path)?;
    let Model::Float(net) = m else {
        return Err(Failure {
            code: 2,
            msg: format!("{}: already quantized", model_path.display()),
        });
    };
    let calib = load_data(calib_path, net.arch.input_len)?;
    if calib.is_empty() {
        return Err(Failure {
            code: 2,
            msg: format!("{}: calibration file holds no beats", calib_path.display()),
        });
    }
    let q = quant::quantize_from_float(&net, &calib, ctx.exec)?;
    let mut c = model::encode_quantized(&q);
    for (k, v) in src.meta.iter().filter(|(k, _)| k.starts_with("train.")) {
        c.set_meta(k, v);
    }
    c.set_meta("calibration.beats", calib.len());
    c.set_meta("calibration.method", "minmax");
    c.write(out_path)?;

    let mut out = String::new();
    let _ = writeln!(
        out,
        "calibrated on {} beats (min/max over the whole set)",
        calib.len()
    );
    let _ = writeln!(out, "{:<14} {:>12} {:>5}", "edge", "scale", "zp");
    for e in q.edges().iter().filter(|e| !e.wide) {
        let _ = writeln!(
            out,
            "{:<14} {:>12.6e} {:>5}",
            e.name, e.qp.scale, e.qp.zero_point
        );
    }
    let _ = writeln!(
        out,
        "{:<14} {:>12} {:>11} {:>5}",
        "layer", "w_scale", "mult", "shift"
    );
    let names = q.ops();
    for op in &names {
        if let quant::QOpKind::Conv(l) = op.kind {
            let _ = writeln!(
                out,
                "{:<14} {:>12.6e} {:>11} {:>5}",
                op.name, l.weight_scale, l.requant.mult, l.requant.shift
            );
        }
    }
    let _ = writeln!(
        out,
        "logit scale {:.6e} (raw int32 logits)",
        q.logit_scale()
    );
    let _ = writeln!(out, "wrote {}", out_path.display());
    Ok(out)
}

/// Optional label and samples.
type Beat = (Option<String>, Vec<f32>);

/// Beats from a text file: 140 samples per line, or a label and 140 samples.
fn read_beats(path: &Path, len: usize) -> Result<Vec<Beat>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure {
        code: 2,
        msg: format!("{}: {e}", path.display()),
    })?;
    let bad = |line: usize, msg: String| Failure {
        code: 2,
        msg: format!("{}: line {line}: {msg}", path.display()),
    };
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let fields: Vec<&str> = raw
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        if fields.is_empty() {
            continue;
        }
        let (label, samples) = match fields.len() {
            n if n == len => (None, &fields[..]),
            n if n == len + 1 => (Some(fields[0].to_string()), &fields[1..]),
            n => {
                return Err(bad(
                    i + 1,
                    format!("expected {len} samples, found {n} fields"),
                ))
            }
        };
        let samples = samples
            .iter()
            .map(|f| {
                f.parse::<f32>()
                    .map_err(|_| bad(i + 1, format!("{f:?} is not a number")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        out.push((label, samples));
    }
    Ok(out)
}

fn cmd_infer(model_path: &Path, beats_path: &Path) -> CmdResult {
    let (m, _) = Model::read(model_path)?;
    let beats = read_beats(beats_path, m.arch().input_len)?;
    let mut out = String::new();
    for (i, (label, samples)) in beats.iter().enumerate() {
        let (cls, logits) = match &m {
            Model::Float(net) => {
                let l = net.forward(&FeatureMap::from_signal(samples))?;
                let cls = ecg_tcn::tcn::argmax(&l) + 1;
                (cls, l.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>())
            }
            Model::Quantized(q) => {
                let (cls, l) = qpredict(q, samples)?;
                (cls, l.iter().map(|v| v.to_string()).collect())
            }
        };
        let name = CLASS_NAMES.get(cls - 1).copied().unwrap_or("?");
        let _ = write!(
            out,
            "beat {}: {name} (class {cls}) logits [{}]",
            i + 1,
            logits.join(", ")
        );
        if let Some(l) = label {
            let _ = write!(out, " label {l}");
        }
        out.push('\n');
    }
    Ok(out)
}

fn cmd_report(model_path: &Path, out_path: Option<&Path>) -> CmdResult {
    let (m, _) = Model::read(model_path)?;
    let mut out = String::new();
    match m {
        Model::Quantized(q) => {
            let r = cost::cost_report(&q, cost::count_params_with_bn(&q));
            out.push_str(&r.to_text());
            let _ = writeln!(
                out,
                "parameters after folding batch norm: {}",
                cost::count_params_quantized(&q)
            );
            let _ = writeln!(
                out,
                "activation arena: {} bytes (liveness peak {})",
                cost::arena_layout(&q).size,
                r.peak_activation_bytes
            );
            if let Some(p) = out_path {
                write_file(p, &r.to_kv())?;
            }
        }
        Model::Float(net) => {
            let params = cost::count_params(&net);
            let native = cost::count_macs(&net, MacMode::Native);
            let stuffed = cost::count_macs(&net, MacMode::ZeroStuffed);
            let _ = writeln!(
                out,
                "{:<26} {:>14} {:>14}",
                "metric", "computed", "reference"
            );
            let _ = writeln!(
                out,
                "{:<26} {params:>14} {:>14}",
                "parameters",
                cost::reference::PARAMS
            );
            let _ = writeln!(
                out,
                "{:<26} {native:>14} {:>14}",
                "MACs (native dilation)",
                cost::reference::MACS_NATIVE
            );
            let _ = writeln!(
                out,
                "{:<26} {stuffed:>14} {:>14}",
                "MACs (zero-stuffed)",
                cost::reference::MACS_ZERO_STUFFED
            );
            let _ = writeln!(out, "memory figures need a quantized model (etcn quantize)");
            if let Some(p) = out_path {
                write_file(
                    p,
                    &format!(
                        "params={params}\nmacs_native={native}\nmacs_zero_stuffed={stuffed}\n"
                    ),
                )?;
            }
        }
    }
    Ok(out)
}

fn cmd_tileplan(ctx: &Ctx, a: TileArgs) -> CmdResult {
    let q = load_quantized(&a.model, "tileplan")?;
    let budget_text = ctx.conf.pick("budget", a.budget, "80kB".to_string())?;
    let budget = tiling::parse_budget(&budget_text)?;
    let double_buffer = if a.single_buffer {
        false
    } else {
        ctx.conf.pick::<u8>("double_buffer", None, 1)? != 0
    };
    let plan = tiling::plan_tiles(&q, budget, double_buffer).map_err(|e| match e {
        Error::Capacity(_) => Failure {
            code: 4,
            msg: format!("infeasible: {e}"),
        },
        other => other.into(),
    })?;
    if let Some(p) = &a.out {
        write_file(p, &plan.to_kv())?;
    }
    Ok(plan.to_text())
}

fn cmd_codegen(ctx: &Ctx, a: CodegenArgs) -> CmdResult {
    let q = load_quantized(&a.model, "codegen")?;
    let n: usize = ctx.conf.pick("golden", a.golden, 100)?;
    let opts = EmitOptions {
        native_dilation: !a.zero_stuff,
        static_buffers: !a.no_static_buffers,
    };
    let bundle = codegen::emit_source(&q, opts)?;
    let source = match &a.data {
        Some(p) => load_data(p, q.arch.input_len)?,
        None => synthetic_dataset(n.max(1), &ECG5000_TRAIN_SHARES, ctx.seed),
    };
    let golden = if n == 0 {
        Vec::new()
    } else {
        codegen::emit_golden_vectors(&q, &source, n, ctx.seed)?
    };
    bundle.write_to(&a.out_dir)?;
    let golden_text = format_golden(&golden);
    write_file(&a.out_dir.join("golden.txt"), &golden_text)?;

    let mut out = String::new();
    for f in SourceBundle::FILES.iter().chain(["golden.txt"].iter()) {
        let _ = writeln!(out, "wrote {}", a.out_dir.join(f).display());
    }
    let _ = writeln!(
        out,
        "constant tables {} bytes, activation arena {} bytes, {} golden vectors{}",
        bundle.const_bytes,
        bundle.arena_bytes,
        golden.len(),
        if a.data.is_none() && n > 0 {
            " (synthetic beats)"
        } else {
            ""
        }
    );
    if a.verify {
        let exe = codegen::compile_bundle(&a.out_dir, &codegen::compiler_template())?;
        let got = codegen::run_harness(&exe, &golden_text)?;
        let ok = golden
            .iter()
            .zip(&got)
            .filter(|(g, (l, _))| &g.logits == l)
            .count();
        if ok != golden.len() || got.len() != golden.len() {
            return Err(Failure {
                code: 2,
                msg: format!(
                    "compiled harness matched {ok} of {} golden vectors",
                    golden.len()
                ),
            });
        }
        let _ = writeln!(
            out,
            "compiled harness reproduces {ok}/{} golden vectors",
            golden.len()
        );
    }
    Ok(out)
}
