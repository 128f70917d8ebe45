//! `prediflow` command-line entry point.
//!
//! Machine-readable JSON goes to stdout (or `--report` / `--out`), progress
//! and summaries to stderr. Failures print one line
//! `error code=<n> kind=<kind> reason=<json string>` and exit with 1 (config),
//! 2 (data/format) or 3 (numeric).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use prediflow::checks::{gradient_suite, GRAD_TOLERANCE};
use prediflow::config::{seed_from_env, RunConfig};
use prediflow::eval::{bench_latency, evaluate, EvalReport, Refinement};
use prediflow::pipeline::{
    infer, init_training, train_refiner, Aggregation, Sampling, TrainState, VelocitySource,
};
use prediflow::predictor::{best_of_n_ade, train_predictor, PredictorModel};
use prediflow::refiner::{RefinerMeta, RefinerModel};
use prediflow::synth::{generate_dataset, Trial, Windows};
use prediflow::synth::{read_dataset, write_dataset, DatasetFile};
use prediflow::{exec, motion, Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "prediflow",
    version,
    about = "Coarse-to-fine human motion forecasting for human-robot collaboration"
)]
struct Cli {
    /// JSON run configuration; missing keys keep the preset values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Start from the paper-scale preset instead of the desk-scale one.
    #[arg(long, global = true)]
    paper_scale: bool,
    /// Worker threads for data-parallel work (1 = sequential).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Master seed (PREDIFLOW_SEED overrides it).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate the synthetic HRC dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the coarse one-step predictor.
    TrainPredictor {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the residual refiner against a frozen predictor.
    TrainRefiner {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        predictor: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a training state written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many epochs in total (default: all).
        #[arg(long)]
        until: Option<usize>,
    },
    /// Sample predictions for one test window.
    Predict {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        predictor: PathBuf,
        #[arg(long)]
        refiner: Option<PathBuf>,
        #[arg(long)]
        obs_index: usize,
        #[arg(long, value_parser = ["train", "val", "test"], default_value = "test")]
        split: String,
        #[arg(long)]
        agg: Option<Aggregation>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Metric tables on the test split.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        predictor: PathBuf,
        #[arg(long)]
        refiner: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Evaluate an evenly strided subset of this many windows.
        #[arg(long)]
        windows: Option<usize>,
    },
    /// Inference latency for one observation.
    Bench {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        predictor: PathBuf,
        #[arg(long)]
        refiner: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long, default_value_t = 0)]
        obs_index: usize,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every layer and both networks.
    Gradcheck {
        #[arg(long, default_value_t = GRAD_TOLERANCE)]
        tol: f64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let reason = e.to_string();
            let first = reason.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", failure_line(1, "usage", first));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            eprintln!("{}", failure_line(code, e.kind(), &e.to_string()));
            ExitCode::from(code as u8)
        }
    }
}

fn failure_line(code: i32, kind: &str, reason: &str) -> String {
    format!("error code={code} kind={kind} reason={}", json!(reason))
}

fn run(cli: Cli) -> Result<()> {
    let base = RunConfig::preset(cli.paper_scale);
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p, &base)?,
        None => base,
    };
    let seed = seed_from_env()?.or(cli.seed);
    let cfg = cfg.resolve(seed)?;
    if let Some(t) = cli.threads {
        exec::configure_threads(t)?;
    }
    match cli.cmd {
        Cmd::GenData { out } => gen_data(&cfg, &out),
        Cmd::TrainPredictor { data, out } => cmd_train_predictor(&cfg, &data, &out),
        Cmd::TrainRefiner {
            data,
            predictor,
            out,
            resume,
            until,
        } => cmd_train_refiner(&cfg, &data, &predictor, &out, resume.as_deref(), until),
        Cmd::Predict {
            data,
            predictor,
            refiner,
            obs_index,
            split,
            agg,
            n,
            m,
            out,
        } => {
            let s = PredictArgs {
                obs_index,
                split,
                agg,
                n,
                m,
            };
            cmd_predict(
                &cfg,
                &data,
                &predictor,
                refiner.as_deref(),
                &s,
                out.as_deref(),
            )
        }
        Cmd::Evaluate {
            data,
            predictor,
            refiner,
            report,
            windows,
        } => cmd_evaluate(
            &cfg,
            &data,
            &predictor,
            refiner.as_deref(),
            report.as_deref(),
            windows,
        ),
        Cmd::Bench {
            data,
            predictor,
            refiner,
            n,
            m,
            runs,
            warmup,
            obs_index,
            report,
        } => {
            let mut lc = cfg.latency.clone();
            lc.n = n.unwrap_or(lc.n);
            lc.m = m.unwrap_or(lc.m);
            lc.runs = runs.unwrap_or(lc.runs);
            lc.warmup = warmup.unwrap_or(lc.warmup);
            let trials = load_trials(&cfg, &data)?;
            let w = cfg.windows(&trials)?;
            check_index(&w.test, obs_index)?;
            let pred = PredictorModel::load(&predictor)?;
            let loaded = refiner.as_deref().map(RefinerModel::load).transpose()?;
            let refinement = match &loaded {
                Some((r, meta)) => Refinement {
                    field: VelocitySource::Network(r),
                    alpha: meta.alpha,
                },
                None => Refinement {
                    field: VelocitySource::Zero,
                    alpha: 1.0,
                },
            };
            let rep = bench_latency(
                w.test.obs_human(obs_index),
                w.test.obs_robot(obs_index),
                &pred,
                refinement,
                &lc,
            )?;
            eprintln!(
                "latency: mean {:.2} ms (std {:.2}), predictor only {:.2} ms, ratio {:.2}, budget {:.1} ms, threads {}",
                rep.mean * 1e3,
                rep.std * 1e3,
                rep.predictor_mean * 1e3,
                rep.overhead_ratio,
                rep.budget * 1e3,
                rep.threads
            );
            let doc = json!({ "config": lc, "refined": loaded.is_some(), "latency": rep });
            emit(&doc, report.as_deref())
        }
        Cmd::Gradcheck { tol } => {
            let cases = gradient_suite(cfg.seed)?;
            let worst = cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
            for c in &cases {
                eprintln!(
                    "{:<22} max rel err {:.3e} ({})",
                    c.name, c.max_rel_err, c.worst_param
                );
            }
            print_out(
                &json!({ "max_rel_err": worst, "tolerance": tol, "cases": cases }).to_string(),
            )?;
            if worst > tol {
                return Err(Error::Numeric(format!(
                    "gradient check: max relative error {worst:.3e} > {tol:.1e}"
                )));
            }
            Ok(())
        }
    }
}

fn emit(doc: &serde_json::Value, path: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(doc)?;
    match path {
        Some(p) => std::fs::write(p, text + "\n").map_err(|e| io_err(p, e)),
        None => print_out(&text),
    }
}

/// stdout write that treats a closed pipe (`| head`) as success.
fn print_out(text: &str) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}").and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
            Err(io_err(Path::new("<stdout>"), e))
        }
        _ => Ok(()),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn run_record(cfg: &RunConfig) -> serde_json::Value {
    json!({ "run": cfg, "threads": exec::current_threads() })
}

/// `<artifact>.run.json`: the resolved configuration behind an artifact,
/// loadable again with `--config`.
fn write_run_record(artifact: &Path, cfg: &RunConfig) -> Result<()> {
    let mut p = artifact.as_os_str().to_owned();
    p.push(".run.json");
    let p = PathBuf::from(p);
    let text = serde_json::to_string_pretty(cfg)?;
    std::fs::write(&p, text + "\n").map_err(|e| io_err(&p, e))
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let trials = generate_dataset(&cfg.scenario)?;
    let file = DatasetFile {
        j: cfg.scenario.j,
        k: cfg.scenario.k,
        rate: motion::FRAME_RATE,
        trials,
    };
    write_dataset(out, &file)?;
    prediflow::nn::checkpoint::write_sidecar(out, &cfg.scenario)?;
    let frames: usize = file.trials.iter().map(Trial::len).sum();
    eprintln!(
        "wrote {} trials ({frames} frames) to {}",
        file.trials.len(),
        out.display()
    );
    write_run_record(out, cfg)?;
    let doc = json!({
        "command": "gen-data",
        "out": out,
        "trials": file.trials.len(),
        "frames": frames,
        "seed": cfg.seed,
        "threads": exec::current_threads(),
    });
    print_out(&doc.to_string())?;
    Ok(())
}

fn load_trials(cfg: &RunConfig, path: &Path) -> Result<Vec<Trial>> {
    let file = read_dataset(path)?;
    if file.j != cfg.scenario.j || file.k != cfg.scenario.k {
        return Err(Error::Config(format!(
            "dataset has J={} K={}, configuration expects J={} K={}",
            file.j, file.k, cfg.scenario.j, cfg.scenario.k
        )));
    }
    Ok(file.trials)
}

fn check_index(w: &Windows<'_>, i: usize) -> Result<()> {
    if i >= w.len() {
        return Err(Error::Usage(format!(
            "window index {i} out of range (split has {})",
            w.len()
        )));
    }
    Ok(())
}

fn zero_velocity_ade(w: &Windows<'_>) -> Result<f64> {
    let dim = w.human_dim();
    let mut total = 0.0;
    for i in 0..w.len() {
        let held: Vec<f32> = (0..w.horizon)
            .flat_map(|_| w.last_observed(i).iter().copied())
            .collect();
        total += prediflow::eval::ade(&held, w.future_human(i), dim)?;
    }
    Ok(total / w.len() as f64)
}

fn cmd_train_predictor(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let trials = load_trials(cfg, data)?;
    let w = cfg.windows(&trials)?;
    eprintln!("training predictor on {} windows", w.train.len());
    let (model, log) = train_predictor(&w.train, cfg.predictor.clone(), &cfg.predictor_training)?;
    model.save(out, Some(&log))?;
    write_run_record(out, cfg)?;
    let best50 = best_of_n_ade(&model, &w.val, 50, cfg.seed)?;
    let zv = zero_velocity_ade(&w.val)?;
    eprintln!("validation best-of-50 ADE {best50:.4} vs zero-velocity {zv:.4}");
    print_out(
        &json!({
            "command": "train-predictor",
            "out": out,
            "final_loss": log.epoch_loss.last(),
            "steps": log.steps,
            "val_best_of_50_ade": best50,
            "val_zero_velocity_ade": zv,
            "threads": exec::current_threads(),
        })
        .to_string(),
    )?;
    Ok(())
}

fn state_path(out: &Path) -> PathBuf {
    let mut p = out.as_os_str().to_owned();
    p.push(".state");
    PathBuf::from(p)
}

fn cmd_train_refiner(
    cfg: &RunConfig,
    data: &Path,
    predictor: &Path,
    out: &Path,
    resume: Option<&Path>,
    until: Option<usize>,
) -> Result<()> {
    let trials = load_trials(cfg, data)?;
    let w = cfg.windows(&trials)?;
    let pred = PredictorModel::load(predictor)?;
    let (mut state, pcfg) = match resume {
        Some(p) => TrainState::load(p)?,
        None => (
            init_training(&w.train, &pred, cfg.refiner.clone(), &cfg.pipeline)?,
            cfg.pipeline.clone(),
        ),
    };
    eprintln!(
        "training refiner from epoch {} (alpha {:.4})",
        state.epoch, state.alpha
    );
    let until = until.unwrap_or(pcfg.epochs);
    train_refiner(&mut state, &w.train, &w.val, &pred, &pcfg, until)?;
    let st = state_path(out);
    state.save(&st, &pcfg)?;
    let meta: RefinerMeta = state.meta();
    state.best_model().save(out, &meta)?;
    write_run_record(out, cfg)?;
    print_out(
        &json!({
            "command": "train-refiner",
            "out": out,
            "state": st,
            "epoch": state.epoch,
            "alpha": state.alpha,
            "epoch_loss": state.log.epoch_loss,
            "validation": state.log.validation,
            "selected": meta,
            "threads": exec::current_threads(),
        })
        .to_string(),
    )?;
    Ok(())
}

struct PredictArgs {
    obs_index: usize,
    split: String,
    agg: Option<Aggregation>,
    n: Option<usize>,
    m: Option<usize>,
}

fn cmd_predict(
    cfg: &RunConfig,
    data: &Path,
    predictor: &Path,
    refiner: Option<&Path>,
    a: &PredictArgs,
    out: Option<&Path>,
) -> Result<()> {
    let trials = load_trials(cfg, data)?;
    let sw = cfg.windows(&trials)?;
    let w = match a.split.as_str() {
        "train" => &sw.train,
        "val" => &sw.val,
        _ => &sw.test,
    };
    check_index(w, a.obs_index)?;
    let pred = PredictorModel::load(predictor)?;
    let loaded = refiner.map(RefinerModel::load).transpose()?;
    let (field, alpha) = match &loaded {
        Some((r, meta)) => (VelocitySource::Network(r), meta.alpha),
        None => (VelocitySource::Zero, 1.0),
    };
    let s = Sampling {
        n: a.n.unwrap_or(cfg.pipeline.n),
        m: if loaded.is_some() {
            a.m.unwrap_or(cfg.pipeline.m)
        } else {
            1
        },
        agg: a.agg.unwrap_or(cfg.pipeline.agg),
        alpha,
    };
    let i = a.obs_index;
    let set = infer(
        w.obs_human(i),
        w.obs_robot(i),
        &pred,
        field,
        &s,
        cfg.seed.wrapping_add(i as u64),
    )?;
    let dim = pred.cfg.human_dim;
    let samples = if loaded.is_some() {
        &set.refined
    } else {
        &set.coarse
    };
    let futures: Vec<Vec<f32>> = samples
        .chunks(set.coeff_len())
        .map(|c| pred.window.future(c, dim))
        .collect();
    let ades: Vec<f64> = futures
        .iter()
        .map(|f| prediflow::eval::ade(f, w.future_human(i), dim))
        .collect::<Result<_>>()?;
    eprintln!(
        "{} samples for {} window {i}; ADE best {:.4}",
        futures.len(),
        a.split,
        ades.iter().cloned().fold(f64::INFINITY, f64::min)
    );
    let doc = json!({
        "command": "predict",
        "split": a.split,
        "window": i,
        "refined": loaded.is_some(),
        "sampling": s,
        "frames": w.horizon,
        "dim": dim,
        "ade": ades,
        "futures": futures,
    });
    emit(&doc, out)
}

fn cmd_evaluate(
    cfg: &RunConfig,
    data: &Path,
    predictor: &Path,
    refiner: Option<&Path>,
    report: Option<&Path>,
    windows: Option<usize>,
) -> Result<()> {
    let trials = load_trials(cfg, data)?;
    let w = cfg.windows(&trials)?;
    let pred = PredictorModel::load(predictor)?;
    let loaded = refiner.map(RefinerModel::load).transpose()?;
    let refinement = loaded.as_ref().map(|(r, meta)| Refinement {
        field: VelocitySource::Network(r),
        alpha: meta.alpha,
    });
    let mut ec = cfg.eval.clone();
    if windows.is_some() {
        ec.windows = windows;
    }
    let rep: EvalReport = evaluate(&w.test, &pred, refinement, &ec, run_record(cfg))?;
    for (name, m) in &rep.metrics {
        eprintln!(
            "{name:>6}: ADE {:.4}/{:.4}/{:.4}  FDE {:.4}/{:.4}/{:.4}",
            m.ade.best, m.ade.median, m.ade.worst, m.fde.best, m.fde.median, m.fde.worst
        );
    }
    for (name, imp) in &rep.improvement_pct {
        eprintln!(
            "{name:>6}: ADE improvement best {:.2}% median {:.2}% worst {:.2}%",
            imp["ade.best"], imp["ade.median"], imp["ade.worst"]
        );
    }
    match report {
        Some(p) => rep.write(p),
        None => print_out(&serde_json::to_string_pretty(&rep)?),
    }
}
