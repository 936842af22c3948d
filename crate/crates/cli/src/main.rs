use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};
use zakai_core::config::RunConfig;
use zakai_core::filter::{build_kernel, ZakaiFilter};
use zakai_core::forecast::{ensemble_quantiles, forecast_contexts, ForecastEnsemble};
use zakai_core::io::{load_series, DatasetManifest, InputRecord, Manifest, PrepReport};
use zakai_core::metrics::evaluate;
use zakai_core::oracle::run_verify;
use zakai_core::sim::{chrono_split, simulate_coupled, sliding_windows, WindowDataset};
use zakai_core::train::{fit, load_checkpoint, save_checkpoint, ObjectiveSetup};
use zakai_core::{BeliefDensity, Decoder, Error, ObservationModel, Result};

#[derive(Parser)]
#[command(name = "zakai", version, about = "Grid-based nonlinear filtering and forecasting for jump-diffusion series")]
struct Cli {
    /// TOML config, or a manifest.json from an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set window.m=120`. Repeatable; applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate one latent/observed path; writes path.csv.
    Simulate {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Filter a whole series from the uniform belief; writes trace.csv.
    Filter {
        #[arg(long)]
        input: Option<PathBuf>,
        /// Decoder checkpoint; defaults to the config's decoder.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fit decoder parameters on the training windows; writes checkpoint.json and train_log.csv.
    Train {
        #[arg(long)]
        input: Option<PathBuf>,
        /// Starting point; defaults to the config's decoder.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Roll out ensembles for the test windows; writes forecasts.csv, truth.csv and quantiles.csv.
    Forecast {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score forecasts; writes metrics.json. Without --forecasts the test-window
    /// forecasts are produced first.
    Eval {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        forecasts: Option<PathBuf>,
        /// Defaults to truth.csv next to the forecasts file.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Run the numerical checks; writes verify.json and convergence.csv.
    Verify,
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::Simulate { .. } => "simulate",
            Cmd::Filter { .. } => "filter",
            Cmd::Train { .. } => "train",
            Cmd::Forecast { .. } => "forecast",
            Cmd::Eval { .. } => "eval",
            Cmd::Verify => "verify",
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let mut err = json!({ "kind": e.kind(), "message": e.to_string() });
            if let Error::Io { path, .. } = &e {
                err["path"] = json!(path);
            }
            let _ = writeln!(std::io::stderr(), "{}", json!({ "error": err }));
            ExitCode::from(match e {
                Error::Config(_) | Error::InvalidParam(_) | Error::BadFraction { .. } => 2,
                Error::Io { .. } => 3,
                _ => 1,
            })
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut sets = cli.set.clone();
    if let Cmd::Simulate { steps, seed } = &cli.cmd {
        if let Some(s) = steps {
            sets.push(format!("simulate.steps={s}"));
        }
        if let Some(s) = seed {
            sets.push(format!("seeds.simulate={s}"));
        }
    }
    let mut cfg = base.with_overrides(&sets)?;
    // path flags are echoed into the config so the manifest can replay the run
    let (input, checkpoint) = match &cli.cmd {
        Cmd::Filter { input, checkpoint } | Cmd::Train { input, checkpoint } | Cmd::Forecast { input, checkpoint } => (input, checkpoint),
        Cmd::Eval { input, checkpoint, .. } => (input, checkpoint),
        Cmd::Simulate { .. } | Cmd::Verify => (&None, &None),
    };
    if let Some(p) = input {
        cfg.data.path = Some(p.display().to_string());
    }
    if let Some(p) = checkpoint {
        cfg.data.checkpoint = Some(p.display().to_string());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_file(p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::Io { path: p.display().to_string(), source: std::io::Error::new(std::io::ErrorKind::NotFound, "file not found") })
    }
}

fn input_path(cfg: &RunConfig) -> Result<PathBuf> {
    let p = cfg
        .data
        .path
        .as_ref()
        .map(PathBuf::from)
        .ok_or_else(|| Error::Config("no input series: pass --input or set data.path".into()))?;
    require_file(&p)?;
    Ok(p)
}

fn run(cli: Cli) -> Result<Value> {
    let cfg = resolve_config(&cli)?;
    // every file the command reads is checked before any computation starts
    match &cli.cmd {
        Cmd::Simulate { .. } | Cmd::Verify => {}
        Cmd::Filter { .. } | Cmd::Train { .. } | Cmd::Forecast { .. } => {
            input_path(&cfg)?;
        }
        Cmd::Eval { forecasts, truth, .. } => match forecasts {
            Some(f) => {
                require_file(f)?;
                require_file(&truth_path(f, truth))?;
            }
            None => {
                input_path(&cfg)?;
            }
        },
    }
    if let Some(c) = &cfg.data.checkpoint {
        require_file(Path::new(c))?;
    }
    if cfg.parallel.threads > 0 {
        // only fails if a pool already exists, which cannot happen this early
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.parallel.threads).build_global();
    }
    std::fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    let mut manifest = Manifest::new(cli.cmd.name(), &cfg);
    let out = Out { dir: cli.out.clone() };
    let summary = match &cli.cmd {
        Cmd::Simulate { .. } => simulate(&cfg, &out, &mut manifest)?,
        Cmd::Filter { .. } => filter(&cfg, &out, &mut manifest)?,
        Cmd::Train { .. } => train(&cfg, &out, &mut manifest)?,
        Cmd::Forecast { .. } => {
            let r = run_forecasts(&cfg, &mut manifest)?;
            write_forecasts(&cfg, &out, &mut manifest, &r)?
        }
        Cmd::Eval { forecasts, truth, .. } => eval(&cfg, &out, &mut manifest, forecasts, truth)?,
        Cmd::Verify => verify(&cfg, &out, &mut manifest)?,
    };
    let mpath = out.file(&format!("manifest_{}.json", cli.cmd.name()));
    manifest.write_json(&mpath)?;
    let mut summary = summary;
    summary["manifest"] = json!(mpath.display().to_string());
    Ok(summary)
}

struct Out {
    dir: PathBuf,
}

impl Out {
    fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn decoder_for(cfg: &RunConfig, manifest: &mut Manifest) -> Result<Decoder> {
    match &cfg.data.checkpoint {
        Some(p) => {
            manifest.inputs.push(InputRecord::from_file(p)?);
            let d = load_checkpoint(p)?;
            d.validate()?;
            Ok(d)
        }
        None => Ok(cfg.decoder.clone()),
    }
}

fn build_filter(cfg: &RunConfig, decoder: Decoder) -> Result<ZakaiFilter> {
    let grid = cfg.grid.build()?;
    let kernel = build_kernel(&cfg.latent, cfg.window.dt, &grid)?;
    let model = ObservationModel::new(decoder, cfg.filter.epsilon)?;
    Ok(ZakaiFilter::new(kernel, model).with_mode(cfg.filter.split_mode))
}

fn read_input(cfg: &RunConfig, manifest: &mut Manifest) -> Result<(Vec<f64>, PrepReport)> {
    let path = &input_path(cfg)?;
    manifest.inputs.push(InputRecord::from_file(path)?);
    let (series, report) = load_series(path, &cfg.data)?;
    manifest.extra.insert("preprocessing".into(), serde_json::to_value(&report)?);
    Ok((series.values, report))
}

fn windows_and_split(cfg: &RunConfig, x: &[f64], out: &Out, manifest: &mut Manifest, seed: u64) -> Result<(WindowDataset, zakai_core::Split)> {
    let w = &cfg.window;
    let ds = sliding_windows(x, w.m, w.n, w.stride)?;
    let split = chrono_split(ds.len(), w.train_frac, w.val_frac)?;
    let dm = DatasetManifest { m: w.m, n: w.n, stride: w.stride, n_windows: ds.len(), starts: ds.starts.clone(), split: split.clone(), seed };
    let p = out.file("dataset.json");
    dm.write_json(&p)?;
    manifest.outputs.push(p.display().to_string());
    Ok((ds, split))
}

fn simulate(cfg: &RunConfig, out: &Out, manifest: &mut Manifest) -> Result<Value> {
    let s = &cfg.simulate;
    let path = simulate_coupled(&cfg.latent, &cfg.obs_params()?, s.theta0, s.x0, s.steps, cfg.window.dt, cfg.seeds.simulate)?;
    let p = out.file("path.csv");
    path.write_csv(&p)?;
    manifest.outputs.push(p.display().to_string());
    let jumps: u64 = path.jumps.iter().map(|j| *j as u64).sum();
    Ok(json!({ "command": "simulate", "path": p.display().to_string(), "steps": s.steps, "jumps": jumps }))
}

fn filter(cfg: &RunConfig, out: &Out, manifest: &mut Manifest) -> Result<Value> {
    let decoder = decoder_for(cfg, manifest)?;
    let (x, _) = read_input(cfg, manifest)?;
    if x.len() < 2 {
        return Err(Error::TooShort { len: x.len(), need: 2 });
    }
    let f = build_filter(cfg, decoder)?;
    let (state, trace) = f.filter_window_trace(&x, &BeliefDensity::uniform(*f.grid()), cfg.filter.snapshot_every)?;
    let p = out.file("trace.csv");
    trace.write_csv(&p)?;
    manifest.outputs.push(p.display().to_string());
    if !trace.snapshots.is_empty() {
        let sp = out.file("snapshots.csv");
        trace.write_snapshots_csv(&sp)?;
        manifest.outputs.push(sp.display().to_string());
    }
    Ok(json!({ "command": "filter", "trace": p.display().to_string(), "steps": state.k, "final_mean": state.beta }))
}

fn train(cfg: &RunConfig, out: &Out, manifest: &mut Manifest) -> Result<Value> {
    let d0 = decoder_for(cfg, manifest)?;
    let (x, _) = read_input(cfg, manifest)?;
    let (ds, split) = windows_and_split(cfg, &x, out, manifest, cfg.train.optimizer.seed)?;
    let full: Vec<Vec<f64>> = (0..ds.len()).map(|i| ds.full_window(i)).collect();
    let pick = |idx: &[usize]| -> Vec<&[f64]> { idx.iter().map(|i| full[*i].as_slice()).collect() };
    let grid = cfg.grid.build()?;
    let mut setup = ObjectiveSetup::new(build_kernel(&cfg.latent, cfg.window.dt, &grid)?, cfg.window.m, cfg.window.n);
    setup.kl_weight = cfg.train.optimizer.kl_weight;
    setup.mode = cfg.filter.split_mode;
    setup.belief = cfg.train.belief;
    setup.epsilon = cfg.filter.epsilon;
    let r = fit(&d0, &pick(&split.train), &pick(&split.val), &setup, &cfg.train.optimizer)?;
    let ck = out.file("checkpoint.json");
    save_checkpoint(&r.decoder, &ck)?;
    let log = out.file("train_log.csv");
    r.write_log_csv(&log)?;
    manifest.outputs.extend([ck.display().to_string(), log.display().to_string()]);
    manifest.extra.insert("best_epoch".into(), json!(r.best_epoch));
    manifest.extra.insert("best_val".into(), json!(r.best_val));
    Ok(json!({
        "command": "train",
        "checkpoint": ck.display().to_string(),
        "best_epoch": r.best_epoch,
        "best_val": r.best_val,
        "decoder": r.decoder,
    }))
}

struct ForecastRun {
    ensembles: Vec<ForecastEnsemble>,
    truths: Vec<Vec<f64>>,
    windows: Vec<usize>,
    out_dataset: Option<(WindowDataset, zakai_core::Split)>,
}

fn run_forecasts(cfg: &RunConfig, manifest: &mut Manifest) -> Result<ForecastRun> {
    let decoder = decoder_for(cfg, manifest)?;
    let (x, _) = read_input(cfg, manifest)?;
    let w = &cfg.window;
    let ds = sliding_windows(&x, w.m, w.n, w.stride)?;
    let split = chrono_split(ds.len(), w.train_frac, w.val_frac)?;
    if split.test.is_empty() {
        return Err(Error::TooShort { len: x.len(), need: w.m + w.n + 1 + 4 * w.stride });
    }
    let f = build_filter(cfg, decoder)?;
    let contexts: Vec<Vec<f64>> = split.test.iter().map(|i| ds.contexts[*i].clone()).collect();
    let ensembles = forecast_contexts(&f, &contexts, w.n, cfg.forecast.samples, cfg.train.belief, cfg.seeds.forecast)?;
    let truths = split.test.iter().map(|i| ds.targets[*i].clone()).collect();
    Ok(ForecastRun { ensembles, truths, windows: split.test.clone(), out_dataset: Some((ds, split)) })
}

fn write_forecasts(cfg: &RunConfig, out: &Out, manifest: &mut Manifest, r: &ForecastRun) -> Result<Value> {
    if let Some((ds, split)) = &r.out_dataset {
        let dm = DatasetManifest {
            m: ds.m,
            n: ds.n,
            stride: ds.stride,
            n_windows: ds.len(),
            starts: ds.starts.clone(),
            split: split.clone(),
            seed: cfg.seeds.forecast,
        };
        let p = out.file("dataset.json");
        dm.write_json(&p)?;
        manifest.outputs.push(p.display().to_string());
    }
    let fp = out.file("forecasts.csv");
    let tp = out.file("truth.csv");
    let qp = out.file("quantiles.csv");
    {
        let file = std::fs::File::create(&fp).map_err(io_err(&fp))?;
        let mut w = std::io::BufWriter::new(file);
        writeln!(w, "window,trajectory,step,x").map_err(io_err(&fp))?;
        for (wi, ens) in r.windows.iter().zip(&r.ensembles) {
            for (m, traj) in ens.trajectories.iter().enumerate() {
                for (n, v) in traj.iter().enumerate() {
                    writeln!(w, "{wi},{m},{},{v}", n + 1).map_err(io_err(&fp))?;
                }
            }
        }
        w.flush().map_err(io_err(&fp))?;
    }
    {
        let file = std::fs::File::create(&tp).map_err(io_err(&tp))?;
        let mut w = std::io::BufWriter::new(file);
        writeln!(w, "window,step,x").map_err(io_err(&tp))?;
        for (wi, y) in r.windows.iter().zip(&r.truths) {
            for (n, v) in y.iter().enumerate() {
                writeln!(w, "{wi},{},{v}", n + 1).map_err(io_err(&tp))?;
            }
        }
        w.flush().map_err(io_err(&tp))?;
    }
    {
        let levels = &cfg.forecast.quantiles;
        let file = std::fs::File::create(&qp).map_err(io_err(&qp))?;
        let mut w = std::io::BufWriter::new(file);
        let head: Vec<String> = levels.iter().map(|p| format!("q{p}")).collect();
        writeln!(w, "window,step,{}", head.join(",")).map_err(io_err(&qp))?;
        for (wi, ens) in r.windows.iter().zip(&r.ensembles) {
            for (n, row) in ensemble_quantiles(ens, levels)?.iter().enumerate() {
                let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                writeln!(w, "{wi},{},{}", n + 1, vals.join(",")).map_err(io_err(&qp))?;
            }
        }
        w.flush().map_err(io_err(&qp))?;
    }
    manifest.outputs.extend([fp.display().to_string(), tp.display().to_string(), qp.display().to_string()]);
    Ok(json!({
        "command": "forecast",
        "forecasts": fp.display().to_string(),
        "truth": tp.display().to_string(),
        "windows": r.windows.len(),
        "samples": cfg.forecast.samples,
    }))
}

fn truth_path(forecasts: &Path, truth: &Option<PathBuf>) -> PathBuf {
    truth.clone().unwrap_or_else(|| forecasts.with_file_name("truth.csv"))
}

/// Rows grouped by the leading window column, in order of first appearance.
fn read_grouped(path: &Path, width: usize) -> Result<Vec<(usize, Vec<Vec<f64>>)>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::Io { path: path.display().to_string(), source: std::io::Error::other(e.to_string()) },
        _ => Error::Csv(e),
    })?;
    let mut groups: Vec<(usize, Vec<Vec<f64>>)> = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != width {
            return Err(Error::InvalidParam(format!("{}: row {} has {} fields, expected {width}", path.display(), row + 1, rec.len())));
        }
        let vals = rec
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|_| Error::InvalidParam(format!("{}: row {} is not numeric", path.display(), row + 1)))?;
        let w = vals[0] as usize;
        match groups.last_mut() {
            Some((id, rows)) if *id == w => rows.push(vals[1..].to_vec()),
            _ => groups.push((w, vec![vals[1..].to_vec()])),
        }
    }
    Ok(groups)
}

/// Reassemble `S × N` trajectories from `(trajectory, step, x)` rows.
fn to_trajectories(rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let mut by_traj: BTreeMap<usize, BTreeMap<usize, f64>> = BTreeMap::new();
    for r in rows {
        by_traj.entry(r[0] as usize).or_default().insert(r[1] as usize, r[2]);
    }
    Ok(by_traj.into_values().map(|steps| steps.into_values().collect()).collect())
}

fn eval(
    cfg: &RunConfig,
    out: &Out,
    manifest: &mut Manifest,
    forecasts: &Option<PathBuf>,
    truth: &Option<PathBuf>,
) -> Result<Value> {
    let (ensembles, truths, windows): (Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>, Vec<usize>) = match forecasts {
        Some(fp) => {
            let tp = truth_path(fp, truth);
            manifest.inputs.push(InputRecord::from_file(fp)?);
            manifest.inputs.push(InputRecord::from_file(&tp)?);
            let f = read_grouped(fp, 4)?;
            let t = read_grouped(&tp, 3)?;
            let truth_map: BTreeMap<usize, Vec<f64>> = t
                .into_iter()
                .map(|(w, rows)| {
                    let mut r = rows;
                    r.sort_by(|a, b| a[0].total_cmp(&b[0]));
                    (w, r.into_iter().map(|v| v[1]).collect())
                })
                .collect();
            let mut ens = Vec::new();
            let mut ys = Vec::new();
            let mut ids = Vec::new();
            for (w, rows) in f {
                let y = truth_map
                    .get(&w)
                    .ok_or_else(|| Error::InvalidParam(format!("{}: no truth for window {w}", tp.display())))?;
                ens.push(to_trajectories(&rows)?);
                ys.push(y.clone());
                ids.push(w);
            }
            (ens, ys, ids)
        }
        None => {
            let r = run_forecasts(cfg, manifest)?;
            (r.ensembles.into_iter().map(|e| e.trajectories).collect(), r.truths, r.windows)
        }
    };
    let (report, per_window) = evaluate(&ensembles, &truths, cfg.metrics.var_floor)?;
    let crps_by_window: Vec<Value> = windows
        .iter()
        .zip(&per_window)
        .map(|(w, s)| json!({ "window": w, "CRPS": s.crps.iter().sum::<f64>() / s.crps.len() as f64 }))
        .collect();
    let mut body = serde_json::to_value(report)?;
    body["windows"] = json!(crps_by_window);
    let p = out.file("metrics.json");
    std::fs::write(&p, serde_json::to_string_pretty(&body)?).map_err(io_err(&p))?;
    manifest.outputs.push(p.display().to_string());
    let mut summary = serde_json::to_value(report)?;
    summary["command"] = json!("eval");
    summary["metrics"] = json!(p.display().to_string());
    Ok(summary)
}

fn verify(cfg: &RunConfig, out: &Out, manifest: &mut Manifest) -> Result<Value> {
    let grid = cfg.grid.build()?;
    let r = run_verify(&cfg.latent, &cfg.obs_params()?, &grid, cfg.window.dt, &cfg.verify)?;
    let p = out.file("verify.json");
    std::fs::write(&p, serde_json::to_string_pretty(&r)?).map_err(io_err(&p))?;
    let c = out.file("convergence.csv");
    r.convergence.report.write_csv(&c)?;
    manifest.outputs.extend([p.display().to_string(), c.display().to_string()]);
    Ok(json!({
        "command": "verify",
        "report": p.display().to_string(),
        "fitted_slope": r.convergence.report.fitted_slope,
        "convergence": r.convergence.pass,
        "truncation_bound": r.truncation_bound.audit.pass,
        "norm_stability": r.norm_stability.pass,
        "pf_agreement": r.pf_agreement.pass,
        "kalman": r.kalman.pass,
        "pass": r.pass,
    }))
}
