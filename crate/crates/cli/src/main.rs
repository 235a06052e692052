//! Command-line front end: single runs, ablation sweeps and the proximal
//! operator table.
//!
//! Exit status is 0 on success, 1 for configuration or I/O errors and 2 for
//! numerical failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use proxguide::ddim::InversionMode;
use proxguide::harness::config::PredictorKind;
use proxguide::harness::io::OutputBundle;
use proxguide::harness::prox_table::prox_table;
use proxguide::harness::run::{manifest_json, run, Command as RunCommand, Summary};
use proxguide::harness::sweep::{
    ablate_masactrl, ablate_recon, ablate_threshold, SweepOutput, MASACTRL_ALPHAS, MASACTRL_MODES,
    MASACTRL_QUANTILES, RECON_ETAS, RECON_T_RECS, THRESHOLD_PENALTIES, THRESHOLD_QUANTILES, THRESHOLD_SCALES,
};
use proxguide::harness::RunConfig;
use proxguide::masactrl::CaptureCondition;
use proxguide::models::InjectionMode;
use proxguide::prox::Penalty;
use proxguide::Error;

#[derive(Parser, Debug)]
#[command(name = "proxguide", version, about = "Proximal guidance for tuning-free latent editing")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// DDIM-invert the source latent.
    Invert(Common),
    /// Invert, then reconstruct under the source condition.
    Reconstruct(Common),
    /// Proximal negative-prompt edit from source to target.
    Edit(Common),
    /// Null-condition optimization baseline, then edit with the optimized nulls.
    Nti(Common),
    /// Dual-branch edit with attention feature injection.
    Masactrl(Common),
    /// Sweep threshold quantile x penalty x guidance scale.
    AblateThreshold {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        quantiles: Option<Vec<f64>>,
        /// Comma-separated penalties from {l0, l1, none}.
        #[arg(long, value_delimiter = ',')]
        penalties: Option<Vec<Penalty>>,
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<f64>>,
    },
    /// Sweep reconstruction-guidance step size x cutoff timestep.
    AblateRecon {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        etas: Option<Vec<f64>>,
        #[arg(long = "t-recs", value_delimiter = ',')]
        t_recs: Option<Vec<usize>>,
    },
    /// Sweep null interpolation x unconditional injection mode x quantile.
    AblateMasactrl {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        /// Comma-separated modes from {source, joint, none}.
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<InjectionMode>>,
        #[arg(long, value_delimiter = ',')]
        quantiles: Option<Vec<f64>>,
    },
    /// Print closed-form soft/hard thresholds next to a brute-force grid search.
    ProxTable {
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.1,1.0")]
        lambdas: Vec<f64>,
        /// Number of evenly spaced inputs in [-range, range].
        #[arg(long, default_value_t = 41)]
        points: usize,
        #[arg(long, default_value_t = 2.0)]
        range: f64,
        #[arg(long, default_value_t = 1e-4)]
        grid_step: f64,
    },
}

#[derive(Args, Debug, Default)]
struct Common {
    /// TOML config, or a run manifest.json to re-run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = "PROX_OUT_DIR", default_value = "prox-out")]
    out: PathBuf,
    /// Seed for the source latent. Required for sweeps.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of sampling steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Inversion mode: naive or exact.
    #[arg(long)]
    inversion: Option<InversionMode>,
    /// Predictor: oracle or attention.
    #[arg(long)]
    predictor: Option<PredictorKind>,
    /// Guidance scale.
    #[arg(long)]
    w: Option<f64>,
    /// Proximal penalty: l0, l1 or none.
    #[arg(long)]
    prox: Option<Penalty>,
    /// Dynamic threshold quantile.
    #[arg(long, conflicts_with = "lambda")]
    quantile: Option<f64>,
    /// Fixed threshold.
    #[arg(long)]
    lambda: Option<f64>,
    /// Enable reconstruction guidance.
    #[arg(long)]
    recon: bool,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long = "t-rec")]
    t_rec: Option<usize>,
    #[arg(long = "inner-iters")]
    inner_iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Null-condition interpolation weight toward the null condition.
    #[arg(long)]
    alpha: Option<f64>,
    /// Injection for the unconditional term: source, joint or none.
    #[arg(long = "inject-uncond")]
    inject_uncond: Option<InjectionMode>,
    /// Injection for the conditional term: source, joint or none.
    #[arg(long = "inject-cond")]
    inject_cond: Option<InjectionMode>,
    /// First sampling step with injection active.
    #[arg(long = "inject-start")]
    inject_start: Option<usize>,
    /// Which reconstruction pass the unconditional term reads: src or null.
    #[arg(long = "capture-condition")]
    capture_condition: Option<CaptureCondition>,
}

impl Common {
    fn config(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($field:expr, $value:expr) => {
                if let Some(v) = $value {
                    $field = v;
                }
            };
        }
        set!(cfg.seed, self.seed);
        set!(cfg.schedule.steps, self.steps);
        set!(cfg.inversion, self.inversion);
        set!(cfg.predictor, self.predictor);
        set!(cfg.guidance.w, self.w);
        set!(cfg.guidance.prox, self.prox);
        if let Some(q) = self.quantile {
            cfg.guidance.quantile = Some(q);
            cfg.guidance.lambda = None;
        }
        if let Some(l) = self.lambda {
            cfg.guidance.lambda = Some(l);
            cfg.guidance.quantile = None;
        }
        cfg.guidance.recon |= self.recon;
        set!(cfg.guidance.eta, self.eta);
        set!(cfg.guidance.t_rec, self.t_rec);
        set!(cfg.nti.inner_iters, self.inner_iters);
        set!(cfg.nti.lr, self.lr);
        set!(cfg.branch.alpha, self.alpha);
        set!(cfg.branch.injection_uncond, self.inject_uncond);
        set!(cfg.branch.injection_cond, self.inject_cond);
        set!(cfg.branch.inject_start_step, self.inject_start);
        set!(cfg.branch.capture, self.capture_condition);
        cfg.validate()?;
        Ok(cfg)
    }

    fn sweep_config(&self) -> Result<RunConfig, Error> {
        if self.seed.is_none() {
            return Err(Error::Config("sweeps require --seed".into()));
        }
        self.config()
    }
}

fn single_run(command: RunCommand, common: &Common) -> Result<(), Error> {
    let cfg = common.config()?;
    let out = run(command, &cfg, &common.out)?;
    print_summary(&common.out, &out.summary);
    Ok(())
}

fn print_summary(dir: &Path, summary: &Summary) {
    println!("wrote {}", dir.display());
    for (k, v) in summary {
        println!("{k} = {v:e}");
    }
}

fn write_sweep(name: &str, common: &Common, cfg: &RunConfig, grid: serde_json::Value, start: Instant, out: SweepOutput) -> Result<(), Error> {
    let mut bundle = OutputBundle::new();
    bundle.add(format!("{name}.csv"), out.cells.to_csv()?);
    bundle.add(format!("{name}_steps.csv"), out.steps.to_csv()?);
    let failed = out.cells.column("status").map_or(0, |s| s.iter().filter(|s| **s != "ok").count());
    let mut summary = Summary::new();
    summary.insert("cells".into(), out.cells.rows.len() as f64);
    summary.insert("failed_cells".into(), failed as f64);
    let mut files = bundle.names();
    files.push("manifest.json".into());
    let mut manifest: serde_json::Value =
        serde_json::from_slice(&manifest_json(name, cfg, &summary, &files, start.elapsed().as_secs_f64()))
            .expect("manifest is valid JSON");
    manifest["grid"] = grid;
    let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    bytes.push(b'\n');
    bundle.add("manifest.json", bytes);
    bundle.commit(&common.out)?;
    print_summary(&common.out, &summary);
    Ok(())
}

fn dispatch(cmd: Cmd) -> Result<(), Error> {
    let start = Instant::now();
    match cmd {
        Cmd::Invert(c) => single_run(RunCommand::Invert, &c),
        Cmd::Reconstruct(c) => single_run(RunCommand::Reconstruct, &c),
        Cmd::Edit(c) => single_run(RunCommand::Edit, &c),
        Cmd::Nti(c) => single_run(RunCommand::Nti, &c),
        Cmd::Masactrl(c) => single_run(RunCommand::Masactrl, &c),
        Cmd::AblateThreshold {
            common,
            quantiles,
            penalties,
            scales,
        } => {
            let cfg = common.sweep_config()?;
            let q = quantiles.unwrap_or(THRESHOLD_QUANTILES.to_vec());
            let p = penalties.unwrap_or(THRESHOLD_PENALTIES.to_vec());
            let w = scales.unwrap_or(THRESHOLD_SCALES.to_vec());
            let out = ablate_threshold(&cfg, &q, &p, &w)?;
            let grid = serde_json::json!({ "quantiles": q, "penalties": p, "scales": w });
            write_sweep("ablate_threshold", &common, &cfg, grid, start, out)
        }
        Cmd::AblateRecon { common, etas, t_recs } => {
            let cfg = common.sweep_config()?;
            let e = etas.unwrap_or(RECON_ETAS.to_vec());
            let t = t_recs.unwrap_or(RECON_T_RECS.to_vec());
            let out = ablate_recon(&cfg, &e, &t)?;
            let grid = serde_json::json!({ "etas": e, "t_recs": t });
            write_sweep("ablate_recon", &common, &cfg, grid, start, out)
        }
        Cmd::AblateMasactrl {
            common,
            alphas,
            modes,
            quantiles,
        } => {
            let cfg = common.sweep_config()?;
            let a = alphas.unwrap_or(MASACTRL_ALPHAS.to_vec());
            let m = modes.unwrap_or(MASACTRL_MODES.to_vec());
            let q = quantiles.unwrap_or(MASACTRL_QUANTILES.to_vec());
            let out = ablate_masactrl(&cfg, &a, &m, &q)?;
            let grid = serde_json::json!({ "alphas": a, "modes": m, "quantiles": q });
            write_sweep("ablate_masactrl", &common, &cfg, grid, start, out)
        }
        Cmd::ProxTable {
            lambdas,
            points,
            range,
            grid_step,
        } => {
            if points < 2 || !(range > 0.0) || !(grid_step > 0.0) || lambdas.iter().any(|l| !(*l >= 0.0)) {
                return Err(Error::Config("prox-table needs points >= 2, positive range and grid step, lambdas >= 0".into()));
            }
            let xs: Vec<f64> = (0..points).map(|i| -range + 2.0 * range * i as f64 / (points - 1) as f64).collect();
            let (table, worst) = prox_table(&lambdas, &xs, grid_step);
            print!("{}", String::from_utf8(table.to_csv()?).expect("CSV is UTF-8"));
            eprintln!("max deviation {worst:e} (grid step {grid_step:e})");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("{first}");
            return ExitCode::from(1);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
