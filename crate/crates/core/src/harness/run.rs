//! Single pipeline runs and their artifacts.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::io::{fmt_f64, fmt_opt, latent_pgm, OutputBundle, Table};
use crate::ddim::{invert_trajectory, predict_z0, reconstruct, InversionMode};
use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::masactrl::proxmasactrl_edit;
use crate::models::{Condition, EpsilonPredictor};
use crate::nti::{cfg_sample, nti_edit, nti_optimize_from, NullSchedule};
use crate::prox::EditMask;
use crate::proxnpi::proxnpi_sample;
use crate::schedule::{NoiseSchedule, Timestep};
use crate::trajectory::{Direction, Trajectory};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Invert,
    Reconstruct,
    Edit,
    Nti,
    Masactrl,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Self::Invert => "invert",
            Self::Reconstruct => "reconstruct",
            Self::Edit => "edit",
            Self::Nti => "nti",
            Self::Masactrl => "masactrl",
        }
    }
}

/// Scalar results of a run, echoed into the manifest.
pub type Summary = BTreeMap<String, f64>;

#[derive(Debug)]
pub struct RunOutput {
    pub command: Command,
    pub summary: Summary,
    pub bundle: OutputBundle,
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub t: usize,
    /// MSE of the step's predicted clean sample against z0.
    pub recon_mse: Option<f64>,
    /// Distance to the reference trajectory at the same timestep.
    pub divergence: Option<f64>,
    pub clamp_fraction: Option<f64>,
    pub lambda: Option<f64>,
    pub mask_coverage: Option<f64>,
}

impl MetricsRow {
    pub const HEADER: [&'static str; 7] = [
        "step",
        "t",
        "recon_mse",
        "divergence",
        "clamp_fraction",
        "lambda",
        "mask_coverage",
    ];

    fn cells(&self) -> Vec<String> {
        vec![
            self.step.to_string(),
            self.t.to_string(),
            fmt_opt(self.recon_mse),
            fmt_opt(self.divergence),
            fmt_opt(self.clamp_fraction),
            fmt_opt(self.lambda),
            fmt_opt(self.mask_coverage),
        ]
    }
}

fn alpha_lookup(schedule: &NoiseSchedule) -> HashMap<usize, f64> {
    schedule.timesteps().iter().copied().zip(schedule.alpha_bars().iter().copied()).collect()
}

/// The clean-sample prediction attached to every entry, where one exists.
fn clean_predictions(traj: &Trajectory, schedule: &NoiseSchedule) -> Result<Vec<Option<Latent>>> {
    let alpha = alpha_lookup(schedule);
    let ts = |t: usize| -> Result<Timestep> {
        alpha
            .get(&t)
            .map(|a| Timestep::new(t, *a))
            .ok_or_else(|| Error::invalid(format!("timestep {t} is not in the schedule")))
    };
    let steps = traj.steps();
    let mut out = Vec::with_capacity(steps.len());
    for (k, s) in steps.iter().enumerate() {
        let pred = if let Some(z) = &s.diag.z0_pred {
            Some(z.clone())
        } else if ts(s.t)?.alpha_bar == 1.0 {
            Some(s.latent.clone())
        } else if let (Some(eps), true) = (&s.diag.eps, k > 0) {
            Some(match traj.direction() {
                Direction::Synthesis => predict_z0(&steps[k - 1].latent, eps, ts(steps[k - 1].t)?)?,
                Direction::Inversion => predict_z0(&s.latent, eps, ts(s.t)?)?,
            })
        } else {
            None
        };
        out.push(pred);
    }
    Ok(out)
}

pub fn metrics_rows(
    traj: &Trajectory,
    z0: &Latent,
    reference: Option<&Trajectory>,
    schedule: &NoiseSchedule,
) -> Result<Vec<MetricsRow>> {
    let preds = clean_predictions(traj, schedule)?;
    let div = reference.map(|r| traj.divergence(r)).transpose()?;
    traj.steps()
        .iter()
        .enumerate()
        .map(|(k, s)| {
            Ok(MetricsRow {
                step: k,
                t: s.t,
                recon_mse: preds[k].as_ref().map(|p| p.mse(z0)).transpose()?,
                divergence: div.as_ref().map(|d| d[k]),
                clamp_fraction: s.diag.clamp_fraction,
                lambda: s.diag.effective_lambda,
                mask_coverage: s.diag.mask.as_ref().map(EditMask::coverage),
            })
        })
        .collect()
}

pub fn metrics_table(rows: &[MetricsRow]) -> Table {
    let mut t = Table::new(&MetricsRow::HEADER);
    for r in rows {
        t.push(r.cells());
    }
    t
}

/// One row per entry with latent statistics and the step diagnostics.
pub fn trajectory_table(traj: &Trajectory) -> Table {
    let mut t = Table::new(&[
        "step",
        "t",
        "l2_norm",
        "mean",
        "std",
        "min",
        "max",
        "eps_norm",
        "guidance_norm",
        "prox_norm",
        "lambda",
        "clamp_fraction",
        "recon_applied",
        "fixed_point_iters",
    ]);
    for (k, s) in traj.steps().iter().enumerate() {
        let l = &s.latent;
        let d = &s.diag;
        t.push(vec![
            k.to_string(),
            s.t.to_string(),
            fmt_f64(l.norm_l2()),
            fmt_f64(l.mean()),
            fmt_f64(l.std()),
            fmt_f64(l.min()),
            fmt_f64(l.max()),
            fmt_opt(d.eps.as_ref().map(Latent::norm_l2)),
            fmt_opt(d.guidance_norm),
            fmt_opt(d.prox_norm),
            fmt_opt(d.effective_lambda),
            fmt_opt(d.clamp_fraction),
            u8::from(d.recon_applied).to_string(),
            d.fixed_point_iters.map(|i| i.to_string()).unwrap_or_default(),
        ]);
    }
    t
}

pub fn null_schedule_table(nulls: &NullSchedule) -> Table {
    let n_coords = nulls.conditions.first().map_or(0, Condition::num_coords);
    let mut header = vec!["step".to_string(), "t".to_string()];
    header.extend((0..n_coords).map(|i| format!("c{i}")));
    header.extend(["initial_loss", "final_loss", "accepted_updates"].map(String::from));
    let mut t = Table { header, rows: Vec::new() };
    for k in 0..nulls.len() {
        let mut row = vec![k.to_string(), nulls.timesteps[k].to_string()];
        row.extend(nulls.conditions[k].coords().into_iter().map(fmt_f64));
        row.push(fmt_f64(nulls.initial_losses[k]));
        row.push(fmt_f64(nulls.final_losses[k]));
        row.push((nulls.loss_histories[k].len() - 1).to_string());
        t.push(row);
    }
    t
}

/// Mean squared error over the components the mask keeps unedited; 0 when
/// the mask is empty.
pub fn masked_mse(a: &Latent, b: &Latent, mask: &EditMask) -> Result<f64> {
    a.check_same_shape(b)?;
    mask.check_matches(a)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for ((x, y), m) in a.as_slice().iter().zip(b.as_slice()).zip(mask.as_slice()) {
        if *m {
            sum += (x - y) * (x - y);
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

pub(crate) fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Shared prefix of every pipeline: inversion of z0 under the source and
/// the plain DDIM reconstruction from its terminal latent.
pub(crate) struct Prepared {
    pub schedule: NoiseSchedule,
    pub z0: Latent,
    pub inversion: Trajectory,
    pub recon: Trajectory,
}

pub(crate) fn prepare(cfg: &RunConfig, predictor: &dyn EpsilonPredictor) -> Result<Prepared> {
    let schedule = cfg.schedule.build()?;
    let z0 = cfg.source_latent()?;
    let inversion = invert_trajectory(&z0, &cfg.source, predictor, &schedule, cfg.inversion)?;
    let cached = match cfg.inversion {
        InversionMode::Exact => inversion.cached_eps(),
        InversionMode::Naive => None,
    };
    let recon = reconstruct(
        &inversion.terminal().latent,
        &cfg.source,
        predictor,
        &schedule,
        cached.as_deref(),
    )?;
    Ok(Prepared {
        schedule,
        z0,
        inversion,
        recon,
    })
}

fn add_table(bundle: &mut OutputBundle, name: &str, table: &Table) -> Result<()> {
    bundle.add(name, table.to_csv()?);
    Ok(())
}

fn add_standard(
    bundle: &mut OutputBundle,
    traj: &Trajectory,
    z0: &Latent,
    reference: Option<&Trajectory>,
    schedule: &NoiseSchedule,
) -> Result<()> {
    add_table(bundle, "metrics.csv", &metrics_table(&metrics_rows(traj, z0, reference, schedule)?))?;
    add_table(bundle, "trajectory.csv", &trajectory_table(traj))?;
    bundle.add("terminal.pgm", latent_pgm(&traj.terminal().latent)?);
    Ok(())
}

fn latent_stats(summary: &mut Summary, prefix: &str, l: &Latent) {
    summary.insert(format!("{prefix}_mean"), l.mean());
    summary.insert(format!("{prefix}_std"), l.std());
    summary.insert(format!("{prefix}_min"), l.min());
    summary.insert(format!("{prefix}_max"), l.max());
}

/// Runs a pipeline in memory. Nothing is written.
pub fn execute(command: Command, cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let predictor = cfg.build_predictor()?;
    let pred = predictor.as_dyn();
    let mut summary = Summary::new();
    let mut bundle = OutputBundle::new();

    match command {
        Command::Invert => {
            let schedule = cfg.schedule.build()?;
            let z0 = cfg.source_latent()?;
            let inv = invert_trajectory(&z0, &cfg.source, pred, &schedule, cfg.inversion)?;
            add_standard(&mut bundle, &inv, &z0, None, &schedule)?;
            latent_stats(&mut summary, "terminal", &inv.terminal().latent);
            if let Some(m) = inv.steps().iter().filter_map(|s| s.diag.fixed_point_iters).max() {
                summary.insert("max_fixed_point_iters".into(), m as f64);
            }
        }
        Command::Reconstruct => {
            let p = prepare(cfg, pred)?;
            add_standard(&mut bundle, &p.recon, &p.z0, Some(&p.inversion), &p.schedule)?;
            add_table(&mut bundle, "inversion.csv", &trajectory_table(&p.inversion))?;
            summary.insert("terminal_mse".into(), p.recon.terminal().latent.mse(&p.z0)?);
            summary.insert("max_gap_to_inversion".into(), p.recon.max_gap(&p.inversion)?);
        }
        Command::Edit => {
            let p = prepare(cfg, pred)?;
            let guidance = cfg.guidance.build()?;
            let edit = proxnpi_sample(
                &p.inversion.terminal().latent,
                &p.z0,
                &cfg.source,
                &cfg.target,
                &guidance,
                pred,
                &p.schedule,
            )?;
            add_standard(&mut bundle, &edit, &p.z0, Some(&p.inversion), &p.schedule)?;
            bundle.add("recon.pgm", latent_pgm(&p.recon.terminal().latent)?);
            let term = edit.terminal();
            summary.insert("edit_deviation".into(), term.latent.dist_l2(&p.recon.terminal().latent)?);
            summary.insert("terminal_mse_vs_z0".into(), term.latent.mse(&p.z0)?);
            if let Some(c) = mean(edit.steps().iter().filter_map(|s| s.diag.clamp_fraction)) {
                summary.insert("mean_clamp_fraction".into(), c);
            }
            if let Some(mask) = &term.diag.mask {
                summary.insert("masked_terminal_mse".into(), masked_mse(&term.latent, &p.z0, mask)?);
            }
        }
        Command::Nti => {
            let schedule = cfg.schedule.build()?;
            let z0 = cfg.source_latent()?;
            let inversion = invert_trajectory(&z0, &cfg.source, pred, &schedule, cfg.inversion)?;
            let ncfg = cfg.nti_config();
            let res = nti_optimize_from(inversion, &cfg.source, &ncfg, pred, &schedule)?;
            let z_t = &res.inversion.terminal().latent;
            let plain = cfg_sample(z_t, &Condition::null_like(&cfg.source), &cfg.source, ncfg.w, pred, &schedule)?;
            let edit = nti_edit(z_t, &cfg.target, &res.nulls, ncfg.w, pred, &schedule)?;
            add_standard(&mut bundle, &edit, &z0, Some(&res.inversion), &schedule)?;
            add_table(&mut bundle, "null_schedule.csv", &null_schedule_table(&res.nulls))?;
            add_table(&mut bundle, "tracked.csv", &trajectory_table(&res.tracked))?;
            bundle.add("tracked.pgm", latent_pgm(&res.tracked.terminal().latent)?);
            let tracked = res.tracked.terminal().latent.mse(&z0)?;
            let unoptimized = plain.terminal().latent.mse(&z0)?;
            summary.insert("tracked_terminal_mse".into(), tracked);
            summary.insert("unoptimized_terminal_mse".into(), unoptimized);
            summary.insert("improvement_ratio".into(), unoptimized / tracked);
            summary.insert("flagged_steps".into(), res.flagged.len() as f64);
        }
        Command::Masactrl => {
            let denoiser = cfg.build_denoiser()?;
            let schedule = cfg.schedule.build()?;
            let z0 = cfg.source_latent()?;
            let run = proxmasactrl_edit(
                &z0,
                &cfg.source,
                &cfg.target,
                cfg.guidance.w,
                &cfg.branch,
                &cfg.guidance.threshold()?,
                &denoiser,
                &schedule,
                cfg.inversion,
            )?;
            add_standard(&mut bundle, &run.synth, &z0, Some(&run.recon), &schedule)?;
            add_table(&mut bundle, "trajectory_recon.csv", &trajectory_table(&run.recon))?;
            add_table(&mut bundle, "trajectory_synth.csv", &trajectory_table(&run.synth))?;
            bundle.add("recon.pgm", latent_pgm(&run.recon.terminal().latent)?);
            bundle.add("synth.pgm", latent_pgm(&run.synth.terminal().latent)?);
            let div = run.synth.divergence(&run.recon)?;
            summary.insert("terminal_divergence".into(), *div.last().expect("nonempty"));
            summary.insert("recon_terminal_mse".into(), run.recon.terminal().latent.mse(&z0)?);
            latent_stats(&mut summary, "synth", &run.synth.terminal().latent);
        }
    }
    Ok(RunOutput {
        command,
        summary,
        bundle,
    })
}

pub fn manifest_json(command: &str, cfg: &RunConfig, summary: &Summary, files: &[String], wall: f64) -> Vec<u8> {
    let value = serde_json::json!({
        "command": command,
        "version": VERSION,
        "config": cfg,
        "summary": summary,
        "files": files,
        "wall_time_s": wall,
    });
    let mut bytes = serde_json::to_vec_pretty(&value).expect("manifest serializes");
    bytes.push(b'\n');
    bytes
}

/// Runs a pipeline and commits its artifacts plus `manifest.json` to `out`.
pub fn run(command: Command, cfg: &RunConfig, out: &Path) -> Result<RunOutput> {
    let start = Instant::now();
    let mut output = execute(command, cfg)?;
    let mut files = output.bundle.names();
    files.push("manifest.json".into());
    let manifest = manifest_json(command.name(), cfg, &output.summary, &files, start.elapsed().as_secs_f64());
    output.bundle.add("manifest.json", manifest);
    output.bundle.commit(out)?;
    Ok(output)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.schedule.steps = 10;
        cfg
    }

    #[test]
    fn exact_reconstruct_reports_tiny_mse() {
        let cfg = RunConfig {
            inversion: InversionMode::Exact,
            ..Default::default()
        };
        let out = execute(Command::Reconstruct, &cfg).unwrap();
        assert!(out.summary["terminal_mse"] <= 1e-10, "{:?}", out.summary);
    }

    #[test]
    fn every_command_writes_the_core_files() {
        let dir = tempfile::tempdir().unwrap();
        for cmd in [Command::Invert, Command::Reconstruct, Command::Edit, Command::Nti, Command::Masactrl] {
            let mut cfg = small();
            cfg.nti.inner_iters = 2;
            let out = dir.path().join(cmd.name());
            run(cmd, &cfg, &out).unwrap();
            for f in ["metrics.csv", "trajectory.csv", "terminal.pgm", "manifest.json"] {
                assert!(out.join(f).exists(), "{} missing {f}", cmd.name());
            }
            let metrics = Table::from_csv(&std::fs::read(out.join("metrics.csv")).unwrap()).unwrap();
            assert_eq!(metrics.rows.len(), cfg.schedule.steps + 1);
            for row in &metrics.rows {
                for cell in &row[2..] {
                    if !cell.is_empty() {
                        assert!(cell.parse::<f64>().unwrap() >= 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn manifest_config_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig { seed: 9, ..small() };
        run(Command::Edit, &cfg, dir.path()).unwrap();
        let back = RunConfig::load(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn masked_mse_ignores_edited_components() {
        let a = Latent::from_vec(vec![1.0, 5.0]);
        let b = Latent::from_vec(vec![0.0, 0.0]);
        let m = EditMask::new(vec![2], vec![true, false]).unwrap();
        assert_eq!(masked_mse(&a, &b, &m).unwrap(), 1.0);
        let none = EditMask::all(&[2], false);
        assert_eq!(masked_mse(&a, &b, &none).unwrap(), 0.0);
    }
}
