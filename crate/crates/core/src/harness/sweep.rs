//! Ablation sweeps. Every grid cell is an independent edit run; cells run in
//! parallel and a failing cell is recorded with an error marker instead of
//! aborting the sweep.

use rayon::prelude::*;

use super::config::RunConfig;
use super::io::{fmt_f64, Table};
use super::run::{masked_mse, mean, prepare, Prepared};
use crate::error::Result;
use crate::masactrl::proxmasactrl_edit;
use crate::models::{EpsilonPredictor, InjectionMode};
use crate::prox::{prox_apply, Penalty, ThresholdSpec};
use crate::proxnpi::{proxnpi_sample, reconstruction_guidance, GuidanceConfig};

pub const THRESHOLD_QUANTILES: [f64; 6] = [0.60, 0.70, 0.80, 0.85, 0.90, 0.95];
pub const THRESHOLD_PENALTIES: [Penalty; 2] = [Penalty::L0, Penalty::L1];
pub const THRESHOLD_SCALES: [f64; 2] = [7.5, 15.0];
pub const RECON_ETAS: [f64; 5] = [0.01, 0.05, 0.1, 0.5, 1.0];
pub const RECON_T_RECS: [usize; 2] = [400, 600];
pub const MASACTRL_ALPHAS: [f64; 3] = [0.0, 0.5, 1.0];
pub const MASACTRL_MODES: [InjectionMode; 3] = [InjectionMode::Source, InjectionMode::Joint, InjectionMode::None];
pub const MASACTRL_QUANTILES: [f64; 2] = [0.7, 1.0];

/// Summary table with one row per cell plus a long-format per-step table.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutput {
    pub cells: Table,
    pub steps: Table,
}

fn status(r: &Result<impl Sized>) -> String {
    match r {
        Ok(_) => "ok".into(),
        Err(e) => format!("error: {e}"),
    }
}

fn blank_or(r: &Result<Vec<String>>, width: usize) -> Vec<String> {
    match r {
        Ok(v) => v.clone(),
        Err(_) => vec![String::new(); width],
    }
}

/// Noise difference `eps_tar - eps_src` evaluated along the shared
/// reconstruction trajectory, one per sampling step. Thresholds applied to
/// these probes compare operators on identical inputs.
fn probe_differences(
    cfg: &RunConfig,
    predictor: &dyn EpsilonPredictor,
    p: &Prepared,
) -> Result<Vec<crate::latent::Latent>> {
    let n = p.schedule.num_steps();
    let steps = p.recon.steps();
    (0..n)
        .map(|k| {
            let ts = p.schedule.at(n - k);
            let z = &steps[k].latent;
            let src = predictor.predict(z, ts, &cfg.source)?;
            let tar = predictor.predict(z, ts, &cfg.target)?;
            tar.sub(&src)
        })
        .collect()
}

/// Threshold sweep over `quantiles x penalties x scales`, reconstruction
/// guidance off.
pub fn ablate_threshold(
    base: &RunConfig,
    quantiles: &[f64],
    penalties: &[Penalty],
    scales: &[f64],
) -> Result<SweepOutput> {
    base.validate()?;
    let predictor = base.build_predictor()?;
    let pred = predictor.as_dyn();
    let p = prepare(base, pred)?;
    let probes = probe_differences(base, pred, &p)?;
    let z_t = &p.inversion.terminal().latent;
    let recon_term = &p.recon.terminal().latent;

    let grid: Vec<(f64, Penalty, f64)> = scales
        .iter()
        .flat_map(|&w| penalties.iter().flat_map(move |&pen| quantiles.iter().map(move |&q| (w, pen, q))))
        .collect();

    let results: Vec<(Result<Vec<String>>, Vec<Vec<String>>)> = grid
        .par_iter()
        .map(|&(w, pen, q)| {
            let spec = ThresholdSpec::quantile(q, pen);
            let cfg = GuidanceConfig {
                w,
                threshold: spec,
                recon_enabled: false,
                ..Default::default()
            };
            let edit = proxnpi_sample(z_t, &p.z0, &base.source, &base.target, &cfg, pred, &p.schedule);
            let mut steps = Vec::new();
            let cells = edit.and_then(|edit| {
                for (k, probe) in probes.iter().enumerate() {
                    let s = &edit.steps()[k + 1];
                    let pp = prox_apply(probe, &spec)?;
                    steps.push(vec![
                        fmt_f64(w),
                        pen.to_string(),
                        fmt_f64(q),
                        (k + 1).to_string(),
                        s.t.to_string(),
                        fmt_f64(s.diag.effective_lambda.unwrap_or_default()),
                        fmt_f64(s.diag.clamp_fraction.unwrap_or_default()),
                        fmt_f64(s.diag.prox_norm.unwrap_or_default()),
                        fmt_f64(s.diag.guidance_norm.unwrap_or_default()),
                        fmt_f64(pp.lambda),
                        fmt_f64(pp.value.norm_l2()),
                    ]);
                }
                let term = &edit.terminal().latent;
                let clamp = mean(edit.steps().iter().filter_map(|s| s.diag.clamp_fraction)).unwrap_or(0.0);
                let prox = mean(edit.steps().iter().filter_map(|s| s.diag.prox_norm)).unwrap_or(0.0);
                Ok(vec![
                    fmt_f64(term.dist_l2(recon_term)?),
                    fmt_f64(clamp),
                    fmt_f64(prox),
                    fmt_f64(term.mse(&p.z0)?),
                ])
            });
            (cells, steps)
        })
        .collect();

    let mut cells = Table::new(&[
        "w",
        "penalty",
        "quantile",
        "status",
        "edit_deviation",
        "mean_clamp_fraction",
        "mean_prox_norm",
        "terminal_mse_vs_z0",
    ]);
    let mut steps = Table::new(&[
        "w",
        "penalty",
        "quantile",
        "step",
        "t",
        "lambda",
        "clamp_fraction",
        "prox_norm",
        "guidance_norm",
        "probe_lambda",
        "probe_prox_norm",
    ]);
    for (&(w, pen, q), (res, rows)) in grid.iter().zip(results) {
        let mut row = vec![fmt_f64(w), pen.to_string(), fmt_f64(q), status(&res)];
        row.extend(blank_or(&res, 4));
        cells.push(row);
        for r in rows {
            steps.push(r);
        }
    }
    Ok(SweepOutput { cells, steps })
}

/// Reconstruction-guidance sweep over `t_recs x etas` at the 0.7 quantile
/// with hard thresholding.
pub fn ablate_recon(base: &RunConfig, etas: &[f64], t_recs: &[usize]) -> Result<SweepOutput> {
    base.validate()?;
    let predictor = base.build_predictor()?;
    let pred = predictor.as_dyn();
    let p = prepare(base, pred)?;
    let z_t = &p.inversion.terminal().latent;
    let recon_term = &p.recon.terminal().latent;
    let spec = ThresholdSpec::quantile(0.7, Penalty::L0);
    let w = base.guidance.w;
    // Unguided edit shared by every cell: guidance applied to its clean
    // predictions isolates the effect of eta on identical inputs.
    let probe = proxnpi_sample(
        z_t,
        &p.z0,
        &base.source,
        &base.target,
        &GuidanceConfig {
            w,
            threshold: spec,
            recon_enabled: false,
            ..Default::default()
        },
        pred,
        &p.schedule,
    )?;

    let grid: Vec<(usize, f64)> = t_recs.iter().flat_map(|&tr| etas.iter().map(move |&e| (tr, e))).collect();
    let results: Vec<(Result<Vec<String>>, Vec<Vec<String>>)> = grid
        .par_iter()
        .map(|&(t_rec, eta)| {
            let cfg = GuidanceConfig {
                w,
                threshold: spec,
                recon_enabled: true,
                eta,
                t_rec,
            };
            let mut steps = Vec::new();
            let cells = proxnpi_sample(z_t, &p.z0, &base.source, &base.target, &cfg, pred, &p.schedule).and_then(
                |edit| {
                    let mut guided = Vec::new();
                    for (k, s) in edit.steps().iter().enumerate().skip(1) {
                        let mask = s.diag.mask.as_ref().expect("guided steps carry a mask");
                        let z0_pred = s.diag.z0_pred.as_ref().expect("guided steps carry a prediction");
                        let mm = masked_mse(z0_pred, &p.z0, mask)?;
                        let ps = &probe.steps()[k];
                        let pmask = ps.diag.mask.as_ref().expect("mask");
                        let cur = p.schedule.at(p.schedule.num_steps() - k + 1);
                        let p_hat = ps.diag.z0_pred.clone().expect("prediction");
                        let p_guided = if cur.t < t_rec {
                            reconstruction_guidance(&p_hat, &p.z0, pmask, eta)?
                        } else {
                            p_hat
                        };
                        if s.diag.recon_applied {
                            guided.push(mm);
                        }
                        steps.push(vec![
                            t_rec.to_string(),
                            fmt_f64(eta),
                            k.to_string(),
                            cur.t.to_string(),
                            u8::from(s.diag.recon_applied).to_string(),
                            fmt_f64(mask.coverage()),
                            fmt_f64(mm),
                            fmt_f64(masked_mse(&p_guided, &p.z0, pmask)?),
                        ]);
                    }
                    let term = edit.terminal();
                    let mask = term.diag.mask.as_ref().expect("mask");
                    Ok(vec![
                        fmt_f64(masked_mse(&term.latent, &p.z0, mask)?),
                        fmt_f64(term.latent.dist_l2(recon_term)?),
                        fmt_f64(mean(guided.iter().copied()).unwrap_or(0.0)),
                        guided.len().to_string(),
                    ])
                },
            );
            (cells, steps)
        })
        .collect();

    let mut cells = Table::new(&[
        "t_rec",
        "eta",
        "status",
        "masked_terminal_mse",
        "edit_deviation",
        "mean_guided_masked_mse",
        "guided_steps",
    ]);
    let mut steps = Table::new(&[
        "t_rec",
        "eta",
        "step",
        "t",
        "recon_applied",
        "mask_coverage",
        "masked_mse",
        "probe_masked_mse",
    ]);
    for (&(t_rec, eta), (res, rows)) in grid.iter().zip(results) {
        let mut row = vec![t_rec.to_string(), fmt_f64(eta), status(&res)];
        row.extend(blank_or(&res, 4));
        cells.push(row);
        for r in rows {
            steps.push(r);
        }
    }
    Ok(SweepOutput { cells, steps })
}

/// Dual-branch sweep over `quantiles x alphas x modes`, where the mode sets
/// the unconditional term's injection.
pub fn ablate_masactrl(
    base: &RunConfig,
    alphas: &[f64],
    modes: &[InjectionMode],
    quantiles: &[f64],
) -> Result<SweepOutput> {
    base.validate()?;
    let denoiser = base.build_denoiser()?;
    let schedule = base.schedule.build()?;
    let z0 = base.source_latent()?;

    let grid: Vec<(f64, f64, InjectionMode)> = quantiles
        .iter()
        .flat_map(|&q| alphas.iter().flat_map(move |&a| modes.iter().map(move |&m| (q, a, m))))
        .collect();
    let results: Vec<(Result<Vec<String>>, Vec<Vec<String>>)> = grid
        .par_iter()
        .map(|&(q, alpha, mode)| {
            let mut branch = base.branch;
            branch.alpha = alpha;
            branch.injection_uncond = mode;
            let spec = ThresholdSpec::quantile(q, base.guidance.prox);
            let mut steps = Vec::new();
            let cells = proxmasactrl_edit(
                &z0,
                &base.source,
                &base.target,
                base.guidance.w,
                &branch,
                &spec,
                &denoiser,
                &schedule,
                base.inversion,
            )
            .and_then(|run| {
                let div = run.synth.divergence(&run.recon)?;
                let mut anchor_gap: f64 = 0.0;
                for (k, s) in run.synth.steps().iter().enumerate().skip(1) {
                    let gap = match (&s.diag.eps, &s.diag.eps_anchor) {
                        (Some(e), Some(a)) => e.max_abs_diff(a)?,
                        _ => 0.0,
                    };
                    anchor_gap = anchor_gap.max(gap);
                    steps.push(vec![
                        fmt_f64(q),
                        fmt_f64(alpha),
                        mode.to_string(),
                        k.to_string(),
                        s.t.to_string(),
                        fmt_f64(div[k]),
                        fmt_f64(s.diag.clamp_fraction.unwrap_or_default()),
                        fmt_f64(gap),
                    ]);
                }
                let term = &run.synth.terminal().latent;
                Ok(vec![
                    fmt_f64(*div.last().expect("nonempty")),
                    fmt_f64(mean(div.iter().copied()).unwrap_or(0.0)),
                    fmt_f64(div.iter().copied().fold(0.0, f64::max)),
                    fmt_f64(anchor_gap),
                    fmt_f64(term.mean()),
                    fmt_f64(term.std()),
                    fmt_f64(term.min()),
                    fmt_f64(term.max()),
                ])
            });
            (cells, steps)
        })
        .collect();

    let mut cells = Table::new(&[
        "quantile",
        "alpha",
        "inject_uncond",
        "status",
        "terminal_divergence",
        "mean_divergence",
        "max_divergence",
        "max_anchor_gap",
        "terminal_mean",
        "terminal_std",
        "terminal_min",
        "terminal_max",
    ]);
    let mut steps = Table::new(&[
        "quantile",
        "alpha",
        "inject_uncond",
        "step",
        "t",
        "divergence",
        "clamp_fraction",
        "anchor_gap",
    ]);
    for (&(q, alpha, mode), (res, rows)) in grid.iter().zip(results) {
        let mut row = vec![fmt_f64(q), fmt_f64(alpha), mode.to_string(), status(&res)];
        row.extend(blank_or(&res, 8));
        cells.push(row);
        for r in rows {
            steps.push(r);
        }
    }
    Ok(SweepOutput { cells, steps })
}
