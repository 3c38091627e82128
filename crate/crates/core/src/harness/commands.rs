//! The experiment commands and their CSV outputs.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::config::ExperimentConfig;
use super::experiments::{self as ex, PosteriorSummary};
use super::output::{fmt, OutputDir, RunManifest, SeedBook};
use super::validate::{run_validation, ValidationReport};
use super::HarnessError;
use crate::calibrate::{Chain, EnsembleRecord, Histogram};
use crate::dynamics::{integrate, ModelState, ParamName, Params};
use crate::objective::evaluate;
use crate::priors::PriorSet;
use crate::statistics::{moment_full_into, relative_residuals, MomentLayout, RunningAverage};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Scan,
    Eki,
    Mcmc,
    Fast,
    Validate,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::Simulate,
        Command::Scan,
        Command::Eki,
        Command::Mcmc,
        Command::Fast,
        Command::Validate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Scan => "scan",
            Command::Eki => "eki",
            Command::Mcmc => "mcmc",
            Command::Fast => "fast",
            Command::Validate => "validate",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }
}

#[derive(Debug)]
pub struct Outcome {
    pub manifest: RunManifest,
    pub report: Option<ValidationReport>,
}

/// Run `command` with `config`, writing outputs and `manifest.json` into `out`.
/// A failed validation still writes its report before returning an error.
pub fn run_command(command: Command, config: &ExperimentConfig, out: &Path) -> Result<Outcome, HarnessError> {
    config.validate()?;
    let start = Instant::now();
    let mut dir = OutputDir::create(out)?;
    let mut seeds = SeedBook::new(config.seed);
    let mut report = None;
    match command {
        Command::Simulate => simulate(config, &mut seeds, &mut dir)?,
        Command::Scan => scan(config, &mut seeds, &mut dir)?,
        Command::Eki => eki(config, &mut seeds, &mut dir)?,
        Command::Mcmc => mcmc(config, &mut seeds, &mut dir)?,
        Command::Fast => fast(config, &mut seeds, &mut dir)?,
        Command::Validate => {
            let r = run_validation(config, &mut seeds)?;
            write_report(&r, &mut dir)?;
            report = Some(r);
        }
    }
    let manifest = dir.finish(command.name(), config, &seeds, start.elapsed().as_secs_f64())?;
    if let Some(r) = &report {
        let failed = r.failures();
        if failed > 0 {
            return Err(HarnessError::Validation(failed));
        }
    }
    Ok(Outcome { manifest, report })
}

/// Repeat the run recorded in a manifest.
pub fn rerun(manifest: &Path, out: &Path) -> Result<Outcome, HarnessError> {
    let m = RunManifest::read(manifest)?;
    let command = Command::from_name(&m.command)
        .ok_or_else(|| HarnessError::Config(format!("manifest names unknown command `{}`", m.command)))?;
    run_command(command, &m.config, out)
}

fn bool01(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

fn simulate(cfg: &ExperimentConfig, seeds: &mut SeedBook, dir: &mut OutputDir) -> Result<(), HarnessError> {
    let shape = cfg.shape();
    let truth = cfg.truth();
    let integ = cfg.integrator();
    let init = ModelState::random(shape, &mut ChaCha8Rng::seed_from_u64(seeds.get("simulate/initial")));
    let layout = MomentLayout::full(shape);

    let mut traj = dir.csv("trajectory.csv")?;
    let mut header = vec!["time".to_string()];
    header.extend((1..=shape.n_slow).map(|k| format!("X[{k}]")));
    for k in 1..=shape.n_slow {
        header.extend((1..=shape.n_fast).map(|j| format!("Y[{j},{k}]")));
    }
    traj.write_record(&header)?;

    let mut moments = dir.csv("moments.csv")?;
    let mut header = vec!["time".to_string()];
    header.extend(layout.labels());
    header.push("r_slow".into());
    header.push("r_fast".into());
    moments.write_record(&header)?;

    let every = integ.steps_for(cfg.simulate.sample_interval).max(1);
    let mut avg = RunningAverage::new(layout, init.time);
    let mut buf = vec![0.0; layout.len()];
    let mut n = 0u64;
    let mut io_err: Option<csv::Error> = None;
    let result = integrate(&init, &truth, cfg.simulate.duration, &integ, |s| {
        moment_full_into(shape, s.slow(), s.fast(), &mut buf);
        avg.accumulate(&buf, integ.dt).expect("layout matches");
        n += 1;
        if n % every != 0 || io_err.is_some() {
            return;
        }
        let mut row = vec![fmt(s.time)];
        row.extend(s.as_slice().iter().map(|v| fmt(*v)));
        if let Err(e) = traj.write_record(&row) {
            io_err = Some(e);
            return;
        }
        let mean = avg.mean().expect("positive elapsed time");
        let (rs, rf) = relative_residuals(&layout, &mean, &truth).expect("full layout");
        let mut row = vec![fmt(s.time)];
        row.extend(mean.iter().map(|v| fmt(*v)));
        row.push(fmt(rs));
        row.push(fmt(rf));
        if let Err(e) = moments.write_record(&row) {
            io_err = Some(e);
        }
    });
    traj.flush()?;
    moments.flush()?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    result?;
    Ok(())
}

fn scan(cfg: &ExperimentConfig, seeds: &mut SeedBook, dir: &mut OutputDir) -> Result<(), HarnessError> {
    let name = ParamName::from_label(&cfg.scan.param).expect("validated name");
    let control = ex::full_control(cfg, seeds.get("control"))?;
    // misfits at r = 1 rescale exactly to any other level
    let target = ex::target(cfg, ex::full_model(cfg), &control, 1.0, cfg.windows.scan)?;
    let priors = PriorSet::standard();
    let integ = cfg.integrator();
    let grid = cfg.scan_grid();
    let misfits = grid
        .par_iter()
        .map(|&v| {
            let p = cfg.truth().with(name, v);
            if priors.log_density(&p) == f64::NEG_INFINITY {
                return Ok(f64::INFINITY);
            }
            Ok(evaluate(&p, &target, &control.final_state, &integ)?.misfit.value())
        })
        .collect::<Result<Vec<f64>, HarnessError>>()?;

    let mut w = dir.csv(&format!("scan_{}.csv", name.label()))?;
    w.write_record(["value", "r", "U"])?;
    for (&v, &j1) in grid.iter().zip(&misfits) {
        let p = cfg.truth().with(name, v);
        let lp = priors.log_density(&p);
        for &r in &cfg.noise.levels {
            let u = if j1.is_finite() && lp.is_finite() { j1 / (r * r) - lp } else { f64::INFINITY };
            w.write_record([fmt(v), fmt(r), fmt(u)])?;
        }
    }
    w.flush()?;
    Ok(())
}

const PARAM_COLS: [&str; 4] = ["F", "h", "c", "b"];

fn eki(cfg: &ExperimentConfig, seeds: &mut SeedBook, dir: &mut OutputDir) -> Result<(), HarnessError> {
    let control = ex::full_control(cfg, seeds.get("control"))?;
    let pool = ex::initial_pool(&control);
    let priors = PriorSet::standard();
    let mut cells = Vec::new();
    for &r in &cfg.noise.levels {
        let target = ex::target(cfg, ex::full_model(cfg), &control, r, cfg.windows.slow)?;
        for &m in &cfg.eki.sizes {
            let seed = seeds.get(&format!("eki/r={r}/M={m}"));
            cells.push((r, m, ex::eki(cfg, &target, &priors, &pool, m, seed)?));
        }
    }
    write_eki(&cells, dir)
}

#[derive(Serialize)]
struct EkiCellSummary {
    r: f64,
    #[serde(rename = "M")]
    m: usize,
    mean: [f64; 4],
    std: [f64; 4],
    error_norms: Vec<Option<f64>>,
    collapsed: bool,
    first_collapse: Option<usize>,
    diverged: usize,
}

pub fn write_eki(cells: &[(f64, usize, EnsembleRecord)], dir: &mut OutputDir) -> Result<(), HarnessError> {
    let mut summary = dir.csv("eki_summary.csv")?;
    let mut header = vec!["r", "M", "iter"];
    let means: Vec<String> = PARAM_COLS.iter().map(|p| format!("theta_mean_{p}")).collect();
    let stds: Vec<String> = PARAM_COLS.iter().map(|p| format!("theta_std_{p}")).collect();
    header.extend(means.iter().map(String::as_str));
    header.extend(stds.iter().map(String::as_str));
    header.extend(["error_norm", "collapsed"]);
    summary.write_record(&header)?;

    let mut iqr = dir.csv("eki_iqr.csv")?;
    let mut header = vec!["r".to_string(), "M".into(), "iter".into()];
    header.extend(PARAM_COLS.iter().map(|p| format!("q25_{p}")));
    header.extend(PARAM_COLS.iter().map(|p| format!("q75_{p}")));
    iqr.write_record(&header)?;

    let mut members = dir.csv("eki_members.csv")?;
    members.write_record(["r", "M", "iter", "member", "F", "h", "c", "b", "diverged"])?;

    let mut table = dir.csv("eki_table.csv")?;
    let mut header = vec!["r", "M"];
    header.extend(means.iter().map(String::as_str));
    header.extend(stds.iter().map(String::as_str));
    header.extend(["error_norm", "collapsed"]);
    table.write_record(&header)?;

    let mut json = Vec::new();
    for (r, m, rec) in cells {
        let (r, m) = (fmt(*r), m.to_string());
        for it in &rec.iterations {
            let iter = it.iteration.to_string();
            let mut row = vec![r.clone(), m.clone(), iter.clone()];
            row.extend(it.mean.iter().map(|v| fmt(*v)));
            row.extend(it.std.iter().map(|v| fmt(*v)));
            row.push(it.error_norm.map(fmt).unwrap_or_default());
            row.push(bool01(it.collapsed).into());
            summary.write_record(&row)?;

            let mut row = vec![r.clone(), m.clone(), iter.clone()];
            row.extend(it.q25.iter().map(|v| fmt(*v)));
            row.extend(it.q75.iter().map(|v| fmt(*v)));
            iqr.write_record(&row)?;

            for (j, p) in it.members.iter().enumerate() {
                let mut row = vec![r.clone(), m.clone(), iter.clone(), j.to_string()];
                row.extend(p.to_array().iter().map(|v| fmt(*v)));
                row.push(match it.outputs.get(j) {
                    Some(Some(_)) => "0".into(),
                    Some(None) => "1".into(),
                    None => String::new(),
                });
                members.write_record(&row)?;
            }
        }
        let last = rec.last();
        let mut row = vec![r.clone(), m.clone()];
        row.extend(last.mean.iter().map(|v| fmt(*v)));
        row.extend(last.std.iter().map(|v| fmt(*v)));
        row.push(last.error_norm.map(fmt).unwrap_or_default());
        row.push(bool01(last.collapsed).into());
        table.write_record(&row)?;
        json.push(EkiCellSummary {
            r: r.parse().expect("formatted float"),
            m: m.parse().expect("formatted integer"),
            mean: last.mean,
            std: last.std,
            error_norms: rec.iterations.iter().map(|i| i.error_norm).collect(),
            collapsed: last.collapsed,
            first_collapse: rec.first_collapse(),
            diverged: rec.iterations.iter().map(|i| i.diverged).sum(),
        });
    }
    summary.flush()?;
    iqr.flush()?;
    members.flush()?;
    table.flush()?;
    dir.json("eki_summary.json", &json)
}

fn mcmc(cfg: &ExperimentConfig, seeds: &mut SeedBook, dir: &mut OutputDir) -> Result<(), HarnessError> {
    let control = ex::full_control(cfg, seeds.get("control"))?;
    let pool = ex::initial_pool(&control);
    let target = ex::target(cfg, ex::full_model(cfg), &control, cfg.mcmc.r, cfg.windows.slow)?;
    let priors = PriorSet::standard();
    let init = ex::warm_start(cfg, &target, &priors, &pool, seeds.get("mcmc/warm-start"))?;
    let chain = ex::mcmc(cfg, &target, &priors, &init, control.final_state.clone(), seeds.get("mcmc/chain"))?;
    write_chain(cfg, &chain, &init, dir)
}

fn fast(cfg: &ExperimentConfig, seeds: &mut SeedBook, dir: &mut OutputDir) -> Result<(), HarnessError> {
    let control = ex::fast_control(cfg, seeds.get("fast/control"))?;
    let pool = ex::initial_pool(&control);
    let target = ex::target(cfg, ex::fast_model(cfg), &control, cfg.fast.r, cfg.windows.fast)?;
    let priors = PriorSet::fast_default();
    let init = ex::warm_start(cfg, &target, &priors, &pool, seeds.get("fast/warm-start"))?;
    let chain = ex::mcmc(cfg, &target, &priors, &init, control.final_state.clone(), seeds.get("fast/chain"))?;
    write_chain(cfg, &chain, &init, dir)
}

pub fn write_chain<S>(
    cfg: &ExperimentConfig,
    chain: &Chain<S>,
    init: &Params,
    dir: &mut OutputDir,
) -> Result<(), HarnessError> {
    let header = ["iter", "F", "h", "c", "b", "U", "accepted"];
    let mut all = dir.csv("chain.csv")?;
    all.write_record(header)?;
    for (i, l) in chain.links.iter().enumerate() {
        let mut row = vec![i.to_string()];
        row.extend(l.params.to_array().iter().map(|v| fmt(*v)));
        row.push(fmt(l.potential));
        row.push(bool01(l.accepted).into());
        all.write_record(&row)?;
    }
    all.flush()?;

    let mut kept = dir.csv("samples.csv")?;
    kept.write_record(header)?;
    let stride = chain.thin.max(1);
    for (n, l) in chain.retained().enumerate() {
        let mut row = vec![(chain.burn_in + n * stride).to_string()];
        row.extend(l.params.to_array().iter().map(|v| fmt(*v)));
        row.push(fmt(l.potential));
        row.push(bool01(l.accepted).into());
        kept.write_record(&row)?;
    }
    kept.flush()?;

    let (summary, hists): (PosteriorSummary, Vec<Histogram>) = ex::summarize_chain(chain, init, &cfg.truth(), cfg.mcmc.bins)?;
    for h in &hists {
        write_histogram(h, dir)?;
    }
    dir.json("mcmc_summary.json", &summary)
}

pub fn write_histogram(h: &Histogram, dir: &mut OutputDir) -> Result<(), HarnessError> {
    let mut w = dir.csv(&format!("hist_{}.csv", h.param.label()))?;
    w.write_record(["bin_lo", "bin_hi", "mass"])?;
    for (e, m) in h.edges.windows(2).zip(&h.masses) {
        w.write_record([fmt(e[0]), fmt(e[1]), fmt(*m)])?;
    }
    w.flush()?;
    Ok(())
}

fn write_report(report: &ValidationReport, dir: &mut OutputDir) -> Result<(), HarnessError> {
    let mut w = dir.csv("validate.csv")?;
    w.write_record(["check", "measured", "threshold", "passed"])?;
    for c in &report.checks {
        w.write_record([c.name.clone(), fmt(c.measured), fmt(c.threshold), bool01(c.passed).into()])?;
    }
    w.flush()?;
    let mut f = dir.file("validate.txt")?;
    write!(f, "{report}")?;
    f.flush()?;
    Ok(())
}
