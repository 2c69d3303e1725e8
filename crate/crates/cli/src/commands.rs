use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use contact_hj::action_dp::{backtrack_minimizer, backward_action, forward_action, ActionError, ActionParams};
use contact_hj::characteristics::{flow, h_decay_check, level_defect, write_orbit_csv, CharacteristicState, FlowError};
use contact_hj::ergodic::{classify, estimate_interval, maxmin_cr, minmax_cl, Classification, ErgodicError, Probe};
use contact_hj::grid::{displacement, Point, MAX_DIM};
use contact_hj::semigroup::{evolve, Direction, Propagator, StopReason, StopRule};
use contact_hj::{fmt_f64, GridFunction};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::Resolved;

/// How a run ended, mapped to the process exit status.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Terminal,
    Inconclusive,
}

#[derive(Serialize)]
struct RunRecord<'a, A: Serialize> {
    command: &'a str,
    arguments: A,
    config: &'a Resolved,
}

fn prepare(cfg: &Resolved, command: &str, arguments: impl Serialize) -> Result<PathBuf> {
    let dir = cfg.directory.clone();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_json(&dir.join("run.json"), &RunRecord { command, arguments, config: cfg })?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_grid_csv(path: &Path, f: &GridFunction) -> Result<()> {
    let mut out = create(path)?;
    f.write_csv(&mut out)?;
    out.flush()?;
    Ok(())
}

/// Parses `x` or `x,y` into a point of the configured dimension.
pub fn parse_point(text: &str, dim: usize) -> Result<Point> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>().with_context(|| format!("bad coordinate {s:?} in {text:?}")))
        .collect::<Result<_>>()?;
    if parts.len() != dim {
        bail!("{text:?} has {} coordinates, the grid has dimension {dim}", parts.len());
    }
    let mut p = [0.0; MAX_DIM];
    p[..dim].copy_from_slice(&parts);
    Ok(p)
}

/// Initial data: `const:K`, `sin`, or a CSV path in the grid-function format.
pub fn initial_data(spec: &str, cfg: &Resolved) -> Result<GridFunction> {
    let grid = cfg.grid;
    if let Some(k) = spec.strip_prefix("const:") {
        let k: f64 = k.parse().with_context(|| format!("bad constant in {spec:?}"))?;
        return Ok(GridFunction::constant(grid, k));
    }
    if spec == "sin" {
        return Ok(contact_hj::ergodic::ProbeSpec::Sine.build(grid).data);
    }
    let file = File::open(spec).with_context(|| format!("opening initial data {spec}"))?;
    GridFunction::read_csv(grid, BufReader::new(file)).with_context(|| format!("reading initial data {spec}"))
}

fn probes(cfg: &Resolved) -> Vec<Probe> {
    cfg.ergodic.probes.iter().map(|p| p.build(cfg.grid)).collect()
}

fn limit_name(c: f64) -> String {
    format!("limit_c{c}.csv")
}

fn write_limits<'a>(dir: &Path, cls: impl IntoIterator<Item = &'a Classification>) -> Result<()> {
    for cl in cls {
        if let Some(limit) = &cl.limit {
            let sub = dir.join("limits");
            fs::create_dir_all(&sub)?;
            write_grid_csv(&sub.join(limit_name(cl.c)), limit)?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct EvolveArgs<'a> {
    c: f64,
    initial: &'a str,
}

#[derive(Serialize)]
struct EvolveSummary {
    c: f64,
    stop: StopReason,
    t_end: f64,
    steps: usize,
    final_min: f64,
    final_max: f64,
    last_sup_increment: f64,
    drift_rate: Option<f64>,
    tol_conv: f64,
    residual: Option<f64>,
}

pub fn evolve_cmd(cfg: &Resolved, c: f64, initial: &str) -> Result<Status> {
    let w0 = initial_data(initial, cfg)?;
    let dir = prepare(cfg, "evolve", EvolveArgs { c, initial })?;
    let prop = Propagator::new(&cfg.model, &cfg.grid, cfg.semigroup.with_c(c))?;
    let rule = StopRule {
        drift_threshold: cfg.ergodic.drift_threshold,
        snapshot_stride: cfg.snapshot_stride,
        ..StopRule::defaults(&cfg.model, &w0)
    };
    let dt = cfg.semigroup.dt;
    let t_final = (cfg.ergodic.t_final / dt).round() * dt;
    let trace = evolve(&prop, &w0, t_final, &rule, Direction::Backward)?;

    let mut out = create(&dir.join("trace.csv"))?;
    trace.write_csv(&mut out)?;
    out.flush()?;
    write_grid_csv(&dir.join("final.csv"), &trace.final_state)?;
    if !trace.snapshots.is_empty() {
        let sub = dir.join("snapshots");
        fs::create_dir_all(&sub)?;
        for (k, (_, snap)) in trace.snapshots.iter().enumerate() {
            write_grid_csv(&sub.join(format!("snapshot_{k:05}.csv")), snap)?;
        }
    }
    let s = trace.summary();
    let summary = EvolveSummary {
        c,
        stop: s.stop,
        t_end: s.t_end,
        steps: s.steps,
        final_min: s.final_min,
        final_max: s.final_max,
        last_sup_increment: s.last_sup_increment,
        drift_rate: s.drift_rate,
        tol_conv: rule.tol_conv,
        residual: trace.is_bounded().then(|| prop.residual(&trace.final_state)),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    println!("{}: {:?} at t = {}", dir.display(), s.stop, s.t_end);
    Ok(if s.stop == StopReason::MaxTime { Status::Inconclusive } else { Status::Terminal })
}

/// `lo:hi:n` with `n >= 1` levels, endpoints included.
pub fn parse_sweep(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 3 {
        bail!("sweep {text:?} must look like lo:hi:n");
    }
    let lo: f64 = parts[0].parse().context("sweep lower end")?;
    let hi: f64 = parts[1].parse().context("sweep upper end")?;
    let n: usize = parts[2].parse().context("sweep count")?;
    if n == 0 || !(lo <= hi) {
        bail!("sweep {text:?} needs lo <= hi and n >= 1");
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    Ok((0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect())
}

#[derive(Serialize)]
struct ClassifyArgs {
    levels: Vec<f64>,
}

pub fn classify_cmd(cfg: &Resolved, levels: Vec<f64>, sweep: bool) -> Result<Status> {
    let dir = prepare(cfg, "classify", ClassifyArgs { levels: levels.clone() })?;
    let probes = probes(cfg);
    let ecfg = cfg.ergodic_config();
    let results: Vec<Classification> = levels
        .par_iter()
        .map(|&c| classify(&cfg.model, &cfg.grid, c, &probes, &ecfg))
        .collect::<Result<_, _>>()?;
    if sweep {
        write_json(&dir.join("classifications.json"), &results)?;
    } else {
        write_json(&dir.join("classification.json"), &results[0])?;
    }
    write_limits(&dir, &results)?;
    for r in &results {
        println!("c = {}: {:?}", r.c, r.outcome);
    }
    let inconclusive = results.iter().any(|r| r.outcome == contact_hj::ergodic::Outcome::Inconclusive);
    Ok(if inconclusive { Status::Inconclusive } else { Status::Terminal })
}

#[derive(Serialize)]
struct IntervalReport<'a> {
    bisection: Option<&'a contact_hj::ergodic::IntervalEstimate>,
    error: Option<String>,
    minmax_cl: contact_hj::ergodic::OptimizerEstimate,
    maxmin_cr: contact_hj::ergodic::OptimizerEstimate,
}

pub fn interval_cmd(cfg: &Resolved) -> Result<Status> {
    let dir = prepare(cfg, "interval", ())?;
    let probes = probes(cfg);
    let ecfg = cfg.ergodic_config();
    let [lo, hi] = cfg.ergodic.c_search;
    let opt = cfg.optimizer_config(cfg.ergodic.u_box);
    let ((est, cl), cr) = rayon::join(
        || {
            rayon::join(
                || estimate_interval(&cfg.model, &cfg.grid, (lo, hi), cfg.ergodic.tol_c, &probes, &ecfg),
                || minmax_cl(&cfg.model, &cfg.grid, &opt),
            )
        },
        || maxmin_cr(&cfg.model, &cfg.grid, &opt),
    );
    let (bisection, error, status) = match est {
        Ok(e) => (Some(e), None, Status::Terminal),
        Err(e @ ErgodicError::NoBoundedSample { .. }) => (None, Some(e.to_string()), Status::Inconclusive),
        Err(e) => return Err(e.into()),
    };
    write_json(
        &dir.join("interval.json"),
        &IntervalReport { bisection: bisection.as_ref(), error: error.clone(), minmax_cl: cl.clone(), maxmin_cr: cr.clone() },
    )?;
    if let Some(est) = &bisection {
        write_limits(&dir, &est.classifications)?;
        let side = |lo: Option<f64>, hi: Option<f64>| {
            let f = |v: Option<f64>| v.map_or("open".to_string(), |v| v.to_string());
            format!("[{}, {}]", f(lo), f(hi))
        };
        println!("c_l in {}", side(est.c_l.lo, est.c_l.hi));
        println!("c_r in {}", side(est.c_r.lo, est.c_r.hi));
    }
    if let Some(e) = error {
        println!("{e}");
    }
    println!("minmax estimate {} / maxmin estimate {}", cl.estimate, cr.estimate);
    Ok(status)
}

#[derive(Serialize)]
struct CharacteristicsArgs {
    x: Point,
    u: f64,
    p: Point,
    t_span: f64,
    c: f64,
}

#[derive(Serialize)]
struct OrbitReport {
    steps: usize,
    initial_level_defect: f64,
    max_level_defect: f64,
    /// `max |(H - c)(t) - (H - c)(0) exp(-int H_u)|`.
    decay_identity_error: Option<f64>,
    blow_up_at: Option<f64>,
}

pub fn characteristics_cmd(cfg: &Resolved, x: Point, u: f64, p: Point, t_span: f64, c: f64) -> Result<Status> {
    let dir = prepare(cfg, "characteristics", CharacteristicsArgs { x, u, p, t_span, c })?;
    let s0 = CharacteristicState::new(x, u, p);
    let (orbit, blow_up_at) = match flow(&cfg.model, &s0, t_span, cfg.dt_ode, c) {
        Ok(o) => (o, None),
        Err(FlowError::BlowUp { t, partial }) => (partial, Some(t)),
        Err(e) => return Err(e.into()),
    };
    let mut out = create(&dir.join("orbit.csv"))?;
    write_orbit_csv(&cfg.model, &orbit, c, &mut out)?;
    out.flush()?;
    let report = OrbitReport {
        steps: orbit.len().saturating_sub(1),
        initial_level_defect: level_defect(&cfg.model, &s0, c),
        max_level_defect: orbit.iter().map(|s| level_defect(&cfg.model, s, c).abs()).fold(0.0, f64::max),
        decay_identity_error: if blow_up_at.is_none() {
            Some(h_decay_check(&cfg.model, &s0, t_span, cfg.dt_ode, c)?)
        } else {
            None
        },
        blow_up_at,
    };
    write_json(&dir.join("report.json"), &report)?;
    match blow_up_at {
        Some(t) => println!("orbit blew up at t = {t}; partial orbit written"),
        None => println!("max |H - c| along the orbit: {:e}", report.max_level_defect),
    }
    Ok(Status::Terminal)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ActionKindArg {
    Forward,
    Backward,
}

#[derive(Serialize)]
struct ActionArgs<'a> {
    kind: ActionKindArg,
    x0: Point,
    u0: f64,
    c: f64,
    t: f64,
    queries: &'a [Point],
    curves: bool,
}

#[allow(clippy::too_many_arguments)]
pub fn action_cmd(
    cfg: &Resolved,
    kind: ActionKindArg,
    x0: Point,
    u0: f64,
    c: f64,
    t: f64,
    queries: &[Point],
    curves: bool,
) -> Result<Status> {
    let dir = prepare(cfg, "action", ActionArgs { kind, x0, u0, c, t, queries, curves })?;
    let dt = cfg.semigroup.dt;
    let steps = ActionParams::steps_for(t, dt);
    if steps == 0 {
        bail!("t = {t} is shorter than one step of dt = {dt}");
    }
    let params = ActionParams::new(x0, u0, c, dt, steps, cfg.semigroup.v_max);
    let built = match kind {
        ActionKindArg::Forward => forward_action(&cfg.model, &cfg.grid, params),
        ActionKindArg::Backward => backward_action(&cfg.model, &cfg.grid, params),
    };
    let field = match built {
        Ok(f) => f,
        Err(e @ ActionError::PenaltyDominates { .. }) => {
            println!("{e}");
            return Ok(Status::Inconclusive);
        }
        Err(e) => return Err(e.into()),
    };
    let dim = cfg.grid.dim();
    let mut out = create(&dir.join("values.csv"))?;
    writeln!(out, "{}", if dim == 1 { "x,value" } else { "x1,x2,value" })?;
    for q in queries {
        let v = field.value(*q, field.n_steps())?;
        let coords: Vec<String> = (0..dim).map(|d| fmt_f64(q[d])).collect();
        writeln!(out, "{},{}", coords.join(","), fmt_f64(v))?;
        println!("h({}) = {v}", q[..dim].iter().map(f64::to_string).collect::<Vec<_>>().join(","));
    }
    out.flush()?;
    if curves {
        for (i, q) in queries.iter().enumerate() {
            let curve = backtrack_minimizer(&field, *q)?;
            let mut out = create(&dir.join(format!("curve_{i}.csv")))?;
            writeln!(out, "{}", if dim == 1 { "t,x,u,p" } else { "t,x1,x2,u,p1,p2" })?;
            for (k, pt) in curve.iter().enumerate() {
                // momentum of the segment leaving this point; the last point reuses the incoming one
                let (a, b) = if k + 1 < curve.len() { (pt, &curve[k + 1]) } else { (&curve[k.saturating_sub(1)], pt) };
                let mut v = displacement(a.x, b.x, dim);
                let span = b.t - a.t;
                for vd in v.iter_mut().take(dim) {
                    *vd = if span != 0.0 { *vd / span } else { 0.0 };
                }
                let p = cfg.model.momentum(pt.x, pt.u, v);
                let coords: Vec<String> = (0..dim).map(|d| fmt_f64(pt.x[d])).collect();
                let moms: Vec<String> = (0..dim).map(|d| fmt_f64(p[d])).collect();
                writeln!(out, "{},{},{},{}", fmt_f64(pt.t), coords.join(","), fmt_f64(pt.u), moms.join(","))?;
            }
            out.flush()?;
        }
    }
    Ok(Status::Terminal)
}
