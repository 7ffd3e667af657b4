//! Experiment orchestration: runs one configured experiment, writes CSV
//! artifacts, optional SVG figures and a JSON report.
//!
//! Output directory layout: `resolved_config.toml`, `report.json`, then
//! the experiment's CSV files and, with `plot`, one SVG per curve.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{emit_config, parse_unresolved, Experiment, ExperimentConfig, ModelName, SchemeChoice};
use crate::coupling::{coupled_chain_run, coupling_time_tail, synchronous_pair_batch, TailVerdict};
use crate::ergodicity::{drift_fit, e1_bound_check, invariant_agreement, lyapunov_iterate_check, tv_curve_and_fit};
use crate::error::{ErgoError, Result};
use crate::hypoellipticity::{rank_grid, write_rank_csv};
use crate::integrate::{euler_batch, exact_e1_batch, moment_bound_check, second_moment_curve, step_count, PathBatch};
use crate::model::SdeModel;
use crate::noise::orey_ratio;
use crate::plot::{Figure, Series, Style};
use crate::rng::{self, label};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub check: String,
    pub passed: bool,
    pub detail: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub experiment: Option<String>,
    pub wall_time_s: f64,
    pub status: Status,
    pub verdicts: Vec<Verdict>,
    /// File names relative to the output directory.
    pub artifacts: Vec<String>,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    /// TOML echo of every effective setting.
    pub resolved_config: Option<String>,
}

impl RunReport {
    /// 0 when every verdict passes, 2 on a failed verdict, 1 on an error.
    pub fn exit_code(&self) -> i32 {
        match self.status {
            Status::Pass => 0,
            Status::Fail => 2,
            Status::Error => 1,
        }
    }

    fn failed(stage: &str, err: &ErgoError, started: Instant) -> Self {
        RunReport {
            experiment: None,
            wall_time_s: started.elapsed().as_secs_f64(),
            status: Status::Error,
            verdicts: Vec::new(),
            artifacts: Vec::new(),
            failed_stage: Some(stage.to_string()),
            error: Some(err.to_string()),
            resolved_config: None,
        }
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        fs::create_dir_all(out)?;
        let text = serde_json::to_string_pretty(self).map_err(|e| ErgoError::Io(e.to_string()))?;
        fs::write(out.join("report.json"), text + "\n")?;
        Ok(())
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub experiment: Option<Experiment>,
    pub seed: Option<u64>,
    pub output: Option<String>,
    pub plot: bool,
}

/// Read, override, resolve and run. The report is written even when the
/// config cannot be read, into the `--out` directory or the default one.
pub fn run_from_file(path: &Path, overrides: &Overrides) -> RunReport {
    let started = Instant::now();
    let fallback_out = overrides.output.clone().unwrap_or_else(|| "ergokit-out".to_string());
    let cfg = fs::read_to_string(path)
        .map_err(|e| ErgoError::Io(format!("{}: {e}", path.display())))
        .and_then(|text| parse_unresolved(&text))
        .and_then(|mut c| {
            if let Some(e) = overrides.experiment {
                c.experiment = Some(e);
            }
            if let Some(s) = overrides.seed {
                c.seed = s;
            }
            if let Some(o) = &overrides.output {
                c.output = o.clone();
            }
            c.plot |= overrides.plot;
            c.resolve()
        });
    match cfg {
        Ok(cfg) => run_experiment(&cfg),
        Err(e) => {
            let report = RunReport::failed("config", &e, started);
            let _ = report.write(Path::new(&fallback_out));
            report
        }
    }
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    out: PathBuf,
    stage: &'static str,
    verdicts: Vec<Verdict>,
    artifacts: Vec<String>,
}

impl Run<'_> {
    fn verdict(&mut self, check: &str, passed: bool, detail: Value) {
        self.verdicts.push(Verdict { check: check.to_string(), passed, detail });
    }

    fn file<F>(&mut self, name: &str, body: F) -> Result<()>
    where
        F: FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>,
    {
        let mut w = BufWriter::new(fs::File::create(self.out.join(name))?);
        body(&mut w)?;
        w.flush()?;
        self.artifacts.push(name.to_string());
        Ok(())
    }

    fn svg(&mut self, name: &str, fig: &Figure) -> Result<()> {
        if !self.cfg.plot {
            return Ok(());
        }
        let svg = fig.to_svg();
        self.file(name, |w| w.write_all(svg.as_bytes()))
    }
}

/// Execute the configured experiment and write its report.
pub fn run_experiment(cfg: &ExperimentConfig) -> RunReport {
    let started = Instant::now();
    let out = PathBuf::from(&cfg.output);
    let mut run = Run { cfg, out: out.clone(), stage: "setup", verdicts: Vec::new(), artifacts: Vec::new() };
    let resolved = emit_config(cfg).ok();
    let result = execute(&mut run, resolved.as_deref());
    let status = match &result {
        Err(_) => Status::Error,
        Ok(()) if run.verdicts.iter().all(|v| v.passed) => Status::Pass,
        Ok(()) => Status::Fail,
    };
    let mut report = RunReport {
        experiment: cfg.experiment.map(|e| e.id().to_string()),
        wall_time_s: started.elapsed().as_secs_f64(),
        status,
        verdicts: run.verdicts,
        artifacts: run.artifacts,
        failed_stage: result.as_ref().err().map(|_| run.stage.to_string()),
        error: result.err().map(|e| e.to_string()),
        resolved_config: resolved,
    };
    if let Err(e) = report.write(&out) {
        report.status = Status::Error;
        report.failed_stage = Some("report".into());
        report.error = Some(e.to_string());
    }
    report
}

fn execute(run: &mut Run, resolved: Option<&str>) -> Result<()> {
    fs::create_dir_all(&run.out)?;
    let resolved = resolved.ok_or_else(|| ErgoError::Config("config could not be serialized".into()))?;
    run.file("resolved_config.toml", |w| w.write_all(resolved.as_bytes()))?;
    run.stage = "model";
    let model = run.cfg.build_model()?;
    let experiment = run.cfg.experiment.ok_or_else(|| ErgoError::Config("missing key `experiment`".into()))?;
    run.stage = experiment.id();
    match experiment {
        Experiment::Simulate => simulate(run, &model),
        Experiment::Couple => couple(run, &model),
        Experiment::TvDecay => tv_decay(run, &model),
        Experiment::DriftCheck => drift_check(run, &model),
        Experiment::RankCheck => rank_check(run, &model),
        Experiment::OreyCheck => orey_check(run, &model),
        Experiment::InvariantCheck => invariant_check(run, &model),
    }
}

fn simulate(run: &mut Run, model: &SdeModel) -> Result<()> {
    let cfg = run.cfg;
    let batch = match cfg.scheme {
        SchemeChoice::Euler => euler_batch(model, &cfg.x0, cfg.horizon, cfg.dt, cfg.n_paths, cfg.seed, false)?,
        SchemeChoice::ExactE1 => {
            if cfg.model.name != ModelName::ExampleE1 {
                return Err(ErgoError::Config("scheme exact-e1 needs model example-e1".into()));
            }
            let n = step_count(cfg.horizon, cfg.dt)?;
            exact_e1_batch(
                cfg.model.k,
                cfg.model.sigma,
                [cfg.x0[0], cfg.x0[1]],
                cfg.horizon,
                n + 1,
                cfg.n_paths,
                cfg.seed,
            )?
        }
    };
    run.stage = "write";
    let shown = cfg.csv_paths.min(batch.n_paths);
    let head = first_paths(&batch, shown);
    run.file("paths.csv", |w| head.write_csv(w))?;
    let curve = second_moment_curve(&batch);
    run.file("moments.csv", |w| {
        writeln!(w, "t,mean_sq,se")?;
        for i in 0..curve.times.len() {
            writeln!(w, "{},{},{}", curve.times[i], curve.mean_sq[i], curve.se[i])?;
        }
        Ok(())
    })?;
    for c in 0..batch.dim {
        let series = (0..shown)
            .filter(|p| !head.diverged[*p])
            .map(|p| Series {
                label: format!("path {p}"),
                xs: head.t_grid.clone(),
                ys: (0..head.t_grid.len()).map(|g| head.state(p, g)[c]).collect(),
            })
            .collect();
        let fig = Figure {
            title: format!("{} x{}", model.name, c + 1),
            x_label: "t".into(),
            y_label: format!("x{}", c + 1),
            log_y: false,
            style: Style::Line,
            series,
        };
        run.svg(&format!("paths_x{}.svg", c + 1), &fig)?;
    }
    run.stage = "verdicts";
    let diverged = batch.n_diverged();
    run.verdict("no_divergence", diverged == 0, json!({ "diverged": diverged, "n_paths": batch.n_paths }));
    if let Some(k) = model.dissipativity_k {
        let r = moment_bound_check(&curve, &cfg.x0, k)?;
        run.verdict(
            "moment_bound",
            r.no_upward_trend,
            json!({
                "k": k,
                "c_hat": r.c_hat,
                "middle_quarter_mean": r.middle_quarter_mean,
                "last_quarter_mean": r.last_quarter_mean,
            }),
        );
    }
    Ok(())
}

/// The first `n` paths of a batch, for compact CSV output.
fn first_paths(batch: &PathBatch, n: usize) -> PathBatch {
    let per_path = batch.t_grid.len() * batch.dim;
    PathBatch {
        n_paths: n,
        states: batch.states[..n * per_path].to_vec(),
        diverged: batch.diverged[..n].to_vec(),
        ..batch.clone()
    }
}

fn couple(run: &mut Run, model: &SdeModel) -> Result<()> {
    let cfg = run.cfg;
    if model.dissipativity_k.is_some() {
        run.stage = "synchronous";
        let pair = synchronous_pair_batch(model, &cfg.x0, &cfg.y0, cfg.horizon, cfg.dt, cfg.n_paths, cfg.seed)?;
        let k = pair.report.k;
        let d0: f64 = cfg.x0.iter().zip(&cfg.y0).map(|(a, b)| (a - b) * (a - b)).sum();
        let mut worst = vec![f64::NEG_INFINITY; pair.x.t_grid.len()];
        for p in 0..pair.x.n_paths {
            if pair.x.diverged[p] || pair.y.diverged[p] || d0 == 0.0 {
                continue;
            }
            for (g, t) in pair.x.t_grid.iter().enumerate() {
                let dd: f64 = pair.x.state(p, g).iter().zip(pair.y.state(p, g)).map(|(a, b)| (a - b) * (a - b)).sum();
                worst[g] = worst[g].max(dd * (k * t).exp() / d0);
            }
        }
        let times = pair.x.t_grid.clone();
        run.file("contraction.csv", |w| {
            writeln!(w, "t,max_ratio")?;
            for (t, r) in times.iter().zip(&worst) {
                writeln!(w, "{t},{r}")?;
            }
            Ok(())
        })?;
        run.svg(
            "contraction.svg",
            &Figure {
                title: "synchronous contraction".into(),
                x_label: "t".into(),
                y_label: "max |dX|^2 e^(kt) / |dX0|^2".into(),
                log_y: false,
                style: Style::Line,
                series: vec![Series { label: "max ratio".into(), xs: times, ys: worst }],
            },
        )?;
        let passed = pair.report.passed;
        run.verdict("synchronous_contraction", passed, serde_json::to_value(&pair.report).unwrap_or(Value::Null));
    }
    run.stage = "coupled-chain";
    let chain = coupled_chain_run(model, &cfg.x0, &cfg.y0, &cfg.chain_params(), cfg.seed)?;
    run.file("coupling_times.csv", |w| chain.write_csv(w))?;
    let coupled = chain.coupled_fraction();
    run.verdict(
        "coupling_rate",
        coupled >= 0.5,
        json!({
            "coupled_fraction": coupled,
            "p_hat": chain.p_hat,
            "merge_attempts": chain.merge_attempts,
            "diverged": chain.diverged,
            "bin_resolution": chain.bin_resolution,
        }),
    );
    run.stage = "tail-fit";
    match coupling_time_tail(&chain, cfg.theta)? {
        TailVerdict::PointMass { tau } => {
            run.verdict("exponential_moment", true, json!({ "point_mass": tau }));
        }
        TailVerdict::Geometric(fit) => {
            run.file("tail.csv", |w| {
                writeln!(w, "n,survival,se_log")?;
                for (n, s, se) in &fit.survival {
                    writeln!(w, "{n},{s},{se}")?;
                }
                Ok(())
            })?;
            run.svg(
                "tail.svg",
                &Figure {
                    title: "coupling time survival".into(),
                    x_label: "chain steps n".into(),
                    y_label: "P(tau > n)".into(),
                    log_y: true,
                    style: Style::Scatter,
                    series: vec![Series {
                        label: "survival".into(),
                        xs: fit.survival.iter().map(|r| r.0 as f64).collect(),
                        ys: fit.survival.iter().map(|r| r.1).collect(),
                    }],
                },
            )?;
            let passed = fit.exp_moment.finite && fit.exp_moment.estimate.is_finite();
            run.verdict("exponential_moment", passed, serde_json::to_value(&fit).unwrap_or(Value::Null));
        }
    }
    Ok(())
}

fn tv_decay(run: &mut Run, model: &SdeModel) -> Result<()> {
    let cfg = run.cfg;
    let (curve, fit) = tv_curve_and_fit(model, &cfg.x0, &cfg.y0, &cfg.tv_params(), cfg.seed)?;
    run.stage = "write";
    run.file("tv_curve.csv", |w| curve.write_csv(w))?;
    run.svg(
        "tv_curve.svg",
        &Figure {
            title: "total variation decay".into(),
            x_label: "t".into(),
            y_label: "tv".into(),
            log_y: true,
            style: Style::Line,
            series: vec![Series { label: "tv".into(), xs: curve.times.clone(), ys: curve.tv_hat.clone() }],
        },
    )?;
    run.verdict(
        "exponential_decay",
        fit.theta_hat > 2.0 * fit.theta_se && fit.theta_hat > 0.0,
        json!({ "fit": fit, "method": curve.method }),
    );
    Ok(())
}

fn drift_check(run: &mut Run, model: &SdeModel) -> Result<()> {
    let cfg = run.cfg;
    let lyap = cfg.lyapunov_spec();
    let fit = drift_fit(model, &lyap, &cfg.grid, cfg.n_paths, cfg.dt, cfg.seed)?;
    run.stage = "write";
    run.file("drift.csv", |w| fit.write_csv(w))?;
    run.svg(
        "drift.svg",
        &Figure {
            title: "drift estimates".into(),
            x_label: "v".into(),
            y_label: "estimate".into(),
            log_y: false,
            style: Style::Scatter,
            series: vec![Series {
                label: "E V(X_t*)".into(),
                xs: fit.per_point.iter().map(|p| p.v).collect(),
                ys: fit.per_point.iter().map(|p| p.estimate).collect(),
            }],
        },
    )?;
    run.verdict(
        "drift_condition",
        fit.passed,
        json!({
            "alpha_hat": fit.alpha_hat,
            "alpha_se": fit.alpha_se,
            "envelope_alpha": fit.envelope_alpha,
            "shell_ratio": fit.shell_ratio,
            "beta_hat": fit.beta_hat,
            "t_star": fit.t_star,
        }),
    );
    if cfg.model.name == ModelName::ExampleE1 && cfg.lyapunov == crate::config::LyapunovChoice::E1 {
        run.stage = "e1-bound";
        let held_out = held_out_grid(&cfg.grid, cfg.grid_step);
        let seed = rng::derive_seed(cfg.seed, &[label::HELD_OUT]);
        let ho = drift_fit(model, &lyap, &held_out, cfg.n_paths, cfg.dt, seed)?;
        let r = e1_bound_check(&fit, &ho, cfg.model.k)?;
        run.verdict("closed_form_bound", r.printed_held_out_pass, serde_json::to_value(&r).unwrap_or(Value::Null));
    }
    if cfg.iterate_steps > 0 && fit.passed {
        run.stage = "iterate";
        let seed = rng::derive_seed(cfg.seed, &[label::ITERATE]);
        let r = lyapunov_iterate_check(&fit, model, &lyap, &cfg.x0, cfg.iterate_steps, cfg.n_paths, cfg.dt, seed)?;
        run.verdict("iterated_bound", r.passed, serde_json::to_value(&r).unwrap_or(Value::Null));
    }
    Ok(())
}

/// Grid points shifted by half a step toward the origin, kept inside the
/// fitted box.
fn held_out_grid(grid: &[Vec<f64>], step: f64) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = grid
        .iter()
        .filter(|p| p.iter().all(|v| v.abs() >= step))
        .map(|p| p.iter().map(|v| v - 0.5 * step * v.signum()).collect())
        .collect();
    out.dedup();
    out
}

fn rank_check(run: &mut Run, model: &SdeModel) -> Result<()> {
    let cfg = run.cfg;
    let rows = rank_grid(model, &cfg.grid, cfg.depth, &cfg.chain_options())?;
    run.stage = "write";
    run.file("rank.csv", |w| write_rank_csv(&rows, w))?;
    let d = model.dim();
    let split = |sat: bool| {
        let pts: Vec<&Vec<f64>> = rows.iter().filter(|r| r.satisfied == sat).map(|r| &r.point).collect();
        let ys = if d >= 2 { pts.iter().map(|p| p[1]).collect() } else { vec![0.0; pts.len()] };
        Series {
            label: if sat { "satisfied".into() } else { "unsatisfied".into() },
            xs: pts.iter().map(|p| p[0]).collect(),
            ys,
        }
    };
    let fig = Figure {
        title: format!("rank condition, depth {}", cfg.depth),
        x_label: "x1".into(),
        y_label: if d >= 2 { "x2".into() } else { "".into() },
        log_y: false,
        style: Style::Scatter,
        series: vec![split(true), split(false)],
    };
    run.svg("rank.svg", &fig)?;
    let unsatisfied = rows.iter().filter(|r| !r.satisfied).count();
    run.verdict(
        "rank_condition",
        unsatisfied == 0,
        json!({ "points": rows.len(), "unsatisfied": unsatisfied, "depth": cfg.depth }),
    );
    Ok(())
}

fn orey_check(run: &mut Run, model: &SdeModel) -> Result<()> {
    let cfg = run.cfg;
    let spec = model.levy.as_ref().ok_or_else(|| ErgoError::Config("orey-check needs a [levy] block".into()))?;
    let r = orey_ratio(spec, &cfg.eps_list, cfg.quad_tol)?;
    run.stage = "write";
    run.file("orey.csv", |w| {
        writeln!(w, "eps,log10_eps,ratio")?;
        for (e, q) in &r.rows {
            writeln!(w, "{e},{},{q}", e.log10())?;
        }
        Ok(())
    })?;
    run.svg(
        "orey.svg",
        &Figure {
            title: "order-condition ratio".into(),
            x_label: "log10 eps".into(),
            y_label: "ratio".into(),
            log_y: false,
            style: Style::Line,
            series: vec![Series {
                label: "ratio".into(),
                xs: r.rows.iter().map(|(e, _)| e.log10()).collect(),
                ys: r.rows.iter().map(|(_, q)| *q).collect(),
            }],
        },
    )?;
    let ratios: Vec<Value> = r.rows.iter().map(|(e, q)| json!({ "eps": e, "ratio": q })).collect();
    run.verdict("orey_condition", r.converging, json!({ "alpha_index": spec.alpha_index, "rows": ratios }));
    Ok(())
}

fn invariant_check(run: &mut Run, model: &SdeModel) -> Result<()> {
    let cfg = run.cfg;
    let proj = cfg.projection();
    let r = invariant_agreement(
        model,
        &cfg.starts,
        cfg.t_burn,
        cfg.n_paths,
        cfg.dt,
        &cfg.histogram(),
        proj.as_deref(),
        cfg.seed,
    )?;
    run.stage = "write";
    run.file("invariant.csv", |w| {
        writeln!(w, "i,j,tv,se")?;
        for i in 0..r.starts.len() {
            for j in i + 1..r.starts.len() {
                writeln!(w, "{i},{j},{},{}", r.tv[i][j], r.se[i][j])?;
            }
        }
        Ok(())
    })?;
    let passed = r.passed;
    run.verdict("invariant_agreement", passed, serde_json::to_value(&r).unwrap_or(Value::Null));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn held_out_points_stay_inside() {
        let g = crate::config::box_grid(2, 10.0, 2.5).unwrap();
        let h = held_out_grid(&g, 2.5);
        assert_eq!(h.len(), 64);
        assert!(h.iter().all(|p| p.iter().all(|v| v.abs() <= 8.75 && v.abs() >= 1.25)));
    }

    #[test]
    fn exit_codes() {
        let mut r = RunReport::failed("x", &ErgoError::Input("y".into()), Instant::now());
        assert_eq!(r.exit_code(), 1);
        r.status = Status::Fail;
        assert_eq!(r.exit_code(), 2);
        r.status = Status::Pass;
        assert_eq!(r.exit_code(), 0);
    }
}
