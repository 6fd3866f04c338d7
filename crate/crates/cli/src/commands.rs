//! One function per subcommand.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use critinit::activations::Activation;
use critinit::analysis::{self, GridAxis};
use critinit::critical;
use critinit::ensemble::{self, EnsembleConfig, InputMode, InputSource, Model, Normalization, Sampler};
use critinit::exec::Execution;
use critinit::meanfield::{self, Hyper, NormMode, NtkConvention, TraceOptions};
use serde_json::Value;

use crate::args::*;
use crate::output::{header, num, report, Csv};
use crate::Failure;

type Out = Result<(), Failure>;

fn need<T>(v: Option<T>, flag: &str) -> Result<T, Failure> {
    v.ok_or_else(|| Failure::Usage(format!("the argument '--{flag}' is required")))
}

fn parse<T: std::str::FromStr<Err = critinit::Error>>(s: &str) -> Result<T, Failure> {
    s.parse().map_err(|e: critinit::Error| Failure::Usage(e.to_string()))
}

fn activation(a: &Option<String>) -> Result<Activation, Failure> {
    parse(need(a.as_deref(), "act")?)
}

fn hyper(m: &ModelArgs) -> Result<Hyper, Failure> {
    let sw = need(m.sw, "sw")?;
    Ok(Hyper::new(sw, m.sb))
}

fn stdout() -> BufWriter<io::StdoutLock<'static>> {
    BufWriter::new(io::stdout().lock())
}

fn create(path: &PathBuf) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

pub fn theory_trace(a: TraceArgs) -> Out {
    let act = activation(&a.model.act)?;
    let mode: NormMode = parse(&a.model.mode)?;
    let hp = hyper(&a.model)?;
    let depth = need(a.depth, "depth")?;
    let ntk: NtkConvention = parse(&a.ntk)?;
    let k1 = a.k1.unwrap_or(hp.weight_var * a.q + hp.bias_var);
    let opts = TraceOptions { ntk, ..TraceOptions::default() };
    let t = meanfield::trace_with(act, mode, hp, depth, k1, a.l0, &opts)?;
    let mut csv = Csv::new(stdout(), &header("theory-trace", &a)?, &["l", "K", "chi_j", "chi_delta", "J", "Theta"])?;
    for l in 1..=t.layers() {
        csv.row(&[l.into(), t.k(l).into(), t.chi(l).into(), t.chi_delta[l - 1].into(), t.j(l).into(), t.ntk(l).into()])?;
    }
    csv.finish()?;
    if let Some(l) = t.diverged_at {
        eprintln!("warning: trace diverged at layer {l}");
    }
    Ok(())
}

pub fn critical(a: CriticalArgs, exec: Execution) -> Out {
    let act = activation(&a.act)?;
    let mode: NormMode = parse(&a.mode)?;
    if a.point == a.line {
        return Err(Failure::Usage("pass exactly one of '--point' or '--line'".into()));
    }
    let points: Vec<critical::CriticalLinePoint> = if a.point {
        critical::critical_point(act, mode)?
    } else {
        let sweep = GridAxis::new(a.sw_min, a.sw_max, a.n).values();
        critical::critical_line_with(act, mode, &sweep, a.tol, exec)
            .into_iter()
            .flat_map(|s| s.points)
            .collect()
    };
    let cols = ["sigma_w", "sigma_b", "slope", "k_star", "chi_k_star", "residual"];
    let mut csv = Csv::new(stdout(), &header("critical", &a)?, &cols)?;
    for p in points {
        csv.row(&[p.sigma_w.into(), p.sigma_b.into(), (p.sigma_b / p.sigma_w).into(), p.k_star.into(), p.chi_k_star.into(), p.residual.into()])?;
    }
    Ok(csv.finish()?)
}

pub fn phase_diagram(a: PhaseArgs, exec: Execution) -> Out {
    let act = activation(&a.act)?;
    let mode: NormMode = parse(&a.mode)?;
    let grid = analysis::phase_grid_with(
        act,
        mode,
        GridAxis::new(a.sw_min, a.sw_max, a.nw),
        GridAxis::new(a.sb_min, a.sb_max, a.nb),
        exec,
    )?;
    let head = header("phase-diagram", &a)?;
    let mut csv = Csv::new(stdout(), &head, &["sigma_w2", "sigma_b2", "chi"])?;
    for (i, w) in grid.sigma_w.iter().enumerate() {
        for (j, b) in grid.sigma_b.iter().enumerate() {
            csv.row(&[(w * w).into(), (b * b).into(), grid.get(i, j).into()])?;
        }
    }
    csv.finish()?;
    if let Some(path) = &a.contour {
        let mut csv = Csv::new(create(path)?, &head, &["sigma_w", "sigma_b"])?;
        for p in grid.contour() {
            csv.row(&[p.sigma_w.into(), p.sigma_b.into()])?;
        }
        csv.finish()?;
    }
    Ok(())
}

fn ensemble_config(c: &McCommon, exec: Execution) -> Result<EnsembleConfig, Failure> {
    let act = activation(&c.model.act)?;
    let mode: NormMode = parse(&c.model.mode)?;
    let norm = Normalization { mode, groups: c.groups };
    let model = Model { act, hyper: hyper(&c.model)?, norm };
    let mut cfg = EnsembleConfig::new(model, c.width, c.depth);
    cfg.input_dim = c.input_dim.unwrap_or(c.width);
    cfg.n_init = c.n_init;
    cfg.seed = c.seed;
    cfg.input = match &c.input_file {
        Some(p) => InputSource::File(p.clone()),
        None => InputSource::Gaussian { mean: c.input_mean, std: c.input_std },
    };
    cfg.input_mode = if c.per_init_input { InputMode::PerInit } else { InputMode::Shared };
    cfg.sampler = match c.sampler.as_str() {
        "dense" => Sampler::Dense,
        "projected" => Sampler::Projected,
        s => return Err(Failure::Usage(format!("unknown sampler '{s}'"))),
    };
    cfg.exec = exec;
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn emit(text: String) -> Out {
    let mut out = stdout();
    writeln!(out, "{text}")?;
    Ok(out.flush()?)
}

/// Theory value, or NaN when the theory has none here.
fn theory<E>(r: Result<f64, E>) -> f64 {
    r.unwrap_or(f64::NAN)
}

pub fn mc_chi(a: McChiArgs, exec: Execution) -> Out {
    let cfg = ensemble_config(&a.common, exec)?;
    let est = ensemble::empirical_chi(&cfg)?;
    let m = cfg.model;
    let chi = theory(critical::chi_star(m.act, m.norm.mode, m.hyper, cfg.first_kernel()?));
    emit(report(
        "mc chi",
        &a,
        vec![
            ("l0", est.l0.into()),
            ("n", est.n.into()),
            ("mean", num(est.mean)),
            ("stderr", num(est.stderr)),
            ("chi_star", num(chi)),
            ("rel_err", num((est.mean - chi).abs() / chi)),
        ],
    )?)
}

pub fn mc_profile(a: McProfileArgs, exec: Execution) -> Out {
    let cfg = ensemble_config(&a.common, exec)?;
    let est = ensemble::jacobian_profile(&cfg, a.l0)?;
    let m = cfg.model;
    let tr = meanfield::trace(m.act, m.norm.mode, m.hyper, cfg.depth, cfg.first_kernel()?, a.l0).ok();
    if let Some(path) = &a.csv {
        let mut csv = Csv::new(create(path)?, &header("mc profile", &a)?, &["l", "J", "stderr", "J_theory"])?;
        for (i, e) in est.per_layer.iter().flatten().enumerate() {
            let l = a.l0 + 1 + i;
            csv.row(&[l.into(), e.mean.into(), e.stderr.into(), tr.as_ref().and_then(|t| t.j(l)).into()])?;
        }
        csv.finish()?;
    }
    emit(report(
        "mc profile",
        &a,
        vec![
            ("l0", est.l0.into()),
            ("n", est.n.into()),
            ("mean", num(est.mean)),
            ("stderr", num(est.stderr)),
            ("theory", num(tr.and_then(|t| t.j(cfg.depth)).unwrap_or(f64::NAN))),
        ],
    )?)
}

pub fn mc_ntk(a: McNtkArgs, exec: Execution) -> Out {
    let cfg = ensemble_config(&a.common, exec)?;
    let est = ensemble::ntk_ensemble(&cfg, a.allow_large)?;
    let m = cfg.model;
    let tr = meanfield::trace(m.act, m.norm.mode, m.hyper, cfg.depth, cfg.first_kernel()?, 0);
    let th = theory(tr.map(|t| t.ntk(cfg.depth).unwrap_or(f64::NAN)));
    emit(report(
        "mc ntk",
        &a,
        vec![("n", est.n.into()), ("mean", num(est.mean)), ("stderr", num(est.stderr)), ("theory", num(th))],
    )?)
}

pub fn mc_n0check(a: McN0Args, exec: Execution) -> Out {
    let cfg = ensemble_config(&a.common, exec)?;
    let r = ensemble::n0_correction_check(&cfg)?;
    emit(report(
        "mc n0check",
        &a,
        vec![
            ("n", r.measured.n.into()),
            ("measured", num(r.measured.mean)),
            ("stderr", num(r.measured.stderr)),
            ("corrected_pred", num(r.corrected_pred)),
            ("uncorrected_pred", num(r.uncorrected_pred)),
            ("corrected_rel_err", num(r.corrected_rel_err)),
            ("uncorrected_rel_err", num(r.uncorrected_rel_err)),
            ("corrected_closer", Value::Bool(r.corrected_rel_err < r.uncorrected_rel_err)),
        ],
    )?)
}

/// (layer, value) pairs from a CSV with `#` comments and a header row.
fn read_series(path: &PathBuf, column: Option<&str>) -> Result<Vec<(usize, f64)>, Failure> {
    let bad = |msg: String| Failure::Runtime(format!("{}: {msg}", path.display()));
    let text = std::fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    let head: Vec<&str> = lines.next().ok_or_else(|| bad("no header row".into()))?.split(',').collect();
    let col = match column {
        Some(name) => head.iter().position(|h| h.trim() == name).ok_or_else(|| bad(format!("no column '{name}'")))?,
        None => head.iter().position(|h| h.trim() == "J").unwrap_or(1),
    };
    let mut out = Vec::new();
    for line in lines {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let (Some(l), Some(v)) = (cells.first(), cells.get(col)) else {
            return Err(bad(format!("short row '{line}'")));
        };
        if v.is_empty() {
            continue;
        }
        let l: usize = l.parse().map_err(|_| bad(format!("bad layer '{l}'")))?;
        let v: f64 = v.parse().map_err(|_| bad(format!("bad value '{v}'")))?;
        out.push((l, v));
    }
    Ok(out)
}

pub fn fit(a: FitArgs) -> Out {
    let path = need(a.input.clone(), "input")?;
    let series = read_series(&path, a.column.as_deref())?;
    let fields = |f: &analysis::FitResult| {
        vec![
            ("slope", num(f.slope)),
            ("intercept", num(f.intercept)),
            ("stderr_slope", num(f.stderr_slope)),
            ("l_first", f.window.0.into()),
            ("l_last", f.window.1.into()),
            ("r_squared", num(f.r_squared)),
        ]
    };
    let mut out = match a.kind.as_str() {
        "power" => {
            let f = analysis::fit_power_law(&series, a.l_min)?;
            let mut v = fields(&f);
            v.push(("zeta", num(-f.slope)));
            v
        }
        "exp" => {
            let e = analysis::fit_exponential(&series, a.l_min)?;
            let mut v = fields(&e.fit);
            v.push(("xi", num(e.xi)));
            v.push(("phase", Value::String(format!("{:?}", e.phase).to_lowercase())));
            v
        }
        k => return Err(Failure::Usage(format!("unknown fit kind '{k}'"))),
    };
    out.insert(0, ("series_points", series.len().into()));
    emit(report("fit", &a, out)?)
}
