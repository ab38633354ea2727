//! Duty-ratio sweeps, efficiency estimation and CSV/SVG reporting.
//!
//! Each grid point is independent. With the `parallel` feature the grid is
//! evaluated on a rayon pool whose size honours `CUKBENCH_THREADS`; without
//! it, or with a single thread, points are evaluated in order. Either way the
//! rows are identical because every point is a pure function of its `k`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mna::SwitchResistances;
use crate::netlist::{Netlist, PwmSpec, TopologyId};
use crate::steadystate::{gain_formula, volt_second_solve};
use crate::transient::{self, SimParams, Trace, P_IN, P_OUT, STEADY_TOL, V_OUT};

/// Environment variable capping the number of sweep worker threads.
pub const THREADS_ENV: &str = "CUKBENCH_THREADS";

/// Which columns a sweep populates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Methods {
    pub formula: bool,
    pub averaged: bool,
    pub transient: bool,
}

impl Methods {
    pub const ALL: Methods = Methods { formula: true, averaged: true, transient: true };
    pub const FAST: Methods = Methods { formula: true, averaged: true, transient: false };
}

impl Default for Methods {
    fn default() -> Self {
        Methods::ALL
    }
}

#[derive(Debug, Clone, Default)]
pub struct SweepOptions {
    pub methods: Methods,
    /// Worker threads; `None` reads `CUKBENCH_THREADS`, falling back to the
    /// machine's parallelism. `Some(1)` forces sequential evaluation.
    pub threads: Option<usize>,
    /// Transient step; `None` uses the simulator default.
    pub dt: Option<f64>,
}

/// What a sweep was run on.
#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Builtin(TopologyId),
    Netlist(String),
}

/// One grid point. Gains are magnitudes `|V_out / V_in|`.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub k: f64,
    pub gain_formula: Option<f64>,
    pub gain_avg: Option<f64>,
    pub gain_transient: Option<f64>,
    pub efficiency: Option<f64>,
    /// Cycle at which the transient met the steady-state tolerance; `None`
    /// when it ran to the horizon (the gain then comes from the last cycle).
    pub steady_cycle: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<Row>,
    pub topology: Provenance,
    pub losses: SwitchResistances,
}

/// Evenly spaced grid from `min` to `max` inclusive (within half a step).
pub fn duty_grid(min: f64, max: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !step.is_finite() || !(max >= min) {
        return Err(Error::InvalidParams(format!("invalid duty grid {min}..{max} step {step}")));
    }
    let n = ((max - min) / step + 1e-9).floor() as usize;
    // round to suppress accumulated representation noise, e.g. 0.30000000000000004
    Ok((0..=n).map(|i| ((min + i as f64 * step) * 1e12).round() / 1e12).collect())
}

/// Transient horizon used by sweeps: `200·T/(1−k)`.
pub fn transient_horizon(pwm: &PwmSpec, k: f64) -> f64 {
    200.0 * pwm.period() / (1.0 - k)
}

/// Runs every requested method at each duty ratio of `k_grid`.
pub fn sweep_duty(
    netlist: &Netlist,
    pwm: &PwmSpec,
    k_grid: &[f64],
    options: &SweepOptions,
    r: &SwitchResistances,
) -> Result<SweepResult> {
    if k_grid.is_empty() {
        return Err(Error::InvalidParams("empty duty grid".into()));
    }
    if let Some(&k) = k_grid.iter().find(|k| !(**k > 0.0 && **k < 1.0)) {
        return Err(Error::InvalidDuty(k));
    }
    let mut grid = k_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    if grid.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidParams("duty grid contains duplicate values".into()));
    }
    netlist.validate()?;
    r.validate()?;
    let id = TopologyId::from_netlist(netlist);
    let point = |k: f64| evaluate(netlist, pwm, id, k, options, r).map_err(|e| Error::AtDuty { k, source: Box::new(e) });
    let rows = run_grid(&grid, threads(options), point)?;
    Ok(SweepResult {
        rows,
        topology: id.map_or_else(|| Provenance::Netlist(netlist.title.clone()), Provenance::Builtin),
        losses: *r,
    })
}

fn threads(options: &SweepOptions) -> usize {
    options
        .threads
        .or_else(|| std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse().ok()))
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[cfg(feature = "parallel")]
fn run_grid<F>(grid: &[f64], threads: usize, point: F) -> Result<Vec<Row>>
where
    F: Fn(f64) -> Result<Row> + Sync,
{
    use rayon::prelude::*;
    if threads <= 1 || grid.len() == 1 {
        return grid.iter().map(|&k| point(k)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidParams(format!("cannot start worker pool: {e}")))?;
    pool.install(|| grid.par_iter().map(|&k| point(k)).collect())
}

#[cfg(not(feature = "parallel"))]
fn run_grid<F>(grid: &[f64], _threads: usize, point: F) -> Result<Vec<Row>>
where
    F: Fn(f64) -> Result<Row>,
{
    grid.iter().map(|&k| point(k)).collect()
}

fn evaluate(
    netlist: &Netlist,
    pwm: &PwmSpec,
    id: Option<TopologyId>,
    k: f64,
    options: &SweepOptions,
    r: &SwitchResistances,
) -> Result<Row> {
    let m = options.methods;
    let mut row = Row { k, gain_formula: None, gain_avg: None, gain_transient: None, efficiency: None, steady_cycle: None };
    if m.formula {
        if let Some(id) = id {
            row.gain_formula = Some(gain_formula(id, k)?.abs());
        }
    }
    let averaged = if m.averaged || m.transient { Some(volt_second_solve(netlist, k, r, None)?) } else { None };
    if m.averaged {
        row.gain_avg = averaged.as_ref().map(|ss| ss.gain_mag);
    }
    if m.transient {
        let v_in = netlist.v_in().ok_or_else(|| Error::Input("netlist has no DC source".into()))?;
        let pwm = PwmSpec { duty: k, ..pwm.clone() };
        let mut params = SimParams::new(transient_horizon(&pwm, k));
        params.dt = options.dt;
        params.record = Some(vec![]);
        params.stop_when_steady = Some(STEADY_TOL);
        // start on the switched periodic orbit found by shooting from the
        // averaged point; the transient then confirms it within a few cycles
        if let Some(ss) = &averaged {
            let orbit = transient::periodic_steady_state(netlist, &pwm, &params, r, &ss.state_vector(netlist))?;
            params.warm_start = Some(orbit.state);
        }
        let trace = transient::simulate(netlist, &pwm, &params, r)?;
        row.gain_transient = Some((trace.last_cycle_average(V_OUT)? / v_in).abs());
        row.steady_cycle = trace.meta.get("steady_cycle").and_then(|c| c.parse().ok());
        if row.steady_cycle.is_some() {
            row.efficiency = Some(efficiency(&trace)?);
        }
    }
    Ok(row)
}

/// Cycle-averaged load power over cycle-averaged source power, taken over
/// the last complete cycle of a trace that reached periodic steady state.
pub fn efficiency(trace: &Trace) -> Result<f64> {
    if !trace.meta.contains_key("steady_cycle") && transient::detect_steady_state(trace, STEADY_TOL).is_none() {
        return Err(Error::NoSteadyState);
    }
    let p_out = trace.last_cycle_average(P_OUT)?;
    let p_in = trace.last_cycle_average(P_IN)?;
    if !(p_in > 0.0) {
        return Err(Error::Input(format!("source delivers no power (P_in = {p_in:e})")));
    }
    Ok(p_out / p_in)
}

/// Formats `v` with at most 9 significant digits.
pub fn format_number(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    let rounded: f64 = format!("{v:.8e}").parse().unwrap_or(v);
    if rounded == 0.0 {
        return "0".into();
    }
    let exp = rounded.abs().log10().floor();
    if (-5.0..16.0).contains(&exp) {
        rounded.to_string()
    } else {
        format!("{rounded:e}")
    }
}

/// Anything that can be written as a CSV table.
pub trait CsvTable {
    fn header(&self) -> Vec<String>;
    fn records(&self) -> Vec<Vec<String>>;
}

fn cell(v: Option<f64>) -> String {
    v.map(format_number).unwrap_or_default()
}

impl CsvTable for SweepResult {
    fn header(&self) -> Vec<String> {
        ["k", "gain_formula", "gain_avg", "gain_transient", "efficiency"].map(String::from).to_vec()
    }

    fn records(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| vec![format_number(r.k), cell(r.gain_formula), cell(r.gain_avg), cell(r.gain_transient), cell(r.efficiency)])
            .collect()
    }
}

impl CsvTable for Trace {
    fn header(&self) -> Vec<String> {
        std::iter::once("t".to_string()).chain(self.signals.keys().cloned()).collect()
    }

    fn records(&self) -> Vec<Vec<String>> {
        (0..self.n_samples)
            .map(|i| {
                std::iter::once(format_number(i as f64 * self.dt))
                    .chain(self.signals.values().map(|s| s.get(i).map(|&v| format_number(v)).unwrap_or_default()))
                    .collect()
            })
            .collect()
    }
}

/// Renders a table as CSV text.
pub fn to_csv<T: CsvTable + ?Sized>(table: &T) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(table.header()).map_err(io)?;
    for rec in table.records() {
        w.write_record(rec).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("CSV output is UTF-8"))
}

/// Writes a table as CSV to `path`.
pub fn export_csv<T: CsvTable + ?Sized>(table: &T, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_csv(table)?)?;
    Ok(())
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;

/// Gain magnitude versus duty ratio as a self-contained SVG document, one
/// polyline per populated column. Output depends only on `result`.
pub fn render_plot(result: &SweepResult) -> Result<String> {
    let rows = &result.rows;
    if rows.len() < 2 {
        return Err(Error::InvalidParams(format!("a plot needs at least 2 rows, got {}", rows.len())));
    }
    type Column = (&'static str, &'static str, fn(&Row) -> Option<f64>);
    let columns: [Column; 3] = [
        ("formula", "#1f77b4", |r| r.gain_formula),
        ("averaged", "#d62728", |r| r.gain_avg),
        ("transient", "#2ca02c", |r| r.gain_transient),
    ];
    type Series<'a> = (&'a str, &'a str, Vec<(f64, f64)>);
    let series: Vec<Series> = columns
        .iter()
        .filter_map(|(name, color, get)| {
            let pts: Vec<(f64, f64)> = rows.iter().filter_map(|r| get(r).map(|g| (r.k, g))).collect();
            (!pts.is_empty()).then_some((*name, *color, pts))
        })
        .collect();

    let (k0, k1) = (rows[0].k, rows[rows.len() - 1].k);
    let y_max = series.iter().flat_map(|s| s.2.iter().map(|p| p.1)).fold(0.0, f64::max);
    let y_top = nice_ceiling(y_max);
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let sx = |k: f64| LEFT + (k - k0) / (k1 - k0) * plot_w;
    let sy = |g: f64| TOP + plot_h - g / y_top * plot_h;

    let title = match &result.topology {
        Provenance::Builtin(id) => id.name().to_string(),
        Provenance::Netlist(t) => t.clone(),
    };
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{} gain vs duty ratio</text>"#,
        LEFT + plot_w / 2.0,
        escape(&title)
    );
    for r in rows {
        let x = sx(r.k);
        let _ = writeln!(s, r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/>"#, TOP + plot_h, TOP + plot_h + 5.0);
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="11">{}</text>"#,
            TOP + plot_h + 18.0,
            format_number(r.k)
        );
    }
    let ticks = 5;
    for i in 0..=ticks {
        let g = y_top * i as f64 / ticks as f64;
        let y = sy(g);
        let _ = writeln!(s, r#"<line x1="{:.2}" y1="{y:.2}" x2="{LEFT}" y2="{y:.2}" stroke="black"/>"#, LEFT - 5.0);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-family="sans-serif" font-size="11">{}</text>"#,
            LEFT - 8.0,
            y + 4.0,
            format_number(g)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="12">duty ratio k</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 16 {:.2})">|Vout/Vin|</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );
    for (i, (name, color, pts)) in series.iter().enumerate() {
        let points: Vec<String> = pts.iter().map(|&(k, g)| format!("{:.2},{:.2}", sx(k), sy(g))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, points.join(" "));
        let ly = TOP + 20.0 + 20.0 * i as f64;
        let lx = WIDTH - RIGHT + 15.0;
        let _ = writeln!(s, r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#, lx + 25.0);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12">{name}</text>"#,
            lx + 32.0,
            ly + 4.0
        );
    }
    // label the final point of the first series with its value
    if let Some((_, _, pts)) = series.first() {
        let &(k, g) = pts.last().expect("series are non-empty");
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-family="sans-serif" font-size="11">{}</text>"#,
            sx(k) - 4.0,
            sy(g) - 6.0,
            format_number((g * 1000.0).round() / 1000.0)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn nice_ceiling(v: f64) -> f64 {
    if !(v > 0.0) {
        return 1.0;
    }
    let mag = 10f64.powf(v.log10().floor());
    [1.0, 2.0, 2.5, 5.0, 10.0].iter().map(|m| m * mag).find(|&c| c >= v).unwrap_or(10.0 * mag)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_ceiling_steps() {
        assert_eq!(nice_ceiling(0.0), 1.0);
        assert_eq!(nice_ceiling(3.2), 5.0);
        assert_eq!(nice_ceiling(10.0), 10.0);
        assert_eq!(nice_ceiling(21.0), 25.0);
        assert_eq!(nice_ceiling(29.0), 50.0);
    }

    #[test]
    fn text_is_escaped() {
        assert_eq!(escape("a<b & \"c\">"), "a&lt;b &amp; &quot;c&quot;&gt;");
    }
}
