//! The `cukbench` command line.
//!
//! Exit status: 0 on success, 1 for usage and input errors, 2 when a solver
//! or simulation fails.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::PathBuf;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use cukbench_core::error::Error as CoreError;
use cukbench_core::netlist::{Kind, OVERRIDE_KEYS};
use cukbench_core::sweep::{self, duty_grid, to_csv, transient_horizon, Methods, SweepOptions};
use cukbench_core::transient::{STEADY_TOL, V_OUT};
use cukbench_core::{
    builtin, gain_formula, parse_netlist, render_plot, serialize_netlist, simulate, sweep_duty, volt_second_solve,
    Netlist, PwmSpec, SimParams, SwitchResistances, TopologyId,
};

#[derive(Debug, Parser)]
#[command(name = "cukbench", version, about = "Simulate and analyse high-gain Ćuk-derived DC-DC converters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// List built-in topologies and their gain formulas.
    List,
    /// Print the canonical netlist of a circuit.
    Show(Circuit),
    /// Solve the averaged steady state.
    Ss(SsArgs),
    /// Run a PWM transient simulation.
    Sim(SimArgs),
    /// Sweep the duty ratio.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
    Svg,
}

#[derive(Debug, Args)]
pub struct Circuit {
    /// Built-in topology name (see `list`).
    #[arg(long, conflicts_with = "netlist", required_unless_present = "netlist")]
    pub topology: Option<String>,
    /// Netlist file.
    #[arg(long)]
    pub netlist: Option<PathBuf>,
    /// Duty ratio k in (0, 1).
    #[arg(long)]
    pub duty: Option<f64>,
    /// Switching frequency in Hz.
    #[arg(long)]
    pub freq: Option<f64>,
    /// Input voltage in V.
    #[arg(long)]
    pub vin: Option<f64>,
    /// Load resistance in ohms.
    #[arg(long)]
    pub rload: Option<f64>,
}

#[derive(Debug, Args)]
pub struct Losses {
    /// Use the lossy element preset instead of ideal elements.
    #[arg(long)]
    pub losses: bool,
    /// Switch and diode on-resistance (implies --losses).
    #[arg(long)]
    pub r_on: Option<f64>,
    /// Diode forward drop (implies --losses).
    #[arg(long)]
    pub vf: Option<f64>,
    /// Capacitor series resistance (implies --losses).
    #[arg(long)]
    pub esr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SsArgs {
    #[command(flatten)]
    pub circuit: Circuit,
    #[command(flatten)]
    pub losses: Losses,
    /// Output format (default: text for ss, csv otherwise).
    #[arg(long)]
    pub format: Option<Format>,
    /// Write output to this file instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimArgs {
    #[command(flatten)]
    pub circuit: Circuit,
    #[command(flatten)]
    pub losses: Losses,
    /// Simulated time in s; defaults to the sweep horizon 200·T/(1−k).
    #[arg(long)]
    pub t_end: Option<f64>,
    /// Time step in s; defaults to T/1000.
    #[arg(long)]
    pub dt: Option<f64>,
    /// Output format (default: text for ss, csv otherwise).
    #[arg(long)]
    pub format: Option<Format>,
    /// Write output to this file instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub circuit: Circuit,
    #[command(flatten)]
    pub losses: Losses,
    #[arg(long, default_value_t = 0.1)]
    pub k_min: f64,
    #[arg(long, default_value_t = 0.9)]
    pub k_max: f64,
    #[arg(long, default_value_t = 0.1)]
    pub k_step: f64,
    /// Columns to compute.
    #[arg(long, value_delimiter = ',', default_value = "formula,averaged,transient")]
    pub methods: Vec<Method>,
    /// Transient time step in s.
    #[arg(long)]
    pub dt: Option<f64>,
    /// Output format (default: text for ss, csv otherwise).
    #[arg(long)]
    pub format: Option<Format>,
    /// Write output to this file instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Formula,
    Averaged,
    Transient,
}

/// Why a command failed; decides the exit status.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Solver(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Solver(_) => 2,
        }
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

/// Classifies a library error: malformed input is a usage error, anything
/// raised while solving is a solver error.
fn core(e: CoreError) -> Failure {
    let input = match &e {
        CoreError::AtDuty { source, .. } => is_input(source),
        other => is_input(other),
    };
    if input {
        Failure::Usage(e.into())
    } else {
        Failure::Solver(e.into())
    }
}

fn is_input(e: &CoreError) -> bool {
    use CoreError::*;
    matches!(
        e,
        MalformedNumber(_)
            | UnknownSuffix(_)
            | EmptyNetlist
            | Syntax { .. }
            | UnknownPrefix { .. }
            | DuplicateName(_)
            | MissingGround
            | FloatingNode(_)
            | InvalidValue { .. }
            | UnknownOverride(_)
            | OverrideRange { .. }
            | UnknownTopology(_)
            | InvalidDuty(_)
            | InvalidParams(_)
            | UnknownSignal(_)
            | Input(_)
    )
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(text) => {
            let mut out = std::io::stdout().lock();
            let _ = out.write_all(text.as_bytes());
            let _ = out.flush();
            0
        }
        Err(f) => {
            let (Failure::Usage(e) | Failure::Solver(e)) = &f;
            eprintln!("error: {e:#}");
            f.code()
        }
    }
}

/// Runs a parsed command, returning what it prints on stdout.
pub fn execute(cli: &Cli) -> Result<String, Failure> {
    match &cli.command {
        Command::List => Ok(list()),
        Command::Show(c) => {
            let (net, _) = load(c)?;
            Ok(serialize_netlist(&net))
        }
        Command::Ss(a) => ss(a),
        Command::Sim(a) => sim(a),
        Command::Sweep(a) => sweep_cmd(a),
    }
}

fn list() -> String {
    let mut s = String::new();
    for id in TopologyId::ALL {
        let _ = writeln!(s, "{:<14} M(k) = {}", id.name(), id.formula_text());
    }
    s
}

/// Resolves the circuit and its PWM schedule, applying command-line overrides.
fn load(c: &Circuit) -> Result<(Netlist, PwmSpec), Failure> {
    if let Some(name) = &c.topology {
        let id: TopologyId = name.parse().map_err(core)?;
        let mut ov = BTreeMap::new();
        for (key, v) in [("duty", c.duty), ("freq", c.freq), ("vin", c.vin), ("rload", c.rload)] {
            debug_assert!(OVERRIDE_KEYS.contains(&key));
            if let Some(v) = v {
                ov.insert(key.to_string(), v);
            }
        }
        return builtin(id, &ov).map_err(core);
    }
    let path = c.netlist.as_ref().expect("clap enforces one circuit source");
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(usage)?;
    let mut net = parse_netlist(&text).map_err(core)?;
    if let Some(v) = c.vin {
        let src = net
            .components
            .iter_mut()
            .find(|x| matches!(x.kind, Kind::DcSource(_)))
            .ok_or_else(|| usage(anyhow!("--vin given but the netlist has no DC source")))?;
        src.kind = Kind::DcSource(v);
    }
    if let Some(v) = c.rload {
        let name = net.load().map(|l| l.name.clone()).ok_or_else(|| usage(anyhow!("--rload given but the netlist has no resistor")))?;
        let load = net.components.iter_mut().find(|x| x.name == name).expect("load exists");
        load.kind = Kind::Resistor(v);
    }
    let pwm = match (&net.pwm, c.freq, c.duty) {
        (Some(p), f, d) => PwmSpec { freq_hz: f.unwrap_or(p.freq_hz), duty: d.unwrap_or(p.duty), ..p.clone() },
        (None, Some(f), Some(d)) => {
            let gate = net
                .components
                .iter()
                .find_map(|x| match &x.kind {
                    Kind::Switch { gate } => Some(gate.clone()),
                    _ => None,
                })
                .ok_or_else(|| usage(anyhow!("netlist has no switch")))?;
            PwmSpec { freq_hz: f, duty: d, gate_name: gate }
        }
        (None, ..) => return Err(usage(anyhow!("netlist has no .pwm directive; pass --freq and --duty"))),
    };
    pwm.validate().map_err(core)?;
    net.pwm = Some(pwm.clone());
    net.validate().map_err(core)?;
    Ok((net, pwm))
}

fn resistances(l: &Losses) -> Result<SwitchResistances, Failure> {
    let lossy = l.losses || l.r_on.is_some() || l.vf.is_some() || l.esr.is_some();
    let mut r = if lossy { SwitchResistances::lossy() } else { SwitchResistances::ideal() };
    if let Some(v) = l.r_on {
        r.r_on = v;
    }
    if let Some(v) = l.vf {
        r.diode_vf = v;
    }
    if let Some(v) = l.esr {
        r.cap_esr = v;
    }
    r.validate().map_err(core)?;
    Ok(r)
}

fn emit(text: String, out: &Option<PathBuf>) -> Result<String, Failure> {
    match out {
        Some(path) => {
            std::fs::write(path, text).with_context(|| format!("writing {}", path.display())).map_err(Failure::Solver)?;
            Ok(String::new())
        }
        None => Ok(text),
    }
}

fn formula(net: &Netlist, k: f64) -> Option<f64> {
    TopologyId::from_netlist(net).and_then(|id| gain_formula(id, k).ok()).map(f64::abs)
}

fn ss(a: &SsArgs) -> Result<String, Failure> {
    let (net, pwm) = load(&a.circuit)?;
    let r = resistances(&a.losses)?;
    let k = pwm.duty;
    let s = volt_second_solve(&net, k, &r, None).map_err(core)?;
    let text = match a.format {
        Some(Format::Svg) => return Err(usage(anyhow!("ss supports --format csv or json"))),
        Some(Format::Json) => {
            let v = json!({
                "topology": net.title,
                "k": k,
                "gain_formula": formula(&net, k),
                "gain_avg": s.gain_mag,
                "gain_transient": Value::Null,
                "efficiency": Value::Null,
                "v_in": s.v_in,
                "v_out": s.v_out,
                "v_cap": s.v_cap,
                "i_ind": s.i_ind,
                "configs": { "on": s.phase_configs[0].describe(), "off": s.phase_configs[1].describe() },
            });
            serde_json::to_string_pretty(&v).expect("JSON values serialize") + "\n"
        }
        Some(Format::Csv) => {
            let mut t = String::from("quantity,value\n");
            let _ = writeln!(t, "k,{}", sweep::format_number(k));
            let _ = writeln!(t, "gain,{}", sweep::format_number(s.gain_mag));
            let _ = writeln!(t, "v_out,{}", sweep::format_number(s.v_out));
            for (n, v) in &s.v_cap {
                let _ = writeln!(t, "V({n}),{}", sweep::format_number(*v));
            }
            for (n, v) in &s.i_ind {
                let _ = writeln!(t, "I({n}),{}", sweep::format_number(*v));
            }
            t
        }
        None => {
            let mut t = String::new();
            let _ = writeln!(t, "topology      {}", net.title);
            let _ = writeln!(t, "duty k        {k}");
            if let Some(g) = formula(&net, k) {
                let _ = writeln!(t, "gain formula  {g:.3}");
            }
            let _ = writeln!(t, "gain          {:.3}", s.gain_mag);
            let _ = writeln!(t, "V_in          {:.6} V", s.v_in);
            let _ = writeln!(t, "V_out         {:.6} V", s.v_out);
            let _ = writeln!(t, "ON  phase     {}", s.phase_configs[0].describe());
            let _ = writeln!(t, "OFF phase     {}", s.phase_configs[1].describe());
            for (n, v) in &s.v_cap {
                let _ = writeln!(t, "{:<14}{v:>12.6} V", format!("V({n})"));
            }
            for (n, v) in &s.i_ind {
                let _ = writeln!(t, "{:<14}{v:>12.6} A", format!("I({n})"));
            }
            t
        }
    };
    emit(text, &a.out)
}

fn sim(a: &SimArgs) -> Result<String, Failure> {
    let (net, pwm) = load(&a.circuit)?;
    let r = resistances(&a.losses)?;
    let k = pwm.duty;
    let mut params = SimParams::new(a.t_end.unwrap_or_else(|| transient_horizon(&pwm, k)));
    params.dt = a.dt;
    let format = a.format.unwrap_or(Format::Csv);
    if format == Format::Svg {
        return Err(usage(anyhow!("sim supports --format csv or json")));
    }
    if format == Format::Json {
        // the summary only needs per-cycle means
        params.record = Some(vec![]);
    }
    let trace = simulate(&net, &pwm, &params, &r).map_err(core)?;
    let text = match format {
        Format::Json => {
            let v_in = net.v_in().unwrap_or(f64::NAN);
            let gain = trace.last_cycle_average(V_OUT).ok().map(|v| (v / v_in).abs());
            let steady = trace.meta.contains_key("steady_cycle")
                || cukbench_core::detect_steady_state(&trace, STEADY_TOL).is_some();
            let eff = if steady { sweep::efficiency(&trace).ok() } else { None };
            let last = trace.complete_cycles().checked_sub(1);
            let mean = |label: &str| last.and_then(|c| cukbench_core::cycle_average(&trace, label, c).ok());
            let v_cap: BTreeMap<_, _> = net.capacitors().map(|c| (c.name.clone(), mean(&format!("V({})", c.name)))).collect();
            let i_ind: BTreeMap<_, _> = net.inductors().map(|c| (c.name.clone(), mean(&format!("I({})", c.name)))).collect();
            let v = json!({
                "topology": net.title,
                "k": k,
                "gain_formula": formula(&net, k),
                "gain_avg": Value::Null,
                "gain_transient": gain,
                "efficiency": eff,
                "steady": steady,
                "cycles": trace.complete_cycles(),
                "v_cap": v_cap,
                "i_ind": i_ind,
                "meta": trace.meta,
            });
            serde_json::to_string_pretty(&v).expect("JSON values serialize") + "\n"
        }
        _ => to_csv(&trace).map_err(core)?,
    };
    emit(text, &a.out)
}

fn sweep_cmd(a: &SweepArgs) -> Result<String, Failure> {
    let (net, pwm) = load(&a.circuit)?;
    let r = resistances(&a.losses)?;
    let grid = duty_grid(a.k_min, a.k_max, a.k_step).map_err(core)?;
    let methods = Methods {
        formula: a.methods.contains(&Method::Formula),
        averaged: a.methods.contains(&Method::Averaged),
        transient: a.methods.contains(&Method::Transient),
    };
    let options = SweepOptions { methods, threads: None, dt: a.dt };
    let result = sweep_duty(&net, &pwm, &grid, &options, &r).map_err(core)?;
    let text = match a.format.unwrap_or(Format::Csv) {
        Format::Csv => to_csv(&result).map_err(core)?,
        Format::Svg => render_plot(&result).map_err(core)?,
        Format::Json => {
            let rows: Vec<Value> = result
                .rows
                .iter()
                .map(|row| {
                    json!({
                        "k": row.k,
                        "gain_formula": row.gain_formula,
                        "gain_avg": row.gain_avg,
                        "gain_transient": row.gain_transient,
                        "efficiency": row.efficiency,
                    })
                })
                .collect();
            serde_json::to_string_pretty(&json!({ "topology": net.title, "rows": rows })).expect("JSON values serialize") + "\n"
        }
    };
    emit(text, &a.out)
}
