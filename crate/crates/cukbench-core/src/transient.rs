//! Fixed-step PWM transient simulation.
//!
//! The period is split into `N` grid steps; the gate is on for the first
//! `round(k·N)` of them. Each distinct switch configuration is assembled and
//! discretized once and then reused. Diode states are re-resolved whenever the
//! gate toggles or the active configuration stops satisfying the diode
//! complementarity conditions.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mna::{self, StateSpaceModel, SwitchConfig, SwitchResistances};
use crate::netlist::{Kind, Netlist, PwmSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Integrator {
    #[default]
    Trapezoidal,
    BackwardEuler,
}

/// Derived signal: voltage across the load.
pub const V_OUT: &str = "V(out)";
/// Derived signal: current through the load.
pub const I_OUT: &str = "I(out)";
/// Derived signal: power dissipated in the load.
pub const P_OUT: &str = "P(out)";
/// Derived signal: power delivered by the first source's EMF.
pub const P_IN: &str = "P(in)";
/// Gate drive, 1 while the switch is commanded on.
pub const GATE: &str = "gate";

#[derive(Debug, Clone)]
pub struct SimParams {
    pub t_end: f64,
    /// Step size; `None` means `T/1000`.
    pub dt: Option<f64>,
    pub integrator: Integrator,
    /// Signals to sample at every step; `None` records all states, `V(out)`
    /// and `gate`. Per-cycle averages are kept for every signal regardless.
    pub record: Option<Vec<String>>,
    /// Initial state; zeros when absent.
    pub warm_start: Option<Vec<f64>>,
    /// Stop once [`detect_steady_state`] would succeed with this tolerance.
    pub stop_when_steady: Option<f64>,
}

impl SimParams {
    pub fn new(t_end: f64) -> Self {
        SimParams { t_end, dt: None, integrator: Integrator::Trapezoidal, record: None, warm_start: None, stop_when_steady: None }
    }
}

#[derive(Debug, Clone)]
pub struct Trace {
    pub dt: f64,
    pub signals: BTreeMap<String, Vec<f64>>,
    pub pwm: PwmSpec,
    pub meta: BTreeMap<String, String>,
    pub steps_per_period: usize,
    pub state_labels: Vec<String>,
    /// State at `t = c·T` for `c = 0, 1, …`.
    pub cycle_states: Vec<Vec<f64>>,
    /// Mean of every signal over each complete cycle.
    pub cycle_means: BTreeMap<String, Vec<f64>>,
    pub final_state: Vec<f64>,
    pub n_samples: usize,
    /// Configurations active at the last step of the final ON and OFF intervals.
    pub last_phase_configs: [Option<SwitchConfig>; 2],
}

impl Trace {
    pub fn complete_cycles(&self) -> usize {
        self.cycle_states.len().saturating_sub(1)
    }

    /// Mean of `signal` over the last complete cycle.
    pub fn last_cycle_average(&self, signal: &str) -> Result<f64> {
        let c = self.complete_cycles().checked_sub(1).ok_or(Error::CycleOutOfRange { cycle: 0, cycles: 0 })?;
        cycle_average(self, signal, c)
    }

    pub fn time(&self) -> Vec<f64> {
        (0..self.n_samples).map(|i| i as f64 * self.dt).collect()
    }
}

/// One integration step of `dx/dt = A·x + B·u + e`.
pub fn step(
    model: &StateSpaceModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
    integrator: Integrator,
) -> Result<DVector<f64>> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParams(format!("dt must be positive, got {dt}")));
    }
    let (phi, gamma) = discretize(model, u, dt, integrator)?;
    Ok(&phi * x + gamma)
}

// x' = Φ·x + γ
fn discretize(
    model: &StateSpaceModel,
    u: &DVector<f64>,
    dt: f64,
    integrator: Integrator,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = model.n_states();
    let a = &model.a_matrix;
    let drive = &model.b_matrix * u + &model.e_vector;
    let id = DMatrix::<f64>::identity(n, n);
    let (lhs, rhs) = match integrator {
        Integrator::Trapezoidal => (&id - a * (dt / 2.0), &id + a * (dt / 2.0)),
        Integrator::BackwardEuler => (&id - a * dt, id.clone()),
    };
    let lu = lhs.lu();
    let fail = || Error::Factorization("singular I - dt·A".into());
    let phi = lu.solve(&rhs).ok_or_else(fail)?;
    let gamma = lu.solve(&(drive * dt)).ok_or_else(fail)?;
    if phi.iter().chain(gamma.iter()).any(|v| !v.is_finite()) {
        return Err(fail());
    }
    Ok((phi, gamma))
}

struct Phase {
    model: Rc<StateSpaceModel>,
    phi: DMatrix<f64>,
    gamma: DVector<f64>,
    // constant part of every output, D·u + f
    y0: DVector<f64>,
}

struct PhaseCache<'a> {
    netlist: &'a Netlist,
    r: SwitchResistances,
    u: DVector<f64>,
    dt: f64,
    integrator: Integrator,
    index: HashMap<SwitchConfig, usize>,
    phases: Vec<Phase>,
}

impl PhaseCache<'_> {
    fn get(&mut self, config: &SwitchConfig) -> Result<usize> {
        if let Some(&i) = self.index.get(config) {
            return Ok(i);
        }
        let model = assemble(self.netlist, config, &self.r)?;
        let (phi, gamma) = discretize(&model, &self.u, self.dt, self.integrator)?;
        let y0 = &model.output_map.d * &self.u + &model.output_map.f;
        self.phases.push(Phase { model, phi, gamma, y0 });
        self.index.insert(config.clone(), self.phases.len() - 1);
        Ok(self.phases.len() - 1)
    }

    fn resolve(&mut self, start: &SwitchConfig, x: &DVector<f64>) -> Result<usize> {
        let (netlist, r, u) = (self.netlist, self.r, self.u.clone());
        let mut built: Vec<(SwitchConfig, Rc<StateSpaceModel>)> = Vec::new();
        let cfg = mna::resolve_with(netlist, start, x, &u, &r, |c| {
            if let Some(&i) = self.index.get(c) {
                return Ok(self.phases[i].model.clone());
            }
            if let Some((_, m)) = built.iter().find(|(k, _)| k == c) {
                return Ok(m.clone());
            }
            let m = assemble(netlist, c, &r)?;
            built.push((c.clone(), m.clone()));
            Ok(m)
        })?;
        self.get(&cfg)
    }
}

fn assemble(netlist: &Netlist, config: &SwitchConfig, r: &SwitchResistances) -> Result<Rc<StateSpaceModel>> {
    mna::assemble_phase(netlist, config, r).map(Rc::new)
}

// A derived signal as an affine function of the state, plus the power products.
#[derive(Clone, Copy)]
enum Signal {
    State(usize),
    Output(usize),
    VOut,
    IOut,
    POut,
    PIn,
    Gate,
}

/// Simulates the converter under its PWM schedule.
pub fn simulate(netlist: &Netlist, pwm: &PwmSpec, params: &SimParams, r: &SwitchResistances) -> Result<Trace> {
    pwm.validate()?;
    r.validate()?;
    let period = pwm.period();
    let driven = netlist
        .components
        .iter()
        .filter(|c| matches!(&c.kind, Kind::Switch { gate } if gate.eq_ignore_ascii_case(&pwm.gate_name)))
        .count();
    if driven == 0 {
        return Err(Error::InvalidParams(format!("no switch is bound to gate {:?}", pwm.gate_name)));
    }
    let mut meta = BTreeMap::new();
    let mut warnings = Vec::new();
    let requested_dt = params.dt.unwrap_or(period / 1000.0);
    if !(requested_dt > 0.0) || !requested_dt.is_finite() {
        return Err(Error::InvalidParams(format!("dt must be positive, got {requested_dt}")));
    }
    let n = (period / requested_dt).round().max(1.0) as usize;
    if n < 16 {
        return Err(Error::InvalidParams(format!("dt = {requested_dt} exceeds T/16")));
    }
    let dt = period / n as f64;
    if ((dt - requested_dt) / requested_dt).abs() > 1e-9 {
        warnings.push(format!("dt adjusted from {requested_dt:e} to {dt:e} so that it divides the period"));
    }
    if !(params.t_end >= period * (1.0 - 1e-12)) {
        return Err(Error::InvalidParams(format!("t_end = {} is shorter than one period", params.t_end)));
    }
    let on_steps = ((pwm.duty * n as f64).round() as usize).clamp(1, n - 1);
    let eff_duty = on_steps as f64 / n as f64;
    if (eff_duty - pwm.duty).abs() > 1e-12 {
        warnings.push(format!("duty {} snapped to grid value {eff_duty}", pwm.duty));
    }
    let steps = (params.t_end / dt + 1e-9).floor() as usize;

    let rr = r.regularized();
    let u = mna::input_vector(netlist);
    let labels = mna::state_labels(netlist);
    let ns = labels.len();
    let mut x = match &params.warm_start {
        Some(v) if v.len() == ns => DVector::from_column_slice(v),
        Some(v) => {
            return Err(Error::InvalidParams(format!("warm start has {} entries, expected {ns}", v.len())));
        }
        None => DVector::zeros(ns),
    };

    let mut cache = PhaseCache {
        netlist,
        r: rr,
        u: u.clone(),
        dt,
        integrator: params.integrator,
        index: HashMap::new(),
        phases: Vec::new(),
    };

    // the first configuration fixes the output label layout
    let mut gate = true;
    let mut current = cache.resolve(&SwitchConfig::gate_only(netlist, true), &x)?;
    let out_map_labels = cache.phases[current].model.output_map.labels.clone();
    let load = netlist.load();
    let load_v = load.map(|c| format!("V({})", c.name));
    let load_i = load.map(|c| format!("I({})", c.name));
    let src = netlist.sources().next();
    let src_i = src.map(|c| format!("I({})", c.name));
    let src_emf = src.and_then(|c| c.kind.value()).unwrap_or(0.0);
    let row = |label: &Option<String>| -> Option<usize> {
        label.as_ref().and_then(|l| cache.phases[current].model.output_map.index_of(l))
    };
    let (row_vl, row_il, row_is) = (row(&load_v), row(&load_i), row(&src_i));

    let mut all: Vec<(String, Signal)> = labels.iter().enumerate().map(|(i, l)| (l.clone(), Signal::State(i))).collect();
    for (i, l) in out_map_labels.iter().enumerate() {
        if !labels.contains(l) && l != V_OUT {
            all.push((l.clone(), Signal::Output(i)));
        }
    }
    if row_vl.is_some() {
        all.push((V_OUT.into(), Signal::VOut));
        all.push((I_OUT.into(), Signal::IOut));
        all.push((P_OUT.into(), Signal::POut));
    }
    if row_is.is_some() {
        all.push((P_IN.into(), Signal::PIn));
    }
    all.push((GATE.into(), Signal::Gate));
    let lookup: HashMap<&str, Signal> = all.iter().map(|(l, s)| (l.as_str(), *s)).collect();

    let record: Vec<String> = match &params.record {
        Some(list) => list.clone(),
        None => {
            let mut v = labels.clone();
            if row_vl.is_some() {
                v.push(V_OUT.into());
            }
            v.push(GATE.into());
            v
        }
    };
    let mut recorded: Vec<(String, Signal, Vec<f64>)> = Vec::with_capacity(record.len());
    for name in &record {
        let sig = *lookup.get(name.as_str()).ok_or_else(|| Error::UnknownSignal(name.clone()))?;
        recorded.push((name.clone(), sig, Vec::with_capacity(steps + 1)));
    }

    let eval = |phase: &Phase, sig: Signal, x: &DVector<f64>, gate: bool| -> f64 {
        let om = &phase.model.output_map;
        let out = |i: usize| om.c.row(i).dot(&x.transpose()) + phase.y0[i];
        match sig {
            Signal::State(i) => x[i],
            Signal::Output(i) => out(i),
            Signal::VOut => row_vl.map_or(0.0, out),
            Signal::IOut => row_il.map_or(0.0, out),
            Signal::POut => row_vl.map_or(0.0, |a| out(a) * row_il.map_or(0.0, out)),
            Signal::PIn => row_is.map_or(0.0, |i| -src_emf * out(i)),
            Signal::Gate => f64::from(u8::from(gate)),
        }
    };

    // per-cycle accumulators: state sums per configuration plus power sums
    let mut acc: HashMap<usize, (DVector<f64>, usize)> = HashMap::new();
    let (mut p_out_sum, mut p_in_sum, mut gate_sum) = (0.0, 0.0, 0.0);
    let mut cycle_means: BTreeMap<String, Vec<f64>> = all.iter().map(|(l, _)| (l.clone(), Vec::new())).collect();
    let mut cycle_states = vec![x.iter().copied().collect::<Vec<f64>>()];
    let mut configs_seen: Vec<String> = Vec::new();
    let mut reresolves = 0usize;
    let mut steady_at = None;
    let mut n_samples = 0usize;
    let mut last_cfg: [Option<usize>; 2] = [None, None];

    let mut i = 0usize;
    loop {
        let pos = i % n;
        let want_gate = pos < on_steps;
        if want_gate != gate {
            gate = want_gate;
            let mut start = cache.phases[current].model.config.clone();
            for c in netlist.switching() {
                if let Kind::Switch { gate: g } = &c.kind {
                    start.set(&c.name, gate && g.eq_ignore_ascii_case(&pwm.gate_name));
                }
            }
            current = cache.resolve(&start, &x)?;
        } else if !cache.phases[current].model.diodes_consistent(&x, &u, &rr) {
            let start = cache.phases[current].model.config.clone();
            current = cache.resolve(&start, &x)?;
            reresolves += 1;
        }
        let phase = &cache.phases[current];
        for (_, sig, buf) in recorded.iter_mut() {
            buf.push(eval(phase, *sig, &x, gate));
        }
        n_samples += 1;
        if i == steps {
            break;
        }
        let entry = acc.entry(current).or_insert_with(|| (DVector::zeros(ns), 0));
        entry.0 += &x;
        entry.1 += 1;
        if row_vl.is_some() {
            p_out_sum += eval(phase, Signal::POut, &x, gate);
        }
        if row_is.is_some() {
            p_in_sum += eval(phase, Signal::PIn, &x, gate);
        }
        gate_sum += f64::from(u8::from(gate));
        last_cfg[usize::from(!gate)] = Some(current);

        x = &phase.phi * &x + &phase.gamma;
        i += 1;

        if i.is_multiple_of(n) {
            for (idx, (sum, count)) in acc.drain() {
                let ph = &cache.phases[idx];
                let desc = ph.model.config.describe();
                if !configs_seen.contains(&desc) {
                    configs_seen.push(desc);
                }
                let mean_x = &sum / n as f64;
                let weight = count as f64 / n as f64;
                for (label, sig) in &all {
                    let v = match *sig {
                        Signal::State(j) => mean_x[j],
                        Signal::Output(j) => ph.model.output_map.c.row(j).dot(&mean_x.transpose()) + weight * ph.y0[j],
                        Signal::VOut => row_vl.map_or(0.0, |j| {
                            ph.model.output_map.c.row(j).dot(&mean_x.transpose()) + weight * ph.y0[j]
                        }),
                        Signal::IOut => row_il.map_or(0.0, |j| {
                            ph.model.output_map.c.row(j).dot(&mean_x.transpose()) + weight * ph.y0[j]
                        }),
                        _ => 0.0,
                    };
                    let series = cycle_means.get_mut(label).expect("label registered");
                    let c = cycle_states.len() - 1;
                    if series.len() == c {
                        series.push(v);
                    } else {
                        series[c] += v;
                    }
                }
            }
            let c = cycle_states.len() - 1;
            for (label, value) in [(P_OUT, p_out_sum), (P_IN, p_in_sum), (GATE, gate_sum)] {
                if let Some(series) = cycle_means.get_mut(label) {
                    if series.len() == c {
                        series.push(value / n as f64);
                    } else {
                        series[c] = value / n as f64;
                    }
                }
            }
            p_out_sum = 0.0;
            p_in_sum = 0.0;
            gate_sum = 0.0;
            cycle_states.push(x.iter().copied().collect());
            if let Some(tol) = params.stop_when_steady {
                if steady_at.is_none() {
                    steady_at = steady_cycle(&cycle_states, tol);
                }
                if steady_at.is_some() {
                    // finish: emit the sample at the cycle boundary
                    let phase = &cache.phases[current];
                    for (_, sig, buf) in recorded.iter_mut() {
                        buf.push(eval(phase, *sig, &x, gate));
                    }
                    n_samples += 1;
                    break;
                }
            }
        }
    }

    meta.insert("title".into(), netlist.title.clone());
    meta.insert("integrator".into(), format!("{:?}", params.integrator).to_lowercase());
    meta.insert("dt".into(), format!("{dt:e}"));
    meta.insert("steps_per_period".into(), n.to_string());
    meta.insert("effective_duty".into(), format!("{eff_duty}"));
    meta.insert("r_on".into(), format!("{:e}", rr.r_on));
    meta.insert("r_off".into(), format!("{:e}", rr.r_off));
    meta.insert("diode_vf".into(), format!("{}", rr.diode_vf));
    meta.insert("cap_esr".into(), format!("{}", rr.cap_esr));
    meta.insert("source_esr".into(), format!("{}", rr.source_esr));
    meta.insert("configs".into(), configs_seen.join(" "));
    meta.insert("diode_reresolves".into(), reresolves.to_string());
    if let Some(l) = load {
        meta.insert("load".into(), l.name.clone());
    }
    if let Some(s) = src {
        meta.insert("source".into(), s.name.clone());
    }
    if let Some(c) = steady_at {
        meta.insert("steady_cycle".into(), c.to_string());
    }
    if !warnings.is_empty() {
        meta.insert("warnings".into(), warnings.join("; "));
    }
    Ok(Trace {
        dt,
        signals: recorded.into_iter().map(|(l, _, v)| (l, v)).collect(),
        pwm: pwm.clone(),
        last_phase_configs: [last_cfg[0].map(|i| cache.phases[i].model.config.clone()), last_cfg[1].map(|i| cache.phases[i].model.config.clone())],
        meta,
        steps_per_period: n,
        state_labels: labels,
        cycle_states,
        cycle_means,
        final_state: x.iter().copied().collect(),
        n_samples,
    })
}

/// Arithmetic mean of `signal` over cycle `cycle_index`.
pub fn cycle_average(trace: &Trace, signal: &str, cycle_index: usize) -> Result<f64> {
    let cycles = trace.complete_cycles();
    let n = trace.steps_per_period;
    if let Some(samples) = trace.signals.get(signal) {
        if (cycle_index + 1) * n <= samples.len() {
            let s = &samples[cycle_index * n..(cycle_index + 1) * n];
            return Ok(s.iter().sum::<f64>() / n as f64);
        }
        return Err(Error::CycleOutOfRange { cycle: cycle_index, cycles: samples.len() / n });
    }
    let series = trace.cycle_means.get(signal).ok_or_else(|| Error::UnknownSignal(signal.to_string()))?;
    series.get(cycle_index).copied().ok_or(Error::CycleOutOfRange { cycle: cycle_index, cycles })
}

/// First cycle `c ≥ 1` whose end state differs from the previous cycle's end
/// state by at most `tol·max(‖x‖∞, 1)` in the infinity norm.
pub fn detect_steady_state(trace: &Trace, tol: f64) -> Option<usize> {
    steady_cycle(&trace.cycle_states, tol)
}

pub const STEADY_TOL: f64 = 1e-5;

fn steady_cycle(states: &[Vec<f64>], tol: f64) -> Option<usize> {
    // states[c + 1] is the end of cycle c
    (1..states.len().saturating_sub(1)).find(|&c| {
        let (prev, cur) = (&states[c], &states[c + 1]);
        let diff = prev.iter().zip(cur).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let scale = cur.iter().map(|v| v.abs()).fold(1.0, f64::max);
        diff <= tol * scale
    })
}

/// Result of [`periodic_steady_state`].
#[derive(Debug, Clone)]
pub struct PeriodicOrbit {
    /// State at the start of a period.
    pub state: Vec<f64>,
    /// `‖P(x) − x‖∞ / max(‖x‖∞, 1)` for the one-period map `P`.
    pub residual: f64,
    pub iterations: usize,
}

/// Finds a fixed point of the one-period map by Newton shooting from `x0`,
/// with a finite-difference Jacobian and backtracking. The map is piecewise
/// affine, so a few iterations reach round-off unless the diode event pattern
/// keeps changing; the best iterate is returned either way.
pub fn periodic_steady_state(
    netlist: &Netlist,
    pwm: &PwmSpec,
    params: &SimParams,
    r: &SwitchResistances,
    x0: &[f64],
) -> Result<PeriodicOrbit> {
    let period_map = |x: &DVector<f64>| -> Result<DVector<f64>> {
        let p = SimParams {
            t_end: pwm.period(),
            dt: params.dt,
            integrator: params.integrator,
            record: Some(vec![]),
            warm_start: Some(x.iter().copied().collect()),
            stop_when_steady: None,
        };
        Ok(DVector::from_vec(simulate(netlist, pwm, &p, r)?.final_state))
    };
    let x = DVector::from_column_slice(x0);
    let px = period_map(&x)?;
    let mut best = PeriodicOrbit { state: x0.to_vec(), residual: relative(&px, &x), iterations: 0 };
    // the map jumps slightly whenever a diode event moves by one grid step;
    // the difference increment must straddle those jumps without leaving the
    // affine piece, and no single choice suits every circuit
    for rel_h in [1e-4, 1e-6, 1e-3] {
        if best.residual <= 1e-10 {
            break;
        }
        let run = newton(&period_map, x.clone(), px.clone(), rel_h)?;
        if run.residual < best.residual {
            best = run;
        }
    }
    Ok(best)
}

fn relative(px: &DVector<f64>, x: &DVector<f64>) -> f64 {
    (px - x).amax() / x.amax().max(1.0)
}

fn newton(
    period_map: &dyn Fn(&DVector<f64>) -> Result<DVector<f64>>,
    mut x: DVector<f64>,
    mut px: DVector<f64>,
    rel_h: f64,
) -> Result<PeriodicOrbit> {
    let n = x.len();
    let mut best = PeriodicOrbit { state: x.iter().copied().collect(), residual: relative(&px, &x), iterations: 0 };
    for it in 1..=10 {
        if best.residual <= 1e-12 {
            break;
        }
        let h = rel_h * x.amax().max(1.0);
        let mut jac = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let mut xp = x.clone();
            xp[j] += h;
            jac.set_column(j, &((period_map(&xp)? - &px) / h));
        }
        jac -= DMatrix::<f64>::identity(n, n);
        let Some(delta) = jac.full_piv_lu().solve(&(&x - &px)) else {
            break;
        };
        // backtrack: stiff diode loops can make the full step overshoot
        let mut step = 1.0;
        let mut accepted = None;
        while step > 1e-3 {
            let xt = &x + &delta * step;
            let pt = period_map(&xt)?;
            let residual = relative(&pt, &xt);
            if residual < best.residual {
                accepted = Some((xt, pt, residual));
                break;
            }
            step *= 0.25;
        }
        let Some((xt, pt, residual)) = accepted else {
            break;
        };
        x = xt;
        px = pt;
        best = PeriodicOrbit { state: x.iter().copied().collect(), residual, iterations: it };
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn steady_cycle_needs_two_matching_boundaries() {
        let s = |v: f64| vec![v, 1.0];
        assert_eq!(steady_cycle(&[s(0.0), s(0.5), s(0.9), s(0.9), s(0.9)], 1e-5), Some(2));
        assert_eq!(steady_cycle(&[s(0.0), s(0.5), s(0.9)], 1e-5), None);
        // the first cycle never counts, even from a periodic start
        assert_eq!(steady_cycle(&[s(1.0), s(1.0), s(1.0)], 1e-5), Some(1));
    }
}
