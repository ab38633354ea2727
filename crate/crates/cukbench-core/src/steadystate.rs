//! Averaged steady state from volt-second and charge balance.
//!
//! Both phase networks and the balance conditions are solved as one linear
//! system. Its unknowns are the averaged states `z` plus the MNA unknowns of
//! each phase with reactive elements clamped to `z`. Solving everything at
//! once keeps the system exact for ideal devices (`r_on = 0`,
//! `r_off = ∞`), including capacitor-diode loops whose loop current only
//! charge balance can fix.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mna::{self, Mna, SwitchConfig, SwitchResistances};
use crate::netlist::{Kind, Netlist, PwmSpec, TopologyId};
use crate::transient::{self, SimParams};

/// Quantities of one phase at the averaged operating point.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PhaseSolution {
    pub v_ind: BTreeMap<String, f64>,
    pub i_cap: BTreeMap<String, f64>,
    /// Every node voltage `V(n)` and component `V(name)` / `I(name)`.
    pub values: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteadyState {
    pub v_cap: BTreeMap<String, f64>,
    pub i_ind: BTreeMap<String, f64>,
    pub v_in: f64,
    pub v_out: f64,
    pub gain: f64,
    pub gain_mag: f64,
    /// ON then OFF.
    pub phase_configs: [SwitchConfig; 2],
    pub phases: [PhaseSolution; 2],
    pub duty: f64,
    pub residual: f64,
}

impl SteadyState {
    /// Averaged state in simulator order (inductor currents, then capacitor
    /// voltages), suitable as a transient warm start.
    pub fn state_vector(&self, netlist: &Netlist) -> Vec<f64> {
        netlist
            .inductors()
            .map(|c| self.i_ind.get(&c.name).copied().unwrap_or(0.0))
            .chain(netlist.capacitors().map(|c| self.v_cap.get(&c.name).copied().unwrap_or(0.0)))
            .collect()
    }
}

/// Solves the balance equations at duty `k`. Without `configs` the diode
/// pattern of each phase is seeded from a short transient and refined until
/// every diode is consistent with its averaged current or voltage.
pub fn volt_second_solve(
    netlist: &Netlist,
    k: f64,
    r: &SwitchResistances,
    configs: Option<&[SwitchConfig; 2]>,
) -> Result<SteadyState> {
    if !(k > 0.0 && k < 1.0) {
        return Err(Error::InvalidDuty(k));
    }
    r.validate()?;
    netlist.validate()?;
    if let Some(c) = configs {
        return solve_balance(netlist, k, r, c);
    }
    let seed = seed_configs(netlist, k, r)?;
    refine(netlist, k, r, seed)
}

fn seed_configs(netlist: &Netlist, k: f64, r: &SwitchResistances) -> Result<[SwitchConfig; 2]> {
    let fallback = || [SwitchConfig::gate_only(netlist, true), SwitchConfig::gate_only(netlist, false)];
    let Some(base) = netlist.pwm.clone() else {
        return Ok(fallback());
    };
    let pwm = PwmSpec { duty: k, ..base };
    let mut params = SimParams::new(20.0 * pwm.period());
    params.dt = Some(pwm.period() / 200.0);
    params.record = Some(vec![]);
    match transient::simulate(netlist, &pwm, &params, r) {
        Ok(trace) => {
            let [on, off] = trace.last_phase_configs;
            let [fon, foff] = fallback();
            Ok([on.unwrap_or(fon), off.unwrap_or(foff)])
        }
        Err(_) => Ok(fallback()),
    }
}

fn diode_names(netlist: &Netlist) -> Vec<String> {
    netlist.components.iter().filter(|c| matches!(c.kind, Kind::Diode)).map(|c| c.name.clone()).collect()
}

// Worst diode violation per phase at the averaged solution.
fn violations(netlist: &Netlist, ss: &SteadyState, r: &SwitchResistances) -> [Option<(String, f64)>; 2] {
    let scale_i = ss.i_ind.values().fold(1e-6, |m: f64, v| m.max(v.abs()));
    let scale_v = ss.v_cap.values().fold(ss.v_in.abs().max(1e-6), |m: f64, v| m.max(v.abs()));
    let mut out = [None, None];
    for (p, slot) in out.iter_mut().enumerate() {
        for name in diode_names(netlist) {
            let vals = &ss.phases[p].values;
            let v = if ss.phase_configs[p].is_on(&name) {
                -vals[&format!("I({name})")] / scale_i
            } else {
                (vals[&format!("V({name})")] - r.diode_vf) / scale_v
            };
            if v > 1e-9 && slot.as_ref().is_none_or(|(_, w)| v > *w) {
                *slot = Some((name, v));
            }
        }
    }
    out
}

fn refine(netlist: &Netlist, k: f64, r: &SwitchResistances, seed: [SwitchConfig; 2]) -> Result<SteadyState> {
    let d = diode_names(netlist).len();
    let mut configs = seed;
    let mut tried: Vec<[SwitchConfig; 2]> = Vec::new();
    for _ in 0..(4 * d + 8) {
        if tried.contains(&configs) {
            break;
        }
        tried.push(configs.clone());
        let ss = match solve_balance(netlist, k, r, &configs) {
            Ok(ss) => ss,
            Err(Error::SingularBalance) => break,
            Err(e) => return Err(e),
        };
        let v = violations(netlist, &ss, r);
        if v.iter().all(Option::is_none) {
            return Ok(ss);
        }
        for (p, worst) in v.into_iter().enumerate() {
            if let Some((name, _)) = worst {
                let on = configs[p].is_on(&name);
                configs[p].set(&name, !on);
            }
        }
    }
    exhaustive(netlist, k, r)
}

// Every diode pattern pair; accepts a unique consistent operating point.
fn exhaustive(netlist: &Netlist, k: f64, r: &SwitchResistances) -> Result<SteadyState> {
    let diodes = diode_names(netlist);
    if diodes.len() > 6 {
        return Err(Error::DiodeAmbiguity("no consistent diode pattern found".into()));
    }
    let patterns: Vec<SwitchConfig> = [true, false]
        .into_iter()
        .flat_map(|gate| {
            let diodes = &diodes;
            (0..1u32 << diodes.len()).map(move |mask| {
                let mut c = SwitchConfig::gate_only(netlist, gate);
                for (i, name) in diodes.iter().enumerate() {
                    c.set(name, mask & (1 << i) != 0);
                }
                c
            })
        })
        .collect();
    let half = patterns.len() / 2;
    let mut found: Vec<SteadyState> = Vec::new();
    for on in &patterns[..half] {
        for off in &patterns[half..] {
            let configs = [on.clone(), off.clone()];
            if let Ok(ss) = solve_balance(netlist, k, r, &configs) {
                if violations(netlist, &ss, r).iter().all(Option::is_none) {
                    found.push(ss);
                }
            }
        }
    }
    let first = found.first().cloned().ok_or_else(|| Error::DiodeAmbiguity("no consistent diode pattern found".into()))?;
    let tol = 1e-6 * first.gain_mag.max(1.0);
    if found.iter().any(|s| (s.gain - first.gain).abs() > tol) {
        let desc: Vec<String> =
            found.iter().map(|s| format!("{}/{}", s.phase_configs[0].describe(), s.phase_configs[1].describe())).collect();
        return Err(Error::DiodeAmbiguity(format!("several consistent patterns: {}", desc.join(", "))));
    }
    Ok(first)
}

fn solve_balance(netlist: &Netlist, k: f64, r: &SwitchResistances, configs: &[SwitchConfig; 2]) -> Result<SteadyState> {
    let phases = [Mna::build(netlist, &configs[0], r)?, Mna::build(netlist, &configs[1], r)?];
    let n = phases[0].n_states;
    let d = [phases[0].m.nrows(), phases[1].m.nrows()];
    let dim = n + d[0] + d[1];
    let u = mna::input_vector(netlist);
    let mut sys = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DVector::<f64>::zeros(dim);
    let offsets = [n, n + d[0]];
    let weight = [k, 1.0 - k];

    // phase networks: M·w − Rx·z = Ru·u + r0
    for p in 0..2 {
        let (o, ph) = (offsets[p], &phases[p]);
        sys.view_mut((o, o), (d[p], d[p])).copy_from(&ph.m);
        sys.view_mut((o, 0), (d[p], n)).copy_from(&(-&ph.rx));
        rhs.rows_mut(o, d[p]).copy_from(&(&ph.ru * &u + &ph.r0));
    }
    // balance rows: weighted phase averages of V_L and I_C vanish
    let mut row = 0;
    for kind in [0, 1] {
        for (ci, c) in netlist.components.iter().enumerate() {
            let probe_of = |ph: &Mna| match (kind, &c.kind) {
                (0, Kind::Inductor(_)) => Some(ph.voltage[ci].clone()),
                (1, Kind::Capacitor(_)) => Some(ph.current[ci].clone()),
                _ => None,
            };
            if probe_of(&phases[0]).is_none() {
                continue;
            }
            for p in 0..2 {
                let probe = probe_of(&phases[p]).expect("same netlist");
                for &(i, s) in &probe.w {
                    sys[(row, offsets[p] + i)] += weight[p] * s;
                }
                for &(j, s) in &probe.x {
                    sys[(row, j)] += weight[p] * s;
                }
            }
            row += 1;
        }
    }
    debug_assert_eq!(row, n);

    let lu = sys.clone().full_piv_lu();
    let u_diag = lu.u().diagonal();
    let max = u_diag.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = u_diag.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if dim > 0 && !(max > 0.0 && min > max * 1e-13) {
        return Err(Error::SingularBalance);
    }
    let sol = lu.solve(&rhs).ok_or(Error::SingularBalance)?;
    let resid = (&sys * &sol - &rhs).amax() / rhs.amax().max(1.0);
    if !resid.is_finite() || resid > 1e-9 {
        return Err(Error::SingularBalance);
    }

    let z = sol.rows(0, n).into_owned();
    let labels: Vec<&str> = netlist.inductors().chain(netlist.capacitors()).map(|c| c.name.as_str()).collect();
    let n_ind = netlist.inductors().count();
    let mut v_cap = BTreeMap::new();
    let mut i_ind = BTreeMap::new();
    for (j, name) in labels.iter().enumerate() {
        if j < n_ind {
            i_ind.insert(name.to_string(), z[j]);
        } else {
            v_cap.insert(name.to_string(), z[j]);
        }
    }
    let mut sols: [PhaseSolution; 2] = Default::default();
    for p in 0..2 {
        let w = sol.rows(offsets[p], d[p]).into_owned();
        let ph = &phases[p];
        let s = &mut sols[p];
        for (i, node) in ph.nodes.iter().enumerate() {
            s.values.insert(format!("V({node})"), w[i]);
        }
        for (ci, c) in netlist.components.iter().enumerate() {
            let v = ph.voltage[ci].eval(&w, &z);
            let i = ph.current[ci].eval(&w, &z);
            s.values.insert(format!("V({})", c.name), v);
            s.values.insert(format!("I({})", c.name), i);
            match c.kind {
                Kind::Inductor(_) => {
                    s.v_ind.insert(c.name.clone(), v);
                }
                Kind::Capacitor(_) => {
                    s.i_cap.insert(c.name.clone(), i);
                }
                _ => {}
            }
        }
    }
    let v_in = netlist.v_in().unwrap_or(0.0);
    let v_out = match netlist.load() {
        Some(l) => {
            let key = format!("V({})", l.name);
            k * sols[0].values[&key] + (1.0 - k) * sols[1].values[&key]
        }
        None => 0.0,
    };
    let gain = if v_in != 0.0 { v_out / v_in } else { 0.0 };
    Ok(SteadyState {
        v_cap,
        i_ind,
        v_in,
        v_out,
        gain,
        gain_mag: gain.abs(),
        phase_configs: configs.clone(),
        phases: sols,
        duty: k,
        residual: resid,
    })
}

/// Closed-form gain of a built-in, signed as in its derivation.
pub fn gain_formula(id: TopologyId, k: f64) -> Result<f64> {
    if !(k > 0.0 && k < 1.0) {
        return Err(Error::InvalidDuty(k));
    }
    Ok(match id {
        TopologyId::ClassicalCuk => -k / (1.0 - k),
        TopologyId::Proposed1 => -1.0 / (1.0 - k),
        TopologyId::Proposed2 => -2.0 / (1.0 - k),
        TopologyId::Proposed3 => -(2.0 + k) / (1.0 - k),
    })
}

/// One evaluated phase relation.
#[derive(Debug, Clone, PartialEq)]
pub struct Relation {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationReport {
    pub topology: TopologyId,
    pub relations: Vec<Relation>,
}

impl RelationReport {
    pub fn max_residual(&self) -> f64 {
        self.relations.iter().fold(0.0, |m, r| m.max(r.residual))
    }
}

/// Evaluates the per-phase KVL relations stated for a built-in at `ss`.
/// Relations written with magnitudes (`|·|`) compare unsigned values.
pub fn check_phase_relations(netlist: &Netlist, ss: &SteadyState) -> Result<RelationReport> {
    let id = TopologyId::from_netlist(netlist).ok_or(Error::NotBuiltin)?;
    let on = &ss.phases[0];
    let off = &ss.phases[1];
    let vl = |p: &PhaseSolution, n: &str| p.v_ind.get(n).copied().unwrap_or(f64::NAN);
    let vc = |n: &str| ss.v_cap.get(n).copied().unwrap_or(f64::NAN);
    let v1 = ss.v_in;
    let rel = |name: &str, lhs: f64, rhs: f64| Relation { name: name.into(), lhs, rhs, residual: (lhs - rhs).abs() };
    let relations = match id {
        TopologyId::ClassicalCuk => vec![
            rel("ON: V_L1 = V_1", vl(on, "L1"), v1),
            rel("ON: V_L2 = -V_C1 - V_Co", vl(on, "L2"), -vc("C1") - vc("Co")),
            rel("OFF: V_L1 = V_1 - V_C1", vl(off, "L1"), v1 - vc("C1")),
            rel("OFF: V_L2 = -V_Co", vl(off, "L2"), -vc("Co")),
        ],
        TopologyId::Proposed1 => vec![
            rel("ON: V_L1 = V_1", vl(on, "L1"), v1),
            rel("ON: V_L3 = -V_C3", vl(on, "L3"), -vc("C3")),
            rel("OFF: V_L1 = V_1 - V_C1", vl(off, "L1"), v1 - vc("C1")),
        ],
        TopologyId::Proposed2 => vec![
            rel("ON: V_L1 = V_1", vl(on, "L1"), v1),
            rel("OFF: V_L1 = V_1 - V_C1", vl(off, "L1"), v1 - vc("C1")),
            rel("V_C2 = V_1", vc("C2"), v1),
            rel("|V_Co| = |V_C1| + |V_C2| + |V_C4|", vc("Co").abs(), vc("C1").abs() + vc("C2").abs() + vc("C4").abs()),
        ],
        TopologyId::Proposed3 => vec![
            rel("ON: V_L1 = V_1", vl(on, "L1"), v1),
            rel("OFF: |V_L1| = |V_C1 - V_1|", vl(off, "L1").abs(), (vc("C1") - v1).abs()),
            rel("|V_C4| = |V_C1| + |V_C2|", vc("C4").abs(), vc("C1").abs() + vc("C2").abs()),
            rel("|V_C1| = |V_C2|", vc("C1").abs(), vc("C2").abs()),
            rel("|V_C4| = |V_C3| + |V_C2|", vc("C4").abs(), vc("C3").abs() + vc("C2").abs()),
        ],
    };
    Ok(RelationReport { topology: id, relations })
}
