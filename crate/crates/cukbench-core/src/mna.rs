//! Modified nodal analysis of one switching phase.
//!
//! Unknowns are the non-ground node voltages followed by the branch currents
//! of voltage-defined elements: DC sources, capacitors (clamped to their state
//! voltage) and conducting switches/diodes. Inductors enter as current sources
//! driven by their state. Conducting devices obey `v = r_on·i (+ v_f)`, which
//! stays valid for `r_on = 0`; blocking devices are conductances `1/r_off`,
//! omitted entirely when `r_off` is infinite.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::netlist::{Kind, Netlist, GROUND};

/// Conduction state of every switch and diode (`true` = conducting).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct SwitchConfig {
    pub states: BTreeMap<String, bool>,
}

impl SwitchConfig {
    /// Switches follow `gate_on` (when bound to the netlist's PWM gate), diodes start blocking.
    pub fn gate_only(netlist: &Netlist, gate_on: bool) -> Self {
        let gate_name = netlist.pwm.as_ref().map(|p| p.gate_name.as_str());
        let states = netlist
            .switching()
            .map(|c| {
                let on = match &c.kind {
                    Kind::Switch { gate } => gate_on && gate_name.is_none_or(|g| g.eq_ignore_ascii_case(gate)),
                    _ => false,
                };
                (c.name.clone(), on)
            })
            .collect();
        SwitchConfig { states }
    }

    pub fn is_on(&self, name: &str) -> bool {
        self.states.get(name).copied().unwrap_or(false)
    }

    pub fn set(&mut self, name: &str, on: bool) {
        if let Some(s) = self.states.get_mut(name) {
            *s = on;
        }
    }

    /// Names of conducting elements, e.g. `{S1, D2}`.
    pub fn conducting(&self) -> Vec<&str> {
        self.states.iter().filter(|(_, &on)| on).map(|(n, _)| n.as_str()).collect()
    }

    pub fn describe(&self) -> String {
        let on = self.conducting();
        if on.is_empty() {
            "{}".to_string()
        } else {
            format!("{{{}}}", on.join(", "))
        }
    }

    fn check(&self, netlist: &Netlist) -> Result<()> {
        let expected: Vec<&str> = netlist.switching().map(|c| c.name.as_str()).collect();
        let mut mismatch: Vec<String> = expected
            .iter()
            .filter(|n| !self.states.contains_key(**n))
            .map(|n| format!("missing {n}"))
            .collect();
        mismatch.extend(
            self.states.keys().filter(|k| !expected.contains(&k.as_str())).map(|k| format!("unexpected {k}")),
        );
        if mismatch.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigMismatch(mismatch.join(", ")))
        }
    }
}

/// Device and parasitic resistances used when realizing switches and diodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwitchResistances {
    pub r_on: f64,
    pub r_off: f64,
    pub diode_vf: f64,
    pub source_esr: f64,
    /// Series resistance of every capacitor.
    pub cap_esr: f64,
}

impl Default for SwitchResistances {
    fn default() -> Self {
        SwitchResistances { r_on: 1e-3, r_off: 1e7, diode_vf: 0.0, source_esr: 0.0, cap_esr: 0.0 }
    }
}

impl SwitchResistances {
    /// Exact ideal limits: perfect shorts and opens. Only the averaged solver
    /// accepts these; transient simulation regularizes them.
    pub fn ideal() -> Self {
        SwitchResistances { r_on: 0.0, r_off: f64::INFINITY, diode_vf: 0.0, source_esr: 0.0, cap_esr: 0.0 }
    }

    /// Preset loss model: 0.1 Ω on-resistance, 0.4 V Schottky drop, 50 mΩ capacitor ESR.
    pub fn lossy() -> Self {
        SwitchResistances { r_on: 0.1, r_off: 1e7, diode_vf: 0.4, source_esr: 0.0, cap_esr: 0.05 }
    }

    /// Same values with zero `r_on` / infinite `r_off` replaced by the defaults.
    pub fn regularized(&self) -> Self {
        let d = SwitchResistances::default();
        SwitchResistances {
            r_on: if self.r_on > 0.0 { self.r_on } else { d.r_on },
            r_off: if self.r_off.is_finite() { self.r_off } else { d.r_off },
            ..*self
        }
    }

    pub fn is_ideal(&self) -> bool {
        self.r_on == 0.0 && self.r_off.is_infinite() && self.diode_vf == 0.0 && self.source_esr == 0.0 && self.cap_esr == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.r_on >= 0.0
            && self.r_off > self.r_on
            && self.diode_vf.is_finite()
            && self.diode_vf >= 0.0
            && self.source_esr >= 0.0
            && self.cap_esr >= 0.0
            && self.source_esr.is_finite()
            && self.cap_esr.is_finite()
            && self.r_on.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!("invalid switch resistances {self:?}")))
        }
    }
}

/// Affine read-out of a model: `y = C·x + D·u + f`.
#[derive(Debug, Clone)]
pub struct OutputMap {
    pub labels: Vec<String>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub f: DVector<f64>,
    index: HashMap<String, usize>,
}

impl OutputMap {
    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.c * x + &self.d * u + &self.f
    }

    pub fn eval_row(&self, row: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.c.row(row).dot(&x.transpose()) + self.d.row(row).dot(&u.transpose()) + self.f[row]
    }

    /// Evaluates one named output.
    pub fn get(&self, label: &str, x: &DVector<f64>, u: &DVector<f64>) -> Option<f64> {
        self.index_of(label).map(|r| self.eval_row(r, x, u))
    }
}

/// Per-phase linear model `dx/dt = A·x + B·u + e`.
#[derive(Debug, Clone)]
pub struct StateSpaceModel {
    pub a_matrix: DMatrix<f64>,
    pub b_matrix: DMatrix<f64>,
    /// Constant forcing from diode forward drops (zero for ideal diodes).
    pub e_vector: DVector<f64>,
    pub state_labels: Vec<String>,
    pub input_labels: Vec<String>,
    pub output_map: OutputMap,
    pub config: SwitchConfig,
    diode_rows: Vec<DiodeProbe>,
}

#[derive(Debug, Clone)]
struct DiodeProbe {
    name: String,
    conducting: bool,
    current_row: usize,
    voltage_row: usize,
}

impl StateSpaceModel {
    pub fn n_states(&self) -> usize {
        self.state_labels.len()
    }

    /// True when every diode satisfies its complementarity condition at `(x, u)`.
    pub fn diodes_consistent(&self, x: &DVector<f64>, u: &DVector<f64>, r: &SwitchResistances) -> bool {
        self.worst_violation(x, u, r).is_none()
    }

    /// The diode whose complementarity condition is most violated, if any.
    /// Reverse current is weighted by the on-resistance so both kinds of
    /// violation compare in volts.
    pub fn worst_violation(&self, x: &DVector<f64>, u: &DVector<f64>, r: &SwitchResistances) -> Option<String> {
        let mut worst: Option<(&str, f64)> = None;
        for d in &self.diode_rows {
            let v = if d.conducting {
                -self.output_map.eval_row(d.current_row, x, u) * r.r_on.max(1e-3)
            } else {
                self.output_map.eval_row(d.voltage_row, x, u) - r.diode_vf
            };
            if v > DIODE_TOL && worst.is_none_or(|(_, w)| v > w) {
                worst = Some((&d.name, v));
            }
        }
        worst.map(|(n, _)| n.to_string())
    }
}

const DIODE_TOL: f64 = 1e-9;

/// Labels of the state vector: inductor currents then capacitor voltages.
pub fn state_labels(netlist: &Netlist) -> Vec<String> {
    netlist
        .inductors()
        .map(|c| format!("I({})", c.name))
        .chain(netlist.capacitors().map(|c| format!("V({})", c.name)))
        .collect()
}

pub fn input_labels(netlist: &Netlist) -> Vec<String> {
    netlist.sources().map(|c| c.name.clone()).collect()
}

pub fn input_vector(netlist: &Netlist) -> DVector<f64> {
    DVector::from_iterator(netlist.sources().count(), netlist.sources().map(|c| c.kind.value().unwrap_or(0.0)))
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Emf {
    Input(usize),
    State(usize),
    Const(f64),
}

/// A linear functional over `(w, x)`: `w_row·w + x_row·x`.
#[derive(Debug, Clone)]
pub(crate) struct Probe {
    pub w: Vec<(usize, f64)>,
    pub x: Vec<(usize, f64)>,
}

impl Probe {
    pub fn eval(&self, w: &DVector<f64>, x: &DVector<f64>) -> f64 {
        self.w.iter().map(|&(i, c)| c * w[i]).sum::<f64>() + self.x.iter().map(|&(i, c)| c * x[i]).sum::<f64>()
    }
}

/// Assembled MNA system for one configuration: `M·w = Rx·x + Ru·u + r0`.
#[derive(Debug, Clone)]
pub(crate) struct Mna {
    pub nodes: Vec<String>,
    pub m: DMatrix<f64>,
    pub rx: DMatrix<f64>,
    pub ru: DMatrix<f64>,
    pub r0: DVector<f64>,
    /// For each component (netlist order): voltage across and current a→b.
    pub voltage: Vec<Probe>,
    pub current: Vec<Probe>,
    pub n_states: usize,
    pub n_inputs: usize,
}

impl Mna {
    pub fn build(netlist: &Netlist, config: &SwitchConfig, r: &SwitchResistances) -> Result<Mna> {
        config.check(netlist)?;
        let nodes = netlist.nodes();
        let node_idx: HashMap<&str, usize> = nodes.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let at = |n: &str| -> Option<usize> {
            if n == GROUND {
                None
            } else {
                node_idx.get(n).copied()
            }
        };
        let n_states = netlist.inductors().count() + netlist.capacitors().count();
        let n_inputs = netlist.sources().count();

        // voltage-defined branches: (component index, emf, series resistance)
        let mut branches = Vec::new();
        let mut ind_state = HashMap::new();
        let (mut li, mut ci, mut si) = (0usize, netlist.inductors().count(), 0usize);
        for (k, c) in netlist.components.iter().enumerate() {
            match &c.kind {
                Kind::DcSource(_) => {
                    branches.push((k, Emf::Input(si), r.source_esr));
                    si += 1;
                }
                Kind::Capacitor(_) => {
                    branches.push((k, Emf::State(ci), r.cap_esr));
                    ci += 1;
                }
                Kind::Inductor(_) => {
                    ind_state.insert(k, li);
                    li += 1;
                }
                Kind::Switch { .. } if config.is_on(&c.name) => branches.push((k, Emf::Const(0.0), r.r_on)),
                Kind::Diode if config.is_on(&c.name) => branches.push((k, Emf::Const(r.diode_vf), r.r_on)),
                _ => {}
            }
        }
        let nn = nodes.len();
        let dim = nn + branches.len();
        let mut m = DMatrix::zeros(dim, dim);
        let mut rx = DMatrix::zeros(dim, n_states);
        let mut ru = DMatrix::zeros(dim, n_inputs);
        let mut r0 = DVector::zeros(dim);

        let mut voltage = Vec::with_capacity(netlist.components.len());
        let mut current = Vec::with_capacity(netlist.components.len());
        let mut branch_of = HashMap::new();
        for (bi, &(k, _, _)) in branches.iter().enumerate() {
            branch_of.insert(k, nn + bi);
        }

        for (k, c) in netlist.components.iter().enumerate() {
            let (a, b) = (at(&c.node_a), at(&c.node_b));
            let mut vprobe = Vec::new();
            if let Some(a) = a {
                vprobe.push((a, 1.0));
            }
            if let Some(b) = b {
                vprobe.push((b, -1.0));
            }
            let conductance = match &c.kind {
                Kind::Resistor(v) => Some(1.0 / v),
                Kind::Switch { .. } | Kind::Diode if !branch_of.contains_key(&k) => {
                    if r.r_off.is_finite() {
                        Some(1.0 / r.r_off)
                    } else {
                        Some(0.0)
                    }
                }
                _ => None,
            };
            let iprobe = if let Some(g) = conductance {
                if g != 0.0 {
                    for &(i, si) in &vprobe {
                        for &(j, sj) in &vprobe {
                            m[(i, j)] += si * sj * g;
                        }
                    }
                }
                Probe { w: vprobe.iter().map(|&(i, s)| (i, s * g)).collect(), x: vec![] }
            } else if let Some(&row) = branch_of.get(&k) {
                for &(i, s) in &vprobe {
                    m[(i, row)] += s;
                    m[(row, i)] += s;
                }
                Probe { w: vec![(row, 1.0)], x: vec![] }
            } else {
                let j = ind_state[&k];
                for &(i, s) in &vprobe {
                    rx[(i, j)] -= s;
                }
                Probe { w: vec![], x: vec![(j, 1.0)] }
            };
            voltage.push(Probe { w: vprobe, x: vec![] });
            current.push(iprobe);
        }
        for (bi, &(_, emf, rs)) in branches.iter().enumerate() {
            let row = nn + bi;
            m[(row, row)] -= rs;
            match emf {
                Emf::Input(s) => ru[(row, s)] = 1.0,
                Emf::State(j) => rx[(row, j)] = 1.0,
                Emf::Const(v) => r0[row] = v,
            }
        }
        Ok(Mna { nodes, m, rx, ru, r0, voltage, current, n_states, n_inputs })
    }

    /// Solves `M·G = [Rx | Ru | r0]`, returning `(Gx, Gu, g0)`.
    pub fn affine(&self, netlist: &Netlist, config: &SwitchConfig) -> Result<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)> {
        let dim = self.m.nrows();
        if dim == 0 {
            return Ok((DMatrix::zeros(0, self.n_states), DMatrix::zeros(0, self.n_inputs), DVector::zeros(0)));
        }
        let mut rhs = DMatrix::zeros(dim, self.n_states + self.n_inputs + 1);
        rhs.view_mut((0, 0), (dim, self.n_states)).copy_from(&self.rx);
        rhs.view_mut((0, self.n_states), (dim, self.n_inputs)).copy_from(&self.ru);
        rhs.set_column(self.n_states + self.n_inputs, &self.r0);
        let lu = self.m.clone().full_piv_lu();
        let sol = if well_conditioned(&lu) { lu.solve(&rhs) } else { None };
        let sol = sol.ok_or_else(|| Error::SingularMna { nodes: singular_nodes(netlist, config) })?;
        let gx = sol.columns(0, self.n_states).into_owned();
        let gu = sol.columns(self.n_states, self.n_inputs).into_owned();
        let g0 = sol.column(self.n_states + self.n_inputs).into_owned();
        Ok((gx, gu, g0))
    }
}

fn well_conditioned(lu: &nalgebra::linalg::FullPivLU<f64, nalgebra::Dyn, nalgebra::Dyn>) -> bool {
    let u = lu.u();
    let diag: Vec<f64> = (0..u.nrows().min(u.ncols())).map(|i| u[(i, i)].abs()).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    max > 0.0 && min > max * 1e-15
}

/// Nodes responsible for a singular matrix: those with no resistive or
/// voltage-defined path to ground, or else the nodes of the first loop of
/// voltage-defined elements.
fn singular_nodes(netlist: &Netlist, config: &SwitchConfig) -> Vec<String> {
    let nodes = netlist.nodes();
    let idx: HashMap<&str, usize> = std::iter::once(GROUND)
        .chain(nodes.iter().map(|s| s.as_str()))
        .enumerate()
        .map(|(i, n)| (n, i))
        .collect();
    let mut parent: Vec<usize> = (0..=nodes.len()).collect();
    fn find(p: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while p[r] != r {
            r = p[r];
        }
        p[i] = r;
        r
    }
    let mut loop_nodes = None;
    let vtype = |c: &crate::netlist::Component| match c.kind {
        Kind::DcSource(_) | Kind::Capacitor(_) => true,
        Kind::Switch { .. } | Kind::Diode => config.is_on(&c.name),
        _ => false,
    };
    for c in netlist.components.iter().filter(|c| vtype(c)) {
        let (a, b) = (find(&mut parent, idx[c.node_a.as_str()]), find(&mut parent, idx[c.node_b.as_str()]));
        if a == b && loop_nodes.is_none() {
            loop_nodes = Some(vec![c.node_a.clone(), c.node_b.clone(), format!("(loop closed by {})", c.name)]);
        }
        parent[a] = b;
    }
    for c in netlist.components.iter().filter(|c| matches!(c.kind, Kind::Resistor(_) | Kind::Switch { .. } | Kind::Diode)) {
        let (a, b) = (find(&mut parent, idx[c.node_a.as_str()]), find(&mut parent, idx[c.node_b.as_str()]));
        parent[a] = b;
    }
    let g = find(&mut parent, 0);
    let floating: Vec<String> =
        nodes.iter().filter(|n| find(&mut parent, idx[n.as_str()]) != g).cloned().collect();
    if !floating.is_empty() {
        floating
    } else {
        loop_nodes.unwrap_or_default()
    }
}

/// Output labels in order: node voltages, then per component `V(name)` and `I(name)`.
fn output_labels(netlist: &Netlist, nodes: &[String]) -> Vec<String> {
    let mut labels: Vec<String> = nodes.iter().map(|n| format!("V({n})")).collect();
    for c in &netlist.components {
        labels.push(format!("V({})", c.name));
        labels.push(format!("I({})", c.name));
    }
    labels
}

/// Builds the state-space model of one phase.
pub fn assemble_phase(netlist: &Netlist, config: &SwitchConfig, r: &SwitchResistances) -> Result<StateSpaceModel> {
    r.validate()?;
    let mna = Mna::build(netlist, config, r)?;
    let (gx, gu, g0) = mna.affine(netlist, config)?;
    let n = mna.n_states;
    let m = mna.n_inputs;

    // probe -> affine row (c, d, f)
    let lift = |p: &Probe| -> (Vec<f64>, Vec<f64>, f64) {
        let mut c = vec![0.0; n];
        let mut d = vec![0.0; m];
        let mut f = 0.0;
        for &(i, s) in &p.w {
            for j in 0..n {
                c[j] += s * gx[(i, j)];
            }
            for j in 0..m {
                d[j] += s * gu[(i, j)];
            }
            f += s * g0[i];
        }
        for &(j, s) in &p.x {
            c[j] += s;
        }
        (c, d, f)
    };

    let labels = output_labels(netlist, &mna.nodes);
    let mut rows = Vec::with_capacity(labels.len());
    for i in 0..mna.nodes.len() {
        rows.push(lift(&Probe { w: vec![(i, 1.0)], x: vec![] }));
    }
    for k in 0..netlist.components.len() {
        rows.push(lift(&mna.voltage[k]));
        rows.push(lift(&mna.current[k]));
    }
    let nout = rows.len();
    let mut c = DMatrix::zeros(nout, n);
    let mut d = DMatrix::zeros(nout, m);
    let mut f = DVector::zeros(nout);
    for (i, (cr, dr, fr)) in rows.iter().enumerate() {
        for j in 0..n {
            c[(i, j)] = cr[j];
        }
        for j in 0..m {
            d[(i, j)] = dr[j];
        }
        f[i] = *fr;
    }
    let mut index = HashMap::new();
    for (i, l) in labels.iter().enumerate() {
        index.entry(l.clone()).or_insert(i);
    }
    // component rows win over node rows on a label clash
    let nn = mna.nodes.len();
    for (i, l) in labels.iter().enumerate().skip(nn) {
        index.insert(l.clone(), i);
    }

    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, m);
    let mut e = DVector::zeros(n);
    let mut diode_rows = Vec::new();
    let mut state = 0;
    let comp_row = |k: usize| nn + 2 * k;
    for (k, comp) in netlist.components.iter().enumerate() {
        if let Kind::Inductor(l) = comp.kind {
            let row = comp_row(k);
            set_row(&mut a, &mut b, &mut e, state, &c, &d, &f, row, 1.0 / l);
            state += 1;
        }
    }
    for (k, comp) in netlist.components.iter().enumerate() {
        if let Kind::Capacitor(cap) = comp.kind {
            let row = comp_row(k) + 1;
            set_row(&mut a, &mut b, &mut e, state, &c, &d, &f, row, 1.0 / cap);
            state += 1;
        }
        if let Kind::Diode = comp.kind {
            diode_rows.push(DiodeProbe {
                name: comp.name.clone(),
                conducting: config.is_on(&comp.name),
                current_row: comp_row(k) + 1,
                voltage_row: comp_row(k),
            });
        }
    }
    if a.iter().any(|v: &f64| !v.is_finite()) {
        return Err(Error::SingularMna { nodes: singular_nodes(netlist, config) });
    }
    Ok(StateSpaceModel {
        a_matrix: a,
        b_matrix: b,
        e_vector: e,
        state_labels: state_labels(netlist),
        input_labels: input_labels(netlist),
        output_map: OutputMap { labels, c, d, f, index },
        config: config.clone(),
        diode_rows,
    })
}

#[allow(clippy::too_many_arguments)]
fn set_row(
    a: &mut DMatrix<f64>,
    b: &mut DMatrix<f64>,
    e: &mut DVector<f64>,
    state: usize,
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
    f: &DVector<f64>,
    row: usize,
    scale: f64,
) {
    a.set_row(state, &(c.row(row) * scale));
    b.set_row(state, &(d.row(row) * scale));
    e[state] = f[row] * scale;
}

/// Result of a resistive solve with all reactive elements clamped.
#[derive(Debug, Clone, Default)]
pub struct DcSolution {
    pub node_voltages: BTreeMap<String, f64>,
    /// Voltage across each inductor (node_a − node_b).
    pub v_ind: BTreeMap<String, f64>,
    /// Current through each capacitor (node_a → node_b).
    pub i_cap: BTreeMap<String, f64>,
    /// Every output of the phase model: `V(node)`, `V(name)`, `I(name)`.
    pub values: BTreeMap<String, f64>,
}

/// Solves the resistive network with capacitors clamped to fixed voltages and
/// inductors to fixed currents. Missing clamp entries default to zero.
pub fn dc_solve(
    netlist: &Netlist,
    config: &SwitchConfig,
    clamp: &BTreeMap<String, f64>,
    r: &SwitchResistances,
) -> Result<DcSolution> {
    for key in clamp.keys() {
        let ok = netlist.find(key).is_some_and(|c| matches!(c.kind, Kind::Inductor(_) | Kind::Capacitor(_)));
        if !ok {
            return Err(Error::ConfigMismatch(format!("clamp key {key} is not an inductor or capacitor")));
        }
    }
    let x = clamp_vector(netlist, clamp);
    let u = input_vector(netlist);
    let mna = Mna::build(netlist, config, r)?;
    let (gx, gu, g0) = mna.affine(netlist, config)?;
    let w = &gx * &x + &gu * &u + &g0;
    let mut sol = DcSolution::default();
    for (i, n) in mna.nodes.iter().enumerate() {
        sol.node_voltages.insert(n.clone(), w[i]);
        sol.values.insert(format!("V({n})"), w[i]);
    }
    for (k, c) in netlist.components.iter().enumerate() {
        let v = mna.voltage[k].eval(&w, &x);
        let i = mna.current[k].eval(&w, &x);
        sol.values.insert(format!("V({})", c.name), v);
        sol.values.insert(format!("I({})", c.name), i);
        match c.kind {
            Kind::Inductor(_) => {
                sol.v_ind.insert(c.name.clone(), v);
            }
            Kind::Capacitor(_) => {
                sol.i_cap.insert(c.name.clone(), i);
            }
            _ => {}
        }
    }
    Ok(sol)
}

/// State vector from a name → value map (inductor amps, capacitor volts).
pub fn clamp_vector(netlist: &Netlist, clamp: &BTreeMap<String, f64>) -> DVector<f64> {
    let lookup = |name: &str| {
        clamp.iter().find(|(k, _)| k.eq_ignore_ascii_case(name)).map(|(_, v)| *v).unwrap_or(0.0)
    };
    DVector::from_iterator(
        netlist.inductors().count() + netlist.capacitors().count(),
        netlist.inductors().chain(netlist.capacitors()).map(|c| lookup(&c.name)),
    )
}

/// Determines diode conduction for a given gate state and instantaneous state
/// vector, starting from all diodes blocking.
pub fn resolve_diodes(netlist: &Netlist, gate_on: bool, x: &DVector<f64>, r: &SwitchResistances) -> Result<SwitchConfig> {
    resolve_diodes_from(netlist, &SwitchConfig::gate_only(netlist, gate_on), x, r)
}

/// Fixed-point diode resolution seeded with `start` (switch states are kept).
/// Each iteration flips the single worst-violating diode.
pub fn resolve_diodes_from(
    netlist: &Netlist,
    start: &SwitchConfig,
    x: &DVector<f64>,
    r: &SwitchResistances,
) -> Result<SwitchConfig> {
    let u = input_vector(netlist);
    resolve_with(netlist, start, x, &u, r, |cfg| assemble_phase(netlist, cfg, r).map(Rc::new))
}

pub(crate) fn resolve_with<F>(
    netlist: &Netlist,
    start: &SwitchConfig,
    x: &DVector<f64>,
    u: &DVector<f64>,
    r: &SwitchResistances,
    mut model_for: F,
) -> Result<SwitchConfig>
where
    F: FnMut(&SwitchConfig) -> Result<Rc<StateSpaceModel>>,
{
    let cap = 2 * netlist.count('D') + 8;
    let mut config = start.clone();
    let mut visited: Vec<SwitchConfig> = Vec::new();
    for _ in 0..cap {
        let model = model_for(&config)?;
        match model.worst_violation(x, u, r) {
            None => return Ok(config),
            Some(name) => {
                visited.push(config.clone());
                let on = config.is_on(&name);
                config.set(&name, !on);
            }
        }
    }
    visited.push(config);
    Err(Error::DiodeNonConvergent { cycle: visited.iter().map(SwitchConfig::describe).collect() })
}
