//! Oracles and generators shared by the integration tests and the
//! acceptance runner.
#![allow(dead_code)]

use std::collections::BTreeMap;

use cukbench_core::netlist::{Component, Kind, GROUND};
use cukbench_core::{parse_netlist, simulate, Integrator, Netlist, PwmSpec, SimParams, SwitchResistances};
use proptest::prelude::*;

/// Largest KCL imbalance over all nodes, relative to the largest branch current.
pub fn kcl_residual(n: &Netlist, values: &BTreeMap<String, f64>) -> f64 {
    let mut sums: BTreeMap<&str, f64> = BTreeMap::new();
    let mut scale: f64 = 1e-12;
    for c in &n.components {
        let i = values[&format!("I({})", c.name)];
        scale = scale.max(i.abs());
        *sums.entry(c.node_a.as_str()).or_default() -= i;
        *sums.entry(c.node_b.as_str()).or_default() += i;
    }
    sums.values().fold(0.0f64, |m, s| m.max(s.abs())) / scale
}

pub fn value() -> impl Strategy<Value = f64> {
    prop_oneof![
        (1u32..1000, -12i32..7).prop_map(|(m, e)| format!("{m}e{e}").parse().unwrap()),
        (1e-12f64..1e7),
    ]
}

fn component(name: String, kind: Kind, a: &str, b: &str) -> Component {
    Component { name, kind, node_a: a.into(), node_b: b.into() }
}

/// Random valid netlists: a grounded source plus components whose terminals
/// are drawn from a small node pool; every used node is then given a second
/// connection so the floating-node check passes.
pub fn netlist() -> impl Strategy<Value = Netlist> {
    let comp = (0usize..6, 0usize..5, 0usize..5, value(), any::<bool>());
    (
        "[a-z][a-z0-9_]{0,8}",
        value(),
        prop::collection::vec(comp, 1..12),
        prop::option::of((value(), 0.01f64..0.99)),
    )
        .prop_map(|(title, vin, comps, pwm)| {
            let pool = ["0", "n1", "n2", "sw", "out"];
            let mut components = vec![component("V1".into(), Kind::DcSource(vin), "n1", GROUND)];
            for (i, (kind, a, b, v, flag)) in comps.into_iter().enumerate() {
                let b = if a == b { (b + 1) % pool.len() } else { b };
                let (prefix, kind) = match kind {
                    0 => ("R", Kind::Resistor(v)),
                    1 => ("L", Kind::Inductor(v)),
                    2 => ("C", Kind::Capacitor(v)),
                    3 => ("V", Kind::DcSource(if flag { -v } else { v })),
                    4 => ("S", Kind::Switch { gate: if flag { "pwm1".into() } else { "g2".into() } }),
                    _ => ("D", Kind::Diode),
                };
                components.push(component(format!("{prefix}{}", i + 2), kind, pool[a], pool[b]));
            }
            let mut net = Netlist { title, components, pwm: None };
            for (i, node) in net.nodes().into_iter().enumerate() {
                let degree = net.components.iter().filter(|c| c.node_a == node || c.node_b == node).count();
                if degree < 2 {
                    net.components.push(component(format!("RX{i}"), Kind::Resistor(1.0), &node, GROUND));
                }
            }
            net.pwm = pwm.map(|(f, d)| PwmSpec { freq_hz: f, duty: d, gate_name: "pwm1".into() });
            net
        })
}

// The PWM-driven switch sits in an isolated branch so the RC and LC parts
// evolve as unswitched linear circuits with closed-form solutions.
pub const RC: &str = "V1 in 0 10\nR1 in a 1k\nC1 a 0 1u\nS1 b 0 gate=g\nR2 b 0 1\n.pwm g freq=1k duty=0.5\n";
pub const LC: &str = "L1 a 0 1m\nC1 a 0 1u\nS1 b 0 gate=g\nR2 b 0 1\n.pwm g freq=5k duty=0.5\n";

/// Largest deviation from `10·(1 − e^(−t/τ))` over 2 ms with `steps` per period.
pub fn rc_error(steps: usize, integrator: Integrator) -> f64 {
    let n = parse_netlist(RC).unwrap();
    let pwm = n.pwm.clone().unwrap();
    let mut p = SimParams::new(2e-3);
    p.dt = Some(pwm.period() / steps as f64);
    p.integrator = integrator;
    p.record = Some(vec!["V(C1)".into()]);
    let trace = simulate(&n, &pwm, &p, &SwitchResistances::default()).unwrap();
    let tau = 1e3 * 1e-6;
    trace.signals["V(C1)"]
        .iter()
        .zip(trace.time())
        .map(|(v, t)| (v - 10.0 * (1.0 - (-t / tau).exp())).abs())
        .fold(0.0, f64::max)
}

/// Largest relative change of the stored LC energy at period boundaries.
pub fn lc_energy_drift(periods: usize) -> f64 {
    let n = parse_netlist(LC).unwrap();
    let pwm = n.pwm.clone().unwrap();
    let mut p = SimParams::new(periods as f64 * pwm.period());
    p.record = Some(vec![]);
    p.warm_start = Some(vec![0.0, 1.0]);
    let trace = simulate(&n, &pwm, &p, &SwitchResistances::default()).unwrap();
    assert_eq!(trace.complete_cycles(), periods);
    let energy = |x: &[f64]| 0.5 * 1e-3 * x[0] * x[0] + 0.5 * 1e-6 * x[1] * x[1];
    let e0 = energy(&trace.cycle_states[0]);
    trace.cycle_states.iter().map(|x| (energy(x) - e0).abs() / e0).fold(0.0, f64::max)
}
