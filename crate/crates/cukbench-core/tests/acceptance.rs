//! Acceptance runner: one PASS/FAIL line per criterion.
//!
//! Failures are reported, not hidden. The process exits 0 so the rest of the
//! test suite stays usable; set `CUKBENCH_ACCEPTANCE_STRICT=1` to exit 1 when
//! any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::{kcl_residual, lc_energy_drift, netlist, rc_error};
use cukbench_core::mna::input_vector;
use cukbench_core::transient::{periodic_steady_state, V_OUT};
use cukbench_core::{
    assemble_phase, builtin, check_phase_relations, cycle_average, detect_steady_state, gain_formula, parse_netlist,
    serialize_netlist, simulate, sweep_duty, volt_second_solve, Integrator, Netlist, PwmSpec, SimParams,
    SweepOptions, SwitchConfig, SwitchResistances, TopologyId,
};
use nalgebra::DVector;
use proptest::prelude::*;
use proptest::strategy::ValueTree;
use proptest::test_runner::{Config, TestRunner};

const PROPOSED: [TopologyId; 3] = [TopologyId::Proposed1, TopologyId::Proposed2, TopologyId::Proposed3];

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome { pass, detail: detail.into() }
    }
}

fn defaults(id: TopologyId) -> (Netlist, PwmSpec) {
    builtin(id, &BTreeMap::new()).unwrap()
}

fn rel(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs()
}

fn gain_reproduction() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (id, want) in PROPOSED.into_iter().zip([10.0, 20.0, 29.0]) {
        let (n, _) = defaults(id);
        let ss = volt_second_solve(&n, 0.9, &SwitchResistances::ideal(), None).unwrap();
        worst = worst.max((ss.gain_mag - want).abs());
        parts.push(format!("{id} {:.9}", ss.gain_mag));
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(worst <= 1e-6 && secs < 1.0, format!("{}; max error {worst:.1e}; {secs:.2} s", parts.join(", ")))
}

fn design_operating_points() -> Outcome {
    // cold start from zero state for 3000 periods; |V_out| is the mean of the
    // last 100 cycle averages
    let start = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    for (id, want) in PROPOSED.into_iter().zip([25.0, 50.0, 70.0]) {
        let (n, pwm) = defaults(id);
        let mut p = SimParams::new(3000.0 * pwm.period());
        p.record = Some(vec![]);
        let trace = simulate(&n, &pwm, &p, &SwitchResistances::ideal()).unwrap();
        let c = trace.complete_cycles();
        let v = (c - 100..c).map(|i| cycle_average(&trace, V_OUT, i).unwrap()).sum::<f64>().abs() / 100.0;
        ok &= rel(v, want) <= 0.02;
        parts.push(format!("{id} {v:.3} V ({:+.2}%)", 100.0 * (v / want - 1.0)));
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(ok && secs < 60.0, format!("{}; {secs:.1} s", parts.join(", ")))
}

fn gain_curve_shape() -> Outcome {
    let grid: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
    let mut ok = true;
    let mut notes = Vec::new();
    for id in PROPOSED {
        let (n, pwm) = defaults(id);
        let res = sweep_duty(&n, &pwm, &grid, &SweepOptions::default(), &SwitchResistances::ideal()).unwrap();
        let mut worst_avg: f64 = 0.0;
        let mut misses = Vec::new();
        for row in &res.rows {
            let f = row.gain_formula.unwrap();
            worst_avg = worst_avg.max(rel(row.gain_avg.unwrap(), f));
            if [0.3, 0.5, 0.8].iter().any(|k| (row.k - k).abs() < 1e-9) {
                let e = rel(row.gain_transient.unwrap(), f);
                if e > 0.02 {
                    misses.push(format!("k={} {:+.1}%", row.k, 100.0 * (row.gain_transient.unwrap() / f - 1.0)));
                }
            }
        }
        let increasing = |g: fn(&cukbench_core::Row) -> Option<f64>| res.rows.windows(2).all(|w| g(&w[1]) > g(&w[0]));
        let monotone = increasing(|r| r.gain_formula) && increasing(|r| r.gain_avg) && increasing(|r| r.gain_transient);
        let pass = worst_avg <= 1e-6 && misses.is_empty() && monotone;
        ok &= pass;
        let transient = if misses.is_empty() { "transient within 2%".to_string() } else { format!("transient off {}", misses.join(" ")) };
        notes.push(format!("{id}: avg err {worst_avg:.0e}, {transient}{}", if monotone { "" } else { ", not increasing" }));
    }
    if !ok {
        notes.push("misses are discontinuous conduction at light duty with the default L and load".into());
    }
    Outcome::new(ok, notes.join("; "))
}

// Cycle averages at the periodic orbit. The exact average of a capacitor
// current is C·Δv/T (of an inductor voltage L·Δi/T), which is also what the
// trapezoidal update integrates. The left-point sample mean is reported next
// to it: switching edges and the capacitor-diode charge spikes make that
// quadrature first order in dt, so it is shown at two grids.
fn balance() -> Outcome {
    let r = SwitchResistances::ideal();
    let mut ok = true;
    let mut parts = Vec::new();
    for id in TopologyId::ALL {
        let (n, pwm) = defaults(id);
        let v_in = n.v_in().unwrap();
        let ss = volt_second_solve(&n, pwm.duty, &r, None).unwrap();
        let mut sample_means = Vec::new();
        let mut exact = (0.0, 0.0);
        let mut steady = true;
        for steps in [1000, 20_000] {
            let mut p = SimParams::new(3.0 * pwm.period());
            p.record = Some(vec![]);
            p.dt = Some(pwm.period() / steps as f64);
            let orbit = periodic_steady_state(&n, &pwm, &p, &r, &ss.state_vector(&n)).unwrap();
            p.warm_start = Some(orbit.state);
            let trace = simulate(&n, &pwm, &p, &r).unwrap();
            steady &= detect_steady_state(&trace, 1e-5).is_some();
            let last = trace.complete_cycles() - 1;
            let i_load = cycle_average(&trace, V_OUT, last).unwrap().abs() / id.default_rload();
            let sampled = |prefix: char, kind: &str| {
                n.components
                    .iter()
                    .filter(|c| c.kind.prefix() == prefix)
                    .map(|c| cycle_average(&trace, &format!("{kind}({})", c.name), last).unwrap().abs())
                    .fold(0.0, f64::max)
            };
            sample_means.push((sampled('L', "V") / v_in, sampled('C', "I") / i_load));
            if steps == 1000 {
                let (x0, x1) = (&trace.cycle_states[last], &trace.cycle_states[last + 1]);
                let t = pwm.period();
                let (mut vl, mut ic) = (0.0f64, 0.0f64);
                for (i, label) in trace.state_labels.iter().enumerate() {
                    let name = &label[2..label.len() - 1];
                    let value = n.find(name).and_then(|c| c.kind.value()).unwrap();
                    let avg = (value * (x1[i] - x0[i]) / t).abs();
                    if label.starts_with("I(") {
                        vl = vl.max(avg / v_in);
                    } else {
                        ic = ic.max(avg / i_load);
                    }
                }
                exact = (vl, ic);
            }
        }
        let pass = steady && exact.0 <= 1e-3 && exact.1 <= 1e-3;
        ok &= pass;
        let [(v1, c1), (v2, c2)] = [sample_means[0], sample_means[1]];
        parts.push(format!(
            "{id} <V_L>/V_in {:.0e} <I_C>/I_load {:.0e} (sample means N=1000 {v1:.0e}/{c1:.0e}, N=20000 {v2:.0e}/{c2:.0e}){}",
            exact.0,
            exact.1,
            if steady { "" } else { " not steady" }
        ));
    }
    Outcome::new(ok, parts.join(", "))
}

fn second_converter_voltages() -> Outcome {
    let (n, _) = defaults(TopologyId::Proposed2);
    let ss = volt_second_solve(&n, 0.8, &SwitchResistances::ideal(), None).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, want) in [("C2", 5.0), ("C3", 15.0), ("C4", 20.0), ("Co", 50.0)] {
        let v = ss.v_cap[name].abs();
        let pass = rel(v, want) <= 0.005;
        ok &= pass;
        parts.push(format!("|V_{name}| {v:.4} (want {want}{})", if pass { "" } else { ", MISS" }));
    }
    let relations = check_phase_relations(&n, &ss).unwrap().max_residual();
    parts.push(format!("phase relations residual {relations:.1e}"));
    if !ok {
        parts.push("C3 is a cell capacitor at V_1 in this network; see the decisions ledger".into());
    }
    Outcome::new(ok, parts.join(", "))
}

fn loss_behaviour() -> Outcome {
    let (n, pwm) = defaults(TopologyId::Proposed1);
    let r = SwitchResistances::lossy();
    let avg = volt_second_solve(&n, 0.8, &r, None).unwrap().v_out.abs();
    let res = sweep_duty(&n, &pwm, &[0.5, 0.8, 0.9], &SweepOptions::default(), &r).unwrap();
    let v_tr = res.rows[1].gain_transient.unwrap() * n.v_in().unwrap();
    let (e5, e9) = (res.rows[0].efficiency, res.rows[2].efficiency);
    let in_band = |v: f64| v > 20.0 && v < 25.0;
    let trend = matches!((e5, e9), (Some(a), Some(b)) if b < a);
    let fmt = |e: Option<f64>| e.map_or("n/a".into(), |e| format!("{e:.4}"));
    Outcome::new(
        in_band(avg) && in_band(v_tr) && trend,
        format!("V_out at k=0.8 averaged {avg:.3} V, transient {v_tr:.3} V; efficiency k=0.5 {} > k=0.9 {}", fmt(e5), fmt(e9)),
    )
}

fn numerical_soundness() -> Outcome {
    let errors: Vec<f64> = [20, 40, 80, 160].iter().map(|&s| rc_error(s, Integrator::Trapezoidal)).collect();
    let ratio = errors.windows(2).map(|w| w[0] / w[1]).fold(f64::INFINITY, f64::min);
    let drift = lc_energy_drift(100);

    // KCL over every switching configuration of every built-in at random states
    let mut rng = TestRunner::deterministic();
    let mut kcl: f64 = 0.0;
    for id in TopologyId::ALL {
        let (n, _) = defaults(id);
        let names: Vec<String> = n.switching().map(|c| c.name.clone()).collect();
        let dim = n.inductors().count() + n.capacitors().count();
        for bits in 0..1u32 << names.len() {
            let cfg = SwitchConfig {
                states: names.iter().enumerate().map(|(i, name)| (name.clone(), bits >> i & 1 == 1)).collect(),
            };
            for r in [SwitchResistances::default(), SwitchResistances::lossy()] {
                let model = assemble_phase(&n, &cfg, &r).unwrap();
                for _ in 0..4 {
                    let xs = prop::collection::vec(-50.0f64..50.0, dim).new_tree(&mut rng).unwrap().current();
                    let y = model.output_map.eval(&DVector::from_vec(xs), &input_vector(&n));
                    let values = model.output_map.labels.iter().cloned().zip(y.iter().copied()).collect();
                    kcl = kcl.max(kcl_residual(&n, &values));
                }
            }
        }
    }
    Outcome::new(
        ratio >= 3.6 && drift <= 1e-9 && kcl <= 1e-9,
        format!("RC error ratio per halving ≥ {ratio:.3}, LC energy drift {drift:.1e}, KCL residual {kcl:.1e}"),
    )
}

fn parser_robustness() -> Outcome {
    let builtins = TopologyId::ALL.into_iter().all(|id| {
        let (n, _) = defaults(id);
        parse_netlist(&serialize_netlist(&n)).is_ok_and(|back| back == n)
    });
    let mut runner = TestRunner::new(Config { cases: 1000, failure_persistence: None, ..Config::default() });
    let random = runner.run(&netlist(), |n| {
        let back = parse_netlist(&serialize_netlist(&n)).unwrap();
        prop_assert_eq!(back, n);
        Ok(())
    });
    let mut runner = TestRunner::new(Config { cases: 10_000, failure_persistence: None, ..Config::default() });
    let fuzz = runner.run(&prop::collection::vec(any::<u8>(), 0..400), |bytes| {
        let _ = parse_netlist(&String::from_utf8_lossy(&bytes));
        Ok(())
    });
    Outcome::new(
        builtins && random.is_ok() && fuzz.is_ok(),
        format!(
            "built-ins {}, 1000 random netlists {}, 10000 byte-fuzz inputs {}",
            if builtins { "ok" } else { "MISMATCH" },
            describe(&random),
            describe(&fuzz),
        ),
    )
}

fn describe<T: std::fmt::Debug>(r: &Result<(), proptest::test_runner::TestError<T>>) -> String {
    match r {
        Ok(()) => "ok".into(),
        Err(e) => format!("{e}"),
    }
}

fn main() {
    type Check = fn() -> Outcome;
    let criteria: [(&str, Check); 8] = [
        ("gain formula reproduction at k=0.9", gain_reproduction),
        ("design-table output voltages at k=0.8", design_operating_points),
        ("gain-curve shape over the duty sweep", gain_curve_shape),
        ("volt-second and charge balance at k=0.8", balance),
        ("second converter capacitor voltages", second_converter_voltages),
        ("loss behaviour of proposed1", loss_behaviour),
        ("numerical soundness", numerical_soundness),
        ("parser robustness", parser_robustness),
    ];
    // sanity: the formulas the criteria compare against
    assert_eq!(gain_formula(TopologyId::Proposed3, 0.9).unwrap().abs().round(), 29.0);

    let mut failed = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|e| Outcome::new(false, format!("panicked: {:?}", e.downcast_ref::<String>())));
        failed += usize::from(!outcome.pass);
        println!(
            "{} criterion {} ({name}): {} [{:.1} s]",
            if outcome.pass { "PASS" } else { "FAIL" },
            i + 1,
            outcome.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {}/8 criteria passed", 8 - failed);
    if failed > 0 && std::env::var_os("CUKBENCH_ACCEPTANCE_STRICT").is_some_and(|v| v == "1") {
        std::process::exit(1);
    }
}
