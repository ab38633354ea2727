use std::collections::BTreeMap;

use cukbench_core::{
    builtin, check_phase_relations, gain_formula, parse_netlist, volt_second_solve, Error, Netlist, SwitchResistances,
    TopologyId,
};
use proptest::prelude::*;

fn net(id: TopologyId, overrides: &[(&str, f64)]) -> Netlist {
    let ov: BTreeMap<String, f64> = overrides.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    builtin(id, &ov).unwrap().0
}

const DUTIES: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

#[test]
fn ideal_gain_matches_closed_form() {
    for id in TopologyId::ALL {
        let n = net(id, &[]);
        for k in DUTIES {
            let ss = volt_second_solve(&n, k, &SwitchResistances::ideal(), None).unwrap();
            // output polarity is topology-defined; compare magnitudes
            let want = gain_formula(id, k).unwrap().abs();
            assert!((ss.gain_mag - want).abs() <= 1e-6 * want, "{id} k={k}: {} vs {want}", ss.gain_mag);
            assert!(ss.residual <= 1e-9, "{id} k={k}: residual {}", ss.residual);
        }
    }
}

#[test]
fn cuk_operating_point_by_hand() {
    // C1 holds V_in/(1−k); inductor currents follow from the load current and
    // lossless power transfer.
    let n = net(TopologyId::ClassicalCuk, &[]);
    let (vin, r, k) = (5.0, 100.0, 0.6);
    let ss = volt_second_solve(&n, k, &SwitchResistances::ideal(), None).unwrap();
    let vout = -k / (1.0 - k) * vin;
    approx::assert_relative_eq!(ss.v_out, vout, max_relative = 1e-9);
    approx::assert_relative_eq!(ss.v_cap["C1"], vin / (1.0 - k), max_relative = 1e-9);
    approx::assert_relative_eq!(ss.v_cap["Co"], vout, max_relative = 1e-9);
    approx::assert_relative_eq!(ss.i_ind["L1"], vout * vout / r / vin, max_relative = 1e-9);
    approx::assert_relative_eq!(ss.i_ind["L2"].abs(), vout.abs() / r, max_relative = 1e-9);
    assert_eq!(ss.phase_configs[0].describe(), "{S1}");
    assert_eq!(ss.phase_configs[1].describe(), "{D0}");
}

#[test]
fn ideal_converters_are_lossless() {
    for id in TopologyId::ALL {
        let n = net(id, &[]);
        let rload = id.default_rload();
        let ss = volt_second_solve(&n, 0.7, &SwitchResistances::ideal(), None).unwrap();
        let p_out = ss.v_out * ss.v_out / rload;
        let p_in = ss.v_in * ss.i_ind["L1"];
        approx::assert_relative_eq!(p_out, p_in, max_relative = 1e-9);
    }
}

#[test]
fn charge_pump_capacitor_voltages() {
    let n = net(TopologyId::Proposed2, &[]);
    let ss = volt_second_solve(&n, 0.8, &SwitchResistances::ideal(), None).unwrap();
    for (name, v) in [("C1", 25.0), ("C2", 5.0), ("C3", -5.0), ("C4", -20.0), ("Co", 50.0)] {
        assert!((ss.v_cap[name] - v).abs() <= 1e-6, "{name}: {}", ss.v_cap[name]);
    }
}

#[test]
fn phase_relations_hold_at_the_averaged_point() {
    for id in TopologyId::ALL {
        let n = net(id, &[]);
        for k in [0.3, 0.6, 0.8] {
            let ss = volt_second_solve(&n, k, &SwitchResistances::ideal(), None).unwrap();
            let report = check_phase_relations(&n, &ss).unwrap();
            assert!(!report.relations.is_empty());
            assert!(report.max_residual() <= 1e-9 * ss.v_in.max(1.0), "{id} k={k}: {:?}", report.relations);
        }
    }
    let custom = parse_netlist("V1 in 0 5\nS1 in a gate=g\nD1 0 a\nL1 a o 1m\nC1 o 0 10u\nR1 o 0 10\n.pwm g freq=50k duty=0.5\n").unwrap();
    let ss = volt_second_solve(&custom, 0.5, &SwitchResistances::ideal(), None).unwrap();
    assert!(matches!(check_phase_relations(&custom, &ss), Err(Error::NotBuiltin)));
}

#[test]
fn buck_netlist_without_built_in_formula() {
    // the averaged solver treats any netlist; a buck gives k·V_in
    let n = parse_netlist("V1 in 0 12\nS1 in a gate=g\nD1 0 a\nL1 a o 1m\nC1 o 0 10u\nR1 o 0 10\n.pwm g freq=50k duty=0.5\n").unwrap();
    for k in [0.25, 0.5, 0.75] {
        let ss = volt_second_solve(&n, k, &SwitchResistances::ideal(), None).unwrap();
        approx::assert_relative_eq!(ss.v_out, 12.0 * k, max_relative = 1e-9);
    }
}

#[test]
fn rejects_bad_duty() {
    let n = net(TopologyId::Proposed1, &[]);
    for k in [0.0, 1.0, -0.2, f64::NAN] {
        assert!(matches!(volt_second_solve(&n, k, &SwitchResistances::ideal(), None), Err(Error::InvalidDuty(_))));
        assert!(gain_formula(TopologyId::Proposed1, k).is_err());
    }
}

#[test]
fn lossy_model_brackets_proposed1() {
    let n = net(TopologyId::Proposed1, &[]);
    let ss = volt_second_solve(&n, 0.8, &SwitchResistances::lossy(), None).unwrap();
    assert!(ss.v_out.abs() > 20.0 && ss.v_out.abs() < 25.0, "{}", ss.v_out);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn output_scales_with_input(
        id in prop::sample::select(TopologyId::ALL.to_vec()),
        k in 0.1f64..0.9,
        vin in 1.0f64..48.0,
    ) {
        let r = SwitchResistances::ideal();
        let base = volt_second_solve(&net(id, &[("vin", 1.0)]), k, &r, None).unwrap();
        let scaled = volt_second_solve(&net(id, &[("vin", vin)]), k, &r, None).unwrap();
        prop_assert!((scaled.v_out - vin * base.v_out).abs() <= 1e-9 * (vin * base.v_out).abs());
        prop_assert!((scaled.gain - base.gain).abs() <= 1e-9 * base.gain.abs());
    }

    #[test]
    fn gain_grows_with_duty(id in prop::sample::select(TopologyId::ALL.to_vec()), k in 0.1f64..0.85, dk in 0.01f64..0.05) {
        let n = net(id, &[]);
        let r = SwitchResistances::ideal();
        let lo = volt_second_solve(&n, k, &r, None).unwrap();
        let hi = volt_second_solve(&n, k + dk, &r, None).unwrap();
        prop_assert!(hi.gain_mag > lo.gain_mag);
    }

    #[test]
    fn losses_reduce_gain(id in prop::sample::select(TopologyId::ALL.to_vec()), k in 0.2f64..0.9) {
        let n = net(id, &[]);
        let ideal = volt_second_solve(&n, k, &SwitchResistances::ideal(), None).unwrap();
        let lossy = volt_second_solve(&n, k, &SwitchResistances::lossy(), None).unwrap();
        prop_assert!(lossy.gain_mag < ideal.gain_mag, "{} vs {}", lossy.gain_mag, ideal.gain_mag);
    }
}
