use std::collections::BTreeMap;

use cukbench_core::sweep::{duty_grid, format_number, to_csv, Provenance};
use cukbench_core::{
    builtin, export_csv, parse_netlist, render_plot, simulate, sweep_duty, Error, Methods, Row, SimParams,
    SweepOptions, SweepResult, SwitchResistances, TopologyId,
};
use proptest::prelude::*;

fn result(rows: Vec<Row>) -> SweepResult {
    SweepResult { rows, topology: Provenance::Builtin(TopologyId::Proposed1), losses: SwitchResistances::ideal() }
}

fn row(k: f64, g: f64) -> Row {
    Row { k, gain_formula: Some(g), gain_avg: Some(g), gain_transient: None, efficiency: None, steady_cycle: None }
}

#[test]
fn duty_grids() {
    assert_eq!(duty_grid(0.1, 0.9, 0.1).unwrap(), vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]);
    assert_eq!(duty_grid(0.5, 0.5, 0.1).unwrap(), vec![0.5]);
    assert!(duty_grid(0.5, 0.4, 0.1).is_err());
    assert!(duty_grid(0.1, 0.9, 0.0).is_err());
}

#[test]
fn formula_only_single_point() {
    let (n, pwm) = builtin(TopologyId::Proposed3, &BTreeMap::new()).unwrap();
    let opts = SweepOptions { methods: Methods { formula: true, averaged: false, transient: false }, ..Default::default() };
    let res = sweep_duty(&n, &pwm, &[0.5], &opts, &SwitchResistances::ideal()).unwrap();
    assert_eq!(res.rows.len(), 1);
    let r = &res.rows[0];
    assert_eq!(r.gain_formula, Some(5.0));
    assert_eq!((r.gain_avg, r.gain_transient, r.efficiency), (None, None, None));
    assert_eq!(res.topology, Provenance::Builtin(TopologyId::Proposed3));
}

#[test]
fn rejects_bad_grids() {
    let (n, pwm) = builtin(TopologyId::Proposed1, &BTreeMap::new()).unwrap();
    let r = SwitchResistances::ideal();
    let opts = SweepOptions { methods: Methods::FAST, ..Default::default() };
    assert!(matches!(sweep_duty(&n, &pwm, &[], &opts, &r), Err(Error::InvalidParams(_))));
    assert!(matches!(sweep_duty(&n, &pwm, &[0.5, 1.0], &opts, &r), Err(Error::InvalidDuty(_))));
    assert!(matches!(sweep_duty(&n, &pwm, &[0.5, 0.5], &opts, &r), Err(Error::InvalidParams(_))));
    // rows come back sorted
    let res = sweep_duty(&n, &pwm, &[0.7, 0.2, 0.5], &opts, &r).unwrap();
    assert_eq!(res.rows.iter().map(|r| r.k).collect::<Vec<_>>(), vec![0.2, 0.5, 0.7]);
}

#[test]
fn custom_netlist_has_no_formula() {
    let n = parse_netlist(".title buck\nV1 in 0 12\nS1 in a gate=g\nD1 0 a\nL1 a o 1m\nC1 o 0 10u\nR1 o 0 10\n.pwm g freq=50k duty=0.5\n")
        .unwrap();
    let pwm = n.pwm.clone().unwrap();
    let res = sweep_duty(&n, &pwm, &[0.25, 0.5], &SweepOptions { methods: Methods::FAST, ..Default::default() }, &SwitchResistances::ideal())
        .unwrap();
    assert_eq!(res.topology, Provenance::Netlist("buck".into()));
    assert!(res.rows.iter().all(|r| r.gain_formula.is_none()));
    approx::assert_relative_eq!(res.rows[1].gain_avg.unwrap(), 0.5, max_relative = 1e-9);
}

#[test]
fn sequential_and_parallel_rows_agree() {
    let (n, pwm) = builtin(TopologyId::Proposed1, &BTreeMap::new()).unwrap();
    let r = SwitchResistances::ideal();
    // proposed1 leaves continuous conduction below k ≈ 0.6 with the default parts
    let grid = [0.5, 0.7, 0.8, 0.9];
    let seq = sweep_duty(&n, &pwm, &grid, &SweepOptions { threads: Some(1), ..Default::default() }, &r).unwrap();
    let par = sweep_duty(&n, &pwm, &grid, &SweepOptions { threads: Some(4), ..Default::default() }, &r).unwrap();
    assert_eq!(seq, par);
    for row in seq.rows.iter().filter(|r| r.k >= 0.7) {
        let (f, t) = (row.gain_formula.unwrap(), row.gain_transient.unwrap());
        assert!((t - f).abs() <= 0.01 * f, "k={}: {t} vs {f}", row.k);
        assert!(row.steady_cycle.is_some());
        let eff = row.efficiency.unwrap();
        assert!(eff > 0.99 && eff <= 1.0 + 1e-9, "{eff}");
    }
}

#[test]
fn sweep_csv_layout() {
    let res = result(vec![row(0.5, 2.0), row(0.8, 5.0)]);
    let text = to_csv(&res).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], "k,gain_formula,gain_avg,gain_transient,efficiency");
    assert_eq!(lines[2], "0.8,5,5,,");
}

#[test]
fn trace_csv_layout() {
    let n = parse_netlist("V1 in 0 10\nR1 in a 1k\nC1 a 0 1u\nS1 b 0 gate=g\nR2 b 0 1\n.pwm g freq=1k duty=0.5\n").unwrap();
    let pwm = n.pwm.clone().unwrap();
    let mut p = SimParams::new(1e-3);
    p.record = Some(vec!["V(C1)".into(), "I(R1)".into(), "gate".into()]);
    let trace = simulate(&n, &pwm, &p, &SwitchResistances::default()).unwrap();
    assert_eq!(trace.n_samples, 1001);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    export_csv(&trace, &path).unwrap();
    let mut reader = csv::Reader::from_path(&path).unwrap();
    assert_eq!(reader.headers().unwrap().len(), 4);
    let records: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(records.len(), 1001);
    for (i, rec) in records.iter().enumerate().step_by(97) {
        // columns: t, then signals by name
        let v: f64 = rec[2].parse().unwrap();
        let want = trace.signals["V(C1)"][i];
        assert!((v - want).abs() <= 1e-8 * want.abs().max(1e-12), "{v} vs {want}");
    }
    assert!(export_csv(&trace, dir.path().join("missing/dir/x.csv")).is_err());
}

#[test]
fn plot_is_deterministic_svg() {
    let res = result(vec![row(0.5, 2.0), row(0.8, 5.0), row(0.9, 10.0)]);
    let a = render_plot(&res).unwrap();
    assert_eq!(a, render_plot(&res).unwrap());
    assert!(a.starts_with("<?xml") || a.starts_with("<svg"));
    assert!(a.contains("<polyline") && a.trim_end().ends_with("</svg>"));
    assert!(!a.contains("<script"));
    assert!(matches!(render_plot(&result(vec![row(0.5, 2.0)])), Err(Error::InvalidParams(_))));
}

proptest! {
    #[test]
    fn numbers_keep_nine_significant_digits(v in prop_oneof![-1e9f64..1e9, -1.0f64..1.0, 1e-12f64..1e-6]) {
        let back: f64 = format_number(v).parse().unwrap();
        prop_assert!((back - v).abs() <= 1e-8 * v.abs() + f64::MIN_POSITIVE);
    }

    #[test]
    fn sweep_csv_has_one_line_per_row(gains in prop::collection::vec(0.1f64..100.0, 1..20)) {
        let rows = gains.iter().enumerate().map(|(i, &g)| row((i + 1) as f64 / 32.0, g)).collect();
        let text = to_csv(&result(rows)).unwrap();
        prop_assert_eq!(text.lines().count(), gains.len() + 1);
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        for (rec, g) in reader.records().zip(&gains) {
            let v: f64 = rec.unwrap()[1].parse().unwrap();
            prop_assert!((v - g).abs() <= 1e-8 * g);
        }
    }
}
