//! Simulation and analysis of high-gain Ćuk-derived DC-DC converters.
//!
//! * [`netlist`] parses and serializes circuits and provides the built-ins.
//! * [`mna`] assembles per-phase state-space models and resolves diodes.
//! * [`transient`] runs fixed-step PWM simulations.
//! * [`steadystate`] solves the averaged (volt-second / charge balance) operating point.
//! * [`sweep`] sweeps the duty ratio and emits CSV and SVG reports.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod mna;
pub mod netlist;
pub mod steadystate;
pub mod sweep;
pub mod transient;

pub use error::{Error, Result};
pub use mna::{assemble_phase, dc_solve, resolve_diodes, StateSpaceModel, SwitchConfig, SwitchResistances};
pub use netlist::{builtin, parse_netlist, parse_value, serialize_netlist, Netlist, PwmSpec, TopologyId};
pub use steadystate::{check_phase_relations, gain_formula, volt_second_solve, SteadyState};
pub use transient::{cycle_average, detect_steady_state, simulate, step, Integrator, SimParams, Trace};
pub use sweep::{efficiency, export_csv, render_plot, sweep_duty, Methods, Row, SweepOptions, SweepResult};
