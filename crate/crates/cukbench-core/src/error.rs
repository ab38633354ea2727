use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed number in value token {0:?}")]
    MalformedNumber(String),
    #[error("unknown suffix in value token {0:?}")]
    UnknownSuffix(String),
    #[error("empty netlist")]
    EmptyNetlist,
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown component prefix in {name:?}")]
    UnknownPrefix { line: usize, name: String },
    #[error("duplicate component name {0:?}")]
    DuplicateName(String),
    #[error("no component references ground node \"0\"")]
    MissingGround,
    #[error("floating node {0:?}")]
    FloatingNode(String),
    #[error("invalid value for {name}: {msg}")]
    InvalidValue { name: String, msg: String },
    #[error("unknown override key {0:?}")]
    UnknownOverride(String),
    #[error("override {key} = {value} is out of range")]
    OverrideRange { key: String, value: f64 },
    #[error("unknown topology {0:?}")]
    UnknownTopology(String),

    #[error("singular MNA matrix; offending nodes: {}", .nodes.join(", "))]
    SingularMna { nodes: Vec<String> },
    #[error("switch configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("diode states do not converge; cycling through: {}", .cycle.join(" | "))]
    DiodeNonConvergent { cycle: Vec<String> },

    #[error("factorization failure: {0}")]
    Factorization(String),
    #[error("invalid simulation parameters: {0}")]
    InvalidParams(String),
    #[error("unknown signal {0:?}")]
    UnknownSignal(String),
    #[error("cycle {cycle} is outside the trace ({cycles} complete cycles)")]
    CycleOutOfRange { cycle: usize, cycles: usize },

    #[error("duty ratio {0} is outside (0, 1)")]
    InvalidDuty(f64),
    #[error("topology has no unique averaged operating point")]
    SingularBalance,
    #[error("diode configuration ambiguity: {0}")]
    DiodeAmbiguity(String),
    #[error("phase relations are only defined for built-in topologies")]
    NotBuiltin,

    #[error("steady state not detected")]
    NoSteadyState,
    #[error("at k = {k}: {source}")]
    AtDuty {
        k: f64,
        #[source]
        source: Box<Error>,
    },
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
