use std::fmt;

/// Command failure, grouped by the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Numeric(String),
    Io(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Numeric(_) => 3,
            Failure::Io(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Numeric(m) => write!(f, "numerical failure: {m}"),
            Failure::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<mlppo::Error> for Failure {
    fn from(e: mlppo::Error) -> Self {
        use mlppo::Error as E;
        match e {
            E::Config(_) | E::Usage(_) | E::Parse(_) => Failure::Config(e.to_string()),
            E::Domain(_) | E::SolverFailure { .. } | E::Numerical(_) | E::Generation(_) => Failure::Numeric(e.to_string()),
            E::Io(_) => Failure::Io(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}
