use thiserror::Error;

/// Which modelling assumption a validation failure refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assumption {
    /// Reality of the coupling coefficients.
    A0,
    /// Invertibility and inverse bound of the box Hessians.
    A2,
    /// Couplings must have total action degree at least five.
    B1,
    /// Initial action point must satisfy 0 < ||I0|| < 1.
    I0,
}

impl std::fmt::Display for Assumption {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Assumption::A0 => "A0",
            Assumption::A2 => "A2",
            Assumption::B1 => "B1",
            Assumption::I0 => "I0",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum KamError {
    #[error("width error: {0}")]
    Width(String),

    #[error("schema error at `{path}`: {msg}")]
    Schema { path: String, msg: String },

    #[error("assumption {which} violated: {msg}")]
    Assumption { which: Assumption, msg: String },

    #[error("decay bound violated at `{path}`: |f| = {value:.6e} > {bound:.6e}")]
    Decay { path: String, value: f64, bound: f64 },

    #[error("resonance at mode {mode}: |<omega,nu>| = {divisor:.6e} below threshold {threshold:.6e}")]
    Resonance {
        mode: String,
        divisor: f64,
        threshold: f64,
    },

    #[error("singular Hessian block (condition estimate {cond:.3e})")]
    SingularHessian { cond: f64 },

    #[error("averaged forcing left unbalanced by the translation vector: {residual:.3e}")]
    ZeroMode { residual: f64 },

    #[error("Lie series diverges at depth {depth}: term ratio {ratio:.3e}")]
    Divergence { depth: usize, ratio: f64 },

    #[error("trajectory left the domain at t = {t:.4}")]
    Escape { t: f64 },

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("contraction failed at k = {k}: |P_low| = {measured:.6e} > {bound:.6e} (log ratio {ratio:.4})")]
    Contraction {
        k: usize,
        measured: f64,
        bound: f64,
        ratio: f64,
    },

    #[error("mode enumeration of {count} exceeds budget {budget}")]
    ModeExplosion { count: u64, budget: u64 },

    #[error("step {k}: {source}")]
    AtStep {
        k: usize,
        #[source]
        source: Box<KamError>,
    },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Serde(String),
}

impl KamError {
    /// Strips step wrappers.
    pub fn root(&self) -> &KamError {
        match self {
            KamError::AtStep { source, .. } => source.root(),
            e => e,
        }
    }

    pub fn at_step(self, k: usize) -> KamError {
        match self {
            e @ KamError::AtStep { .. } => e,
            e => KamError::AtStep {
                k,
                source: Box::new(e),
            },
        }
    }
}

impl From<serde_json::Error> for KamError {
    fn from(e: serde_json::Error) -> Self {
        KamError::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, KamError>;
