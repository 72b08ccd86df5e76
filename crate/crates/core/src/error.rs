use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("empty subject list")]
    EmptySubjects,

    #[error("subject {id}: visit time {time} exceeds end of study {tau}")]
    VisitBeyondTau { id: String, time: f64, tau: f64 },

    #[error("proportional hazards fit has no events")]
    NoEvents,

    #[error("singular information matrix ({0})")]
    Singular(String),

    #[error("proportional hazards fit did not converge: {0}")]
    NotConverged(String),

    #[error("censoring survival factor {factor} < 0 at event time {time}")]
    NegativeSurvivalFactor { time: f64, factor: f64 },

    #[error("empty design: no rows satisfy restriction {0}")]
    EmptyDesign(String),

    #[error("logistic regression needs both outcome classes")]
    SingleClass,

    #[error("identification failure: {0}")]
    Identification(String),

    #[error("subject {0} has no outcome")]
    MissingOutcome(String),

    #[error("censored subjects present but no censoring model was supplied")]
    CensoringWithoutModel,

    #[error("bootstrap: {failed} of {total} resamples failed")]
    BootstrapFailures { failed: usize, total: usize },

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("all {0} replicates failed")]
    AllReplicatesFailed(usize),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
