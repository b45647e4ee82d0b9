use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),

    #[error("budget violation: {0}")]
    Budget(isp_core::Error),

    #[error("numeric failure: {0}")]
    Numeric(isp_core::Error),

    #[error(transparent)]
    Core(isp_core::Error),

    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },

    #[error("malformed {what}: {detail}")]
    Parse { what: String, detail: String },
}

impl HarnessError {
    /// Process exit code: 2 config, 3 budget, 4 numeric, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Budget(_) => 3,
            HarnessError::Numeric(_) => 4,
            _ => 1,
        }
    }

    pub(crate) fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Self {
        let context = context.into();
        move |source| HarnessError::Io { context, source }
    }
}

impl From<isp_core::Error> for HarnessError {
    fn from(e: isp_core::Error) -> Self {
        use isp_core::Error as E;
        match e {
            E::BudgetExceeded { .. } | E::UnreachableSparsity { .. } => HarnessError::Budget(e),
            E::NumericFailure { .. } => HarnessError::Numeric(e),
            E::InvalidSpec(_) => HarnessError::Config(e.to_string()),
            other => HarnessError::Core(other),
        }
    }
}
