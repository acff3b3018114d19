use std::fmt;
use std::process::ExitCode;

/// Bad flags, bad config or inputs that contradict each other. Maps to
/// exit code 2; everything else that fails at run time maps to 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[macro_export]
macro_rules! usage {
    ($($arg:tt)*) => {
        ::anyhow::Error::new($crate::usage::UsageError(format!($($arg)*)))
    };
}

pub fn exit_code(err: &anyhow::Error) -> ExitCode {
    let is_usage = err.chain().any(|cause| {
        cause.is::<UsageError>()
            || matches!(cause.downcast_ref::<an2vec::Error>(), Some(an2vec::Error::Config(_)))
    });
    ExitCode::from(if is_usage { 2 } else { 1 })
}
