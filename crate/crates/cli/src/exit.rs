use distgp::Error;

pub const SUCCESS: i32 = 0;
pub const CONFIG: i32 = 2;
pub const NUMERICAL: i32 = 3;
pub const IO: i32 = 4;

/// A failed command: the process exit code plus a message for stderr.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: CONFIG, message: message.into() }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self { code: IO, message: message.into() }
    }

    /// Classifies an error raised while reading inputs. Unreadable or
    /// malformed files are I/O failures; bad settings are configuration.
    pub fn data(e: Error) -> Self {
        Self { code: code_for(&e), message: e.to_string() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self::data(e)
    }
}

pub fn code_for(e: &Error) -> i32 {
    if e.is_numerical() {
        return NUMERICAL;
    }
    match e {
        Error::Io(_)
        | Error::Csv(_)
        | Error::BadMagic { .. }
        | Error::TruncatedFile { .. }
        | Error::CountMismatch { .. }
        | Error::Checkpoint(_) => IO,
        _ => CONFIG,
    }
}
