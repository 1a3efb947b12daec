use std::fmt;
use std::path::Path;

use radfield::Error;

/// Process exit codes. Clap uses 2 for usage errors.
pub mod code {
    pub const FAILURE: u8 = 1;
    pub const MISSING_FILE: u8 = 3;
    pub const BAD_CONFIG: u8 = 4;
    pub const ARCHITECTURE: u8 = 5;
    pub const CORRUPT_FILE: u8 = 6;
}

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub msg: String,
}

impl Failure {
    pub fn new(code: u8, msg: impl Into<String>) -> Self {
        Self { code, msg: msg.into() }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Self::new(code::BAD_CONFIG, msg)
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        let code = if e.kind() == std::io::ErrorKind::NotFound {
            code::MISSING_FILE
        } else {
            code::FAILURE
        };
        Self::new(code, format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let c = match &e {
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => code::MISSING_FILE,
            Error::Config(_) | Error::Geometry(_) => code::BAD_CONFIG,
            Error::ArchitectureMismatch { .. } | Error::MissingTensor(_) => code::ARCHITECTURE,
            Error::BadMagic { .. } | Error::VersionMismatch { .. } | Error::TruncatedPayload { .. } | Error::Format { .. } => {
                code::CORRUPT_FILE
            }
            _ => code::FAILURE,
        };
        // Single line, whatever the source message contains.
        Self::new(c, e.to_string().replace('\n', " "))
    }
}
