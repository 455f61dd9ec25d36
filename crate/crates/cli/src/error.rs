//! One error type per process outcome. Every command funnels into
//! [`CliError`] and the exit code is a total function of its variant, so
//! scripts can branch on failures without parsing stderr.

use mmkd_core::data::DataError;
use mmkd_core::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, malformed or inconsistent config documents. Exit 2.
    #[error("config: {0}")]
    Config(String),
    /// A file that is not the artifact it claims to be. Exit 3.
    #[error("format: {0}")]
    Format(String),
    /// The operating system said no. Exit 4.
    #[error("io: {0}")]
    Io(String),
    /// Well-formed artifact whose internal checks fail. Exit 5.
    #[error("integrity: {0}")]
    Integrity(String),
    /// Anything that went wrong mid-computation. Exit 1.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Config(_) => 2,
            CliError::Format(_) => 3,
            CliError::Io(_) => 4,
            CliError::Integrity(_) => 5,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match &e {
            DataError::BadMagic { .. }
            | DataError::BadVersion { .. }
            | DataError::Shape { .. }
            | DataError::BadLabel(_)
            | DataError::Meta(_) => CliError::Format(e.to_string()),
            DataError::BadManifest { .. } | DataError::Integrity { .. } => {
                CliError::Integrity(e.to_string())
            }
            DataError::BadSpec { .. } => CliError::Config(e.to_string()),
            DataError::Io(_) => CliError::Io(e.to_string()),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match &e {
            // Config validation in core surfaces as BadParam.
            TensorError::BadParam { .. } => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_are_distinct_and_stable() {
        let all = [
            CliError::Runtime("r".into()),
            CliError::Config("c".into()),
            CliError::Format("f".into()),
            CliError::Io("i".into()),
            CliError::Integrity("g".into()),
        ];
        let codes: Vec<i32> = all.iter().map(|e| e.code()).collect();
        assert_eq!(codes, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn dataset_magic_and_manifest_corruption_map_to_distinct_codes() {
        let magic: CliError = DataError::BadMagic { found: *b"XXXX" }.into();
        let manifest: CliError = DataError::BadManifest { detail: "short".into() }.into();
        assert_eq!(magic.code(), 3);
        assert_eq!(manifest.code(), 5);
    }
}
