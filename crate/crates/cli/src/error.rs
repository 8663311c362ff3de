//! Stable, machine-readable error identifiers and exit codes.

use std::fmt;

use certilip::checkpoint::CheckpointError;
use certilip::data::DatasetError;
use certilip::Error;

/// Every identifier the CLI can emit, with its exit code.
pub const ERROR_IDS: &[(&str, i32)] = &[
    ("usage.invalid", 2),
    ("config.unreadable", 3),
    ("config.invalid", 3),
    ("argument.invalid", 3),
    ("dataset.bad_magic", 4),
    ("dataset.truncated", 4),
    ("dataset.count_mismatch", 4),
    ("dataset.ragged_row", 4),
    ("dataset.missing_label_column", 4),
    ("dataset.bad_value", 4),
    ("dataset.label_out_of_range", 4),
    ("dataset.invalid_params", 4),
    ("dataset.io", 4),
    ("checkpoint.version", 5),
    ("checkpoint.length_mismatch", 5),
    ("checkpoint.checksum", 5),
    ("checkpoint.manifest", 5),
    ("checkpoint.io", 5),
    ("certify.relaxed_network", 6),
    ("model.degenerate_layer", 6),
    ("model.shape_mismatch", 6),
    ("train.non_finite_loss", 7),
    ("flow.integration_blowup", 7),
    ("numeric.failure", 7),
    ("io.failure", 8),
];

pub fn exit_code(id: &str) -> i32 {
    ERROR_IDS.iter().find(|(i, _)| *i == id).map_or(1, |(_, c)| *c)
}

#[derive(Debug)]
pub struct CliError {
    pub id: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(id: &'static str, message: impl Into<String>) -> Self {
        debug_assert!(ERROR_IDS.iter().any(|(i, _)| *i == id), "unregistered error id {id}");
        CliError {
            id,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new("config.invalid", message)
    }

    pub fn argument(message: impl Into<String>) -> Self {
        Self::new("argument.invalid", message)
    }

    pub fn exit_code(&self) -> i32 {
        exit_code(self.id)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.id, self.message)
    }
}

impl std::error::Error for CliError {}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        let id = match e {
            DatasetError::BadMagic { .. } => "dataset.bad_magic",
            DatasetError::Truncated { .. } => "dataset.truncated",
            DatasetError::CountMismatch { .. } => "dataset.count_mismatch",
            DatasetError::RaggedRow { .. } => "dataset.ragged_row",
            DatasetError::MissingLabelColumn => "dataset.missing_label_column",
            DatasetError::BadValue { .. } => "dataset.bad_value",
            DatasetError::LabelOutOfRange { .. } => "dataset.label_out_of_range",
            DatasetError::InvalidParams(_) => "dataset.invalid_params",
            DatasetError::Io { .. } => "dataset.io",
        };
        CliError::new(id, e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        let id = match e {
            CheckpointError::Version { .. } => "checkpoint.version",
            CheckpointError::LengthMismatch { .. } => "checkpoint.length_mismatch",
            CheckpointError::Checksum { .. } => "checkpoint.checksum",
            CheckpointError::Manifest(_) => "checkpoint.manifest",
            CheckpointError::Io { .. } => "checkpoint.io",
        };
        CliError::new(id, e.to_string())
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let id = match e {
            Error::Dataset(d) => return d.into(),
            Error::Checkpoint(c) => return c.into(),
            Error::RelaxedNetwork => "certify.relaxed_network",
            Error::DegenerateLayer { .. } => "model.degenerate_layer",
            Error::ShapeMismatch { .. } | Error::LengthMismatch { .. } => "model.shape_mismatch",
            Error::NonFiniteLoss { .. } => "train.non_finite_loss",
            Error::IntegrationBlowup { .. } => "flow.integration_blowup",
            Error::InvalidArgument(_) | Error::InvalidLabel { .. } => "argument.invalid",
            Error::NonFinite(_) | Error::OracleScale { .. } | Error::Numerical(_) | Error::Convergence { .. } => {
                "numeric.failure"
            }
            Error::Io(_) => "io.failure",
        };
        CliError::new(id, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new("io.failure", e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_unique_and_nonzero() {
        for (i, (id, code)) in ERROR_IDS.iter().enumerate() {
            assert!(*code > 1, "{id}");
            assert!(ERROR_IDS[i + 1..].iter().all(|(other, _)| other != id), "{id}");
        }
    }

    #[test]
    fn core_errors_map() {
        assert_eq!(CliError::from(Error::RelaxedNetwork).id, "certify.relaxed_network");
        assert_eq!(
            CliError::from(Error::from(DatasetError::MissingLabelColumn)).id,
            "dataset.missing_label_column"
        );
        assert_eq!(CliError::from(Error::RelaxedNetwork).exit_code(), 6);
    }

    #[test]
    fn numeric_failures_share_one_id() {
        for e in [
            Error::NonFinite("x".into()),
            Error::OracleScale { dim: 9, limit: 1 },
            Error::Numerical("singular".into()),
            Error::Convergence {
                what: "prox",
                iterations: 3,
            },
        ] {
            let c = CliError::from(e);
            assert_eq!((c.id, c.exit_code()), ("numeric.failure", 7));
        }
    }
}
