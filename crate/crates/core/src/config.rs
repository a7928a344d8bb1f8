//! Sidecar defaults for the command line: a plain `key = value` file.

use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

/// Optional defaults; command-line flags take precedence over every field.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub lambda: Option<f64>,
    pub loss_u: Option<f64>,
    pub budget: Option<usize>,
    pub clusters: Option<usize>,
    pub seed: Option<u64>,
    pub bins: Option<usize>,
}

impl Sidecar {
    pub fn parse(text: &str) -> Result<Self> {
        let sidecar: Sidecar = toml::from_str(text)
            .map_err(|e| Error::InvalidParameter(format!("config: {}", e.message())))?;
        if sidecar.lambda.is_some() && sidecar.loss_u.is_some() {
            return Err(Error::InvalidParameter(
                "config: give either lambda or loss_u, not both".into(),
            ));
        }
        Ok(sidecar)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}
