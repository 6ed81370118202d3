//! Scenario files shipped in `presets/`, embedded at build time.

use crate::error::{Error, Result};

use super::ExperimentConfig;

macro_rules! presets {
    ($($name:literal),* $(,)?) => {
        /// `(name, TOML text)` of every shipped preset.
        pub const PRESETS: &[(&str, &str)] = &[
            $(($name, include_str!(concat!("../../../../presets/", $name, ".toml"))),)*
        ];
    };
}

presets!(
    "qwen-like-4c-c24",
    "qwen-like-4c-c28",
    "qwen-like-8c",
    "qwen-like-8c-c20",
    "llama-like-8c",
    "llama-like-8c-c20",
    "symmetric-4c",
    "token-mixture-4c",
    "drift-4c",
);

/// The heterogeneous-acceptance scenario used for convergence and baseline checks.
pub const HETEROGENEOUS: &str = "qwen-like-8c";
pub const SYMMETRIC: &str = "symmetric-4c";

pub fn names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let (_, text) = PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| Error::Usage(format!("unknown preset `{name}`")))?;
    ExperimentConfig::from_toml(text)
}
