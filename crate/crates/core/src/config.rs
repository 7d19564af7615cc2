//! Run-config loading: TOML with schema validation (unknown keys are
//! rejected) and `HVAE_`-prefixed environment overrides for any key.

use std::path::Path;

use crate::error::{Error, Result};
use crate::training::RunConfig;

pub const ENV_PREFIX: &str = "HVAE_";

/// Load a [`RunConfig`] from TOML, then apply environment overrides of the
/// form `HVAE_SECTION__KEY=value` (`__` separates nesting levels, keys are
/// case-insensitive). Values parse as TOML literals, falling back to
/// strings.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    let mut doc: toml::Value = toml::from_str(&text)
        .map_err(|e| Error::config(format!("{}: {}", path.display(), one_line(&e.to_string()))))?;
    for (key, value) in std::env::vars() {
        if let Some(stripped) = key.strip_prefix(ENV_PREFIX) {
            apply_override(&mut doc, stripped, &value)?;
        }
    }
    doc.try_into()
        .map_err(|e| Error::config(format!("{}: {}", path.display(), one_line(&e.to_string()))))
}

/// TOML errors come with multi-line source context; error reporting is
/// contractually one line.
fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Value>(&format!("v = {raw}"))
        .ok()
        .and_then(|v| v.get("v").cloned())
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(doc: &mut toml::Value, dotted: &str, raw: &str) -> Result<()> {
    let segments: Vec<String> = dotted.split("__").map(str::to_lowercase).collect();
    if segments.iter().any(String::is_empty) {
        return Err(Error::config(format!("malformed override key {dotted}")));
    }
    let mut node = doc;
    for seg in &segments[..segments.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override {dotted}: {seg} is not a table")))?;
        node = table
            .entry(seg.clone())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::config(format!("override {dotted}: not a table")))?;
    table.insert(segments.last().unwrap().clone(), parse_literal(raw));
    Ok(())
}
