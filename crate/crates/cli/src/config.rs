//! JSON configuration, flag overrides, atomic output and run reports.
//!
//! A config file is a JSON object with one optional section per command,
//! plus an optional top-level `seed`:
//!
//! ```json
//! { "seed": 7, "synth": { "density": 0.03 }, "pseudo": { "theta": 0.75 } }
//! ```
//!
//! Keys inside a section use the long flag names with `_` for `-`. Flags given
//! on the command line replace config values.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

pub fn load_config(path: Option<&Path>) -> Result<Value> {
    let Some(path) = path else {
        return Ok(Value::Object(Map::new()));
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let value: Value =
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    if !value.is_object() {
        bail!("config {} must be a JSON object", path.display());
    }
    Ok(value)
}

/// Flags shared by every command.
#[derive(Debug, Default, Serialize)]
pub struct Globals {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// Builds the settings for `command`: defaults, then the config section, then
/// the non-null fields of `flags` and `globals`.
pub fn resolve<S: DeserializeOwned>(
    config: &Value,
    command: &str,
    flags: &impl Serialize,
    globals: &Globals,
) -> Result<S> {
    let mut merged = match config.get(command) {
        Some(Value::Object(m)) => m.clone(),
        Some(_) => bail!("config section `{command}` must be an object"),
        None => Map::new(),
    };
    if let Some(s) = config.get("seed") {
        merged.entry("seed").or_insert(s.clone());
    }
    for layer in [serde_json::to_value(flags)?, serde_json::to_value(globals)?] {
        if let Value::Object(f) = layer {
            merged.extend(f.into_iter().filter(|(_, v)| !v.is_null()));
        }
    }
    serde_json::from_value(Value::Object(merged)).with_context(|| format!("invalid `{command}` settings"))
}

pub fn require<'a>(path: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
    path.as_deref()
        .with_context(|| format!("missing required setting `{name}`"))
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.persist(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn save_png_atomic(img: &derain_core::frame_io::Image, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    img.to_rgb8()
        .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
    write_atomic(path, &bytes)
}

pub fn save_flow_atomic(flow: &derain_core::frame_io::FlowField, path: &Path) -> Result<()> {
    write_atomic(path, &derain_core::frame_io::encode_flow(flow))
}

#[derive(Debug, Serialize)]
pub struct Report<C: Serialize, M: Serialize> {
    pub command: &'static str,
    pub config: C,
    pub metrics: M,
    pub timings: Map<String, Value>,
}

impl<C: Serialize, M: Serialize> Report<C, M> {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }
}
