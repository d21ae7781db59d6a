//! Checkpoints: `config.json` plus one tensor file per named parameter.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use stmask_core::decoder::{Model, ModelConfig};

use crate::tensor_io::{read_tensor, write_tensor};

pub const CONFIG_FILE: &str = "config.json";
pub const TENSOR_DIR: &str = "tensors";

pub fn save_checkpoint(dir: &Path, model: &Model<f32>) -> Result<()> {
    fs::create_dir_all(dir.join(TENSOR_DIR)).with_context(|| format!("creating {}", dir.display()))?;
    write_json(&dir.join(CONFIG_FILE), &model.config)?;
    for p in model.params.iter() {
        let mut t = p.tensor.clone();
        t.zero_grad();
        write_tensor(&dir.join(TENSOR_DIR).join(format!("{}.tensor", p.name)), &t)?;
    }
    Ok(())
}

/// Rebuilds the model from its config and overwrites every parameter from
/// disk; a missing or extra tensor file is an error.
pub fn load_checkpoint(dir: &Path) -> Result<Model<f32>> {
    let config: ModelConfig = read_json(&dir.join(CONFIG_FILE))?;
    let mut model = Model::<f32>::new(config, 0).context("checkpoint config is invalid")?;
    let names: Vec<String> = model.params.iter().map(|p| p.name.clone()).collect();
    for name in &names {
        let t = read_tensor(&dir.join(TENSOR_DIR).join(format!("{name}.tensor")))?;
        model.params.assign(name, t).with_context(|| format!("loading parameter {name}"))?;
    }
    let on_disk = fs::read_dir(dir.join(TENSOR_DIR))?.count();
    if on_disk != names.len() {
        bail!("{} holds {on_disk} tensor files, the model has {} parameters", dir.display(), names.len());
    }
    Ok(model)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::<f32>::new(ModelConfig::tiny(), 3).unwrap();
        save_checkpoint(dir.path(), &model).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.config, model.config);
        for (a, b) in back.params.iter().zip(model.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.data(), b.tensor.data());
        }
        let text = fs::read_to_string(dir.path().join(CONFIG_FILE)).unwrap();
        assert!(text.contains("\"num_queries\": 3"));
    }

    #[test]
    fn missing_tensor_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::<f32>::new(ModelConfig::tiny(), 3).unwrap();
        save_checkpoint(dir.path(), &model).unwrap();
        fs::remove_file(dir.path().join(TENSOR_DIR).join("head.class.bias.tensor")).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        assert!(format!("{err:#}").contains("head.class.bias"));
    }
}
