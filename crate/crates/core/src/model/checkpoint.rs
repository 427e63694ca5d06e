//! Checkpoints: a directory of serialized tensors plus a manifest carrying
//! parameter names, shapes and the config as key=value text.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::net::Detector;
use super::params::ParamStore;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{load_tensor, save_tensor};

fn shape_string(shape: &[usize]) -> String {
    shape
        .iter()
        .map(|e| e.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

pub fn save_checkpoint(dir: &Path, cfg: &Config, store: &ParamStore) -> Result<()> {
    let params_dir = dir.join("params");
    fs::create_dir_all(&params_dir)?;
    let mut manifest = String::new();
    manifest.push_str(&cfg.dump());
    for (name, tensor) in store.iter() {
        save_tensor(&params_dir.join(format!("{name}.ct2n")), tensor)?;
        let _ = writeln!(manifest, "tensor.{} = {}", name, shape_string(tensor.shape()));
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Rebuild the model from a checkpoint directory.
pub fn load_checkpoint(dir: &Path) -> Result<(Config, Detector, ParamStore)> {
    let manifest_path = dir.join("manifest.txt");
    if !manifest_path.exists() {
        return Err(Error::Checkpoint(format!(
            "missing manifest at {}",
            manifest_path.display()
        )));
    }
    let text = fs::read_to_string(&manifest_path)?;
    let mut config_lines = String::new();
    let mut tensor_entries: Vec<(String, String)> = Vec::new();
    for raw in text.lines() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("tensor.") {
            let (name, shape) = rest.split_once('=').ok_or_else(|| {
                Error::Checkpoint(format!("bad tensor line `{}`", raw))
            })?;
            tensor_entries.push((name.trim().to_string(), shape.trim().to_string()));
        } else {
            config_lines.push_str(raw);
            config_lines.push('\n');
        }
    }
    let cfg = Config::parse(&config_lines)?;
    let mut store = ParamStore::new();
    let mut init_rng = rng::stream(cfg.seed, "init");
    let det = Detector::new(&cfg, &mut store, &mut init_rng);
    for (name, shape) in &tensor_entries {
        let t = load_tensor(&dir.join("params").join(format!("{name}.ct2n")))?;
        if shape_string(t.shape()) != *shape {
            return Err(Error::Checkpoint(format!(
                "parameter `{}`: file shape {} disagrees with manifest {}",
                name,
                shape_string(t.shape()),
                shape
            )));
        }
        store.assign(name, t)?;
    }
    if tensor_entries.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, model has {}",
            tensor_entries.len(),
            store.len()
        )));
    }
    Ok((cfg, det, store))
}
