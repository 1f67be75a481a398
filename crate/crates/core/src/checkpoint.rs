//! On-disk checkpoints: a directory holding `manifest.toml` and one tensor
//! file per named parameter.

use crate::denoiser::{lora_merge, DenoiserConfig, DenoiserParams, Layer, LoraAdapter, LoraFactors, ParamSet};
use crate::error::{config_err, Error, Result};
use crate::schedule::ScheduleConfig;
use crate::tensor::{load_tensor, save_tensor, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

const MANIFEST: &str = "manifest.toml";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub schedule: ScheduleConfig,
    /// DDIM step count the checkpoint was trained or tuned with.
    pub ddim_steps: usize,
    pub params: DenoiserParams,
    pub adapter: Option<LoraAdapter>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: u32,
    ddim_steps: usize,
    schedule: ScheduleConfig,
    denoiser: DenoiserConfig,
    adapter: Option<AdapterMeta>,
    tensors: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdapterMeta {
    rank: usize,
    scale: f64,
}

impl Checkpoint {
    pub fn new(schedule: ScheduleConfig, ddim_steps: usize, params: DenoiserParams) -> Self {
        Checkpoint {
            schedule,
            ddim_steps,
            params,
            adapter: None,
        }
    }

    /// Base weights with the adapter folded in, if there is one.
    pub fn merged(&self) -> Result<DenoiserParams> {
        match &self.adapter {
            Some(a) => lora_merge(&self.params, a),
            None => Ok(self.params.clone()),
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut names = Vec::new();
        let mut write = |name: String, t: &Tensor| -> Result<()> {
            save_tensor(dir.join(format!("{name}.tnsr")), t)?;
            names.push(name);
            Ok(())
        };
        for (name, t) in self.params.named() {
            write(name, t)?;
        }
        if let Some(a) = &self.adapter {
            for (name, t) in a.named() {
                write(name, t)?;
            }
        }
        let manifest = Manifest {
            format: 1,
            ddim_steps: self.ddim_steps,
            schedule: self.schedule,
            denoiser: self.params.config,
            adapter: self.adapter.as_ref().map(|a| AdapterMeta {
                rank: a.rank,
                scale: a.scale,
            }),
            tensors: names,
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        let path = dir.join(MANIFEST);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest =
            toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if manifest.format != 1 {
            return Err(Error::Format(format!("unsupported checkpoint format {}", manifest.format)));
        }
        let mut tensors = BTreeMap::new();
        for name in &manifest.tensors {
            tensors.insert(name.clone(), load_tensor(dir.join(format!("{name}.tnsr")))?);
        }
        let params = DenoiserParams::from_named(manifest.denoiser, |n| tensors.remove(n))?;
        let adapter = match manifest.adapter {
            None => None,
            Some(meta) => {
                let mut layers = Vec::new();
                for layer in Layer::ALL {
                    let mut take = |name: String| {
                        tensors
                            .remove(&name)
                            .ok_or_else(|| config_err!("checkpoint lacks `{name}`"))
                    };
                    layers.push(LoraFactors {
                        layer,
                        down: take(LoraAdapter::down_name(layer))?,
                        up: take(LoraAdapter::up_name(layer))?,
                    });
                }
                let a = LoraAdapter {
                    rank: meta.rank,
                    scale: meta.scale,
                    layers,
                };
                a.check_against(&params.config)?;
                Some(a)
            }
        };
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Format(format!("unexpected tensor `{extra}` in checkpoint")));
        }
        Ok(Checkpoint {
            schedule: manifest.schedule,
            ddim_steps: manifest.ddim_steps,
            params,
            adapter,
        })
    }
}
