//! Checkpoint directories: `manifest.json` plus one little-endian blob per tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{NetworkConfig, UNet};
use crate::error::{Error, Result};
use crate::mlmb::ModulationBank;
use crate::mlpb::PrototypeBank;
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    network: NetworkConfig,
    epoch: usize,
    val_dsc: Option<f64>,
    seed: u64,
    mlmb_momentum: f64,
    mlmb_eps: f64,
    mlpb_momentum: f64,
    mlpb_smoothness: f64,
    mlpb_sinkhorn_iters: usize,
    tensors: Vec<TensorRecord>,
}

/// Network, both banks and bookkeeping of one saved training state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub net: UNet<f32>,
    pub mlmb: ModulationBank<f32>,
    pub mlpb: PrototypeBank<f32>,
    pub epoch: usize,
    pub val_dsc: Option<f64>,
    /// Training seed the state came from.
    pub seed: u64,
}

fn named_tensors(ck: &Checkpoint) -> Vec<(String, Tensor<f32>)> {
    let mut out = Vec::new();
    for (name, t) in ck.net.param_names().iter().zip(ck.net.params()) {
        out.push((format!("net/{name}"), t.clone()));
    }
    for site in 0..ck.mlmb.num_sites() {
        for (i, e) in ck.mlmb.site_entries(site).iter().enumerate() {
            let c = e.channels();
            for (field, v) in [("gamma", &e.gamma), ("beta", &e.beta), ("mean", &e.mean), ("var", &e.var)] {
                out.push((
                    format!("mlmb/site{site}/mod{i}/{field}"),
                    Tensor::from_vec(&[c], v.clone()).unwrap(),
                ));
            }
        }
    }
    let (classes, dim) = (ck.mlpb.num_classes(), ck.mlpb.dim());
    for k in 0..ck.mlpb.num_modalities() {
        let p = ck.mlpb.prototypes(k).unwrap().to_vec();
        out.push((format!("mlpb/mod{k}/prototypes"), Tensor::from_vec(&[classes, dim], p).unwrap()));
    }
    out
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tensors = Vec::new();
        for (name, t) in named_tensors(self) {
            let file = format!("{name}.bin");
            let path = dir.join(&file);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            let mut bytes = Vec::with_capacity(t.len() * f32::BYTES);
            for &v in t.data() {
                v.write_le(&mut bytes);
            }
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            tensors.push(TensorRecord {
                name,
                dtype: f32::DTYPE.to_string(),
                shape: t.shape().to_vec(),
                file,
            });
        }
        let manifest = Manifest {
            version: CHECKPOINT_VERSION,
            network: self.net.config().clone(),
            epoch: self.epoch,
            val_dsc: self.val_dsc,
            seed: self.seed,
            mlmb_momentum: self.mlmb.momentum() as f64,
            mlmb_eps: self.mlmb.eps() as f64,
            mlpb_momentum: self.mlpb.momentum() as f64,
            mlpb_smoothness: self.mlpb.smoothness(),
            mlpb_sinkhorn_iters: self.mlpb.sinkhorn_iters(),
            tensors,
        };
        let path = dir.join(MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.version != CHECKPOINT_VERSION {
            return Err(Error::Input(format!("unsupported checkpoint version {}", m.version)));
        }
        let cfg = m.network.clone();
        let mut ck = Checkpoint {
            net: UNet::new(cfg.clone(), 0)?,
            mlmb: cfg
                .new_modulation_bank()?
                .with_momentum(m.mlmb_momentum as f32)?
                .with_eps(m.mlmb_eps as f32),
            mlpb: PrototypeBank::random(cfg.num_modalities, cfg.num_classes, cfg.embed_dim, 0)?
                .with_momentum(m.mlpb_momentum as f32)?
                .with_sinkhorn(m.mlpb_smoothness, m.mlpb_sinkhorn_iters)?,
            epoch: m.epoch,
            val_dsc: m.val_dsc,
            seed: m.seed,
        };
        let expected = named_tensors(&ck);
        if expected.len() != m.tensors.len() {
            return Err(Error::Input(format!(
                "checkpoint lists {} tensors, configuration needs {}",
                m.tensors.len(),
                expected.len()
            )));
        }
        for ((name, want), rec) in expected.iter().zip(&m.tensors) {
            if &rec.name != name || rec.shape != want.shape() || rec.dtype != f32::DTYPE {
                return Err(Error::Input(format!("checkpoint tensor {} does not match {name}", rec.name)));
            }
            let path = dir.join(&rec.file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if bytes.len() != want.len() * f32::BYTES {
                return Err(Error::Input(format!("{}: wrong byte length", path.display())));
            }
            let values: Vec<f32> = bytes.chunks_exact(f32::BYTES).map(f32::read_le).collect();
            ck.assign(name, values)?;
        }
        Ok(ck)
    }

    fn assign(&mut self, name: &str, values: Vec<f32>) -> Result<()> {
        let parts: Vec<&str> = name.splitn(2, '/').collect();
        match parts[0] {
            "net" => {
                let idx = self.net.param_index(parts[1]).expect("name came from the network");
                self.net.params_mut()[idx].data_mut().copy_from_slice(&values);
            }
            "mlmb" => {
                let f: Vec<&str> = parts[1].split('/').collect();
                let site: usize = f[0]["site".len()..].parse().unwrap();
                let entry: usize = f[1]["mod".len()..].parse().unwrap();
                let e = &mut self.mlmb.site_entries_mut(site)[entry];
                match f[2] {
                    "gamma" => e.gamma = values,
                    "beta" => e.beta = values,
                    "mean" => e.mean = values,
                    _ => e.var = values,
                }
            }
            _ => {
                let k: usize = parts[1].split('/').next().unwrap()["mod".len()..].parse().unwrap();
                self.mlpb.prototypes_mut(k)?.copy_from_slice(&values);
            }
        }
        Ok(())
    }
}
