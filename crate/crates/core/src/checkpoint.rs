//! Checkpoint directory: `header.json`, one `OWT1` tensor per parameter for
//! the online and momentum encoders, the banks, and the optional linear head.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::banks::{CentroidBank, RepBank};
use crate::data::CategoryId;
use crate::encoder::{EncoderConfig, EncoderParams, EncoderState, Linear};
use crate::error::{Error, Result};
use crate::params::HyperParams;
use crate::tensor::{write_atomic, Tensor};
use crate::trainer::{CEHead, Mode};

pub const HEADER: &str = "header.json";
pub const FORMAT: &str = "owsol-checkpoint-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub mode: Mode,
    pub epoch: usize,
    pub step_count: u64,
    pub encoder: EncoderConfig,
    pub hyper: HyperParams,
    pub hyper_hash: String,
    pub shapes: BTreeMap<String, Vec<usize>>,
    pub ce_classes: Option<Vec<CategoryId>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub mode: Mode,
    pub epoch: usize,
    pub hyper: HyperParams,
    pub state: EncoderState,
    pub rep_bank: Option<RepBank>,
    pub centroid_bank: Option<CentroidBank>,
    pub ce_head: Option<CEHead>,
}

pub fn hyper_hash(hyper: &HyperParams) -> String {
    let bytes = serde_json::to_vec(hyper).expect("hyperparameters serialize");
    hex::encode(Sha256::digest(bytes))
}

fn write_params(params: &EncoderParams, dir: &Path) -> Result<()> {
    for (name, t) in params.to_tensors() {
        t.write(&dir.join(format!("{name}.owt")))?;
    }
    Ok(())
}

fn read_params(config: EncoderConfig, dir: &Path) -> Result<EncoderParams> {
    EncoderParams::from_tensors(config, |name| Tensor::read(&dir.join(format!("{name}.owt"))))
}

impl Checkpoint {
    pub fn header(&self) -> Header {
        let shapes = self
            .state
            .online
            .to_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.dims().to_vec()))
            .collect();
        Header {
            format: FORMAT.into(),
            mode: self.mode,
            epoch: self.epoch,
            step_count: self.state.step_count,
            encoder: self.state.online.config,
            hyper: self.hyper.clone(),
            hyper_hash: hyper_hash(&self.hyper),
            shapes,
            ce_classes: self.ce_head.as_ref().map(|h| h.classes.clone()),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_params(&self.state.online, &dir.join("online"))?;
        write_params(&self.state.momentum, &dir.join("momentum"))?;
        if let Some(b) = &self.rep_bank {
            b.save(&dir.join("rep_bank"))?;
        }
        if let Some(b) = &self.centroid_bank {
            b.save(&dir.join("centroid_bank"))?;
        }
        if let Some(h) = &self.ce_head {
            let d = dir.join("ce_head");
            Tensor::new(vec![h.linear.outputs, h.linear.inputs], h.linear.weight.clone())?.write(&d.join("weight.owt"))?;
            Tensor::new(vec![h.linear.outputs], h.linear.bias.clone())?.write(&d.join("bias.owt"))?;
        }
        // header last: its presence marks a complete checkpoint
        write_atomic(&dir.join(HEADER), &serde_json::to_vec_pretty(&self.header())?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(HEADER);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let header: Header = serde_json::from_slice(&bytes)?;
        if header.format != FORMAT {
            return Err(Error::format(&path, format!("unsupported format {:?}", header.format)));
        }
        if header.hyper_hash != hyper_hash(&header.hyper) {
            return Err(Error::format(&path, "hyperparameter hash mismatch"));
        }
        let online = read_params(header.encoder, &dir.join("online"))?;
        let momentum = read_params(header.encoder, &dir.join("momentum"))?;
        let optional = |sub: &str| dir.join(sub).is_dir();
        let rep_bank = optional("rep_bank").then(|| RepBank::load(&dir.join("rep_bank"))).transpose()?;
        let centroid_bank = optional("centroid_bank")
            .then(|| CentroidBank::load(&dir.join("centroid_bank")))
            .transpose()?;
        let ce_head = match &header.ce_classes {
            Some(classes) => {
                let d = dir.join("ce_head");
                let w = Tensor::read(&d.join("weight.owt"))?;
                let b = Tensor::read(&d.join("bias.owt"))?;
                let k = classes.len();
                let d1 = header.encoder.d1;
                if w.dims() != [k, d1] || b.dims() != [k] {
                    return Err(Error::format(&d, "head shape does not match header"));
                }
                Some(CEHead {
                    classes: classes.clone(),
                    linear: Linear {
                        inputs: d1,
                        outputs: k,
                        weight: w.into_data(),
                        bias: b.into_data(),
                    },
                })
            }
            None => None,
        };
        Ok(Self {
            mode: header.mode,
            epoch: header.epoch,
            hyper: header.hyper,
            state: EncoderState {
                online,
                momentum,
                step_count: header.step_count,
            },
            rep_bank,
            centroid_bank,
            ce_head,
        })
    }
}
