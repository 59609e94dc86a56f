//! Binary checkpoint container.
//!
//! Layout: the magic `DEQUMXCK`, a version byte, a little-endian `u32`
//! header length, a UTF-8 `key=value` header, then every tensor listed in
//! the header as little-endian `f64` in header order.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::SeparatorModel;
use super::spec::ModelSpec;
use super::train::{Adam, Stage, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

pub const MAGIC: &[u8; 8] = b"DEQUMXCK";
pub const VERSION: u8 = 1;

/// Everything needed to rebuild a model and resume its training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub target: String,
    pub params: ParamSet,
    pub buffers: ParamSet,
    pub state: TrainState,
    pub config: TrainConfig,
}

fn corrupt(offset: usize, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        offset,
        msg: msg.into(),
    }
}

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

impl Checkpoint {
    pub fn new(model: &SeparatorModel, state: TrainState, config: TrainConfig) -> Self {
        Self {
            spec: model.spec.clone(),
            target: model.target.clone(),
            params: model.params.clone(),
            buffers: model.buffers.clone(),
            state,
            config,
        }
    }

    /// Rebuild the model. Its equilibrium mode is the spec default.
    pub fn model(&self) -> Result<SeparatorModel> {
        let mut model = SeparatorModel::new(&self.spec, &self.target, &mut ChaCha8Rng::seed_from_u64(0))?;
        load_into(&mut model.params, &self.params, "parameter")?;
        load_into(&mut model.buffers, &self.buffers, "buffer")?;
        Ok(model)
    }

    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let groups = [
            ("p/", &self.params),
            ("b/", &self.buffers),
            ("m/", &self.state.optimizer.m),
            ("v/", &self.state.optimizer.v),
        ];
        groups
            .into_iter()
            .flat_map(|(prefix, set)| set.iter().map(move |(name, t)| (format!("{prefix}{name}"), t)))
            .collect()
    }

    fn header(&self) -> String {
        let s = &self.state;
        let c = &self.config;
        let mut kv: Vec<(String, String)> = self.spec.to_kv().into_iter().map(|(k, v)| (format!("spec.{k}"), v)).collect();
        let rest = [
            ("target", self.target.clone()),
            ("stage", s.stage.to_string()),
            ("epoch", s.epoch.to_string()),
            ("stage_epoch", s.stage_epoch.to_string()),
            ("lr", s.lr.to_string()),
            ("best_val", s.best_val.to_string()),
            ("since_best", s.since_best.to_string()),
            ("plateau", s.plateau.to_string()),
            ("adam.beta1", s.optimizer.beta1.to_string()),
            ("adam.beta2", s.optimizer.beta2.to_string()),
            ("adam.eps", s.optimizer.eps.to_string()),
            ("adam.step", s.optimizer.step.to_string()),
            ("train.segment_seconds", c.segment_seconds.to_string()),
            ("train.lr", c.lr.to_string()),
            ("train.weight_decay", c.weight_decay.to_string()),
            ("train.lr_decay_factor", c.lr_decay_factor.to_string()),
            ("train.plateau_patience_epochs", c.plateau_patience_epochs.to_string()),
            ("train.early_stop_patience_epochs", c.early_stop_patience_epochs.to_string()),
            ("train.pretrain_unroll_l", c.pretrain_unroll_l.to_string()),
            ("train.pretrain_epochs", c.pretrain_epochs.to_string()),
            ("train.l_max_after_pretrain", c.l_max_after_pretrain.to_string()),
            ("train.epochs", c.epochs.to_string()),
            ("train.batch_size", c.batch_size.to_string()),
            ("train.seed", c.seed.to_string()),
        ];
        kv.extend(rest.into_iter().map(|(k, v)| (k.to_string(), v)));
        for (name, t) in self.tensors() {
            kv.push(("tensor".into(), format!("{name}:{}", shape_text(t.shape()))));
        }
        kv.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header();
        let mut out = Vec::with_capacity(13 + header.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for (_, t) in self.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt(0, "bad magic"));
        }
        let version = *bytes.get(8).ok_or_else(|| corrupt(bytes.len(), "missing version"))?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let len_bytes: [u8; 4] = bytes
            .get(9..13)
            .ok_or_else(|| corrupt(bytes.len(), "missing header length"))?
            .try_into()
            .expect("four bytes");
        let header_len = u32::from_le_bytes(len_bytes) as usize;
        let header_end = 13usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt(9, format!("header length {header_len} exceeds file")))?;
        let header = std::str::from_utf8(&bytes[13..header_end]).map_err(|e| corrupt(13 + e.valid_up_to(), "header is not UTF-8"))?;

        let mut spec_kv = Vec::new();
        let mut fields = std::collections::BTreeMap::new();
        let mut tensors = Vec::new();
        let mut offset = 13;
        for line in header.split_terminator('\n') {
            let (k, v) = line.split_once('=').ok_or_else(|| corrupt(offset, format!("malformed header line `{line}`")))?;
            if let Some(sk) = k.strip_prefix("spec.") {
                spec_kv.push((sk, v));
            } else if k == "tensor" {
                let (name, shape) = v.rsplit_once(':').ok_or_else(|| corrupt(offset, format!("malformed tensor entry `{v}`")))?;
                let shape = if shape.is_empty() {
                    Vec::new()
                } else {
                    shape
                        .split('x')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| corrupt(offset, format!("bad shape in `{v}`")))?
                };
                tensors.push((name, shape, offset));
            } else if fields.insert(k, (v, offset)).is_some() {
                return Err(corrupt(offset, format!("duplicate key `{k}`")));
            }
            offset += line.len() + 1;
        }
        let spec = ModelSpec::from_kv(spec_kv).map_err(|e| corrupt(13, format!("spec: {e}")))?;

        let mut take = |k: &str| fields.remove(k).ok_or_else(|| corrupt(13, format!("missing key `{k}`")));
        macro_rules! parse {
            ($k:expr) => {{
                let (v, at) = take($k)?;
                v.parse().map_err(|_| corrupt(at, format!("bad value `{v}` for `{}`", $k)))?
            }};
        }
        let target: String = parse!("target");
        let stage: Stage = parse!("stage");
        let epoch = parse!("epoch");
        let stage_epoch = parse!("stage_epoch");
        let lr = parse!("lr");
        let best_val = parse!("best_val");
        let since_best = parse!("since_best");
        let plateau = parse!("plateau");
        let beta1 = parse!("adam.beta1");
        let beta2 = parse!("adam.beta2");
        let eps = parse!("adam.eps");
        let step = parse!("adam.step");
        let config = TrainConfig {
            segment_seconds: parse!("train.segment_seconds"),
            lr: parse!("train.lr"),
            weight_decay: parse!("train.weight_decay"),
            lr_decay_factor: parse!("train.lr_decay_factor"),
            plateau_patience_epochs: parse!("train.plateau_patience_epochs"),
            early_stop_patience_epochs: parse!("train.early_stop_patience_epochs"),
            pretrain_unroll_l: parse!("train.pretrain_unroll_l"),
            pretrain_epochs: parse!("train.pretrain_epochs"),
            l_max_after_pretrain: parse!("train.l_max_after_pretrain"),
            epochs: parse!("train.epochs"),
            batch_size: parse!("train.batch_size"),
            seed: parse!("train.seed"),
        };
        if let Some((k, (_, at))) = fields.into_iter().next() {
            return Err(corrupt(at, format!("unknown key `{k}`")));
        }

        let mut sets = [ParamSet::new(), ParamSet::new(), ParamSet::new(), ParamSet::new()];
        let mut pos = header_end;
        for (name, shape, at) in tensors {
            let (idx, path) = ["p/", "b/", "m/", "v/"]
                .iter()
                .enumerate()
                .find_map(|(i, p)| name.strip_prefix(p).map(|rest| (i, rest)))
                .ok_or_else(|| corrupt(at, format!("tensor `{name}` has no known prefix")))?;
            let n: usize = shape.iter().product();
            let end = n
                .checked_mul(8)
                .and_then(|b| pos.checked_add(b))
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| corrupt(bytes.len(), format!("payload truncated in tensor `{name}`")))?;
            let data = bytes[pos..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| corrupt(at, e.to_string()))?;
            sets[idx].insert(path, t).map_err(|_| corrupt(at, format!("duplicate tensor `{name}`")))?;
            pos = end;
        }
        if pos != bytes.len() {
            return Err(corrupt(pos, format!("{} trailing bytes", bytes.len() - pos)));
        }
        let [params, buffers, m, v] = sets;
        let ckpt = Self {
            spec,
            target,
            params,
            buffers,
            state: TrainState {
                stage,
                epoch,
                stage_epoch,
                lr,
                best_val,
                since_best,
                plateau,
                optimizer: Adam {
                    beta1,
                    beta2,
                    eps,
                    step,
                    m,
                    v,
                },
            },
            config,
        };
        ckpt.check_consistency(header_end)?;
        Ok(ckpt)
    }

    fn check_consistency(&self, at: usize) -> Result<()> {
        let expected = self.model()?;
        for (kind, set) in [("Adam first moment", &self.state.optimizer.m), ("Adam second moment", &self.state.optimizer.v)] {
            load_into(&mut expected.params.clone(), set, kind).map_err(|e| corrupt(at, e.to_string()))?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Copy `source` into `target`, requiring identical names and shapes.
fn load_into(target: &mut ParamSet, source: &ParamSet, kind: &str) -> Result<()> {
    if target.len() != source.len() {
        return Err(Error::SpecMismatch(format!(
            "{kind} count {} does not match the model's {}",
            source.len(),
            target.len()
        )));
    }
    for (name, t) in source.iter() {
        let slot = target
            .get(name)
            .map_err(|_| Error::SpecMismatch(format!("{kind} `{name}` is not part of the model")))?;
        if slot.shape() != t.shape() {
            return Err(Error::SpecMismatch(format!(
                "{kind} `{name}` has shape {:?}, model expects {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        target.set(name, t.clone())?;
    }
    Ok(())
}
