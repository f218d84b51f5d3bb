//! Little-endian binary checkpoints.
//!
//! ```text
//! "MGFA" · version u32 · epoch u32 · rng state [u8; 16] · tensor count u32
//! per tensor: name len u16 · name · ndim u8 · dims u32×ndim · data f64×∏dims
//! ```
//!
//! Besides parameters and momentum buffers, the tensor list carries the model
//! and training configuration as small `config.*` vectors so that a
//! checkpoint is self-describing.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::attention::{BlendWeights, LossWeights};
use crate::error::{Error, Result};
use crate::model::train::{Sgd, TrainConfig, Trainer};
use crate::model::{BackboneConfig, Model};
use crate::synth::transform::TransformOptions;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MGFA";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic {0:?}, not a checkpoint")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(u32),
    #[error("truncated checkpoint: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint lacks tensor {0:?}")]
    Missing(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: u32,
    pub rng_state: [u8; 16],
    pub tensors: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(CheckpointError::Truncated {
                offset: self.pos,
                needed: n,
            })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.rng_state);
        let count = u32::try_from(self.tensors.len())
            .map_err(|_| CheckpointError::Malformed("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len())
                .map_err(|_| CheckpointError::Malformed(format!("name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let ndim = u8::try_from(t.shape().len())
                .map_err(|_| CheckpointError::Malformed(format!("{name}: too many dims")))?;
            out.push(ndim);
            for &d in t.shape() {
                let d = u32::try_from(d)
                    .map_err(|_| CheckpointError::Malformed(format!("{name}: dim too large")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(buf: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let epoch = r.u32()?;
        let rng_state: [u8; 16] = r.take(16)?.try_into().expect("16 bytes");
        let count = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| CheckpointError::Malformed(format!("{name}: size overflow")))?;
            let data = r
                .take(numel)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(&shape, data)
                .map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != buf.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes",
                buf.len() - r.pos
            )));
        }
        Ok(Self {
            epoch,
            rng_state,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::decode(&bytes)?)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    fn backbone(&self) -> Result<BackboneConfig, CheckpointError> {
        let v = self.get("config.backbone")?.data();
        if v.len() < 6 {
            return Err(CheckpointError::Malformed(
                "config.backbone too short".into(),
            ));
        }
        let u = |x: f64| x as usize;
        Ok(BackboneConfig {
            kernel: u(v[0]),
            pool: u(v[1]),
            hook: u(v[2]),
            input_size: u(v[3]),
            classes: u(v[4]),
            channels: v[5..].iter().map(|&x| u(x)).collect(),
        })
    }

    pub fn blend(&self) -> Result<BlendWeights> {
        let v = self.get("config.blend")?.data();
        match *v {
            [a, b, g] => BlendWeights::new(a, b, g),
            _ => Err(CheckpointError::Malformed("config.blend must hold 3 values".into()).into()),
        }
    }

    /// Rebuilds the model; `momentum.*` and training config are ignored.
    pub fn model(&self) -> Result<Model> {
        let config = self.backbone()?;
        config.validate()?;
        let mut model = Model::init(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        let names = model.param_names();
        for (name, p) in names.iter().zip(model.params_mut()) {
            let t = self.get(name)?;
            if t.shape() != p.shape() {
                return Err(CheckpointError::Malformed(format!(
                    "{name}: shape {:?}, model expects {:?}",
                    t.shape(),
                    p.shape()
                ))
                .into());
            }
            *p = t.clone();
        }
        Ok(model)
    }
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

impl Trainer {
    pub fn checkpoint(&self) -> Checkpoint {
        let c = &self.model.config;
        let mut backbone = vec![
            c.kernel as f64,
            c.pool as f64,
            c.hook as f64,
            c.input_size as f64,
            c.classes as f64,
        ];
        backbone.extend(c.channels.iter().map(|&x| x as f64));
        let t = &self.config;
        let train = vec![
            t.lr,
            t.momentum,
            t.lr_decay,
            f64::from(t.lr_period),
            f64::from(t.epochs),
            t.batch_size as f64,
            t.loss.delta,
            t.loss.lambda,
            t.loss.mu,
            flag(t.augment.crop),
            flag(t.augment.flip),
        ];
        let vec_tensor = |v: Vec<f64>| {
            let n = v.len();
            Tensor::new(&[n], v).expect("vector shape")
        };
        let mut tensors = vec![
            ("config.backbone".to_string(), vec_tensor(backbone)),
            (
                "config.blend".to_string(),
                vec_tensor(vec![t.blend.alpha(), t.blend.beta(), t.blend.gamma()]),
            ),
            ("config.train".to_string(), vec_tensor(train)),
        ];
        let names = self.model.param_names();
        for (name, p) in names.iter().zip(self.model.params()) {
            tensors.push((name.clone(), p.clone()));
        }
        for (name, v) in names.iter().zip(&self.optimizer.velocity) {
            tensors.push((format!("momentum.{name}"), v.clone()));
        }
        let mut rng_state = [0u8; 16];
        rng_state[..8].copy_from_slice(&self.seed.to_le_bytes());
        rng_state[8..].copy_from_slice(&(self.rng.get_word_pos() as u64).to_le_bytes());
        Checkpoint {
            epoch: self.epoch,
            rng_state,
            tensors,
        }
    }

    /// Restores a trainer exactly where [`Trainer::checkpoint`] left it.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let model = ckpt.model()?;
        let v = ckpt.get("config.train")?.data();
        if v.len() != 11 {
            return Err(
                CheckpointError::Malformed("config.train must hold 11 values".into()).into(),
            );
        }
        let seed = u64::from_le_bytes(ckpt.rng_state[..8].try_into().expect("8 bytes"));
        let word_pos = u64::from_le_bytes(ckpt.rng_state[8..].try_into().expect("8 bytes"));
        let config = TrainConfig {
            lr: v[0],
            momentum: v[1],
            lr_decay: v[2],
            lr_period: v[3] as u32,
            epochs: v[4] as u32,
            batch_size: v[5] as usize,
            seed,
            blend: ckpt.blend()?,
            loss: LossWeights::new(v[6], v[7], v[8])?,
            augment: TransformOptions {
                crop: v[9] != 0.0,
                flip: v[10] != 0.0,
            },
        };
        let mut trainer = Trainer::with_model(model, config)?;
        let names = trainer.model.param_names();
        let mut velocity = Vec::with_capacity(names.len());
        for name in &names {
            velocity.push(ckpt.get(&format!("momentum.{name}"))?.clone());
        }
        trainer.optimizer = Sgd { velocity };
        trainer.rng.set_word_pos(u128::from(word_pos));
        trainer.epoch = ckpt.epoch;
        Ok(trainer)
    }
}
