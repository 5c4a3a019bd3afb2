//! Versioned little-endian checkpoint: model config, every named parameter
//! array, the prompt EMA and the optimizer state.

use std::path::Path;

use thiserror::Error;

use crate::heads::PoolingMode;
use crate::model::{Model, ModelConfig, ModelError, Task};
use crate::optim::{Adam, AdamConfig};
use crate::prompt::PromptEma;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PTCK";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),
    #[error("checkpoint truncated at byte {offset} while reading {what}")]
    Truncated { offset: u64, what: &'static str },
    #[error("corrupt checkpoint at byte {offset}: {reason}")]
    Corrupt { offset: u64, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Adam,
}

impl Checkpoint {
    pub fn fresh(model: Model, adam: AdamConfig) -> Self {
        let optimizer = Adam::new(&model.store, adam);
        Self { model, optimizer }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u16(VERSION);
        let c = &self.model.config;
        w.u32(c.d_in as u32);
        w.u32(c.dim as u32);
        w.u32(c.clusters as u32);
        w.u32(c.heads as u32);
        w.u8(match c.pooling {
            PoolingMode::Pro => 0,
            PoolingMode::Cls => 1,
            PoolingMode::ProCls => 2,
        });
        w.u8(u8::from(c.clustering));
        w.u8(u8::from(c.merging));
        match c.task {
            Task::Classification { classes } => {
                w.u8(0);
                w.u32(classes as u32);
            }
            Task::Survival { bins } => {
                w.u8(1);
                w.u32(bins as u32);
            }
        }
        w.f64(c.alpha);
        w.f64(c.theta);
        w.u32(self.model.store.len() as u32);
        for (_, p) in self.model.store.iter() {
            w.str(&p.name);
            w.u8(u8::from(p.frozen));
            w.tensor(&p.value);
        }
        match &self.model.ema {
            Some(e) => {
                w.u8(1);
                w.tensor(&e.p_bar);
                w.f64(e.theta);
                w.u64(e.steps);
            }
            None => w.u8(0),
        }
        let o = &self.optimizer;
        w.f64(o.config.beta1);
        w.f64(o.config.beta2);
        w.f64(o.config.eps);
        w.f64(o.config.weight_decay);
        w.u64(o.t);
        w.u32(o.m.len() as u32);
        for (m, v) in o.m.iter().zip(&o.v) {
            w.tensor(m);
            w.tensor(v);
        }
        w.0
    }

    pub fn decode(buf: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let d_in = r.u32("config")? as usize;
        let dim = r.u32("config")? as usize;
        let clusters = r.u32("config")? as usize;
        let heads = r.u32("config")? as usize;
        let at = r.pos;
        let pooling = match r.u8("config")? {
            0 => PoolingMode::Pro,
            1 => PoolingMode::Cls,
            2 => PoolingMode::ProCls,
            t => return Err(r.corrupt(at, format!("pooling tag {t}"))),
        };
        let clustering = r.flag("config")?;
        let merging = r.flag("config")?;
        let at = r.pos;
        let task = match (r.u8("config")?, r.u32("config")? as usize) {
            (0, classes) => Task::Classification { classes },
            (1, bins) => Task::Survival { bins },
            (t, _) => return Err(r.corrupt(at, format!("task tag {t}"))),
        };
        let alpha = r.f64("config")?;
        let theta = r.f64("config")?;
        let config = ModelConfig {
            d_in,
            dim,
            clusters,
            heads,
            pooling,
            clustering,
            merging,
            task,
            alpha,
            theta,
        };
        let mut model = Model::new(config, 0)?;
        let at = r.pos;
        let count = r.u32("parameters")? as usize;
        if count != model.store.len() {
            return Err(r.corrupt(at, format!("{count} parameters, config implies {}", model.store.len())));
        }
        for p in model.store.iter_mut() {
            let at = r.pos;
            let name = r.str("parameter name")?;
            if name != p.name {
                return Err(r.corrupt(at, format!("parameter {name}, expected {}", p.name)));
            }
            p.frozen = r.flag("parameter")?;
            let at = r.pos;
            let value = r.tensor("parameter")?;
            if value.shape() != p.value.shape() {
                return Err(r.corrupt(
                    at,
                    format!("{name} has shape {:?}, expected {:?}", value.shape(), p.value.shape()),
                ));
            }
            p.value = value;
        }
        let at = r.pos;
        model.ema = match (r.flag("ema")?, clustering) {
            (true, true) => {
                let p_bar = r.tensor("ema")?;
                let theta = r.f64("ema")?;
                let steps = r.u64("ema")?;
                Some(PromptEma { p_bar, theta, steps })
            }
            (false, false) => None,
            _ => return Err(r.corrupt(at, "prompt EMA presence disagrees with config")),
        };
        let config = AdamConfig {
            beta1: r.f64("optimizer")?,
            beta2: r.f64("optimizer")?,
            eps: r.f64("optimizer")?,
            weight_decay: r.f64("optimizer")?,
        };
        let t = r.u64("optimizer")?;
        let at = r.pos;
        let moments = r.u32("optimizer")? as usize;
        if moments != model.store.len() {
            return Err(r.corrupt(
                at,
                format!("{moments} moment pairs for {} parameters", model.store.len()),
            ));
        }
        let mut m = Vec::with_capacity(moments);
        let mut v = Vec::with_capacity(moments);
        for _ in 0..moments {
            m.push(r.tensor("optimizer")?);
            v.push(r.tensor("optimizer")?);
        }
        if r.pos != buf.len() {
            return Err(r.corrupt(r.pos, "trailing bytes"));
        }
        Ok(Self {
            model,
            optimizer: Adam { config, m, v, t },
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::decode(&std::fs::read(path)?)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for &x in t.data() {
            self.f64(x);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated {
                offset: self.buf.len() as u64,
                what,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn corrupt(&self, at: usize, reason: impl Into<String>) -> CheckpointError {
        CheckpointError::Corrupt {
            offset: at as u64,
            reason: reason.into(),
        }
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn flag(&mut self, what: &'static str) -> Result<bool, CheckpointError> {
        let at = self.pos;
        match self.u8(what)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(self.corrupt(at, format!("flag value {v}"))),
        }
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &'static str) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn str(&mut self, what: &'static str) -> Result<String, CheckpointError> {
        let len = self.u32(what)? as usize;
        let at = self.pos;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|e| self.corrupt(at, e.to_string()))
    }

    fn tensor(&mut self, what: &'static str) -> Result<Tensor, CheckpointError> {
        let at = self.pos;
        let rank = self.u32(what)? as usize;
        if rank == 0 || rank > 4 {
            return Err(self.corrupt(at, format!("tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32(what)? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= self.buf.len() - self.pos))
            .ok_or(CheckpointError::Truncated {
                offset: self.buf.len() as u64,
                what,
            })?;
        let raw = self.take(8 * n, what)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data).map_err(|e| self.corrupt(at, e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BagRecord, Label};
    use crate::nn::xavier_uniform_init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn trained(config: ModelConfig) -> Checkpoint {
        let mut model = Model::new(config, 3).unwrap();
        let mut opt = Adam::new(&model.store, AdamConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let label = match model.config.task {
            Task::Classification { .. } => Label::Class(1),
            Task::Survival { .. } => Label::Survival(crate::heads::SurvivalLabel {
                time_bin: 1,
                censored: false,
            }),
        };
        let bag = BagRecord::new("b", xavier_uniform_init(9, 16, &mut rng), label).unwrap();
        for _ in 0..2 {
            model.train_step(&bag, &mut opt, 1e-3).unwrap();
        }
        Checkpoint { model, optimizer: opt }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        for config in [
            ModelConfig::default(),
            ModelConfig {
                clustering: false,
                pooling: PoolingMode::Cls,
                ..Default::default()
            },
            ModelConfig {
                merging: false,
                task: Task::Survival { bins: 4 },
                ..Default::default()
            },
        ] {
            let ck = trained(config);
            let bytes = ck.encode();
            let back = Checkpoint::decode(&bytes).unwrap();
            assert_eq!(back.encode(), bytes);
            assert_eq!(back.model.store, ck.model.store);
            assert_eq!(back.model.ema, ck.model.ema);
            assert_eq!(back.optimizer, ck.optimizer);
        }
    }

    #[test]
    fn truncation_is_reported() {
        let bytes = trained(ModelConfig::default()).encode();
        for cut in [0, 3, 10, 60, bytes.len() / 2, bytes.len() - 1] {
            assert!(Checkpoint::decode(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        assert!(matches!(
            Checkpoint::decode(&bytes[..bytes.len() - 1]),
            Err(CheckpointError::Truncated { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(CheckpointError::BadMagic)));
    }
}
