//! Binary tensor container, used for checkpoints and prepared patch sets.
//!
//! ```text
//! "DMCN"  u32 version
//! u32 entry count,  then per entry:  str key, str value
//! u32 tensor count, then per tensor: str name, u32 rank, rank x u32 dim, f32 data
//! ```
//!
//! Numbers are little-endian and `str` is a u32 byte length followed by
//! UTF-8. The entries carry the configuration and counters as `key=value`
//! text; floats are written in their shortest round-tripping form, so every
//! value reloads bit-exactly.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use dmcn_core::model::{Model, ModelConfig};
use dmcn_core::training::{Checkpoint, EpochRecord, OptimizerState, TrainConfig};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DMCN";
pub const VERSION: u32 = 1;
/// Tensors of higher rank are rejected as corrupt.
const MAX_RANK: u32 = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl StoredTensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Self {
        let t = StoredTensor {
            name: name.into(),
            dims,
            data,
        };
        assert_eq!(
            t.dims.iter().product::<usize>(),
            t.data.len(),
            "{}: dims and data disagree",
            t.name
        );
        t
    }
}

/// `2x3` style rendering of a shape.
struct Dims<'a>(&'a [usize]);

impl fmt::Display for Dims<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        write!(f, "[{}]", parts.join("x"))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<StoredTensor>,
}

impl TensorFile {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn push_meta(&mut self, key: impl Into<String>, value: impl fmt::Display) {
        self.meta.push((key.into(), value.to_string()));
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self
            .tensors
            .iter()
            .map(|t| t.data.len() * 4 + t.name.len() + 8 + 4 * t.dims.len())
            .sum();
        let mut out = Vec::with_capacity(payload + 64);
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.meta.len() as u32);
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_u32(&mut out, self.tensors.len() as u32);
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            put_u32(&mut out, t.dims.len() as u32);
            for &d in &t.dims {
                put_u32(&mut out, u32::try_from(d).expect("dimension fits in u32"));
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(r.error_at(0, format!("bad magic {magic:?}")));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.error_at(4, format!("unsupported version {version}")));
        }
        let mut file = TensorFile::default();
        let entries = r.u32("entry count")?;
        let mut keys = HashSet::new();
        for _ in 0..entries {
            let at = r.pos;
            let key = r.string("entry key")?;
            let value = r.string("entry value")?;
            if !keys.insert(key.clone()) {
                return Err(r.error_at(at, format!("duplicate entry {key}")));
            }
            file.meta.push((key, value));
        }
        let count = r.u32("tensor count")?;
        let mut names = HashSet::new();
        for _ in 0..count {
            let at = r.pos;
            let name = r.string("tensor name")?;
            if !names.insert(name.clone()) {
                return Err(r.error_at(at, format!("duplicate tensor {name}")));
            }
            let rank_at = r.pos;
            let rank = r.u32("tensor rank")?;
            if rank > MAX_RANK {
                return Err(r.error_at(rank_at, format!("tensor {name} has rank {rank}")));
            }
            let mut dims = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                dims.push(r.u32("tensor dimension")? as usize);
            }
            let len = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let bytes_needed = len.and_then(|n| n.checked_mul(4));
            let Some(nbytes) = bytes_needed else {
                return Err(r.error_at(rank_at, format!("tensor {name} is too large")));
            };
            let raw = r.take(nbytes, "tensor data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            file.tensors.push(StoredTensor { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(r.error_at(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(file)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(Error::io(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(Error::io(path))?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, u32::try_from(s.len()).expect("string fits in u32"));
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error_at(&self, offset: usize, message: String) -> Error {
        Error::Parse {
            offset: offset as u64,
            message,
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let left = self.bytes.len() - self.pos;
        if n > left {
            return Err(self.error_at(self.pos, format!("truncated {what}: need {n} bytes, {left} left")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let at = self.pos;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.error_at(at, format!("{what} is not UTF-8")))
    }
}

fn meta_value<T: std::str::FromStr>(file: &TensorFile, key: &str) -> Result<T> {
    let raw = file.meta(key).ok_or_else(|| Error::Parse {
        offset: 8,
        message: format!("missing entry {key}"),
    })?;
    raw.parse().map_err(|_| Error::Parse {
        offset: 8,
        message: format!("entry {key} has unreadable value {raw:?}"),
    })
}

pub fn push_model_config(file: &mut TensorFile, c: &ModelConfig) {
    file.push_meta("model.channels", c.channels);
    file.push_meta("model.kernel", c.kernel);
    file.push_meta("model.blocks_per_stage", c.blocks_per_stage);
    file.push_meta("model.local_memory", c.enable_local_memory);
    file.push_meta("model.global_memory", c.enable_global_memory);
    file.push_meta("model.hourglass", c.enable_hourglass);
    file.push_meta("model.input_channels", c.input_channels);
    file.push_meta("model.seed", c.seed);
}

pub fn read_model_config(file: &TensorFile) -> Result<ModelConfig> {
    Ok(ModelConfig {
        channels: meta_value(file, "model.channels")?,
        kernel: meta_value(file, "model.kernel")?,
        blocks_per_stage: meta_value(file, "model.blocks_per_stage")?,
        enable_local_memory: meta_value(file, "model.local_memory")?,
        enable_global_memory: meta_value(file, "model.global_memory")?,
        enable_hourglass: meta_value(file, "model.hourglass")?,
        input_channels: meta_value(file, "model.input_channels")?,
        seed: meta_value(file, "model.seed")?,
    })
}

fn push_train_config(file: &mut TensorFile, c: &TrainConfig) {
    file.push_meta("train.lr0", c.lr0);
    file.push_meta("train.decay_every_epochs", c.decay_every_epochs);
    file.push_meta("train.decay_factor", c.decay_factor);
    file.push_meta("train.batch_size", c.batch_size);
    file.push_meta("train.beta1", c.beta1);
    file.push_meta("train.beta2", c.beta2);
    file.push_meta("train.epsilon", c.epsilon);
    file.push_meta("train.weight_decay", c.weight_decay);
    file.push_meta("train.epochs", c.epochs);
    file.push_meta("train.seed", c.seed);
}

fn read_train_config(file: &TensorFile) -> Result<TrainConfig> {
    Ok(TrainConfig {
        lr0: meta_value(file, "train.lr0")?,
        decay_every_epochs: meta_value(file, "train.decay_every_epochs")?,
        decay_factor: meta_value(file, "train.decay_factor")?,
        batch_size: meta_value(file, "train.batch_size")?,
        beta1: meta_value(file, "train.beta1")?,
        beta2: meta_value(file, "train.beta2")?,
        epsilon: meta_value(file, "train.epsilon")?,
        weight_decay: meta_value(file, "train.weight_decay")?,
        epochs: meta_value(file, "train.epochs")?,
        seed: meta_value(file, "train.seed")?,
    })
}

/// Tensor names and shapes a checkpoint of `config` holds, in file order:
/// every filter and bias, then the first and second Adam moments.
pub fn checkpoint_layout(config: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
    let model = Model::<f32>::zeroed(config)?;
    let names = model.param_names();
    let mut params = Vec::new();
    for (i, p) in model.params().iter().enumerate() {
        let s = p.weights().shape();
        params.push((names[2 * i].clone(), vec![s.n, s.c, s.h, s.w]));
        params.push((names[2 * i + 1].clone(), vec![p.out_channels()]));
    }
    let mut layout = params.clone();
    for moment in ["m", "v"] {
        layout.extend(params.iter().map(|(n, d)| (format!("adam.{moment}.{n}"), d.clone())));
    }
    Ok(layout)
}

pub fn checkpoint_to_file(ckpt: &Checkpoint) -> Result<TensorFile> {
    let mut file = TensorFile::default();
    push_model_config(&mut file, &ckpt.model_config);
    push_train_config(&mut file, &ckpt.train_config);
    file.push_meta("epoch", ckpt.epoch);
    file.push_meta("optimizer.t", ckpt.optimizer.t);
    for (i, h) in ckpt.history.iter().enumerate() {
        file.push_meta(
            format!("history.{i}"),
            format_args!("{} {} {} {}", h.epoch, h.lr, h.loss, h.steps),
        );
    }
    let layout = checkpoint_layout(&ckpt.model_config)?;
    let mut flat: Vec<&[f32]> = Vec::with_capacity(layout.len());
    for p in &ckpt.params {
        flat.push(p.weights().data());
        flat.push(p.bias());
    }
    flat.extend(ckpt.optimizer.m.iter().map(Vec::as_slice));
    flat.extend(ckpt.optimizer.v.iter().map(Vec::as_slice));
    if flat.len() != layout.len() {
        return Err(Error::usage(format!(
            "checkpoint holds {} tensors, its model needs {}",
            flat.len(),
            layout.len()
        )));
    }
    for ((name, dims), data) in layout.into_iter().zip(flat) {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::TensorMismatch {
                tensor: name,
                expected: format!("{} values", dims.iter().product::<usize>()),
                found: format!("{} values", data.len()),
            });
        }
        file.tensors.push(StoredTensor::new(name, dims, data.to_vec()));
    }
    Ok(file)
}

/// Rebuilds a checkpoint, checking the stored tensors against the layout
/// of `config` and naming the first one that differs.
pub fn checkpoint_from_file(file: &TensorFile, config: &ModelConfig) -> Result<Checkpoint> {
    let layout = checkpoint_layout(config)?;
    for (i, (name, dims)) in layout.iter().enumerate() {
        let found = match file.tensors.get(i) {
            None => "nothing".to_string(),
            Some(t) if &t.name == name && &t.dims == dims => continue,
            Some(t) => format!("{} {}", t.name, Dims(&t.dims)),
        };
        return Err(Error::TensorMismatch {
            tensor: name.clone(),
            expected: format!("{name} {}", Dims(dims)),
            found,
        });
    }
    if let Some(extra) = file.tensors.get(layout.len()) {
        return Err(Error::TensorMismatch {
            tensor: extra.name.clone(),
            expected: "no further tensors".into(),
            found: format!("{} {}", extra.name, Dims(&extra.dims)),
        });
    }
    let stored = read_model_config(file)?;
    let differs =
        |a: &ModelConfig, b: &ModelConfig| ModelConfig { seed: 0, ..a.clone() } != ModelConfig { seed: 0, ..b.clone() };
    if differs(&stored, config) {
        return Err(Error::usage(format!(
            "checkpoint was written for {stored:?}, not {config:?}"
        )));
    }
    let n = layout.len() / 3;
    let mut model = Model::<f32>::zeroed(&stored)?;
    for (p, wb) in model.params_mut().iter_mut().zip(file.tensors[..n].chunks(2)) {
        p.weights_mut().copy_from_slice(&wb[0].data);
        p.bias_mut().copy_from_slice(&wb[1].data);
    }
    let optimizer = OptimizerState {
        m: file.tensors[n..2 * n].iter().map(|t| t.data.clone()).collect(),
        v: file.tensors[2 * n..].iter().map(|t| t.data.clone()).collect(),
        t: meta_value(file, "optimizer.t")?,
    };
    let epoch: usize = meta_value(file, "epoch")?;
    let mut history = Vec::new();
    while let Some(line) = file.meta(&format!("history.{}", history.len())) {
        history.push(parse_history(line).ok_or_else(|| Error::Parse {
            offset: 8,
            message: format!("unreadable history row {line:?}"),
        })?);
    }
    Ok(Checkpoint {
        model_config: stored,
        train_config: read_train_config(file)?,
        params: model.params().to_vec(),
        optimizer,
        epoch,
        history,
    })
}

fn parse_history(line: &str) -> Option<EpochRecord> {
    let mut it = line.split(' ');
    let record = EpochRecord {
        epoch: it.next()?.parse().ok()?,
        lr: it.next()?.parse().ok()?,
        loss: it.next()?.parse().ok()?,
        steps: it.next()?.parse().ok()?,
    };
    it.next().is_none().then_some(record)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    checkpoint_to_file(ckpt)?.write(path)
}

/// Loads a checkpoint with the model configuration it was written for.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = TensorFile::read(path)?;
    let config = read_model_config(&file)?;
    checkpoint_from_file(&file, &config)
}

/// Loads a checkpoint that must fit `config`.
pub fn load_checkpoint_for(path: &Path, config: &ModelConfig) -> Result<Checkpoint> {
    checkpoint_from_file(&TensorFile::read(path)?, config)
}
