//! Single-file model container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"TMOECKPT"  u32 version  u64 header_len  header (JSON)
//! u64 n_tensors
//! n_tensors x { u32 name_len  name  u32 rank  rank x u64 dim  f64 data... }
//! ```
//!
//! The header carries the config, registry, vocabulary and training
//! position; tensors carry parameters and optimizer moments (`adam.m.*`,
//! `adam.v.*`). Writes go to a temporary file that is renamed into place.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DenseModel, MoeConfig, MoeModel, ParamStore, RoutingDecision, Translator};
use crate::tasks::TaskRegistry;
use crate::tensor::Tensor;
use crate::vocab::Vocab;

pub const MAGIC: &[u8; 8] = b"TMOECKPT";
pub const VERSION: u32 = 1;

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

/// Where training stands, plus Adam moments in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub seed: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Kind {
    Moe,
    Dense,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: Kind,
    config: MoeConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    registry: Option<TaskRegistry>,
    vocab: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train: Option<TrainPosition>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    task_key: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    routes: Vec<RoutingDecision>,
}

#[derive(Serialize, Deserialize)]
struct TrainPosition {
    step: u64,
    seed: u64,
}

pub enum Checkpoint {
    Moe { model: MoeModel, state: Option<TrainState> },
    Dense(DenseModel),
}

impl Checkpoint {
    pub fn translator(&self) -> &dyn Translator {
        match self {
            Checkpoint::Moe { model, .. } => model,
            Checkpoint::Dense(d) => d,
        }
    }
}

pub fn save_moe(path: &Path, model: &MoeModel, state: Option<&TrainState>) -> Result<()> {
    let header = Header {
        kind: Kind::Moe,
        config: model.config().clone(),
        registry: Some(model.registry().clone()),
        vocab: model.vocab().tokens().to_vec(),
        train: state.map(|s| TrainPosition { step: s.step, seed: s.seed }),
        task_key: None,
        routes: Vec::new(),
    };
    let mut tensors: Vec<(String, &[usize], &[f64])> = model
        .params()
        .iter()
        .map(|(n, t)| (n.to_string(), t.shape(), t.data()))
        .collect();
    if let Some(s) = state {
        let params: Vec<_> = model.params().iter().collect();
        if s.m.len() != params.len() || s.v.len() != params.len() {
            return Err(Error::config("optimizer state does not match the parameter list"));
        }
        for (prefix, moments) in [(ADAM_M, &s.m), (ADAM_V, &s.v)] {
            for ((name, t), data) in params.iter().zip(moments) {
                if data.len() != t.numel() {
                    return Err(Error::config(format!("optimizer moment for {name} has the wrong size")));
                }
                tensors.push((format!("{prefix}{name}"), t.shape(), data));
            }
        }
    }
    write_file(path, &header, &tensors)
}

pub fn save_dense(path: &Path, model: &DenseModel) -> Result<()> {
    let header = Header {
        kind: Kind::Dense,
        config: model.config().clone(),
        registry: None,
        vocab: model.vocab().tokens().to_vec(),
        train: None,
        task_key: Some(model.task_key().to_string()),
        routes: model.routes().to_vec(),
    };
    let tensors: Vec<_> = model
        .params()
        .iter()
        .map(|(n, t)| (n.to_string(), t.shape(), t.data()))
        .collect();
    write_file(path, &header, &tensors)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bad = |msg: String| Error::Checkpoint {
        path: path.to_path_buf(),
        msg,
    };
    let (header, tensors) = read_file(path)?;
    let vocab = Vocab::from_tokens(header.vocab).map_err(|e| bad(format!("vocabulary: {e}")))?;
    let mut store = ParamStore::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (name, t) in tensors {
        if let Some(rest) = name.strip_prefix(ADAM_M) {
            m.push((rest.to_string(), t.into_data()));
        } else if let Some(rest) = name.strip_prefix(ADAM_V) {
            v.push((rest.to_string(), t.into_data()));
        } else {
            store.insert(name, t)?;
        }
    }
    match header.kind {
        Kind::Moe => {
            let registry = header.registry.ok_or_else(|| bad("MoE checkpoint without a task registry".into()))?;
            let state = match header.train {
                None => None,
                Some(pos) => {
                    let names: Vec<&str> = store.iter().map(|(n, _)| n).collect();
                    let order = |list: Vec<(String, Vec<f64>)>, what: &str| -> Result<Vec<Vec<f64>>> {
                        if list.is_empty() {
                            return Ok(store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect());
                        }
                        if list.len() != names.len() || list.iter().zip(&names).any(|((a, _), b)| a != b) {
                            return Err(bad(format!("{what} moments do not match the parameters")));
                        }
                        Ok(list.into_iter().map(|(_, d)| d).collect())
                    };
                    Some(TrainState {
                        step: pos.step,
                        seed: pos.seed,
                        m: order(m, "first")?,
                        v: order(v, "second")?,
                    })
                }
            };
            let model = MoeModel::from_parts(header.config, registry, vocab, store).map_err(|e| bad(e.to_string()))?;
            Ok(Checkpoint::Moe { model, state })
        }
        Kind::Dense => {
            let key = header.task_key.ok_or_else(|| bad("dense checkpoint without a task key".into()))?;
            let model = DenseModel::from_parts(header.config, vocab, store, key, header.routes)
                .map_err(|e| bad(e.to_string()))?;
            Ok(Checkpoint::Dense(model))
        }
    }
}

/// Loads a checkpoint that must hold a routed model.
pub fn load_moe(path: &Path) -> Result<(MoeModel, Option<TrainState>)> {
    match load(path)? {
        Checkpoint::Moe { model, state } => Ok((model, state)),
        Checkpoint::Dense(_) => Err(Error::Checkpoint {
            path: path.to_path_buf(),
            msg: "expected a mixture-of-experts checkpoint, found an extracted dense model".into(),
        }),
    }
}

fn write_file(path: &Path, header: &Header, tensors: &[(String, &[usize], &[f64])]) -> Result<()> {
    let tmp = tmp_path(path);
    let write = || -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(&tmp)?);
        let json = serde_json::to_vec(header).map_err(std::io::Error::other)?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        w.write_all(&(tensors.len() as u64).to_le_bytes())?;
        for (name, shape, data) in tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in *shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for x in *data {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.into_inner().map_err(|e| e.into_error())?.sync_all()
    };
    write().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

fn read_file(path: &Path) -> Result<(Header, Vec<(String, Tensor)>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |msg: String| Error::Checkpoint {
        path: path.to_path_buf(),
        msg,
    };
    let io = |e: std::io::Error| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            bad("file is truncated".into())
        } else {
            Error::io(path, e)
        }
    };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)".into()));
    }
    let version = read_u32(&mut r).map_err(io)?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let len = read_u64(&mut r).map_err(io)?;
    let mut json = vec![0u8; usize::try_from(len).map_err(|_| bad("header too large".into()))?];
    r.read_exact(&mut json).map_err(io)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| bad(format!("header: {e}")))?;
    let count = read_u64(&mut r).map_err(io)?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let n = read_u32(&mut r).map_err(io)? as usize;
        let mut name = vec![0u8; n];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r).map_err(io)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(io)?;
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 8];
        r.read_exact(&mut bytes).map_err(io)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| bad(format!("tensor {name}: {e}")))?;
        tensors.push((name, t));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(io)? != 0 {
        return Err(bad("trailing bytes after the last tensor".into()));
    }
    Ok((header, tensors))
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
