//! Binary checkpoint container.
//!
//! Layout (little endian):
//!
//! ```text
//! "ACMP" | u32 version | u32 n | n bytes UTF-8 "key=value\n" lines
//! u32 record count | records: u32 name_len, name, u32 ndim, ndim × u64 dims, f64 payload
//! ```
//!
//! Model files carry the config and vocabulary in the key-value block.
//! Optimizer state goes to a separate file in the same container so the model
//! file stays small enough to ship.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use super::{AdamW, AdamWConfig, Model, ModelConfig, ModelError, Result, Vocabulary};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"ACMP";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Container {
    header: BTreeMap<String, String>,
    records: Vec<(String, Tensor)>,
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> ModelError {
    ModelError::Checkpoint {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_container(
    path: &Path,
    header: &BTreeMap<String, String>,
    records: &[(&str, &Tensor)],
) -> Result<()> {
    let mut text = String::new();
    for (k, v) in header {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(ckpt_err(
                path,
                format!("header entry {k:?} cannot be stored"),
            ));
        }
        text.push_str(&format!("{k}={v}\n"));
    }
    let payload: usize = records
        .iter()
        .map(|(n, t)| 12 + n.len() + 8 * (t.ndim() + t.numel()))
        .sum();
    let mut buf = Vec::with_capacity(16 + text.len() + payload);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(text.len() as u32).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    // write-then-rename so an interrupted save never leaves a torn file behind
    let tmp = std::path::PathBuf::from(format!("{}.partial", path.display()));
    let mut f = fs::File::create(&tmp).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))?;
    f.sync_all().map_err(io_err(path))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

struct Cursor<'a> {
    path: &'a Path,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(ckpt_err(
                self.path,
                format!(
                    "truncated: needed {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.buf.len()
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn utf8(&mut self, n: usize) -> Result<&'a str> {
        let path = self.path;
        std::str::from_utf8(self.take(n)?).map_err(|_| ckpt_err(path, "invalid UTF-8 in header"))
    }
}

fn read_container(path: &Path) -> Result<Container> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut c = Cursor {
        path,
        buf: &bytes,
        pos: 0,
    };
    if c.take(4)? != MAGIC {
        return Err(ckpt_err(path, "not a checkpoint (bad magic)"));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ckpt_err(
            path,
            format!("format version {version}, this build reads version {CHECKPOINT_VERSION}"),
        ));
    }
    let n = c.u32()? as usize;
    let mut header = BTreeMap::new();
    for line in c.utf8(n)?.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ckpt_err(path, format!("malformed header line {line:?}")))?;
        header.insert(k.to_string(), v.to_string());
    }
    let count = c.u32()? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = c.utf8(len)?.to_string();
        let ndim = c.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| {
                ckpt_err(
                    path,
                    format!("record {name} has implausible shape {shape:?}"),
                )
            })?;
        let data = c
            .take(8 * numel)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let t =
            Tensor::new(&shape, data).map_err(|e| ckpt_err(path, format!("record {name}: {e}")))?;
        records.push((name, t));
    }
    if c.pos != bytes.len() {
        return Err(ckpt_err(
            path,
            format!("{} trailing bytes", bytes.len() - c.pos),
        ));
    }
    Ok(Container { header, records })
}

fn header_usize(path: &Path, h: &BTreeMap<String, String>, key: &str) -> Result<usize> {
    h.get(key)
        .ok_or_else(|| ckpt_err(path, format!("missing header key {key}")))?
        .parse()
        .map_err(|_| ckpt_err(path, format!("header key {key} is not an integer")))
}

impl Model {
    /// Writes parameters, config and vocabulary; `metadata` entries are stored
    /// under `meta.` and returned by [`load_checkpoint`].
    pub fn save_checkpoint(
        &self,
        path: impl AsRef<Path>,
        metadata: &BTreeMap<String, String>,
    ) -> Result<()> {
        let mut header = BTreeMap::new();
        header.insert("kind".to_string(), "model".to_string());
        for (k, v) in self.config.to_pairs() {
            header.insert(format!("model.{k}"), v.to_string());
        }
        header.insert("text.vocab".into(), self.vocab.words().join(" "));
        for (k, v) in metadata {
            header.insert(format!("meta.{k}"), v.clone());
        }
        let records: Vec<(&str, &Tensor)> = self
            .names
            .iter()
            .zip(&self.params)
            .map(|(n, p)| (n.as_str(), p.as_ref()))
            .collect();
        write_container(path.as_ref(), &header, &records)
    }
}

/// Reads a model file. With `expected`, any config difference is rejected.
pub fn load_checkpoint(
    path: impl AsRef<Path>,
    expected: Option<&ModelConfig>,
) -> Result<(Model, BTreeMap<String, String>)> {
    let path = path.as_ref();
    let c = read_container(path)?;
    if c.header.get("kind").map(String::as_str) != Some("model") {
        return Err(ckpt_err(path, "not a model checkpoint"));
    }
    let mut config = ModelConfig::toy(0);
    for (k, _) in config.clone().to_pairs() {
        let v = header_usize(path, &c.header, &format!("model.{k}"))?;
        config.set(k, v);
    }
    if let Some(exp) = expected {
        for ((k, want), (_, got)) in exp.to_pairs().into_iter().zip(config.to_pairs()) {
            if want != got {
                return Err(ckpt_err(
                    path,
                    format!("config mismatch: {k} is {got}, expected {want}"),
                ));
            }
        }
    }
    let words = c
        .header
        .get("text.vocab")
        .ok_or_else(|| ckpt_err(path, "missing vocabulary"))?
        .split(' ')
        .map(str::to_string)
        .collect();
    let vocab = Vocabulary::from_words(words).map_err(|e| ckpt_err(path, e.to_string()))?;
    let mut model = Model::new(config, vocab, 0).map_err(|e| ckpt_err(path, e.to_string()))?;
    if c.records.len() != model.params.len() {
        return Err(ckpt_err(
            path,
            format!(
                "{} parameter records, config implies {}",
                c.records.len(),
                model.params.len()
            ),
        ));
    }
    for (i, (name, t)) in c.records.into_iter().enumerate() {
        if name != model.names[i] || t.shape() != model.params[i].shape() {
            return Err(ckpt_err(
                path,
                format!(
                    "record {i} is {name} {:?}, expected {} {:?}",
                    t.shape(),
                    model.names[i],
                    model.params[i].shape()
                ),
            ));
        }
        model.params[i] = Arc::new(t);
    }
    let meta = c
        .header
        .into_iter()
        .filter_map(|(k, v)| k.strip_prefix("meta.").map(|k| (k.to_string(), v)))
        .collect();
    Ok((model, meta))
}

/// Writes optimizer moments and step count for resuming `model`'s training.
pub fn save_optimizer(path: impl AsRef<Path>, opt: &AdamW, model: &Model) -> Result<()> {
    let c = opt.config;
    let header: BTreeMap<String, String> = [
        ("kind", "optimizer".to_string()),
        ("opt.step", opt.step.to_string()),
        ("opt.lr", c.lr.to_string()),
        ("opt.beta1", c.beta1.to_string()),
        ("opt.beta2", c.beta2.to_string()),
        ("opt.eps", c.eps.to_string()),
        ("opt.weight_decay", c.weight_decay.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let mut tensors = Vec::with_capacity(2 * model.params.len());
    for (kind, moments) in [("m", &opt.m), ("v", &opt.v)] {
        for (i, name) in model.names.iter().enumerate() {
            let t = Tensor::new(model.params[i].shape(), moments[i].clone())?;
            tensors.push((format!("{kind}.{name}"), t));
        }
    }
    let records: Vec<(&str, &Tensor)> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    write_container(path.as_ref(), &header, &records)
}

/// Reads optimizer state written by [`save_optimizer`] for the same model layout.
pub fn load_optimizer(path: impl AsRef<Path>, model: &Model) -> Result<AdamW> {
    let path = path.as_ref();
    let c = read_container(path)?;
    if c.header.get("kind").map(String::as_str) != Some("optimizer") {
        return Err(ckpt_err(path, "not an optimizer state file"));
    }
    let float = |key: &str| -> Result<f64> {
        c.header
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| ckpt_err(path, format!("missing or invalid {key}")))
    };
    let config = AdamWConfig {
        lr: float("opt.lr")?,
        beta1: float("opt.beta1")?,
        beta2: float("opt.beta2")?,
        eps: float("opt.eps")?,
        weight_decay: float("opt.weight_decay")?,
    };
    let mut opt = AdamW::new(config, &model.params);
    opt.step = header_usize(path, &c.header, "opt.step")? as u64;
    let n = model.params.len();
    if c.records.len() != 2 * n {
        return Err(ckpt_err(
            path,
            "optimizer state does not match the model layout",
        ));
    }
    for (i, (name, t)) in c.records.into_iter().enumerate() {
        let (kind, j) = if i < n { ("m", i) } else { ("v", i - n) };
        if name != format!("{kind}.{}", model.names[j]) || t.shape() != model.params[j].shape() {
            return Err(ckpt_err(
                path,
                format!("unexpected optimizer record {name}"),
            ));
        }
        let slot = if i < n { &mut opt.m[j] } else { &mut opt.v[j] };
        *slot = t.into_data();
    }
    Ok(opt)
}
