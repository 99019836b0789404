//! Binary checkpoint container.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! "TELL1"  version:u8
//! text_len:u32  text block (UTF-8 key=value lines)
//! count:u32
//! per record: name_len:u16 name  dtype:u8 (1 = f64)  kind:u8 (0 trainable, 1 buffer)
//!             rank:u8  dims:u64×rank  payload:f64×numel
//! ```
//!
//! The text block holds the `model.*` config keys, `lineage=`, one
//! `history=` line per training stage and free-form `meta.*` keys.

use std::path::Path;

use indexmap::IndexMap;

use super::{EpochRecord, StageHistory};
use crate::error::{Error, Result};
use crate::manet::{Manet, ManetConfig};
use crate::raster::write_bytes;
use crate::tensor::{ParamKind, ParamStore};

pub const MAGIC: &[u8; 5] = b"TELL1";
pub const VERSION: u8 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ManetConfig,
    pub params: ParamStore,
    /// Training events, oldest first.
    pub lineage: Vec<String>,
    /// `(event name, stage history)` in training order.
    pub histories: Vec<(String, StageHistory)>,
    pub meta: IndexMap<String, String>,
}

fn history_line(event: &str, h: &StageHistory) -> String {
    let epochs: Vec<String> = h
        .epochs
        .iter()
        .map(|e| {
            format!(
                "{}:{}:{}:{}:{}:{}",
                e.epoch, e.train_loss, e.val_loss, e.val_iou, e.val_biou, e.val_mcc
            )
        })
        .collect();
    format!(
        "history={event}|{}|{}|{}|{}|{}",
        h.stage,
        h.lr,
        h.best_epoch,
        u8::from(h.stopped_early),
        epochs.join(",")
    )
}

fn parse_history(v: &str) -> Result<(String, StageHistory)> {
    let bad = || Error::Format(format!("checkpoint history line {v:?}"));
    let f: Vec<&str> = v.split('|').collect();
    if f.len() != 6 {
        return Err(bad());
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
    let int = |s: &str| s.parse::<usize>().map_err(|_| bad());
    let mut epochs = Vec::new();
    for e in f[5].split(',').filter(|s| !s.is_empty()) {
        let p: Vec<&str> = e.split(':').collect();
        if p.len() != 6 {
            return Err(bad());
        }
        epochs.push(EpochRecord {
            epoch: int(p[0])?,
            train_loss: num(p[1])?,
            val_loss: num(p[2])?,
            val_iou: num(p[3])?,
            val_biou: num(p[4])?,
            val_mcc: num(p[5])?,
        });
    }
    Ok((
        f[0].to_string(),
        StageHistory {
            stage: f[1].parse().map_err(|_| bad())?,
            lr: num(f[2])?,
            best_epoch: int(f[3])?,
            stopped_early: f[4] == "1",
            epochs,
        },
    ))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn from_model(model: &Manet, lineage: Vec<String>) -> Self {
        Self {
            config: model.config().clone(),
            params: model.params().clone(),
            lineage,
            histories: Vec::new(),
            meta: IndexMap::new(),
        }
    }

    /// Name of the latest training event, if any.
    pub fn name(&self) -> Option<&str> {
        self.lineage.last().map(String::as_str)
    }

    pub fn text_block(&self) -> String {
        let mut s = self.config.to_block();
        s.push_str(&format!("lineage={}\n", self.lineage.join(",")));
        for (event, h) in &self.histories {
            s.push_str(&history_line(event, h));
            s.push('\n');
        }
        for (k, v) in &self.meta {
            s.push_str(&format!("meta.{k}={v}\n"));
        }
        s
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        let text = self.text_block();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, v) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.push(match v.kind {
                ParamKind::Trainable => 0,
                ParamKind::Buffer => 1,
            });
            out.push(v.shape.len() as u8);
            for &d in &v.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in &v.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(5)? != MAGIC {
            return Err(Error::Format("not a TELL1 checkpoint".into()));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let text_len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(text_len)?)
            .map_err(|_| Error::Format("checkpoint text block is not UTF-8".into()))?;
        let mut model_lines = String::new();
        let mut lineage = Vec::new();
        let mut histories = Vec::new();
        let mut meta = IndexMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("checkpoint line without '=': {line}")))?;
            if k.starts_with("model.") {
                model_lines.push_str(line);
                model_lines.push('\n');
            } else if k == "lineage" {
                lineage = v.split(',').filter(|s| !s.is_empty()).map(String::from).collect();
            } else if k == "history" {
                histories.push(parse_history(v)?);
            } else if let Some(key) = k.strip_prefix("meta.") {
                meta.insert(key.to_string(), v.to_string());
            } else {
                return Err(Error::Format(format!("unknown checkpoint key {k}")));
            }
        }
        let config = ManetConfig::from_block(&model_lines)?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
                .to_string();
            if r.u8()? != DTYPE_F64 {
                return Err(Error::Format(format!("{name}: unsupported dtype")));
            }
            let kind = match r.u8()? {
                0 => ParamKind::Trainable,
                1 => ParamKind::Buffer,
                k => return Err(Error::Format(format!("{name}: unknown kind {k}"))),
            };
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_bits(r.u64()?));
            }
            params.insert(&name, &shape, data, kind)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint records".into()));
        }
        Ok(Self {
            config,
            params,
            lineage,
            histories,
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Rebuild a model for `config` from a checkpoint; every parameter name,
/// shape and kind must match the fresh layout of `config`.
pub fn transfer_load(ckpt: &Checkpoint, config: &ManetConfig) -> Result<Manet> {
    let layout = Manet::new(config.clone(), 0)?;
    let bad = layout.params().layout_mismatches(&ckpt.params);
    if !bad.is_empty() {
        return Err(Error::Compatibility(format!(
            "incompatible parameters: {}",
            bad.join(", ")
        )));
    }
    let mut ordered = ParamStore::new();
    for name in layout.params().names() {
        let v = ckpt.params.expect(name)?;
        ordered.insert(name, &v.shape, v.data.clone(), v.kind)?;
    }
    Manet::from_params(config.clone(), ordered)
}
