//! Binary checkpoint container.
//!
//! ```text
//! "PEFT" | version u32 | count u32 | entry*count | has_theta0 u32 | [count u32 | entry*count]
//! entry = name_len u32 | name utf-8 | rank u32 | dims u32*rank | values f32*prod(dims)
//! ```
//!
//! All integers and floats are little-endian and entries are sorted by name,
//! so equal parameter sets give equal bytes.

use std::collections::BTreeMap;

use peftlab::model::AdaptedModel;
use peftlab::objective::ThetaSnapshot;
use peftlab::trainer::{attach_modules, RunConfig};
use peftlab::Tensor;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"PEFT";
pub const VERSION: u32 = 1;

type Entries = BTreeMap<String, Tensor>;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Entries,
    pub theta0: Option<Entries>,
}

impl Checkpoint {
    pub fn from_model(model: &AdaptedModel, theta0: Option<&ThetaSnapshot>) -> Self {
        Self {
            params: model
                .params()
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
            theta0: theta0.map(|s| s.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        write_entries(&mut out, &self.params);
        match &self.theta0 {
            Some(t) => {
                put_u32(&mut out, 1);
                write_entries(&mut out, t);
            }
            None => put_u32(&mut out, 0),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CliError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CliError::Checkpoint(format!("unsupported version {version}")));
        }
        let params = read_entries(&mut r)?;
        let theta0 = match r.u32()? {
            0 => None,
            1 => Some(read_entries(&mut r)?),
            f => return Err(CliError::Checkpoint(format!("bad theta0 flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(CliError::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { params, theta0 })
    }

    /// Rebuilds the model described by `config` and loads these values into
    /// it. The parameter names and shapes must match exactly.
    pub fn restore(&self, config: &RunConfig) -> Result<AdaptedModel> {
        let mut model = AdaptedModel::new(
            config.model.clone(),
            config.data.kind,
            &mut config.streams().rng("init"),
        )?;
        attach_modules(&mut model, config)?;
        let expected: Vec<&str> = model.params().names().collect();
        let found: Vec<&str> = self.params.keys().map(String::as_str).collect();
        if expected != found {
            return Err(CliError::Checkpoint(
                "parameter names do not match the configured model".into(),
            ));
        }
        for (name, t) in &self.params {
            let p = model.params_mut().get_mut(name)?;
            if p.shape() != t.shape() {
                return Err(CliError::Checkpoint(format!(
                    "`{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    p.shape()
                )));
            }
            p.data_mut().copy_from_slice(t.data());
        }
        Ok(model)
    }

    pub fn theta0_snapshot(&self) -> Option<ThetaSnapshot> {
        self.theta0.clone().map(ThetaSnapshot::from_map)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn write_entries(out: &mut Vec<u8>, entries: &Entries) {
    put_u32(out, entries.len() as u32);
    for (name, t) in entries {
        put_u32(out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(out, t.shape().len() as u32);
        for &d in t.shape() {
            put_u32(out, d as u32);
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CliError::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn read_entries(r: &mut Reader<'_>) -> Result<Entries> {
    let count = r.u32()?;
    let mut out = Entries::new();
    let mut last: Option<String> = None;
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| CliError::Checkpoint("name is not UTF-8".into()))?;
        if last.as_deref().is_some_and(|l| l >= name.as_str()) {
            return Err(CliError::Checkpoint(format!("entry `{name}` out of order")));
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from(r.f32()?));
        }
        let t = Tensor::new(shape, data)?;
        last = Some(name.clone());
        out.insert(name, t);
    }
    Ok(out)
}
