//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "CVCK" | version u32 | config hash (len u64 + utf8) | kind (len u64 + utf8)
//! params:  count u64, then entries
//! buffers: count u64, then entries          (EMA state, one row per group)
//! optim:   flag u8; if 1: step u64, then m entries and v entries
//! entry:   name (len u64 + utf8) | ndim u32 | dims u64 × ndim | f64 payload
//! ```

use std::fs;
use std::path::Path;

use crate::context::{ContextViT, EmaState, GroupId};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::train::OptimState;

const MAGIC: &[u8; 4] = b"CVCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const EMA_PREFIX: &str = "ema.";

pub type Entry = (String, Tensor);

#[derive(Clone, Debug, PartialEq)]
pub struct OptimSnapshot {
    pub step: u64,
    pub m: Vec<Entry>,
    pub v: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub kind: String,
    pub params: Vec<Entry>,
    pub buffers: Vec<Entry>,
    pub optimizer: Option<OptimSnapshot>,
}

impl Checkpoint {
    pub fn from_model(model: &ContextViT, config_hash: &str, optim: Option<&OptimState>) -> Self {
        let params: Vec<Entry> = model
            .params
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect();
        let buffers = model
            .ema
            .iter()
            .flat_map(|ema| ema.values.iter())
            .map(|(g, v)| (format!("{EMA_PREFIX}{}", g.0), Tensor::new(vec![v.len()], v.clone()).expect("1-d")))
            .collect();
        let optimizer = optim.map(|o| {
            let named = |ts: &[Tensor]| -> Vec<Entry> {
                params.iter().zip(ts).map(|((n, _), t)| (n.clone(), t.clone())).collect()
            };
            OptimSnapshot {
                step: o.step,
                m: named(&o.m),
                v: named(&o.v),
            }
        });
        Self {
            config_hash: config_hash.to_string(),
            kind: model.kind.to_string(),
            params,
            buffers,
            optimizer,
        }
    }

    /// Copies parameters and buffers into `model`. The name set, order and
    /// shapes must match the model exactly; the first mismatch is named.
    pub fn apply_to(&self, model: &mut ContextViT) -> Result<()> {
        if self.kind != model.kind.to_string() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds kind {}, model is {}",
                self.kind, model.kind
            )));
        }
        let ids: Vec<_> = model.params.ids().collect();
        for (i, id) in ids.iter().enumerate() {
            let e = model.params.entry(*id);
            match self.params.get(i) {
                None => return Err(Error::Checkpoint(format!("entry {} missing from checkpoint", e.name))),
                Some((name, _)) if *name != e.name => {
                    return Err(Error::Checkpoint(format!("entry {i}: checkpoint has {name}, model expects {}", e.name)))
                }
                Some((name, t)) if t.shape() != e.value.shape() => {
                    return Err(Error::Checkpoint(format!(
                        "entry {name}: checkpoint shape {:?}, model shape {:?}",
                        t.shape(),
                        e.value.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some((name, _)) = self.params.get(ids.len()) {
            return Err(Error::Checkpoint(format!("entry {name} is not part of the model")));
        }
        for (id, (_, t)) in ids.into_iter().zip(&self.params) {
            *model.params.get_mut(id) = t.clone();
        }
        if let Some(ema) = &mut model.ema {
            ema.values.clear();
            for (name, t) in &self.buffers {
                let g = name
                    .strip_prefix(EMA_PREFIX)
                    .and_then(|s| s.parse::<u64>().ok())
                    .ok_or_else(|| Error::Checkpoint(format!("unknown buffer {name}")))?;
                if t.len() != model.config.dim {
                    return Err(Error::Checkpoint(format!("buffer {name} has {} values", t.len())));
                }
                ema.values.insert(GroupId(g), t.data().to_vec());
            }
        } else if let Some((name, _)) = self.buffers.first() {
            return Err(Error::Checkpoint(format!("buffer {name} has no place in kind {}", model.kind)));
        }
        Ok(())
    }

    /// EMA state restored from the buffers, if any.
    pub fn ema_state(&self, lambda: f64) -> Result<EmaState> {
        let mut ema = EmaState::new(lambda)?;
        for (name, t) in &self.buffers {
            if let Some(g) = name.strip_prefix(EMA_PREFIX).and_then(|s| s.parse::<u64>().ok()) {
                ema.values.insert(GroupId(g), t.data().to_vec());
            }
        }
        Ok(ema)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, &self.config_hash);
        put_str(&mut out, &self.kind);
        put_entries(&mut out, &self.params);
        put_entries(&mut out, &self.buffers);
        match &self.optimizer {
            None => out.push(0),
            Some(o) => {
                out.push(1);
                out.extend_from_slice(&o.step.to_le_bytes());
                put_entries(&mut out, &o.m);
                put_entries(&mut out, &o.v);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let config_hash = r.string()?;
        let kind = r.string()?;
        let params = r.entries()?;
        let buffers = r.entries()?;
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => Some(OptimSnapshot {
                step: r.u64()?,
                m: r.entries()?,
                v: r.entries()?,
            }),
            f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config_hash,
            kind,
            params,
            buffers,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_entries(out: &mut Vec<u8>, entries: &[Entry]) {
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (name, t) in entries {
        put_str(out, name);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
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
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("implausible length {n} at byte {}", self.pos)))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }

    fn entries(&mut self) -> Result<Vec<Entry>> {
        let count = self.len()?;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let name = self.string()?;
            let ndim = self.u32()? as usize;
            let shape = (0..ndim).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let payload = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("entry {name}: {e}")))?;
            out.push((name, t));
        }
        Ok(out)
    }
}
