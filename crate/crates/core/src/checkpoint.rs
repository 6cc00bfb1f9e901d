//! `CK1` checkpoints: config, weights, optimizer state and step counter.
//!
//! ```text
//! "CK1" | string config (TOML) | string model hash | u64 phase | u64 step
//! u64 array count | arrays | u32 crc32 of everything after the magic
//! ```
//!
//! Weights are stored as `param:{name}`, Adam moments as
//! `{opt}.m:{name}` / `{opt}.v:{name}` with `{opt}.hyper` (lr, betas, eps)
//! and `{opt}.step`, for `opt` in `gen` and `disc`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use flowpose_tensor::{Adam, ParamStore, Tensor};

use crate::config::Config;
use crate::container::{read_array, read_magic, read_string, read_u64, write_array, write_magic, write_string, write_u32, write_u64, ArrayData, FormatError, NamedArray};
use crate::error::{Error, Result};

const MAGIC: &str = "CK1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Init = 0,
    Adversarial = 1,
    Refined = 2,
}

impl Phase {
    fn from_u64(v: u64) -> Result<Self, FormatError> {
        match v {
            0 => Ok(Phase::Init),
            1 => Ok(Phase::Adversarial),
            2 => Ok(Phase::Refined),
            _ => Err(FormatError::Malformed(format!("unknown training phase {v}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub phase: Phase,
    pub step: u64,
    pub params: ParamStore,
    pub gen_opt: Adam,
    pub disc_opt: Adam,
}

fn adam_arrays(prefix: &str, opt: &Adam, out: &mut Vec<NamedArray>) {
    out.push(NamedArray::f64(&format!("{prefix}.hyper"), &Tensor::from_vec(&[4], vec![opt.lr, opt.beta1, opt.beta2, opt.eps])));
    out.push(NamedArray::u64(&format!("{prefix}.step"), &[opt.step]));
    for (n, t) in &opt.first {
        out.push(NamedArray::f64(&format!("{prefix}.m:{n}"), t));
    }
    for (n, t) in &opt.second {
        out.push(NamedArray::f64(&format!("{prefix}.v:{n}"), t));
    }
}

fn read_adam(prefix: &str, arrays: &[NamedArray]) -> Result<Adam, FormatError> {
    let find = |name: &str| arrays.iter().find(|a| a.name == name).ok_or_else(|| FormatError::Missing(name.to_string()));
    let hyper = find(&format!("{prefix}.hyper"))?.to_tensor()?;
    if hyper.numel() != 4 {
        return Err(FormatError::Malformed(format!("{prefix}.hyper must hold 4 values")));
    }
    let h = hyper.data();
    let mut opt = Adam::with_betas(h[0], h[1], h[2], h[3]);
    let step = find(&format!("{prefix}.step"))?.as_u64()?;
    opt.step = *step.first().ok_or_else(|| FormatError::Malformed(format!("{prefix}.step is empty")))?;
    let (m, v) = (format!("{prefix}.m:"), format!("{prefix}.v:"));
    let mut first = BTreeMap::new();
    let mut second = BTreeMap::new();
    for a in arrays {
        if let Some(n) = a.name.strip_prefix(&m) {
            first.insert(n.to_string(), a.to_tensor()?);
        } else if let Some(n) = a.name.strip_prefix(&v) {
            second.insert(n.to_string(), a.to_tensor()?);
        }
    }
    opt.first = first;
    opt.second = second;
    Ok(opt)
}

impl Checkpoint {
    pub fn new(config: Config, params: ParamStore) -> Self {
        let t = &config.train;
        let gen_opt = Adam::with_betas(t.lr_gen, t.beta1, t.beta2, t.eps);
        let disc_opt = Adam::with_betas(t.lr_disc, t.beta1, t.beta2, t.eps);
        Self {
            config,
            phase: Phase::Init,
            step: 0,
            params,
            gen_opt,
            disc_opt,
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let mut body = Vec::new();
        write_string(&mut body, &self.config.to_toml())?;
        write_string(&mut body, &self.config.model_hash())?;
        write_u64(&mut body, self.phase as u64)?;
        write_u64(&mut body, self.step)?;
        let mut arrays: Vec<NamedArray> = self.params.iter().map(|(n, t)| NamedArray::f64(&format!("param:{n}"), t)).collect();
        adam_arrays("gen", &self.gen_opt, &mut arrays);
        adam_arrays("disc", &self.disc_opt, &mut arrays);
        write_u64(&mut body, arrays.len() as u64)?;
        for a in &arrays {
            write_array(&mut body, a)?;
        }
        write_magic(w, MAGIC)?;
        w.write_all(&body)?;
        write_u32(w, crc32fast::hash(&body))?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory cannot fail");
        buf
    }

    /// Parse a checkpoint. When `expected` is given, its model hash must
    /// match the stored one unless `force` is set.
    pub fn read_from(r: &mut impl Read, expected: Option<&Config>, force: bool) -> Result<Self> {
        read_magic(r, MAGIC)?;
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        if body.len() < 4 {
            return Err(FormatError::Truncated.into());
        }
        let (payload, tail) = body.split_at(body.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(FormatError::Checksum { record: 0, stored, computed }.into());
        }
        let mut p = payload;
        let text = read_string(&mut p)?;
        let hash = read_string(&mut p)?;
        let config = Config::from_toml(&text).map_err(|e| FormatError::Malformed(format!("embedded config: {e}")))?;
        if config.model_hash() != hash {
            return Err(FormatError::Malformed("stored hash does not match the embedded config".into()).into());
        }
        if let Some(exp) = expected {
            if exp.model_hash() != hash && !force {
                return Err(Error::ConfigMismatch { expected: exp.model_hash(), found: hash });
            }
        }
        let phase = Phase::from_u64(read_u64(&mut p)?)?;
        let step = read_u64(&mut p)?;
        let n = read_u64(&mut p)?;
        let mut arrays = Vec::new();
        for _ in 0..n {
            arrays.push(read_array(&mut p)?);
        }
        if !p.is_empty() {
            return Err(FormatError::Malformed(format!("{} trailing bytes", p.len())).into());
        }
        let mut params = ParamStore::new();
        for a in &arrays {
            if let Some(name) = a.name.strip_prefix("param:") {
                if !matches!(a.data, ArrayData::F64(_)) {
                    return Err(FormatError::DType { name: a.name.clone() }.into());
                }
                params.insert(name, a.to_tensor()?);
            }
        }
        Ok(Self {
            config,
            phase,
            step,
            params,
            gen_opt: read_adam("gen", &arrays)?,
            disc_opt: read_adam("disc", &arrays)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path, expected: Option<&Config>, force: bool) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f, expected, force)
    }
}
