//! Single-file binary checkpoint.
//!
//! Layout: magic `FMCKPT\0\0`, `u32` format version, `u32` section count, then
//! per section a length-prefixed name and a `u64`-length payload, and finally
//! the SHA-256 of everything before it. Integers are little-endian. Tensor
//! payloads list tensors sorted by name with dtype, shape and raw data, so
//! equal states always serialize to equal bytes.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::train::TrainState;
use super::vae_train::VaeState;
use super::RunConfig;
use crate::error::{Error, Result};
use crate::nets::load_params;

pub const MAGIC: &[u8; 8] = b"FMCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

type Tensors = BTreeMap<String, Tensor>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Counters {
    step: u64,
    optim_g_step: u64,
    optim_d_step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct VaeCounters {
    step: u64,
    seed: u64,
    optim_step: u64,
    optim_d_step: u64,
}

/// Parsed checkpoint contents.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub model: Tensors,
    pub disc: Tensors,
    pub optim_g: (u64, Tensors),
    pub optim_d: (u64, Tensors),
    pub vae: Option<VaeCheckpoint>,
}

#[derive(Clone, Debug)]
pub struct VaeCheckpoint {
    pub step: u64,
    pub seed: u64,
    pub vae: Tensors,
    pub disc: Tensors,
    pub optim: (u64, Tensors),
    pub optim_d: (u64, Tensors),
}

fn snapshot(vars: &BTreeMap<String, Var>) -> Tensors {
    vars.iter().map(|(k, v)| (k.clone(), v.as_tensor().detach())).collect()
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, vae: Option<&VaeState>) -> Self {
        Self {
            config: state.config.clone(),
            step: state.step,
            model: snapshot(state.nets.params()),
            disc: snapshot(state.disc.params()),
            optim_g: state.opt_g.state(),
            optim_d: state.opt_d.state(),
            vae: vae.map(VaeCheckpoint::from_state),
        }
    }

    /// Rebuilds the training state, optimizer moments included.
    pub fn restore(&self) -> Result<TrainState> {
        let mut state = TrainState::new(&self.config)?;
        load_params(state.nets.params(), &self.model)?;
        load_params(state.disc.params(), &self.disc)?;
        state.opt_g.load_state(self.optim_g.0, self.optim_g.1.clone())?;
        state.opt_d.load_state(self.optim_d.0, self.optim_d.1.clone())?;
        state.step = self.step;
        Ok(state)
    }

    pub fn restore_vae(&self) -> Result<VaeState> {
        let vae = self.vae.as_ref().ok_or(Error::MissingVae)?;
        vae.restore(&self.config)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut sections: Vec<(&str, Vec<u8>)> = vec![
            ("config", self.config.to_toml()?.into_bytes()),
            (
                "counters",
                serde_json::to_vec(&Counters {
                    step: self.step,
                    optim_g_step: self.optim_g.0,
                    optim_d_step: self.optim_d.0,
                })
                .map_err(|e| Error::Checkpoint(e.to_string()))?,
            ),
            ("model", encode_tensors(&self.model)?),
            ("disc", encode_tensors(&self.disc)?),
            ("optim_g", encode_tensors(&self.optim_g.1)?),
            ("optim_d", encode_tensors(&self.optim_d.1)?),
        ];
        if let Some(v) = &self.vae {
            sections.extend(v.sections()?);
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        for (name, payload) in &sections {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(payload);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let sections = read_sections(bytes)?;
        let get = |name: &str| {
            sections.get(name).ok_or_else(|| Error::Checkpoint(format!("missing section {name}")))
        };
        let config_text =
            std::str::from_utf8(get("config")?).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let config = RunConfig::from_toml(config_text)?;
        let counters: Counters =
            serde_json::from_slice(get("counters")?).map_err(|e| Error::Checkpoint(format!("counters: {e}")))?;
        let vae = if sections.contains_key("vae") { Some(VaeCheckpoint::from_sections(&sections)?) } else { None };
        Ok(Self {
            config,
            step: counters.step,
            model: decode_tensors(get("model")?)?,
            disc: decode_tensors(get("disc")?)?,
            optim_g: (counters.optim_g_step, decode_tensors(get("optim_g")?)?),
            optim_d: (counters.optim_d_step, decode_tensors(get("optim_d")?)?),
            vae,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

impl VaeCheckpoint {
    pub fn from_state(state: &VaeState) -> Self {
        Self {
            step: state.step,
            seed: state.seed(),
            vae: snapshot(state.vae.params()),
            disc: snapshot(state.disc.params()),
            optim: state.opt.state(),
            optim_d: state.opt_d.state(),
        }
    }

    pub fn restore(&self, config: &RunConfig) -> Result<VaeState> {
        let o = &config.optim;
        let mut state = VaeState::new(&config.vae, self.seed, o.beta1, o.beta2, o.eps)?;
        load_params(state.vae.params(), &self.vae)?;
        load_params(state.disc.params(), &self.disc)?;
        state.opt.load_state(self.optim.0, self.optim.1.clone())?;
        state.opt_d.load_state(self.optim_d.0, self.optim_d.1.clone())?;
        state.step = self.step;
        Ok(state)
    }

    fn sections(&self) -> Result<Vec<(&'static str, Vec<u8>)>> {
        let counters = VaeCounters {
            step: self.step,
            seed: self.seed,
            optim_step: self.optim.0,
            optim_d_step: self.optim_d.0,
        };
        Ok(vec![
            ("vae", encode_tensors(&self.vae)?),
            ("vae_counters", serde_json::to_vec(&counters).map_err(|e| Error::Checkpoint(e.to_string()))?),
            ("vae_disc", encode_tensors(&self.disc)?),
            ("vae_optim", encode_tensors(&self.optim.1)?),
            ("vae_optim_d", encode_tensors(&self.optim_d.1)?),
        ])
    }

    fn from_sections(sections: &BTreeMap<String, Vec<u8>>) -> Result<Self> {
        let get = |name: &str| {
            sections.get(name).ok_or_else(|| Error::Checkpoint(format!("missing section {name}")))
        };
        let c: VaeCounters =
            serde_json::from_slice(get("vae_counters")?).map_err(|e| Error::Checkpoint(format!("vae_counters: {e}")))?;
        Ok(Self {
            step: c.step,
            seed: c.seed,
            vae: decode_tensors(get("vae")?)?,
            disc: decode_tensors(get("vae_disc")?)?,
            optim: (c.optim_step, decode_tensors(get("vae_optim")?)?),
            optim_d: (c.optim_d_step, decode_tensors(get("vae_optim_d")?)?),
        })
    }
}

/// Reads only the VAE part of a checkpoint file.
pub fn load_vae(path: &Path) -> Result<VaeState> {
    let bytes = std::fs::read(path)?;
    let sections = read_sections(&bytes)?;
    let config_text = std::str::from_utf8(
        sections.get("config").ok_or_else(|| Error::Checkpoint("missing section config".into()))?,
    )
    .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
    let config = RunConfig::from_toml(config_text)?;
    if !sections.contains_key("vae") {
        return Err(Error::MissingVae);
    }
    VaeCheckpoint::from_sections(&sections)?.restore(&config)
}

/// SHA-256 of the file contents, hex.
pub fn file_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated data".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn read_sections(bytes: &[u8]) -> Result<BTreeMap<String, Vec<u8>>> {
    if bytes.len() < MAGIC.len() + 8 + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: FORMAT_VERSION });
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch (file corrupt or truncated)".into()));
    }
    let mut r = Reader { bytes: body, pos: 12 };
    let count = r.u32()?;
    let mut sections = BTreeMap::new();
    for _ in 0..count {
        let name = r.string()?;
        let len = r.u64()? as usize;
        let payload = r.take(len)?.to_vec();
        if sections.insert(name.clone(), payload).is_some() {
            return Err(Error::Checkpoint(format!("duplicate section {name}")));
        }
    }
    if !r.done() {
        return Err(Error::Checkpoint("trailing bytes after sections".into()));
    }
    Ok(sections)
}

fn dtype_code(dtype: DType) -> Result<u8> {
    match dtype {
        DType::F32 => Ok(0),
        DType::F64 => Ok(1),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn encode_tensors(tensors: &Tensors) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(dtype_code(t.dtype())?);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for d in t.dims() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        let flat = t.flatten_all()?;
        match t.dtype() {
            DType::F32 => flat.to_vec1::<f32>()?.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            _ => flat.to_vec1::<f64>()?.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    Ok(out)
}

fn decode_tensors(bytes: &[u8]) -> Result<Tensors> {
    let mut r = Reader { bytes, pos: 0 };
    let count = r.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name = r.string()?;
        let code = r.take(1)?[0];
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let t = match code {
            0 => {
                let raw = r.take(numel * 4)?;
                let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect();
                Tensor::from_vec(v, dims, &Device::Cpu)?
            }
            1 => {
                let raw = r.take(numel * 8)?;
                let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect();
                Tensor::from_vec(v, dims, &Device::Cpu)?
            }
            other => return Err(Error::Checkpoint(format!("unknown dtype code {other} for {name}"))),
        };
        out.insert(name, t);
    }
    if !r.done() {
        return Err(Error::Checkpoint("trailing bytes in tensor section".into()));
    }
    Ok(out)
}
