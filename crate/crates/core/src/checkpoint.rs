//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `MUDCKPT1`, a little-endian `u64` header length,
//! a JSON header, then every parameter array as little-endian `f64` in the
//! order the header lists them. The header records a SHA-256 digest of the
//! data section so truncation or corruption is caught on load.

use std::fs;
use std::io::Write;
use std::path::Path;

use mudemod_nn::{Mat, ParamStore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aligner::{Aligner, AlignerConfig};
use crate::diffusion::NoiseSchedule;
use crate::dit::{DitConfig, WirelessDit};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MUDCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Aligner,
    Dit,
    Student,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleInfo {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleInfo {
    pub fn of(s: &NoiseSchedule) -> Self {
        ScheduleInfo { timesteps: s.timesteps(), beta_start: s.beta_start, beta_end: s.beta_end }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: ModelKind,
    pub model_config: serde_json::Value,
    pub schedule: ScheduleInfo,
    /// Training or distillation settings, kept for provenance.
    #[serde(default)]
    pub training: Option<serde_json::Value>,
    /// Digest of the teacher checkpoint file a student was distilled from.
    #[serde(default)]
    pub teacher_hash: Option<String>,
    pub tensors: Vec<TensorInfo>,
    pub data_sha256: String,
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of a whole file, hex encoded.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(hex_digest(&fs::read(path)?))
}

pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore,
}

fn write_container(path: &Path, mut header: CheckpointHeader, params: &ParamStore) -> Result<()> {
    let mut data = Vec::with_capacity(params.num_scalars() * 8);
    header.tensors.clear();
    for e in params.entries() {
        header.tensors.push(TensorInfo { name: e.name.clone(), rows: e.value.rows, cols: e.value.cols });
        for v in &e.value.data {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    header.data_sha256 = hex_digest(&data);
    let json = serde_json::to_vec(&header)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(json.len() as u64).to_le_bytes())?;
    f.write_all(&json)?;
    f.write_all(&data)?;
    f.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(&format!("unreadable header: {e}")))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported format version {}", header.format_version)));
    }
    let data = &bytes[16 + hlen..];
    let expected: usize = header.tensors.iter().map(|t| t.rows * t.cols * 8).sum();
    if data.len() != expected {
        return Err(bad(&format!("data section holds {} bytes, header lists {expected}", data.len())));
    }
    if hex_digest(data) != header.data_sha256 {
        return Err(bad("data digest mismatch; the file is corrupted"));
    }
    let mut params = ParamStore::new();
    let mut off = 0;
    for t in &header.tensors {
        let n = t.rows * t.cols;
        let vals = data[off..off + n * 8].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        params.add(t.name.clone(), Mat::from_vec(t.rows, t.cols, vals));
        off += n * 8;
    }
    Ok(Checkpoint { header, params })
}

/// Copies loaded values into a freshly built store after checking the layout.
fn adopt(fresh: &ParamStore, loaded: ParamStore, path: &Path) -> Result<ParamStore> {
    if !fresh.same_layout(&loaded) {
        return Err(Error::Checkpoint(format!(
            "{}: parameter layout does not match the configured architecture ({} arrays expected, {} found)",
            path.display(),
            fresh.len(),
            loaded.len()
        )));
    }
    let mut out = loaded;
    out.reindex();
    Ok(out)
}

fn header(kind: ModelKind, cfg: serde_json::Value, sched: &NoiseSchedule, training: Option<serde_json::Value>) -> CheckpointHeader {
    CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        kind,
        model_config: cfg,
        schedule: ScheduleInfo::of(sched),
        training,
        teacher_hash: None,
        tensors: Vec::new(),
        data_sha256: String::new(),
    }
}

pub fn save_aligner(
    path: &Path,
    model: &Aligner,
    params: &ParamStore,
    sched: &NoiseSchedule,
    training: Option<serde_json::Value>,
) -> Result<()> {
    write_container(path, header(ModelKind::Aligner, serde_json::to_value(&model.cfg)?, sched, training), params)
}

pub fn load_aligner(path: &Path) -> Result<(Aligner, ParamStore, NoiseSchedule)> {
    let ck = read_checkpoint(path)?;
    if ck.header.kind != ModelKind::Aligner {
        return Err(Error::Checkpoint(format!("{} holds a {:?} model, expected an aligner", path.display(), ck.header.kind)));
    }
    let cfg: AlignerConfig = serde_json::from_value(ck.header.model_config.clone())?;
    let (model, fresh) = Aligner::init(cfg, 0)?;
    let params = adopt(&fresh, ck.params, path)?;
    Ok((model, params, ck.header.schedule.build()?))
}

/// Saves a denoiser; `teacher` names the teacher checkpoint for students.
pub fn save_dit(
    path: &Path,
    model: &WirelessDit,
    params: &ParamStore,
    sched: &NoiseSchedule,
    training: Option<serde_json::Value>,
    teacher: Option<&Path>,
) -> Result<()> {
    let kind = if teacher.is_some() { ModelKind::Student } else { ModelKind::Dit };
    let mut h = header(kind, serde_json::to_value(&model.cfg)?, sched, training);
    h.teacher_hash = teacher.map(file_hash).transpose()?;
    write_container(path, h, params)
}

pub fn load_dit(path: &Path) -> Result<(WirelessDit, ParamStore, CheckpointHeader)> {
    let ck = read_checkpoint(path)?;
    if ck.header.kind == ModelKind::Aligner {
        return Err(Error::Checkpoint(format!("{} holds an aligner, expected a denoiser", path.display())));
    }
    let cfg: DitConfig = serde_json::from_value(ck.header.model_config.clone())?;
    let (model, fresh) = WirelessDit::init(cfg, 0)?;
    let params = adopt(&fresh, ck.params, path)?;
    Ok((model, params, ck.header))
}
