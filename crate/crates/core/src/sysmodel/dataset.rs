//! On-disk dataset directories.
//!
//! A dataset is a directory holding `manifest.json` plus one fixed-record
//! binary file per field. Complex fields are little-endian `f64` pairs
//! (real, imaginary) with each matrix stored row-major and users
//! concatenated in order. Bit fields hold one byte per bit.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ChannelEstimate, ChannelModel, ChannelSet, DemodSample, Modulation, SystemConfig};
use crate::cplx::{split_blocks, CMatrix, C64};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayShape {
    pub users: usize,
    pub tx_antennas: Vec<usize>,
    pub rx_antennas: usize,
}

impl ArrayShape {
    pub fn from_config(cfg: &SystemConfig) -> Self {
        ArrayShape { users: cfg.users, tx_antennas: cfg.tx_antennas.clone(), rx_antennas: cfg.rx_antennas }
    }

    fn channel_values(&self) -> usize {
        self.rx_antennas * self.tx_antennas.iter().sum::<usize>()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldType {
    Complex128,
    Float64,
    Uint8,
}

impl FieldType {
    fn bytes_per_value(self) -> usize {
        match self {
            FieldType::Complex128 => 16,
            FieldType::Float64 => 8,
            FieldType::Uint8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub file: String,
    pub dtype: FieldType,
    pub values_per_record: usize,
}

impl FieldSpec {
    fn record_bytes(&self) -> usize {
        self.values_per_record * self.dtype.bytes_per_value()
    }
}

/// Generation metadata carried alongside full demodulation datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationInfo {
    pub system: SystemConfig,
    pub channel_model: ChannelModel,
    pub snr_db_range: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub endianness: String,
    pub record_count: usize,
    pub shape: ArrayShape,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation: Option<GenerationInfo>,
    pub fields: Vec<FieldSpec>,
}

impl Manifest {
    fn new(shape: ArrayShape, record_count: usize, generation: Option<GenerationInfo>, fields: Vec<FieldSpec>) -> Self {
        Manifest {
            format_version: FORMAT_VERSION,
            dtype: "float64".into(),
            endianness: "little".into(),
            record_count,
            shape,
            generation,
            fields,
        }
    }

    pub fn field(&self, name: &str) -> Option<&FieldSpec> {
        self.fields.iter().find(|f| f.name == name)
    }
}

fn field(name: &str, dtype: FieldType, values_per_record: usize) -> FieldSpec {
    FieldSpec { name: name.into(), file: format!("{name}.bin"), dtype, values_per_record }
}

fn push_complex(buf: &mut Vec<u8>, z: C64) {
    buf.extend_from_slice(&z.re.to_le_bytes());
    buf.extend_from_slice(&z.im.to_le_bytes());
}

fn push_matrices(buf: &mut Vec<u8>, ms: &[CMatrix]) {
    for m in ms {
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                push_complex(buf, m[(r, c)]);
            }
        }
    }
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST), text)?;
    Ok(())
}

struct FieldWriter {
    spec: FieldSpec,
    out: BufWriter<File>,
    buf: Vec<u8>,
}

impl FieldWriter {
    fn create(dir: &Path, spec: FieldSpec) -> Result<Self> {
        let out = BufWriter::new(File::create(dir.join(&spec.file))?);
        Ok(FieldWriter { spec, out, buf: Vec::new() })
    }

    fn record(&mut self, fill: impl FnOnce(&mut Vec<u8>), index: usize) -> Result<()> {
        self.buf.clear();
        fill(&mut self.buf);
        if self.buf.len() != self.spec.record_bytes() {
            return Err(Error::Shape(format!(
                "record {index} of field '{}' is {} bytes, expected {}",
                self.spec.name,
                self.buf.len(),
                self.spec.record_bytes()
            )));
        }
        self.out.write_all(&self.buf)?;
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Writes a channel-only dataset, the minimal layout accepted by [`load_external_channels`].
pub fn write_channels<'a>(dir: &Path, shape: &ArrayShape, channels: impl IntoIterator<Item = &'a ChannelSet>) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut w = FieldWriter::create(dir, field("H", FieldType::Complex128, shape.channel_values()))?;
    let mut count = 0;
    for set in channels {
        w.record(|b| push_matrices(b, &set.h), count)?;
        count += 1;
    }
    let spec = w.spec.clone();
    w.finish()?;
    let manifest = Manifest::new(shape.clone(), count, None, vec![spec]);
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

/// Writes full demodulation samples. All samples must share the shape and constellation of `info.system`.
pub fn write_dataset(dir: &Path, info: &GenerationInfo, samples: &[DemodSample]) -> Result<Manifest> {
    let shape = ArrayShape::from_config(&info.system);
    let streams: usize = shape.tx_antennas.iter().sum();
    let bps = info.system.constellation.bits_per_symbol();
    fs::create_dir_all(dir)?;
    let specs = vec![
        field("H", FieldType::Complex128, shape.channel_values()),
        field("H_hat", FieldType::Complex128, shape.channel_values()),
        field("x", FieldType::Complex128, streams),
        field("y", FieldType::Complex128, shape.rx_antennas),
        field("bits", FieldType::Uint8, streams * bps),
        field("noise", FieldType::Float64, 2),
        field("sigma_h_sq", FieldType::Float64, shape.users),
    ];
    let mut writers = specs.iter().cloned().map(|s| FieldWriter::create(dir, s)).collect::<Result<Vec<_>>>()?;
    for (i, s) in samples.iter().enumerate() {
        if s.modulation != info.system.constellation || s.tx_antennas() != shape.tx_antennas || s.rx_antennas() != shape.rx_antennas {
            return Err(Error::Shape(format!("sample {i} does not match the dataset configuration")));
        }
        writers[0].record(|b| push_matrices(b, &s.channels.h), i)?;
        writers[1].record(|b| push_matrices(b, &s.estimates.h_hat), i)?;
        writers[2].record(|b| s.x.iter().flatten().for_each(|&z| push_complex(b, z)), i)?;
        writers[3].record(|b| s.y.iter().for_each(|&z| push_complex(b, z)), i)?;
        writers[4].record(|b| b.extend(s.bits.iter().flatten()), i)?;
        writers[5].record(
            |b| {
                b.extend_from_slice(&s.sigma_n_sq.to_le_bytes());
                b.extend_from_slice(&s.snr_db.to_le_bytes());
            },
            i,
        )?;
        writers[6].record(|b| s.estimates.sigma_h_sq.iter().for_each(|v| b.extend_from_slice(&v.to_le_bytes())), i)?;
    }
    for w in writers {
        w.finish()?;
    }
    let manifest = Manifest::new(shape, samples.len(), Some(info.clone()), specs);
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

/// Reads the manifest; `Ok(None)` for an empty directory.
pub fn read_manifest(dir: &Path) -> Result<Option<Manifest>> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        let empty = fs::read_dir(dir)
            .map_err(|e| Error::Ingest { record: None, msg: format!("cannot open {}: {e}", dir.display()) })?
            .next()
            .is_none();
        if empty {
            return Ok(None);
        }
        return Err(Error::Ingest { record: None, msg: format!("missing {MANIFEST} in {}", dir.display()) });
    }
    let text = fs::read_to_string(&path)?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Ingest { record: None, msg: format!("invalid manifest {}: {e}", path.display()) })?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Ingest { record: None, msg: format!("unsupported format version {}", m.format_version) });
    }
    if m.endianness != "little" {
        return Err(Error::Ingest { record: None, msg: format!("unsupported endianness '{}'", m.endianness) });
    }
    Ok(Some(m))
}

/// Sequential reader over one field file with record-level validation.
struct FieldReader {
    spec: FieldSpec,
    input: BufReader<File>,
    count: usize,
    next: usize,
    buf: Vec<u8>,
}

impl FieldReader {
    fn open(dir: &Path, m: &Manifest, name: &str, expected_values: usize) -> Result<Self> {
        let spec = m
            .field(name)
            .ok_or_else(|| Error::Ingest { record: None, msg: format!("manifest lists no '{name}' field") })?
            .clone();
        if spec.values_per_record != expected_values {
            return Err(Error::Ingest {
                record: Some(0),
                msg: format!(
                    "shape mismatch in field '{name}': records hold {} values but the declared shape needs {expected_values}",
                    spec.values_per_record
                ),
            });
        }
        let path: PathBuf = dir.join(&spec.file);
        let file = File::open(&path)
            .map_err(|e| Error::Ingest { record: None, msg: format!("cannot open {}: {e}", path.display()) })?;
        let len = file.metadata()?.len() as usize;
        let rb = spec.record_bytes();
        let want = rb * m.record_count;
        if len != want {
            let record = if rb == 0 { 0 } else { (len / rb).min(m.record_count) };
            return Err(Error::Ingest {
                record: Some(record),
                msg: format!(
                    "field '{name}' has {len} bytes, expected {} records of {rb} bytes ({want} bytes)",
                    m.record_count
                ),
            });
        }
        Ok(FieldReader { buf: vec![0; rb], spec, input: BufReader::new(file), count: m.record_count, next: 0 })
    }

    fn read(&mut self) -> Result<Option<(usize, &[u8])>> {
        if self.next >= self.count {
            return Ok(None);
        }
        let idx = self.next;
        self.input
            .read_exact(&mut self.buf)
            .map_err(|e| Error::Ingest { record: Some(idx), msg: format!("field '{}': {e}", self.spec.name) })?;
        self.next += 1;
        Ok(Some((idx, &self.buf)))
    }
}

fn f64_at(b: &[u8], i: usize) -> f64 {
    f64::from_le_bytes(b[8 * i..8 * i + 8].try_into().unwrap())
}

fn complex_values(b: &[u8], record: usize, field: &str) -> Result<Vec<C64>> {
    let out: Vec<C64> = (0..b.len() / 16).map(|i| C64::new(f64_at(b, 2 * i), f64_at(b, 2 * i + 1))).collect();
    if out.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::Ingest { record: Some(record), msg: format!("corrupted record in field '{field}': non-finite value") });
    }
    Ok(out)
}

fn matrices(values: &[C64], shape: &ArrayShape) -> Vec<CMatrix> {
    let mut off = 0;
    shape
        .tx_antennas
        .iter()
        .map(|&nt| {
            let n = shape.rx_antennas * nt;
            let m = CMatrix::from_row_slice(shape.rx_antennas, nt, &values[off..off + n]);
            off += n;
            m
        })
        .collect()
}

/// Streams channel sets from a dataset directory.
pub struct ChannelStream {
    reader: Option<FieldReader>,
    shape: Option<ArrayShape>,
    failed: bool,
}

impl ChannelStream {
    pub fn shape(&self) -> Option<&ArrayShape> {
        self.shape.as_ref()
    }
}

impl Iterator for ChannelStream {
    type Item = Result<ChannelSet>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let reader = self.reader.as_mut()?;
        let shape = self.shape.as_ref()?;
        let item = match reader.read() {
            Ok(None) => return None,
            Ok(Some((idx, b))) => complex_values(b, idx, "H").map(|v| ChannelSet { h: matrices(&v, shape) }),
            Err(e) => Err(e),
        };
        self.failed = item.is_err();
        Some(item)
    }
}

pub fn load_external_channels(dir: &Path) -> Result<ChannelStream> {
    let Some(m) = read_manifest(dir)? else {
        return Ok(ChannelStream { reader: None, shape: None, failed: false });
    };
    validate_shape(&m.shape)?;
    let reader = FieldReader::open(dir, &m, "H", m.shape.channel_values())?;
    Ok(ChannelStream { reader: Some(reader), shape: Some(m.shape), failed: false })
}

fn validate_shape(s: &ArrayShape) -> Result<()> {
    if s.users == 0 || s.tx_antennas.len() != s.users || s.tx_antennas.contains(&0) || s.rx_antennas == 0 {
        return Err(Error::Ingest { record: None, msg: format!("invalid array shape in manifest: {s:?}") });
    }
    Ok(())
}

/// Reads a full demodulation dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<DemodSample>)> {
    let m = read_manifest(dir)?
        .ok_or_else(|| Error::Ingest { record: None, msg: format!("{} is empty", dir.display()) })?;
    validate_shape(&m.shape)?;
    let info = m
        .generation
        .clone()
        .ok_or_else(|| Error::Ingest { record: None, msg: "manifest has no generation info; channel-only dataset".into() })?;
    let shape = m.shape.clone();
    let streams: usize = shape.tx_antennas.iter().sum();
    let modulation: Modulation = info.system.constellation;
    let bps = modulation.bits_per_symbol();
    let mut h = FieldReader::open(dir, &m, "H", shape.channel_values())?;
    let mut h_hat = FieldReader::open(dir, &m, "H_hat", shape.channel_values())?;
    let mut x = FieldReader::open(dir, &m, "x", streams)?;
    let mut y = FieldReader::open(dir, &m, "y", shape.rx_antennas)?;
    let mut bits = FieldReader::open(dir, &m, "bits", streams * bps)?;
    let mut noise = FieldReader::open(dir, &m, "noise", 2)?;
    let mut sh = FieldReader::open(dir, &m, "sigma_h_sq", shape.users)?;
    let mut out = Vec::with_capacity(m.record_count);
    while let Some((i, hb)) = h.read()? {
        let hv = matrices(&complex_values(hb, i, "H")?, &shape);
        let (_, b) = h_hat.read()?.expect("record counts validated");
        let hh = matrices(&complex_values(b, i, "H_hat")?, &shape);
        let (_, b) = x.read()?.expect("record counts validated");
        let xs = split_blocks(&complex_values(b, i, "x")?, &shape.tx_antennas);
        let (_, b) = y.read()?.expect("record counts validated");
        let ys = complex_values(b, i, "y")?;
        let (_, b) = bits.read()?.expect("record counts validated");
        if b.iter().any(|&v| v > 1) {
            return Err(Error::Ingest { record: Some(i), msg: "corrupted record in field 'bits'".into() });
        }
        let mut off = 0;
        let bs: Vec<Vec<u8>> = shape
            .tx_antennas
            .iter()
            .map(|&nt| {
                let v = b[off..off + nt * bps].to_vec();
                off += nt * bps;
                v
            })
            .collect();
        let (_, b) = noise.read()?.expect("record counts validated");
        let (sigma_n_sq, snr_db) = (f64_at(b, 0), f64_at(b, 1));
        let (_, b) = sh.read()?.expect("record counts validated");
        let sigma_h_sq: Vec<f64> = (0..shape.users).map(|u| f64_at(b, u)).collect();
        out.push(DemodSample {
            modulation,
            bits: bs,
            x: xs,
            channels: ChannelSet { h: hv },
            estimates: ChannelEstimate { h_hat: hh, sigma_h_sq },
            y: ys,
            sigma_n_sq,
            snr_db,
        });
    }
    Ok((m, out))
}
