//! On-disk formats: single-file array containers, model checkpoints and
//! dataset directories.
//!
//! An array container is `SPATREG\0`, a little-endian `u64` header length,
//! a JSON header and a row-major little-endian `f32` payload.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::grid::{DisplacementField, Image};
use crate::net::{RegNet, RunConfig, CONFIG_VERSION};
use crate::synth::{PairConfig, PhantomPair};
use crate::weighting::LabelMap;

pub const MAGIC: &[u8; 8] = b"SPATREG\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArrayKind {
    Image,
    Labels,
    Displacement,
    Weights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayHeader {
    pub format_version: u32,
    pub dtype: String,
    /// Spatial shape; displacement payloads carry one plane per axis.
    pub shape: Vec<usize>,
    pub axis_order: String,
    pub kind: ArrayKind,
    /// Region count, label containers only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regions: Option<usize>,
}

impl ArrayHeader {
    pub fn new(kind: ArrayKind, shape: &[usize]) -> Self {
        let axis_order = match kind {
            ArrayKind::Displacement => "component-first, row-major",
            _ => "row-major",
        };
        Self {
            format_version: FORMAT_VERSION,
            dtype: "f32".into(),
            shape: shape.to_vec(),
            axis_order: axis_order.into(),
            kind,
            regions: None,
        }
    }

    pub fn value_count(&self) -> usize {
        let n: usize = self.shape.iter().product();
        match self.kind {
            ArrayKind::Displacement => n * self.shape.len(),
            _ => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArrayContainer {
    pub header: ArrayHeader,
    pub data: Vec<f32>,
}

fn write_framed(path: &Path, header: &[u8], payload: &[u8]) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + header.len() + payload.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(header);
    buf.extend_from_slice(payload);
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

fn read_framed(path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format(format!("{} is not a container", path.display())));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 16 + len {
        return Err(Error::Format(format!("{}: truncated header", path.display())));
    }
    Ok((bytes[16..16 + len].to_vec(), bytes[16 + len..].to_vec()))
}

fn f32_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn f32_values(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect()
}

impl ArrayContainer {
    pub fn new(header: ArrayHeader, data: Vec<f32>) -> Result<Self> {
        if data.len() != header.value_count() {
            return Err(invalid!(
                "{} values for a {:?} container of shape {:?}",
                data.len(),
                header.kind,
                header.shape
            ));
        }
        Ok(Self { header, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_framed(path, &serde_json::to_vec(&self.header)?, &f32_bytes(&self.data))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let (header, payload) = read_framed(path)?;
        let header: ArrayHeader = serde_json::from_slice(&header)?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::VersionMismatch(format!(
                "{}: container version {} (expected {FORMAT_VERSION})",
                path.display(),
                header.format_version
            )));
        }
        if header.dtype != "f32" {
            return Err(Error::Format(format!("unsupported dtype {}", header.dtype)));
        }
        if payload.len() != header.value_count() * 4 {
            return Err(Error::Format(format!(
                "{}: payload of {} bytes, header implies {}",
                path.display(),
                payload.len(),
                header.value_count() * 4
            )));
        }
        Ok(Self {
            data: f32_values(&payload),
            header,
        })
    }

    fn expect(self, kind: ArrayKind) -> Result<Self> {
        if self.header.kind != kind {
            return Err(invalid!("expected a {kind:?} container, found {:?}", self.header.kind));
        }
        Ok(self)
    }
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    write_tensor(path, ArrayKind::Image, img.tensor())
}

/// Write the first batch element of a `(B, C, *S)` tensor.
pub fn write_tensor(path: &Path, kind: ArrayKind, t: &Tensor) -> Result<()> {
    let data: Vec<f32> = t.get(0)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    ArrayContainer::new(ArrayHeader::new(kind, &t.dims()[2..]), data)?.write(path)
}

pub fn read_image(path: &Path) -> Result<Image> {
    let c = ArrayContainer::read(path)?.expect(ArrayKind::Image)?;
    Image::from_vec(&c.header.shape, c.data)
}

pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    let mut header = ArrayHeader::new(ArrayKind::Labels, labels.shape());
    header.regions = Some(labels.regions());
    let data = labels.data().iter().map(|&v| v as f32).collect();
    ArrayContainer::new(header, data)?.write(path)
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let c = ArrayContainer::read(path)?.expect(ArrayKind::Labels)?;
    let mut data = Vec::with_capacity(c.data.len());
    for &v in &c.data {
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::Format(format!("label value {v} is not a region id")));
        }
        data.push(v as u32);
    }
    let regions = match c.header.regions {
        Some(k) => k,
        None => data.iter().max().map_or(1, |m| *m as usize + 1),
    };
    LabelMap::new(c.header.shape, data, regions)
}

pub fn write_displacement(path: &Path, u: &DisplacementField) -> Result<()> {
    write_tensor(path, ArrayKind::Displacement, u.tensor())
}

pub fn read_displacement(path: &Path) -> Result<DisplacementField> {
    let c = ArrayContainer::read(path)?.expect(ArrayKind::Displacement)?;
    let mut dims = vec![1, c.header.shape.len()];
    dims.extend_from_slice(&c.header.shape);
    DisplacementField::new(Tensor::from_vec(c.data, dims, &candle_core::Device::Cpu)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload in values.
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    kind: String,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(path: &Path, model: &RegNet) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (name, shape, data) in model.params().snapshot()? {
        tensors.push(TensorEntry {
            name,
            shape,
            offset: payload.len(),
        });
        payload.extend(data);
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        kind: "checkpoint".into(),
        config: serde_json::to_value(model.config())?,
        tensors,
    };
    write_framed(path, &serde_json::to_vec(&header)?, &f32_bytes(&payload))
}

pub fn load_checkpoint(path: &Path) -> Result<RegNet> {
    let (header, payload) = read_framed(path)?;
    let header: CheckpointHeader = serde_json::from_slice(&header)?;
    if header.format_version != FORMAT_VERSION || header.kind != "checkpoint" {
        return Err(Error::VersionMismatch(format!(
            "{}: checkpoint version {} (expected {FORMAT_VERSION})",
            path.display(),
            header.format_version
        )));
    }
    let version = header.config.get("format_version").and_then(|v| v.as_u64());
    if version != Some(CONFIG_VERSION as u64) {
        return Err(Error::VersionMismatch(format!(
            "{}: config version {version:?} (expected {CONFIG_VERSION})",
            path.display()
        )));
    }
    let config: RunConfig = serde_json::from_value(header.config)?;
    let model = RegNet::new(config)?;
    let values = f32_values(&payload);
    let names = model.params().names().to_vec();
    if names.len() != header.tensors.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, model has {}",
            header.tensors.len(),
            names.len()
        )));
    }
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let slice = values
            .get(entry.offset..entry.offset + n)
            .ok_or_else(|| Error::Format(format!("tensor {} runs past the payload", entry.name)))?;
        let t = Tensor::from_slice(slice, entry.shape.as_slice(), &candle_core::Device::Cpu)?;
        model.params().set_by_name(&entry.name, &t)?;
    }
    Ok(model)
}

/// One stored pair of a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub index: usize,
    pub seed: u64,
    pub fixed: String,
    pub moving: String,
    pub fixed_labels: String,
    pub moving_labels: String,
    pub true_field: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub shape: Vec<usize>,
    pub regions: usize,
    pub pair_config: PairConfig,
    pub pairs: Vec<PairEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Write `pairs` (generated from consecutive seeds) and their manifest.
pub fn write_dataset(dir: &Path, seed: u64, pair_config: &PairConfig, pairs: &[PhantomPair]) -> Result<DatasetManifest> {
    let first = pairs.first().ok_or_else(|| invalid!("dataset needs at least one pair"))?;
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let name = |s: &str| format!("pair_{i:04}_{s}.sra");
        let e = PairEntry {
            index: i,
            seed: seed.wrapping_add(i as u64),
            fixed: name("fixed"),
            moving: name("moving"),
            fixed_labels: name("fixed_labels"),
            moving_labels: name("moving_labels"),
            true_field: name("true_field"),
        };
        write_image(&dir.join(&e.fixed), &p.fixed)?;
        write_image(&dir.join(&e.moving), &p.moving)?;
        write_labels(&dir.join(&e.fixed_labels), &p.fixed_labels)?;
        write_labels(&dir.join(&e.moving_labels), &p.moving_labels)?;
        write_displacement(&dir.join(&e.true_field), &p.true_field)?;
        entries.push(e);
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        seed,
        shape: first.fixed.spatial_shape().to_vec(),
        regions: first.fixed_labels.regions(),
        pair_config: pair_config.clone(),
        pairs: entries,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::VersionMismatch(format!(
            "dataset version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<PhantomPair>)> {
    let manifest = read_manifest(dir)?;
    let pairs = manifest
        .pairs
        .iter()
        .map(|e| {
            Ok(PhantomPair {
                fixed: read_image(&dir.join(&e.fixed))?,
                moving: read_image(&dir.join(&e.moving))?,
                fixed_labels: read_labels(&dir.join(&e.fixed_labels))?,
                moving_labels: read_labels(&dir.join(&e.moving_labels))?,
                true_field: read_displacement(&dir.join(&e.true_field))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, pairs))
}

/// SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Provenance record of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub config_hash: String,
    pub seed: u64,
    pub dataset_manifest: PathBuf,
    pub checkpoint: PathBuf,
    pub metric_csvs: Vec<PathBuf>,
}

impl ExperimentManifest {
    /// Fails if any referenced file is missing.
    pub fn write(&self, path: &Path) -> Result<()> {
        for p in [&self.dataset_manifest, &self.checkpoint].into_iter().chain(&self.metric_csvs) {
            if !p.exists() {
                return Err(invalid!("manifest references missing file {}", p.display()));
            }
        }
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}
