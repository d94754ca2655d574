//! Min-max normalization and the binary dataset/checkpoint containers.
//!
//! Both containers share one layout:
//!
//! ```text
//! magic      4 bytes   "SNOD" (dataset sample) or "SNOC" (checkpoint)
//! version    u32 LE
//! header_len u64 LE
//! header     header_len bytes of UTF-8 JSON; its "arrays" entry lists
//!            {name, len} for every array that follows, in order
//! arrays     little-endian f64 values, concatenated
//! ```
//!
//! Readers validate magic and version before touching arrays, and require
//! the file length to match the header exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::fom::SampleRecord;
use crate::model::{build_model, Model, ModelConfig};
use crate::optim::{AdamConfig, OptimState, RngState};
use crate::sampler::GridSpec;

pub const SAMPLE_MAGIC: &[u8; 4] = b"SNOD";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SNOC";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureRange {
    pub min: f64,
    pub max: f64,
}

impl FeatureRange {
    /// Maps `[min, max]` onto `[-1, 1]`; values outside pass through unclamped.
    #[inline]
    pub fn normalize(&self, v: f64) -> f64 {
        2.0 * (v - self.min) / (self.max - self.min) - 1.0
    }

    #[inline]
    pub fn denormalize(&self, y: f64) -> f64 {
        self.min + 0.5 * (y + 1.0) * (self.max - self.min)
    }
}

pub const TOPO_NAMES: [&str; 4] = ["t", "x", "y", "z"];
pub const HETERO_NAMES: [&str; 4] = ["porosity", "ln_kx", "ln_ky", "ln_kz"];
pub const HOMO_NAMES: [&str; 2] = ["injection_rate", "injection_duration"];

/// Training-split statistics for every model input and the target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub topo: [FeatureRange; 4],
    pub hetero: [FeatureRange; 4],
    pub homo: [FeatureRange; 2],
    pub target: FeatureRange,
}

#[derive(Clone, Copy)]
struct Acc {
    min: f64,
    max: f64,
}

impl Acc {
    fn new() -> Self {
        Self {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        }
    }

    fn push(&mut self, v: f64) {
        self.min = self.min.min(v);
        self.max = self.max.max(v);
    }

    fn finish(self, name: &str, bad: &mut Vec<String>) -> FeatureRange {
        if !(self.max > self.min) {
            bad.push(name.to_string());
        }
        FeatureRange {
            min: self.min,
            max: self.max,
        }
    }
}

/// Fits min/max per feature on the given (training) records.
pub fn fit_normalizer(records: &[SampleRecord]) -> Result<Normalizer> {
    if records.is_empty() {
        return Err(Error::Config(
            "cannot fit a normalizer on an empty split".into(),
        ));
    }
    let mut topo = [Acc::new(); 4];
    let mut hetero = [Acc::new(); 4];
    let mut homo = [Acc::new(); 2];
    let mut target = Acc::new();
    for r in records {
        let g = &r.grid;
        topo[0].push(g.time_of(0));
        topo[0].push(g.time_of(g.nt - 1));
        let lo = g.cell_center(0, 0, 0);
        let hi = g.cell_center(g.nx - 1, g.ny - 1, g.nz - 1);
        for k in 0..3 {
            topo[k + 1].push(lo[k]);
            topo[k + 1].push(hi[k]);
        }
        for c in 0..g.n_cells() {
            for (acc, v) in hetero.iter_mut().zip(r.hetero_at(c)) {
                acc.push(v);
            }
        }
        for (acc, v) in homo.iter_mut().zip(r.homo) {
            acc.push(v);
        }
        for &s in &r.states {
            target.push(s);
        }
    }
    let mut bad = Vec::new();
    let norm = Normalizer {
        topo: std::array::from_fn(|k| topo[k].finish(TOPO_NAMES[k], &mut bad)),
        hetero: std::array::from_fn(|k| hetero[k].finish(HETERO_NAMES[k], &mut bad)),
        homo: std::array::from_fn(|k| homo[k].finish(HOMO_NAMES[k], &mut bad)),
        target: target.finish("state", &mut bad),
    };
    if bad.is_empty() {
        Ok(norm)
    } else {
        Err(Error::DegenerateFeature(bad))
    }
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    len: usize,
}

fn encode_container(magic: &[u8; 4], mut header: Value, arrays: &[(String, &[f64])]) -> Vec<u8> {
    let entries: Vec<ArrayEntry> = arrays
        .iter()
        .map(|(name, a)| ArrayEntry {
            name: name.clone(),
            len: a.len(),
        })
        .collect();
    header["arrays"] = serde_json::to_value(entries).expect("array list serializes");
    let header = serde_json::to_vec(&header).expect("header serializes");
    let total: usize = arrays.iter().map(|(_, a)| a.len()).sum();
    let mut buf = Vec::with_capacity(PREAMBLE + header.len() + 8 * total);
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, a) in arrays {
        for v in a.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

fn write_container(
    path: &Path,
    magic: &[u8; 4],
    header: Value,
    arrays: &[(String, &[f64])],
) -> Result<()> {
    std::fs::write(path, encode_container(magic, header, arrays)).map_err(io_err(path))
}

/// Parsed container: JSON header plus named arrays in file order.
struct Container {
    header: Value,
    arrays: Vec<(String, Vec<f64>)>,
}

impl Container {
    fn take(&mut self, path: &Path, name: &str) -> Result<Vec<f64>> {
        let pos = self
            .arrays
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| format_err(path, format!("missing array {name:?}")))?;
        Ok(self.arrays.remove(pos).1)
    }
}

fn decode_container(path: &Path, magic: &[u8; 4], bytes: &[u8]) -> Result<Container> {
    if bytes.len() < PREAMBLE {
        return Err(format_err(
            path,
            format!("file is {} bytes, shorter than the preamble", bytes.len()),
        ));
    }
    if &bytes[..4] != magic {
        return Err(format_err(
            path,
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..4]),
                String::from_utf8_lossy(magic)
            ),
        ));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(format_err(
            path,
            format!("version {version} is not supported (expected {FORMAT_VERSION})"),
        ));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let header_end = (PREAMBLE as u64)
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| {
            format_err(
                path,
                format!("header length {header_len} runs past end of file"),
            )
        })? as usize;
    let header: Value = serde_json::from_slice(&bytes[PREAMBLE..header_end])
        .map_err(|e| format_err(path, format!("header is not valid JSON: {e}")))?;
    let entries: Vec<ArrayEntry> = header
        .get("arrays")
        .cloned()
        .ok_or_else(|| format_err(path, "header has no array list"))
        .and_then(|v| {
            serde_json::from_value(v).map_err(|e| format_err(path, format!("bad array list: {e}")))
        })?;
    let expected = entries
        .iter()
        .try_fold(0u64, |acc, e| {
            acc.checked_add((e.len as u64).checked_mul(8)?)
        })
        .and_then(|n| n.checked_add(header_end as u64))
        .ok_or_else(|| format_err(path, "array lengths overflow"))?;
    if expected != bytes.len() as u64 {
        return Err(format_err(
            path,
            format!(
                "file is {} bytes but the header declares {expected} (truncated or trailing data)",
                bytes.len()
            ),
        ));
    }
    let mut off = header_end;
    let mut arrays = Vec::with_capacity(entries.len());
    for e in entries {
        let raw = &bytes[off..off + 8 * e.len];
        let vals = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        arrays.push((e.name, vals));
        off += 8 * e.len;
    }
    Ok(Container { header, arrays })
}

fn read_container(path: &Path, magic: &[u8; 4]) -> Result<Container> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_container(path, magic, &bytes)
}

fn header_field<T: serde::de::DeserializeOwned>(
    path: &Path,
    header: &Value,
    key: &str,
) -> Result<T> {
    let v = header
        .get(key)
        .ok_or_else(|| format_err(path, format!("header is missing {key:?}")))?;
    serde_json::from_value(v.clone())
        .map_err(|e| format_err(path, format!("header field {key:?}: {e}")))
}

pub fn write_sample(path: &Path, record: &SampleRecord) -> Result<()> {
    let header = json!({
        "grid": record.grid,
        "homo_names": HOMO_NAMES,
        "homo": record.homo,
        "well_cell": record.well_cell,
        "cell_order": "x-fastest",
    });
    write_container(
        path,
        SAMPLE_MAGIC,
        header,
        &[
            ("porosity".into(), &record.porosity),
            ("perm".into(), &record.perm),
            ("states".into(), &record.states),
        ],
    )
}

/// Bytes a sample file occupies before the JSON header is known:
/// preamble + header + 8 * (n + 3n + nt * n).
pub fn sample_payload_bytes(grid: &GridSpec) -> usize {
    let n = grid.n_cells();
    8 * (n + 3 * n + grid.nt * n)
}

pub fn read_sample(path: &Path) -> Result<SampleRecord> {
    let mut c = read_container(path, SAMPLE_MAGIC)?;
    let grid: GridSpec = header_field(path, &c.header, "grid")?;
    grid.validate()
        .map_err(|e| format_err(path, e.to_string()))?;
    let homo: [f64; 2] = header_field(path, &c.header, "homo")?;
    let well_cell: [usize; 3] = header_field(path, &c.header, "well_cell")?;
    let porosity = c.take(path, "porosity")?;
    let perm = c.take(path, "perm")?;
    let states = c.take(path, "states")?;
    let n = grid.n_cells();
    for (name, got, want) in [
        ("porosity", porosity.len(), n),
        ("perm", perm.len(), 3 * n),
        ("states", states.len(), grid.nt * n),
    ] {
        if got != want {
            return Err(format_err(
                path,
                format!("array {name} has {got} values, grid implies {want}"),
            ));
        }
    }
    Ok(SampleRecord {
        grid,
        porosity,
        perm,
        homo,
        well_cell,
        states,
    })
}

/// Writes named per-cell fields (e.g. pointwise differences) in the sample
/// container so external tools can read them with the same parser.
pub fn write_fields(
    path: &Path,
    grid: &GridSpec,
    kind: &str,
    fields: &[(String, &[f64])],
) -> Result<()> {
    let n = grid.n_cells();
    if let Some((name, f)) = fields.iter().find(|(_, f)| f.len() != n) {
        return Err(Error::dim(
            "write_fields",
            format!("field {name} has {} values for {n} cells", f.len()),
        ));
    }
    let header = json!({ "grid": grid, "kind": kind, "cell_order": "x-fastest" });
    write_container(path, SAMPLE_MAGIC, header, fields)
}

/// `(name, values)` pairs in file order.
pub type NamedArrays = Vec<(String, Vec<f64>)>;

/// Reads a field file written by [`write_fields`].
pub fn read_fields(path: &Path) -> Result<(GridSpec, NamedArrays)> {
    let c = read_container(path, SAMPLE_MAGIC)?;
    let grid: GridSpec = header_field(path, &c.header, "grid")?;
    Ok((grid, c.arrays))
}

/// Non-array checkpoint metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub step: u64,
    pub seed: u64,
    pub rng: Option<RngState>,
    /// Free-form extra header content (e.g. the data split).
    pub extra: Value,
}

pub struct Checkpoint {
    pub model: Model,
    pub optim: Option<OptimState>,
    pub normalizer: Normalizer,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct OptimHeader {
    adam: AdamConfig,
    step_c: u64,
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    optim: Option<&OptimState>,
    normalizer: &Normalizer,
    meta: &CheckpointMeta,
) -> Result<()> {
    let names = model.param_names();
    let params = model.param_slices();
    let mut arrays: Vec<(String, &[f64])> =
        names.iter().cloned().zip(params.iter().copied()).collect();
    if let Some(o) = optim {
        if o.m.len() != names.len() {
            return Err(Error::dim(
                "save_checkpoint",
                "optimizer buffers do not match the model",
            ));
        }
        for (name, m) in names.iter().zip(&o.m) {
            arrays.push((format!("adam.m.{name}"), m));
        }
        for (name, v) in names.iter().zip(&o.v) {
            arrays.push((format!("adam.v.{name}"), v));
        }
    }
    let header = json!({
        "model": model.config(),
        "normalizer": normalizer,
        "step": meta.step,
        "seed": meta.seed,
        "rng": meta.rng,
        "optim": optim.map(|o| OptimHeader { adam: o.adam, step_c: o.step_c }),
        "extra": meta.extra,
    });
    write_container(path, CHECKPOINT_MAGIC, header, &arrays)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut c = read_container(path, CHECKPOINT_MAGIC)?;
    let config: ModelConfig = header_field(path, &c.header, "model")?;
    let normalizer: Normalizer = header_field(path, &c.header, "normalizer")?;
    let step: u64 = header_field(path, &c.header, "step")?;
    let seed: u64 = header_field(path, &c.header, "seed")?;
    let rng: Option<RngState> = header_field(path, &c.header, "rng")?;
    let optim_header: Option<OptimHeader> = header_field(path, &c.header, "optim")?;
    let extra = c.header.get("extra").cloned().unwrap_or(Value::Null);

    let mut model =
        build_model(&config).map_err(|e| format_err(path, format!("model config: {e}")))?;
    let names = model.param_names();
    for (name, slot) in names.iter().zip(model.param_slices_mut()) {
        let vals = c.take(path, name)?;
        if vals.len() != slot.len() {
            return Err(format_err(
                path,
                format!(
                    "array {name} has {} values, config implies {}",
                    vals.len(),
                    slot.len()
                ),
            ));
        }
        slot.copy_from_slice(&vals);
    }
    let optim = match optim_header {
        None => None,
        Some(h) => {
            let lengths: Vec<usize> = model.param_slices().iter().map(|s| s.len()).collect();
            let mut st = OptimState::new(&lengths, h.adam);
            st.step_c = h.step_c;
            for (i, name) in names.iter().enumerate() {
                for (prefix, buf) in [("adam.m", &mut st.m[i]), ("adam.v", &mut st.v[i])] {
                    let vals = c.take(path, &format!("{prefix}.{name}"))?;
                    if vals.len() != buf.len() {
                        return Err(format_err(
                            path,
                            format!("{prefix}.{name} has the wrong length"),
                        ));
                    }
                    *buf = vals;
                }
            }
            Some(st)
        }
    };
    if let Some((name, _)) = c.arrays.first() {
        return Err(format_err(path, format!("unexpected array {name:?}")));
    }
    Ok(Checkpoint {
        model,
        optim,
        normalizer,
        meta: CheckpointMeta {
            step,
            seed,
            rng,
            extra,
        },
    })
}
