//! Binary containers for datasets, models and signal sets, and the CSV
//! telemetry files.
//!
//! Container layout (all integers little-endian):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `W2SB`                            |
//! | 4      | 4    | format version (u32, currently 1)       |
//! | 8      | 4    | kind (u32: 1 dataset, 2 weak, 3 strong, 4 signals) |
//! | 12     | 32   | SHA-256 of the producing config         |
//! | 44     | 8    | seed (u64)                              |
//! | 52     | 8    | rows n (u64)                            |
//! | 60     | 8    | dimension d (u64)                       |
//! | 68     | 8    | patches per row (u64)                   |
//! | 76     | ...  | `n * patches * d` f64 LE, row-major     |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::data::{Category, Dataset, Label, Sample, SignalPatch, Slot};
use crate::decomposition::DecompRow;
use crate::error::{Error, Result};
use crate::models::{StrongModel, WeakModel};
use crate::rng::SignalSet;
use crate::training::RunRecord;

pub const MAGIC: [u8; 4] = *b"W2SB";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 76;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Kind {
    Dataset = 1,
    Weak = 2,
    Strong = 3,
    Signals = 4,
}

impl Kind {
    fn from_u32(v: u32) -> Option<Kind> {
        match v {
            1 => Some(Kind::Dataset),
            2 => Some(Kind::Weak),
            3 => Some(Kind::Strong),
            4 => Some(Kind::Signals),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub kind: Kind,
    pub config_hash: [u8; 32],
    pub seed: u64,
    pub n: u64,
    pub d: u64,
    pub patches_per_row: u64,
}

impl Header {
    fn body_len(&self) -> Option<usize> {
        (self.n as usize)
            .checked_mul(self.d as usize)?
            .checked_mul(self.patches_per_row as usize)
    }

    fn encode(&self) -> [u8; HEADER_LEN] {
        let mut h = [0u8; HEADER_LEN];
        h[0..4].copy_from_slice(&MAGIC);
        h[4..8].copy_from_slice(&VERSION.to_le_bytes());
        h[8..12].copy_from_slice(&(self.kind as u32).to_le_bytes());
        h[12..44].copy_from_slice(&self.config_hash);
        h[44..52].copy_from_slice(&self.seed.to_le_bytes());
        h[52..60].copy_from_slice(&self.n.to_le_bytes());
        h[60..68].copy_from_slice(&self.d.to_le_bytes());
        h[68..76].copy_from_slice(&self.patches_per_row.to_le_bytes());
        h
    }

    fn decode(path: &Path, h: &[u8; HEADER_LEN]) -> Result<Header> {
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        if h[0..4] != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(h[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(h[o..o + 8].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let kind =
            Kind::from_u32(u32_at(8)).ok_or_else(|| bad(format!("unknown kind {}", u32_at(8))))?;
        let mut config_hash = [0u8; 32];
        config_hash.copy_from_slice(&h[12..44]);
        Ok(Header {
            kind,
            config_hash,
            seed: u64_at(44),
            n: u64_at(52),
            d: u64_at(60),
            patches_per_row: u64_at(68),
        })
    }
}

pub fn write_container(path: &Path, header: &Header, body: &[f64]) -> Result<()> {
    if header.body_len() != Some(body.len()) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!(
                "body has {} values, header implies {:?}",
                body.len(),
                header.body_len()
            ),
        });
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&header.encode())?;
    for x in body {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_container(path: &Path, expect: Kind) -> Result<(Header, Vec<f64>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut h = [0u8; HEADER_LEN];
    r.read_exact(&mut h).map_err(|_| Error::Format {
        path: path.to_path_buf(),
        reason: "truncated header".into(),
    })?;
    let header = Header::decode(path, &h)?;
    if header.kind != expect {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected a {expect:?} container, found {:?}", header.kind),
        });
    }
    let len = header.body_len().ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        reason: "body size overflows".into(),
    })?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != len * 8 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("body has {} bytes, expected {}", bytes.len(), len * 8),
        });
    }
    let body = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, body))
}

/// Provenance stamped into every container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stamp {
    pub config_hash: [u8; 32],
    pub seed: u64,
}

fn header(kind: Kind, stamp: Stamp, n: usize, d: usize, ppr: usize) -> Header {
    Header {
        kind,
        config_hash: stamp.config_hash,
        seed: stamp.seed,
        n: n as u64,
        d: d as u64,
        patches_per_row: ppr as u64,
    }
}

pub fn save_weak(path: &Path, model: &WeakModel, stamp: Stamp) -> Result<()> {
    write_container(
        path,
        &header(Kind::Weak, stamp, 1, model.dim(), 1),
        &model.w,
    )
}

pub fn load_weak(path: &Path) -> Result<(WeakModel, Header)> {
    let (h, body) = read_container(path, Kind::Weak)?;
    if h.n != 1 || h.patches_per_row != 1 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "weak model must be a single row".into(),
        });
    }
    Ok((WeakModel::new(body), h))
}

pub fn save_strong(path: &Path, model: &StrongModel, stamp: Stamp) -> Result<()> {
    write_container(
        path,
        &header(Kind::Strong, stamp, 2 * model.m, model.d, 1),
        &model.filters,
    )
}

pub fn load_strong(path: &Path) -> Result<(StrongModel, Header)> {
    let (h, body) = read_container(path, Kind::Strong)?;
    if h.n == 0 || h.n % 2 != 0 || h.patches_per_row != 1 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!(
                "strong model needs an even, positive row count (got {})",
                h.n
            ),
        });
    }
    let m = StrongModel::from_filters(h.n as usize / 2, h.d as usize, body)?;
    Ok((m, h))
}

pub fn save_signals(path: &Path, signals: &SignalSet, stamp: Stamp) -> Result<()> {
    write_container(
        path,
        &header(Kind::Signals, stamp, 4, signals.dim(), 1),
        &signals.stacked(),
    )
}

pub fn load_signals(path: &Path) -> Result<(SignalSet, Header)> {
    let (h, body) = read_container(path, Kind::Signals)?;
    if h.n != 4 || h.patches_per_row != 1 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "signal set must have 4 rows".into(),
        });
    }
    let d = h.d as usize;
    let rows: [Vec<f64>; 4] = std::array::from_fn(|k| body[k * d..(k + 1) * d].to_vec());
    Ok((SignalSet::from_vectors(rows)?, h))
}

const SIDECAR_COLUMNS: [&str; 8] = [
    "index",
    "label",
    "pseudo",
    "category",
    "signal_1",
    "signal_2",
    "noise_slot",
    "first_slot",
];

/// Writes the patches (in stored order) and the metadata sidecar CSV.
pub fn save_dataset(bin: &Path, sidecar: &Path, ds: &Dataset, stamp: Stamp) -> Result<()> {
    let d = ds.dim();
    let mut body = Vec::with_capacity(ds.len() * 3 * d);
    for s in &ds.samples {
        for p in 0..3 {
            body.extend(s.patch(p, &ds.signals));
        }
    }
    write_container(bin, &header(Kind::Dataset, stamp, ds.len(), d, 3), &body)?;
    write_sidecar(sidecar, ds)
}

/// Writes only the metadata table, e.g. to attach pseudo-labels to an
/// already stored body.
pub fn write_sidecar(sidecar: &Path, ds: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(sidecar)?;
    w.write_record(SIDECAR_COLUMNS)?;
    for (i, s) in ds.samples.iter().enumerate() {
        let pseudo = ds
            .pseudo_labels
            .as_ref()
            .map(|p| p[i].to_string())
            .unwrap_or_default();
        let first = s.layout.iter().position(|&x| x == Slot::First).unwrap();
        w.write_record([
            i.to_string(),
            s.label.to_string(),
            pseudo,
            s.category.name().to_string(),
            s.signals[0].name().to_string(),
            s.signals[1].name().to_string(),
            s.noise_slot().to_string(),
            first.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset back; the stored signal patches must equal the
/// corresponding vectors of `signals` exactly.
pub fn load_dataset(
    bin: &Path,
    sidecar: &Path,
    signals: Arc<SignalSet>,
) -> Result<(Dataset, Header)> {
    let (h, body) = read_container(bin, Kind::Dataset)?;
    let d = h.d as usize;
    let bad = |path: &Path, reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if h.patches_per_row != 3 || d != signals.dim() {
        return Err(bad(
            bin,
            format!("expected 3 patches of dim {}", signals.dim()),
        ));
    }
    let mut r = csv::Reader::from_path(sidecar)?;
    let cols = r.headers()?.clone();
    if cols.iter().collect::<Vec<_>>() != SIDECAR_COLUMNS {
        return Err(Error::SchemaError(format!(
            "{}: sidecar columns {:?}",
            sidecar.display(),
            cols
        )));
    }
    let mut samples = Vec::with_capacity(h.n as usize);
    let mut pseudo = Vec::new();
    let mut any_pseudo = false;
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let field = |k: usize| rec.get(k).unwrap_or("");
        let parse_err = |what: &str| bad(sidecar, format!("row {i}: bad {what}"));
        let label = field(1)
            .parse::<i8>()
            .ok()
            .and_then(Label::from_i8)
            .ok_or_else(|| parse_err("label"))?;
        if !field(2).is_empty() {
            any_pseudo = true;
            pseudo.push(
                field(2)
                    .parse::<i8>()
                    .ok()
                    .and_then(Label::from_i8)
                    .ok_or_else(|| parse_err("pseudo"))?,
            );
        }
        let category = Category::parse(field(3)).ok_or_else(|| parse_err("category"))?;
        let s1 = SignalPatch::parse(field(4)).ok_or_else(|| parse_err("signal_1"))?;
        let s2 = SignalPatch::parse(field(5)).ok_or_else(|| parse_err("signal_2"))?;
        let noise_slot: usize = field(6).parse().map_err(|_| parse_err("noise_slot"))?;
        let first: usize = field(7).parse().map_err(|_| parse_err("first_slot"))?;
        if noise_slot > 2 || first > 2 || first == noise_slot {
            return Err(parse_err("layout"));
        }
        let mut layout = [Slot::Second; 3];
        layout[noise_slot] = Slot::Noise;
        layout[first] = Slot::First;
        let base = i * 3 * d;
        if base + 3 * d > body.len() {
            return Err(bad(
                bin,
                format!("sidecar has more rows than the body ({})", h.n),
            ));
        }
        let noise = body[base + noise_slot * d..base + (noise_slot + 1) * d].to_vec();
        let sample = Sample {
            label,
            category,
            signals: [s1, s2],
            layout,
            noise,
        };
        for p in 0..3 {
            if p == noise_slot {
                continue;
            }
            let stored = &body[base + p * d..base + (p + 1) * d];
            if sample.patch(p, &signals).as_slice() != stored {
                return Err(bad(
                    bin,
                    format!("row {i} patch {p} does not match its signal id"),
                ));
            }
        }
        samples.push(sample);
    }
    if samples.len() as u64 != h.n {
        return Err(bad(
            sidecar,
            format!("{} rows for {} samples", samples.len(), h.n),
        ));
    }
    if any_pseudo && pseudo.len() != samples.len() {
        return Err(bad(
            sidecar,
            "pseudo-labels present for only some rows".into(),
        ));
    }
    let mut ds = Dataset::new(samples, signals);
    if any_pseudo {
        ds.pseudo_labels = Some(pseudo);
    }
    Ok((ds, h))
}

/// 17 significant digits; round-trips every f64.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        format!("{x}")
    }
}

pub fn write_records(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RunRecord::COLUMNS)?;
    for r in records {
        let v = r.values();
        let mut row = vec![r.iter.to_string()];
        row.extend(v[1..].iter().map(|&x| fmt_f64(x)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a run CSV; columns are located by name, extra columns ignored.
pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let idx: Vec<usize> = RunRecord::COLUMNS
        .iter()
        .map(|c| {
            headers.iter().position(|h| h == *c).ok_or_else(|| {
                Error::SchemaError(format!("{}: missing column `{c}`", path.display()))
            })
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let vals: Vec<f64> = idx
            .iter()
            .map(|&k| {
                rec.get(k)
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .ok_or_else(|| {
                        Error::SchemaError(format!("{}: unparsable value", path.display()))
                    })
            })
            .collect::<Result<_>>()?;
        out.push(RunRecord::from_values(&vals)?);
    }
    Ok(out)
}

pub fn write_decomp(path: &Path, rows: &[DecompRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if let Some(first) = rows.first() {
        let mut head = vec!["iter".to_string(), "generalized".to_string()];
        head.extend(first.fields.iter().map(|(k, _)| k.to_string()));
        w.write_record(&head)?;
    }
    for r in rows {
        let mut row = vec![r.iter.to_string(), (r.generalized as u8).to_string()];
        row.extend(r.fields.iter().map(|(_, v)| fmt_f64(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
