//! Calibration dump I/O.
//!
//! Tensor files are a fixed 21-byte little-endian header followed by the
//! row-major `f32` payload:
//!
//! | bytes  | content                              |
//! |--------|--------------------------------------|
//! | 0..8   | magic `FASCTEN1`                     |
//! | 8      | kind (0 = activation, 1 = gradient)  |
//! | 9..13  | layer id, `u32`                      |
//! | 13..17 | n (samples), `u32`                   |
//! | 17..21 | d (dimension), `u32`                 |
//! | 21..   | n·d `f32` values                     |
//!
//! A manifest is a JSON document listing the activation/gradient file pair
//! of every layer. Relative paths resolve against the manifest's directory.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FASCTEN1";
pub const HEADER_LEN: usize = 21;
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Activation,
    Gradient,
}

impl TensorKind {
    fn to_byte(self) -> u8 {
        match self {
            TensorKind::Activation => 0,
            TensorKind::Gradient => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(TensorKind::Activation),
            1 => Ok(TensorKind::Gradient),
            other => Err(Error::BadKind(other)),
        }
    }
}

/// A dense `n × d` block of samples for one layer. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBlock {
    layer_id: u32,
    kind: TensorKind,
    n: usize,
    d: usize,
    data: Vec<f32>,
}

impl TensorBlock {
    pub fn new(layer_id: u32, kind: TensorKind, n: usize, d: usize, data: Vec<f32>) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::EmptyTensor { n, d });
        }
        if data.len() != n * d {
            return Err(Error::TruncatedPayload {
                expected: n * d,
                found: data.len(),
            });
        }
        check_finite(&data, d)?;
        Ok(Self {
            layer_id,
            kind,
            n,
            d,
            data,
        })
    }

    /// Builds a block from a 64-bit sample matrix (rows are samples),
    /// rounding to the on-disk 32-bit precision.
    pub fn from_matrix(layer_id: u32, kind: TensorKind, m: &DMatrix<f64>) -> Result<Self> {
        let (n, d) = m.shape();
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            for j in 0..d {
                data.push(m[(i, j)] as f32);
            }
        }
        Self::new(layer_id, kind, n, d, data)
    }

    pub fn layer_id(&self) -> u32 {
        self.layer_id
    }

    pub fn kind(&self) -> TensorKind {
        self.kind
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| f64::from(v)).collect()
    }

    /// The block widened to 64-bit, `n × d`.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_iterator(self.n, self.d, self.data.iter().map(|&v| f64::from(v)))
    }

    pub fn with_layer_id(mut self, layer_id: u32) -> Self {
        self.layer_id = layer_id;
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(self.kind.to_byte());
        out.extend_from_slice(&self.layer_id.to_le_bytes());
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let header = TensorHeader::parse(bytes, origin)?;
        let payload = &bytes[HEADER_LEN..];
        let expected = header.n * header.d;
        let found = payload.len() / 4;
        if payload.len() < expected * 4 {
            return Err(Error::TruncatedPayload { expected, found });
        }
        if payload.len() > expected * 4 {
            return Err(Error::TrailingBytes(payload.len() - expected * 4));
        }
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(header.layer_id, header.kind, header.n, header.d, data)
    }
}

/// Checks that every pair shares n and d.
pub fn check_paired(xs: &TensorBlock, gs: &TensorBlock) -> Result<()> {
    if xs.d() != gs.d() {
        return Err(Error::DimensionMismatch {
            expected: xs.d(),
            got: gs.d(),
        });
    }
    if xs.n() != gs.n() {
        return Err(Error::SampleMismatch {
            expected: xs.n(),
            got: gs.n(),
        });
    }
    Ok(())
}

fn check_finite(data: &[f32], d: usize) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(idx) => Err(Error::NonFinite {
            row: idx / d,
            col: idx % d,
        }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorHeader {
    pub kind: TensorKind,
    pub layer_id: u32,
    pub n: usize,
    pub d: usize,
}

impl TensorHeader {
    fn parse(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::BadMagic(origin.to_path_buf()));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::TruncatedPayload {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
        Ok(Self {
            kind: TensorKind::from_byte(bytes[8])?,
            layer_id: u32_at(9),
            n: u32_at(13) as usize,
            d: u32_at(17) as usize,
        })
    }
}

pub fn write_tensor(block: &TensorBlock, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, block.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorBlock> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    TensorBlock::from_bytes(&bytes, path)
}

/// Reads only the header, checking the file length against it.
pub fn read_header(path: impl AsRef<Path>) -> Result<TensorHeader> {
    let path = path.as_ref();
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(HEADER_LEN);
    file.by_ref()
        .take(HEADER_LEN as u64)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    let header = TensorHeader::parse(&buf, path)?;
    let len = file.metadata().map_err(|e| Error::io(path, e))?.len() as usize;
    let expected = header.n * header.d;
    let payload = len.saturating_sub(HEADER_LEN);
    if payload < expected * 4 {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload / 4,
        });
    }
    Ok(header)
}

/// Functional role of a layer, used by the layer-exclusion gating rule.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerRole {
    Attention,
    Mlp,
    Output,
    #[default]
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub layer_id: u32,
    pub activation: PathBuf,
    pub gradient: PathBuf,
    pub d: usize,
    pub n: usize,
    #[serde(default)]
    pub role: LayerRole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub calibration_tag: String,
    pub layers: Vec<LayerEntry>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl Manifest {
    pub fn new(calibration_tag: impl Into<String>, layers: Vec<LayerEntry>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            calibration_tag: calibration_tag.into(),
            layers,
            base_dir: PathBuf::new(),
        }
    }

    /// Parses and validates a manifest file, including every tensor header.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: Manifest = serde_json::from_str(&text)?;
        manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = dir.into();
        self
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Layers counted for the final-layer exclusion rule: one past the
    /// highest layer id.
    pub fn total_layers(&self) -> u32 {
        self.layers.iter().map(|l| l.layer_id + 1).max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported format_version {}",
                self.format_version
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for entry in &self.layers {
            if !seen.insert(entry.layer_id) {
                return Err(Error::Manifest(format!("duplicate layer_id {}", entry.layer_id)));
            }
            for (file, kind) in [
                (&entry.activation, TensorKind::Activation),
                (&entry.gradient, TensorKind::Gradient),
            ] {
                let full = self.resolve(file);
                if !full.exists() {
                    return Err(Error::Manifest(format!(
                        "layer {}: missing file {}",
                        entry.layer_id,
                        full.display()
                    )));
                }
                let h = read_header(&full)?;
                if h.n != entry.n || h.d != entry.d {
                    return Err(Error::Manifest(format!(
                        "layer {}: {} header is {}x{}, manifest says {}x{}",
                        entry.layer_id,
                        full.display(),
                        h.n,
                        h.d,
                        entry.n,
                        entry.d
                    )));
                }
                if h.kind != kind {
                    return Err(Error::Manifest(format!(
                        "layer {}: {} has kind {:?}, expected {:?}",
                        entry.layer_id,
                        full.display(),
                        h.kind,
                        kind
                    )));
                }
            }
        }
        Ok(())
    }

    /// Loads the (activation, gradient) pair of one layer.
    pub fn load_layer(&self, entry: &LayerEntry) -> Result<(TensorBlock, TensorBlock)> {
        let xs = read_tensor(self.resolve(&entry.activation))?;
        let gs = read_tensor(self.resolve(&entry.gradient))?;
        check_paired(&xs, &gs)?;
        if xs.n() != entry.n || xs.d() != entry.d {
            return Err(Error::Manifest(format!(
                "layer {}: data is {}x{}, manifest says {}x{}",
                entry.layer_id,
                xs.n(),
                xs.d(),
                entry.n,
                entry.d
            )));
        }
        Ok((xs, gs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_value_file_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.bin");
        let b = TensorBlock::new(0, TensorKind::Activation, 1, 1, vec![0.0]).unwrap();
        write_tensor(&b, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 25);
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(read_tensor(&p).unwrap(), b);
    }

    #[test]
    fn ones_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ones.bin");
        let b = TensorBlock::new(3, TensorKind::Gradient, 2, 3, vec![1.0; 6]).unwrap();
        write_tensor(&b, &p).unwrap();
        let back = read_tensor(&p).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.kind(), TensorKind::Gradient);
        assert_eq!(back.layer_id(), 3);
    }

    #[test]
    fn repeated_writes_are_byte_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f32> = (0..64 * 16).map(|_| rng.random::<f32>() - 0.5).collect();
        let b = TensorBlock::new(1, TensorKind::Activation, 64, 16, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
        write_tensor(&b, &p1).unwrap();
        write_tensor(&b, &p2).unwrap();
        assert_eq!(fs::read(p1).unwrap(), fs::read(p2).unwrap());
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.bin");
        let mut bytes = TensorBlock::new(0, TensorKind::Activation, 1, 1, vec![1.0])
            .unwrap()
            .to_bytes();
        bytes[0] = b'X';
        fs::write(&p, bytes).unwrap();
        let err = read_tensor(&p).unwrap_err();
        assert!(matches!(err, Error::BadMagic(_)));
        assert!(err.to_string().contains("bad magic"));
    }

    #[test]
    fn short_payload_rejected() {
        let b = TensorBlock::new(0, TensorKind::Activation, 4, 4, vec![1.0; 16]).unwrap();
        let mut bytes = b.to_bytes();
        bytes.truncate(bytes.len() - 4);
        let err = TensorBlock::from_bytes(&bytes, Path::new("t")).unwrap_err();
        assert!(matches!(err, Error::TruncatedPayload { expected: 16, found: 15 }));
        assert!(err.to_string().contains("truncated payload"));
    }

    #[test]
    fn non_finite_rejected_with_position() {
        let b = TensorBlock::new(0, TensorKind::Activation, 2, 3, vec![0.0; 6]).unwrap();
        let mut bytes = b.to_bytes();
        let off = HEADER_LEN + 4 * (3 + 2);
        bytes[off..off + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        let err = TensorBlock::from_bytes(&bytes, Path::new("t")).unwrap_err();
        assert!(matches!(err, Error::NonFinite { row: 1, col: 2 }));

        let inf = TensorBlock::new(0, TensorKind::Activation, 1, 2, vec![0.0, f32::INFINITY]);
        assert!(matches!(inf, Err(Error::NonFinite { row: 0, col: 1 })));
    }

    #[test]
    fn empty_block_rejected() {
        assert!(TensorBlock::new(0, TensorKind::Activation, 0, 3, vec![]).is_err());
    }

    #[test]
    fn manifest_validates_headers() {
        let dir = tempfile::tempdir().unwrap();
        let x = TensorBlock::new(0, TensorKind::Activation, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = TensorBlock::new(0, TensorKind::Gradient, 2, 2, vec![0.5; 4]).unwrap();
        write_tensor(&x, dir.path().join("x.bin")).unwrap();
        write_tensor(&g, dir.path().join("g.bin")).unwrap();
        let entry = LayerEntry {
            layer_id: 0,
            activation: "x.bin".into(),
            gradient: "g.bin".into(),
            d: 2,
            n: 2,
            role: LayerRole::Mlp,
        };
        let m = Manifest::new("unit", vec![entry.clone()]);
        let mp = dir.path().join("manifest.json");
        m.save(&mp).unwrap();
        let loaded = Manifest::load(&mp).unwrap();
        let (lx, lg) = loaded.load_layer(&loaded.layers[0]).unwrap();
        assert_eq!(lx, x);
        assert_eq!(lg, g);

        let bad = Manifest::new("unit", vec![LayerEntry { n: 3, ..entry }]);
        bad.save(&mp).unwrap();
        assert!(matches!(Manifest::load(&mp), Err(Error::Manifest(_))));
    }
}
