//! `JCNR` float rasters, 8-bit PNG previews, record directories and dataset manifests.
//!
//! Raster layout, little-endian: `"JCNR" | H: u32 | W: u32 | C: u32 | f64 × H·W·C` (HWC order).
//!
//! A dataset directory holds one sub-directory per record (`I.png`, `I.raw`, `D.raw`, `A.raw`,
//! `S.raw`) and a `manifest.txt`:
//!
//! ```text
//! # jcnf dataset v1
//! record <id> seed=<seed> size=<H>x<W>
//! sha256 <hex digest> <id>/<file>
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::SceneRecord;
use crate::error::{Error, Result};
use crate::image::{Domain, Image};
use crate::tensor::Tensor;

pub const RASTER_MAGIC: &[u8; 4] = b"JCNR";

const MANIFEST: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "# jcnf dataset v1";
const RECORD_FILES: [&str; 5] = ["I.png", "I.raw", "D.raw", "A.raw", "S.raw"];

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn write_raster<W: Write>(mut w: W, t: &Tensor) -> std::io::Result<()> {
    w.write_all(RASTER_MAGIC)?;
    for d in [t.height(), t.width(), t.channels()] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()
}

pub fn read_raster<R: Read>(mut r: R) -> Result<Tensor> {
    let here = Path::new("<raster>");
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(here, e))?;
    if bytes.len() < 16 || &bytes[..4] != RASTER_MAGIC {
        return Err(format_err(here, "missing JCNR header"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let n = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| format_err(here, "dimensions overflow"))?;
    if bytes.len() != 16 + 8 * n {
        return Err(format_err(
            here,
            format!("expected {} payload bytes for {h}x{w}x{c}, found {}", 8 * n, bytes.len() - 16),
        ));
    }
    let data = bytes[16..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Tensor::new(h, w, c, data)
}

pub fn write_raster_file(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_raster(BufWriter::new(f), t).map_err(|e| Error::io(path, e))
}

pub fn read_raster_file(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_raster(BufReader::new(f)).map_err(|e| match e {
        Error::Format { reason, .. } => format_err(path, reason),
        other => other,
    })
}

/// Writes a 1- or 3-channel tensor with values in [0, 1] (clamped) as an 8-bit PNG.
pub fn write_png(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let color = match t.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::shape("write_png", "1 or 3 channels", format!("{c}"))),
    };
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(f), t.width() as u32, t.height() as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = t.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let mut writer = enc.write_header().map_err(|e| format_err(path, e.to_string()))?;
    writer.write_image_data(&bytes).map_err(|e| format_err(path, e.to_string()))?;
    writer.finish().map_err(|e| format_err(path, e.to_string()))
}

/// Reads an 8-bit gray, RGB or RGBA PNG as a linear-domain 3-channel image in [0, 1].
pub fn read_png(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = png::Decoder::new(BufReader::new(f))
        .read_info()
        .map_err(|e| format_err(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| format_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| format_err(path, e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(format_err(path, "only 8-bit PNGs are supported"));
    }
    let stride = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(format_err(path, "indexed PNGs are not supported")),
    };
    let (h, w) = (info.height as usize, info.width as usize);
    let row = info.line_size;
    Ok(Image::from_fn(h, w, 3, Domain::Linear, |y, x, c| {
        let base = y * row + x * stride;
        let v = if stride < 3 { buf[base] } else { buf[base + c] };
        v as f64 / 255.0
    }))
}

/// Writes `I.png`, `I.raw`, `D.raw`, `A.raw` and `S.raw` into `dir`.
pub fn write_record(dir: impl AsRef<Path>, record: &SceneRecord) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_png(dir.join("I.png"), record.image.to_linear()?.tensor())?;
    write_raster_file(dir.join("I.raw"), record.image.tensor())?;
    write_raster_file(dir.join("D.raw"), record.depth.tensor())?;
    write_raster_file(dir.join("A.raw"), record.albedo.tensor())?;
    write_raster_file(dir.join("S.raw"), record.shading.tensor())
}

/// Reads a record directory and checks its invariants.
pub fn read_record(dir: impl AsRef<Path>, id: &str, seed: u64) -> Result<SceneRecord> {
    let dir = dir.as_ref();
    let load = |name: &str| -> Result<Image> { Ok(Image::new(read_raster_file(dir.join(name))?, Domain::Log)) };
    let r = SceneRecord {
        id: id.to_string(),
        seed,
        image: load("I.raw")?,
        depth: load("D.raw")?,
        albedo: load("A.raw")?,
        shading: load("S.raw")?,
    };
    r.validate().map_err(|e| e.context(format!("record {}", dir.display())))?;
    Ok(r)
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes every record plus a checksummed manifest into `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, records: &[SceneRecord]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!("{MANIFEST_HEADER}\n");
    for r in records {
        write_record(dir.join(&r.id), r)?;
        manifest.push_str(&format!("record {} seed={} size={}x{}\n", r.id, r.seed, r.height(), r.width()));
        for f in RECORD_FILES {
            let rel = format!("{}/{f}", r.id);
            manifest.push_str(&format!("sha256 {} {rel}\n", sha256_file(&dir.join(&rel))?));
        }
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

struct ManifestEntry {
    id: String,
    seed: u64,
    files: Vec<(String, PathBuf)>,
}

fn parse_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut entries: Vec<ManifestEntry> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || format_err(&path, format!("line {}: cannot parse {line:?}", n + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["record", id, seed, _size] => {
                let seed = seed.strip_prefix("seed=").and_then(|s| s.parse().ok()).ok_or_else(bad)?;
                entries.push(ManifestEntry {
                    id: id.to_string(),
                    seed,
                    files: Vec::new(),
                });
            }
            ["sha256", digest, rel] => {
                let entry = entries.last_mut().ok_or_else(bad)?;
                entry.files.push((digest.to_string(), dir.join(rel)));
            }
            _ => return Err(bad()),
        }
    }
    Ok(entries)
}

/// Recomputes every checksum listed in the manifest.
pub fn verify_manifest(dir: impl AsRef<Path>) -> Result<()> {
    for entry in parse_manifest(dir.as_ref())? {
        for (digest, file) in &entry.files {
            if sha256_file(file)? != *digest {
                return Err(format_err(file, "checksum mismatch"));
            }
        }
    }
    Ok(())
}

/// Reads all records listed in the manifest after verifying checksums.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<SceneRecord>> {
    let dir = dir.as_ref();
    verify_manifest(dir)?;
    parse_manifest(dir)?
        .into_iter()
        .map(|e| read_record(dir.join(&e.id), &e.id, e.seed))
        .collect()
}
