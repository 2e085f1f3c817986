//! On-disk formats. All binary files are little-endian with a four-byte
//! magic:
//!
//! * `FRID` — one u8 image: u32 channels/height/width, then channel-major,
//!   row-major pixel bytes.
//! * `FRMC` — model checkpoint: u32 version, u32 array count, then named f64
//!   arrays (u32 name length, name bytes, u32 rank, u32 dims, f64 data).
//! * `FREM` — embeddings: u32 count, u32 dim, then per sample u32 identity,
//!   u32 camera, dim f64 features.
//! * `FRDM` — distance matrix: u32 rows, u32 cols, row-major f64 data.
//!
//! Dataset manifests are CSV files with the header `path,identity,camera,split`.
//! Writers go through a temp file in the target directory followed by a
//! rename, so readers never observe a partial file.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use sha2::Digest;

use crate::error::{Error, Result};
use crate::eval::EmbeddingSet;
use crate::model::{ModelConfig, ModelParams};
use crate::synth::{ImageU8, Split};

pub const IMAGE_MAGIC: &[u8; 4] = b"FRID";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FRMC";
pub const EMBEDDING_MAGIC: &[u8; 4] = b"FREM";
pub const DISTANCE_MAGIC: &[u8; 4] = b"FRDM";

/// Current checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn check_magic<R: Read>(r: &mut R, want: &[u8; 4], what: &str) -> Result<()> {
    let mut got = [0u8; 4];
    r.read_exact(&mut got)?;
    if &got != want {
        return Err(Error::format(format!(
            "not a {what} file: magic {:?} (expected {:?})",
            String::from_utf8_lossy(&got),
            String::from_utf8_lossy(want)
        )));
    }
    Ok(())
}

/// Run `write` against a temp file, then atomically rename onto `path`.
fn atomic_write<F>(path: &Path, write: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = PathBuf::from(dir);
    let base = path
        .file_name()
        .ok_or_else(|| Error::validation(format!("bad output path {}", path.display())))?;
    tmp.push(format!(".{}.tmp-{}", base.to_string_lossy(), std::process::id()));
    let mut writer = BufWriter::new(File::create(&tmp)?);
    let res = write(&mut writer).and_then(|()| {
        writer.flush()?;
        Ok(())
    });
    match res {
        Ok(()) => {
            drop(writer);
            std::fs::rename(&tmp, path)?;
            Ok(())
        }
        Err(e) => {
            drop(writer);
            let _ = std::fs::remove_file(&tmp);
            Err(e)
        }
    }
}

/// Atomically write a text artifact (write-temp-then-rename).
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    atomic_write(path, |out| {
        out.write_all(text.as_bytes())?;
        Ok(())
    })
}

/// Write one image in the `FRID` format.
pub fn write_image(path: &Path, image: &ImageU8) -> Result<()> {
    let (c, h, w) = image.dim();
    atomic_write(path, |out| {
        out.write_all(IMAGE_MAGIC)?;
        write_u32(out, c as u32)?;
        write_u32(out, h as u32)?;
        write_u32(out, w as u32)?;
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    out.write_all(&[image[[ci, hi, wi]]])?;
                }
            }
        }
        Ok(())
    })
}

pub fn read_image(path: &Path) -> Result<ImageU8> {
    let mut r = BufReader::new(File::open(path)?);
    check_magic(&mut r, IMAGE_MAGIC, "image")?;
    let c = read_u32(&mut r)? as usize;
    let h = read_u32(&mut r)? as usize;
    let w = read_u32(&mut r)? as usize;
    let len = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::format("image dimensions overflow"))?;
    if len == 0 {
        return Err(Error::format("image has a zero dimension"));
    }
    let mut data = vec![0u8; len];
    r.read_exact(&mut data)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::format("trailing bytes after image data"));
    }
    ImageU8::from_shape_vec((c, h, w), data).map_err(|e| Error::format(e.to_string()))
}

fn write_named_arrays<W: Write>(
    out: &mut W,
    arrays: &[(String, Vec<usize>, Vec<f64>)],
) -> Result<()> {
    write_u32(out, arrays.len() as u32)?;
    for (name, shape, data) in arrays {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "array '{name}' has {} values for shape {shape:?}",
                data.len()
            )));
        }
        write_u32(out, name.len() as u32)?;
        out.write_all(name.as_bytes())?;
        write_u32(out, shape.len() as u32)?;
        for &d in shape {
            write_u32(out, d as u32)?;
        }
        for &v in data {
            write_f64(out, v)?;
        }
    }
    Ok(())
}

fn read_named_arrays<R: Read>(r: &mut R) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>> {
    let count = read_u32(r)? as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        if name_len > 4096 {
            return Err(Error::format("array name unreasonably long"));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::format("array name not UTF-8"))?;
        let rank = read_u32(r)? as usize;
        if rank > 8 {
            return Err(Error::format(format!("array '{name}' has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(r)? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(read_f64(r)?);
        }
        arrays.push((name, shape, data));
    }
    Ok(arrays)
}

/// Write model parameters (including batch-norm running statistics and the
/// clamp bounds) as an `FRMC` checkpoint.
pub fn write_checkpoint(path: &Path, cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    let mut arrays = params.named_arrays();
    arrays.push((
        "clip.bounds".to_string(),
        vec![2],
        vec![cfg.clip_lo, cfg.clip_hi],
    ));
    atomic_write(path, |out| {
        out.write_all(CHECKPOINT_MAGIC)?;
        write_u32(out, CHECKPOINT_VERSION)?;
        write_named_arrays(out, &arrays)
    })
}

/// Load parameters from an `FRMC` checkpoint, validating shapes and the
/// clamp bounds against `cfg`.
pub fn read_checkpoint(path: &Path, cfg: &ModelConfig) -> Result<ModelParams> {
    let mut r = BufReader::new(File::open(path)?);
    check_magic(&mut r, CHECKPOINT_MAGIC, "checkpoint")?;
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!(
            "checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let mut arrays = read_named_arrays(&mut r)?;
    let pos = arrays
        .iter()
        .position(|(name, _, _)| name == "clip.bounds")
        .ok_or_else(|| Error::format("checkpoint missing clip bounds"))?;
    let (_, _, bounds) = arrays.remove(pos);
    if bounds.len() != 2 {
        return Err(Error::format("malformed clip bounds"));
    }
    if bounds[0] != cfg.clip_lo || bounds[1] != cfg.clip_hi {
        return Err(Error::format(format!(
            "checkpoint clamp bounds [{}, {}] do not match config [{}, {}]",
            bounds[0], bounds[1], cfg.clip_lo, cfg.clip_hi
        )));
    }
    ModelParams::from_named_arrays(cfg, &arrays)
}

/// Write labeled embeddings in the `FREM` format.
pub fn write_embeddings(path: &Path, set: &EmbeddingSet) -> Result<()> {
    let n = set.len();
    let d = set.dim();
    atomic_write(path, |out| {
        out.write_all(EMBEDDING_MAGIC)?;
        write_u32(out, n as u32)?;
        write_u32(out, d as u32)?;
        for i in 0..n {
            write_u32(out, set.identities[i])?;
            write_u32(out, set.cameras[i])?;
            for k in 0..d {
                write_f64(out, set.features[[i, k]])?;
            }
        }
        Ok(())
    })
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingSet> {
    let mut r = BufReader::new(File::open(path)?);
    check_magic(&mut r, EMBEDDING_MAGIC, "embedding")?;
    let n = read_u32(&mut r)? as usize;
    let d = read_u32(&mut r)? as usize;
    if d == 0 {
        return Err(Error::format("embedding dimension is zero"));
    }
    let mut identities = Vec::with_capacity(n);
    let mut cameras = Vec::with_capacity(n);
    let mut features = Array2::zeros((n, d));
    for i in 0..n {
        identities.push(read_u32(&mut r)?);
        cameras.push(read_u32(&mut r)?);
        for k in 0..d {
            features[[i, k]] = read_f64(&mut r)?;
        }
    }
    EmbeddingSet::new(identities, cameras, features)
}

/// Write a distance matrix in the `FRDM` format.
pub fn write_distances(path: &Path, dist: &Array2<f64>) -> Result<()> {
    let (rows, cols) = dist.dim();
    atomic_write(path, |out| {
        out.write_all(DISTANCE_MAGIC)?;
        write_u32(out, rows as u32)?;
        write_u32(out, cols as u32)?;
        for i in 0..rows {
            for j in 0..cols {
                write_f64(out, dist[[i, j]])?;
            }
        }
        Ok(())
    })
}

pub fn read_distances(path: &Path) -> Result<Array2<f64>> {
    let mut r = BufReader::new(File::open(path)?);
    check_magic(&mut r, DISTANCE_MAGIC, "distance")?;
    let rows = read_u32(&mut r)? as usize;
    let cols = read_u32(&mut r)? as usize;
    let mut dist = Array2::zeros((rows, cols));
    for i in 0..rows {
        for j in 0..cols {
            dist[[i, j]] = read_f64(&mut r)?;
        }
    }
    Ok(dist)
}

/// One dataset manifest row: an image file plus its labels.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub identity: u32,
    pub camera: u32,
    pub split: Split,
}

/// Write a dataset manifest CSV with the header `path,identity,camera,split`.
pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    atomic_write(path, |out| {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["path", "identity", "camera", "split"])
            .map_err(|e| Error::format(e.to_string()))?;
        for row in rows {
            w.write_record([
                row.path.as_str(),
                &row.identity.to_string(),
                &row.camera.to_string(),
                row.split.as_str(),
            ])
            .map_err(|e| Error::format(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    })
}

/// Read a dataset manifest, reporting malformed rows by line number.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let file = File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    {
        let headers = reader
            .headers()
            .map_err(|e| Error::format(e.to_string()))?;
        let want = ["path", "identity", "camera", "split"];
        if headers.len() != want.len() || headers.iter().zip(want).any(|(a, b)| a != b) {
            return Err(Error::format(format!(
                "manifest header is {headers:?}, expected path,identity,camera,split"
            )));
        }
    }
    let mut rows = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2; // 1-based, after the header
        let record = record.map_err(|e| Error::format(format!("manifest line {line}: {e}")))?;
        if record.len() != 4 {
            return Err(Error::format(format!(
                "manifest line {line}: {} fields (expected 4)",
                record.len()
            )));
        }
        let identity: u32 = record[1]
            .parse()
            .map_err(|_| Error::format(format!("manifest line {line}: bad identity '{}'", &record[1])))?;
        let camera: u32 = record[2]
            .parse()
            .map_err(|_| Error::format(format!("manifest line {line}: bad camera '{}'", &record[2])))?;
        let split = Split::parse(&record[3])
            .map_err(|_| Error::format(format!("manifest line {line}: bad split '{}'", &record[3])))?;
        rows.push(ManifestRow {
            path: record[0].to_string(),
            identity,
            camera,
            split,
        });
    }
    Ok(rows)
}

/// SHA-256 of a file, as lowercase hex.
pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = File::open(path)?;
    let mut hasher = sha2::Sha256::new();
    std::io::copy(&mut file, &mut hasher)?;
    Ok(format!("{:x}", hasher.finalize()))
}

/// SHA-256 of a byte slice, as lowercase hex.
pub fn sha256_bytes(bytes: &[u8]) -> String {
    let mut hasher = sha2::Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}
