//! Image IO (binary PPM), patch extraction, and deterministic
//! pre-generation of the 8 degraded test variants.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::degrade::{degrade, DegradationSpec, TestParams, test_variant_specs};
use crate::error::{Error, Result};
use crate::rng::derive_stream;
use crate::tensor::Tensor;

/// One HR image with a stable id (the file stem).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub hr: Tensor,
}

fn parse_err(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: msg.into(),
    }
}

/// Parses a binary PPM (P6, maxval 255). Pixel byte p maps to p/255.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut pos = 0usize;

    let next_token = |pos: &mut usize| -> Result<(usize, String)> {
        // skip whitespace and '#' comments
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                break;
            }
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(parse_err(path, start, "unexpected end of header"));
        }
        Ok((start, String::from_utf8_lossy(&bytes[start..*pos]).into_owned()))
    };

    let (off, magic) = next_token(&mut pos)?;
    if magic != "P6" {
        return Err(parse_err(path, off, format!("expected P6 magic, got '{magic}'")));
    }
    let (off, wtok) = next_token(&mut pos)?;
    let w: usize = wtok
        .parse()
        .map_err(|_| parse_err(path, off, format!("bad width '{wtok}'")))?;
    let (off, htok) = next_token(&mut pos)?;
    let h: usize = htok
        .parse()
        .map_err(|_| parse_err(path, off, format!("bad height '{htok}'")))?;
    let (off, mtok) = next_token(&mut pos)?;
    if mtok != "255" {
        return Err(parse_err(path, off, format!("maxval must be 255, got '{mtok}'")));
    }
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(parse_err(path, pos, "missing whitespace before payload"));
    }
    pos += 1;
    let need = w * h * 3;
    if bytes.len() - pos < need {
        return Err(parse_err(
            path,
            bytes.len(),
            format!("truncated payload: need {need} bytes, have {}", bytes.len() - pos),
        ));
    }
    let payload = &bytes[pos..pos + need];
    // interleaved RGB rows -> planar (3,H,W)
    let mut data = vec![0.0f32; need];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = payload[(y * w + x) * 3 + c] as f32 / 255.0;
            }
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn load_ppm(path: &Path) -> Result<ImageRecord> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let hr = decode_ppm(&bytes, path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(ImageRecord { id, hr })
}

/// Encodes to canonical P6 bytes: round-to-nearest of v*255, clamped.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let [_, h, w] = match image.shape() {
        [c, h, w] if *c == 3 => [*c, *h, *w],
        other => {
            return Err(Error::invalid_argument(format!(
                "encode_ppm: expected (3,H,W), got {other:?}"
            )))
        }
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = image.data()[(c * h + y) * w + x];
                out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok(out)
}

pub fn save_ppm(image: &Tensor, path: &Path) -> Result<()> {
    let bytes = encode_ppm(image)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads every `.ppm` in a directory, sorted by id.
pub fn load_dataset(dir: &Path) -> Result<Vec<ImageRecord>> {
    let mut records = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().is_some_and(|e| e == "ppm") {
            records.push(load_ppm(&path)?);
        }
    }
    records.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(records)
}

/// Top-left anchored grid at the given stride; a window that would
/// overrun is anchored to the last valid position instead. Row-major
/// order. Patch larger than the image yields an empty list.
pub fn extract_patches(image: &ImageRecord, patch: usize, stride: usize) -> Vec<Tensor> {
    let (h, w) = (image.hr.shape()[1], image.hr.shape()[2]);
    if patch > h || patch > w || patch == 0 || stride == 0 {
        return Vec::new();
    }
    let anchors = |len: usize| -> Vec<usize> {
        let mut out = Vec::new();
        let mut a = 0;
        while a + patch <= len {
            out.push(a);
            a += stride;
        }
        let last = len - patch;
        if out.last() != Some(&last) {
            out.push(last);
        }
        out
    };
    let mut patches = Vec::new();
    for &ay in &anchors(h) {
        for &ax in &anchors(w) {
            let mut data = Vec::with_capacity(3 * patch * patch);
            for c in 0..3 {
                for y in ay..ay + patch {
                    data.extend_from_slice(
                        &image.hr.data()[(c * h + y) * w + ax..(c * h + y) * w + ax + patch],
                    );
                }
            }
            patches.push(Tensor::new(vec![3, patch, patch], data).unwrap());
        }
    }
    patches
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileEntry {
    pub id: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantEntry {
    pub name: String,
    pub spec: DegradationSpec,
    pub files: Vec<FileEntry>,
}

/// Index of the pre-generated test variants. Every byte it points at is
/// a pure function of (dataset bytes, scale, master seed).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub scale: usize,
    pub master_seed: u64,
    pub variants: Vec<VariantEntry>,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes the 8 test-variant LR directories plus HR references under
/// `out_dir`, and returns the manifest. Noise fields come from the
/// per-image stream `noise/{id}`.
pub fn pregenerate_test_variants(
    dataset: &[ImageRecord],
    scale: usize,
    master_seed: u64,
    params: &TestParams,
    out_dir: &Path,
) -> Result<Manifest> {
    let hr_dir = out_dir.join("hr");
    std::fs::create_dir_all(&hr_dir).map_err(|e| Error::io(&hr_dir, e))?;
    for record in dataset {
        save_ppm(&record.hr, &hr_dir.join(format!("{}.ppm", record.id)))?;
    }

    let mut variants = Vec::new();
    for (name, spec) in test_variant_specs(scale, params) {
        let var_dir = out_dir.join(&name);
        std::fs::create_dir_all(&var_dir).map_err(|e| Error::io(&var_dir, e))?;
        let mut files = Vec::new();
        for record in dataset {
            let mut rng = derive_stream(master_seed, &format!("noise/{}", record.id));
            let lr = degrade(&record.hr, &spec, &mut rng)?;
            let bytes = encode_ppm(&lr)?;
            let rel = format!("{name}/{}.ppm", record.id);
            let path = out_dir.join(&rel);
            std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            files.push(FileEntry {
                id: record.id.clone(),
                path: rel,
                sha256: sha256_hex(&bytes),
            });
        }
        variants.push(VariantEntry { name, spec, files });
    }
    Ok(Manifest {
        scale,
        master_seed,
        variants,
    })
}
