//! Dataset directory: `manifest.json` plus one binary tensor file per sample.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, RegionSample};
use crate::error::{Result, SatError};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const SAMPLE_MAGIC: &[u8; 8] = b"SATIMG01";
const MANIFEST: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    num_regions: usize,
    class_counts: Vec<usize>,
    image_size: usize,
    num_samples: usize,
    seed: u64,
    samples: Vec<SampleRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    file: String,
    labels: Vec<u32>,
    latent_t: f64,
}

fn sample_file(i: usize) -> String {
    format!("sample_{i:06}.bin")
}

pub(crate) fn encode_tensor(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * t.shape().len() + 4 * t.numel());
    out.extend_from_slice(SAMPLE_MAGIC);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let bad = |msg: String| SatError::format(path, msg);
    if bytes.len() < 12 || &bytes[..8] != SAMPLE_MAGIC {
        return Err(bad("missing SATIMG01 magic".into()));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"));
    let ndim = u32_at(8) as usize;
    let header = 12 + 4 * ndim;
    if bytes.len() < header {
        return Err(bad("truncated shape header".into()));
    }
    let shape: Vec<usize> = (0..ndim).map(|i| u32_at(12 + 4 * i) as usize).collect();
    let n: usize = shape.iter().product();
    let expected = header + 4 * n;
    if bytes.len() != expected {
        return Err(bad(format!("expected {expected} bytes for shape {shape:?}, found {}", bytes.len())));
    }
    let data = bytes[header..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Tensor::new(shape, data).map_err(|e| bad(e.to_string()))
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| SatError::io(dir, e))?;
    let mut records = Vec::with_capacity(ds.len());
    for (i, s) in ds.samples.iter().enumerate() {
        let file = sample_file(i);
        let path = dir.join(&file);
        fs::write(&path, encode_tensor(&s.images)).map_err(|e| SatError::io(&path, e))?;
        records.push(SampleRecord { file, labels: s.labels.clone(), latent_t: s.latent_t });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        num_regions: ds.num_regions(),
        class_counts: ds.class_counts.clone(),
        image_size: ds.image_size,
        num_samples: ds.len(),
        seed: ds.seed,
        samples: records,
    };
    let path = dir.join(MANIFEST);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| SatError::io(&path, e))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| SatError::io(&mpath, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| SatError::format(&mpath, e.to_string()))?;
    if m.format_version != FORMAT_VERSION {
        return Err(SatError::format(
            &mpath,
            format!("format version {} is not supported (expected {FORMAT_VERSION})", m.format_version),
        ));
    }
    if m.class_counts.len() != m.num_regions {
        return Err(SatError::format(&mpath, "class_counts length differs from num_regions"));
    }
    if m.samples.len() != m.num_samples {
        return Err(SatError::format(
            &mpath,
            format!("manifest declares {} samples but lists {}", m.num_samples, m.samples.len()),
        ));
    }
    let on_disk = fs::read_dir(dir)
        .map_err(|e| SatError::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| {
            let name = e.file_name();
            let name = name.to_string_lossy();
            name.starts_with("sample_") && name.ends_with(".bin")
        })
        .count();
    if on_disk != m.num_samples {
        return Err(SatError::format(
            dir,
            format!("manifest declares {} samples but the directory holds {on_disk} sample files", m.num_samples),
        ));
    }
    let want = [m.num_regions, 1, m.image_size, m.image_size];
    let mut samples = Vec::with_capacity(m.num_samples);
    for (i, rec) in m.samples.into_iter().enumerate() {
        let path = dir.join(&rec.file);
        let bytes = fs::read(&path).map_err(|e| SatError::io(&path, e))?;
        let images = decode_tensor(&bytes, &path)
            .map_err(|e| SatError::format(&path, format!("sample {i} ({}): {e}", rec.file)))?;
        if images.shape() != want {
            return Err(SatError::format(
                &path,
                format!("sample {i} has shape {:?}, expected {want:?}", images.shape()),
            ));
        }
        if rec.labels.len() != m.num_regions
            || rec.labels.iter().zip(&m.class_counts).any(|(&y, &k)| y < 1 || y as usize > k)
        {
            return Err(SatError::format(&mpath, format!("sample {i} has invalid labels {:?}", rec.labels)));
        }
        samples.push(RegionSample { images, labels: rec.labels, latent_t: rec.latent_t });
    }
    Ok(Dataset { class_counts: m.class_counts, image_size: m.image_size, seed: m.seed, samples })
}
