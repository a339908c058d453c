//! Dataset directories: `dataset.json` (generator config and checksums),
//! `manifest.jsonl` (one record per line) and, unless images are regenerated
//! inline from their seeds, `images/NNNNNN.img` in the raw image format.

use std::env;
use std::fs;
use std::path::Path;

use irk_core::synth::{from_jsonl, to_jsonl, Dataset, SampleRecord, SynthConfig};
use irk_core::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{format_err, io_err, json_err, IrkError, Result};
use crate::imageio;

pub const INFO_FILE: &str = "dataset.json";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const IMAGE_DIR: &str = "images";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetInfo {
    pub config: SynthConfig,
    /// Images are rendered from record seeds on load instead of read from disk.
    pub inline: bool,
    pub records: usize,
    pub manifest_sha256: String,
    /// Over the encoded images in record order, whether or not they are
    /// stored.
    pub images_sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Worker count: 1 in deterministic mode, otherwise the available cores
/// capped by `IRK_THREADS`.
pub fn thread_count(deterministic: bool) -> Result<usize> {
    if deterministic {
        return Ok(1);
    }
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    match env::var("IRK_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n.min(cores)),
            _ => Err(IrkError::Config(format!("IRK_THREADS must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(cores),
    }
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| IrkError::Config(format!("thread pool: {e}")))
}

/// Renders every record on `threads` workers. Each record has its own seed,
/// so the result does not depend on the thread count.
pub fn render_parallel(ds: &Dataset, threads: usize) -> Result<Vec<Tensor<f32>>> {
    pool(threads)?.install(|| {
        ds.records
            .par_iter()
            .map(|r| ds.render(r).map_err(IrkError::from))
            .collect()
    })
}

fn image_name(index: usize) -> String {
    format!("{IMAGE_DIR}/{index:06}.img")
}

/// Writes `ds` to `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, ds: &Dataset, inline: bool, threads: usize) -> Result<DatasetInfo> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let images = render_parallel(ds, threads)?;
    let mut records = ds.records.clone();
    let mut hasher = Sha256::new();
    if !inline {
        let img_dir = dir.join(IMAGE_DIR);
        fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
    }
    for (r, img) in records.iter_mut().zip(&images) {
        let bytes = imageio::encode(img);
        hasher.update(&bytes);
        if inline {
            r.path = None;
        } else {
            let rel = image_name(r.index);
            let p = dir.join(&rel);
            fs::write(&p, &bytes).map_err(io_err(&p))?;
            r.path = Some(rel);
        }
    }
    let manifest = to_jsonl(&records)?;
    let info = DatasetInfo {
        config: ds.config.clone(),
        inline,
        records: records.len(),
        manifest_sha256: hex(&Sha256::digest(manifest.as_bytes())),
        images_sha256: hex(&hasher.finalize()),
    };
    let mp = dir.join(MANIFEST_FILE);
    fs::write(&mp, manifest).map_err(io_err(&mp))?;
    let ip = dir.join(INFO_FILE);
    let text = serde_json::to_string_pretty(&info).map_err(json_err(&ip))?;
    fs::write(&ip, text + "\n").map_err(io_err(&ip))?;
    Ok(info)
}

/// Loads records and images. Records with a `path` are read from disk
/// (relative to `dir`); the rest are rendered from their seeds.
pub fn load_dataset(dir: &Path, threads: usize) -> Result<(Dataset, Vec<Tensor<f32>>)> {
    let ip = dir.join(INFO_FILE);
    let text = fs::read_to_string(&ip).map_err(io_err(&ip))?;
    let info: DatasetInfo = serde_json::from_str(&text).map_err(json_err(&ip))?;
    let mp = dir.join(MANIFEST_FILE);
    let manifest = fs::read_to_string(&mp).map_err(io_err(&mp))?;
    if hex(&Sha256::digest(manifest.as_bytes())) != info.manifest_sha256 {
        return Err(format_err(&mp, "checksum does not match dataset.json"));
    }
    let records = from_jsonl(&manifest)?;
    if let Some((pos, r)) = records.iter().enumerate().find(|(i, r)| r.index != *i) {
        return Err(format_err(&mp, format!("line {} carries index {}", pos + 1, r.index)));
    }
    let ds = Dataset::from_records(info.config, records)?;
    let shape = [3, ds.config.image_height, ds.config.image_width];
    let images: Vec<Tensor<f32>> = pool(threads)?.install(|| {
        ds.records
            .par_iter()
            .map(|r: &SampleRecord| -> Result<Tensor<f32>> {
                match &r.path {
                    Some(rel) => {
                        let p = dir.join(rel);
                        let img = imageio::read(&p)?;
                        if img.shape() != shape {
                            return Err(format_err(&p, format!("shape {:?}, expected {shape:?}", img.shape())));
                        }
                        Ok(img)
                    }
                    None => Ok(ds.render(r)?),
                }
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok((ds, images))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        Dataset::generate(SynthConfig {
            train_identities: 3,
            test_identities: 2,
            samples_per_identity: 4,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn stored_and_inline_directories_load_the_same_pixels() {
        let ds = small();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ia = write_dataset(a.path(), &ds, false, 2).unwrap();
        let ib = write_dataset(b.path(), &ds, true, 1).unwrap();
        assert_eq!(ia.images_sha256, ib.images_sha256);
        assert_ne!(ia.manifest_sha256, ib.manifest_sha256);
        let (da, xa) = load_dataset(a.path(), 1).unwrap();
        let (_, xb) = load_dataset(b.path(), 2).unwrap();
        assert_eq!(xa, xb);
        assert_eq!(xa, render_parallel(&ds, 1).unwrap());
        assert!(da.records.iter().all(|r| r.path.is_some()));
    }

    #[test]
    fn edited_manifest_is_detected() {
        let ds = small();
        let d = tempfile::tempdir().unwrap();
        write_dataset(d.path(), &ds, true, 1).unwrap();
        let mp = d.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&mp).unwrap().replacen("\"camera\":0", "\"camera\":1", 1);
        fs::write(&mp, text).unwrap();
        let e = load_dataset(d.path(), 1).unwrap_err().to_string();
        assert!(e.contains("checksum"), "{e}");
    }
}
