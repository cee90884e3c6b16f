//! Benchmark export as a directory of raw little-endian f32 files plus a
//! JSON manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Benchmark, DatasetSplit, ShapeProgram, SyntheticSpec};
use crate::error::{Error, Result};
use crate::gate::Domain;

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT: &str = "med2n-benchmark";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitEntry {
    name: String,
    domain: Domain,
    image_shape: [usize; 3],
    class_ids: Vec<usize>,
    labels: Vec<usize>,
    file: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    spec: SyntheticSpec,
    programs: Vec<ShapeProgram>,
    splits: Vec<SplitEntry>,
}

fn write_split(dir: &Path, split: &DatasetSplit) -> Result<SplitEntry> {
    let file = format!("{}.f32", split.name);
    let mut bytes = Vec::with_capacity(split.images.len() * 4);
    for v in &split.images {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let path = dir.join(&file);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(SplitEntry {
        name: split.name.clone(),
        domain: split.domain,
        image_shape: split.image_shape,
        class_ids: split.class_ids.clone(),
        labels: split.labels.clone(),
        file,
    })
}

pub fn export_benchmark(bench: &Benchmark, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let splits = bench
        .splits()
        .iter()
        .map(|s| write_split(dir, s))
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        spec: bench.spec.clone(),
        programs: bench.programs.clone(),
        splits,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn read_split(dir: &Path, entry: SplitEntry) -> Result<DatasetSplit> {
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Checkpoint {
            path,
            reason: "length is not a multiple of 4".into(),
        });
    }
    let images = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    DatasetSplit::new(entry.name, entry.domain, entry.image_shape, entry.class_ids, images, entry.labels)
}

pub fn import_benchmark(dir: &Path) -> Result<Benchmark> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Checkpoint {
            path,
            reason: format!("unsupported format {} v{}", manifest.format, manifest.version),
        });
    }
    let mut splits = manifest
        .splits
        .into_iter()
        .map(|e| read_split(dir, e))
        .collect::<Result<Vec<_>>>()?;
    let mut take = |name: &str| {
        splits
            .iter()
            .position(|s| s.name == name)
            .map(|i| splits.swap_remove(i))
            .ok_or_else(|| Error::Checkpoint {
                path: dir.join(MANIFEST_FILE),
                reason: format!("split {name} missing"),
            })
    };
    Ok(Benchmark {
        source_train: take("source_train")?,
        target_aux: take("target_aux")?,
        target_test: take("target_test")?,
        source_test: take("source_test")?,
        spec: manifest.spec,
        programs: manifest.programs,
    })
}
