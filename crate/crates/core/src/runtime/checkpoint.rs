//! Binary checkpoint container: an 8-byte magic, a little-endian u64 manifest
//! length, a JSON manifest, then every tensor as raw little-endian f32.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, Tensor};
use crate::backbone::{EmbeddingNet, LinearHead};
use crate::error::{Error, Result};
use crate::gate::GateMatrix;
use crate::heads::FslHead;
use crate::trainer::{GlobalHead, ModelBundle, Role};

pub const MAGIC: [u8; 8] = *b"MED2NCKP";
pub const FORMAT_VERSION: u32 = 1;

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal, since the word position needs 68 bits.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |what: &str| Error::config(format!("invalid rng state: {what}"));
        let bytes = hex::decode(&self.seed).map_err(|_| bad("seed is not hex"))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("seed is not 32 bytes"))?;
        let pos: u128 = self.word_pos.parse().map_err(|_| bad("word position"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    role: Role,
    fingerprint: String,
    rng: Option<RngState>,
    frozen: bool,
    channels: Vec<usize>,
    decompose_depth: usize,
    input_shape: [usize; 3],
    f_src_classes: Option<Vec<usize>>,
    f_tgt_classes: Option<Vec<usize>>,
    has_gates: bool,
    adam_step: u64,
    tensors: Vec<TensorEntry>,
}

/// A loaded checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub bundle: ModelBundle,
    pub fingerprint: String,
    pub rng: Option<RngState>,
}

fn named_tensors(b: &ModelBundle) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    for (i, blk) in b.net.blocks.iter().enumerate() {
        out.push((format!("block{i}.weight"), &blk.weight));
        out.push((format!("block{i}.gamma"), &blk.gamma));
        out.push((format!("block{i}.beta"), &blk.beta));
    }
    out.push(("fsl.log_temperature".into(), &b.head.log_temperature));
    for (tag, h) in [("f_src", &b.f_src), ("f_tgt", &b.f_tgt)] {
        if let Some(h) = h {
            out.push((format!("{tag}.weight"), &h.linear.weight));
            out.push((format!("{tag}.bias"), &h.linear.bias));
        }
    }
    if let Some(g) = &b.gates {
        out.push(("gates.logits".into(), &g.logits));
    }
    for (i, blk) in b.net.blocks.iter().enumerate() {
        out.push((format!("block{i}.running_mean"), &blk.running_mean));
        out.push((format!("block{i}.running_var"), &blk.running_var));
    }
    out
}

/// Serializes a bundle with its provenance fingerprint and optional RNG
/// position.
pub fn encode(bundle: &ModelBundle, fingerprint: &str, rng: Option<RngState>) -> Result<Vec<u8>> {
    bundle.validate()?;
    let named = named_tensors(bundle);
    let mut tensors: Vec<TensorEntry> = named
        .iter()
        .map(|(n, t)| TensorEntry {
            name: n.clone(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let params = bundle.params();
    for (prefix, moments) in [("adam.m", &bundle.adam.m), ("adam.v", &bundle.adam.v)] {
        for (i, m) in moments.iter().enumerate() {
            tensors.push(TensorEntry {
                name: format!("{prefix}.{i}"),
                shape: params[i].shape().to_vec(),
            });
            debug_assert_eq!(m.len(), params[i].numel());
        }
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        role: bundle.role,
        fingerprint: fingerprint.to_string(),
        rng,
        frozen: bundle.frozen,
        channels: bundle.net.channels(),
        decompose_depth: bundle.net.decompose_depth(),
        input_shape: bundle.net.input_shape,
        f_src_classes: bundle.f_src.as_ref().map(|h| h.class_ids.clone()),
        f_tgt_classes: bundle.f_tgt.as_ref().map(|h| h.class_ids.clone()),
        has_gates: bundle.gates.is_some(),
        adam_step: bundle.adam.step,
        tensors,
    };
    let text = serde_json::to_vec_pretty(&manifest)?;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    let blobs = named
        .iter()
        .map(|(_, t)| t.data())
        .chain(bundle.adam.m.iter().map(Vec::as_slice))
        .chain(bundle.adam.v.iter().map(Vec::as_slice));
    for blob in blobs {
        for v in blob {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Rebuilds a bundle from [`encode`] output.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let fail = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 16 || bytes[..8] != MAGIC {
        return Err(fail("not a checkpoint file (bad magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16usize.saturating_add(len))
        .ok_or_else(|| fail("truncated manifest".into()))?;
    let probe: serde_json::Value = serde_json::from_slice(body)?;
    let version = probe.get("version").and_then(|v| v.as_u64());
    if version != Some(FORMAT_VERSION as u64) {
        return Err(fail(format!(
            "format version {version:?} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let m: Manifest = serde_json::from_value(probe)?;

    let mut scratch = ChaCha8Rng::seed_from_u64(0);
    let net = EmbeddingNet::build(&m.channels, m.decompose_depth, m.input_shape, &mut scratch)?;
    let d = net.feature_dim();
    let head_for = |classes: &Option<Vec<usize>>| {
        classes.as_ref().map(|c| GlobalHead {
            class_ids: c.clone(),
            linear: LinearHead::zeros(d, c.len()),
        })
    };
    let gates = m.has_gates.then(|| GateMatrix::init(&net, &mut scratch));
    let mut bundle = ModelBundle {
        role: m.role,
        f_src: head_for(&m.f_src_classes),
        f_tgt: head_for(&m.f_tgt_classes),
        net,
        head: FslHead::default(),
        gates,
        adam: AdamState {
            step: m.adam_step,
            m: Vec::new(),
            v: Vec::new(),
        },
        frozen: m.frozen,
    };
    bundle.reset_optimizer();
    bundle.adam.step = m.adam_step;

    let expected: Vec<(String, Vec<usize>)> = named_tensors(&bundle)
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let n_params = bundle.params().len();
    if m.tensors.len() != expected.len() + 2 * n_params {
        return Err(fail(format!(
            "manifest lists {} tensors, layout needs {}",
            m.tensors.len(),
            expected.len() + 2 * n_params
        )));
    }
    for (entry, (name, shape)) in m.tensors.iter().zip(&expected) {
        if &entry.name != name || &entry.shape != shape {
            return Err(fail(format!(
                "tensor {} {:?} does not match expected {name} {shape:?}",
                entry.name, entry.shape
            )));
        }
    }

    let mut cursor = 16 + len;
    let mut take = |count: usize| -> Result<Vec<f32>> {
        let end = cursor + 4 * count;
        let raw = bytes.get(cursor..end).ok_or_else(|| fail("truncated tensor data".into()))?;
        cursor = end;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    };
    for t in bundle.params_mut() {
        let n = t.numel();
        t.data_mut().copy_from_slice(&take(n)?);
    }
    for t in bundle.buffers_mut() {
        let n = t.numel();
        t.data_mut().copy_from_slice(&take(n)?);
    }
    for i in 0..n_params {
        let n = bundle.adam.m[i].len();
        bundle.adam.m[i] = take(n)?;
    }
    for i in 0..n_params {
        let n = bundle.adam.v[i].len();
        bundle.adam.v[i] = take(n)?;
    }
    if cursor != bytes.len() {
        return Err(fail(format!("{} trailing bytes", bytes.len() - cursor)));
    }
    bundle.validate()?;
    Ok(Checkpoint {
        bundle,
        fingerprint: m.fingerprint,
        rng: m.rng,
    })
}

/// Writes `bytes` to a sibling temporary file, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = PathBuf::from(path);
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    tmp.set_file_name(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(path: &Path, bundle: &ModelBundle, fingerprint: &str, rng: Option<RngState>) -> Result<()> {
    write_atomic(path, &encode(bundle, fingerprint, rng)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
