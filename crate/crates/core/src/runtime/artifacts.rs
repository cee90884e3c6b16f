//! Gate statistics documents and activation-map export.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::gate::{BlockCounts, Domain};
use crate::trainer::ModelBundle;

pub const GATE_STATS_SCHEMA: &str = "med2n.gate_stats/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateStatsDoc {
    pub schema: String,
    pub fingerprint: String,
    pub decompose_depth: usize,
    pub blocks: Vec<BlockCounts>,
}

pub fn gate_stats_doc(model: &ModelBundle, fingerprint: &str) -> Result<GateStatsDoc> {
    let gates = model
        .gates
        .as_ref()
        .ok_or_else(|| Error::config(format!("{} checkpoint has no gate matrix", model.role)))?;
    Ok(GateStatsDoc {
        schema: GATE_STATS_SCHEMA.into(),
        fingerprint: fingerprint.into(),
        decompose_depth: model.net.decompose_depth(),
        // Report blocks one-based, as in the usual "block3 / block4" naming.
        blocks: gates
            .statistics()
            .into_iter()
            .map(|c| BlockCounts { block: c.block + 1, ..c })
            .collect(),
    })
}

/// Tab-separated table, one row per gated block.
pub fn gate_stats_table(doc: &GateStatsDoc) -> String {
    let mut s = String::from("block\tsource\ttarget\ttotal\n");
    for b in &doc.blocks {
        let _ = writeln!(s, "block{}\t{}\t{}\t{}", b.block, b.source_count, b.target_count, b.total);
    }
    s
}

fn require_uint(obj: &serde_json::Map<String, Value>, key: &str, ctx: &str) -> Result<u64> {
    obj.get(key)
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Contract(format!("{ctx}: '{key}' must be a non-negative integer")))
}

/// Structural check of a gate statistics document: required fields with the
/// right types, no extra fields, one row per gated block, and counts that
/// partition each block.
pub fn validate_gate_stats(doc: &Value) -> Result<()> {
    let obj = doc
        .as_object()
        .ok_or_else(|| Error::Contract("gate stats: document must be an object".into()))?;
    let allowed = ["schema", "fingerprint", "decompose_depth", "blocks"];
    if let Some(k) = obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(Error::Contract(format!("gate stats: unexpected field '{k}'")));
    }
    if obj.get("schema").and_then(Value::as_str) != Some(GATE_STATS_SCHEMA) {
        return Err(Error::Contract(format!("gate stats: schema must be '{GATE_STATS_SCHEMA}'")));
    }
    if obj.get("fingerprint").and_then(Value::as_str).is_none() {
        return Err(Error::Contract("gate stats: 'fingerprint' must be a string".into()));
    }
    let depth = require_uint(obj, "decompose_depth", "gate stats")?;
    let blocks = obj
        .get("blocks")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Contract("gate stats: 'blocks' must be an array".into()))?;
    if blocks.len() as u64 != depth {
        return Err(Error::Contract(format!(
            "gate stats: {} block rows for decompose_depth {depth}",
            blocks.len()
        )));
    }
    for (i, b) in blocks.iter().enumerate() {
        let ctx = format!("gate stats block row {i}");
        let row = b
            .as_object()
            .ok_or_else(|| Error::Contract(format!("{ctx}: must be an object")))?;
        let keys = ["block", "total", "source_count", "target_count"];
        if row.len() != keys.len() {
            return Err(Error::Contract(format!("{ctx}: expected exactly {keys:?}")));
        }
        let v: Vec<u64> = keys
            .iter()
            .map(|k| require_uint(row, k, &ctx))
            .collect::<Result<_>>()?;
        if v[2] + v[3] != v[1] || v[1] == 0 {
            return Err(Error::Contract(format!(
                "{ctx}: counts {} + {} do not partition total {}",
                v[2], v[3], v[1]
            )));
        }
    }
    Ok(())
}

/// One exported feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMap {
    pub domain: Domain,
    pub block: usize,
    pub filter: usize,
    pub mean_activation: f64,
    pub height: usize,
    pub width: usize,
    /// Row-major, min-max normalized to [0, 1].
    pub values: Vec<f32>,
}

/// Min-max normalization; a constant map becomes all zeros.
pub fn normalize_unit(values: &[f32]) -> Vec<f32> {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect()
}

/// For each requested domain, the post-activation map of the filter with
/// the highest mean activation among that domain's filters in the last
/// gated block, computed on the ungated path.
pub fn activation_maps(model: &ModelBundle, image: &Tensor, domains: &[Domain]) -> Result<Vec<ActivationMap>> {
    let gates = model
        .gates
        .as_ref()
        .ok_or_else(|| Error::config(format!("{} checkpoint has no gate matrix", model.role)))?;
    let last = gates.blocks.len() - 1;
    let block = gates.blocks[last].block;
    let [c, h, w] = model.net.input_shape;
    if image.numel() != c * h * w {
        return Err(Error::dim(format!(
            "activation input has {} values, expected {c}x{h}x{w}",
            image.numel()
        )));
    }
    let x = image.clone().reshape([1, c, h, w])?;
    let mut tape = Tape::new();
    let vars = model.net.bind(&mut tape, false);
    let xv = tape.constant(x);
    let (_, acts) = model.net.forward_eval_traced(&mut tape, &vars, xv, None)?;
    let act = tape.value(acts[block]);
    let (filters, ah, aw) = (act.shape()[1], act.shape()[2], act.shape()[3]);
    let plane = ah * aw;

    let mut out = Vec::new();
    for &domain in domains {
        let mask = &gates.infer_masks(domain).blocks[last];
        let best = (0..filters)
            .filter(|f| mask.data()[*f] == 1.0)
            .map(|f| {
                let m = act.data()[f * plane..(f + 1) * plane].iter().map(|v| *v as f64).sum::<f64>() / plane as f64;
                (f, m)
            })
            .fold(None::<(usize, f64)>, |acc, (f, m)| match acc {
                Some((_, bm)) if bm >= m => acc,
                _ => Some((f, m)),
            });
        let (filter, mean) = best.ok_or_else(|| {
            Error::config(format!(
                "no filter of block{} is assigned to the {} domain",
                block + 1,
                domain.name()
            ))
        })?;
        out.push(ActivationMap {
            domain,
            block: block + 1,
            filter,
            mean_activation: mean,
            height: ah,
            width: aw,
            values: normalize_unit(&act.data()[filter * plane..(filter + 1) * plane]),
        });
    }
    Ok(out)
}

/// Binary greyscale PGM of a [0, 1] map, each cell enlarged to
/// `scale x scale` pixels.
pub fn to_pgm(values: &[f32], height: usize, width: usize, scale: usize) -> Vec<u8> {
    let scale = scale.max(1);
    let (oh, ow) = (height * scale, width * scale);
    let mut out = format!("P5\n{ow} {oh}\n255\n").into_bytes();
    for y in 0..oh {
        for x in 0..ow {
            let v = values[(y / scale) * width + x / scale];
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// Binary colour PPM of a `[3, h, w]` image with values in [0, 1].
pub fn to_ppm(image: &[f32], height: usize, width: usize) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    let plane = height * width;
    for i in 0..plane {
        for ch in 0..3 {
            out.push((image[ch * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// Reads a binary PPM (P6, maxval 255) into `[3, h, w]` values in [0, 1].
pub fn read_ppm(bytes: &[u8]) -> Result<(Vec<f32>, usize, usize)> {
    let bad = |m: &str| Error::config(format!("unsupported image: {m}"));
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    i += 1;
    if fields[0] != "P6" {
        return Err(bad("only binary PPM (P6) is supported"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(bad("maxval must be 255"));
    }
    let body = bytes.get(i..i + 3 * w * h).ok_or_else(|| bad("truncated pixel data"))?;
    let plane = w * h;
    let mut out = vec![0f32; 3 * plane];
    for (p, px) in body.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            out[ch * plane + p] = px[ch] as f32 / 255.0;
        }
    }
    Ok((out, h, w))
}

/// Comma-separated grid, one row per line.
pub fn to_csv(values: &[f32], width: usize) -> String {
    let mut s = String::new();
    for row in values.chunks(width) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn schema_accepts_valid_and_rejects_broken() {
        let good = json!({"schema": GATE_STATS_SCHEMA, "fingerprint": "ab", "decompose_depth": 2,
            "blocks": [{"block": 3, "total": 64, "source_count": 30, "target_count": 34},
                       {"block": 4, "total": 128, "source_count": 50, "target_count": 78}]});
        validate_gate_stats(&good).unwrap();
        let mut bad = good.clone();
        bad["blocks"][0]["source_count"] = json!(31);
        assert!(validate_gate_stats(&bad).is_err());
        let mut extra = good.clone();
        extra["note"] = json!("x");
        assert!(validate_gate_stats(&extra).is_err());
        let mut short = good.clone();
        short["decompose_depth"] = json!(3);
        assert!(validate_gate_stats(&short).is_err());
    }

    #[test]
    fn normalization_is_unit_range() {
        let v = normalize_unit(&[2.0, 4.0, 3.0]);
        assert_eq!(v, vec![0.0, 1.0, 0.5]);
        assert_eq!(normalize_unit(&[1.0, 1.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn ppm_round_trip() {
        let img: Vec<f32> = (0..3 * 2 * 3).map(|i| (i * 13 % 256) as f32 / 255.0).collect();
        let bytes = to_ppm(&img, 2, 3);
        let (back, h, w) = read_ppm(&bytes).unwrap();
        assert_eq!((h, w), (2, 3));
        for (a, b) in img.iter().zip(&back) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn pgm_has_scaled_extent() {
        let p = to_pgm(&[0.0, 1.0, 0.5, 0.25], 2, 2, 3);
        let header = b"P5\n6 6\n255\n";
        assert_eq!(&p[..header.len()], header);
        assert_eq!(p.len(), header.len() + 36);
    }
}
