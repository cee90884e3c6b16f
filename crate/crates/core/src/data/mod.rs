//! Two-domain image benchmark and the episodic sampler.

mod export;
mod synth;

pub use export::{export_benchmark, import_benchmark, MANIFEST_FILE};
pub use synth::{generate_benchmark, Benchmark, DomainStyle, ShapeProgram, SyntheticSpec};

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::gate::Domain;

/// Images of one split stored contiguously as `[n, c, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub name: String,
    pub domain: Domain,
    pub image_shape: [usize; 3],
    /// Declared class set, ascending.
    pub class_ids: Vec<usize>,
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    by_class: BTreeMap<usize, Vec<usize>>,
}

impl DatasetSplit {
    pub fn new(
        name: impl Into<String>,
        domain: Domain,
        image_shape: [usize; 3],
        mut class_ids: Vec<usize>,
        images: Vec<f32>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let name = name.into();
        let per = image_shape.iter().product::<usize>();
        if per == 0 || images.len() != per * labels.len() {
            return Err(Error::dim(format!(
                "split {name}: {} values for {} images of shape {image_shape:?}",
                images.len(),
                labels.len()
            )));
        }
        class_ids.sort_unstable();
        class_ids.dedup();
        let mut by_class: BTreeMap<usize, Vec<usize>> =
            class_ids.iter().map(|c| (*c, Vec::new())).collect();
        for (i, l) in labels.iter().enumerate() {
            match by_class.get_mut(l) {
                Some(v) => v.push(i),
                None => {
                    return Err(Error::Config(format!(
                        "split {name}: label {l} outside the declared class set"
                    )))
                }
            }
        }
        Ok(Self {
            name,
            domain,
            image_shape,
            class_ids,
            images,
            labels,
            by_class,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn class_indices(&self, class: usize) -> &[usize] {
        self.by_class.get(&class).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Position of a global class id within `class_ids`.
    pub fn class_position(&self, class: usize) -> Option<usize> {
        self.class_ids.binary_search(&class).ok()
    }

    /// Batch tensor `[idx.len(), c, h, w]` of the listed images.
    pub fn gather(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.image_len());
        for &i in idx {
            data.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.image_shape;
        Tensor::new([idx.len(), c, h, w], data).expect("non-empty gather")
    }

    pub fn min_images_per_class(&self) -> usize {
        self.by_class.values().map(Vec::len).min().unwrap_or(0)
    }
}

/// How query images are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryPolicy {
    /// Queries are distinct images not used in the support set.
    Disjoint,
    /// Queries are jittered copies of the class's support images.
    JitteredReuse,
}

impl QueryPolicy {
    /// Disjoint when the split has enough images, jittered reuse otherwise.
    pub fn auto(split: &DatasetSplit, k_shot: usize, m_query: usize) -> Self {
        if split.min_images_per_class() >= k_shot + m_query {
            Self::Disjoint
        } else {
            Self::JitteredReuse
        }
    }
}

/// An N-way K-shot task. Episode labels are positions in `classes`.
#[derive(Clone, Debug)]
pub struct Episode {
    pub domain: Domain,
    pub n_way: usize,
    pub k_shot: usize,
    pub classes: Vec<usize>,
    pub support: Tensor,
    pub support_labels: Vec<usize>,
    pub support_global: Vec<usize>,
    pub support_indices: Vec<usize>,
    pub query: Tensor,
    pub query_labels: Vec<usize>,
    pub query_global: Vec<usize>,
    /// Source image index of every query; repeats a support index under
    /// jittered reuse.
    pub query_indices: Vec<usize>,
}

impl Episode {
    /// Support and query images stacked, with global labels in the same order.
    pub fn all_images(&self) -> Result<(Tensor, Vec<usize>)> {
        let mut shape = self.support.shape().to_vec();
        shape[0] += self.query.shape()[0];
        let mut data = self.support.data().to_vec();
        data.extend_from_slice(self.query.data());
        let mut labels = self.support_global.clone();
        labels.extend_from_slice(&self.query_global);
        Ok((Tensor::new(shape, data)?, labels))
    }
}

/// N-way K-shot episode with M distinct query images per class.
pub fn sample_episode<R: Rng + ?Sized>(
    split: &DatasetSplit,
    n_way: usize,
    k_shot: usize,
    m_query: usize,
    rng: &mut R,
) -> Result<Episode> {
    sample_episode_with(split, n_way, k_shot, m_query, QueryPolicy::Disjoint, rng)
}

pub fn sample_episode_with<R: Rng + ?Sized>(
    split: &DatasetSplit,
    n_way: usize,
    k_shot: usize,
    m_query: usize,
    policy: QueryPolicy,
    rng: &mut R,
) -> Result<Episode> {
    let fail = |reason: String| Error::Sampling {
        split: split.name.clone(),
        reason,
    };
    if n_way == 0 || k_shot == 0 || m_query == 0 {
        return Err(fail(format!("N={n_way}, K={k_shot}, M={m_query} must all be positive")));
    }
    let need = match policy {
        QueryPolicy::Disjoint => k_shot + m_query,
        QueryPolicy::JitteredReuse => k_shot,
    };
    let eligible: Vec<usize> = split
        .class_ids
        .iter()
        .copied()
        .filter(|c| split.class_indices(*c).len() >= need)
        .collect();
    if eligible.len() < n_way {
        return Err(fail(format!(
            "{} classes have at least {need} images, {n_way} needed",
            eligible.len()
        )));
    }
    let picked = index::sample(rng, eligible.len(), n_way);
    let classes: Vec<usize> = picked.iter().map(|i| eligible[i]).collect();

    let mut support_indices = Vec::with_capacity(n_way * k_shot);
    let mut support_labels = Vec::with_capacity(n_way * k_shot);
    let mut query_indices = Vec::with_capacity(n_way * m_query);
    let mut query_labels = Vec::with_capacity(n_way * m_query);
    let mut query_data = Vec::with_capacity(n_way * m_query * split.image_len());
    for (label, &class) in classes.iter().enumerate() {
        let pool = split.class_indices(class);
        match policy {
            QueryPolicy::Disjoint => {
                let draw = index::sample(rng, pool.len(), k_shot + m_query).into_vec();
                for (j, &p) in draw.iter().enumerate() {
                    let idx = pool[p];
                    if j < k_shot {
                        support_indices.push(idx);
                        support_labels.push(label);
                    } else {
                        query_indices.push(idx);
                        query_labels.push(label);
                        query_data.extend_from_slice(split.image(idx));
                    }
                }
            }
            QueryPolicy::JitteredReuse => {
                let draw = index::sample(rng, pool.len(), k_shot).into_vec();
                let chosen: Vec<usize> = draw.iter().map(|p| pool[*p]).collect();
                for &idx in &chosen {
                    support_indices.push(idx);
                    support_labels.push(label);
                }
                for _ in 0..m_query {
                    let idx = chosen[rng.random_range(0..chosen.len())];
                    query_indices.push(idx);
                    query_labels.push(label);
                    query_data.extend(jitter(split.image(idx), split.image_shape, rng));
                }
            }
        }
    }
    let [c, h, w] = split.image_shape;
    let support = split.gather(&support_indices);
    let query = Tensor::new([query_indices.len(), c, h, w], query_data)?;
    let support_global = support_labels.iter().map(|l| classes[*l]).collect();
    let query_global = query_labels.iter().map(|l| classes[*l]).collect();
    Ok(Episode {
        domain: split.domain,
        n_way,
        k_shot,
        classes,
        support,
        support_labels,
        support_global,
        support_indices,
        query,
        query_labels,
        query_global,
        query_indices,
    })
}

pub const JITTER_MAX_DEGREES: f64 = 10.0;
pub const JITTER_MAX_SHIFT: f64 = 2.0;

/// Random rotation within ±10° and translation within ±2 px, bilinear
/// resampling with edge clamping.
pub fn jitter<R: Rng + ?Sized>(image: &[f32], shape: [usize; 3], rng: &mut R) -> Vec<f32> {
    let angle = rng.random_range(-JITTER_MAX_DEGREES..=JITTER_MAX_DEGREES).to_radians();
    let tx = rng.random_range(-JITTER_MAX_SHIFT..=JITTER_MAX_SHIFT);
    let ty = rng.random_range(-JITTER_MAX_SHIFT..=JITTER_MAX_SHIFT);
    warp(image, shape, angle, tx, ty)
}

/// Rotates by `angle` about the image centre, then shifts by `(tx, ty)`.
pub fn warp(image: &[f32], shape: [usize; 3], angle: f64, tx: f64, ty: f64) -> Vec<f32> {
    let [c, h, w] = shape;
    let (s, co) = angle.sin_cos();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let mut out = vec![0f32; image.len()];
    for y in 0..h {
        for x in 0..w {
            // inverse map from output to input coordinates
            let ox = x as f64 - tx - cx;
            let oy = y as f64 - ty - cy;
            let sx = (co * ox + s * oy + cx).clamp(0.0, (w - 1) as f64);
            let sy = (-s * ox + co * oy + cy).clamp(0.0, (h - 1) as f64);
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = (sx - x0 as f64) as f32;
            let fy = (sy - y0 as f64) as f32;
            for ch in 0..c {
                let p = |yy: usize, xx: usize| image[(ch * h + yy) * w + xx];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out[(ch * h + y) * w + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}
