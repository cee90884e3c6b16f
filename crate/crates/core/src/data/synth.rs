//! Procedural two-domain image benchmark.
//!
//! A class is a shape program (polygon side count, star depth, internal
//! stroke count, edge curvature). Source classes come from the straight-edged
//! half of the program grid, target classes from the curved half. Rendering
//! applies a domain style: the source domain uses smooth colour gradients on
//! low-frequency backgrounds, the target domain an inverted palette on
//! high-frequency textures with heavier noise.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::DatasetSplit;
use crate::error::{Error, Result};
use crate::gate::Domain;

const SIDES: [u32; 6] = [3, 4, 5, 6, 7, 8];
const STAR_DEPTHS: [f64; 2] = [0.0, 0.45];
const STROKES: [u32; 3] = [0, 1, 2];
const SOURCE_CURVATURE: f64 = 0.0;
const TARGET_CURVATURE: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainStyle {
    /// Background frequency band in cycles per image.
    pub background_freq: [f64; 2],
    pub background_amplitude: f64,
    pub noise_level: f64,
    pub invert_palette: bool,
}

impl DomainStyle {
    pub fn source_default() -> Self {
        Self {
            background_freq: [0.3, 1.2],
            background_amplitude: 0.15,
            noise_level: 0.03,
            invert_palette: false,
        }
    }

    pub fn target_default() -> Self {
        Self {
            background_freq: [5.0, 9.0],
            background_amplitude: 0.25,
            noise_level: 0.06,
            invert_palette: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub source_train_classes: usize,
    pub target_aux_classes: usize,
    pub target_test_classes: usize,
    pub source_test_classes: usize,
    pub source_train_per_class: usize,
    pub target_aux_per_class: usize,
    pub target_test_per_class: usize,
    pub source_test_per_class: usize,
    pub source_style: DomainStyle,
    pub target_style: DomainStyle,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            source_train_classes: 20,
            target_aux_classes: 10,
            target_test_classes: 10,
            source_test_classes: 10,
            source_train_per_class: 200,
            target_aux_per_class: 5,
            target_test_per_class: 50,
            source_test_per_class: 50,
            source_style: DomainStyle::source_default(),
            target_style: DomainStyle::target_default(),
            seed: 2022,
        }
    }
}

/// Parameters of one class's drawing program.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeProgram {
    pub sides: u32,
    pub star_depth: f64,
    pub strokes: u32,
    pub curvature: f64,
}

fn program_grid(curvature: f64) -> Vec<ShapeProgram> {
    let mut out = Vec::new();
    for &sides in &SIDES {
        for &star_depth in &STAR_DEPTHS {
            for &strokes in &STROKES {
                out.push(ShapeProgram {
                    sides,
                    star_depth,
                    strokes,
                    curvature,
                });
            }
        }
    }
    out
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::config(format!("image_size {} below 16", self.image_size)));
        }
        let counts = [
            ("source_train_classes", self.source_train_classes),
            ("target_aux_classes", self.target_aux_classes),
            ("target_test_classes", self.target_test_classes),
            ("source_test_classes", self.source_test_classes),
            ("source_train_per_class", self.source_train_per_class),
            ("target_aux_per_class", self.target_aux_per_class),
            ("target_test_per_class", self.target_test_per_class),
            ("source_test_per_class", self.source_test_per_class),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        let per_region = program_grid(0.0).len();
        if self.source_train_classes + self.source_test_classes > per_region {
            return Err(Error::config(format!(
                "source classes ({} + {}) exceed the {per_region} available shape programs",
                self.source_train_classes, self.source_test_classes
            )));
        }
        if self.target_aux_classes + self.target_test_classes > per_region {
            return Err(Error::config(format!(
                "target classes ({} + {}) exceed the {per_region} available shape programs",
                self.target_aux_classes, self.target_test_classes
            )));
        }
        for style in [&self.source_style, &self.target_style] {
            let [lo, hi] = style.background_freq;
            if !(lo >= 0.0 && hi >= lo) || style.noise_level < 0.0 || style.background_amplitude < 0.0 {
                return Err(Error::config("invalid domain style parameters"));
            }
        }
        Ok(())
    }
}

/// The four class-disjoint splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub spec: SyntheticSpec,
    pub source_train: DatasetSplit,
    pub target_aux: DatasetSplit,
    pub target_test: DatasetSplit,
    pub source_test: DatasetSplit,
    pub programs: Vec<ShapeProgram>,
}

impl Benchmark {
    pub fn splits(&self) -> [&DatasetSplit; 4] {
        [&self.source_train, &self.target_aux, &self.target_test, &self.source_test]
    }
}

struct Renderer<'a> {
    size: usize,
    style: &'a DomainStyle,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

impl Renderer<'_> {
    fn render<R: Rng>(&self, prog: &ShapeProgram, rng: &mut R) -> Vec<f32> {
        let n = self.size;
        let scale = n as f64 / 32.0;
        let cx = n as f64 / 2.0 + rng.random_range(-3.0..=3.0) * scale;
        let cy = n as f64 / 2.0 + rng.random_range(-3.0..=3.0) * scale;
        let radius = rng.random_range(9.0..12.5) * scale;
        let theta0 = rng.random_range(0.0..2.0 * PI);
        let sides = prog.sides as f64;
        let sector = 2.0 * PI / sides;

        let fg = hsv(rng.random::<f64>(), rng.random_range(0.55..0.9), rng.random_range(0.75..1.0));
        let fg2 = hsv(rng.random::<f64>(), rng.random_range(0.4..0.8), rng.random_range(0.6..0.95));
        let bg = hsv(rng.random::<f64>(), rng.random_range(0.1..0.4), rng.random_range(0.15..0.45));
        let bg2 = hsv(rng.random::<f64>(), rng.random_range(0.1..0.4), rng.random_range(0.15..0.45));
        let grad_dir = rng.random_range(0.0..2.0 * PI);
        let [flo, fhi] = self.style.background_freq;
        let freq = if fhi > flo { rng.random_range(flo..fhi) } else { flo };
        let wave_dir = rng.random_range(0.0..2.0 * PI);
        let wave_phase = rng.random_range(0.0..2.0 * PI);
        let stroke_width = 1.1 * scale;
        let noise = Normal::new(0.0, self.style.noise_level.max(1e-12)).expect("finite");

        let mut img = vec![0f32; 3 * n * n];
        for y in 0..n {
            for x in 0..n {
                let px = x as f64 + 0.5;
                let py = y as f64 + 0.5;
                let u = px / n as f64 - 0.5;
                let v = py / n as f64 - 0.5;
                // background: colour gradient plus a directional wave
                let t = (u * grad_dir.cos() + v * grad_dir.sin() + 0.71) / 1.42;
                let wave = (2.0 * PI * freq * (u * wave_dir.cos() + v * wave_dir.sin()) + wave_phase).sin();
                let mut col = [0.0; 3];
                for ch in 0..3 {
                    col[ch] = bg[ch] * (1.0 - t) + bg2[ch] * t + self.style.background_amplitude * wave;
                }

                let dx = px - cx;
                let dy = py - cy;
                let dist = (dx * dx + dy * dy).sqrt();
                let phi = dy.atan2(dx) - theta0;
                let local = phi.rem_euclid(sector) - sector / 2.0;
                let r_poly = radius * (PI / sides).cos() / local.cos();
                // 0 at vertices, 1 at edge midpoints
                let s = (1.0 + (sides * phi).cos()) / 2.0;
                let s = 1.0 - s;
                let r_edge = r_poly * (1.0 - prog.star_depth * s + prog.curvature * s);
                let mut cover = (r_edge - dist + 0.5).clamp(0.0, 1.0);
                if cover > 0.0 && prog.strokes > 0 {
                    for j in 0..prog.strokes {
                        let a = theta0 + j as f64 * PI / prog.strokes as f64 + PI / (2.0 * sides);
                        let line_dist = (dx * a.sin() - dy * a.cos()).abs();
                        let on = (stroke_width - line_dist + 0.5).clamp(0.0, 1.0);
                        cover *= 1.0 - on;
                    }
                }
                if cover > 0.0 {
                    let g = (dist / radius).min(1.0);
                    for ch in 0..3 {
                        let shade = fg[ch] * (1.0 - g) + fg2[ch] * g;
                        col[ch] = col[ch] * (1.0 - cover) + shade * cover;
                    }
                }
                for ch in 0..3 {
                    let mut val = col[ch];
                    if self.style.invert_palette {
                        val = 1.0 - val;
                    }
                    if self.style.noise_level > 0.0 {
                        val += noise.sample(rng);
                    }
                    img[(ch * n + y) * n + x] = val.clamp(0.0, 1.0) as f32;
                }
            }
        }
        img
    }
}

fn render_split<R: Rng>(
    name: &str,
    domain: Domain,
    class_ids: Vec<usize>,
    programs: &[ShapeProgram],
    per_class: usize,
    renderer: &Renderer<'_>,
    rng: &mut R,
) -> DatasetSplit {
    let n = renderer.size;
    let mut images = Vec::with_capacity(class_ids.len() * per_class * 3 * n * n);
    let mut labels = Vec::with_capacity(class_ids.len() * per_class);
    for &cid in &class_ids {
        for _ in 0..per_class {
            images.extend(renderer.render(&programs[cid], rng));
            labels.push(cid);
        }
    }
    DatasetSplit::new(name, domain, [3, n, n], class_ids, images, labels)
        .expect("generator produces consistent splits")
}

/// Renders all four splits. Deterministic in `spec`.
pub fn generate_benchmark(spec: &SyntheticSpec) -> Result<Benchmark> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut src_programs = program_grid(SOURCE_CURVATURE);
    let mut tgt_programs = program_grid(TARGET_CURVATURE);
    src_programs.shuffle(&mut rng);
    tgt_programs.shuffle(&mut rng);

    // Global ids: source train, target aux, target test, source test.
    let mut programs = Vec::new();
    programs.extend_from_slice(&src_programs[..spec.source_train_classes]);
    programs.extend_from_slice(&tgt_programs[..spec.target_aux_classes]);
    programs.extend_from_slice(
        &tgt_programs[spec.target_aux_classes..spec.target_aux_classes + spec.target_test_classes],
    );
    programs.extend_from_slice(
        &src_programs[spec.source_train_classes..spec.source_train_classes + spec.source_test_classes],
    );

    let mut next = 0;
    let mut ids = |count: usize| {
        let r: Vec<usize> = (next..next + count).collect();
        next += count;
        r
    };
    let st_ids = ids(spec.source_train_classes);
    let ta_ids = ids(spec.target_aux_classes);
    let tt_ids = ids(spec.target_test_classes);
    let ss_ids = ids(spec.source_test_classes);

    let src_r = Renderer {
        size: spec.image_size,
        style: &spec.source_style,
    };
    let tgt_r = Renderer {
        size: spec.image_size,
        style: &spec.target_style,
    };
    let source_train = render_split(
        "source_train",
        Domain::Source,
        st_ids,
        &programs,
        spec.source_train_per_class,
        &src_r,
        &mut rng,
    );
    let target_aux = render_split(
        "target_aux",
        Domain::Target,
        ta_ids,
        &programs,
        spec.target_aux_per_class,
        &tgt_r,
        &mut rng,
    );
    let target_test = render_split(
        "target_test",
        Domain::Target,
        tt_ids,
        &programs,
        spec.target_test_per_class,
        &tgt_r,
        &mut rng,
    );
    let source_test = render_split(
        "source_test",
        Domain::Source,
        ss_ids,
        &programs,
        spec.source_test_per_class,
        &src_r,
        &mut rng,
    );
    Ok(Benchmark {
        spec: spec.clone(),
        source_train,
        target_aux,
        target_test,
        source_test,
        programs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            source_train_per_class: 3,
            target_test_per_class: 3,
            source_test_per_class: 2,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn class_sets_pairwise_disjoint() {
        let b = generate_benchmark(&small()).unwrap();
        let sets: Vec<HashSet<usize>> = b
            .splits()
            .iter()
            .map(|s| s.class_ids.iter().copied().collect())
            .collect();
        for i in 0..4 {
            for j in i + 1..4 {
                assert!(sets[i].is_disjoint(&sets[j]));
            }
        }
        // Disjoint in program space too.
        let progs: HashSet<String> = b.programs.iter().map(|p| format!("{p:?}")).collect();
        assert_eq!(progs.len(), b.programs.len());
    }

    #[test]
    fn default_sizes() {
        let s = SyntheticSpec::default();
        assert_eq!((s.source_train_classes, s.source_train_per_class), (20, 200));
        assert_eq!((s.target_aux_classes, s.target_aux_per_class), (10, 5));
        assert_eq!((s.target_test_classes, s.target_test_per_class), (10, 50));
        let b = generate_benchmark(&small()).unwrap();
        assert_eq!(b.source_train.len(), 20 * 3);
        assert_eq!(b.target_aux.len(), 10 * 5);
        assert_eq!(b.target_test.class_ids.len(), 10);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_benchmark(&small()).unwrap();
        let b = generate_benchmark(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_benchmark(&SyntheticSpec { seed: 99, ..small() }).unwrap();
        assert_ne!(a.source_train.images, c.source_train.images);
    }

    #[test]
    fn pixels_in_unit_range() {
        let b = generate_benchmark(&small()).unwrap();
        for s in b.splits() {
            assert!(s.images.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn inconsistent_counts_rejected() {
        let bad = SyntheticSpec {
            target_aux_classes: 30,
            target_test_classes: 10,
            ..SyntheticSpec::default()
        };
        assert!(matches!(generate_benchmark(&bad), Err(Error::Config(_))));
        let zero = SyntheticSpec {
            target_aux_per_class: 0,
            ..SyntheticSpec::default()
        };
        assert!(matches!(zero.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn domains_differ_in_style() {
        let b = generate_benchmark(&small()).unwrap();
        // High-frequency target backgrounds have larger neighbouring-pixel differences.
        let roughness = |s: &DatasetSplit| {
            let img = s.image(0);
            let mut acc = 0.0;
            for i in 1..img.len() {
                acc += (img[i] - img[i - 1]).abs() as f64;
            }
            acc / img.len() as f64
        };
        let src: f64 = (0..5).map(|_| roughness(&b.source_train)).sum();
        let tgt: f64 = (0..5).map(|_| roughness(&b.target_aux)).sum();
        assert!(tgt > src);
    }
}
