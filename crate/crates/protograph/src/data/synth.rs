//! Synthetic grayscale dataset with a controllable per-angle feature
//! deviation.
//!
//! Each class is a fixed constellation of bright Gaussian blobs. All
//! classes under a given angle id receive the same deformation: a rigid
//! sub-pixel shift plus a global intensity gradient, both scaled by the
//! deviation strength δ and by the angle index. Per-sample jitter moves
//! blob centers slightly and multiplies the image by speckle-like noise.
//! With δ = 0 the angle id has no effect on the distribution at all.

use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::DataError;
use crate::seed;

use super::{pgm, save_manifest, Dataset, Record, Split, TEST_POSITIONS_5WAY};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_classes: usize,
    /// Samples generated per (class, angle) pair.
    pub samples_per_class_angle: usize,
    pub side: usize,
    pub angles: Vec<u32>,
    /// Deviation strength δ ≥ 0; 0 disables all angle effects.
    pub deviation: f64,
    /// Multiplicative speckle amplitude.
    pub noise: f64,
    /// Bright blobs per class template.
    pub blobs: usize,
    /// Probability that a sample is an edge case: strongly faded blobs and
    /// extra position jitter, independent of class and angle. Models the
    /// poor-single-sample contingency that prototype anchors compensate
    /// for; 0 disables.
    pub outlier_rate: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_classes: 10,
            samples_per_class_angle: 40,
            side: 32,
            angles: vec![0, 1],
            deviation: 1.0,
            noise: 0.06,
            blobs: 6,
            outlier_rate: 0.0,
            seed: 0,
        }
    }
}

/// Rigid shift direction (pixels per unit of δ·angle).
const SHIFT_PX: (f64, f64) = (1.7, -0.9);
/// Intensity gradient direction and strength per unit of δ·angle.
const GRADIENT_DIR: (f64, f64) = (1.0, -0.6);
const GRADIENT_GAIN: f64 = 0.25;
/// Blob center jitter, as a fraction of the side length.
const JITTER_FRAC: f64 = 0.02;

struct Blob {
    x: f64,
    y: f64,
    sigma: f64,
    amp: f64,
}

fn class_template(spec: &SynthSpec, class: usize) -> Vec<Blob> {
    let s = seed::derive(seed::derive(spec.seed, seed::STREAM_DATA), class as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let side = spec.side as f64;
    (0..spec.blobs)
        .map(|_| Blob {
            x: rng.random_range(0.25 * side..0.75 * side),
            y: rng.random_range(0.25 * side..0.75 * side),
            sigma: rng.random_range(0.05 * side..0.11 * side),
            amp: rng.random_range(0.55..0.95),
        })
        .collect()
}

/// Standard normal via Box-Muller.
fn randn(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Render one quantized sample. Returns 8-bit pixels.
fn render_sample(
    spec: &SynthSpec,
    template: &[Blob],
    angle_index: usize,
    sample_seed: u64,
) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let side = spec.side;
    let sf = side as f64;
    let strength = spec.deviation * angle_index as f64;
    let (dx, dy) = (strength * SHIFT_PX.0, strength * SHIFT_PX.1);
    let outlier = rng.random_range(0.0..1.0) < spec.outlier_rate;
    let jitter = JITTER_FRAC * sf * if outlier { 3.0 } else { 1.0 };

    let blobs: Vec<Blob> = template
        .iter()
        .map(|b| {
            let fade = if outlier { rng.random_range(0.05..0.5) } else { 1.0 };
            Blob {
                x: b.x + dx + jitter * randn(&mut rng),
                y: b.y + dy + jitter * randn(&mut rng),
                sigma: b.sigma,
                amp: b.amp * fade * (1.0 + 0.10 * randn(&mut rng)),
            }
        })
        .collect();

    let center = (sf - 1.0) / 2.0;
    let mut out = Vec::with_capacity(side * side);
    for yi in 0..side {
        for xi in 0..side {
            let (x, y) = (xi as f64, yi as f64);
            let mut v = 0.0;
            for b in &blobs {
                let d2 = (x - b.x).powi(2) + (y - b.y).powi(2);
                v += b.amp * (-d2 / (2.0 * b.sigma * b.sigma)).exp();
            }
            let grad = 1.0
                + strength
                    * GRADIENT_GAIN
                    * ((x - center) / sf * GRADIENT_DIR.0 + (y - center) / sf * GRADIENT_DIR.1);
            v *= grad.max(0.05);
            let n = randn(&mut rng).clamp(-2.5, 2.5);
            v *= 1.0 + spec.noise * n;
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

fn sample_seed(spec: &SynthSpec, class: usize, angle_index: usize, sample: usize) -> u64 {
    let s = seed::derive(seed::derive(spec.seed, seed::STREAM_DATA), class as u64);
    seed::derive(seed::derive(s, 1 + angle_index as u64), sample as u64)
}

fn stored_split(class: usize) -> Split {
    if TEST_POSITIONS_5WAY.contains(&class) {
        Split::Test
    } else {
        Split::Train
    }
}

/// Generate the dataset in memory. Pixels are already quantized to 8 bits
/// and rescaled, so they match a disk round-trip exactly.
pub fn generate_in_memory(spec: &SynthSpec) -> Dataset {
    let mut records = Vec::new();
    let mut class_names = Vec::new();
    for class in 0..spec.n_classes {
        class_names.push(format!("synth{class:02}"));
        let template = class_template(spec, class);
        for (ai, &angle) in spec.angles.iter().enumerate() {
            for s in 0..spec.samples_per_class_angle {
                let bytes = render_sample(spec, &template, ai, sample_seed(spec, class, ai, s));
                records.push(Record {
                    path: image_rel_path(class, angle, s),
                    class_id: class,
                    angle_id: angle,
                    split: stored_split(class),
                    pixels: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
                });
            }
        }
    }
    Dataset { side: spec.side, class_names, records }
}

fn image_rel_path(class: usize, angle: u32, sample: usize) -> String {
    format!("images/c{class:02}_a{angle}_{sample:04}.pgm")
}

/// Generate and write the dataset: PGM images plus `manifest.csv` under
/// `out_dir`. Returns the manifest path. Identical specs produce
/// byte-identical files.
pub fn synth_generate(spec: &SynthSpec, out_dir: &Path) -> Result<PathBuf, DataError> {
    let ds = generate_in_memory(spec);
    std::fs::create_dir_all(out_dir.join("images"))?;
    for r in &ds.records {
        let bytes: Vec<u8> = r.pixels.iter().map(|&v| (v * 255.0).round() as u8).collect();
        pgm::write_pgm(&out_dir.join(&r.path), spec.side, spec.side, &bytes)?;
    }
    let manifest = super::manifest_path_in(out_dir);
    save_manifest(&ds, &manifest)?;
    Ok(manifest)
}

/// Accuracy of a nearest-class-mean classifier on raw pixels over
/// cross-angle episodes: all support samples share one angle, the query
/// comes from a different one. This is the difficulty oracle the deviation
/// strength is calibrated against.
pub fn nearest_mean_cross_angle_accuracy(
    dataset: &Dataset,
    n_way: usize,
    k_shot: usize,
    episodes: usize,
    eval_seed: u64,
) -> Result<f64, DataError> {
    let view = dataset.view_all();
    let angles = view.angle_ids();
    if angles.len() < 2 {
        return Err(DataError::Manifest(
            "cross-angle episodes need at least two angle ids".into(),
        ));
    }
    if view.class_count() < n_way {
        return Err(DataError::Manifest(format!(
            "need {n_way} classes, have {}",
            view.class_count()
        )));
    }
    // Index (class position in view) -> angle -> record indices.
    let by_angle: Vec<std::collections::BTreeMap<u32, Vec<usize>>> = view
        .classes
        .iter()
        .map(|(_, idxs)| {
            let mut m: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
            for &i in idxs {
                m.entry(dataset.records[i].angle_id).or_default().push(i);
            }
            m
        })
        .collect();

    let dim = dataset.side * dataset.side;
    let mut correct = 0usize;
    for ep in 0..episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::episode_seed(eval_seed, ep as u64));
        let class_picks = rand::seq::index::sample(&mut rng, view.class_count(), n_way);
        let sup_angle = angles[rng.random_range(0..angles.len())];
        let mut query_angle = angles[rng.random_range(0..angles.len())];
        while query_angle == sup_angle {
            query_angle = angles[rng.random_range(0..angles.len())];
        }
        let mut means: Vec<Vec<f64>> = Vec::with_capacity(n_way);
        for local in 0..n_way {
            let cls = class_picks.index(local);
            let pool = by_angle[cls].get(&sup_angle).ok_or_else(|| {
                DataError::Manifest(format!("class position {cls} has no angle {sup_angle}"))
            })?;
            if pool.len() < k_shot {
                return Err(DataError::Manifest(format!(
                    "class position {cls}, angle {sup_angle}: {} samples < k_shot {k_shot}",
                    pool.len()
                )));
            }
            let picks = rand::seq::index::sample(&mut rng, pool.len(), k_shot);
            let mut mean = vec![0.0; dim];
            for p in picks.iter() {
                for (m, &v) in mean.iter_mut().zip(&dataset.records[pool[p]].pixels) {
                    *m += v;
                }
            }
            for m in &mut mean {
                *m /= k_shot as f64;
            }
            means.push(mean);
        }
        let q_local = rng.random_range(0..n_way);
        let q_cls = class_picks.index(q_local);
        let qpool = by_angle[q_cls].get(&query_angle).ok_or_else(|| {
            DataError::Manifest(format!("class position {q_cls} has no angle {query_angle}"))
        })?;
        let q = &dataset.records[qpool[rng.random_range(0..qpool.len())]].pixels;
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (c, mean) in means.iter().enumerate() {
            let d: f64 = mean.iter().zip(q).map(|(m, v)| (m - v) * (m - v)).sum();
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        if best == q_local {
            correct += 1;
        }
    }
    Ok(correct as f64 / episodes as f64)
}

/// Binary-search the smallest deviation strength whose cross-angle
/// nearest-mean accuracy is at or below `target`. The oracle accuracy is
/// non-increasing in δ, so bisection on the boundary applies. Returns
/// (δ, accuracy at δ).
pub fn calibrate_deviation(
    base: &SynthSpec,
    target: f64,
    n_way: usize,
    k_shot: usize,
    episodes: usize,
    eval_seed: u64,
) -> Result<(f64, f64), DataError> {
    let acc_at = |delta: f64| -> Result<f64, DataError> {
        let spec = SynthSpec { deviation: delta, ..base.clone() };
        let ds = generate_in_memory(&spec);
        nearest_mean_cross_angle_accuracy(&ds, n_way, k_shot, episodes, eval_seed)
    };
    let mut lo = 0.0f64;
    let mut hi = 4.0f64;
    let mut hi_acc = acc_at(hi)?;
    if hi_acc > target {
        // Even the largest deviation is too easy; report it honestly.
        return Ok((hi, hi_acc));
    }
    if acc_at(lo)? <= target {
        return Ok((lo, acc_at(lo)?));
    }
    for _ in 0..8 {
        let mid = 0.5 * (lo + hi);
        let acc = acc_at(mid)?;
        if acc <= target {
            hi = mid;
            hi_acc = acc;
        } else {
            lo = mid;
        }
    }
    Ok((hi, hi_acc))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            n_classes: 4,
            samples_per_class_angle: 6,
            side: 24,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_in_memory(&small_spec());
        let b = generate_in_memory(&small_spec());
        assert_eq!(a.records.len(), b.records.len());
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.pixels, rb.pixels);
            assert_eq!(ra.path, rb.path);
        }
    }

    #[test]
    fn files_are_byte_identical_across_runs() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let m1 = synth_generate(&spec, d1.path()).unwrap();
        let m2 = synth_generate(&spec, d2.path()).unwrap();
        assert_eq!(
            std::fs::read_to_string(&m1).unwrap(),
            std::fs::read_to_string(&m2).unwrap()
        );
        let ds = generate_in_memory(&spec);
        for r in &ds.records {
            let b1 = std::fs::read(d1.path().join(&r.path)).unwrap();
            let b2 = std::fs::read(d2.path().join(&r.path)).unwrap();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn round_trip_matches_generator_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let manifest = synth_generate(&spec, dir.path()).unwrap();
        let loaded = super::super::load_dataset(&manifest).unwrap();
        let mem = generate_in_memory(&spec);
        assert_eq!(loaded.records.len(), mem.records.len());
        // Generator pixels are pre-quantized, so the disk round trip is
        // exact (well within the 1/255 quantization bound).
        for (a, b) in loaded.records.iter().zip(&mem.records) {
            assert_eq!(a.pixels, b.pixels, "{}", a.path);
        }
    }

    #[test]
    fn zero_deviation_means_no_angle_effect() {
        let spec = SynthSpec {
            n_classes: 2,
            samples_per_class_angle: 200,
            deviation: 0.0,
            seed: 3,
            ..Default::default()
        };
        let ds = generate_in_memory(&spec);
        let dim = spec.side * spec.side;
        for class in 0..spec.n_classes {
            let of_angle = |angle: u32, half: Option<usize>| -> Vec<f64> {
                let mut mean = vec![0.0; dim];
                let mut count = 0.0;
                for (i, r) in ds
                    .records
                    .iter()
                    .filter(|r| r.class_id == class && r.angle_id == angle)
                    .enumerate()
                {
                    let keep = match half {
                        None => true,
                        Some(0) => i % 2 == 0,
                        _ => i % 2 == 1,
                    };
                    if keep {
                        for (m, &v) in mean.iter_mut().zip(&r.pixels) {
                            *m += v;
                        }
                        count += 1.0;
                    }
                }
                mean.iter().map(|m| m / count).collect()
            };
            let mad = |a: &[f64], b: &[f64]| -> f64 {
                a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
            };
            // Noise floor: two disjoint halves of the same angle.
            let floor = mad(&of_angle(0, Some(0)), &of_angle(0, Some(1)));
            let cross = mad(&of_angle(0, None), &of_angle(1, None));
            assert!(
                cross < 2.0 * floor,
                "class {class}: cross-angle {cross} vs floor {floor}"
            );
        }
    }

    #[test]
    fn oracle_accuracy_non_increasing_in_deviation() {
        let mut last = f64::INFINITY;
        for &delta in &[0.0, 0.5, 1.0, 2.0] {
            let spec = SynthSpec { deviation: delta, seed: 5, ..Default::default() };
            let ds = generate_in_memory(&spec);
            let acc = nearest_mean_cross_angle_accuracy(&ds, 3, 5, 300, 77).unwrap();
            assert!(
                acc <= last + 0.02,
                "accuracy rose from {last:.3} to {acc:.3} at delta {delta}"
            );
            last = acc;
        }
    }

    #[test]
    fn calibration_hits_target() {
        let base = SynthSpec { seed: 9, ..Default::default() };
        let (delta, acc) = calibrate_deviation(&base, 0.75, 3, 5, 300, 123).unwrap();
        assert!(delta > 0.0);
        assert!(acc <= 0.75, "calibrated accuracy {acc}");
        // Accuracy at zero deviation should be clearly above the target.
        let easy = generate_in_memory(&SynthSpec { deviation: 0.0, ..base });
        let easy_acc = nearest_mean_cross_angle_accuracy(&easy, 3, 5, 300, 123).unwrap();
        assert!(easy_acc > 0.85, "delta=0 accuracy only {easy_acc}");
    }
}
