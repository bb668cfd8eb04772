//! Synthetic multi-sensor scenes.
//!
//! Label maps are Voronoi partitions of `K` random anchors, so regions are
//! spatially coherent and every class occurs in every scene. Modalities are
//! rendered from the label map with deliberately unequal difficulty:
//!
//! * `R`/`F`: a fixed colour per class plus Gaussian noise (easy, dense)
//! * `D`: a per-class intensity ramp plus noise, replicated over 3 channels
//!   (easy, dense)
//! * `E`: class boundaries with a fraction of boundary pixels dropped (hard,
//!   sparse, carries no class identity)
//! * `L`: the depth rendering restricted to a small random subset of pixels
//!   (hard, sparse)

mod io;

pub use io::{read_dataset, write_dataset, DATASET_MAGIC};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{AnysegError, Result};
use crate::modality::Modality;

pub const GENERATOR_VERSION: u32 = 1;

/// Rendering constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderParams {
    pub noise_sigma: f64,
    /// Fraction of event boundary pixels zeroed.
    pub event_drop: f64,
    /// Fraction of pixels that keep a LiDAR return.
    pub lidar_fraction: f64,
}

impl Default for RenderParams {
    fn default() -> Self {
        Self {
            noise_sigma: 0.05,
            event_drop: 0.3,
            lidar_fraction: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub modalities: Vec<Modality>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            num_classes: 4,
            modalities: vec![Modality::Rgb, Modality::Depth, Modality::Event, Modality::Lidar],
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(16) || !self.width.is_multiple_of(16) {
            return Err(AnysegError::Config(format!(
                "scene extent {}x{} must be a positive multiple of 16",
                self.height, self.width
            )));
        }
        if self.num_classes < 2 {
            return Err(AnysegError::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.num_classes > self.height * self.width || self.num_classes > u8::MAX as usize + 1 {
            return Err(AnysegError::Config(format!(
                "{} classes do not fit a {}x{} scene",
                self.num_classes, self.height, self.width
            )));
        }
        if self.modalities.is_empty() {
            return Err(AnysegError::EmptyModalitySet);
        }
        Ok(())
    }
}

/// A label map and its rendered modality images.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Row-major class indices.
    pub labels: Vec<u8>,
    /// `h x w x 3` images in `[0, 1]`, in configuration order.
    pub images: Vec<(Modality, Tensor<f32>)>,
}

impl SceneSample {
    pub fn image(&self, m: Modality) -> Option<&Tensor<f32>> {
        self.images.iter().find(|(k, _)| *k == m).map(|(_, t)| t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub sample_count: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub modalities: Vec<Modality>,
    pub generator_version: u32,
    pub global_seed: u64,
}

impl DatasetManifest {
    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            modalities: self.modalities.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<SceneSample>,
}

/// Nearest-anchor partition; anchor `j` carries class `j` and ties go to the
/// lower anchor index. Anchors are `(row, col)`.
pub fn voronoi_labels(anchors: &[(usize, usize)], height: usize, width: usize) -> Vec<u8> {
    let mut labels = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let mut best = (usize::MAX, 0u8);
            for (j, &(ay, ax)) in anchors.iter().enumerate() {
                let d = y.abs_diff(ay).pow(2) + x.abs_diff(ax).pow(2);
                if d < best.0 {
                    best = (d, j as u8);
                }
            }
            labels.push(best.1);
        }
    }
    labels
}

/// Fixed colour for class `k`.
pub fn class_color(k: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 8] = [
        [0.90, 0.10, 0.10],
        [0.10, 0.80, 0.20],
        [0.15, 0.25, 0.90],
        [0.90, 0.85, 0.10],
        [0.80, 0.20, 0.80],
        [0.10, 0.80, 0.80],
        [0.50, 0.50, 0.50],
        [0.95, 0.55, 0.10],
    ];
    if k < PALETTE.len() {
        return PALETTE[k];
    }
    // golden-ratio hue walk with distinct brightness tiers
    let hue = (k as f64 * 0.618_033_988_749_895).fract();
    let level = 0.35 + 0.6 * ((k / PALETTE.len()) as f64 * 0.37).fract();
    let channel = |offset: f64| level * (0.5 + 0.5 * (std::f64::consts::TAU * (hue + offset)).cos());
    [channel(0.0), channel(1.0 / 3.0), channel(2.0 / 3.0)]
}

/// Depth intensity for class `k` of `num_classes`.
pub fn class_depth(k: usize, num_classes: usize) -> f64 {
    0.15 + 0.7 * k as f64 / (num_classes - 1).max(1) as f64
}

fn noise_rng(seed: u64, kind: Modality) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + kind as u64);
    rng
}

/// Renders one modality from a label map. The result depends only on the
/// label map, `seed`, `kind` and `params`.
pub fn render_modality(
    labels: &[u8],
    height: usize,
    width: usize,
    num_classes: usize,
    kind: Modality,
    seed: u64,
    params: &RenderParams,
) -> Result<Tensor<f32>> {
    if labels.len() != height * width {
        return Err(AnysegError::Shape(format!(
            "{} labels for a {height}x{width} scene",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
        return Err(AnysegError::LabelOutOfRange {
            position: labels.iter().position(|&l| l == bad).unwrap_or(0),
            label: bad as usize,
            classes: num_classes,
        });
    }
    let n = height * width;
    let mut rng = noise_rng(seed, kind);
    let normal = Normal::new(0.0, params.noise_sigma.max(0.0)).map_err(|e| AnysegError::Config(e.to_string()))?;
    let noise = |rng: &mut ChaCha8Rng| if params.noise_sigma > 0.0 { normal.sample(rng) } else { 0.0 };
    let mut pixels = vec![[0.0f64; 3]; n];
    match kind {
        Modality::Rgb | Modality::Frame => {
            for (p, &l) in pixels.iter_mut().zip(labels) {
                let c = class_color(l as usize);
                for ch in 0..3 {
                    p[ch] = c[ch] + noise(&mut rng);
                }
            }
        }
        Modality::Depth => {
            for (p, &l) in pixels.iter_mut().zip(labels) {
                *p = [class_depth(l as usize, num_classes) + noise(&mut rng); 3];
            }
        }
        Modality::Event => {
            for y in 0..height {
                for x in 0..width {
                    let l = labels[y * width + x];
                    let differs = |yy: usize, xx: usize| labels[yy * width + xx] != l;
                    let boundary = (y > 0 && differs(y - 1, x))
                        || (y + 1 < height && differs(y + 1, x))
                        || (x > 0 && differs(y, x - 1))
                        || (x + 1 < width && differs(y, x + 1));
                    // one draw per boundary pixel keeps the drop pattern tied to the labels
                    if boundary && rng.random::<f64>() >= params.event_drop {
                        pixels[y * width + x] = [1.0; 3];
                    }
                }
            }
        }
        Modality::Lidar => {
            let depth = render_modality(labels, height, width, num_classes, Modality::Depth, seed, params)?;
            let keep = ((params.lidar_fraction * n as f64).ceil() as usize).min(n);
            for i in index::sample(&mut rng, n, keep) {
                let v = depth.data()[i * 3] as f64;
                pixels[i] = [v; 3];
            }
        }
    }
    let data = pixels
        .iter()
        .flat_map(|p| p.iter().map(|&v| v.clamp(0.0, 1.0) as f32))
        .collect();
    Ok(Tensor::new(&[height, width, 3], data)?)
}

/// Generates one scene from its seed.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<SceneSample> {
    config.validate()?;
    let (h, w, k) = (config.height, config.width, config.num_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchors: Vec<(usize, usize)> = index::sample(&mut rng, h * w, k)
        .into_iter()
        .map(|i| (i / w, i % w))
        .collect();
    let labels = voronoi_labels(&anchors, h, w);
    let params = RenderParams::default();
    let images = config
        .modalities
        .iter()
        .map(|&m| Ok((m, render_modality(&labels, h, w, k, m, seed, &params)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneSample {
        seed,
        height: h,
        width: w,
        labels,
        images,
    })
}

/// Seed of sample `index` in a dataset with `global_seed`.
pub fn sample_seed(global_seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = global_seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_dataset(config: &SceneConfig, count: usize, global_seed: u64) -> Result<Dataset> {
    config.validate()?;
    let samples = (0..count)
        .into_par_iter()
        .map(|i| generate_scene(sample_seed(global_seed, i), config))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        manifest: DatasetManifest {
            sample_count: count,
            height: config.height,
            width: config.width,
            num_classes: config.num_classes,
            modalities: config.modalities.clone(),
            generator_version: GENERATOR_VERSION,
            global_seed,
        },
        samples,
    })
}

/// Majority vote over `factor x factor` blocks; ties go to the lowest class.
pub fn downsample_labels(labels: &[u8], height: usize, width: usize, factor: usize, num_classes: usize) -> Vec<u8> {
    let (ho, wo) = (height / factor, width / factor);
    let mut out = Vec::with_capacity(ho * wo);
    let mut counts = vec![0usize; num_classes];
    for by in 0..ho {
        for bx in 0..wo {
            counts.iter_mut().for_each(|c| *c = 0);
            for dy in 0..factor {
                for dx in 0..factor {
                    counts[labels[(by * factor + dy) * width + bx * factor + dx] as usize] += 1;
                }
            }
            let mut best = 0;
            for (k, &c) in counts.iter().enumerate() {
                if c > counts[best] {
                    best = k;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_corner_anchors_split_on_bisector() {
        let labels = voronoi_labels(&[(0, 0), (7, 7)], 8, 8);
        for y in 0..8 {
            for x in 0..8 {
                // brute force: compare squared distances, ties to anchor 0
                let d0 = y * y + x * x;
                let d1 = (7 - y) * (7 - y) + (7 - x) * (7 - x);
                let expected = u8::from(d1 < d0);
                assert_eq!(labels[y * 8 + x], expected, "({y}, {x})");
                // the bisector of the two corners is the anti-diagonal
                assert_eq!(expected == 1, y + x > 7);
            }
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let cfg = SceneConfig::default();
        assert_eq!(generate_scene(42, &cfg).unwrap(), generate_scene(42, &cfg).unwrap());
        let base = generate_scene(0, &cfg).unwrap();
        let differing = (1..=100)
            .filter(|&s| generate_scene(s, &cfg).unwrap().labels != base.labels)
            .count();
        assert_eq!(differing, 100);
    }

    #[test]
    fn every_class_present_and_images_in_range() {
        let cfg = SceneConfig::default();
        for seed in 0..20 {
            let s = generate_scene(seed, &cfg).unwrap();
            for k in 0..4u8 {
                assert!(s.labels.contains(&k));
            }
            for (_, img) in &s.images {
                assert_eq!(img.shape(), &[16, 16, 3]);
                assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn constant_labels_have_no_events() {
        let labels = vec![2u8; 256];
        let img = render_modality(&labels, 16, 16, 4, Modality::Event, 3, &RenderParams::default()).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lidar_is_sparse() {
        let s = generate_scene(5, &SceneConfig::default()).unwrap();
        let lidar = s.image(Modality::Lidar).unwrap();
        let nonzero = lidar.data().chunks(3).filter(|p| p.iter().any(|&v| v != 0.0)).count();
        assert!(nonzero <= (0.15f64 * 256.0).ceil() as usize);
    }

    #[test]
    fn noiseless_rgb_has_k_colors() {
        let s = generate_scene(9, &SceneConfig::default()).unwrap();
        let params = RenderParams {
            noise_sigma: 0.0,
            ..RenderParams::default()
        };
        let img = render_modality(&s.labels, 16, 16, 4, Modality::Rgb, 9, &params).unwrap();
        let mut colors: Vec<[u32; 3]> = img
            .data()
            .chunks(3)
            .map(|p| [p[0].to_bits(), p[1].to_bits(), p[2].to_bits()])
            .collect();
        colors.sort();
        colors.dedup();
        assert_eq!(colors.len(), 4);
    }

    #[test]
    fn config_rejections() {
        let too_many = SceneConfig {
            num_classes: 257,
            ..SceneConfig::default()
        };
        assert!(generate_scene(0, &too_many).is_err());
        let odd = SceneConfig {
            height: 20,
            ..SceneConfig::default()
        };
        assert!(odd.validate().is_err());
        assert!(render_modality(&[0, 5], 1, 2, 4, Modality::Rgb, 0, &RenderParams::default()).is_err());
    }

    #[test]
    fn majority_vote_downsampling() {
        // blocks: [0,0,1,1] tie -> 0, [2,2,2,1] -> 2
        let labels = [0, 0, 2, 2, 1, 1, 2, 1];
        assert_eq!(downsample_labels(&labels, 2, 4, 2, 3), vec![0, 2]);
    }
}
