//! Weight-shared multi-scale encoder, mean fusion and segmentation head.
//!
//! Each of the four encoder stages merges 2x2 patches into channels, mixes
//! channels with an affine map and applies GELU, so stage `i` has spatial
//! extent `(h / 2^i) x (w / 2^i)`. The same parameters encode every modality.
//! The head projects each stage to a common width, upsamples to stage-1
//! resolution, averages the stages and classifies every position.

mod checkpoint;

pub use checkpoint::{checkpoint_bytes, parse_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub(crate) use checkpoint::digest;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{AnysegError, Result};
use crate::modality::Modality;

pub const NUM_STAGES: usize = 4;
const MERGE: usize = 2;
const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub stage_channels: [usize; NUM_STAGES],
    pub decoder_channels: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            num_classes: 4,
            stage_channels: [8, 16, 24, 32],
            decoder_channels: 16,
        }
    }
}

impl ModelShape {
    pub fn validate(&self) -> Result<()> {
        let div = MERGE.pow(NUM_STAGES as u32);
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(div) || !self.width.is_multiple_of(div) {
            return Err(AnysegError::Config(format!(
                "image extent {}x{} must be a positive multiple of {div}",
                self.height, self.width
            )));
        }
        if self.num_classes == 0 || self.decoder_channels == 0 || self.stage_channels.contains(&0) {
            return Err(AnysegError::Config("channel and class counts must be positive".into()));
        }
        Ok(())
    }

    /// Extent of the prediction grid (stage-1 resolution).
    pub fn output_extent(&self) -> (usize, usize) {
        (self.height / MERGE, self.width / MERGE)
    }
}

/// Affine map `x W + b` with `W: [in, out]` and `b: [1, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Affine<T> {
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        let s = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<T> { (0..n).map(|_| T::from_f64(rng.random_range(-s..=s))).collect() };
        Self {
            weight: Tensor::new(&[fan_in, fan_out], draw(fan_in * fan_out)).expect("shape"),
            bias: Tensor::new(&[1, fan_out], draw(fan_out)).expect("shape"),
        }
    }

    fn cast<U: Real>(&self) -> Affine<U> {
        Affine {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

/// Parameters shared by teacher and student architectures.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentorParams<T = f32> {
    shape: ModelShape,
    pub stages: [Affine<T>; NUM_STAGES],
    pub decoder: [Affine<T>; NUM_STAGES],
    pub classifier: Affine<T>,
    frozen: bool,
}

impl<T: Real> SegmentorParams<T> {
    /// Uniform `[-s, s]` initialization with `s = 1 / sqrt(fan_in)`.
    pub fn init(shape: &ModelShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = shape.stage_channels;
        let fan_in = |i: usize| if i == 0 { IMAGE_CHANNELS } else { c[i - 1] } * MERGE * MERGE;
        let stages = std::array::from_fn(|i| Affine::init(&mut rng, fan_in(i), c[i]));
        let decoder = std::array::from_fn(|i| Affine::init(&mut rng, c[i], shape.decoder_channels));
        let classifier = Affine::init(&mut rng, shape.decoder_channels, shape.num_classes);
        Ok(Self {
            shape: shape.clone(),
            stages,
            decoder,
            classifier,
            frozen: false,
        })
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub(crate) fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn cast<U: Real>(&self) -> SegmentorParams<U> {
        SegmentorParams {
            shape: self.shape.clone(),
            stages: std::array::from_fn(|i| self.stages[i].cast()),
            decoder: std::array::from_fn(|i| self.decoder[i].cast()),
            classifier: self.classifier.cast(),
            frozen: self.frozen,
        }
    }

    /// Parameter tensors in a fixed order with stable names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::with_capacity(4 * NUM_STAGES + 2);
        let groups = [("stage", &self.stages), ("decoder", &self.decoder)];
        for (prefix, layers) in groups {
            for (i, a) in layers.iter().enumerate() {
                out.push((format!("{prefix}{}.weight", i + 1), &a.weight));
                out.push((format!("{prefix}{}.bias", i + 1), &a.bias));
            }
        }
        out.push(("classifier.weight".into(), &self.classifier.weight));
        out.push(("classifier.bias".into(), &self.classifier.bias));
        out
    }

    /// Mutable tensors in the same order as [`SegmentorParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::with_capacity(4 * NUM_STAGES + 2);
        for a in self.stages.iter_mut().chain(self.decoder.iter_mut()) {
            out.push(&mut a.weight);
            out.push(&mut a.bias);
        }
        out.push(&mut self.classifier.weight);
        out.push(&mut self.classifier.bias);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Places every parameter in `g` as a leaf.
    pub fn bind<U: Real>(&self, g: &mut Graph<U>, requires_grad: bool) -> BoundParams {
        let mut leaf = |a: &Affine<T>| BoundAffine {
            weight: g.leaf(a.weight.cast(), requires_grad),
            bias: g.leaf(a.bias.cast(), requires_grad),
        };
        let stages = std::array::from_fn(|i| leaf(&self.stages[i]));
        let decoder = std::array::from_fn(|i| leaf(&self.decoder[i]));
        let classifier = leaf(&self.classifier);
        BoundParams {
            shape: self.shape.clone(),
            stages,
            decoder,
            classifier,
        }
    }
}

impl SegmentorParams<f32> {
    /// FNV-1a digest of the serialized parameters, frozen flag included.
    pub fn checksum(&self) -> u64 {
        checkpoint::digest(&checkpoint::encode(self))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundAffine {
    pub weight: Var,
    pub bias: Var,
}

/// Parameters placed in a graph.
#[derive(Debug, Clone)]
pub struct BoundParams {
    shape: ModelShape,
    pub stages: [BoundAffine; NUM_STAGES],
    pub decoder: [BoundAffine; NUM_STAGES],
    pub classifier: BoundAffine,
}

impl BoundParams {
    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    /// Leaves in the order of [`SegmentorParams::named_tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::with_capacity(4 * NUM_STAGES + 2);
        for a in self.stages.iter().chain(&self.decoder) {
            out.push(a.weight);
            out.push(a.bias);
        }
        out.push(self.classifier.weight);
        out.push(self.classifier.bias);
        out
    }
}

/// Applies an affine map to `[n, in]` rows. The bias row is expanded with a
/// ones column since the engine does not broadcast.
fn affine<T: Real>(g: &mut Graph<T>, x: Var, layer: &BoundAffine) -> Result<Var> {
    let n = g.shape(x)[0];
    let xw = g.matmul(x, layer.weight)?;
    let ones = g.constant(Tensor::ones(&[n, 1]));
    let b = g.matmul(ones, layer.bias)?;
    Ok(g.add(xw, b)?)
}

/// Encodes one `h x w x 3` image into four stage features of shape
/// `(h/2^i) x (w/2^i) x C_i`.
pub fn encode<T: Real>(g: &mut Graph<T>, image: Var, params: &BoundParams) -> Result<[Var; NUM_STAGES]> {
    let shape = g.shape(image).to_vec();
    let div = MERGE.pow(NUM_STAGES as u32);
    if shape.len() != 3 || shape[2] != IMAGE_CHANNELS || !shape[0].is_multiple_of(div) || !shape[1].is_multiple_of(div) {
        return Err(AnysegError::Shape(format!(
            "encoder input must be h x w x {IMAGE_CHANNELS} with h, w divisible by {div}, got {shape:?}"
        )));
    }
    let mut x = image;
    let mut out = [image; NUM_STAGES];
    let (mut h, mut w) = (shape[0], shape[1]);
    for (i, layer) in params.stages.iter().enumerate() {
        let merged = g.patch_merge2d(x, MERGE)?;
        h /= MERGE;
        w /= MERGE;
        let cin = g.shape(merged)[2];
        let rows = g.reshape(merged, &[h * w, cin])?;
        let mixed = affine(g, rows, layer)?;
        let act = g.gelu(mixed)?;
        let cout = g.shape(act)[1];
        x = g.reshape(act, &[h, w, cout])?;
        out[i] = x;
    }
    Ok(out)
}

/// Per-modality stage features inside one graph.
#[derive(Debug, Clone, Default)]
pub struct MultiScaleFeatures {
    entries: Vec<(Modality, [Var; NUM_STAGES])>,
}

impl MultiScaleFeatures {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces the features of `m`. Insertion order is kept.
    pub fn insert(&mut self, m: Modality, stages: [Var; NUM_STAGES]) {
        match self.entries.iter_mut().find(|(k, _)| *k == m) {
            Some(slot) => slot.1 = stages,
            None => self.entries.push((m, stages)),
        }
    }

    pub fn get(&self, m: Modality) -> Option<&[Var; NUM_STAGES]> {
        self.entries.iter().find(|(k, _)| *k == m).map(|(_, v)| v)
    }

    pub fn modalities(&self) -> impl Iterator<Item = Modality> + '_ {
        self.entries.iter().map(|(m, _)| *m)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Modality, &[Var; NUM_STAGES])> {
        self.entries.iter().map(|(m, v)| (*m, v))
    }
}

/// Encodes every listed modality with the same parameters.
pub fn encode_modalities<T: Real>(
    g: &mut Graph<T>,
    images: &[(Modality, Var)],
    params: &BoundParams,
) -> Result<MultiScaleFeatures> {
    let mut feats = MultiScaleFeatures::new();
    for &(m, img) in images {
        feats.insert(m, encode(g, img, params)?);
    }
    Ok(feats)
}

/// Element-wise mean over modalities at every stage. Terms are summed in
/// canonical modality order, so the result does not depend on insertion
/// order; a single modality is passed through unchanged.
pub fn pml_fuse<T: Real>(g: &mut Graph<T>, features: &MultiScaleFeatures) -> Result<[Var; NUM_STAGES]> {
    if features.is_empty() {
        return Err(AnysegError::EmptyModalitySet);
    }
    let mut sorted: Vec<(Modality, &[Var; NUM_STAGES])> = features.iter().collect();
    sorted.sort_by_key(|(m, _)| *m);
    let n = sorted.len();
    let mut fused = *sorted[0].1;
    for (stage, slot) in fused.iter_mut().enumerate() {
        let terms: Vec<Var> = sorted.iter().map(|(_, s)| s[stage]).collect();
        let reference = g.shape(terms[0]).to_vec();
        for (m, s) in &sorted[1..] {
            if g.shape(s[stage]) != reference.as_slice() {
                return Err(AnysegError::Shape(format!(
                    "stage {} of modality {m} has shape {:?}, expected {reference:?}",
                    stage + 1,
                    g.shape(s[stage])
                )));
            }
        }
        if n > 1 {
            let total = g.add_n(&terms)?;
            *slot = g.scale(total, 1.0 / n as f64)?;
        }
    }
    Ok(fused)
}

/// Segmentation head: stage features to `h/2 x w/2 x K` logits.
pub fn decode<T: Real>(g: &mut Graph<T>, stages: &[Var], params: &BoundParams) -> Result<Var> {
    if stages.len() != NUM_STAGES {
        return Err(AnysegError::Shape(format!(
            "decoder expects {NUM_STAGES} stages, got {}",
            stages.len()
        )));
    }
    let base = g.shape(stages[0]).to_vec();
    if base.len() != 3 {
        return Err(AnysegError::Shape(format!("stage 1 must be [h, w, c], got {base:?}")));
    }
    let (h, w) = (base[0], base[1]);
    let mut projected = Vec::with_capacity(NUM_STAGES);
    for (i, (&s, layer)) in stages.iter().zip(&params.decoder).enumerate() {
        let sh = g.shape(s).to_vec();
        let factor = MERGE.pow(i as u32);
        if sh.len() != 3 || sh[0] * factor != h || sh[1] * factor != w {
            return Err(AnysegError::Shape(format!(
                "stage {} has shape {sh:?}, expected spatial extent {}x{}",
                i + 1,
                h / factor,
                w / factor
            )));
        }
        let rows = g.reshape(s, &[sh[0] * sh[1], sh[2]])?;
        let p = affine(g, rows, layer)?;
        let cdec = g.shape(p)[1];
        let map = g.reshape(p, &[sh[0], sh[1], cdec])?;
        projected.push(if factor > 1 { g.upsample2d(map, factor)? } else { map });
    }
    let total = g.add_n(&projected)?;
    let mean = g.scale(total, 1.0 / NUM_STAGES as f64)?;
    let cdec = g.shape(mean)[2];
    let rows = g.reshape(mean, &[h * w, cdec])?;
    let logits = affine(g, rows, &params.classifier)?;
    let k = g.shape(logits)[1];
    Ok(g.reshape(logits, &[h, w, k])?)
}

/// Softmax over the class axis of `h' x w' x K` logits.
pub fn predict_probs<T: Real>(g: &mut Graph<T>, logits: Var) -> Result<Var> {
    let rank = g.shape(logits).len();
    if rank == 0 {
        return Err(AnysegError::Shape("logits must have a class axis".into()));
    }
    Ok(g.softmax(logits, rank - 1)?)
}

/// Per-position argmax over the last axis; ties go to the lowest class.
pub fn argmax_labels<T: Real>(logits: &Tensor<T>) -> Vec<u8> {
    let k = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best as u8
        })
        .collect()
}

/// Runs encode, fuse and decode for the given modality images and returns
/// the logits tensor. No gradients are recorded.
pub fn infer<T: Real>(params: &SegmentorParams<T>, images: &[(Modality, &Tensor<T>)]) -> Result<Tensor<T>> {
    let mut g = Graph::<T>::new();
    let bound = params.bind(&mut g, false);
    let leaves: Vec<(Modality, Var)> = images.iter().map(|&(m, t)| (m, g.constant(t.clone()))).collect();
    let feats = encode_modalities(&mut g, &leaves, &bound)?;
    let fused = pml_fuse(&mut g, &feats)?;
    let logits = decode(&mut g, &fused, &bound)?;
    Ok(g.value(logits).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand_distr::{Distribution, StandardNormal};

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn stage_shapes() {
        let params = SegmentorParams::<f64>::init(&ModelShape::default(), 1).unwrap();
        let mut g = Graph::<f64>::new();
        let bound = params.bind(&mut g, false);
        let img = g.constant(random(&[16, 16, 3], 2));
        let stages = encode(&mut g, img, &bound).unwrap();
        let shapes: Vec<Vec<usize>> = stages.iter().map(|&s| g.shape(s).to_vec()).collect();
        assert_eq!(shapes, vec![vec![8, 8, 8], vec![4, 4, 16], vec![2, 2, 24], vec![1, 1, 32]]);
        let logits = decode(&mut g, &stages, &bound).unwrap();
        assert_eq!(g.shape(logits), &[8, 8, 4]);
    }

    #[test]
    fn shared_weights_distinct_features() {
        let params = SegmentorParams::<f64>::init(&ModelShape::default(), 1).unwrap();
        let mut g = Graph::<f64>::new();
        let bound = params.bind(&mut g, false);
        let a = g.constant(random(&[16, 16, 3], 2));
        let b = g.constant(random(&[16, 16, 3], 3));
        let fa = encode(&mut g, a, &bound).unwrap();
        let fb = encode(&mut g, b, &bound).unwrap();
        for (x, y) in fa.iter().zip(&fb) {
            assert_eq!(g.shape(*x), g.shape(*y));
            assert_ne!(g.value(*x).data(), g.value(*y).data());
        }
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_features() {
        let mut params = SegmentorParams::<f64>::init(&ModelShape::default(), 1).unwrap();
        for a in params.stages.iter_mut().chain(params.decoder.iter_mut()) {
            a.bias = Tensor::zeros(a.bias.shape());
        }
        params.classifier.bias = Tensor::zeros(params.classifier.bias.shape());
        let mut g = Graph::<f64>::new();
        let bound = params.bind(&mut g, false);
        let img = g.constant(Tensor::zeros(&[16, 16, 3]));
        let stages = encode(&mut g, img, &bound).unwrap();
        for s in stages {
            assert!(g.value(s).data().iter().all(|&v| v == 0.0));
        }
        let logits = decode(&mut g, &stages, &bound).unwrap();
        assert!(g.value(logits).data().iter().all(|&v| v == 0.0));
        let probs = predict_probs(&mut g, logits).unwrap();
        assert!(g.value(probs).data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn rejects_non_divisible_input() {
        let params = SegmentorParams::<f64>::init(&ModelShape::default(), 1).unwrap();
        let mut g = Graph::<f64>::new();
        let bound = params.bind(&mut g, false);
        let before = g.len();
        let img = g.constant(Tensor::zeros(&[12, 16, 3]));
        assert!(matches!(encode(&mut g, img, &bound), Err(AnysegError::Shape(_))));
        assert_eq!(g.len(), before + 1, "nothing computed after the input");
        let img = g.constant(Tensor::zeros(&[16, 16, 2]));
        assert!(encode(&mut g, img, &bound).is_err());
        assert!(ModelShape { height: 24, ..ModelShape::default() }.validate().is_err());
    }

    #[test]
    fn fuse_rules() {
        let mut g = Graph::<f64>::new();
        let a = random(&[4, 4, 2], 5);
        let neg = a.map(|v| -v);
        let stage = |g: &mut Graph<f64>, t: &Tensor<f64>| -> [Var; 4] { std::array::from_fn(|_| g.constant(t.clone())) };
        let sa = stage(&mut g, &a);
        let sn = stage(&mut g, &neg);
        let mut feats = MultiScaleFeatures::new();
        feats.insert(Modality::Rgb, sa);
        let single = pml_fuse(&mut g, &feats).unwrap();
        assert_eq!(single, sa);
        feats.insert(Modality::Depth, sn);
        let fused = pml_fuse(&mut g, &feats).unwrap();
        assert!(g.value(fused[0]).data().iter().all(|&v| v == 0.0));
        assert!(matches!(pml_fuse(&mut g, &MultiScaleFeatures::new()), Err(AnysegError::EmptyModalitySet)));
    }

    #[test]
    fn fuse_rejects_inconsistent_shapes() {
        let mut g = Graph::<f64>::new();
        let a: [Var; 4] = std::array::from_fn(|_| g.constant(Tensor::zeros(&[2, 2, 2])));
        let b: [Var; 4] = std::array::from_fn(|_| g.constant(Tensor::zeros(&[2, 2, 3])));
        let mut feats = MultiScaleFeatures::new();
        feats.insert(Modality::Rgb, a);
        feats.insert(Modality::Event, b);
        assert!(matches!(pml_fuse(&mut g, &feats), Err(AnysegError::Shape(_))));
    }

    #[test]
    fn decoder_rejects_wrong_stage_count() {
        let params = SegmentorParams::<f64>::init(&ModelShape::default(), 1).unwrap();
        let mut g = Graph::<f64>::new();
        let bound = params.bind(&mut g, false);
        let s = g.constant(Tensor::zeros(&[8, 8, 8]));
        assert!(decode(&mut g, &[s, s, s], &bound).is_err());
    }

    #[test]
    fn single_class_argmax_is_zero() {
        let shape = ModelShape {
            num_classes: 1,
            ..ModelShape::default()
        };
        let params = SegmentorParams::<f32>::init(&shape, 3).unwrap();
        let img = random(&[16, 16, 3], 9).cast::<f32>();
        let logits = infer(&params, &[(Modality::Rgb, &img)]).unwrap();
        assert!(argmax_labels(&logits).iter().all(|&l| l == 0));
    }

    #[test]
    fn argmax_ties_break_low() {
        let t = Tensor::<f32>::new(&[2, 3], vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_labels(&t), vec![0, 1]);
    }

    #[test]
    fn decoder_weight_gradient() {
        let params = SegmentorParams::<f64>::init(&ModelShape::default(), 4).unwrap();
        let feats: Vec<Tensor<f64>> = [[8, 8, 8], [4, 4, 16], [2, 2, 24], [1, 1, 32]]
            .iter()
            .enumerate()
            .map(|(i, s)| random(s, 20 + i as u64))
            .collect();
        let point = params.decoder[1].weight.clone();
        let report = grad_check(
            |g: &mut Graph<f64>, w: Var| -> Result<Var> {
                let mut bound = params.bind(g, false);
                bound.decoder[1].weight = w;
                let stages: Vec<Var> = feats.iter().map(|t| g.constant(t.clone())).collect();
                let logits = decode(g, &stages, &bound)?;
                let probs = predict_probs(g, logits)?;
                let sq = g.mul(probs, logits)?;
                Ok(g.sum_all(sq)?)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
