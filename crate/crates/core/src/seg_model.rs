//! Segmentation network: a small strided encoder with a pointwise classifier,
//! upsampled back to input resolution, plus the supervised source loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, Init, ParamStore};
use crate::tensor::Tensor;

/// Reserved label value excluded from every loss and metric.
pub const IGNORE: u8 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// An RGB image stored channel-first (`[3, H, W]`) with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pixels: Tensor,
    pub domain: Domain,
}

impl Image {
    /// Spatial sizes must be multiples of 32 so the discriminator's five
    /// stride-2 layers tile the map exactly.
    pub fn new(pixels: Tensor, domain: Domain) -> Result<Self> {
        let (c, h, w) = match pixels.shape() {
            &[c, h, w] => (c, h, w),
            s => return Err(Error::shape("Image", "[channels, height, width]", format!("{s:?}"))),
        };
        if c == 0 || h < 32 || w < 32 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::shape("Image", "height, width >= 32 and divisible by 32", format!("{h}x{w}")));
        }
        if let Some(bad) = pixels.data().iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::Config(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { pixels, domain })
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    /// Stacks same-sized images into an NCHW batch.
    pub fn batch(images: &[&Image]) -> Result<Tensor> {
        let parts: Vec<Tensor> = images
            .iter()
            .map(|im| {
                let s = im.pixels.shape();
                im.pixels.clone().reshape([1, s[0], s[1], s[2]])
            })
            .collect::<Result<_>>()?;
        Tensor::cat_batch(&parts.iter().collect::<Vec<_>>())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape("LabelMap", height * width, labels.len()));
        }
        Ok(Self { height, width, labels })
    }

    /// Rejects labels that are neither a class index nor [`IGNORE`].
    pub fn validate(&self, classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l != IGNORE && l as usize >= classes) {
            Some(&bad) => Err(Error::Config(format!("label value {bad} not below {classes} and not IGNORE"))),
            None => Ok(()),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Flattens several maps into one NHW label buffer.
    pub fn concat(maps: &[&LabelMap]) -> Vec<u8> {
        maps.iter().flat_map(|m| m.labels.iter().copied()).collect()
    }
}

/// Per-pixel class scores with their class-axis softmax.
///
/// Both tensors are `[N, classes, H, W]`; `prob` is always derived from
/// `scores`, never set independently.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    scores: Tensor,
    prob: Tensor,
}

impl ScoreMap {
    pub fn from_scores(scores: Tensor) -> Result<Self> {
        if !scores.is_finite() {
            return Err(Error::Config("score map contains non-finite values".into()));
        }
        let mut g = Graph::new();
        let s = g.constant(scores);
        let p = g.softmax_channels(s)?;
        Ok(Self {
            prob: g.value(p).clone(),
            scores: g.value(s).clone(),
        })
    }

    pub fn scores(&self) -> &Tensor {
        &self.scores
    }

    pub fn prob(&self) -> &Tensor {
        &self.prob
    }

    pub fn classes(&self) -> usize {
        self.scores.shape()[1]
    }

    /// Per-pixel argmax over classes, NHW order; ties go to the lower index.
    pub fn predictions(&self) -> Vec<u8> {
        let (n, c, h, w) = self.prob.dims4().expect("rank 4 by construction");
        let hw = h * w;
        let p = self.prob.data();
        let mut out = Vec::with_capacity(n * hw);
        for ni in 0..n {
            for px in 0..hw {
                let mut best = 0;
                for ci in 1..c {
                    if p[(ni * c + ci) * hw + px] > p[(ni * c + best) * hw + px] {
                        best = ci;
                    }
                }
                out.push(best as u8);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegModelConfig {
    pub in_channels: usize,
    pub classes: usize,
    /// Output channels of each 3x3 conv block.
    pub channels: Vec<usize>,
    /// Stride of each block; the product is the backbone's output stride.
    pub strides: Vec<usize>,
}

impl Default for SegModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            classes: 5,
            channels: vec![32, 64, 128, 128],
            strides: vec![1, 2, 1, 1],
        }
    }
}

impl SegModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.classes < 2 {
            return Err(Error::Config("segmentation model needs >= 1 input channel and >= 2 classes".into()));
        }
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return Err(Error::Config("seg.channels and seg.strides must be non-empty and equally long".into()));
        }
        if self.channels.contains(&0) || self.strides.iter().any(|&s| s == 0 || s > 2) {
            return Err(Error::Config("seg.channels must be positive and seg.strides 1 or 2".into()));
        }
        if self.classes > IGNORE as usize {
            return Err(Error::Config(format!("at most {} classes are supported", IGNORE)));
        }
        Ok(())
    }

    pub fn output_stride(&self) -> usize {
        self.strides.iter().product()
    }
}

#[derive(Clone, Debug)]
pub struct SegModel {
    config: SegModelConfig,
    params: ParamStore,
    blocks: Vec<Conv2d>,
    classifier: Conv2d,
}

impl SegModel {
    pub fn new(config: SegModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut blocks = Vec::with_capacity(config.channels.len());
        let mut in_ch = config.in_channels;
        for (i, (&out_ch, &stride)) in config.channels.iter().zip(&config.strides).enumerate() {
            blocks.push(Conv2d::new(&mut params, &format!("seg.block{i}"), in_ch, out_ch, 3, stride, 1, Init::He, rng));
            in_ch = out_ch;
        }
        let classifier = Conv2d::new(&mut params, "seg.classifier", in_ch, config.classes, 1, 1, 0, Init::He, rng);
        Ok(Self {
            config,
            params,
            blocks,
            classifier,
        })
    }

    pub fn config(&self) -> &SegModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Zeroes the classifier so every pixel predicts the uniform distribution.
    pub fn zero_classifier(&mut self) {
        for id in [self.classifier.weight, self.classifier.bias] {
            self.params.get_mut(id).data_mut().fill(0.0);
        }
    }

    /// Scores at input resolution for an NCHW image batch on the tape.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let (_, c, h, w) = g.value(x).dims4()?;
        if c != self.config.in_channels {
            return Err(Error::Config(format!(
                "image has {c} channels, model expects {}",
                self.config.in_channels
            )));
        }
        let stride = self.config.output_stride();
        if h % stride != 0 || w % stride != 0 {
            return Err(Error::Config(format!("image {h}x{w} not divisible by backbone stride {stride}")));
        }
        let mut feat = x;
        for block in &self.blocks {
            let z = block.forward(g, p, feat)?;
            feat = g.relu(z);
        }
        let logits = self.classifier.forward(g, p, feat)?;
        g.resize_bilinear(logits, h, w)
    }

    /// Evaluates the network on an NCHW batch.
    pub fn forward_segmentation(&self, images: &Tensor) -> Result<ScoreMap> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(images.clone());
        let s = self.forward(&mut g, &p, x)?;
        ScoreMap::from_scores(g.value(s).clone())
    }
}

/// Mean over non-ignored pixels of `-log prob[label]`.
pub fn seg_loss(score: &ScoreMap, labels: &[&LabelMap]) -> Result<f64> {
    let (n, _, h, w) = score.scores().dims4()?;
    if labels.len() != n || labels.iter().any(|l| (l.height, l.width) != (h, w)) {
        return Err(Error::shape("seg_loss", format!("{n} label maps of {h}x{w}"), labels.len()));
    }
    let mut g = Graph::new();
    let s = g.constant(score.scores().clone());
    let loss = g.cross_entropy(s, &LabelMap::concat(labels), IGNORE)?;
    Ok(g.value(loss).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config(classes: usize) -> SegModelConfig {
        SegModelConfig {
            in_channels: 3,
            classes,
            channels: vec![8, 8, 8],
            strides: vec![1, 2, 1],
        }
    }

    #[test]
    fn output_matches_input_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = SegModel::new(small_config(5), &mut rng).unwrap();
        let x = Tensor::full([1, 3, 64, 64], 0.5);
        let s = model.forward_segmentation(&x).unwrap();
        assert_eq!(s.scores().shape(), &[1, 5, 64, 64]);
    }

    #[test]
    fn zero_classifier_gives_uniform_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = SegModel::new(small_config(5), &mut rng).unwrap();
        model.zero_classifier();
        let x = Tensor::from_fn([1, 3, 8, 8], |i| (i % 7) as f64 / 7.0);
        let s = model.forward_segmentation(&x).unwrap();
        assert!(s.prob().data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn channel_mismatch_is_a_configuration_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = SegModel::new(small_config(3), &mut rng).unwrap();
        let err = model.forward_segmentation(&Tensor::zeros([1, 1, 8, 8])).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn seg_loss_closed_forms() {
        let labels = LabelMap::new(2, 2, vec![0, 1, 2, 4]).unwrap();
        // uniform over five classes
        let uniform = ScoreMap::from_scores(Tensor::zeros([1, 5, 2, 2])).unwrap();
        assert!((seg_loss(&uniform, &[&labels]).unwrap() - 5f64.ln()).abs() < 1e-12);

        // prob 0.25 on the true class: scores (ln 1, ln 3) over two classes
        let one = LabelMap::new(1, 1, vec![0]).unwrap();
        let s = ScoreMap::from_scores(Tensor::new([1, 2, 1, 1], vec![0.0, 3f64.ln()]).unwrap()).unwrap();
        assert!((seg_loss(&s, &[&one]).unwrap() - 1.386_294_361_119_890_6).abs() < 1e-12);

        // near-certain correct prediction
        let sharp = ScoreMap::from_scores(Tensor::new([1, 2, 1, 1], vec![60.0, 0.0]).unwrap()).unwrap();
        assert!(seg_loss(&sharp, &[&one]).unwrap() < 1e-20);
    }

    #[test]
    fn all_ignore_is_empty_supervision() {
        let labels = LabelMap::new(1, 2, vec![IGNORE, IGNORE]).unwrap();
        let s = ScoreMap::from_scores(Tensor::zeros([1, 3, 1, 2])).unwrap();
        assert!(matches!(seg_loss(&s, &[&labels]), Err(Error::EmptySupervision)));
    }

    #[test]
    fn image_invariants() {
        assert!(Image::new(Tensor::full([3, 64, 32], 0.3), Domain::Source).is_ok());
        assert!(Image::new(Tensor::full([3, 48, 32], 0.3), Domain::Source).is_err());
        assert!(Image::new(Tensor::full([3, 32, 32], 1.5), Domain::Target).is_err());
    }
}
