//! Threshold-gated K-class CNN classifier.
//!
//! A small conv/bn/relu/pool trunk with global average pooling and a dense
//! softmax head. Predictions are only accepted when the top probability
//! strictly exceeds the acceptance threshold; everything else is reported as
//! "unsure" and left to the caller.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::nn::adam::AdamState;
use crate::nn::checkpoint::{stack_from_checkpoint_layers, stack_to_checkpoint_layers, Checkpoint};
use crate::nn::layer::{Layer, Stack};
use crate::nn::ops;
use crate::nn::rng::rng_for;
use crate::nn::{NnError, Tensor};

/// Default softmax acceptance threshold.
pub const DEFAULT_TAU: f64 = 0.9;

#[derive(Debug, Clone)]
pub struct ClassifierConfig {
    pub input_size: usize,
    pub class_names: Vec<String>,
    /// Conv trunk channel plan; each stage halves the spatial side.
    pub channels: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub augment: bool,
    /// Class indices that must never be horizontally flipped (mirror classes
    /// would swap identity under a flip).
    pub no_flip_classes: Vec<usize>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            class_names: Vec::new(),
            channels: vec![8, 16, 32, 64],
            learning_rate: 1e-3,
            epochs: 20,
            batch_size: 16,
            augment: true,
            no_flip_classes: Vec::new(),
        }
    }
}

impl ClassifierConfig {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    fn validate(&self) -> Result<(), NnError> {
        if self.class_names.len() < 2 {
            return Err(NnError::Invalid("need at least two classes".into()));
        }
        if self.channels.is_empty() {
            return Err(NnError::Invalid("channel plan must be nonempty".into()));
        }
        if self.input_size % (1 << self.channels.len()) != 0 {
            return Err(NnError::Invalid(format!(
                "input size {} not divisible by 2^{} pooling stages",
                self.input_size,
                self.channels.len()
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(NnError::Invalid("batch size and epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Outcome of a single thresholded classification.
#[derive(Debug, Clone)]
pub struct Verdict {
    pub probs: Vec<f64>,
    /// Accepted class index, or `None` when the top probability did not
    /// strictly exceed the threshold.
    pub accepted: Option<usize>,
}

impl Verdict {
    pub fn top(&self) -> (usize, f64) {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        (best, self.probs[best])
    }
}

pub struct Classifier {
    pub cfg: ClassifierConfig,
    pub stack: Stack,
}

impl Classifier {
    pub fn new(cfg: ClassifierConfig, rng: &mut ChaCha8Rng) -> Result<Self, NnError> {
        cfg.validate()?;
        let mut layers = Vec::new();
        let mut prev = 3;
        for &c in &cfg.channels {
            layers.push(Layer::conv(prev, c, 3, rng));
            layers.push(Layer::batchnorm(c));
            layers.push(Layer::Relu);
            layers.push(Layer::MaxPool2);
            prev = c;
        }
        layers.push(Layer::GlobalAvgPool);
        layers.push(Layer::dense(prev, cfg.num_classes(), rng));
        Ok(Self { cfg, stack: Stack::new(layers) })
    }

    fn check_batch(&self, x: &Tensor) -> Result<(), NnError> {
        let s = self.cfg.input_size;
        if x.rank() != 4 || x.shape()[1] != 3 || x.shape()[2] != s || x.shape()[3] != s {
            return Err(NnError::ShapeMismatch {
                expected: format!("[B,3,{},{}]", s, s),
                actual: format!("{:?}", x.shape()),
            });
        }
        Ok(())
    }

    /// Softmax probabilities for a batch, inference mode.
    pub fn predict_probs(&self, batch: &Tensor) -> Result<Tensor, NnError> {
        self.check_batch(batch)?;
        let logits = self.stack.forward_infer(batch)?;
        ops::softmax_rows(&logits)
    }

    /// Classify one `[3,S,S]` image with strict threshold acceptance.
    pub fn classify_with_threshold(&self, image: &Tensor, tau: f64) -> Result<Verdict, NnError> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(NnError::Invalid(format!("threshold {} outside [0,1]", tau)));
        }
        let s = self.cfg.input_size;
        let batch = image.clone().reshape(&[1, 3, s, s])?;
        let probs = self.predict_probs(&batch)?;
        let v = Verdict { probs: probs.data().to_vec(), accepted: None };
        let (top, p) = v.top();
        Ok(Verdict { accepted: (p > tau).then_some(top), ..v })
    }

    /// Top-1 accuracy over a labeled set, inference mode.
    pub fn accuracy(&self, data: &[(Tensor, usize)]) -> Result<f64, NnError> {
        if data.is_empty() {
            return Err(NnError::Invalid("empty evaluation set".into()));
        }
        let mut hits = 0usize;
        for chunk in data.chunks(32) {
            let imgs: Vec<Tensor> = chunk.iter().map(|(t, _)| t.clone()).collect();
            let batch = stack_images(&imgs)?;
            let probs = self.predict_probs(&batch)?;
            let k = self.cfg.num_classes();
            for (r, (_, label)) in chunk.iter().enumerate() {
                let row = &probs.data()[r * k..(r + 1) * k];
                let argmax = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                if argmax == *label {
                    hits += 1;
                }
            }
        }
        Ok(hits as f64 / data.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let mut ckpt = Checkpoint::new("classifier");
        ckpt.meta.push(("input_size".into(), self.cfg.input_size.to_string()));
        ckpt.meta.push(("class_names".into(), self.cfg.class_names.join(",")));
        let nf: Vec<String> = self.cfg.no_flip_classes.iter().map(|i| i.to_string()).collect();
        ckpt.meta.push(("no_flip_classes".into(), nf.join(",")));
        ckpt.layers = stack_to_checkpoint_layers(&self.stack);
        ckpt.save(path)
    }

    pub fn load(path: &Path) -> Result<Classifier, NnError> {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.model != "classifier" {
            return Err(NnError::Checkpoint(format!("expected classifier model, got {}", ckpt.model)));
        }
        let class_names: Vec<String> =
            ckpt.meta_get("class_names")?.split(',').map(|s| s.to_string()).collect();
        let no_flip = ckpt.meta_get("no_flip_classes")?;
        let no_flip_classes: Vec<usize> = if no_flip.is_empty() {
            Vec::new()
        } else {
            no_flip
                .split(',')
                .map(|s| s.parse())
                .collect::<Result<_, _>>()
                .map_err(|_| NnError::Checkpoint("bad no_flip_classes meta".into()))?
        };
        let cfg = ClassifierConfig {
            input_size: ckpt.meta_usize("input_size")?,
            class_names,
            no_flip_classes,
            ..ClassifierConfig::default()
        };
        let stack = stack_from_checkpoint_layers(&ckpt.layers)?;
        Ok(Classifier { cfg, stack })
    }
}

fn stack_images(images: &[Tensor]) -> Result<Tensor, NnError> {
    if images.is_empty() {
        return Err(NnError::Invalid("empty image batch".into()));
    }
    let shape = images[0].shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * images[0].numel());
    for img in images {
        if img.shape() != shape {
            return Err(NnError::ShapeMismatch {
                expected: format!("{:?}", shape),
                actual: format!("{:?}", img.shape()),
            });
        }
        data.extend_from_slice(img.data());
    }
    let mut full = vec![images.len()];
    full.extend_from_slice(&shape);
    Ok(Tensor::from_vec(&full, data))
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct Augmentation {
    /// Uniform scale factor around the image center.
    pub scale: f64,
    /// Rotation in degrees.
    pub rotate_deg: f64,
    /// Translation as a fraction of the image side.
    pub shift_y: f64,
    pub shift_x: f64,
    pub hflip: bool,
}

impl Augmentation {
    pub const IDENTITY: Augmentation =
        Augmentation { scale: 1.0, rotate_deg: 0.0, shift_y: 0.0, shift_x: 0.0, hflip: false };

    /// Scale and shift within 10%, rotation within 10 degrees, flip with
    /// probability one half unless suppressed.
    pub fn sample(rng: &mut ChaCha8Rng, allow_flip: bool) -> Augmentation {
        Augmentation {
            scale: rng.gen_range(0.9..1.1),
            rotate_deg: rng.gen_range(-10.0..10.0),
            shift_y: rng.gen_range(-0.1..0.1),
            shift_x: rng.gen_range(-0.1..0.1),
            hflip: allow_flip && rng.gen_bool(0.5),
        }
    }
}

/// Apply an affine augmentation to a `[3,S,S]` image with nearest sampling;
/// out-of-frame samples clamp to the border.
pub fn augment_image(image: &Tensor, aug: &Augmentation) -> Tensor {
    let s = image.shape()[1];
    debug_assert_eq!(image.shape(), &[3, s, s]);
    if aug.scale == 1.0 && aug.rotate_deg == 0.0 && aug.shift_y == 0.0 && aug.shift_x == 0.0 && !aug.hflip
    {
        return image.clone();
    }
    let c = (s as f64 - 1.0) / 2.0;
    let theta = aug.rotate_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let inv_scale = 1.0 / aug.scale;
    let mut out = vec![0.0; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            // inverse map: undo shift, rotation, scale, flip
            let dy = y as f64 - c - aug.shift_y * s as f64;
            let dx = x as f64 - c - aug.shift_x * s as f64;
            let sy = (cos * dy + sin * dx) * inv_scale;
            let sx = (-sin * dy + cos * dx) * inv_scale;
            let mut src_y = (sy + c).round();
            let mut src_x = (sx + c).round();
            src_y = src_y.clamp(0.0, (s - 1) as f64);
            src_x = src_x.clamp(0.0, (s - 1) as f64);
            let mut xi = src_x as usize;
            if aug.hflip {
                xi = s - 1 - xi;
            }
            let yi = src_y as usize;
            for ch in 0..3 {
                out[(ch * s + y) * s + x] = image.data()[(ch * s + yi) * s + xi];
            }
        }
    }
    Tensor::from_vec(&[3, s, s], out)
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ClassifierTrainReport {
    pub epoch_train_loss: Vec<f64>,
    pub epoch_val_accuracy: Vec<f64>,
}

/// Train a classifier from labeled images. All randomness derives from
/// `seed`.
pub fn train_classifier(
    cfg: &ClassifierConfig,
    train: &[(Tensor, usize)],
    val: &[(Tensor, usize)],
    seed: u64,
) -> Result<(Classifier, ClassifierTrainReport), NnError> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(NnError::Invalid("train and val sets must be nonempty".into()));
    }
    let k = cfg.num_classes();
    for (_, label) in train.iter().chain(val) {
        if *label >= k {
            return Err(NnError::Invalid(format!("label {} outside {} classes", label, k)));
        }
    }
    let mut init_rng = rng_for(seed, &[0xc1a, 0]);
    let mut model = Classifier::new(cfg.clone(), &mut init_rng)?;
    let mut adam = AdamState::new(cfg.learning_rate);
    let mut report =
        ClassifierTrainReport { epoch_train_loss: Vec::new(), epoch_val_accuracy: Vec::new() };
    for epoch in 0..cfg.epochs {
        let mut order_rng = rng_for(seed, &[0xc1a, 1, epoch as u64]);
        let order = crate::synth::shuffled_indices(train.len(), &mut order_rng);
        let mut aug_rng = rng_for(seed, &[0xc1a, 2, epoch as u64]);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut imgs = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (img, label) = &train[i];
                let img = if cfg.augment {
                    let allow_flip = !cfg.no_flip_classes.contains(label);
                    augment_image(img, &Augmentation::sample(&mut aug_rng, allow_flip))
                } else {
                    img.clone()
                };
                imgs.push(img);
                labels.push(*label);
            }
            let batch = stack_images(&imgs)?;
            let (logits, caches) = model.stack.forward_train(&batch)?;
            let (loss, glogits) = ops::softmax_ce_with_grad(&logits, &labels)?;
            model.stack.zero_grads();
            model.stack.backward(&caches, &glogits)?;
            adam.step(&mut model.stack.params_mut())?;
            epoch_loss += loss;
            batches += 1.0;
        }
        report.epoch_train_loss.push(epoch_loss / batches);
        report.epoch_val_accuracy.push(model.accuracy(val)?);
    }
    Ok((model, report))
}
