//! Fine-grain yellow/red card discrimination.
//!
//! A shared CNN trunk feeds a one-squeeze multi-excitation block: the pooled
//! feature vector is squeezed once, then each branch derives a channel mask
//! in (0,1) and its own attended feature vector. Classification runs on the
//! concatenated branch features; training adds an n-pair softmax contrast
//! (the multi-attention multi-class constraint) that pulls same-class
//! features of the same branch together.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::nn::adam::AdamState;
use crate::nn::checkpoint::{
    stack_from_checkpoint_layers, stack_to_checkpoint_layers, Checkpoint, CheckpointLayer,
    CheckpointTensor,
};
use crate::nn::init;
use crate::nn::layer::{Layer, Stack};
use crate::nn::ops;
use crate::nn::rng::rng_for;
use crate::nn::{NnError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CardColor {
    Yellow,
    Red,
}

impl CardColor {
    pub fn index(self) -> usize {
        match self {
            CardColor::Yellow => 0,
            CardColor::Red => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<CardColor> {
        match i {
            0 => Some(CardColor::Yellow),
            1 => Some(CardColor::Red),
            _ => None,
        }
    }
}

/// Two-way verdict; confidence is the softmax max, always in (0.5, 1].
#[derive(Debug, Clone, Copy)]
pub struct CardVerdict {
    pub color: CardColor,
    pub confidence: f64,
}

#[derive(Debug, Clone)]
pub struct FinegrainConfig {
    pub input_size: usize,
    /// Trunk channel plan; each stage halves the spatial side.
    pub channels: Vec<usize>,
    /// Attention branches.
    pub branches: usize,
    /// Per-branch feature width.
    pub feature_dim: usize,
    /// Squeeze-excitation bottleneck width.
    pub reduction_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda_mamc: f64,
}

impl Default for FinegrainConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            channels: vec![8, 16, 32, 64],
            branches: 2,
            feature_dim: 64,
            reduction_dim: 16,
            learning_rate: 1e-3,
            epochs: 20,
            batch_size: 16,
            lambda_mamc: 0.5,
        }
    }
}

impl FinegrainConfig {
    fn validate(&self) -> Result<(), NnError> {
        if self.branches < 2 {
            return Err(NnError::Invalid("need at least two attention branches".into()));
        }
        if self.channels.is_empty() || self.feature_dim == 0 || self.reduction_dim == 0 {
            return Err(NnError::Invalid("trunk and branch dimensions must be positive".into()));
        }
        if self.input_size % (1 << self.channels.len()) != 0 {
            return Err(NnError::Invalid(format!(
                "input size {} not divisible by 2^{} pooling stages",
                self.input_size,
                self.channels.len()
            )));
        }
        if self.batch_size < 4 {
            return Err(NnError::Invalid("batch size must be at least 4 (2 per class)".into()));
        }
        Ok(())
    }

    fn trunk_channels(&self) -> usize {
        *self.channels.last().unwrap()
    }
}

/// One excitation branch: squeeze -> bottleneck -> channel mask -> feature.
pub struct Branch {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub wf: Tensor,
    pub bf: Tensor,
}

impl Branch {
    fn new(c: usize, reduction: usize, d: usize, rng: &mut ChaCha8Rng) -> Branch {
        Branch {
            w1: init::dense_weight(reduction, c, rng).with_grad(),
            b1: Tensor::zeros(&[reduction]).with_grad(),
            w2: init::dense_weight(c, reduction, rng).with_grad(),
            b2: Tensor::zeros(&[c]).with_grad(),
            wf: init::dense_weight(d, c, rng).with_grad(),
            bf: Tensor::zeros(&[d]).with_grad(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2, &mut self.wf, &mut self.bf]
    }
}

/// Per-branch attended features and their channel masks for one batch.
pub struct AttentionFeatures {
    /// `[B,D]` per branch.
    pub features: Vec<Tensor>,
    /// `[B,C]` per branch, entries in (0,1).
    pub masks: Vec<Tensor>,
}

struct BranchCache {
    h1: Tensor,
    r1: Tensor,
    mask: Tensor,
    masked: Tensor,
}

/// Run the excitation branches over a pooled squeeze vector `[B,C]`.
fn branch_forward(branch: &Branch, squeeze: &Tensor) -> Result<(Tensor, BranchCache), NnError> {
    let h1 = ops::dense(squeeze, &branch.w1, &branch.b1)?;
    let r1 = ops::relu(&h1);
    let mask = ops::sigmoid(&ops::dense(&r1, &branch.w2, &branch.b2)?);
    let mut masked = squeeze.clone();
    for (m, &w) in masked.data_mut().iter_mut().zip(mask.data()) {
        *m *= w;
    }
    let f = ops::dense(&masked, &branch.wf, &branch.bf)?;
    Ok((f, BranchCache { h1, r1, mask, masked }))
}

fn branch_backward(
    branch: &mut Branch,
    squeeze: &Tensor,
    cache: &BranchCache,
    gf: &Tensor,
) -> Result<Tensor, NnError> {
    let (gmasked, gwf, gbf) = ops::dense_backward(&cache.masked, &branch.wf, gf);
    branch.wf.accumulate_grad(gwf.data());
    branch.bf.accumulate_grad(gbf.data());
    let mut gmask = gmasked.clone();
    let mut gsqueeze = gmasked.clone();
    for i in 0..gmask.numel() {
        gmask.data_mut()[i] = gmasked.data()[i] * squeeze.data()[i];
        gsqueeze.data_mut()[i] = gmasked.data()[i] * cache.mask.data()[i];
    }
    let gexc = ops::sigmoid_backward_from_y(&cache.mask, &gmask);
    let (gr1, gw2, gb2) = ops::dense_backward(&cache.r1, &branch.w2, &gexc);
    branch.w2.accumulate_grad(gw2.data());
    branch.b2.accumulate_grad(gb2.data());
    let gh1 = ops::relu_backward(&cache.h1, &gr1);
    let (gsq, gw1, gb1) = ops::dense_backward(squeeze, &branch.w1, &gh1);
    branch.w1.accumulate_grad(gw1.data());
    branch.b1.accumulate_grad(gb1.data());
    for (a, b) in gsqueeze.data_mut().iter_mut().zip(gsq.data()) {
        *a += b;
    }
    Ok(gsqueeze)
}

/// One-squeeze multi-excitation over a feature map `[B,C,H,W]`. The channel
/// masks are constant over space, so attended pooling reduces to masking the
/// squeeze vector itself.
pub fn osme_forward(feature_map: &Tensor, branches: &[Branch]) -> Result<AttentionFeatures, NnError> {
    let squeeze = ops::global_avg_pool(feature_map)?;
    let mut features = Vec::with_capacity(branches.len());
    let mut masks = Vec::with_capacity(branches.len());
    for branch in branches {
        let (f, cache) = branch_forward(branch, &squeeze)?;
        if f.data().iter().any(|v| !v.is_finite()) {
            return Err(NnError::Invalid("non-finite attention feature".into()));
        }
        features.push(f);
        masks.push(cache.mask);
    }
    Ok(AttentionFeatures { features, masks })
}

// ---------------------------------------------------------------------------
// MAMC loss
// ---------------------------------------------------------------------------

/// N-pair softmax contrast for one branch. Features are L2-normalized, then
/// for each anchor `i`: `-ln( sum_pos exp(s_ij) / sum_{k != i} exp(s_ik) )`,
/// positives being the other same-class rows. Returns the mean over anchors
/// and the gradient w.r.t. the raw features.
pub fn mamc_loss_grad(features: &Tensor, labels: &[usize]) -> Result<(f64, Tensor), NnError> {
    let (b, d) = (features.shape()[0], features.shape()[1]);
    if labels.len() != b {
        return Err(NnError::ShapeMismatch {
            expected: format!("{} labels", b),
            actual: format!("{}", labels.len()),
        });
    }
    for i in 0..b {
        let same = labels.iter().filter(|&&l| l == labels[i]).count();
        if same < 2 {
            return Err(NnError::Invalid(format!(
                "class {} has a single sample; the contrast needs at least two",
                labels[i]
            )));
        }
    }
    let mut norms = vec![0.0; b];
    let mut unit = vec![0.0; b * d];
    for i in 0..b {
        let row = &features.data()[i * d..(i + 1) * d];
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        norms[i] = n;
        for j in 0..d {
            unit[i * d + j] = row[j] / n;
        }
    }
    let sim = |i: usize, k: usize| -> f64 {
        (0..d).map(|j| unit[i * d + j] * unit[k * d + j]).sum()
    };
    let mut loss = 0.0;
    // gradient w.r.t. the unit vectors, then pulled back through the
    // normalization
    let mut gunit = vec![0.0; b * d];
    let inv_b = 1.0 / b as f64;
    for i in 0..b {
        let mut num = 0.0;
        let mut den = 0.0;
        for k in 0..b {
            if k == i {
                continue;
            }
            let e = sim(i, k).exp();
            den += e;
            if labels[k] == labels[i] {
                num += e;
            }
        }
        loss += -(num / den).ln();
        for k in 0..b {
            if k == i {
                continue;
            }
            let e = sim(i, k).exp();
            let mut g = e / den;
            if labels[k] == labels[i] {
                g -= e / num;
            }
            let g = g * inv_b;
            for j in 0..d {
                gunit[i * d + j] += g * unit[k * d + j];
                gunit[k * d + j] += g * unit[i * d + j];
            }
        }
    }
    let mut grad = vec![0.0; b * d];
    for i in 0..b {
        let u = &unit[i * d..(i + 1) * d];
        let gu = &gunit[i * d..(i + 1) * d];
        let dot: f64 = u.iter().zip(gu).map(|(a, b)| a * b).sum();
        for j in 0..d {
            grad[i * d + j] = (gu[j] - dot * u[j]) / norms[i];
        }
    }
    Ok((loss * inv_b, Tensor::from_vec(&[b, d], grad)))
}

/// Mean contrast over all branches.
pub fn mamc_loss(features: &AttentionFeatures, labels: &[usize]) -> Result<f64, NnError> {
    let mut total = 0.0;
    for f in &features.features {
        total += mamc_loss_grad(f, labels)?.0;
    }
    Ok(total / features.features.len() as f64)
}

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

pub struct FinegrainModel {
    pub cfg: FinegrainConfig,
    pub trunk: Stack,
    pub branches: Vec<Branch>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl FinegrainModel {
    pub fn new(cfg: FinegrainConfig, rng: &mut ChaCha8Rng) -> Result<Self, NnError> {
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
        let c = cfg.trunk_channels();
        let branches = (0..cfg.branches)
            .map(|_| Branch::new(c, cfg.reduction_dim, cfg.feature_dim, rng))
            .collect();
        let concat = cfg.branches * cfg.feature_dim;
        Ok(Self {
            trunk: Stack::new(layers),
            branches,
            head_w: init::dense_weight(2, concat, rng).with_grad(),
            head_b: Tensor::zeros(&[2]).with_grad(),
            cfg,
        })
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.trunk.params_mut();
        for b in &mut self.branches {
            out.extend(b.params_mut());
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn concat_features(&self, features: &[Tensor]) -> Tensor {
        let b = features[0].shape()[0];
        let d = self.cfg.feature_dim;
        let p = features.len();
        let mut data = vec![0.0; b * p * d];
        for (pi, f) in features.iter().enumerate() {
            for r in 0..b {
                data[r * p * d + pi * d..r * p * d + (pi + 1) * d]
                    .copy_from_slice(&f.data()[r * d..(r + 1) * d]);
            }
        }
        Tensor::from_vec(&[b, p * d], data)
    }

    /// Inference logits for a `[B,3,S,S]` batch.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor, NnError> {
        let fmap = self.trunk.forward_infer(batch)?;
        let att = osme_forward(&fmap, &self.branches)?;
        ops::dense(&self.concat_features(&att.features), &self.head_w, &self.head_b)
    }

    pub fn classify_card(&self, image: &Tensor) -> Result<CardVerdict, NnError> {
        let s = self.cfg.input_size;
        let batch = image.clone().reshape(&[1, 3, s, s])?;
        let probs = ops::softmax_rows(&self.logits(&batch)?)?;
        let (y, r) = (probs.data()[0], probs.data()[1]);
        Ok(if r > y {
            CardVerdict { color: CardColor::Red, confidence: r }
        } else {
            CardVerdict { color: CardColor::Yellow, confidence: y }
        })
    }

    pub fn accuracy(&self, data: &[(Tensor, usize)]) -> Result<f64, NnError> {
        if data.is_empty() {
            return Err(NnError::Invalid("empty evaluation set".into()));
        }
        let mut hits = 0usize;
        for (img, label) in data {
            let v = self.classify_card(img)?;
            if v.color.index() == *label {
                hits += 1;
            }
        }
        Ok(hits as f64 / data.len() as f64)
    }

    /// One training pass over a batch: accumulates gradients of
    /// `CE + lambda * MAMC` and returns the two loss terms.
    pub fn accumulate_batch(&mut self, batch: &Tensor, labels: &[usize]) -> Result<(f64, f64), NnError> {
        let (fmap, trunk_caches) = self.trunk.forward_train(batch)?;
        let squeeze = ops::global_avg_pool(&fmap)?;
        let mut feats = Vec::new();
        let mut caches = Vec::new();
        for branch in &self.branches {
            let (f, cache) = branch_forward(branch, &squeeze)?;
            feats.push(f);
            caches.push(cache);
        }
        let concat = self.concat_features(&feats);
        let logits = ops::dense(&concat, &self.head_w, &self.head_b)?;
        let (ce, glogits) = ops::softmax_ce_with_grad(&logits, labels)?;

        let (gconcat, ghw, ghb) = ops::dense_backward(&concat, &self.head_w, &glogits);
        self.head_w.accumulate_grad(ghw.data());
        self.head_b.accumulate_grad(ghb.data());

        let b = batch.shape()[0];
        let d = self.cfg.feature_dim;
        let p = self.branches.len();
        let lam = self.cfg.lambda_mamc / p as f64;
        let mut mamc_total = 0.0;
        let mut gsqueeze = Tensor::zeros(squeeze.shape());
        for (pi, branch) in self.branches.iter_mut().enumerate() {
            let mut gf = Tensor::zeros(&[b, d]);
            for r in 0..b {
                gf.data_mut()[r * d..(r + 1) * d]
                    .copy_from_slice(&gconcat.data()[r * p * d + pi * d..r * p * d + (pi + 1) * d]);
            }
            if self.cfg.lambda_mamc != 0.0 {
                let (ml, mg) = mamc_loss_grad(&feats[pi], labels)?;
                mamc_total += ml;
                for (a, g) in gf.data_mut().iter_mut().zip(mg.data()) {
                    *a += lam * g;
                }
            }
            let gsq = branch_backward(branch, &squeeze, &caches[pi], &gf)?;
            for (a, g) in gsqueeze.data_mut().iter_mut().zip(gsq.data()) {
                *a += g;
            }
        }
        let gfmap = ops::global_avg_pool_backward(fmap.shape(), &gsqueeze);
        self.trunk.backward(&trunk_caches, &gfmap)?;
        Ok((ce, mamc_total / p as f64))
    }

    // ---- checkpoint ----

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let mut ckpt = Checkpoint::new("finegrain");
        ckpt.meta.push(("input_size".into(), self.cfg.input_size.to_string()));
        ckpt.meta.push(("branches".into(), self.cfg.branches.to_string()));
        ckpt.meta.push(("feature_dim".into(), self.cfg.feature_dim.to_string()));
        ckpt.meta.push(("reduction_dim".into(), self.cfg.reduction_dim.to_string()));
        ckpt.meta.push(("trunk_len".into(), self.trunk.layers.len().to_string()));
        ckpt.layers = stack_to_checkpoint_layers(&self.trunk);
        for branch in &self.branches {
            for (name, w, b) in [
                ("excite1", &branch.w1, &branch.b1),
                ("excite2", &branch.w2, &branch.b2),
                ("feature", &branch.wf, &branch.bf),
            ] {
                ckpt.layers.push(dense_layer(name, w, b));
            }
        }
        ckpt.layers.push(dense_layer("head", &self.head_w, &self.head_b));
        ckpt.save(path)
    }

    pub fn load(path: &Path) -> Result<FinegrainModel, NnError> {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.model != "finegrain" {
            return Err(NnError::Checkpoint(format!("expected finegrain model, got {}", ckpt.model)));
        }
        let trunk_len = ckpt.meta_usize("trunk_len")?;
        let p = ckpt.meta_usize("branches")?;
        if ckpt.layers.len() != trunk_len + 3 * p + 1 {
            return Err(NnError::Checkpoint("layer count does not match manifest meta".into()));
        }
        let trunk = stack_from_checkpoint_layers(&ckpt.layers[..trunk_len])?;
        let mut channels = Vec::new();
        for l in &trunk.layers {
            if let Layer::Conv { weight, .. } = l {
                channels.push(weight.shape()[0]);
            }
        }
        let mut branches = Vec::new();
        for bi in 0..p {
            let base = trunk_len + bi * 3;
            let (w1, b1) = dense_tensors(&ckpt.layers[base])?;
            let (w2, b2) = dense_tensors(&ckpt.layers[base + 1])?;
            let (wf, bf) = dense_tensors(&ckpt.layers[base + 2])?;
            branches.push(Branch { w1, b1, w2, b2, wf, bf });
        }
        let (head_w, head_b) = dense_tensors(&ckpt.layers[trunk_len + 3 * p])?;
        let cfg = FinegrainConfig {
            input_size: ckpt.meta_usize("input_size")?,
            channels,
            branches: p,
            feature_dim: ckpt.meta_usize("feature_dim")?,
            reduction_dim: ckpt.meta_usize("reduction_dim")?,
            ..FinegrainConfig::default()
        };
        cfg.validate()?;
        Ok(FinegrainModel { cfg, trunk, branches, head_w, head_b })
    }
}

fn dense_layer(name: &str, w: &Tensor, b: &Tensor) -> CheckpointLayer {
    CheckpointLayer {
        kind: "dense".into(),
        hyper: vec![("role".into(), name.into())],
        tensors: vec![
            CheckpointTensor {
                name: "weight".into(),
                shape: w.shape().to_vec(),
                data: w.data().iter().map(|&v| v as f32).collect(),
            },
            CheckpointTensor {
                name: "bias".into(),
                shape: b.shape().to_vec(),
                data: b.data().iter().map(|&v| v as f32).collect(),
            },
        ],
    }
}

fn dense_tensors(layer: &CheckpointLayer) -> Result<(Tensor, Tensor), NnError> {
    if layer.kind != "dense" || layer.tensors.len() != 2 {
        return Err(NnError::Checkpoint("expected a dense parameter layer".into()));
    }
    let as_tensor = |t: &CheckpointTensor| {
        Tensor::from_vec(&t.shape, t.data.iter().map(|&v| v as f64).collect()).with_grad()
    };
    Ok((as_tensor(&layer.tensors[0]), as_tensor(&layer.tensors[1])))
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FinegrainTrainReport {
    pub epoch_ce_loss: Vec<f64>,
    pub epoch_mamc_loss: Vec<f64>,
    pub epoch_val_accuracy: Vec<f64>,
}

fn stack_images(images: &[&Tensor]) -> Tensor {
    let shape = images[0].shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * images[0].numel());
    for img in images {
        data.extend_from_slice(img.data());
    }
    let mut full = vec![images.len()];
    full.extend_from_slice(&shape);
    Tensor::from_vec(&full, data)
}

/// Train on labeled cards (0 = yellow, 1 = red). Batches are stratified so
/// every batch holds at least two samples of each class, which the contrast
/// loss requires.
pub fn train_finegrain(
    cfg: &FinegrainConfig,
    train: &[(Tensor, usize)],
    val: &[(Tensor, usize)],
    seed: u64,
) -> Result<(FinegrainModel, FinegrainTrainReport), NnError> {
    cfg.validate()?;
    let yellows: Vec<usize> = (0..train.len()).filter(|&i| train[i].1 == 0).collect();
    let reds: Vec<usize> = (0..train.len()).filter(|&i| train[i].1 == 1).collect();
    if yellows.len() < 2 || reds.len() < 2 {
        return Err(NnError::Invalid("need at least two training samples of each card color".into()));
    }
    if val.is_empty() {
        return Err(NnError::Invalid("validation set must be nonempty".into()));
    }
    let mut init_rng = rng_for(seed, &[0xf16, 0]);
    let mut model = FinegrainModel::new(cfg.clone(), &mut init_rng)?;
    let mut adam = AdamState::new(cfg.learning_rate);
    let mut report = FinegrainTrainReport {
        epoch_ce_loss: Vec::new(),
        epoch_mamc_loss: Vec::new(),
        epoch_val_accuracy: Vec::new(),
    };
    let half = cfg.batch_size / 2;
    for epoch in 0..cfg.epochs {
        let mut order_rng = rng_for(seed, &[0xf16, 1, epoch as u64]);
        let ys = crate::synth::shuffled_indices(yellows.len(), &mut order_rng);
        let rs = crate::synth::shuffled_indices(reds.len(), &mut order_rng);
        let mut epoch_ce = 0.0;
        let mut epoch_mamc = 0.0;
        let mut batches = 0.0;
        let steps = (ys.len().max(rs.len()) + half - 1) / half;
        for step in 0..steps {
            // cycle each class independently so every batch is half and half
            let mut imgs: Vec<&Tensor> = Vec::with_capacity(2 * half);
            let mut labels = Vec::with_capacity(2 * half);
            for j in 0..half {
                let yi = yellows[ys[(step * half + j) % ys.len()]];
                imgs.push(&train[yi].0);
                labels.push(0);
            }
            for j in 0..half {
                let ri = reds[rs[(step * half + j) % rs.len()]];
                imgs.push(&train[ri].0);
                labels.push(1);
            }
            let batch = stack_images(&imgs);
            model.zero_grads();
            let (ce, mamc) = model.accumulate_batch(&batch, &labels)?;
            adam.step(&mut model.params_mut())?;
            epoch_ce += ce;
            epoch_mamc += mamc;
            batches += 1.0;
        }
        report.epoch_ce_loss.push(epoch_ce / batches);
        report.epoch_mamc_loss.push(epoch_mamc / batches);
        report.epoch_val_accuracy.push(model.accuracy(val)?);
    }
    Ok((model, report))
}
