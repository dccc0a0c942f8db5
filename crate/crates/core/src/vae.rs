//! Convolutional VAE used as a no-highlight gate.
//!
//! A frame passes the gate when its reconstruction objective (Bernoulli NLL
//! plus KL, evaluated with the deterministic code `z = mu`) stays at or below
//! a calibrated threshold. Frames that look nothing like the training
//! distribution reconstruct poorly and are rejected before classification.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::nn::adam::AdamState;
use crate::nn::checkpoint::{stack_from_checkpoint_layers, stack_to_checkpoint_layers, Checkpoint};
use crate::nn::layer::{Layer, Stack};
use crate::nn::ops;
use crate::nn::rng::rng_for;
use crate::nn::{NnError, Tensor};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

#[derive(Debug, Clone)]
pub struct VaeConfig {
    /// Square input side; must be divisible by 16 (four pooling stages).
    pub input_size: usize,
    pub latent_dim: usize,
    /// Encoder channel plan; the decoder mirrors it.
    pub channels: [usize; 4],
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Gate threshold on the total per-image loss, set by calibration.
    pub loss_threshold: Option<f64>,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            latent_dim: 32,
            channels: [16, 32, 64, 128],
            learning_rate: 1e-3,
            epochs: 20,
            batch_size: 16,
            loss_threshold: None,
        }
    }
}

impl VaeConfig {
    fn validate(&self) -> Result<(), NnError> {
        if self.input_size == 0 || self.input_size % 16 != 0 {
            return Err(NnError::Invalid(format!(
                "input size {} must be a positive multiple of 16",
                self.input_size
            )));
        }
        if self.latent_dim == 0 || self.batch_size == 0 {
            return Err(NnError::Invalid("latent dim and batch size must be positive".into()));
        }
        Ok(())
    }

    fn bottleneck_side(&self) -> usize {
        self.input_size / 16
    }

    fn flat_dim(&self) -> usize {
        self.channels[3] * self.bottleneck_side() * self.bottleneck_side()
    }
}

/// Encoder output for one batch: the clamped diagonal Gaussian parameters.
#[derive(Debug, Clone)]
pub struct GaussianCode {
    pub mu: Tensor,
    pub logvar: Tensor,
}

#[derive(Debug, Clone)]
pub struct VaeLossReport {
    /// Per-image reconstruction NLL (sum over pixels).
    pub recon: Vec<f64>,
    /// Per-image KL divergence to the unit Gaussian.
    pub kl: Vec<f64>,
}

impl VaeLossReport {
    pub fn total(&self) -> Vec<f64> {
        self.recon.iter().zip(&self.kl).map(|(r, k)| r + k).collect()
    }

    pub fn mean_total(&self) -> f64 {
        let t = self.total();
        t.iter().sum::<f64>() / t.len() as f64
    }
}

pub struct VaeModel {
    pub cfg: VaeConfig,
    pub encoder: Stack,
    pub fc_mu: Stack,
    pub fc_logvar: Stack,
    pub fc_dec: Stack,
    pub decoder: Stack,
}

impl VaeModel {
    pub fn new(cfg: VaeConfig, rng: &mut ChaCha8Rng) -> Result<Self, NnError> {
        cfg.validate()?;
        let [c0, c1, c2, c3] = cfg.channels;
        let mut enc = Vec::new();
        let mut prev = 3;
        for c in [c0, c1, c2, c3] {
            enc.push(Layer::conv(prev, c, 3, rng));
            enc.push(Layer::batchnorm(c));
            enc.push(Layer::Relu);
            enc.push(Layer::MaxPool2);
            prev = c;
        }
        enc.push(Layer::Flatten);
        let flat = cfg.flat_dim();
        let side = cfg.bottleneck_side();
        let mut dec = vec![Layer::Reshape { channels: c3, height: side, width: side }];
        for (from, to) in [(c3, c3), (c3, c2), (c2, c1), (c1, c0)] {
            dec.push(Layer::Upsample2);
            dec.push(Layer::conv_t(from, to, 3, rng));
            dec.push(Layer::batchnorm(to));
            dec.push(Layer::Relu);
        }
        // output stays in logit space; the loss applies the sigmoid
        dec.push(Layer::conv_t(c0, 3, 3, rng));
        Ok(Self {
            encoder: Stack::new(enc),
            fc_mu: Stack::new(vec![Layer::dense(flat, cfg.latent_dim, rng)]),
            fc_logvar: Stack::new(vec![Layer::dense(flat, cfg.latent_dim, rng)]),
            fc_dec: Stack::new(vec![Layer::dense(cfg.latent_dim, flat, rng)]),
            decoder: Stack::new(dec),
            cfg,
        })
    }

    fn check_batch(&self, x: &Tensor) -> Result<(), NnError> {
        let s = self.cfg.input_size;
        if x.rank() != 4 || x.shape()[1] != 3 || x.shape()[2] != s || x.shape()[3] != s {
            return Err(NnError::ShapeMismatch {
                expected: format!("[B,3,{},{}]", s, s),
                actual: format!("{:?}", x.shape()),
            });
        }
        if x.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(NnError::Invalid("image values must lie in [0,1]".into()));
        }
        Ok(())
    }

    /// Inference-mode encoding; logvar is clamped to `[-10, 10]`.
    pub fn encode(&self, x: &Tensor) -> Result<GaussianCode, NnError> {
        self.check_batch(x)?;
        let h = self.encoder.forward_infer(x)?;
        let mu = self.fc_mu.forward_infer(&h)?;
        let logvar = self.fc_logvar.forward_infer(&h)?.map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX));
        Ok(GaussianCode { mu, logvar })
    }

    /// `z = mu + exp(logvar/2) * eps` with standard normal `eps`.
    pub fn reparameterize(code: &GaussianCode, rng: &mut ChaCha8Rng) -> Tensor {
        let mut z = code.mu.clone();
        for (zi, &lv) in z.data_mut().iter_mut().zip(code.logvar.data()) {
            *zi += (0.5 * lv).exp() * randn(rng);
        }
        z
    }

    /// Inference-mode decoding to reconstruction logits.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor, NnError> {
        let d = self.fc_dec.forward_infer(z)?;
        self.decoder.forward_infer(&d)
    }

    /// Deterministic per-image loss report with `z = mu`, inference mode.
    pub fn loss_report(&self, x: &Tensor) -> Result<VaeLossReport, NnError> {
        let code = self.encode(x)?;
        let logits = self.decode(&code.mu)?;
        let (recon, _) = ops::bce_sum_from_logits(&logits, x)?;
        Ok(VaeLossReport { recon, kl: kl_per_image(&code) })
    }

    /// Deterministic total loss of a single `[3,S,S]` image.
    pub fn image_loss(&self, image: &Tensor) -> Result<f64, NnError> {
        let batch = image.clone().reshape(&[1, 3, self.cfg.input_size, self.cfg.input_size])?;
        Ok(self.loss_report(&batch)?.total()[0])
    }

    /// Gate decision: accept iff the deterministic loss is at or below the
    /// threshold.
    pub fn gate(&self, image: &Tensor, threshold: f64) -> Result<bool, NnError> {
        Ok(self.image_loss(image)? <= threshold)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder.params_mut();
        out.extend(self.fc_mu.params_mut());
        out.extend(self.fc_logvar.params_mut());
        out.extend(self.fc_dec.params_mut());
        out.extend(self.decoder.params_mut());
        out
    }

    fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// One training forward/backward pass over a batch. Accumulates parameter
    /// gradients of the mean total loss and returns that loss. `eps` of the
    /// batch latent shape drives the reparameterization; `None` means `z = mu`.
    pub fn accumulate_batch(&mut self, batch: &Tensor, eps: Option<&Tensor>) -> Result<f64, NnError> {
        self.check_batch(batch)?;
        let b = batch.shape()[0];
        let q = self.cfg.latent_dim;
        let (h, enc_caches) = self.encoder.forward_train(batch)?;
        let (mu, mu_caches) = self.fc_mu.forward_train(&h)?;
        let (lv_raw, lv_caches) = self.fc_logvar.forward_train(&h)?;
        let lv = lv_raw.map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX));
        if let Some(e) = eps {
            if e.shape() != [b, q] {
                return Err(NnError::ShapeMismatch {
                    expected: format!("[{},{}]", b, q),
                    actual: format!("{:?}", e.shape()),
                });
            }
        }
        let mut z = mu.clone();
        if let Some(e) = eps {
            for i in 0..b * q {
                z.data_mut()[i] += (0.5 * lv.data()[i]).exp() * e.data()[i];
            }
        }
        let (d, fc_dec_caches) = self.fc_dec.forward_train(&z)?;
        let (logits, dec_caches) = self.decoder.forward_train(&d)?;
        let (recon, glogits_raw) = ops::bce_sum_from_logits(&logits, batch)?;
        let code = GaussianCode { mu: mu.clone(), logvar: lv.clone() };
        let kl = kl_per_image(&code);
        let loss = recon.iter().zip(&kl).map(|(r, k)| r + k).sum::<f64>() / b as f64;

        let inv_b = 1.0 / b as f64;
        let glogits = glogits_raw.map(|g| g * inv_b);
        let gd = self.decoder.backward(&dec_caches, &glogits)?;
        let gz = self.fc_dec.backward(&fc_dec_caches, &gd)?;
        let mut gmu = gz.clone();
        let mut glv = Tensor::zeros(&[b, q]);
        for i in 0..b * q {
            gmu.data_mut()[i] += mu.data()[i] * inv_b;
            let mut g = 0.5 * (lv.data()[i].exp() - 1.0) * inv_b;
            if let Some(e) = eps {
                g += gz.data()[i] * e.data()[i] * 0.5 * (0.5 * lv.data()[i]).exp();
            }
            // the clamp kills the gradient outside its range
            let raw = lv_raw.data()[i];
            glv.data_mut()[i] = if (LOGVAR_MIN..LOGVAR_MAX).contains(&raw) { g } else { 0.0 };
        }
        let gh_mu = self.fc_mu.backward(&mu_caches, &gmu)?;
        let gh_lv = self.fc_logvar.backward(&lv_caches, &glv)?;
        let mut gh = gh_mu;
        for (a, b) in gh.data_mut().iter_mut().zip(gh_lv.data()) {
            *a += b;
        }
        self.encoder.backward(&enc_caches, &gh)?;
        Ok(loss)
    }

    // ---- checkpoint ----

    const SECTIONS: [&'static str; 5] = ["encoder", "fc_mu", "fc_logvar", "fc_dec", "decoder"];

    fn sections(&self) -> [&Stack; 5] {
        [&self.encoder, &self.fc_mu, &self.fc_logvar, &self.fc_dec, &self.decoder]
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let mut ckpt = Checkpoint::new("vae-gate");
        ckpt.meta.push(("input_size".into(), self.cfg.input_size.to_string()));
        ckpt.meta.push(("latent_dim".into(), self.cfg.latent_dim.to_string()));
        let ch: Vec<String> = self.cfg.channels.iter().map(|c| c.to_string()).collect();
        ckpt.meta.push(("channels".into(), ch.join(",")));
        if let Some(t) = self.cfg.loss_threshold {
            ckpt.meta.push(("loss_threshold".into(), format!("{:e}", t)));
        }
        for (name, stack) in Self::SECTIONS.iter().zip(self.sections()) {
            ckpt.meta.push((format!("{}_len", name), stack.layers.len().to_string()));
            ckpt.layers.extend(stack_to_checkpoint_layers(stack));
        }
        ckpt.save(path)
    }

    pub fn load(path: &Path) -> Result<VaeModel, NnError> {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.model != "vae-gate" {
            return Err(NnError::Checkpoint(format!("expected vae-gate model, got {}", ckpt.model)));
        }
        let ch: Vec<usize> = ckpt
            .meta_get("channels")?
            .split(',')
            .map(|s| s.parse())
            .collect::<Result<_, _>>()
            .map_err(|_| NnError::Checkpoint("bad channels meta".into()))?;
        if ch.len() != 4 {
            return Err(NnError::Checkpoint("channels meta must have 4 entries".into()));
        }
        let cfg = VaeConfig {
            input_size: ckpt.meta_usize("input_size")?,
            latent_dim: ckpt.meta_usize("latent_dim")?,
            channels: [ch[0], ch[1], ch[2], ch[3]],
            loss_threshold: match ckpt.meta_get("loss_threshold") {
                Ok(v) => Some(
                    v.parse().map_err(|_| NnError::Checkpoint("bad loss_threshold meta".into()))?,
                ),
                Err(_) => None,
            },
            ..VaeConfig::default()
        };
        cfg.validate()?;
        let mut stacks = Vec::new();
        let mut offset = 0;
        for name in Self::SECTIONS {
            let len = ckpt.meta_usize(&format!("{}_len", name))?;
            if offset + len > ckpt.layers.len() {
                return Err(NnError::Checkpoint("layer sections exceed layer list".into()));
            }
            stacks.push(stack_from_checkpoint_layers(&ckpt.layers[offset..offset + len])?);
            offset += len;
        }
        if offset != ckpt.layers.len() {
            return Err(NnError::Checkpoint("trailing layers outside any section".into()));
        }
        let mut it = stacks.into_iter();
        Ok(VaeModel {
            cfg,
            encoder: it.next().unwrap(),
            fc_mu: it.next().unwrap(),
            fc_logvar: it.next().unwrap(),
            fc_dec: it.next().unwrap(),
            decoder: it.next().unwrap(),
        })
    }
}

/// `KL(N(mu, diag(exp(lv))) || N(0, I))` per image:
/// `-0.5 * sum(1 + lv - mu^2 - exp(lv))`. Always nonnegative.
pub fn kl_per_image(code: &GaussianCode) -> Vec<f64> {
    let b = code.mu.shape()[0];
    let q = code.mu.shape()[1];
    (0..b)
        .map(|r| {
            let mut acc = 0.0;
            for i in r * q..(r + 1) * q {
                let (m, lv) = (code.mu.data()[i], code.logvar.data()[i]);
                acc += 1.0 + lv - m * m - lv.exp();
            }
            -0.5 * acc
        })
        .collect()
}

fn randn(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
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

#[derive(Debug, Clone)]
pub struct VaeTrainReport {
    pub epoch_train_loss: Vec<f64>,
    pub epoch_val_loss: Vec<f64>,
}

/// Train on in-distribution images. Shuffling, init and reparameterization
/// noise all derive from `seed`; identical inputs give identical models.
pub fn train_vae(
    cfg: &VaeConfig,
    train: &[Tensor],
    val: &[Tensor],
    seed: u64,
) -> Result<(VaeModel, VaeTrainReport), NnError> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(NnError::Invalid("train and val sets must be nonempty".into()));
    }
    let mut init_rng = rng_for(seed, &[0x7ae, 0]);
    let mut model = VaeModel::new(cfg.clone(), &mut init_rng)?;
    let mut adam = AdamState::new(cfg.learning_rate);
    let mut report = VaeTrainReport { epoch_train_loss: Vec::new(), epoch_val_loss: Vec::new() };
    for epoch in 0..cfg.epochs {
        let mut order_rng = rng_for(seed, &[0x7ae, 1, epoch as u64]);
        let order = crate::synth::shuffled_indices(train.len(), &mut order_rng);
        let mut noise_rng = rng_for(seed, &[0x7ae, 2, epoch as u64]);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let imgs: Vec<Tensor> = chunk.iter().map(|&i| train[i].clone()).collect();
            let batch = stack_images(&imgs)?;
            let eps = Tensor::from_vec(
                &[chunk.len(), cfg.latent_dim],
                (0..chunk.len() * cfg.latent_dim).map(|_| randn(&mut noise_rng)).collect(),
            );
            model.zero_grads();
            let loss = model.accumulate_batch(&batch, Some(&eps))?;
            adam.step(&mut model.params_mut())?;
            epoch_loss += loss;
            batches += 1.0;
        }
        report.epoch_train_loss.push(epoch_loss / batches);
        let val_batch = stack_images(val)?;
        report.epoch_val_loss.push(model.loss_report(&val_batch)?.mean_total());
    }
    Ok((model, report))
}

// ---------------------------------------------------------------------------
// threshold calibration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CalibrationReport {
    /// Chosen gate threshold.
    pub threshold: f64,
    /// Balanced accuracy at the chosen threshold.
    pub balanced_accuracy: f64,
    /// Every candidate threshold with its balanced accuracy, ascending.
    pub candidates: Vec<(f64, f64)>,
    pub positive_losses: Vec<f64>,
    pub negative_losses: Vec<f64>,
}

impl CalibrationReport {
    /// CSV dump: a sweep section and the two raw loss populations.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("section,threshold,balanced_accuracy\n");
        for (t, ba) in &self.candidates {
            out.push_str(&format!("sweep,{:.6},{:.6}\n", t, ba));
        }
        out.push_str("section,population,loss\n");
        for v in &self.positive_losses {
            out.push_str(&format!("loss,positive,{:.6}\n", v));
        }
        for v in &self.negative_losses {
            out.push_str(&format!("loss,negative,{:.6}\n", v));
        }
        out
    }
}

fn balanced_accuracy_at(threshold: f64, pos: &[f64], neg: &[f64]) -> f64 {
    let tp = pos.iter().filter(|&&v| v <= threshold).count() as f64;
    let tn = neg.iter().filter(|&&v| v > threshold).count() as f64;
    0.5 * (tp / pos.len() as f64 + tn / neg.len() as f64)
}

/// Sweep midpoints between adjacent sorted losses and pick the threshold with
/// the best balanced accuracy. `positive` are in-distribution losses the gate
/// should accept; `negative` should be rejected. Ties resolve to the lowest
/// threshold.
pub fn calibrate_threshold(positive: &[f64], negative: &[f64]) -> Result<CalibrationReport, NnError> {
    if positive.is_empty() || negative.is_empty() {
        return Err(NnError::Invalid("calibration needs both loss populations".into()));
    }
    if positive.iter().chain(negative).any(|v| !v.is_finite()) {
        return Err(NnError::Invalid("calibration losses must be finite".into()));
    }
    let mut all: Vec<f64> = positive.iter().chain(negative).copied().collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    all.dedup();
    let mut candidates = Vec::with_capacity(all.len() + 1);
    // below the smallest loss (reject everything) plus each midpoint
    candidates.push(all[0] - 1.0);
    for pair in all.windows(2) {
        candidates.push(0.5 * (pair[0] + pair[1]));
    }
    candidates.push(all[all.len() - 1]);
    let scored: Vec<(f64, f64)> =
        candidates.iter().map(|&t| (t, balanced_accuracy_at(t, positive, negative))).collect();
    let mut best = scored[0];
    for &(t, ba) in &scored[1..] {
        if ba > best.1 + 1e-12 {
            best = (t, ba);
        }
    }
    Ok(CalibrationReport {
        threshold: best.0,
        balanced_accuracy: best.1,
        candidates: scored,
        positive_losses: positive.to_vec(),
        negative_losses: negative.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{grad_check, sample_coords};

    fn tiny_cfg() -> VaeConfig {
        VaeConfig {
            input_size: 16,
            latent_dim: 4,
            channels: [4, 6, 6, 8],
            epochs: 2,
            batch_size: 2,
            ..VaeConfig::default()
        }
    }

    fn code(mu: Vec<f64>, lv: Vec<f64>) -> GaussianCode {
        let q = mu.len();
        GaussianCode {
            mu: Tensor::from_vec(&[1, q], mu),
            logvar: Tensor::from_vec(&[1, q], lv),
        }
    }

    #[test]
    fn kl_of_standard_normal_is_zero() {
        let c = code(vec![0.0; 8], vec![0.0; 8]);
        assert_eq!(kl_per_image(&c), vec![0.0]);
    }

    #[test]
    fn kl_unit_mean_is_half() {
        // mu=1, logvar=0, one dimension: -0.5*(1+0-1-1) = 0.5
        let c = code(vec![1.0], vec![0.0]);
        assert!((kl_per_image(&c)[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_is_nonnegative_everywhere() {
        let mut rng = rng_for(9, &[0]);
        for _ in 0..10_000 {
            let c = code(vec![rng.gen_range(-5.0..5.0)], vec![rng.gen_range(-8.0..8.0)]);
            assert!(kl_per_image(&c)[0] >= 0.0);
        }
    }

    use crate::nn::rng::rng_for;
    use rand::Rng;

    #[test]
    fn zero_logits_recon_is_ln2_per_pixel() {
        let s = 16;
        let logits = Tensor::zeros(&[1, 3, s, s]);
        let mut rng = rng_for(9, &[1]);
        let target =
            Tensor::from_vec(&[1, 3, s, s], (0..3 * s * s).map(|_| rng.gen_range(0.0..1.0)).collect());
        let (sums, _) = ops::bce_sum_from_logits(&logits, &target).unwrap();
        let expected = (3 * s * s) as f64 * std::f64::consts::LN_2;
        assert!((sums[0] - expected).abs() < 1e-9);
    }

    #[test]
    fn encode_decode_shapes() {
        let cfg = tiny_cfg();
        let mut rng = rng_for(9, &[2]);
        let model = VaeModel::new(cfg.clone(), &mut rng).unwrap();
        let x = Tensor::from_vec(
            &[2, 3, 16, 16],
            (0..2 * 3 * 256).map(|_| rng.gen_range(0.0..1.0)).collect(),
        );
        let c = model.encode(&x).unwrap();
        assert_eq!(c.mu.shape(), &[2, 4]);
        assert_eq!(c.logvar.shape(), &[2, 4]);
        assert!(c.logvar.data().iter().all(|&v| (LOGVAR_MIN..=LOGVAR_MAX).contains(&v)));
        let logits = model.decode(&c.mu).unwrap();
        assert_eq!(logits.shape(), &[2, 3, 16, 16]);
        let report = model.loss_report(&x).unwrap();
        assert_eq!(report.recon.len(), 2);
        assert_eq!(report.kl.len(), 2);
        assert!(report.total().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn loss_rejects_out_of_range_images() {
        let cfg = tiny_cfg();
        let mut rng = rng_for(9, &[3]);
        let model = VaeModel::new(cfg, &mut rng).unwrap();
        let mut x = Tensor::zeros(&[1, 3, 16, 16]);
        x.data_mut()[0] = 1.5;
        assert!(model.loss_report(&x).is_err());
    }

    #[test]
    fn construction_is_deterministic() {
        let cfg = tiny_cfg();
        let a = VaeModel::new(cfg.clone(), &mut rng_for(9, &[4])).unwrap();
        let b = VaeModel::new(cfg, &mut rng_for(9, &[4])).unwrap();
        let mut a = a;
        let mut b = b;
        for (p, q) in a.params_mut().iter().zip(b.params_mut().iter()) {
            assert_eq!(p.data(), q.data());
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_losses() {
        let cfg = VaeConfig { loss_threshold: Some(123.5), ..tiny_cfg() };
        let mut rng = rng_for(9, &[5]);
        let model = VaeModel::new(cfg, &mut rng).unwrap();
        let x = Tensor::from_vec(
            &[1, 3, 16, 16],
            (0..3 * 256).map(|_| rng.gen_range(0.0..1.0)).collect(),
        );
        let before = model.loss_report(&x).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vae.ckpt");
        model.save(&path).unwrap();
        let loaded = VaeModel::load(&path).unwrap();
        assert_eq!(loaded.cfg.loss_threshold, Some(123.5));
        assert_eq!(loaded.cfg.channels, [4, 6, 6, 8]);
        let after = loaded.loss_report(&x).unwrap();
        // f32 storage rounds the weights; losses agree to f32 precision
        for (a, b) in before.total().iter().zip(after.total()) {
            assert!((a - b).abs() / a.abs().max(1.0) < 1e-5, "{} vs {}", a, b);
        }
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        let cfg = tiny_cfg();
        let mut rng = rng_for(9, &[6]);
        let mut model = VaeModel::new(cfg.clone(), &mut rng).unwrap();
        let x = Tensor::from_vec(
            &[2, 3, 16, 16],
            (0..2 * 3 * 256).map(|_| rng.gen_range(0.05..0.95)).collect(),
        );
        let eps = Tensor::from_vec(&[2, 4], (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect());
        model.zero_grads();
        model.accumulate_batch(&x, Some(&eps)).unwrap();
        let snapshot: Vec<Vec<f64>> = model.params_mut().iter().map(|p| p.data().to_vec()).collect();
        let grads: Vec<Vec<f64>> =
            model.params_mut().iter().map(|p| p.grad().unwrap().to_vec()).collect();

        // check a few coordinates of an encoder conv, fc_mu, fc_logvar and a
        // decoder convT weight
        for &pi in &[0usize, 16, 18, 20, 22] {
            let param = Tensor::from_vec(
                &[snapshot[pi].len()],
                snapshot[pi].clone(),
            );
            let loss = |t: &Tensor| {
                let mut fresh = VaeModel::new(cfg.clone(), &mut rng_for(9, &[6])).unwrap();
                let mut params = fresh.params_mut();
                for (j, snap) in snapshot.iter().enumerate() {
                    params[j].data_mut().copy_from_slice(snap);
                }
                params[pi].data_mut().copy_from_slice(t.data());
                drop(params);
                fresh.accumulate_batch(&x, Some(&eps)).unwrap()
            };
            let coords = sample_coords(param.numel(), 3, &mut rng);
            let report = grad_check(loss, &param, &grads[pi], &coords, 1e-4);
            assert!(report.pass(), "param {} max rel err {}", pi, report.max_rel_err);
        }
    }

    #[test]
    fn training_reduces_loss_on_tiny_set() {
        let cfg = VaeConfig { epochs: 4, ..tiny_cfg() };
        let mut rng = rng_for(9, &[7]);
        let imgs: Vec<Tensor> = (0..4)
            .map(|_| {
                Tensor::from_vec(
                    &[3, 16, 16],
                    (0..3 * 256).map(|_| rng.gen_range(0.2..0.8)).collect(),
                )
            })
            .collect();
        let (_, report) = train_vae(&cfg, &imgs, &imgs[..2], 77).unwrap();
        assert_eq!(report.epoch_train_loss.len(), 4);
        assert!(report.epoch_train_loss.iter().all(|v| v.is_finite()));
        assert!(report.epoch_train_loss[3] < report.epoch_train_loss[0]);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = VaeConfig { epochs: 1, ..tiny_cfg() };
        let mut rng = rng_for(9, &[8]);
        let imgs: Vec<Tensor> = (0..3)
            .map(|_| {
                Tensor::from_vec(
                    &[3, 16, 16],
                    (0..3 * 256).map(|_| rng.gen_range(0.0..1.0)).collect(),
                )
            })
            .collect();
        let (mut a, ra) = train_vae(&cfg, &imgs, &imgs[..1], 5).unwrap();
        let (mut b, rb) = train_vae(&cfg, &imgs, &imgs[..1], 5).unwrap();
        assert_eq!(ra.epoch_train_loss, rb.epoch_train_loss);
        for (p, q) in a.params_mut().iter().zip(b.params_mut().iter()) {
            assert_eq!(p.data(), q.data());
        }
    }

    #[test]
    fn calibration_separates_disjoint_populations() {
        let pos: Vec<f64> = (0..20).map(|i| 2.0 + 0.15 * i as f64).collect(); // up to 4.85
        let neg: Vec<f64> = (0..20).map(|i| 6.0 + 0.2 * i as f64).collect(); // 6.0 .. 9.8
        let report = calibrate_threshold(&pos, &neg).unwrap();
        assert_eq!(report.balanced_accuracy, 1.0);
        assert!(report.threshold > 4.85 && report.threshold < 6.0);
        let csv = report.to_csv();
        assert!(csv.contains("sweep,"));
        assert!(csv.contains("loss,positive,"));
    }

    #[test]
    fn calibration_handles_overlap_and_rejects_nan() {
        let pos = vec![1.0, 2.0, 3.0, 4.0];
        let neg = vec![3.5, 4.5, 5.0, 6.0];
        let report = calibrate_threshold(&pos, &neg).unwrap();
        assert!(report.balanced_accuracy > 0.5 && report.balanced_accuracy < 1.0);
        // brute force over the same candidates agrees
        for &(t, ba) in &report.candidates {
            assert!(report.balanced_accuracy >= ba - 1e-12);
            let _ = t;
        }
        assert!(calibrate_threshold(&[f64::NAN], &[1.0]).is_err());
        assert!(calibrate_threshold(&[], &[1.0]).is_err());
    }
}
