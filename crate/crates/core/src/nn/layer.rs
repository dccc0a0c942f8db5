//! Sequential layer stack with explicit per-layer caches for backward.

use rand_chacha::ChaCha8Rng;

use crate::nn::init;
use crate::nn::ops::{self, BnCache, Pad};
use crate::nn::tensor::Tensor;
use crate::nn::NnError;

pub enum Layer {
    Conv {
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        pad: Pad,
    },
    /// Adjoint convolution; `weight` uses conv layout `[In,Out,K,K]`.
    ConvT {
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        pad: Pad,
    },
    Dense {
        weight: Tensor,
        bias: Tensor,
    },
    BatchNorm {
        gamma: Tensor,
        beta: Tensor,
        running_mean: Tensor,
        running_var: Tensor,
        momentum: f64,
        eps: f64,
    },
    Relu,
    Sigmoid,
    MaxPool2,
    Upsample2,
    Flatten,
    Reshape {
        channels: usize,
        height: usize,
        width: usize,
    },
    GlobalAvgPool,
}

impl Layer {
    pub fn conv(in_c: usize, out_c: usize, k: usize, rng: &mut ChaCha8Rng) -> Layer {
        Layer::Conv {
            weight: init::conv_weight(out_c, in_c, k, rng).with_grad(),
            bias: Tensor::zeros(&[out_c]).with_grad(),
            stride: 1,
            pad: Pad::Same,
        }
    }

    pub fn conv_t(in_c: usize, out_c: usize, k: usize, rng: &mut ChaCha8Rng) -> Layer {
        // conv layout [In,Out,K,K]: the adjoint of a conv mapping out_c -> in_c.
        Layer::ConvT {
            weight: init::conv_weight(in_c, out_c, k, rng).with_grad(),
            bias: Tensor::zeros(&[out_c]).with_grad(),
            stride: 1,
            pad: Pad::Same,
        }
    }

    pub fn dense(in_n: usize, out_n: usize, rng: &mut ChaCha8Rng) -> Layer {
        Layer::Dense {
            weight: init::dense_weight(out_n, in_n, rng).with_grad(),
            bias: Tensor::zeros(&[out_n]).with_grad(),
        }
    }

    pub fn batchnorm(c: usize) -> Layer {
        Layer::BatchNorm {
            gamma: Tensor::filled(&[c], 1.0).with_grad(),
            beta: Tensor::zeros(&[c]).with_grad(),
            running_mean: Tensor::zeros(&[c]),
            running_var: Tensor::filled(&[c], 1.0),
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

pub enum LayerCache {
    Input(Tensor),
    InputShape(Vec<usize>),
    Bn(BnCache),
    MaxPool { input_shape: Vec<usize>, argmax: Vec<usize> },
    SigmoidOut(Tensor),
    None,
}

/// A plain sequential stack. Training forward returns per-layer caches that
/// `backward` consumes in reverse, accumulating parameter gradients.
pub struct Stack {
    pub layers: Vec<Layer>,
}

impl Stack {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn forward_infer(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = match layer {
                Layer::Conv { weight, bias, stride, pad } => ops::conv2d(&cur, weight, bias, *stride, *pad)?,
                Layer::ConvT { weight, bias, stride, pad } => {
                    ops::conv_transpose2d(&cur, weight, bias, *stride, *pad)?
                }
                Layer::Dense { weight, bias } => ops::dense(&cur, weight, bias)?,
                Layer::BatchNorm { gamma, beta, running_mean, running_var, eps, .. } => {
                    ops::batchnorm_infer(&cur, gamma, beta, running_mean, running_var, *eps)?
                }
                Layer::Relu => ops::relu(&cur),
                Layer::Sigmoid => ops::sigmoid(&cur),
                Layer::MaxPool2 => ops::maxpool2(&cur)?,
                Layer::Upsample2 => ops::upsample2(&cur)?,
                Layer::Flatten => {
                    let b = cur.shape()[0];
                    cur.reshape(&[b, cur.numel() / b])?
                }
                Layer::Reshape { channels, height, width } => {
                    let b = cur.shape()[0];
                    cur.reshape(&[b, *channels, *height, *width])?
                }
                Layer::GlobalAvgPool => ops::global_avg_pool(&cur)?,
            };
        }
        Ok(cur)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, Vec<LayerCache>), NnError> {
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &mut self.layers {
            let (next, cache) = match layer {
                Layer::Conv { weight, bias, stride, pad } => {
                    let y = ops::conv2d(&cur, weight, bias, *stride, *pad)?;
                    (y, LayerCache::Input(cur))
                }
                Layer::ConvT { weight, bias, stride, pad } => {
                    let y = ops::conv_transpose2d(&cur, weight, bias, *stride, *pad)?;
                    (y, LayerCache::Input(cur))
                }
                Layer::Dense { weight, bias } => {
                    let y = ops::dense(&cur, weight, bias)?;
                    (y, LayerCache::Input(cur))
                }
                Layer::BatchNorm { gamma, beta, running_mean, running_var, momentum, eps } => {
                    let (y, bn) =
                        ops::batchnorm_train(&cur, gamma, beta, running_mean, running_var, *momentum, *eps)?;
                    (y, LayerCache::Bn(bn))
                }
                Layer::Relu => {
                    let y = ops::relu(&cur);
                    (y, LayerCache::Input(cur))
                }
                Layer::Sigmoid => {
                    let y = ops::sigmoid(&cur);
                    (y.clone(), LayerCache::SigmoidOut(y))
                }
                Layer::MaxPool2 => {
                    let (y, argmax) = ops::maxpool2_with_argmax(&cur)?;
                    (y, LayerCache::MaxPool { input_shape: cur.shape().to_vec(), argmax })
                }
                Layer::Upsample2 => {
                    let y = ops::upsample2(&cur)?;
                    (y, LayerCache::None)
                }
                Layer::Flatten => {
                    let b = cur.shape()[0];
                    let y = cur.reshape(&[b, cur.numel() / b])?;
                    (y, LayerCache::InputShape(cur.shape().to_vec()))
                }
                Layer::Reshape { channels, height, width } => {
                    let b = cur.shape()[0];
                    let y = cur.reshape(&[b, *channels, *height, *width])?;
                    (y, LayerCache::InputShape(cur.shape().to_vec()))
                }
                Layer::GlobalAvgPool => {
                    let y = ops::global_avg_pool(&cur)?;
                    (y, LayerCache::InputShape(cur.shape().to_vec()))
                }
            };
            caches.push(cache);
            cur = next;
        }
        Ok((cur, caches))
    }

    /// Reverse pass: accumulates parameter gradients and returns the input
    /// gradient.
    pub fn backward(&mut self, caches: &[LayerCache], gout: &Tensor) -> Result<Tensor, NnError> {
        assert_eq!(caches.len(), self.layers.len());
        let mut g = gout.clone();
        for (layer, cache) in self.layers.iter_mut().zip(caches.iter()).rev() {
            g = match (layer, cache) {
                (Layer::Conv { weight, bias, stride, pad }, LayerCache::Input(x)) => {
                    let (gx, gw, gb) = ops::conv2d_backward(x, weight, *stride, *pad, &g)?;
                    weight.accumulate_grad(gw.data());
                    bias.accumulate_grad(gb.data());
                    gx
                }
                (Layer::ConvT { weight, bias, stride, pad }, LayerCache::Input(x)) => {
                    let (gx, gw, gb) = ops::conv_transpose2d_backward(x, weight, *stride, *pad, &g)?;
                    weight.accumulate_grad(gw.data());
                    bias.accumulate_grad(gb.data());
                    gx
                }
                (Layer::Dense { weight, bias }, LayerCache::Input(x)) => {
                    let (gx, gw, gb) = ops::dense_backward(x, weight, &g);
                    weight.accumulate_grad(gw.data());
                    bias.accumulate_grad(gb.data());
                    gx
                }
                (Layer::BatchNorm { gamma, beta, .. }, LayerCache::Bn(bn)) => {
                    let (gx, ggamma, gbeta) = ops::batchnorm_train_backward(bn, gamma, &g);
                    gamma.accumulate_grad(ggamma.data());
                    beta.accumulate_grad(gbeta.data());
                    gx
                }
                (Layer::Relu, LayerCache::Input(x)) => ops::relu_backward(x, &g),
                (Layer::Sigmoid, LayerCache::SigmoidOut(y)) => ops::sigmoid_backward_from_y(y, &g),
                (Layer::MaxPool2, LayerCache::MaxPool { input_shape, argmax }) => {
                    ops::maxpool2_backward(input_shape, argmax, &g)
                }
                (Layer::Upsample2, LayerCache::None) => ops::upsample2_backward(&g),
                (Layer::Flatten, LayerCache::InputShape(shape))
                | (Layer::Reshape { .. }, LayerCache::InputShape(shape)) => g.reshape(shape)?,
                (Layer::GlobalAvgPool, LayerCache::InputShape(shape)) => {
                    ops::global_avg_pool_backward(shape, &g)
                }
                _ => return Err(NnError::Invalid("layer/cache mismatch in backward".into())),
            };
        }
        Ok(g)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv { weight, bias, .. }
                | Layer::ConvT { weight, bias, .. }
                | Layer::Dense { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                Layer::BatchNorm { gamma, beta, .. } => {
                    out.push(gamma);
                    out.push(beta);
                }
                _ => {}
            }
        }
        out
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{grad_check, sample_coords};
    use crate::nn::rng::rng_for;
    use rand::Rng;

    fn tiny_stack(rng: &mut ChaCha8Rng) -> Stack {
        Stack::new(vec![
            Layer::conv(2, 3, 3, rng),
            Layer::batchnorm(3),
            Layer::Relu,
            Layer::MaxPool2,
            Layer::Flatten,
            Layer::dense(3 * 2 * 2, 4, rng),
        ])
    }

    #[test]
    fn infer_is_deterministic() {
        let mut rng = rng_for(1, &[10]);
        let stack = tiny_stack(&mut rng);
        let x = Tensor::from_vec(&[2, 2, 4, 4], (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let a = stack.forward_infer(&x).unwrap();
        let b = stack.forward_infer(&x).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.shape(), &[2, 4]);
    }

    #[test]
    fn stack_gradient_matches_finite_differences() {
        let mut rng = rng_for(1, &[11]);
        let mut stack = tiny_stack(&mut rng);
        let x = Tensor::from_vec(&[2, 2, 4, 4], (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let coeff: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let (y, caches) = stack.forward_train(&x).unwrap();
        let gout = Tensor::from_vec(&[2, 4], coeff.clone());
        stack.zero_grads();
        let gx = stack.backward(&caches, &gout).unwrap();
        let _ = y;

        // BN running stats mutate during forward_train, so the loss closure
        // restores them by cloning a fresh stack per evaluation.
        let snapshot: Vec<Vec<f64>> = {
            let mut s2 = rng_for(1, &[11]);
            let mut fresh = tiny_stack(&mut s2);
            fresh.params_mut().iter().map(|p| p.data().to_vec()).collect()
        };
        let loss = |xi: &Tensor| {
            let mut s2 = rng_for(1, &[11]);
            let mut fresh = tiny_stack(&mut s2);
            for (p, snap) in fresh.params_mut().into_iter().zip(&snapshot) {
                p.data_mut().copy_from_slice(snap);
            }
            let (y, _) = fresh.forward_train(xi).unwrap();
            y.data().iter().zip(&coeff).map(|(a, c)| a * c).sum()
        };
        let coords = sample_coords(x.numel(), 10, &mut rng);
        let report = grad_check(loss, &x, gx.data(), &coords, 1e-4);
        assert!(report.pass(), "max rel err {}", report.max_rel_err);
    }
}
