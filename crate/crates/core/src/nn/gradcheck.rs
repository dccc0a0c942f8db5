//! Finite-difference gradient checking (double precision only).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::nn::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Compare an analytic gradient against central finite differences at the
/// given coordinates of `x`. `loss_fn` must be a pure function of `x`.
pub fn grad_check<F>(
    mut loss_fn: F,
    x: &Tensor,
    analytic: &[f64],
    coords: &[usize],
    tolerance: f64,
) -> GradCheckReport
where
    F: FnMut(&Tensor) -> f64,
{
    assert_eq!(analytic.len(), x.numel(), "analytic gradient length mismatch");
    let mut max_rel = 0.0f64;
    for &i in coords {
        let eps = 1e-5 * x.data()[i].abs().max(1.0);
        let mut xp = x.clone();
        xp.data_mut()[i] += eps;
        let fp = loss_fn(&xp);
        let mut xm = x.clone();
        xm.data_mut()[i] -= eps;
        let fm = loss_fn(&xm);
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    GradCheckReport { max_rel_err: max_rel, checked: coords.len(), tolerance }
}

/// Sample `count` distinct coordinates of an `n`-element tensor.
pub fn sample_coords(n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let count = count.min(n);
    let mut picked = std::collections::BTreeSet::new();
    while picked.len() < count {
        picked.insert(rng.gen_range(0..n));
    }
    picked.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ops;
    use crate::nn::rng::rng_for;

    #[test]
    fn dense_layer_passes() {
        let mut rng = rng_for(100, &[1]);
        let x = Tensor::from_vec(&[2, 5], (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let w = Tensor::from_vec(&[3, 5], (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let b = Tensor::from_vec(&[3], (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect());
        // loss = sum(dense(x)) with per-element weights to break symmetry
        let coeff: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |xi: &Tensor| {
            let y = ops::dense(xi, &w, &b).unwrap();
            y.data().iter().zip(&coeff).map(|(a, c)| a * c).sum()
        };
        let base: f64 = loss(&x);
        assert!(base.is_finite());
        let gout = Tensor::from_vec(&[2, 3], coeff.clone());
        let (gx, _, _) = ops::dense_backward(&x, &w, &gout);
        let coords = sample_coords(x.numel(), 8, &mut rng);
        let report = grad_check(loss, &x, gx.data(), &coords, 1e-4);
        assert!(report.pass(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn conv_layer_passes() {
        let mut rng = rng_for(100, &[2]);
        let x = Tensor::from_vec(&[1, 2, 4, 4], (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let w = Tensor::from_vec(&[3, 2, 3, 3], (0..54).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let b = Tensor::from_vec(&[3], (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let coeff: Vec<f64> = (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |xi: &Tensor| {
            let y = ops::conv2d(xi, &w, &b, 1, ops::Pad::Same).unwrap();
            y.data().iter().zip(&coeff).map(|(a, c)| a * c).sum()
        };
        let gout = Tensor::from_vec(&[1, 3, 4, 4], coeff.clone());
        let (gx, gw, _) = ops::conv2d_backward(&x, &w, 1, ops::Pad::Same, &gout).unwrap();
        let coords = sample_coords(x.numel(), 8, &mut rng);
        let report = grad_check(loss, &x, gx.data(), &coords, 1e-4);
        assert!(report.pass(), "input grad rel err {}", report.max_rel_err);

        let loss_w = |wi: &Tensor| {
            let y = ops::conv2d(&x, wi, &b, 1, ops::Pad::Same).unwrap();
            y.data().iter().zip(&coeff).map(|(a, c)| a * c).sum()
        };
        let coords_w = sample_coords(w.numel(), 8, &mut rng);
        let report_w = grad_check(loss_w, &w, gw.data(), &coords_w, 1e-4);
        assert!(report_w.pass(), "weight grad rel err {}", report_w.max_rel_err);
    }

    #[test]
    fn relu_away_from_kink_passes() {
        let mut rng = rng_for(100, &[3]);
        // keep pre-activations away from zero so the derivative is defined
        let data: Vec<f64> = (0..16)
            .map(|_| {
                let v: f64 = rng.gen_range(0.01..1.0);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let x = Tensor::from_vec(&[16], data);
        assert!(x.data().iter().all(|v| v.abs() > 1e-3));
        let coeff: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |xi: &Tensor| ops::relu(xi).data().iter().zip(&coeff).map(|(a, c)| a * c).sum();
        let gout = Tensor::from_vec(&[16], coeff.clone());
        let gx = ops::relu_backward(&x, &gout);
        let coords: Vec<usize> = (0..16).collect();
        let report = grad_check(loss, &x, gx.data(), &coords, 1e-4);
        assert!(report.pass(), "max rel err {}", report.max_rel_err);
    }
}
