//! Diagonal 2-D Gaussian mixtures.
//!
//! Raw head layout per row, for `K` components:
//! `[logit_0..K | mean_0x, mean_0y, .. | rawstd_0x, rawstd_0y, ..]`, `5K` values.
//! Standard deviations are `floor + softplus(raw)`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ops::softmax;
use super::NnError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    pub weights: Vec<f64>,
    pub means: Vec<[f64; 2]>,
    pub stds: Vec<[f64; 2]>,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl GmmParams {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn from_raw(raw: &[f64], k: usize, std_floor: f64) -> Result<Self, NnError> {
        if raw.len() != 5 * k || k == 0 {
            return Err(NnError::Shape(format!("gmm raw of {} values for k={k}", raw.len())));
        }
        let weights = softmax(&raw[..k]);
        let means = (0..k).map(|j| [raw[k + 2 * j], raw[k + 2 * j + 1]]).collect();
        let stds = (0..k)
            .map(|j| {
                [
                    std_floor + softplus(raw[3 * k + 2 * j]),
                    std_floor + softplus(raw[3 * k + 2 * j + 1]),
                ]
            })
            .collect();
        Ok(Self { weights, means, stds })
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let k = self.k();
        if k == 0 || self.means.len() != k || self.stds.len() != k {
            return Err(NnError::Shape("gmm component counts differ".into()));
        }
        let s: f64 = self.weights.iter().sum();
        if self.weights.iter().any(|&w| !(w >= 0.0)) || (s - 1.0).abs() > 1e-9 {
            return Err(NnError::Shape(format!("gmm weights not on the simplex (sum {s})")));
        }
        if self.stds.iter().flatten().any(|&v| !(v > 0.0)) {
            return Err(NnError::Shape("gmm stds must be positive".into()));
        }
        Ok(())
    }

    fn component_log_density(&self, j: usize, x: [f64; 2]) -> f64 {
        let [mx, my] = self.means[j];
        let [sx, sy] = self.stds[j];
        let (zx, zy) = ((x[0] - mx) / sx, (x[1] - my) / sy);
        -(2.0 * PI * sx * sy).ln() - 0.5 * (zx * zx + zy * zy)
    }

    pub fn log_density(&self, x: [f64; 2]) -> f64 {
        let terms: Vec<f64> = (0..self.k())
            .map(|j| self.weights[j].ln() + self.component_log_density(j, x))
            .collect();
        log_sum_exp(&terms)
    }

    pub fn nll(&self, target: [f64; 2]) -> f64 {
        -self.log_density(target)
    }

    /// Mean of the heaviest component (first one on ties).
    pub fn mode(&self) -> [f64; 2] {
        let mut best = 0;
        for j in 1..self.k() {
            if self.weights[j] > self.weights[best] {
                best = j;
            }
        }
        self.means[best]
    }

    /// Draws a point with stds scaled by `temperature`; zero gives [`GmmParams::mode`].
    pub fn sample<R: Rng>(&self, temperature: f64, rng: &mut R) -> [f64; 2] {
        if temperature <= 0.0 {
            return self.mode();
        }
        let j = match WeightedIndex::new(&self.weights) {
            Ok(d) => d.sample(rng),
            Err(_) => return self.mode(),
        };
        let zx: f64 = StandardNormal.sample(rng);
        let zy: f64 = StandardNormal.sample(rng);
        [
            self.means[j][0] + temperature * self.stds[j][0] * zx,
            self.means[j][1] + temperature * self.stds[j][1] * zy,
        ]
    }
}

/// NLL of `target` and its gradient with respect to the raw head row.
pub fn nll_raw(raw: &[f64], k: usize, std_floor: f64, target: [f64; 2]) -> (f64, Vec<f64>) {
    let p = GmmParams::from_raw(raw, k, std_floor).expect("raw length checked by caller");
    let logs: Vec<f64> = (0..k)
        .map(|j| p.weights[j].ln() + p.component_log_density(j, target))
        .collect();
    let lse = log_sum_exp(&logs);
    let mut g = vec![0.0; 5 * k];
    for j in 0..k {
        let resp = (logs[j] - lse).exp();
        g[j] = p.weights[j] - resp;
        for a in 0..2 {
            let s = p.stds[j][a];
            let d = target[a] - p.means[j][a];
            g[k + 2 * j + a] = -resp * d / (s * s);
            let ds = resp * (1.0 / s - d * d / (s * s * s));
            g[3 * k + 2 * j + a] = ds * sigmoid(raw[3 * k + 2 * j + a]);
        }
    }
    (-lse, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(mx: f64, my: f64, sx: f64, sy: f64) -> GmmParams {
        GmmParams {
            weights: vec![1.0],
            means: vec![[mx, my]],
            stds: vec![[sx, sy]],
        }
    }

    #[test]
    fn nll_at_mean_closed_form() {
        let g = single(0.3, -0.1, 0.02, 0.05);
        let want = (2.0 * PI * 0.02 * 0.05).ln();
        assert!((g.nll([0.3, -0.1]) - want).abs() < 1e-12);
    }

    #[test]
    fn zero_temperature_is_mode() {
        let g = GmmParams {
            weights: vec![0.2, 0.5, 0.3],
            means: vec![[0.0, 0.0], [1.0, 2.0], [3.0, 4.0]],
            stds: vec![[1.0, 1.0]; 3],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(g.sample(0.0, &mut rng), [1.0, 2.0]);
        assert_eq!(g.mode(), [1.0, 2.0]);
    }

    #[test]
    fn from_raw_is_valid_and_floored() {
        let raw = [0.1, -3.0, 0.4, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, -80.0, -80.0, 0.0, 0.0, 2.0, 2.0];
        let g = GmmParams::from_raw(&raw, 3, 1e-3).unwrap();
        g.validate().unwrap();
        assert!((g.stds[0][0] - 1e-3).abs() < 1e-12);
        assert_eq!(g.means[1], [3.0, 4.0]);
    }

    #[test]
    fn raw_gradient_matches_differences() {
        let raw = [0.3, -0.2, 0.1, 0.5, -0.4, 0.2, 0.1, -0.3, 0.0, -1.0, 0.2, 0.4, -0.6, 0.1];
        let raw = [&raw[..], &[0.3]].concat();
        let t = [0.35, -0.2];
        let (_, g) = nll_raw(&raw, 3, 1e-3, t);
        for i in 0..raw.len() {
            let mut a = raw.clone();
            let mut b = raw.clone();
            a[i] += 1e-6;
            b[i] -= 1e-6;
            let num = (nll_raw(&a, 3, 1e-3, t).0 - nll_raw(&b, 3, 1e-3, t).0) / 2e-6;
            assert!((num - g[i]).abs() < 1e-6 * (1.0 + num.abs()), "{i}: {num} vs {}", g[i]);
        }
    }
}
