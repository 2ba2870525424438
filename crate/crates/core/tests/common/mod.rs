//! Reference implementations used as test oracles.
//!
//! Written directly from the update equations with plain `f64` scalars and
//! no calls into the crate, so they can disagree with it.

#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Controller state as a plain tuple: (alpha, integral, derivative, e_prev).
pub type Scalars = (f64, f64, f64, f64);

/// One controller step written out line by line.
#[allow(clippy::too_many_arguments)]
pub fn pid_step(
    s: Scalars,
    p_red: f64,
    kp: f64,
    ki: f64,
    kd: f64,
    p_target: f64,
    alpha_max: f64,
    i_max: f64,
    margin: f64,
) -> Scalars {
    let (mut alpha, mut integral, mut derivative, _) = s;
    let e_prev = s.3;
    let e = p_red - p_target;
    if e > margin {
        integral += ki * e;
        if integral > i_max {
            integral = i_max;
        }
        if integral < -i_max {
            integral = -i_max;
        }
        derivative = kd * (e - e_prev) + (1.0 - kd) * derivative;
        alpha = alpha + kp * e + integral + derivative;
        if alpha < 0.0 {
            alpha = 0.0;
        }
        if alpha > alpha_max {
            alpha = alpha_max;
        }
    }
    (alpha, integral, derivative, e)
}

/// Default gains as a flat array: kp, ki, kd, p_target, alpha_max, i_max, margin.
pub const DEFAULT_GAINS: [f64; 7] = [0.01, 0.0005, 0.005, 0.3, 0.40, 0.20, 0.20];

pub fn pid_step_default(s: Scalars, p_red: f64) -> Scalars {
    let [kp, ki, kd, pt, am, im, m] = DEFAULT_GAINS;
    pid_step(s, p_red, kp, ki, kd, pt, am, im, m)
}

/// Alpha after each of `n` updates at constant `p_red`, default gains.
pub fn alpha_trajectory(p_red: f64, n: usize) -> Vec<f64> {
    let mut s = (0.0, 0.0, 0.0, 0.0);
    (0..n)
        .map(|_| {
            s = pid_step_default(s, p_red);
            s.0
        })
        .collect()
}

pub fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `bias + sum(w_i x_i)` through the logistic function, one term at a time.
pub fn predict_oracle(weights: &[f64], bias: f64, x: &[f64]) -> f64 {
    let mut z = bias;
    for i in 0..weights.len() {
        z += weights[i] * x[i];
    }
    logistic(z)
}

pub fn brute_mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    let mut sum = vec![0.0; d];
    for r in rows {
        for j in 0..d {
            sum[j] += r[j];
        }
    }
    sum.into_iter().map(|s| s / rows.len() as f64).collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// `n` draws from an isotropic Gaussian with the given mean and sigma.
pub fn gaussian_cloud(mean: &[f64], sigma: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            mean.iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(rng);
                    m + sigma * z
                })
                .collect()
        })
        .collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Upper tail `P[X >= k]` for `X ~ Binomial(n, 1/2)`.
pub fn sign_test_p(k: usize, n: usize) -> f64 {
    let mut log_c = 0.0f64;
    let mut tail = 0.0;
    for i in 0..=n {
        if i > 0 {
            log_c += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        if i >= k {
            tail += (log_c - n as f64 * std::f64::consts::LN_2).exp();
        }
    }
    tail
}

/// Classifier and control vector fitted on unsteered chunks from `cfg`.
pub fn fitted_components(
    cfg: &pidsteer::PlantConfig,
    seed: u64,
) -> (pidsteer::ClassifierModel, pidsteer::ControlVector) {
    use pidsteer::{dataset, extract, train, FeatureLayout, TrainConfig};
    let data = dataset::generate(cfg, 100, seed).unwrap();
    let layout = FeatureLayout {
        feature_layer: 20,
        chunk_size: cfg.chunk_size,
    };
    let model = train(&data, &TrainConfig::default(), layout).unwrap();
    let (req, red) = dataset::split_by_label(&data);
    (model, extract(&req, &red).unwrap())
}
