//! Controlled synthetic multivariate time-series generator.
//!
//! Each sample couples two dynamic features with four per-sequence static
//! features. The first dynamic feature follows a fixed polynomial +
//! exponential + sinusoidal curve; the second depends on the first through a
//! linear/logarithmic transform plus trend and periodic terms; the target
//! mixes both with the statics. All noise is Gaussian with configurable
//! standard deviations.
//!
//! Determinism: sample `i` draws from a dedicated ChaCha8 stream derived
//! from `(seed, i)`, so datasets are bit-identical across runs and across
//! thread counts, and the draw order inside a sample is fixed
//! (statics, then d1 noise, d2 noise, target noise).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Number of input features per time step: two dynamic, four static.
pub const NUM_FEATURES: usize = 6;

/// Generator configuration. Every constant that shapes the data lives here
/// so run manifests can reproduce a dataset exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Number of samples.
    pub num_samples: usize,
    /// Time steps per sample.
    pub seq_len: usize,
    /// Weight of the d1 * s1 target term.
    pub alpha1: f64,
    /// Weight of the (35 - s2)/(s2 - 3) target term.
    pub alpha2: f64,
    /// Weight of the d2 * s4 target term.
    pub alpha3: f64,
    /// Noise std for the first dynamic feature.
    pub sigma1: f64,
    /// Noise std for the second dynamic feature.
    pub sigma2: f64,
    /// Noise std for the target.
    pub sigma_y: f64,
    /// Strength of the d2-on-d1 dependency.
    pub rho: f64,
    /// Base seed; sample `i` uses stream `i` of this seed.
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_samples: 10_000,
            seq_len: 160,
            alpha1: 0.045,
            alpha2: 0.38,
            alpha3: 0.07,
            sigma1: 1.0,
            sigma2: 2.0,
            sigma_y: 0.1,
            rho: 0.8,
            seed: 42,
        }
    }
}

impl SynthConfig {
    /// Validate counts and noise levels.
    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 || self.seq_len == 0 {
            return Err(Error::config(format!(
                "synthetic generator needs num_samples >= 1 and seq_len >= 1, got N={}, T={}",
                self.num_samples, self.seq_len
            )));
        }
        if self.sigma1 < 0.0 || self.sigma2 < 0.0 || self.sigma_y < 0.0 {
            return Err(Error::config(
                "noise standard deviations must be non-negative".to_string(),
            ));
        }
        Ok(())
    }
}

/// One generated sequence: inputs `[T, 6]` with column order
/// `[d1, d2, s1, s2, s3, s4]`, and a length-T target vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesSample {
    /// Input matrix, statics repeated along the time axis.
    pub x: Tensor,
    /// Target sequence.
    pub y: Vec<f64>,
}

/// Deterministic trend for the first dynamic feature,
/// `f(t) = -5 + 0.04 t + 0.0002 t^2 + 0.8 exp(t/T) + 2 sin(2 pi t / 20)`.
pub fn dynamic1_trend(t: usize, seq_len: usize) -> f64 {
    let tf = t as f64;
    -5.0 + 0.04 * tf
        + 0.0002 * tf * tf
        + 0.8 * (tf / seq_len as f64).exp()
        + 2.0 * (2.0 * std::f64::consts::PI * tf / 20.0).sin()
}

/// Linear + logarithmic transform applied to d1,
/// `g(x) = 0.4 x + 0.6 sign(x) ln(1 + |x|)`.
pub fn dependency_transform(x: f64) -> f64 {
    0.4 * x + 0.6 * x.signum() * (1.0 + x.abs()).ln()
}

/// Trend component of the second dynamic feature, `h(t) = 0.02 t`.
pub fn dynamic2_trend(t: usize) -> f64 {
    0.02 * t as f64
}

/// Periodic component of the second dynamic feature,
/// `p(t) = 1.5 sin(2 pi t / 25)`.
pub fn dynamic2_periodic(t: usize) -> f64 {
    1.5 * (2.0 * std::f64::consts::PI * t as f64 / 25.0).sin()
}

fn gaussian(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    if std == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, std).expect("valid std").sample(rng)
}

/// First dynamic feature: `d1[t] = f(t) + N(0, sigma1^2)`, t = 1..T.
pub fn gen_dynamic1(seq_len: usize, rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Vec<f64> {
    (1..=seq_len)
        .map(|t| dynamic1_trend(t, seq_len) + gaussian(rng, cfg.sigma1))
        .collect()
}

/// Second dynamic feature:
/// `d2[t] = rho * g(d1[t]) + h(t) + p(t) + N(0, sigma2^2)`.
pub fn gen_dynamic2(
    d1: &[f64],
    seq_len: usize,
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
) -> Result<Vec<f64>> {
    if d1.len() != seq_len {
        return Err(Error::shape(
            "gen_dynamic2",
            format!("d1 has {} entries, expected seq_len {}", d1.len(), seq_len),
        ));
    }
    Ok(d1
        .iter()
        .zip(1..=seq_len)
        .map(|(&d, t)| {
            cfg.rho * dependency_transform(d)
                + dynamic2_trend(t)
                + dynamic2_periodic(t)
                + gaussian(rng, cfg.sigma2)
        })
        .collect())
}

/// Per-sequence static features: `s1 in {1..4}`, `s2 uniform on [10, 30)`,
/// `s3, s4 in {1..5}`. `s2 >= 10` keeps the target denominator away from
/// its pole at 3.
pub fn sample_statics(rng: &mut ChaCha8Rng) -> (f64, f64, f64, f64) {
    let s1 = rng.gen_range(1..=4) as f64;
    let s2 = rng.gen_range(10.0..30.0);
    let s3 = rng.gen_range(1..=5) as f64;
    let s4 = rng.gen_range(1..=5) as f64;
    (s1, s2, s3, s4)
}

/// Target sequence:
/// `y[t] = a1 d1[t] s1 + a2 (35 - s2)/(s2 - 3) + a3 d2[t] s4 + N(0, sigma_y^2)`.
pub fn gen_target(
    d1: &[f64],
    d2: &[f64],
    statics: (f64, f64, f64, f64),
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
) -> Result<Vec<f64>> {
    if d1.len() != d2.len() {
        return Err(Error::shape(
            "gen_target",
            format!("d1 has {} entries but d2 has {}", d1.len(), d2.len()),
        ));
    }
    let (s1, s2, _, s4) = statics;
    if s2 <= 3.0 {
        return Err(Error::config(format!(
            "gen_target: s2 = {s2} reached the target equation but must be > 3; the statics sampler is broken"
        )));
    }
    let static_term = cfg.alpha2 * (35.0 - s2) / (s2 - 3.0);
    Ok(d1
        .iter()
        .zip(d2)
        .map(|(&a, &b)| {
            cfg.alpha1 * a * s1 + static_term + cfg.alpha3 * b * s4 + gaussian(rng, cfg.sigma_y)
        })
        .collect())
}

fn generate_sample(index: usize, cfg: &SynthConfig) -> Result<SeriesSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);

    let statics = sample_statics(&mut rng);
    let d1 = gen_dynamic1(cfg.seq_len, &mut rng, cfg);
    let d2 = gen_dynamic2(&d1, cfg.seq_len, &mut rng, cfg)?;
    let y = gen_target(&d1, &d2, statics, &mut rng, cfg)?;

    let (s1, s2, s3, s4) = statics;
    let mut data = Vec::with_capacity(cfg.seq_len * NUM_FEATURES);
    for t in 0..cfg.seq_len {
        data.extend_from_slice(&[d1[t], d2[t], s1, s2, s3, s4]);
    }
    Ok(SeriesSample {
        x: Tensor::new(vec![cfg.seq_len, NUM_FEATURES], data)?,
        y,
    })
}

/// Generate the full dataset. Samples are produced from independent
/// per-index substreams and may be computed on any number of threads; the
/// result is bit-identical either way and ordered by sample index.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Vec<SeriesSample>> {
    cfg.validate()?;
    (0..cfg.num_samples)
        .into_par_iter()
        .map(|i| generate_sample(i, cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet_cfg() -> SynthConfig {
        SynthConfig {
            sigma1: 0.0,
            sigma2: 0.0,
            sigma_y: 0.0,
            ..SynthConfig::default()
        }
    }

    fn rng_for(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn dynamic1_matches_closed_form_at_t20() {
        let cfg = quiet_cfg();
        let mut rng = rng_for(0);
        let d1 = gen_dynamic1(160, &mut rng, &cfg);
        let expected =
            -5.0 + 0.8 + 0.08 + 0.8 * (0.125f64).exp() + 2.0 * (2.0 * std::f64::consts::PI).sin();
        assert!(
            (d1[19] - expected).abs() < 1e-12,
            "{} vs {}",
            d1[19],
            expected
        );
    }

    #[test]
    fn dynamic1_without_noise_is_a_pure_function_of_t() {
        let cfg = quiet_cfg();
        let a = gen_dynamic1(64, &mut rng_for(1), &cfg);
        let b = gen_dynamic1(64, &mut rng_for(999), &cfg);
        assert_eq!(a, b);
    }

    #[test]
    fn dynamic1_with_noise_is_seed_deterministic() {
        let cfg = SynthConfig::default();
        let a = gen_dynamic1(64, &mut rng_for(5), &cfg);
        let b = gen_dynamic1(64, &mut rng_for(5), &cfg);
        assert_eq!(a, b);
    }

    #[test]
    fn dynamic2_with_rho_zero_ignores_d1() {
        let mut cfg = quiet_cfg();
        cfg.rho = 0.0;
        let t = 32;
        let d1a = vec![100.0; t];
        let d1b = vec![-3.0; t];
        let a = gen_dynamic2(&d1a, t, &mut rng_for(0), &cfg).unwrap();
        let b = gen_dynamic2(&d1b, t, &mut rng_for(0), &cfg).unwrap();
        assert_eq!(a, b);
        let expected: Vec<f64> = (1..=t)
            .map(|i| dynamic2_trend(i) + dynamic2_periodic(i))
            .collect();
        assert_eq!(a, expected);
    }

    #[test]
    fn dependency_transform_vanishes_at_origin() {
        assert_eq!(dependency_transform(0.0), 0.0);
        let mut cfg = quiet_cfg();
        cfg.rho = 1.0;
        let d1 = vec![0.0; 8];
        let out = gen_dynamic2(&d1, 8, &mut rng_for(0), &cfg).unwrap();
        let expected: Vec<f64> = (1..=8)
            .map(|t| dynamic2_trend(t) + dynamic2_periodic(t))
            .collect();
        assert_eq!(out, expected);
    }

    #[test]
    fn dynamic2_single_value_matches_hand_evaluation() {
        let mut cfg = quiet_cfg();
        cfg.rho = 1.0;
        let out = gen_dynamic2(&[1.0], 1, &mut rng_for(0), &cfg).unwrap();
        let expected =
            0.4 + 0.6 * 2.0f64.ln() + 0.02 + 1.5 * (2.0 * std::f64::consts::PI / 25.0).sin();
        assert!((out[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn dynamic2_rejects_length_mismatch() {
        let cfg = quiet_cfg();
        let err = gen_dynamic2(&[1.0, 2.0], 3, &mut rng_for(0), &cfg).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn statics_stay_in_their_supports() {
        let mut rng = rng_for(13);
        let mut min_s2 = f64::INFINITY;
        for _ in 0..100_000 {
            let (s1, s2, s3, s4) = sample_statics(&mut rng);
            assert!((1.0..=4.0).contains(&s1) && s1.fract() == 0.0);
            assert!((10.0..30.0).contains(&s2));
            assert!((1.0..=5.0).contains(&s3) && s3.fract() == 0.0);
            assert!((1.0..=5.0).contains(&s4) && s4.fract() == 0.0);
            min_s2 = min_s2.min(s2);
        }
        assert!(min_s2 >= 10.0);
    }

    #[test]
    fn statics_are_stream_deterministic() {
        let a = sample_statics(&mut rng_for(101));
        let b = sample_statics(&mut rng_for(101));
        assert_eq!(a, b);
    }

    #[test]
    fn target_matches_reference_row_oracle() {
        // Applying the target equation with noise off to the reference row
        // (d1=-5.36, d2=0.36, statics (2, 16.43, 3, 3)) gives 0.1186.
        let cfg = quiet_cfg();
        let expected =
            0.045 * (-5.36) * 2.0 + 0.38 * (35.0 - 16.43) / (16.43 - 3.0) + 0.07 * 0.36 * 3.0;
        let y = gen_target(
            &[-5.36],
            &[0.36],
            (2.0, 16.43, 3.0, 3.0),
            &mut rng_for(0),
            &cfg,
        )
        .unwrap();
        assert!((y[0] - expected).abs() < 1e-15);
        assert!(
            (y[0] - 0.1186).abs() < 1e-3,
            "target {} should be 0.1186 +/- 1e-3",
            y[0]
        );
    }

    #[test]
    fn target_with_zero_dynamics_is_constant() {
        let cfg = quiet_cfg();
        let y = gen_target(
            &[0.0; 5],
            &[0.0; 5],
            (2.0, 16.0, 1.0, 3.0),
            &mut rng_for(0),
            &cfg,
        )
        .unwrap();
        let expected = 0.38 * 19.0 / 13.0;
        for v in y {
            assert!((v - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn target_with_zero_alphas_is_zero() {
        let mut cfg = quiet_cfg();
        cfg.alpha1 = 0.0;
        cfg.alpha2 = 0.0;
        cfg.alpha3 = 0.0;
        let y = gen_target(
            &[1.0, -2.0],
            &[3.0, 4.0],
            (2.0, 16.0, 1.0, 3.0),
            &mut rng_for(0),
            &cfg,
        )
        .unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn target_rejects_degenerate_s2() {
        let cfg = quiet_cfg();
        let err =
            gen_target(&[1.0], &[1.0], (2.0, 3.0, 1.0, 1.0), &mut rng_for(0), &cfg).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn dataset_is_bit_identical_across_runs() {
        let cfg = SynthConfig {
            num_samples: 20,
            seq_len: 40,
            ..SynthConfig::default()
        };
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn train_and_test_seeds_differ() {
        let train_cfg = SynthConfig {
            num_samples: 4,
            seq_len: 32,
            seed: 42,
            ..SynthConfig::default()
        };
        let test_cfg = SynthConfig {
            seed: 101,
            ..train_cfg.clone()
        };
        let train = generate_dataset(&train_cfg).unwrap();
        let test = generate_dataset(&test_cfg).unwrap();
        // Dynamic columns (0 and 1) must differ somewhere.
        let differs = train.iter().zip(&test).any(|(a, b)| {
            (0..a.x.shape()[0])
                .any(|t| a.x.row(t)[0] != b.x.row(t)[0] || a.x.row(t)[1] != b.x.row(t)[1])
        });
        assert!(differs);
    }

    #[test]
    fn parallel_generation_matches_serial_bitwise() {
        let cfg = SynthConfig {
            num_samples: 9,
            seq_len: 24,
            ..SynthConfig::default()
        };
        let one = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| generate_dataset(&cfg).unwrap());
        let three = rayon::ThreadPoolBuilder::new()
            .num_threads(3)
            .build()
            .unwrap()
            .install(|| generate_dataset(&cfg).unwrap());
        assert_eq!(one, three);
    }

    #[test]
    fn static_columns_are_exactly_constant() {
        let cfg = SynthConfig {
            num_samples: 8,
            seq_len: 50,
            ..SynthConfig::default()
        };
        for sample in generate_dataset(&cfg).unwrap() {
            for col in 2..NUM_FEATURES {
                let first = sample.x.row(0)[col];
                for t in 0..cfg.seq_len {
                    assert_eq!(
                        sample.x.row(t)[col],
                        first,
                        "static column {col} moved at t={t}"
                    );
                }
            }
            let s2 = sample.x.row(0)[3];
            assert!((10.0..30.0).contains(&s2));
            let term = (35.0 - s2) / (s2 - 3.0);
            assert!(term.is_finite() && term.abs() <= 25.0 / 7.0 + 1e-12);
        }
    }

    #[test]
    fn noiseless_dataset_shares_dynamics_across_samples() {
        let cfg = SynthConfig {
            num_samples: 3,
            seq_len: 30,
            sigma1: 0.0,
            sigma2: 0.0,
            sigma_y: 0.0,
            ..SynthConfig::default()
        };
        let data = generate_dataset(&cfg).unwrap();
        for t in 0..cfg.seq_len {
            assert_eq!(data[0].x.row(t)[0], data[1].x.row(t)[0]);
            assert_eq!(data[0].x.row(t)[1], data[2].x.row(t)[1]);
        }
    }

    #[test]
    fn noise_is_centered() {
        let cfg = SynthConfig::default();
        let n = 100_000;
        let mut rng = rng_for(7);
        let d1 = gen_dynamic1(n, &mut rng, &cfg);
        let mean = d1
            .iter()
            .zip(1..=n)
            .map(|(&v, t)| v - dynamic1_trend(t, n))
            .sum::<f64>()
            / n as f64;
        let bound = 3.0 * cfg.sigma1 / (n as f64).sqrt();
        assert!(mean.abs() < bound, "noise mean {mean} exceeds {bound}");
    }
}
