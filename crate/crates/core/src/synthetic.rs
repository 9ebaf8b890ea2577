//! ECG-like surrogate beats for tests, benchmarks and offline demos.
//!
//! Each class is a sum of Gaussian waves (P, Q, R, S, T) with class-specific
//! morphology, randomly jittered in timing, width and amplitude, plus white
//! noise, then z-normalized like the UCR series. This is not ECG5000; it only
//! gives the pipeline realistic shapes and a learnable five-class problem.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{Beat, Dataset, BEAT_LEN, N_CLASSES};

/// Class shares of the ECG5000 training split (292/177/10/19/2 of 500).
pub const ECG5000_TRAIN_SHARES: [f64; N_CLASSES] = [0.584, 0.354, 0.020, 0.038, 0.004];

/// (center, width, amplitude) of one wave, times in [0, 1].
type Wave = (f64, f64, f64);

fn template(label: usize) -> Vec<Wave> {
    match label {
        // Normal: small P, narrow QRS, upright T.
        1 => vec![
            (0.18, 0.025, 0.15),
            (0.30, 0.008, -0.15),
            (0.33, 0.012, 1.0),
            (0.36, 0.010, -0.3),
            (0.62, 0.05, 0.3),
        ],
        // R-on-T: early wide inverted complex landing on the T wave.
        2 => vec![
            (0.12, 0.03, 0.1),
            (0.22, 0.025, -0.9),
            (0.30, 0.03, 0.6),
            (0.52, 0.06, -0.45),
        ],
        // PVC: no P, wide tall QRS, discordant T.
        3 => vec![(0.36, 0.03, 1.1), (0.44, 0.025, -0.5), (0.66, 0.06, -0.35)],
        // Supraventricular ectopic: abnormal early P, narrow QRS, flat T.
        4 => vec![
            (0.10, 0.02, -0.12),
            (0.24, 0.010, 0.95),
            (0.27, 0.010, -0.25),
            (0.52, 0.05, 0.12),
        ],
        // Unclassified: low broad complexes.
        _ => vec![(0.25, 0.05, 0.5), (0.45, 0.04, -0.4), (0.70, 0.07, 0.35)],
    }
}

pub fn synthetic_beat<R: Rng + ?Sized>(label: usize, len: usize, rng: &mut R) -> Beat {
    let noise = Normal::new(0.0, 0.04).unwrap();
    let shift = rng.gen_range(-0.03..0.03);
    let stretch = rng.gen_range(0.9..1.1);
    let gain = rng.gen_range(0.8..1.2);
    let waves: Vec<Wave> = template(label)
        .into_iter()
        .map(|(c, w, a)| {
            (
                0.5 + (c - 0.5) * stretch + shift + rng.gen_range(-0.01..0.01),
                w * rng.gen_range(0.85..1.15),
                a * gain * rng.gen_range(0.85..1.15),
            )
        })
        .collect();
    let baseline = rng.gen_range(-0.05..0.05);
    let raw: Vec<f64> = (0..len)
        .map(|i| {
            let t = i as f64 / (len - 1).max(1) as f64;
            let s: f64 = waves
                .iter()
                .map(|&(c, w, a)| a * (-(t - c).powi(2) / (2.0 * w * w)).exp())
                .sum();
            s + baseline * t + noise.sample(rng)
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / len as f64;
    let sd = (raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len as f64)
        .sqrt()
        .max(1e-9);
    Beat {
        samples: raw.iter().map(|v| ((v - mean) / sd) as f32).collect(),
        label,
    }
}

/// `n` beats of length 140 with labels drawn from `shares`.
pub fn synthetic_dataset(n: usize, shares: &[f64; N_CLASSES], seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: f64 = shares.iter().sum();
    let beats = (0..n)
        .map(|_| {
            let mut u = rng.gen::<f64>() * total;
            let mut label = N_CLASSES;
            for (c, &s) in shares.iter().enumerate() {
                if u < s {
                    label = c + 1;
                    break;
                }
                u -= s;
            }
            synthetic_beat(label, BEAT_LEN, &mut rng)
        })
        .collect();
    Dataset {
        beats,
        class_count: N_CLASSES,
    }
}

/// Train/test pair shaped like ECG5000 (500/4500 beats, skewed classes),
/// with every class present in the training half.
pub fn ecg5000_like(seed: u64) -> (Dataset, Dataset) {
    let mut train = synthetic_dataset(500, &ECG5000_TRAIN_SHARES, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for label in 1..=N_CLASSES {
        if train.class_counts()[label - 1] < 2 {
            for slot in 0..2 {
                let i = rng.gen_range(0..train.len());
                if train.beats[i].label == 1 || slot == 0 {
                    train.beats[i] = synthetic_beat(label, BEAT_LEN, &mut rng);
                }
            }
        }
    }
    let test = synthetic_dataset(4500, &ECG5000_TRAIN_SHARES, seed.wrapping_add(1));
    (train, test)
}
