//! Synthetic keyword corpus laid out like Speech Commands.
//!
//! Three command words with distinct tone or chirp patterns, a few
//! out-of-vocabulary words with their own patterns, and background noise
//! recordings. Every file is a one-second 16 kHz mono WAV.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{write_wav, AudioClip, NOISE_DIR, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::seed;

pub const COMMAND_WORDS: [&str; 3] = ["yes", "no", "up"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureConfig {
    pub n_per_class: usize,
    /// Out-of-vocabulary words; each gets `n_per_oov_word` files.
    pub oov_words: Vec<String>,
    pub n_per_oov_word: usize,
    pub noise_seconds: f64,
    /// Standard deviation of the broadband floor added to every word clip.
    pub noise_floor: f64,
    pub seed: u64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            n_per_class: 20,
            oov_words: vec!["bed".into(), "cat".into()],
            n_per_oov_word: 10,
            noise_seconds: 10.0,
            noise_floor: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureSummary {
    pub command_files: usize,
    pub oov_files: usize,
    pub noise_files: usize,
}

#[derive(Clone, Copy)]
enum Pattern {
    /// Linear sweep between two frequencies.
    Chirp(f64, f64),
    /// Two simultaneous steady tones.
    Pair(f64, f64),
    /// Steady tone with slow amplitude modulation.
    Warble(f64, f64),
    /// Harmonic stack on a fundamental.
    Harmonics(f64),
}

fn pattern_for(word: &str) -> Pattern {
    match word {
        "yes" => Pattern::Chirp(400.0, 800.0),
        "no" => Pattern::Chirp(1800.0, 1200.0),
        "up" => Pattern::Pair(2500.0, 3000.0),
        "bed" => Pattern::Warble(1000.0, 8.0),
        "cat" => Pattern::Harmonics(300.0),
        other => {
            // Deterministic tone for any other word.
            let u = seed::unit_hash(other, 0);
            Pattern::Warble(500.0 + 3000.0 * u, 4.0 + 8.0 * u)
        }
    }
}

fn render(pattern: Pattern, rng: &mut impl Rng, floor: f64) -> AudioClip {
    let sr = SAMPLE_RATE as f64;
    let n = SAMPLE_RATE as usize;
    let dur = rng.gen_range(0.5..0.8);
    let onset = rng.gen_range(0.0..(1.0 - dur));
    let jitter = rng.gen_range(0.95..1.05);
    let amp = rng.gen_range(0.3..0.6);
    let mut phase = 0.0f64;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / sr;
        let mut v = 0.0;
        if t >= onset && t < onset + dur {
            let u = (t - onset) / dur;
            // Short raised-cosine ramps at both ends.
            let env = (u / 0.05).min((1.0 - u) / 0.05).min(1.0);
            let env = 0.5 - 0.5 * (PI * env).cos();
            let tl = t - onset;
            v = env
                * match pattern {
                    Pattern::Chirp(f0, f1) => {
                        let f = jitter * (f0 + (f1 - f0) * u);
                        phase += 2.0 * PI * f / sr;
                        phase.sin()
                    }
                    Pattern::Pair(f0, f1) => {
                        0.5 * ((2.0 * PI * jitter * f0 * tl).sin() + (2.0 * PI * jitter * f1 * tl).sin())
                    }
                    Pattern::Warble(f, rate) => {
                        (0.6 + 0.4 * (2.0 * PI * rate * tl).sin()) * (2.0 * PI * jitter * f * tl).sin()
                    }
                    Pattern::Harmonics(f) => {
                        (1..=3)
                            .map(|h| (2.0 * PI * jitter * f * h as f64 * tl).sin() / h as f64)
                            .sum::<f64>()
                            / 1.8
                    }
                };
        }
        let noise: f64 = StandardNormal.sample(rng);
        samples.push((amp * v + floor * noise).clamp(-1.0, 1.0) as f32);
    }
    AudioClip::new(samples, SAMPLE_RATE)
}

fn white_noise(n: usize, rng: &mut impl Rng) -> Vec<f32> {
    (0..n)
        .map(|_| (0.1 * Distribution::<f64>::sample(&StandardNormal, rng)).clamp(-1.0, 1.0) as f32)
        .collect()
}

/// Pink noise via Paul Kellet's economy filter.
fn pink_noise(n: usize, rng: &mut impl Rng) -> Vec<f32> {
    let (mut b0, mut b1, mut b2) = (0.0f64, 0.0f64, 0.0f64);
    (0..n)
        .map(|_| {
            let w: f64 = StandardNormal.sample(rng);
            b0 = 0.99765 * b0 + w * 0.0990460;
            b1 = 0.96300 * b1 + w * 0.2965164;
            b2 = 0.57000 * b2 + w * 1.0526913;
            let p = b0 + b1 + b2 + w * 0.1848;
            (0.03 * p).clamp(-1.0, 1.0) as f32
        })
        .collect()
}

fn speaker(seed_value: u64, k: usize) -> String {
    format!("{:08x}", seed::derive(seed_value, &[0x5be, k as u64]) >> 32)
}

/// Write the corpus under `out_dir`. Byte-identical for equal configs.
pub fn make_fixture(out_dir: &Path, cfg: &FixtureConfig) -> Result<FixtureSummary> {
    if cfg.noise_seconds < 1.0 {
        return Err(Error::Config("noise_seconds must be at least 1".into()));
    }
    let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    let mut words: Vec<(&str, usize)> = COMMAND_WORDS.iter().map(|w| (*w, cfg.n_per_class)).collect();
    words.extend(cfg.oov_words.iter().map(|w| (w.as_str(), cfg.n_per_oov_word)));
    let mut summary = FixtureSummary {
        command_files: 0,
        oov_files: 0,
        noise_files: 0,
    };
    for (wi, (word, count)) in words.iter().enumerate() {
        if COMMAND_WORDS.contains(word) && wi >= COMMAND_WORDS.len() {
            return Err(Error::Config(format!("{word} is a command word, not out-of-vocabulary")));
        }
        let dir = out_dir.join(word);
        mkdir(&dir)?;
        for k in 0..*count {
            let mut rng = seed::rng(seed::derive(cfg.seed, &[wi as u64, k as u64]));
            let clip = render(pattern_for(word), &mut rng, cfg.noise_floor);
            write_wav(&dir.join(format!("{}_nohash_0.wav", speaker(cfg.seed, k))), &clip)?;
        }
        if wi < COMMAND_WORDS.len() {
            summary.command_files += count;
        } else {
            summary.oov_files += count;
        }
    }
    let noise_dir = out_dir.join(NOISE_DIR);
    mkdir(&noise_dir)?;
    let n = (cfg.noise_seconds * SAMPLE_RATE as f64) as usize;
    let mut rng = seed::rng(seed::derive(cfg.seed, &[0x401]));
    write_wav(&noise_dir.join("white_noise.wav"), &AudioClip::new(white_noise(n, &mut rng), SAMPLE_RATE))?;
    write_wav(&noise_dir.join("pink_noise.wav"), &AudioClip::new(pink_noise(n, &mut rng), SAMPLE_RATE))?;
    summary.noise_files = 2;
    Ok(summary)
}
