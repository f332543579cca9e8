//! Content-preserving waveform augmentation: additive noise, phase-vocoder
//! time stretch, and pitch shift, plus a random policy that draws parameters
//! from fixed grids.

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dataset::{resample_to_len, standardize_clip, AudioClip};
use crate::seed;

pub const NOISE_LEVELS: [f32; 4] = [0.1, 0.15, 0.20, 0.25];
pub const STRETCH_RATES: [f64; 4] = [0.81, 0.93, 1.07, 1.23];
pub const PITCH_SEMITONES: [f64; 8] = [-3.5, -2.5, -2.0, -1.0, 1.0, 2.0, 2.5, 3.5];

const PV_FFT: usize = 512;
const PV_HOP: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Background,
    Gaussian,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub noise_level: f32,
    pub noise_kind: NoiseKind,
    pub stretch_rate: f64,
    pub pitch_semitones: f64,
}

impl AugmentSpec {
    pub const IDENTITY: AugmentSpec = AugmentSpec {
        noise_level: 0.0,
        noise_kind: NoiseKind::None,
        stretch_rate: 1.0,
        pitch_semitones: 0.0,
    };

    pub fn is_identity(&self) -> bool {
        !self.has_noise() && self.stretch_rate == 1.0 && self.pitch_semitones == 0.0
    }

    fn has_noise(&self) -> bool {
        self.noise_kind != NoiseKind::None && self.noise_level > 0.0
    }
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Per-transform probabilities and the grids parameters are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub p_noise: f64,
    pub p_stretch: f64,
    pub p_pitch: f64,
    /// Probability that applied noise comes from the background recordings
    /// rather than a Gaussian generator.
    pub p_background: f64,
    pub noise_levels: Vec<f32>,
    pub stretch_rates: Vec<f64>,
    pub pitch_semitones: Vec<f64>,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            p_noise: 0.5,
            p_stretch: 0.3,
            p_pitch: 0.3,
            p_background: 0.5,
            noise_levels: NOISE_LEVELS.to_vec(),
            stretch_rates: STRETCH_RATES.to_vec(),
            pitch_semitones: PITCH_SEMITONES.to_vec(),
        }
    }
}

impl AugmentPolicy {
    pub fn none() -> Self {
        Self {
            p_noise: 0.0,
            p_stretch: 0.0,
            p_pitch: 0.0,
            ..Self::default()
        }
    }

    pub fn is_disabled(&self) -> bool {
        self.p_noise == 0.0 && self.p_stretch == 0.0 && self.p_pitch == 0.0
    }
}

/// Draw an independent on/off decision for each transform, then a grid value
/// for each transform that is on.
pub fn sample_augmentation(rng_seed: u64, policy: &AugmentPolicy) -> AugmentSpec {
    let mut rng = seed::rng(rng_seed);
    let mut spec = AugmentSpec::IDENTITY;
    if !policy.noise_levels.is_empty() && rng.gen_bool(policy.p_noise.clamp(0.0, 1.0)) {
        spec.noise_level = policy.noise_levels[rng.gen_range(0..policy.noise_levels.len())];
        spec.noise_kind = if rng.gen_bool(policy.p_background.clamp(0.0, 1.0)) {
            NoiseKind::Background
        } else {
            NoiseKind::Gaussian
        };
    }
    if !policy.stretch_rates.is_empty() && rng.gen_bool(policy.p_stretch.clamp(0.0, 1.0)) {
        spec.stretch_rate = policy.stretch_rates[rng.gen_range(0..policy.stretch_rates.len())];
    }
    if !policy.pitch_semitones.is_empty() && rng.gen_bool(policy.p_pitch.clamp(0.0, 1.0)) {
        spec.pitch_semitones = policy.pitch_semitones[rng.gen_range(0..policy.pitch_semitones.len())];
    }
    spec
}

pub enum NoiseSource<'a> {
    Background(&'a AudioClip),
    Gaussian,
}

/// Standard-normal samples for a seed.
pub fn gaussian_noise(len: usize, rng_seed: u64) -> Vec<f32> {
    let mut rng = seed::rng(rng_seed);
    (0..len).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect()
}

fn unit_peak(mut v: Vec<f32>) -> Vec<f32> {
    let peak = v.iter().fold(0.0f32, |m, s| m.max(s.abs()));
    if peak > 0.0 {
        v.iter_mut().for_each(|s| *s /= peak);
    }
    v
}

/// The noise segment `add_noise` mixes in, scaled to unit peak.
pub fn noise_segment(source: &NoiseSource<'_>, len: usize, rng_seed: u64) -> Vec<f32> {
    match source {
        NoiseSource::Gaussian => unit_peak(gaussian_noise(len, rng_seed)),
        NoiseSource::Background(noise) => {
            if noise.len() <= len {
                let mut seg = noise.samples.clone();
                seg.resize(len, 0.0);
                return unit_peak(seg);
            }
            let start = seed::rng(rng_seed).gen_range(0..=noise.len() - len);
            unit_peak(noise.samples[start..start + len].to_vec())
        }
    }
}

/// `clip + level * noise_unit`, clipped to [-1, 1].
pub fn add_noise(clip: &AudioClip, source: &NoiseSource<'_>, level: f32, rng_seed: u64) -> AudioClip {
    if level == 0.0 {
        return clip.clone();
    }
    let seg = noise_segment(source, clip.len(), rng_seed);
    AudioClip {
        samples: clip
            .samples
            .iter()
            .zip(&seg)
            .map(|(s, n)| (s + level * n).clamp(-1.0, 1.0))
            .collect(),
        sample_rate: clip.sample_rate,
        source_path: clip.source_path.clone(),
    }
}

fn pv_window() -> Vec<f64> {
    crate::features::hann_window(PV_FFT)
}

/// Phase-vocoder time stretch without re-standardization. The output has
/// `round(len / rate)` samples; pitch is preserved.
pub fn time_stretch_raw(samples: &[f32], rate: f64) -> Vec<f32> {
    assert!(rate > 0.0, "stretch rate must be positive");
    let out_len = (samples.len() as f64 / rate).round() as usize;
    if samples.is_empty() || out_len == 0 {
        return vec![0.0; out_len];
    }
    let n = PV_FFT;
    let hop = PV_HOP;
    let half = n / 2;
    let n_bins = half + 1;
    let window = pv_window();

    // Centered framing: pad n/2 on both sides, then up to a whole hop.
    let mut padded = vec![0.0f64; half];
    padded.extend(samples.iter().map(|&s| s as f64));
    padded.extend(std::iter::repeat(0.0).take(half));
    let extra = (hop - (padded.len() - n) % hop) % hop;
    padded.extend(std::iter::repeat(0.0).take(extra));
    let n_frames = (padded.len() - n) / hop + 1;

    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);

    let mut spec: Vec<Vec<Complex<f64>>> = Vec::with_capacity(n_frames + 1);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for t in 0..n_frames {
        for i in 0..n {
            buf[i] = Complex::new(padded[t * hop + i] * window[i], 0.0);
        }
        fwd.process(&mut buf);
        spec.push(buf[..n_bins].to_vec());
    }
    spec.push(vec![Complex::new(0.0, 0.0); n_bins]);

    let advance: Vec<f64> = (0..n_bins)
        .map(|k| 2.0 * std::f64::consts::PI * k as f64 * hop as f64 / n as f64)
        .collect();
    let mut phase: Vec<f64> = spec[0].iter().map(|c| c.arg()).collect();

    let n_out_frames = (n_frames as f64 / rate).ceil() as usize;
    let total = (n_out_frames - 1) * hop + n;
    let mut out = vec![0.0f64; total];
    let mut wsum = vec![0.0f64; total];
    let mut frame = vec![Complex::new(0.0, 0.0); n];
    for i in 0..n_out_frames {
        let t = i as f64 * rate;
        let f0 = (t.floor() as usize).min(n_frames - 1);
        let alpha = t - f0 as f64;
        let (a, b) = (&spec[f0], &spec[f0 + 1]);
        for k in 0..n_bins {
            let mag = (1.0 - alpha) * a[k].norm() + alpha * b[k].norm();
            frame[k] = Complex::from_polar(mag, phase[k]);
            let mut d = b[k].arg() - a[k].arg() - advance[k];
            d -= 2.0 * std::f64::consts::PI * (d / (2.0 * std::f64::consts::PI)).round();
            phase[k] += advance[k] + d;
        }
        frame[0].im = 0.0;
        frame[half].im = 0.0;
        for k in 1..half {
            frame[n - k] = frame[k].conj();
        }
        inv.process(&mut frame);
        let start = i * hop;
        for j in 0..n {
            let w = window[j];
            out[start + j] += frame[j].re / n as f64 * w;
            wsum[start + j] += w * w;
        }
    }
    for (o, w) in out.iter_mut().zip(&wsum) {
        if *w > 1e-8 {
            *o /= w;
        }
    }
    let mut res: Vec<f32> = out.iter().skip(half).take(out_len).map(|&v| v as f32).collect();
    res.resize(out_len, 0.0);
    res
}

/// Stretch duration by `1 / rate` keeping pitch, then re-standardize to one
/// second.
pub fn time_stretch(clip: &AudioClip, rate: f64) -> AudioClip {
    let stretched = AudioClip {
        samples: time_stretch_raw(&clip.samples, rate),
        sample_rate: clip.sample_rate,
        source_path: clip.source_path.clone(),
    };
    standardize_clip(&stretched, clip.sample_rate)
}

/// Shift pitch by `semitones` keeping duration: stretch to
/// `len * 2^(s/12)` samples, then resample back to `len`.
pub fn pitch_shift(clip: &AudioClip, semitones: f64) -> AudioClip {
    assert!(semitones.abs() <= 12.0, "pitch shift limited to one octave");
    let factor = 2f64.powf(semitones / 12.0);
    let stretched = time_stretch_raw(&clip.samples, 1.0 / factor);
    let len = clip.len();
    let step = stretched.len() as f64 / len as f64;
    AudioClip {
        samples: resample_to_len(&stretched, len, step),
        sample_rate: clip.sample_rate,
        source_path: clip.source_path.clone(),
    }
}

/// Apply stretch, then pitch shift, then noise. The result is one second long
/// and bounded to [-1, 1]. Background noise is picked from `noise_bank` by
/// seed; an empty bank falls back to Gaussian noise.
pub fn apply(clip: &AudioClip, spec: &AugmentSpec, rng_seed: u64, noise_bank: &[AudioClip]) -> AudioClip {
    let rate = clip.sample_rate;
    let mut out = standardize_clip(clip, rate);
    if spec.is_identity() {
        return out;
    }
    if spec.stretch_rate != 1.0 {
        out = time_stretch(&out, spec.stretch_rate);
    }
    if spec.pitch_semitones != 0.0 {
        out = pitch_shift(&out, spec.pitch_semitones);
    }
    if spec.has_noise() {
        let noise_seed = seed::derive(rng_seed, &[1]);
        let source = match spec.noise_kind {
            NoiseKind::Background if !noise_bank.is_empty() => {
                let pick = seed::rng(seed::derive(rng_seed, &[2])).gen_range(0..noise_bank.len());
                NoiseSource::Background(&noise_bank[pick])
            }
            _ => NoiseSource::Gaussian,
        };
        out = add_noise(&out, &source, spec.noise_level, noise_seed);
    }
    out.samples.iter_mut().for_each(|s| *s = s.clamp(-1.0, 1.0));
    out
}
