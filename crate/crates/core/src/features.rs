//! Log-mel spectrogram front end.
//!
//! Hann-windowed STFT power spectrum, a bank of triangular filters spaced
//! evenly on the mel scale, then a floored natural log.

use std::io::Write;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::dataset::AudioClip;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Hann,
    /// All-ones window, mainly for checking the FFT path.
    Rectangular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub window_size: usize,
    pub hop: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
    pub window: WindowKind,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window_size: 400,
            hop: 160,
            n_fft: 512,
            n_mels: 40,
            f_min: 20.0,
            f_max: 7600.0,
            log_floor: 1e-10,
            window: WindowKind::Hann,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("feature config: {m}")));
        if self.window_size == 0 || self.hop == 0 {
            return bad("window_size and hop must be positive");
        }
        if self.window_size > self.n_fft {
            return bad("window_size must not exceed n_fft");
        }
        if self.n_mels == 0 {
            return bad("n_mels must be at least 1");
        }
        if !(self.f_min > 0.0 && self.f_min < self.f_max && self.f_max <= self.sample_rate as f64 / 2.0) {
            return bad("need 0 < f_min < f_max <= sample_rate / 2");
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive");
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frames produced for a clip of `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        if len < self.window_size {
            0
        } else {
            (len - self.window_size) / self.hop + 1
        }
    }

    /// Feature shape (n_mels, n_frames) for a one-second clip.
    pub fn output_shape(&self) -> (usize, usize) {
        (self.n_mels, self.n_frames(self.sample_rate as usize))
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// Debug dump: 8-byte magic, u32 rows, u32 cols, then little-endian f32
    /// values in row-major order.
    pub fn write_debug<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MATRIX_MAGIC)?;
        w.write_all(&(self.rows as u32).to_le_bytes())?;
        w.write_all(&(self.cols as u32).to_le_bytes())?;
        for &v in &self.data {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_debug(bytes: &[u8]) -> Result<Matrix> {
        let corrupt = |m: &str| Error::Config(format!("matrix dump: {m}"));
        if bytes.len() < 16 || &bytes[..8] != MATRIX_MAGIC {
            return Err(corrupt("bad header"));
        }
        let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() != rows * cols * 4 {
            return Err(corrupt("payload length does not match shape"));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(Matrix { rows, cols, data })
    }
}

pub const MATRIX_MAGIC: &[u8; 8] = b"KWSFMAT\0";

pub fn hz_to_mel(f: f64) -> f64 {
    1127.0 * (1.0 + f / 700.0).ln()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * ((m / 1127.0).exp() - 1.0)
}

/// Forward complex FFT of arbitrary length.
pub fn fft(input: &[Complex<f64>]) -> Vec<Complex<f64>> {
    let mut buf = input.to_vec();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    buf
}

pub fn hann_window(n: usize) -> Vec<f64> {
    // Periodic Hann, the usual choice for STFT analysis.
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Triangular mel filterbank, `n_mels × (n_fft/2 + 1)`.
pub fn mel_filterbank(config: &FeatureConfig) -> Result<Matrix> {
    config.validate()?;
    let n_bins = config.n_bins();
    let sr = config.sample_rate as f64;
    let (m_lo, m_hi) = (hz_to_mel(config.f_min), hz_to_mel(config.f_max));
    let step = (m_hi - m_lo) / (config.n_mels + 1) as f64;
    let edges: Vec<f64> = (0..config.n_mels + 2)
        .map(|i| mel_to_hz(m_lo + step * i as f64))
        .collect();
    let mut fb = Matrix::zeros(config.n_mels, n_bins);
    for m in 0..config.n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let mut sum = 0.0;
        for k in 0..n_bins {
            let f = k as f64 * sr / config.n_fft as f64;
            let w = ((f - lo) / (center - lo)).min((hi - f) / (hi - center)).max(0.0);
            fb.set(m, k, w);
            sum += w;
        }
        if sum <= 0.0 {
            return Err(Error::Resolution { filter: m });
        }
    }
    Ok(fb)
}

/// Mel-band center frequencies in Hz.
pub fn mel_centers(config: &FeatureConfig) -> Vec<f64> {
    let (m_lo, m_hi) = (hz_to_mel(config.f_min), hz_to_mel(config.f_max));
    let step = (m_hi - m_lo) / (config.n_mels + 1) as f64;
    (1..=config.n_mels).map(|i| mel_to_hz(m_lo + step * i as f64)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpectrogram {
    /// `n_mels × n_frames`.
    pub values: Matrix,
    pub config: FeatureConfig,
}

impl LogMelSpectrogram {
    pub fn n_mels(&self) -> usize {
        self.values.rows
    }

    pub fn n_frames(&self) -> usize {
        self.values.cols
    }
}

/// Owns the FFT plan, window and filterbank so they are built once and
/// shared read-only across threads.
#[derive(Clone)]
pub struct FeatureExtractor {
    config: FeatureConfig,
    window: Vec<f64>,
    filterbank: Arc<Matrix>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for FeatureExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureExtractor").field("config", &self.config).finish()
    }
}

impl FeatureExtractor {
    pub fn new(config: FeatureConfig) -> Result<Self> {
        let filterbank = Arc::new(mel_filterbank(&config)?);
        let window = match config.window {
            WindowKind::Hann => hann_window(config.window_size),
            WindowKind::Rectangular => vec![1.0; config.window_size],
        };
        let fft = FftPlanner::new().plan_fft_forward(config.n_fft);
        Ok(Self {
            config,
            window,
            filterbank,
            fft,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    pub fn filterbank(&self) -> &Matrix {
        &self.filterbank
    }

    /// `|FFT|²` of each windowed frame, `(n_fft/2 + 1) × n_frames`.
    pub fn power_spectrogram(&self, clip: &AudioClip) -> Result<Matrix> {
        let cfg = &self.config;
        if clip.len() < cfg.window_size {
            return Err(Error::TooShort {
                len: clip.len(),
                window: cfg.window_size,
            });
        }
        let n_frames = cfg.n_frames(clip.len());
        let n_bins = cfg.n_bins();
        let mut out = Matrix::zeros(n_bins, n_frames);
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for t in 0..n_frames {
            let frame = &clip.samples[t * cfg.hop..t * cfg.hop + cfg.window_size];
            for (i, b) in buf.iter_mut().enumerate() {
                *b = match frame.get(i) {
                    Some(&s) => Complex::new(s as f64 * self.window[i], 0.0),
                    None => Complex::new(0.0, 0.0),
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for k in 0..n_bins {
                out.set(k, t, buf[k].norm_sqr());
            }
        }
        Ok(out)
    }

    pub fn log_mel(&self, clip: &AudioClip) -> Result<LogMelSpectrogram> {
        let power = self.power_spectrogram(clip)?;
        let fb = &*self.filterbank;
        let floor = self.config.log_floor;
        let mut values = Matrix::zeros(fb.rows, power.cols);
        for m in 0..fb.rows {
            let weights = fb.row(m);
            for t in 0..power.cols {
                let e: f64 = weights
                    .iter()
                    .enumerate()
                    .filter(|(_, w)| **w > 0.0)
                    .map(|(k, w)| w * power.get(k, t))
                    .sum();
                values.set(m, t, e.max(floor).ln());
            }
        }
        Ok(LogMelSpectrogram {
            values,
            config: self.config.clone(),
        })
    }
}
