//! Geometric wideband mmWave channel, ULA codebook and the exhaustive
//! optimal-beam oracle.
//!
//! The base station carries an `M`-element uniform linear array with
//! half-wavelength spacing. Each propagation path contributes a delayed,
//! band-limited tap to every OFDM subcarrier, multiplied by the array
//! steering vector for its azimuth of arrival. Elevation is carried in the
//! path description but a linear array has no elevation degree of freedom,
//! so it does not enter the response.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("invalid codebook dimensions: M={elements}, Q={beams} (need M >= 1 and Q >= M)")]
    InvalidDimensions { elements: usize, beams: usize },
    #[error("invalid OFDM configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: expected {expected} antenna elements, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("channel has no paths")]
    NoPaths,
}

pub type Result<T> = std::result::Result<T, ChannelError>;

/// OFDM numerology and link budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfdmConfig {
    pub num_subcarriers: usize,
    pub cyclic_prefix_len: usize,
    /// Sampling interval in seconds.
    pub sample_interval: f64,
    /// Carrier frequency in Hz. Metadata only.
    pub carrier_freq: f64,
    /// Noise power, linear watts.
    pub noise_power: f64,
    /// Transmit power, linear watts.
    pub tx_power: f64,
}

impl Default for OfdmConfig {
    fn default() -> Self {
        Self {
            num_subcarriers: 64,
            cyclic_prefix_len: 16,
            sample_interval: 1.0 / 1.76e9,
            carrier_freq: 60e9,
            noise_power: 1e-9,
            tx_power: 1.0,
        }
    }
}

impl OfdmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(ChannelError::InvalidConfig(msg.to_string()));
        if self.num_subcarriers == 0 {
            return bad("num_subcarriers must be >= 1");
        }
        if self.cyclic_prefix_len == 0 {
            return bad("cyclic_prefix_len must be >= 1");
        }
        if !(self.sample_interval > 0.0 && self.sample_interval.is_finite()) {
            return bad("sample_interval must be > 0");
        }
        if !(self.noise_power > 0.0 && self.noise_power.is_finite()) {
            return bad("noise_power must be > 0");
        }
        if !(self.tx_power > 0.0 && self.tx_power.is_finite()) {
            return bad("tx_power must be > 0");
        }
        Ok(())
    }

    /// Length of the cyclic-prefix window in seconds.
    pub fn delay_window(&self) -> f64 {
        self.cyclic_prefix_len as f64 * self.sample_interval
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelPath {
    pub gain: Complex64,
    /// Seconds, relative to the first arrival.
    pub delay: f64,
    /// Azimuth of arrival in radians, measured from array broadside.
    pub azimuth: f64,
    /// Elevation of arrival in radians. Unused by the linear array response.
    pub elevation: f64,
}

/// Oversampled DFT codebook for a half-wavelength ULA.
///
/// Beam `q` points at `sin(theta) = -1 + 2q/Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    num_elements: usize,
    vectors: Vec<Vec<Complex64>>,
    steer_grid: Vec<f64>,
}

impl Codebook {
    pub fn num_elements(&self) -> usize {
        self.num_elements
    }

    pub fn num_beams(&self) -> usize {
        self.vectors.len()
    }

    pub fn vectors(&self) -> &[Vec<Complex64>] {
        &self.vectors
    }

    pub fn beam(&self, q: usize) -> &[Complex64] {
        &self.vectors[q]
    }

    pub fn steer_grid(&self) -> &[f64] {
        &self.steer_grid
    }
}

pub fn build_codebook(num_elements: usize, num_beams: usize) -> Result<Codebook> {
    if num_elements == 0 || num_beams == 0 || num_beams < num_elements {
        return Err(ChannelError::InvalidDimensions {
            elements: num_elements,
            beams: num_beams,
        });
    }
    let scale = 1.0 / (num_elements as f64).sqrt();
    let steer_grid: Vec<f64> = (0..num_beams)
        .map(|q| -1.0 + 2.0 * q as f64 / num_beams as f64)
        .collect();
    let vectors = steer_grid
        .iter()
        .map(|&s| {
            (0..num_elements)
                .map(|m| Complex64::from_polar(scale, PI * m as f64 * s))
                .collect()
        })
        .collect();
    Ok(Codebook {
        num_elements,
        vectors,
        steer_grid,
    })
}

/// ULA response `[exp(j*pi*m*sin(theta))]` for `m = 0..M-1`.
pub fn steering_vector(num_elements: usize, azimuth: f64) -> Vec<Complex64> {
    let s = azimuth.sin();
    (0..num_elements)
        .map(|m| Complex64::from_polar(1.0, PI * m as f64 * s))
        .collect()
}

/// Band-limited pulse `sinc(x / dt)`, with `p(0) = 1`.
pub fn pulse(x: f64, sample_interval: f64) -> f64 {
    let u = x / sample_interval;
    if u.abs() < 1e-12 {
        1.0
    } else {
        (PI * u).sin() / (PI * u)
    }
}

/// Per-subcarrier channel vectors at one coherence block.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelState {
    /// `subcarriers[k - 1]` holds `h_k`, a length-M vector.
    pub subcarriers: Vec<Vec<Complex64>>,
    pub timestamp: f64,
    /// Paths whose delay exceeded the cyclic-prefix window. Only their
    /// in-window taps contribute.
    pub truncated_paths: usize,
}

impl ChannelState {
    pub fn num_elements(&self) -> usize {
        self.subcarriers.first().map_or(0, Vec::len)
    }
}

/// Evaluates `h_k = sum_d sum_n a_n exp(-j 2 pi k d / K) p(d dt - tau_n) a(theta_n)`
/// for `k = 1..K`.
pub fn channel_response(
    paths: &[ChannelPath],
    cfg: &OfdmConfig,
    num_elements: usize,
    timestamp: f64,
) -> Result<ChannelState> {
    cfg.validate()?;
    if paths.is_empty() {
        return Err(ChannelError::NoPaths);
    }
    if num_elements == 0 {
        return Err(ChannelError::DimensionMismatch {
            expected: 1,
            actual: 0,
        });
    }
    let k_total = cfg.num_subcarriers;
    let taps = cfg.cyclic_prefix_len;
    let window = cfg.delay_window();

    let mut truncated_paths = 0;
    // Frequency-domain path coefficient c_{k,n} = a_n * sum_d exp(-j2pi k d/K) p(d dt - tau_n).
    let mut coeffs = vec![vec![Complex64::new(0.0, 0.0); paths.len()]; k_total];
    for (n, path) in paths.iter().enumerate() {
        if path.delay > window {
            truncated_paths += 1;
            log::warn!(
                "path {n} delay {:.3e}s exceeds cyclic-prefix window {:.3e}s; truncated",
                path.delay,
                window
            );
        }
        let tap_weights: Vec<f64> = (0..taps)
            .map(|d| pulse(d as f64 * cfg.sample_interval - path.delay, cfg.sample_interval))
            .collect();
        for (k_idx, row) in coeffs.iter_mut().enumerate() {
            let k = (k_idx + 1) as f64;
            let mut acc = Complex64::new(0.0, 0.0);
            for (d, &w) in tap_weights.iter().enumerate() {
                if w != 0.0 {
                    let phase = -2.0 * PI * k * d as f64 / k_total as f64;
                    acc += Complex64::from_polar(w, phase);
                }
            }
            row[n] = path.gain * acc;
        }
    }

    let steering: Vec<Vec<Complex64>> = paths
        .iter()
        .map(|p| steering_vector(num_elements, p.azimuth))
        .collect();
    let subcarriers = coeffs
        .iter()
        .map(|row| {
            let mut h = vec![Complex64::new(0.0, 0.0); num_elements];
            for (c, a) in row.iter().zip(&steering) {
                for (hm, am) in h.iter_mut().zip(a) {
                    *hm += c * am;
                }
            }
            h
        })
        .collect();

    Ok(ChannelState {
        subcarriers,
        timestamp,
        truncated_paths,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamMetrics {
    /// `(1/K) sum_k |h_k^H b|^2`, linear.
    pub gain: f64,
    pub snr_db: f64,
}

fn beam_gain(ch: &ChannelState, beam: &[Complex64]) -> f64 {
    let total: f64 = ch
        .subcarriers
        .iter()
        .map(|h| {
            h.iter()
                .zip(beam)
                .map(|(hm, bm)| hm.conj() * bm)
                .sum::<Complex64>()
                .norm_sqr()
        })
        .sum();
    total / ch.subcarriers.len() as f64
}

pub fn beam_metrics(ch: &ChannelState, beam: &[Complex64], cfg: &OfdmConfig) -> Result<BeamMetrics> {
    cfg.validate()?;
    let expected = ch.num_elements();
    if beam.len() != expected {
        return Err(ChannelError::DimensionMismatch {
            expected,
            actual: beam.len(),
        });
    }
    let gain = beam_gain(ch, beam);
    let snr_db = 10.0 * (cfg.tx_power * gain / cfg.noise_power).log10();
    Ok(BeamMetrics { gain, snr_db })
}

/// Exhaustive search for the SNR-maximizing codeword. Ties go to the lowest index.
pub fn optimal_beam(ch: &ChannelState, cb: &Codebook, cfg: &OfdmConfig) -> Result<usize> {
    cfg.validate()?;
    if ch.num_elements() != cb.num_elements() {
        return Err(ChannelError::DimensionMismatch {
            expected: cb.num_elements(),
            actual: ch.num_elements(),
        });
    }
    let mut best = 0;
    let mut best_gain = f64::NEG_INFINITY;
    for (q, b) in cb.vectors().iter().enumerate() {
        let gain = beam_gain(ch, b);
        if gain > best_gain {
            best_gain = gain;
            best = q;
        }
    }
    Ok(best)
}
