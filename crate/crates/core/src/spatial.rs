//! Spatial and spectral features from binaural audio: band-wise GCC-PHAT,
//! TDOA picking, dominant frequencies and normalized autocorrelation.

use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::audio::{AudioClip, DEFAULT_SAMPLE_RATE, FRAME_HOP_SECONDS};
use crate::dsp::{build_mel_filterbank, FilterShape, FramingPlan, MelFilterbank, Stft, StftFrame, WindowKind};
use crate::error::{Error, Result};
use crate::volume::{FeatureType, FeatureVolume};

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialConfig {
    pub sample_rate: u32,
    pub hop_seconds: f64,
    /// GCC/TDOA analysis windows, ascending; one volume layer each.
    pub resolutions_seconds: Vec<f64>,
    pub tau_max: usize,
    pub tdoa_bands: usize,
    /// Inclusive lag range kept by the GCC feature.
    pub gcc_lags: (isize, isize),
    pub phat_floor: f64,
    pub short_window_seconds: f64,
    pub domfreq_range_hz: (f64, f64),
    pub domfreq_peaks: usize,
    /// Peaks below this fraction of the frame's strongest peak are dropped.
    pub domfreq_threshold: f64,
    pub acr_first_lag: usize,
    pub acr_lags: usize,
}

impl Default for SpatialConfig {
    fn default() -> Self {
        Self {
            sample_rate: DEFAULT_SAMPLE_RATE,
            hop_seconds: FRAME_HOP_SECONDS,
            resolutions_seconds: vec![0.12, 0.24, 0.48],
            tau_max: 30,
            tdoa_bands: 5,
            gcc_lags: (-29, 30),
            phat_floor: 1e-12,
            short_window_seconds: 0.04,
            domfreq_range_hz: (100.0, 4000.0),
            domfreq_peaks: 3,
            domfreq_threshold: 0.01,
            acr_first_lag: 10,
            acr_lags: 400,
        }
    }
}

impl SpatialConfig {
    fn check_clip(&self, clip: &AudioClip, binaural: bool) -> Result<()> {
        if clip.sample_rate() != self.sample_rate {
            return Err(Error::RateMismatch {
                expected: self.sample_rate,
                found: clip.sample_rate(),
            });
        }
        if binaural {
            clip.require_binaural()?;
        }
        if clip.is_empty() {
            return Err(Error::validation(format!("{}: clip is empty", clip.id())));
        }
        Ok(())
    }

    fn plan(&self, window_seconds: f64) -> Result<FramingPlan> {
        FramingPlan::from_seconds(self.sample_rate, self.hop_seconds, window_seconds)
    }
}

/// Band-wise generalized cross-correlation over lags `-tau_max..=tau_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct GccSpectrum {
    /// `values[b][i]` is `R_b` at lag `i - tau_max`.
    pub values: Vec<Vec<f64>>,
    pub tau_max: usize,
}

impl GccSpectrum {
    pub fn at(&self, band: usize, lag: isize) -> f64 {
        self.values[band][(lag + self.tau_max as isize) as usize]
    }

    /// Lag of the largest `|R_b|`. Ties go to the smallest `|lag|`, then to
    /// the negative lag.
    pub fn peak_lag(&self, band: usize) -> isize {
        let tau = self.tau_max as isize;
        let mut best = (0isize, self.at(band, 0).abs());
        for d in 1..=tau {
            for lag in [-d, d] {
                let v = self.at(band, lag).abs();
                if v > best.1 {
                    best = (lag, v);
                }
            }
        }
        best.0
    }
}

/// `cos(2*pi*m/n)` and `sin(2*pi*m/n)` for `m in 0..n`.
struct Twiddles {
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl Twiddles {
    fn new(n: usize) -> Self {
        let (cos, sin) = (0..n)
            .map(|m| {
                let a = 2.0 * PI * m as f64 / n as f64;
                (a.cos(), a.sin())
            })
            .unzip();
        Self { cos, sin }
    }
}

/// Phase-transformed cross-spectrum, conjugated so that a positive lag means
/// the first channel leads the second.
fn whitened_cross(x1: &StftFrame, x2: &StftFrame, floor: f64) -> Vec<Complex64> {
    x1.coefficients
        .iter()
        .zip(&x2.coefficients)
        .map(|(a, b)| (a.conj() * b) / (a.norm_sqr() * b.norm_sqr()).sqrt().max(floor))
        .collect()
}

fn gcc_with_twiddles(
    x1: &StftFrame,
    x2: &StftFrame,
    bank: &MelFilterbank,
    tau_max: usize,
    floor: f64,
    tw: &Twiddles,
) -> GccSpectrum {
    let n = x1.fft_size;
    let half = n / 2;
    let cross = whitened_cross(x1, x2, floor);

    let values = (0..bank.num_bands())
        .map(|b| {
            let (start, weights) = bank.band(b);
            (-(tau_max as isize)..=tau_max as isize)
                .map(|lag| {
                    let step = lag.rem_euclid(n as isize) as usize;
                    let mut acc = 0.0;
                    let mut idx = (start * step) % n;
                    for (j, &w) in weights.iter().enumerate() {
                        let k = start + j;
                        if w != 0.0 {
                            let p = cross[k];
                            let term = p.re * tw.cos[idx] - p.im * tw.sin[idx];
                            // Bins strictly between DC and Nyquist stand for
                            // themselves and their mirror image.
                            acc += if k == 0 || k == half { w * term } else { 2.0 * w * term };
                        }
                        idx += step;
                        if idx >= n {
                            idx -= n;
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect();
    GccSpectrum { values, tau_max }
}

/// Band-wise GCC-PHAT between two spectra of the same frame:
/// `R_b(lag) = Re sum_k H_b(k) * W(k) * exp(i 2 pi k lag / N)` over the full
/// two-sided spectrum, where `W` is the phase-transformed cross-spectrum.
pub fn gcc_phat(x1: &StftFrame, x2: &StftFrame, bank: &MelFilterbank, tau_max: usize) -> Result<GccSpectrum> {
    gcc_phat_with_floor(x1, x2, bank, tau_max, SpatialConfig::default().phat_floor)
}

pub fn gcc_phat_with_floor(
    x1: &StftFrame,
    x2: &StftFrame,
    bank: &MelFilterbank,
    tau_max: usize,
    floor: f64,
) -> Result<GccSpectrum> {
    if x1.fft_size != x2.fft_size || bank.fft_size() != x1.fft_size {
        return Err(Error::validation(format!(
            "FFT sizes differ: {} / {} / filterbank {}",
            x1.fft_size,
            x2.fft_size,
            bank.fft_size()
        )));
    }
    if tau_max >= x1.fft_size / 2 {
        return Err(Error::validation(format!(
            "tau_max {tau_max} must be below half the FFT size {}",
            x1.fft_size
        )));
    }
    Ok(gcc_with_twiddles(x1, x2, bank, tau_max, floor, &Twiddles::new(x1.fft_size)))
}

/// Band `b`'s lag kernels over its bins: `cos[j, l] = w cos(2 pi k l / N)`
/// for lags `0..=tau_max` and `sin[j, l - 1] = w sin(2 pi k l / N)` for lags
/// `1..=tau_max`. With `C = re * cos` and `S = im * sin`,
/// `R_b(l) = C(l) - S(l)` and `R_b(-l) = C(l) + S(l)`.
struct LagKernel {
    start: usize,
    cos: Array2<f64>,
    sin: Array2<f64>,
}

fn lag_kernels(bank: &MelFilterbank, tau_max: usize, tw: &Twiddles) -> Vec<LagKernel> {
    let n = bank.fft_size();
    let half = n / 2;
    (0..bank.num_bands())
        .map(|b| {
            let (start, weights) = bank.band(b);
            let nb = weights.len();
            let mut cos = Array2::zeros((nb, tau_max + 1));
            let mut sin = Array2::zeros((nb, tau_max));
            for (j, &w) in weights.iter().enumerate() {
                let k = start + j;
                let w = if k == 0 || k == half { w } else { 2.0 * w };
                for lag in 0..=tau_max {
                    let idx = (k * lag) % n;
                    cos[[j, lag]] = w * tw.cos[idx];
                    if lag > 0 {
                        sin[[j, lag - 1]] = w * tw.sin[idx];
                    }
                }
            }
            LagKernel { start, cos, sin }
        })
        .collect()
}

/// Frames per matrix product in [`for_each_gcc`].
const GCC_BLOCK: usize = 32;

/// Run `per_frame` over the GCC-PHAT of every frame at every resolution.
fn for_each_gcc(
    clip: &AudioClip,
    cfg: &SpatialConfig,
    bands: usize,
    mut per_frame: impl FnMut(usize, usize, &GccSpectrum),
) -> Result<()> {
    cfg.check_clip(clip, true)?;
    for (r, &res) in cfg.resolutions_seconds.iter().enumerate() {
        let stft = Stft::new(cfg.plan(res)?, WindowKind::Hamming)?;
        let n = stft.fft_size();
        if cfg.tau_max >= n / 2 {
            return Err(Error::validation("tau_max too large for the analysis window"));
        }
        let bank = build_mel_filterbank(
            bands,
            n,
            cfg.sample_rate,
            0.0,
            cfg.sample_rate as f64 / 2.0,
            FilterShape::Rectangular,
        )?;
        let kernels = lag_kernels(&bank, cfg.tau_max, &Twiddles::new(n));
        let frames = stft.plan().frame_count(clip.len());
        for first in (0..frames).step_by(GCC_BLOCK) {
            let block: Vec<Vec<Complex64>> = (first..(first + GCC_BLOCK).min(frames))
                .map(|t| {
                    let (a, b) = stft.frame_pair(clip.channel(0), clip.channel(1), t);
                    whitened_cross(&a, &b, cfg.phat_floor)
                })
                .collect();
            let tau = cfg.tau_max;
            let per_band: Vec<Array2<f64>> = kernels
                .iter()
                .map(|lk| {
                    let nb = lk.cos.nrows();
                    let mut re = Array2::zeros((block.len(), nb));
                    let mut im = Array2::zeros((block.len(), nb));
                    for (i, cross) in block.iter().enumerate() {
                        for (j, c) in cross[lk.start..lk.start + nb].iter().enumerate() {
                            re[[i, j]] = c.re;
                            im[[i, j]] = c.im;
                        }
                    }
                    let c = re.dot(&lk.cos);
                    let s = im.dot(&lk.sin);
                    Array2::from_shape_fn((block.len(), 2 * tau + 1), |(i, col)| {
                        let lag = col as isize - tau as isize;
                        let l = lag.unsigned_abs();
                        let sv = if l == 0 { 0.0 } else { s[[i, l - 1]] };
                        if lag >= 0 {
                            c[[i, l]] - sv
                        } else {
                            c[[i, l]] + sv
                        }
                    })
                })
                .collect();
            for i in 0..block.len() {
                let gcc = GccSpectrum {
                    values: per_band.iter().map(|m| m.row(i).to_vec()).collect(),
                    tau_max: cfg.tau_max,
                };
                per_frame(r, first + i, &gcc);
            }
        }
    }
    Ok(())
}

/// Per-band TDOA at each resolution: `T x bands x resolutions`.
pub fn extract_tdoa(clip: &AudioClip, cfg: &SpatialConfig) -> Result<FeatureVolume> {
    cfg.check_clip(clip, true)?;
    let frames = cfg.plan(cfg.short_window_seconds)?.frame_count(clip.len());
    let mut data = Array3::zeros((frames, cfg.tdoa_bands, cfg.resolutions_seconds.len()));
    for_each_gcc(clip, cfg, cfg.tdoa_bands, |r, t, gcc| {
        for b in 0..cfg.tdoa_bands {
            data[[t, b, r]] = gcc.peak_lag(b) as f64;
        }
    })?;
    FeatureVolume::new(data, FeatureType::Tdoa, cfg.hop_seconds)
}

/// Full-band GCC-PHAT values over the configured lag range at each
/// resolution: `T x lags x resolutions`, lag ascending.
pub fn extract_gcc_features(clip: &AudioClip, cfg: &SpatialConfig) -> Result<FeatureVolume> {
    cfg.check_clip(clip, true)?;
    let (lo, hi) = cfg.gcc_lags;
    if lo > hi || lo.unsigned_abs() > cfg.tau_max || hi.unsigned_abs() > cfg.tau_max {
        return Err(Error::validation(format!(
            "GCC lag range {lo}..={hi} must lie within +/-{}",
            cfg.tau_max
        )));
    }
    let frames = cfg.plan(cfg.short_window_seconds)?.frame_count(clip.len());
    let width = (hi - lo + 1) as usize;
    let mut data = Array3::zeros((frames, width, cfg.resolutions_seconds.len()));
    for_each_gcc(clip, cfg, 1, |r, t, gcc| {
        for (i, lag) in (lo..=hi).enumerate() {
            data[[t, i, r]] = gcc.at(0, lag);
        }
    })?;
    FeatureVolume::new(data, FeatureType::Gcc, cfg.hop_seconds)
}

/// A spectral peak refined by parabolic interpolation of log magnitudes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralPeak {
    pub frequency: f64,
    pub magnitude: f64,
}

/// Interpolate the peak at bin `k` from magnitudes at `k-1`, `k`, `k+1`.
/// Returns the fractional bin offset and the interpolated linear magnitude.
pub fn parabolic_peak(left: f64, center: f64, right: f64) -> (f64, f64) {
    let tiny = f64::MIN_POSITIVE;
    let (a, b, g) = (left.max(tiny).ln(), center.max(tiny).ln(), right.max(tiny).ln());
    let denom = a - 2.0 * b + g;
    let delta = if denom < 0.0 { 0.5 * (a - g) / denom } else { 0.0 };
    (delta, (b - 0.25 * (a - g) * delta).exp())
}

/// Strongest thresholded peaks of one spectrum inside `range_hz`, by
/// descending magnitude.
pub fn dominant_peaks(
    spectrum: &StftFrame,
    sample_rate: u32,
    range_hz: (f64, f64),
    threshold: f64,
    count: usize,
) -> Vec<SpectralPeak> {
    let mags = spectrum.magnitudes();
    let n = spectrum.fft_size as f64;
    let bin_hz = sample_rate as f64 / n;
    let first = ((range_hz.0 / bin_hz).ceil() as usize).max(1);
    let last = ((range_hz.1 / bin_hz).floor() as usize).min(mags.len() - 2);
    let mut peaks: Vec<SpectralPeak> = (first..=last)
        .filter(|&k| mags[k] > mags[k - 1] && mags[k] >= mags[k + 1])
        .map(|k| {
            let (delta, magnitude) = parabolic_peak(mags[k - 1], mags[k], mags[k + 1]);
            SpectralPeak {
                frequency: ((k as f64 + delta) * bin_hz).clamp(range_hz.0, range_hz.1),
                magnitude,
            }
        })
        .collect();
    let strongest = peaks.iter().map(|p| p.magnitude).fold(0.0, f64::max);
    if strongest <= 0.0 {
        return Vec::new();
    }
    peaks.retain(|p| p.magnitude >= threshold * strongest);
    peaks.sort_by(|a, b| b.magnitude.total_cmp(&a.magnitude).then(a.frequency.total_cmp(&b.frequency)));
    peaks.truncate(count);
    peaks
}

/// Dominant frequencies and magnitudes per channel.
///
/// Layers are all channels' frequencies followed by all channels'
/// magnitudes (`[f ch1, f ch2, m ch1, m ch2]` for stereo). Missing peaks are
/// written as zero frequency and zero magnitude.
pub fn extract_dom_freq(clip: &AudioClip, cfg: &SpatialConfig) -> Result<FeatureVolume> {
    cfg.check_clip(clip, false)?;
    let stft = Stft::new(cfg.plan(cfg.short_window_seconds)?, WindowKind::Hamming)?;
    let frames = stft.plan().frame_count(clip.len());
    let nch = clip.num_channels();
    let mut data = Array3::zeros((frames, cfg.domfreq_peaks, 2 * nch));
    for (c, signal) in clip.channels().iter().enumerate() {
        for t in 0..frames {
            let spec = stft.frame(signal, t);
            let peaks = dominant_peaks(
                &spec,
                cfg.sample_rate,
                cfg.domfreq_range_hz,
                cfg.domfreq_threshold,
                cfg.domfreq_peaks,
            );
            for (i, p) in peaks.iter().enumerate() {
                data[[t, i, c]] = p.frequency;
                data[[t, i, nch + c]] = p.magnitude;
            }
        }
    }
    FeatureVolume::new(data, FeatureType::DomFreq, cfg.hop_seconds)
}

/// Normalized autocorrelation over a lag window: `T x lags x 2`.
pub fn extract_acr(clip: &AudioClip, cfg: &SpatialConfig) -> Result<FeatureVolume> {
    cfg.check_clip(clip, true)?;
    let plan = cfg.plan(cfg.short_window_seconds)?;
    let last_lag = cfg.acr_first_lag + cfg.acr_lags;
    if last_lag > plan.window() {
        return Err(Error::validation(format!(
            "autocorrelation lags up to {last_lag} exceed the {}-sample window",
            plan.window()
        )));
    }
    // Zero padding to twice the window makes the circular correlation linear.
    let n = (2 * plan.window()).next_power_of_two();
    let mut planner = FftPlanner::new();
    let forward = planner.plan_fft_forward(n);
    let inverse = planner.plan_fft_inverse(n);
    let frames = plan.frame_count(clip.len());
    let mut data = Array3::zeros((frames, cfg.acr_lags, clip.num_channels()));
    let mut samples = vec![0.0; plan.window()];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for (c, signal) in clip.channels().iter().enumerate() {
        for t in 0..frames {
            plan.fill_frame(signal, t, &mut samples);
            let energy: f64 = samples.iter().map(|x| x * x).sum();
            if energy == 0.0 {
                continue;
            }
            buf.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
            for (z, &x) in buf.iter_mut().zip(&samples) {
                z.re = x;
            }
            forward.process(&mut buf);
            buf.iter_mut().for_each(|z| *z = Complex64::new(z.norm_sqr(), 0.0));
            inverse.process(&mut buf);
            let r0 = buf[0].re;
            for i in 0..cfg.acr_lags {
                let lag = cfg.acr_first_lag + i;
                data[[t, i, c]] = (buf[lag].re / r0).clamp(-1.0, 1.0);
            }
        }
    }
    FeatureVolume::new(data, FeatureType::Acr, cfg.hop_seconds)
}
