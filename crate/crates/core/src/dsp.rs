//! Short-time analysis: framing, windows, FFT, mel filterbanks and log
//! mel-band energies.
//!
//! Every stream shares one frame grid: frame `t` is centered on sample
//! `t * hop` and zero padded past the signal edges, whatever the window
//! length. This keeps features computed with 40 ms and 480 ms windows aligned
//! frame for frame.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array3;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::audio::{AudioClip, FRAME_HOP_SECONDS};
use crate::error::{Error, Result};
use crate::volume::{FeatureType, FeatureVolume};

/// Largest FFT the analysis code will plan.
pub const MAX_FFT_SIZE: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowKind {
    Hamming,
    Rectangular,
}

/// Symmetric Hamming window.
pub fn hamming(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    let denom = (len - 1) as f64;
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / denom).cos())
        .collect()
}

pub fn window(kind: WindowKind, len: usize) -> Vec<f64> {
    match kind {
        WindowKind::Hamming => hamming(len),
        WindowKind::Rectangular => vec![1.0; len],
    }
}

/// Hop and window length in samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FramingPlan {
    hop: usize,
    window: usize,
}

impl FramingPlan {
    pub fn new(hop: usize, window: usize) -> Result<Self> {
        if hop == 0 {
            return Err(Error::validation("hop must be at least one sample"));
        }
        if window < hop {
            return Err(Error::validation(format!(
                "window of {window} samples is shorter than the {hop}-sample hop"
            )));
        }
        if window > MAX_FFT_SIZE {
            return Err(Error::validation(format!("window of {window} samples is too long")));
        }
        Ok(Self { hop, window })
    }

    pub fn from_seconds(sample_rate: u32, hop: f64, window: f64) -> Result<Self> {
        let rate = sample_rate as f64;
        Self::new((hop * rate).round() as usize, (window * rate).round() as usize)
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// `ceil(len / hop)`.
    pub fn frame_count(&self, len: usize) -> usize {
        len.div_ceil(self.hop)
    }

    /// Index of the first sample of frame `t`; negative inside the left padding.
    pub fn frame_start(&self, t: usize) -> isize {
        (t * self.hop) as isize - (self.window / 2) as isize
    }

    /// Copy frame `t` of `signal` into `out`, zero padding outside the signal.
    pub fn fill_frame(&self, signal: &[f64], t: usize, out: &mut [f64]) {
        let start = self.frame_start(t);
        for (i, slot) in out.iter_mut().take(self.window).enumerate() {
            let idx = start + i as isize;
            *slot = if idx >= 0 && (idx as usize) < signal.len() {
                signal[idx as usize]
            } else {
                0.0
            };
        }
    }
}

/// Cut `signal` into centered, windowed frames.
pub fn frame_signal(signal: &[f64], plan: &FramingPlan, kind: WindowKind) -> Result<Vec<Vec<f64>>> {
    if signal.is_empty() {
        return Err(Error::validation("cannot frame an empty signal"));
    }
    let win = window(kind, plan.window());
    Ok((0..plan.frame_count(signal.len()))
        .map(|t| {
            let mut frame = vec![0.0; plan.window()];
            plan.fill_frame(signal, t, &mut frame);
            frame.iter_mut().zip(&win).for_each(|(s, w)| *s *= w);
            frame
        })
        .collect())
}

/// One-sided spectrum of a single frame.
#[derive(Debug, Clone, PartialEq)]
pub struct StftFrame {
    pub coefficients: Vec<Complex64>,
    pub frame_index: usize,
    pub fft_size: usize,
}

impl StftFrame {
    pub fn magnitudes(&self) -> Vec<f64> {
        self.coefficients.iter().map(|c| c.norm()).collect()
    }
}

fn check_fft_size(n: usize) -> Result<()> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::validation(format!("FFT size {n} is not a power of two")));
    }
    if n > MAX_FFT_SIZE {
        return Err(Error::validation(format!("FFT size {n} exceeds {MAX_FFT_SIZE}")));
    }
    Ok(())
}

/// Forward transform of a real frame, zero padded to `n`, keeping bins `0..=n/2`.
pub fn fft(frame: &[f64], n: usize) -> Result<StftFrame> {
    check_fft_size(n)?;
    if frame.len() > n {
        return Err(Error::validation(format!(
            "frame of {} samples does not fit a {n}-point FFT",
            frame.len()
        )));
    }
    let plan = FftPlanner::new().plan_fft_forward(n);
    let mut buf: Vec<Complex64> = frame.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    buf.resize(n, Complex64::new(0.0, 0.0));
    plan.process(&mut buf);
    buf.truncate(n / 2 + 1);
    Ok(StftFrame {
        coefficients: buf,
        frame_index: 0,
        fft_size: n,
    })
}

/// Reusable framed FFT analyzer for one window length.
pub struct Stft {
    plan: FramingPlan,
    fft_size: usize,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    work: RefCell<Workspace>,
}

/// Buffers reused across frames; fresh large allocations per frame cost more
/// than the transform itself.
struct Workspace {
    a: Vec<f64>,
    b: Vec<f64>,
    buf: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

impl Stft {
    /// FFT size defaults to the next power of two at or above the window length.
    pub fn new(plan: FramingPlan, kind: WindowKind) -> Result<Self> {
        Self::with_fft_size(plan, kind, plan.window().next_power_of_two())
    }

    pub fn with_fft_size(plan: FramingPlan, kind: WindowKind, fft_size: usize) -> Result<Self> {
        check_fft_size(fft_size)?;
        if fft_size < plan.window() {
            return Err(Error::validation(format!(
                "FFT size {fft_size} is shorter than the {}-sample window",
                plan.window()
            )));
        }
        let fft = FftPlanner::new().plan_fft_forward(fft_size);
        let work = RefCell::new(Workspace {
            a: vec![0.0; plan.window()],
            b: vec![0.0; plan.window()],
            buf: vec![Complex64::new(0.0, 0.0); fft_size],
            scratch: vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()],
        });
        Ok(Self {
            plan,
            fft_size,
            window: window(kind, plan.window()),
            fft,
            work,
        })
    }

    pub fn fft_size(&self) -> usize {
        self.fft_size
    }

    pub fn plan(&self) -> &FramingPlan {
        &self.plan
    }

    pub fn frame(&self, signal: &[f64], t: usize) -> StftFrame {
        let mut work = self.work.borrow_mut();
        let Workspace { a, buf, scratch, .. } = &mut *work;
        self.plan.fill_frame(signal, t, a);
        buf.fill(Complex64::new(0.0, 0.0));
        for ((slot, s), w) in buf.iter_mut().zip(a.iter()).zip(&self.window) {
            slot.re = s * w;
        }
        self.fft.process_with_scratch(buf, scratch);
        StftFrame {
            coefficients: buf[..=self.fft_size / 2].to_vec(),
            frame_index: t,
            fft_size: self.fft_size,
        }
    }

    /// Frame `t` of two signals from a single complex transform of
    /// `a + i*b`; each result equals [`Self::frame`] up to round-off.
    pub fn frame_pair(&self, a: &[f64], b: &[f64], t: usize) -> (StftFrame, StftFrame) {
        let n = self.fft_size;
        let mut work = self.work.borrow_mut();
        let Workspace { a: sa, b: sb, buf, scratch } = &mut *work;
        self.plan.fill_frame(a, t, sa);
        self.plan.fill_frame(b, t, sb);
        buf.fill(Complex64::new(0.0, 0.0));
        for (i, w) in self.window.iter().enumerate() {
            buf[i] = Complex64::new(sa[i] * w, sb[i] * w);
        }
        self.fft.process_with_scratch(buf, scratch);
        let (xa, xb) = (0..=n / 2)
            .map(|k| {
                let z = buf[k];
                let m = buf[(n - k) % n].conj();
                ((z + m) * 0.5, (z - m) * Complex64::new(0.0, -0.5))
            })
            .unzip();
        let frame = |coefficients| StftFrame {
            coefficients,
            frame_index: t,
            fft_size: n,
        };
        (frame(xa), frame(xb))
    }

    pub fn analyze(&self, signal: &[f64]) -> Vec<StftFrame> {
        (0..self.plan.frame_count(signal.len()))
            .map(|t| self.frame(signal, t))
            .collect()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterShape {
    /// Unit-peak triangles whose feet sit on the neighbouring centers.
    Triangular,
    /// Disjoint bands partitioning the range.
    Rectangular,
}

/// Band weights over the `N/2 + 1` bins of a one-sided spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    /// Per band: first bin with non-zero weight and the weights from there on.
    bands: Vec<(usize, Vec<f64>)>,
    /// Lower and upper edge of each band in Hz.
    band_edges: Vec<(f64, f64)>,
    fft_size: usize,
}

impl MelFilterbank {
    pub fn num_bands(&self) -> usize {
        self.bands.len()
    }

    pub fn fft_size(&self) -> usize {
        self.fft_size
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn band_edges(&self) -> &[(f64, f64)] {
        &self.band_edges
    }

    /// Non-zero span of band `b`: starting bin and weights.
    pub fn band(&self, b: usize) -> (usize, &[f64]) {
        let (start, w) = &self.bands[b];
        (*start, w)
    }

    /// Weight of band `b` at bin `k`.
    pub fn weight(&self, b: usize, k: usize) -> f64 {
        let (start, w) = &self.bands[b];
        if k < *start {
            0.0
        } else {
            w.get(k - start).copied().unwrap_or(0.0)
        }
    }

    /// `sum_k H_b(k) * values[k]` for every band.
    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        self.bands
            .iter()
            .map(|(start, w)| w.iter().zip(&values[*start..]).map(|(a, b)| a * b).sum())
            .collect()
    }
}

pub fn build_mel_filterbank(
    num_bands: usize,
    fft_size: usize,
    sample_rate: u32,
    f_low: f64,
    f_high: f64,
    shape: FilterShape,
) -> Result<MelFilterbank> {
    check_fft_size(fft_size)?;
    let nyquist = sample_rate as f64 / 2.0;
    if num_bands == 0 {
        return Err(Error::validation("a filterbank needs at least one band"));
    }
    if !(f_low >= 0.0 && f_low < f_high && f_high <= nyquist) {
        return Err(Error::validation(format!(
            "band range [{f_low}, {f_high}] Hz is not inside [0, {nyquist}]"
        )));
    }
    let bins = fft_size / 2 + 1;
    let bin_hz = |k: usize| k as f64 * sample_rate as f64 / fft_size as f64;

    let (m_lo, m_hi) = (hz_to_mel(f_low), hz_to_mel(f_high));
    let points = match shape {
        FilterShape::Triangular => num_bands + 2,
        FilterShape::Rectangular => num_bands + 1,
    };
    let edges: Vec<f64> = (0..points)
        .map(|i| {
            if i == points - 1 {
                f_high
            } else {
                mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (points - 1) as f64)
            }
        })
        .collect();

    let mut bands = Vec::with_capacity(num_bands);
    let mut band_edges = Vec::with_capacity(num_bands);
    for b in 0..num_bands {
        let row: Vec<f64> = (0..bins)
            .map(|k| {
                let f = bin_hz(k);
                match shape {
                    FilterShape::Triangular => {
                        let (lo, c, hi) = (edges[b], edges[b + 1], edges[b + 2]);
                        if f <= lo || f >= hi {
                            0.0
                        } else if f <= c {
                            (f - lo) / (c - lo)
                        } else {
                            (hi - f) / (hi - c)
                        }
                    }
                    FilterShape::Rectangular => {
                        let (lo, hi) = (edges[b], edges[b + 1]);
                        let last = b == num_bands - 1;
                        if f >= lo && (f < hi || (last && f <= hi)) {
                            1.0
                        } else {
                            0.0
                        }
                    }
                }
            })
            .collect();
        let first = row.iter().position(|&w| w > 0.0).ok_or_else(|| {
            Error::validation(format!(
                "{num_bands} bands is more than a {fft_size}-point FFT can resolve: band {b} covers no bin"
            ))
        })?;
        let last = row.iter().rposition(|&w| w > 0.0).unwrap();
        bands.push((first, row[first..=last].to_vec()));
        band_edges.push(match shape {
            FilterShape::Triangular => (edges[b], edges[b + 2]),
            FilterShape::Rectangular => (edges[b], edges[b + 1]),
        });
    }
    Ok(MelFilterbank {
        bands,
        band_edges,
        fft_size,
    })
}

/// What the mel bands integrate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectrumScale {
    Power,
    Magnitude,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogBase {
    Natural,
    Ten,
}

/// Whether mel energies are taken per channel or from the channel average.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MelChannels {
    Binaural,
    Monaural,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub num_bands: usize,
    pub window_seconds: f64,
    pub hop_seconds: f64,
    pub scale: SpectrumScale,
    pub log_base: LogBase,
    pub floor: f64,
    pub channels: MelChannels,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: crate::audio::DEFAULT_SAMPLE_RATE,
            num_bands: 40,
            window_seconds: 0.04,
            hop_seconds: FRAME_HOP_SECONDS,
            scale: SpectrumScale::Power,
            log_base: LogBase::Natural,
            floor: 1e-10,
            channels: MelChannels::Binaural,
        }
    }
}

/// Log mel-band energies, one volume layer per channel (`T x bands x C`).
pub fn log_mel_energies(clip: &AudioClip, cfg: &MelConfig) -> Result<FeatureVolume> {
    if clip.sample_rate() != cfg.sample_rate {
        return Err(Error::RateMismatch {
            expected: cfg.sample_rate,
            found: clip.sample_rate(),
        });
    }
    if clip.is_empty() {
        return Err(Error::validation(format!("{}: clip is empty", clip.id())));
    }
    let mixed;
    let source = match cfg.channels {
        MelChannels::Binaural => {
            clip.require_binaural()?;
            clip
        }
        MelChannels::Monaural => {
            mixed = clip.downmix();
            &mixed
        }
    };

    let plan = FramingPlan::from_seconds(cfg.sample_rate, cfg.hop_seconds, cfg.window_seconds)?;
    let stft = Stft::new(plan, WindowKind::Hamming)?;
    let bank = build_mel_filterbank(
        cfg.num_bands,
        stft.fft_size(),
        cfg.sample_rate,
        0.0,
        cfg.sample_rate as f64 / 2.0,
        FilterShape::Triangular,
    )?;

    let frames = plan.frame_count(source.len());
    let nch = source.num_channels();
    let mut data = Array3::zeros((frames, cfg.num_bands, nch));
    for (c, signal) in source.channels().iter().enumerate() {
        for t in 0..frames {
            let spec = stft.frame(signal, t);
            let values: Vec<f64> = spec
                .coefficients
                .iter()
                .map(|x| match cfg.scale {
                    SpectrumScale::Power => x.norm_sqr(),
                    SpectrumScale::Magnitude => x.norm(),
                })
                .collect();
            for (b, e) in bank.apply(&values).into_iter().enumerate() {
                let e = e.max(cfg.floor);
                data[[t, b, c]] = match cfg.log_base {
                    LogBase::Natural => e.ln(),
                    LogBase::Ten => e.log10(),
                };
            }
        }
    }
    FeatureVolume::new(data, FeatureType::Mel, cfg.hop_seconds)
}
