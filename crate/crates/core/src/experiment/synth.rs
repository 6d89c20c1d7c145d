//! Seeded synthetic binaural corpora with delay- and band-separable events.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::audio::{format_annotations, write_wav, AudioClip, EventAnnotation, DEFAULT_SAMPLE_RATE, MANIFEST_FILE};
use crate::error::{Error, Result};

/// Largest interchannel delay a class may use, in samples.
pub const MAX_DELAY: i32 = 30;
const FADE_SECONDS: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub enum SourceKind {
    /// Gaussian noise band-limited to `[low, high]` Hz.
    Noise { low_hz: f64, high_hz: f64 },
    Tone { freq_hz: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthClass {
    pub name: String,
    pub kind: SourceKind,
    /// Samples by which channel 2 lags channel 1.
    pub delay: i32,
    /// Linear gains for channels 1 and 2.
    pub gains: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub recordings: usize,
    pub duration_seconds: f64,
    pub sample_rate: u32,
    pub contexts: Vec<String>,
    pub folds: u32,
    pub classes: Vec<SynthClass>,
    /// Mean event onsets per second per class; 0 gives silent recordings.
    pub event_rate: f64,
    pub event_length: (f64, f64),
    /// Event RMS level before channel gains.
    pub level: f64,
    /// RMS of independent white noise added to each channel.
    pub background: f64,
    pub seed: u64,
}

const NOISE_BANDS: [(f64, f64); 4] = [(300.0, 1500.0), (2500.0, 6000.0), (600.0, 3000.0), (4000.0, 9000.0)];

impl SynthSpec {
    /// Classes differ in both spectrum and delay.
    pub fn separable(delays: &[i32], seed: u64) -> Self {
        let classes = delays
            .iter()
            .enumerate()
            .map(|(k, &d)| {
                let (low_hz, high_hz) = NOISE_BANDS[k % NOISE_BANDS.len()];
                let louder_left = d >= 0;
                SynthClass {
                    name: class_name(k),
                    kind: SourceKind::Noise { low_hz, high_hz },
                    delay: d,
                    gains: if louder_left { (1.0, 0.7) } else { (0.7, 1.0) },
                }
            })
            .collect();
        Self::with_classes(classes, seed)
    }

    /// Classes share one spectrum and one level; only the delay differs.
    pub fn pure_spatial(delays: &[i32], seed: u64) -> Self {
        let classes = delays
            .iter()
            .enumerate()
            .map(|(k, &d)| SynthClass {
                name: class_name(k),
                kind: SourceKind::Noise {
                    low_hz: 500.0,
                    high_hz: 4000.0,
                },
                delay: d,
                gains: (1.0, 1.0),
            })
            .collect();
        Self::with_classes(classes, seed)
    }

    fn with_classes(classes: Vec<SynthClass>, seed: u64) -> Self {
        Self {
            recordings: 20,
            duration_seconds: 30.0,
            sample_rate: DEFAULT_SAMPLE_RATE,
            contexts: vec!["home".into(), "street".into()],
            folds: 5,
            classes,
            event_rate: 0.2,
            event_length: (1.0, 3.0),
            level: 0.1,
            background: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.recordings == 0 || self.duration_seconds <= 0.0 || self.sample_rate == 0 {
            return Err(Error::validation("corpus needs recordings with positive duration"));
        }
        if self.contexts.is_empty() || self.folds == 0 || self.classes.is_empty() {
            return Err(Error::validation("corpus needs contexts, folds and classes"));
        }
        if self.recordings < self.folds as usize {
            return Err(Error::validation("fewer recordings than folds"));
        }
        if let Some(c) = self.classes.iter().find(|c| c.delay.abs() > MAX_DELAY) {
            return Err(Error::validation(format!(
                "class `{}` delay {} exceeds {MAX_DELAY} samples",
                c.name, c.delay
            )));
        }
        let (lo, hi) = self.event_length;
        if !(lo > 0.0 && hi >= lo) || self.event_rate < 0.0 {
            return Err(Error::validation("invalid event length range or rate"));
        }
        Ok(())
    }

    /// Context and fold of recording `i`: contexts alternate, folds advance
    /// once per context cycle.
    pub fn assignment(&self, i: usize) -> (&str, u32) {
        let nc = self.contexts.len();
        (&self.contexts[i % nc], ((i / nc) as u32 % self.folds) + 1)
    }
}

fn class_name(k: usize) -> String {
    format!("class_{}", (b'a' + k as u8) as char)
}

fn ms(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

fn place_events<R: Rng>(spec: &SynthSpec, class: &SynthClass, rng: &mut R) -> Vec<EventAnnotation> {
    let mut out = Vec::new();
    if spec.event_rate == 0.0 {
        return out;
    }
    let mut t = 0.0;
    loop {
        let gap = -(1.0 - rng.random::<f64>()).ln() / spec.event_rate;
        let len = rng.random_range(spec.event_length.0..=spec.event_length.1);
        let onset = ms(t + gap);
        let offset = ms(onset + len);
        if offset > spec.duration_seconds {
            break;
        }
        out.push(EventAnnotation::new(onset, offset, class.name.clone()).expect("positive length"));
        t = offset;
    }
    out
}

/// Unit-RMS source samples.
fn source<R: Rng>(kind: &SourceKind, len: usize, rate: u32, rng: &mut R, fft: &mut FftPlanner<f64>) -> Vec<f64> {
    let mut x = match kind {
        SourceKind::Noise { low_hz, high_hz } => {
            let n = len.next_power_of_two();
            let mut buf: Vec<Complex64> = (0..n)
                .map(|_| Complex64::new(rng.sample::<f64, _>(StandardNormal), 0.0))
                .collect();
            fft.plan_fft_forward(n).process(&mut buf);
            for (k, c) in buf.iter_mut().enumerate() {
                let bin = k.min(n - k);
                let hz = bin as f64 * rate as f64 / n as f64;
                if hz < *low_hz || hz > *high_hz {
                    *c = Complex64::new(0.0, 0.0);
                }
            }
            fft.plan_fft_inverse(n).process(&mut buf);
            buf.truncate(len);
            buf.into_iter().map(|c| c.re).collect::<Vec<_>>()
        }
        SourceKind::Tone { freq_hz } => {
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (0..len)
                .map(|n| (std::f64::consts::TAU * freq_hz * n as f64 / rate as f64 + phase).sin())
                .collect()
        }
    };
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v /= rms);
    }
    x
}

/// Write the corpus under `dir`: `audio/*.wav`, `annotations/*.txt` and the
/// manifest. Output depends only on `spec`.
pub fn synthesize(spec: &SynthSpec, dir: &Path) -> Result<()> {
    spec.validate()?;
    for sub in ["audio", "annotations"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut planner = FftPlanner::new();
    let rate = spec.sample_rate;
    let total = (spec.duration_seconds * rate as f64).round() as usize;
    let fade = ((FADE_SECONDS * rate as f64) as usize).max(1);
    let margin = MAX_DELAY as usize;
    let mut manifest = String::new();
    for i in 0..spec.recordings {
        let mut left = vec![0.0; total];
        let mut right = vec![0.0; total];
        let mut events = Vec::new();
        for class in &spec.classes {
            for ev in place_events(spec, class, &mut rng) {
                let start = (ev.onset * rate as f64).round() as usize;
                let end = ((ev.offset * rate as f64).round() as usize).min(total);
                let len = end - start;
                let x = source(&class.kind, len + 2 * margin, rate, &mut rng, &mut planner);
                for n in 0..len {
                    let env = ((n + 1) as f64 / fade as f64).min((len - n) as f64 / fade as f64).min(1.0);
                    let a = spec.level * env;
                    left[start + n] += a * class.gains.0 * x[margin + n];
                    let j = (margin + n) as isize - class.delay as isize;
                    right[start + n] += a * class.gains.1 * x[j as usize];
                }
                events.push(ev);
            }
        }
        if spec.background > 0.0 {
            for ch in [&mut left, &mut right] {
                for v in ch.iter_mut() {
                    *v += spec.background * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        for v in left.iter_mut().chain(right.iter_mut()) {
            *v = v.clamp(-1.0, 32767.0 / 32768.0);
        }
        events.sort_by(|a, b| a.onset.total_cmp(&b.onset).then_with(|| a.label.cmp(&b.label)));
        let stem = format!("rec_{i:03}");
        let audio_rel = format!("audio/{stem}.wav");
        let ann_rel = format!("annotations/{stem}.txt");
        let clip = AudioClip::new(vec![left, right], rate, audio_rel.clone())?;
        write_wav(dir.join(&audio_rel), &clip)?;
        let ann_path = dir.join(&ann_rel);
        fs::write(&ann_path, format_annotations(&events)).map_err(|e| Error::io(&ann_path, e))?;
        let (context, fold) = spec.assignment(i);
        let _ = writeln!(manifest, "{audio_rel}\t{ann_rel}\t{context}\t{fold}");
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::validation(format!("invalid value `{value}` for `{key}`")))
}

/// Keys accepted by [`SynthSpec::set`].
pub const SYNTH_KEYS: [&str; 12] = [
    "preset",
    "delays",
    "recordings",
    "duration",
    "sample_rate",
    "contexts",
    "folds",
    "event_rate",
    "event_length_min",
    "event_length_max",
    "level",
    "background",
];

impl SynthSpec {
    /// Build a spec from `key = value` text. `preset` (`separable` or
    /// `pure-spatial`) and `delays` choose the classes; other keys override
    /// corpus settings.
    pub fn from_text(text: &str, seed: u64) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let get = |key: &str| pairs.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        let delays: Vec<i32> = match get("delays") {
            Some(v) => super::config::split_list(v)
                .iter()
                .map(|d| parse("delays", d))
                .collect::<Result<_>>()?,
            None => vec![8, -8],
        };
        let mut spec = match get("preset").unwrap_or("separable") {
            "separable" => Self::separable(&delays, seed),
            "pure-spatial" => Self::pure_spatial(&delays, seed),
            other => return Err(Error::validation(format!("unknown preset `{other}`"))),
        };
        for (k, v) in &pairs {
            spec.set(k, v)?;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "preset" | "delays" => {}
            "recordings" => self.recordings = parse(key, value)?,
            "duration" => self.duration_seconds = parse(key, value)?,
            "sample_rate" => self.sample_rate = parse(key, value)?,
            "contexts" => self.contexts = super::config::split_list(value),
            "folds" => self.folds = parse(key, value)?,
            "event_rate" => self.event_rate = parse(key, value)?,
            "event_length_min" => self.event_length.0 = parse(key, value)?,
            "event_length_max" => self.event_length.1 = parse(key, value)?,
            "level" => self.level = parse(key, value)?,
            "background" => self.background = parse(key, value)?,
            other => {
                return Err(Error::validation(format!(
                    "unknown synth key `{other}`; known keys: {}",
                    SYNTH_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }
}
