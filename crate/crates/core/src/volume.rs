//! Layered feature volumes, flat concatenation, normalization and the
//! `SEDF` binary file format.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};

use crate::error::{Error, Result};

pub const VOLUME_MAGIC: &[u8; 4] = b"SEDF";
pub const VOLUME_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 2 + 4 * 4;

/// Standard deviation floor used when z-scoring.
pub const NORM_STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FeatureType {
    Mel,
    Tdoa,
    Gcc,
    DomFreq,
    Acr,
}

impl FeatureType {
    pub const ALL: [FeatureType; 5] = [
        FeatureType::Mel,
        FeatureType::Tdoa,
        FeatureType::Gcc,
        FeatureType::DomFreq,
        FeatureType::Acr,
    ];

    pub fn code(self) -> u16 {
        match self {
            FeatureType::Mel => 0,
            FeatureType::Tdoa => 1,
            FeatureType::Gcc => 2,
            FeatureType::DomFreq => 3,
            FeatureType::Acr => 4,
        }
    }

    pub fn from_code(code: u16) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureType::Mel => "mel",
            FeatureType::Tdoa => "tdoa",
            FeatureType::Gcc => "gcc",
            FeatureType::DomFreq => "domfreq",
            FeatureType::Acr => "acr",
        }
    }

    /// Feature length and layer count produced from binaural input.
    pub fn binaural_shape(self) -> (usize, usize) {
        match self {
            FeatureType::Mel => (40, 2),
            FeatureType::Tdoa => (5, 3),
            FeatureType::Gcc => (60, 3),
            FeatureType::DomFreq => (3, 4),
            FeatureType::Acr => (400, 2),
        }
    }
}

impl fmt::Display for FeatureType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::validation(format!("unknown feature type `{s}`")))
    }
}

/// A `T x L x C` array of one feature type on the shared frame grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    data: Array3<f64>,
    feature_type: FeatureType,
    hop: f64,
}

impl FeatureVolume {
    pub fn new(data: Array3<f64>, feature_type: FeatureType, hop: f64) -> Result<Self> {
        if data.shape().contains(&0) {
            return Err(Error::validation(format!(
                "{feature_type} volume has an empty dimension: {:?}",
                data.shape()
            )));
        }
        if !(hop > 0.0) {
            return Err(Error::validation("volume hop must be positive"));
        }
        Ok(Self {
            data: data.as_standard_layout().into_owned(),
            feature_type,
            hop,
        })
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn feature_type(&self) -> FeatureType {
        self.feature_type
    }

    pub fn hop(&self) -> f64 {
        self.hop
    }

    /// `(T, L, C)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn feature_len(&self) -> usize {
        self.data.dim().1
    }

    pub fn layers(&self) -> usize {
        self.data.dim().2
    }

    /// The `T x L` matrix held in layer `c`.
    pub fn layer(&self, c: usize) -> ArrayView2<'_, f64> {
        self.data.index_axis(Axis(2), c)
    }

    /// All layers' features at frame `t`, as an `L x C` matrix.
    pub fn frame(&self, t: usize) -> ArrayView2<'_, f64> {
        self.data.index_axis(Axis(0), t)
    }

    /// Rearrange into a single-layer `T x (C*L) x 1` volume.
    pub fn to_concatenated(&self) -> FeatureVolume {
        let layers: Vec<Array2<f64>> = (0..self.layers()).map(|c| self.layer(c).to_owned()).collect();
        let flat = concat_channels(&layers).expect("layers share a shape");
        FeatureVolume {
            data: flat.insert_axis(Axis(2)),
            feature_type: self.feature_type,
            hop: self.hop,
        }
    }
}

fn check_same_shape(mats: &[Array2<f64>]) -> Result<(usize, usize)> {
    let first = mats
        .first()
        .ok_or_else(|| Error::validation("need at least one feature matrix"))?;
    let dim = first.dim();
    if dim.0 == 0 || dim.1 == 0 {
        return Err(Error::validation("feature matrices must be non-empty"));
    }
    if let Some(bad) = mats.iter().find(|m| m.dim() != dim) {
        return Err(Error::validation(format!(
            "feature matrix shapes differ: {:?} vs {:?}",
            dim,
            bad.dim()
        )));
    }
    Ok(dim)
}

/// Layer per-channel `T x L` matrices into a `T x L x C` volume.
pub fn stack_channels(mats: &[Array2<f64>], feature_type: FeatureType, hop: f64) -> Result<FeatureVolume> {
    let (t, l) = check_same_shape(mats)?;
    let mut data = Array3::zeros((t, l, mats.len()));
    for (c, m) in mats.iter().enumerate() {
        data.index_axis_mut(Axis(2), c).assign(m);
    }
    FeatureVolume::new(data, feature_type, hop)
}

/// Concatenate per-channel `T x L` matrices frame-wise into `T x (C*L)`,
/// channel-major.
pub fn concat_channels(mats: &[Array2<f64>]) -> Result<Array2<f64>> {
    let (t, l) = check_same_shape(mats)?;
    let mut out = Array2::zeros((t, l * mats.len()));
    for (c, m) in mats.iter().enumerate() {
        out.slice_mut(s![.., c * l..(c + 1) * l]).assign(m);
    }
    Ok(out)
}

/// Per-cell mean and (floored) standard deviation for one feature type.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub feature_type: FeatureType,
    pub mean: Array2<f64>,
    pub std: Array2<f64>,
}

/// Fit z-scoring statistics over every frame of the given volumes.
pub fn fit_normalizer(volumes: &[&FeatureVolume]) -> Result<NormStats> {
    let first = volumes
        .first()
        .ok_or_else(|| Error::validation("cannot fit a normalizer on an empty training set"))?;
    let (_, l, c) = first.shape();
    let ft = first.feature_type();
    for v in volumes {
        if v.feature_type() != ft || v.feature_len() != l || v.layers() != c {
            return Err(Error::validation(format!(
                "normalizer inputs disagree: {ft} {l}x{c} vs {} {}x{}",
                v.feature_type(),
                v.feature_len(),
                v.layers()
            )));
        }
    }
    let frames: usize = volumes.iter().map(|v| v.frames()).sum();
    if frames < 2 {
        return Err(Error::validation(format!("{ft}: need at least 2 training frames")));
    }
    let n = frames as f64;
    let mut mean = Array2::zeros((l, c));
    for v in volumes {
        mean += &v.data().sum_axis(Axis(0));
    }
    mean /= n;
    let mut var = Array2::<f64>::zeros((l, c));
    for v in volumes {
        for frame in v.data().outer_iter() {
            ndarray::Zip::from(&mut var)
                .and(&frame)
                .and(&mean)
                .for_each(|acc, &x, &m| *acc += (x - m) * (x - m));
        }
    }
    let std = var.mapv(|s| (s / n).sqrt().max(NORM_STD_FLOOR));
    Ok(NormStats {
        feature_type: ft,
        mean,
        std,
    })
}

impl NormStats {
    fn check(&self, v: &FeatureVolume) -> Result<()> {
        if v.feature_type() != self.feature_type || (v.feature_len(), v.layers()) != self.mean.dim() {
            return Err(Error::validation(format!(
                "normalizer for {} {:?} cannot be applied to {} {}x{}",
                self.feature_type,
                self.mean.dim(),
                v.feature_type(),
                v.feature_len(),
                v.layers()
            )));
        }
        Ok(())
    }
}

pub fn apply_normalizer(volume: &FeatureVolume, stats: &NormStats) -> Result<FeatureVolume> {
    stats.check(volume)?;
    let mut data = volume.data().clone();
    for mut frame in data.outer_iter_mut() {
        ndarray::Zip::from(&mut frame)
            .and(&stats.mean)
            .and(&stats.std)
            .for_each(|x, &m, &s| *x = (*x - m) / s);
    }
    FeatureVolume::new(data, volume.feature_type(), volume.hop())
}

pub fn denormalize(volume: &FeatureVolume, stats: &NormStats) -> Result<FeatureVolume> {
    stats.check(volume)?;
    let mut data = volume.data().clone();
    for mut frame in data.outer_iter_mut() {
        ndarray::Zip::from(&mut frame)
            .and(&stats.mean)
            .and(&stats.std)
            .for_each(|x, &m, &s| *x = *x * s + m);
    }
    FeatureVolume::new(data, volume.feature_type(), volume.hop())
}

/// Serialize a volume. Values are stored as 32-bit floats.
pub fn encode_volume(volume: &FeatureVolume) -> Vec<u8> {
    let (t, l, c) = volume.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t * l * c);
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
    out.extend_from_slice(&volume.feature_type().code().to_le_bytes());
    for dim in [t, l, c] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    let hop_us = (volume.hop() * 1e6).round() as u32;
    out.extend_from_slice(&hop_us.to_le_bytes());
    for &v in volume.data().iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_volume(bytes: &[u8]) -> Result<FeatureVolume> {
    let eof = |what: &str| {
        Error::io(
            "<volume>",
            io::Error::new(io::ErrorKind::UnexpectedEof, what.to_string()),
        )
    };
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && &bytes[..4] != VOLUME_MAGIC {
            return Err(Error::Format("bad volume magic".into()));
        }
        return Err(eof("truncated volume header"));
    }
    if &bytes[..4] != VOLUME_MAGIC {
        return Err(Error::Format("bad volume magic".into()));
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = u16_at(4);
    if version != VOLUME_VERSION {
        return Err(Error::Format(format!("unsupported volume version {version}")));
    }
    let ft = FeatureType::from_code(u16_at(6))
        .ok_or_else(|| Error::Format(format!("unknown feature type code {}", u16_at(6))))?;
    let (t, l, c) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
    let hop = u32_at(20) as f64 / 1e6;
    let cells = t
        .checked_mul(l)
        .and_then(|x| x.checked_mul(c))
        .ok_or_else(|| Error::Format("volume dimensions overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != cells * 4 {
        let msg = format!(
            "header declares {t}x{l}x{c} = {cells} cells but payload holds {} bytes",
            payload.len()
        );
        return Err(if payload.len() < cells * 4 {
            eof(&msg)
        } else {
            Error::io("<volume>", io::Error::new(io::ErrorKind::InvalidData, msg))
        });
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    let data = Array3::from_shape_vec((t, l, c), values).expect("length checked above");
    FeatureVolume::new(data, ft, hop).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_volume(path: impl AsRef<Path>, volume: &FeatureVolume) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_volume(volume)).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<FeatureVolume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}
