//! Audio clips, WAV I/O, annotation files, dataset manifests and event rolls.
//!
//! WAV support is intentionally narrow: RIFF/WAVE containers holding
//! 16-bit integer PCM with one or two interleaved channels. Anything else is
//! rejected rather than converted.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};

/// Sample rate every recording is expected to have unless configured otherwise.
pub const DEFAULT_SAMPLE_RATE: u32 = 44_100;

/// Frame hop shared by every feature stream and every event roll, in seconds.
pub const FRAME_HOP_SECONDS: f64 = 0.02;

/// Name of the index file `build_manifest` looks for under the dataset root.
pub const MANIFEST_FILE: &str = "manifest.tsv";

const PCM16_SCALE: f64 = 32768.0;

/// A multichannel buffer of samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    channels: Vec<Vec<f64>>,
    sample_rate: u32,
    id: String,
}

impl AudioClip {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: u32, id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if channels.is_empty() || channels.len() > 2 {
            return Err(Error::ChannelCount {
                id,
                expected: 2,
                found: channels.len(),
            });
        }
        if sample_rate == 0 {
            return Err(Error::validation("sample rate must be positive"));
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::validation(format!("{id}: channels differ in length")));
        }
        Ok(Self {
            channels,
            sample_rate,
            id,
        })
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn channel(&self, index: usize) -> &[f64] {
        &self.channels[index]
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    /// Samples per channel.
    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    /// Average of all channels, as a single-channel clip.
    pub fn downmix(&self) -> AudioClip {
        let n = self.num_channels() as f64;
        let mixed = (0..self.len())
            .map(|i| self.channels.iter().map(|c| c[i]).sum::<f64>() / n)
            .collect();
        AudioClip {
            channels: vec![mixed],
            sample_rate: self.sample_rate,
            id: self.id.clone(),
        }
    }

    /// Fails with a channel-count error unless the clip has exactly two channels.
    pub fn require_binaural(&self) -> Result<()> {
        if self.num_channels() != 2 {
            return Err(Error::ChannelCount {
                id: self.id.clone(),
                expected: 2,
                found: self.num_channels(),
            });
        }
        Ok(())
    }
}

fn u16_at(bytes: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([bytes[at], bytes[at + 1]])
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

struct WavFormat {
    channels: u16,
    sample_rate: u32,
    block_align: u16,
}

fn parse_fmt_chunk(body: &[u8]) -> Result<WavFormat> {
    if body.len() < 16 {
        return Err(Error::Format("fmt chunk shorter than 16 bytes".into()));
    }
    let mut tag = u16_at(body, 0);
    let channels = u16_at(body, 2);
    let sample_rate = u32_at(body, 4);
    let block_align = u16_at(body, 12);
    let bits = u16_at(body, 14);
    // WAVE_FORMAT_EXTENSIBLE carries the real tag in the sub-format GUID.
    if tag == 0xFFFE {
        if body.len() < 26 {
            return Err(Error::Format("truncated extensible fmt chunk".into()));
        }
        tag = u16_at(body, 24);
    }
    if tag != 1 {
        return Err(Error::UnsupportedFormat(format!(
            "format tag {tag:#06x}, only integer PCM is supported"
        )));
    }
    if bits != 16 {
        return Err(Error::UnsupportedFormat(format!(
            "{bits}-bit samples, only 16-bit PCM is supported"
        )));
    }
    if channels == 0 || channels > 2 {
        return Err(Error::UnsupportedFormat(format!(
            "{channels} channels, only mono and stereo are supported"
        )));
    }
    if block_align != channels * 2 {
        return Err(Error::Format(format!(
            "block align {block_align} inconsistent with {channels} channel(s)"
        )));
    }
    if sample_rate == 0 {
        return Err(Error::Format("sample rate of zero".into()));
    }
    Ok(WavFormat {
        channels,
        sample_rate,
        block_align,
    })
}

/// Decode an in-memory WAV image.
pub fn decode_wav(bytes: &[u8], expected_rate: u32, id: &str) -> Result<AudioClip> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Format(format!("{id}: not a RIFF/WAVE file")));
    }
    let mut format = None;
    let mut data = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let chunk_id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let start = pos + 8;
        let end = start
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format(format!("{id}: chunk extends past end of file")))?;
        match chunk_id {
            b"fmt " => format = Some(parse_fmt_chunk(&bytes[start..end])?),
            b"data" => data = Some(&bytes[start..end]),
            _ => {}
        }
        // Chunks are word aligned.
        pos = end + (size & 1);
    }
    let format = format.ok_or_else(|| Error::Format(format!("{id}: missing fmt chunk")))?;
    let data = data.ok_or_else(|| Error::Format(format!("{id}: missing data chunk")))?;
    if data.len() % format.block_align as usize != 0 {
        return Err(Error::Format(format!("{id}: data chunk ends mid-frame")));
    }
    if format.sample_rate != expected_rate {
        return Err(Error::RateMismatch {
            expected: expected_rate,
            found: format.sample_rate,
        });
    }
    let nch = format.channels as usize;
    let frames = data.len() / format.block_align as usize;
    let mut channels = vec![Vec::with_capacity(frames); nch];
    for (i, pair) in data.chunks_exact(2).enumerate() {
        let v = i16::from_le_bytes([pair[0], pair[1]]);
        channels[i % nch].push(v as f64 / PCM16_SCALE);
    }
    AudioClip::new(channels, format.sample_rate, id)
}

/// Read a 16-bit PCM WAV file recorded at `expected_rate`.
pub fn read_wav(path: impl AsRef<Path>, expected_rate: u32) -> Result<AudioClip> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes, expected_rate, &path.display().to_string())
}

/// Encode a clip as 16-bit PCM WAV. Samples are rounded to the nearest code
/// and clipped to the representable range.
pub fn encode_wav(clip: &AudioClip) -> Vec<u8> {
    let nch = clip.num_channels();
    let data_len = clip.len() * nch * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&(nch as u16).to_le_bytes());
    out.extend_from_slice(&clip.sample_rate().to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate() * nch as u32 * 2).to_le_bytes());
    out.extend_from_slice(&(nch as u16 * 2).to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for i in 0..clip.len() {
        for ch in clip.channels() {
            let code = (ch[i] * PCM16_SCALE).round().clamp(-32768.0, 32767.0) as i16;
            out.extend_from_slice(&code.to_le_bytes());
        }
    }
    out
}

pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_wav(clip)).map_err(|e| Error::io(path, e))
}

/// One annotated sound event.
#[derive(Debug, Clone, PartialEq)]
pub struct EventAnnotation {
    pub onset: f64,
    pub offset: f64,
    pub label: String,
}

impl EventAnnotation {
    pub fn new(onset: f64, offset: f64, label: impl Into<String>) -> Result<Self> {
        let label = label.into();
        if !(onset >= 0.0) || !(offset > onset) {
            return Err(Error::validation(format!(
                "event `{label}` has onset {onset} and offset {offset}; need 0 <= onset < offset"
            )));
        }
        if label.is_empty() {
            return Err(Error::validation("event label is empty"));
        }
        Ok(Self {
            onset,
            offset,
            label,
        })
    }
}

/// Parse annotation text: one `onset<TAB>offset<TAB>label` event per line.
pub fn parse_annotation_text(text: &str) -> Result<Vec<EventAnnotation>> {
    let mut events = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.splitn(3, '\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line,
                message: "expected onset<TAB>offset<TAB>label".into(),
            });
        }
        let number = |s: &str, what: &str| {
            s.trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                line,
                message: format!("{what} `{}` is not a decimal number", s.trim()),
            })
        };
        let onset = number(fields[0], "onset")?;
        let offset = number(fields[1], "offset")?;
        let label = fields[2].trim();
        if onset < 0.0 {
            return Err(Error::Parse {
                line,
                message: format!("negative onset {onset}"),
            });
        }
        if offset <= onset {
            return Err(Error::Parse {
                line,
                message: format!("offset {offset} is not after onset {onset}"),
            });
        }
        if label.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty label".into(),
            });
        }
        events.push(EventAnnotation {
            onset,
            offset,
            label: label.to_string(),
        });
    }
    Ok(events)
}

pub fn parse_annotations(path: impl AsRef<Path>) -> Result<Vec<EventAnnotation>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotation_text(&text).map_err(|e| match e {
        Error::Parse { line, message } => Error::Parse {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

pub fn format_annotations(events: &[EventAnnotation]) -> String {
    events
        .iter()
        .map(|e| format!("{:.3}\t{:.3}\t{}\n", e.onset, e.offset, e.label))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub audio: PathBuf,
    pub annotations: PathBuf,
    pub context: String,
    pub fold: u32,
}

/// A dataset index: recordings with their annotation files, contexts and folds.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub class_list: Vec<String>,
    pub contexts: Vec<String>,
}

impl DatasetManifest {
    pub fn num_folds(&self) -> u32 {
        self.entries.iter().map(|e| e.fold).max().unwrap_or(0)
    }

    pub fn entries_in_folds<'a>(&'a self, folds: &'a [u32]) -> impl Iterator<Item = &'a ManifestEntry> {
        self.entries.iter().filter(move |e| folds.contains(&e.fold))
    }

    pub fn audio_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.audio)
    }

    pub fn annotation_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.annotations)
    }
}

/// Read `root/manifest.tsv` and scan every referenced annotation file.
///
/// Each index line is `audio<TAB>annotations<TAB>context<TAB>fold`, with paths
/// relative to `root`. Blank lines and lines starting with `#` are ignored.
pub fn build_manifest(root: impl AsRef<Path>) -> Result<DatasetManifest> {
    let root = root.as_ref();
    let index = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&index).map_err(|e| Error::io(&index, e))?;

    let mut entries: Vec<ManifestEntry> = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line,
                message: format!("{}: expected 4 tab-separated fields", index.display()),
            });
        }
        let fold: u32 = fields[3].parse().map_err(|_| Error::Parse {
            line,
            message: format!("fold `{}` is not a positive integer", fields[3]),
        })?;
        if fields[2].is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty context name".into(),
            });
        }
        let entry = ManifestEntry {
            audio: PathBuf::from(fields[0]),
            annotations: PathBuf::from(fields[1]),
            context: fields[2].to_string(),
            fold,
        };
        if !seen.insert(entry.audio.clone()) {
            return Err(Error::validation(format!(
                "duplicate audio path {} on line {line}",
                entry.audio.display()
            )));
        }
        entries.push(entry);
    }
    if entries.is_empty() {
        return Err(Error::validation(format!("{} lists no recordings", index.display())));
    }

    let folds: BTreeSet<u32> = entries.iter().map(|e| e.fold).collect();
    let max_fold = *folds.iter().next_back().unwrap();
    if folds.first() != Some(&1) || folds.len() as u32 != max_fold {
        return Err(Error::validation(format!(
            "folds {folds:?} are not a contiguous range starting at 1"
        )));
    }

    let mut classes = BTreeSet::new();
    let mut contexts = BTreeSet::new();
    for entry in &entries {
        let audio = root.join(&entry.audio);
        if !audio.is_file() {
            return Err(Error::io(
                audio,
                std::io::Error::new(std::io::ErrorKind::NotFound, "audio file listed in manifest not found"),
            ));
        }
        let ann = root.join(&entry.annotations);
        if !ann.is_file() {
            return Err(Error::io(
                ann,
                std::io::Error::new(std::io::ErrorKind::NotFound, "annotation file listed in manifest not found"),
            ));
        }
        for ev in parse_annotations(&ann)? {
            classes.insert(ev.label);
        }
        contexts.insert(entry.context.clone());
    }

    Ok(DatasetManifest {
        root: root.to_path_buf(),
        entries,
        class_list: classes.into_iter().collect(),
        contexts: contexts.into_iter().collect(),
    })
}

/// Binary frame-by-class activity matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRoll {
    values: Array2<bool>,
    hop: f64,
    class_list: Vec<String>,
}

impl EventRoll {
    pub fn new(values: Array2<bool>, hop: f64, class_list: Vec<String>) -> Result<Self> {
        if !(hop > 0.0) {
            return Err(Error::validation("hop must be positive"));
        }
        if values.ncols() != class_list.len() {
            return Err(Error::validation(format!(
                "roll has {} columns but {} classes",
                values.ncols(),
                class_list.len()
            )));
        }
        Ok(Self {
            values,
            hop,
            class_list,
        })
    }

    pub fn empty(frames: usize, hop: f64, class_list: Vec<String>) -> Result<Self> {
        let k = class_list.len();
        Self::new(Array2::from_elem((frames, k), false), hop, class_list)
    }

    pub fn values(&self) -> &Array2<bool> {
        &self.values
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn hop(&self) -> f64 {
        self.hop
    }

    pub fn class_list(&self) -> &[String] {
        &self.class_list
    }

    pub fn is_active(&self, frame: usize, class: usize) -> bool {
        self.values[[frame, class]]
    }

    /// Activity as 0/1 reals, the form training targets take.
    pub fn to_targets(&self) -> Array2<f64> {
        self.values.mapv(|v| if v { 1.0 } else { 0.0 })
    }
}

/// Snap values that are within rounding noise of an integer onto it.
fn frame_position(seconds: f64, hop: f64) -> f64 {
    let q = seconds / hop;
    let r = q.round();
    if (q - r).abs() < 1e-9 {
        r
    } else {
        q
    }
}

pub fn frame_count(duration: f64, hop: f64) -> usize {
    frame_position(duration, hop).ceil().max(0.0) as usize
}

/// Render events as an activity roll covering `ceil(duration / hop)` frames.
///
/// Frame `t` is active for a class when `[t*hop, (t+1)*hop)` overlaps
/// `[onset, offset)` of any event carrying that label.
pub fn annotations_to_roll(
    events: &[EventAnnotation],
    duration: f64,
    class_list: &[String],
    hop: f64,
) -> Result<EventRoll> {
    if !(hop > 0.0) {
        return Err(Error::validation("hop must be positive"));
    }
    annotations_to_roll_frames(events, frame_count(duration, hop), class_list, hop)
}

/// As [`annotations_to_roll`], with the frame count given explicitly.
pub fn annotations_to_roll_frames(
    events: &[EventAnnotation],
    frames: usize,
    class_list: &[String],
    hop: f64,
) -> Result<EventRoll> {
    let index: BTreeMap<&str, usize> = class_list
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let mut roll = EventRoll::empty(frames, hop, class_list.to_vec())?;
    for ev in events {
        let k = *index
            .get(ev.label.as_str())
            .ok_or_else(|| Error::UnknownClass(ev.label.clone()))?;
        let first = frame_position(ev.onset, hop).floor().max(0.0) as usize;
        let end = (frame_position(ev.offset, hop).ceil().max(0.0) as usize).min(frames);
        for t in first..end {
            roll.values[[t, k]] = true;
        }
    }
    Ok(roll)
}

/// Run-length decode a roll back into events, ordered by onset then class.
pub fn roll_to_events(roll: &EventRoll) -> Vec<EventAnnotation> {
    let mut events = Vec::new();
    for (k, label) in roll.class_list.iter().enumerate() {
        let mut start = None;
        for t in 0..=roll.frames() {
            let active = t < roll.frames() && roll.values[[t, k]];
            match (active, start) {
                (true, None) => start = Some(t),
                (false, Some(s)) => {
                    events.push(EventAnnotation {
                        onset: s as f64 * roll.hop,
                        offset: t as f64 * roll.hop,
                        label: label.clone(),
                    });
                    start = None;
                }
                _ => {}
            }
        }
    }
    events.sort_by(|a, b| a.onset.total_cmp(&b.onset).then_with(|| a.label.cmp(&b.label)));
    events
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn classes(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn stereo_header_round_trip() {
        let left: Vec<f64> = (0..44_100).map(|i| ((i % 200) as f64 - 100.0) / 32768.0).collect();
        let right = left.iter().map(|v| -v).collect();
        let clip = AudioClip::new(vec![left, right], 44_100, "t").unwrap();
        let back = decode_wav(&encode_wav(&clip), 44_100, "t").unwrap();
        assert_eq!(back.num_channels(), 2);
        assert_eq!(back.len(), 44_100);
        assert_eq!(back.sample_rate(), 44_100);
        assert_eq!(back.channels(), clip.channels());
    }

    #[test]
    fn zero_payload_is_exact_zero() {
        let clip = AudioClip::new(vec![vec![0.0; 100]], 44_100, "z").unwrap();
        let back = decode_wav(&encode_wav(&clip), 44_100, "z").unwrap();
        assert!(back.channel(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn extreme_codes_scale_by_32768() {
        let mut bytes = encode_wav(&AudioClip::new(vec![vec![0.0; 2]], 44_100, "x").unwrap());
        let n = bytes.len();
        bytes[n - 4..n - 2].copy_from_slice(&(-32768i16).to_le_bytes());
        bytes[n - 2..].copy_from_slice(&32767i16.to_le_bytes());
        let clip = decode_wav(&bytes, 44_100, "x").unwrap();
        assert_eq!(clip.channel(0), &[-1.0, 0.999969482421875]);
    }

    #[test]
    fn rejects_bad_headers_and_encodings() {
        let clip = AudioClip::new(vec![vec![0.1; 10]], 44_100, "x").unwrap();
        let good = encode_wav(&clip);

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_wav(&bad_magic, 44_100, "x"), Err(Error::Format(_))));

        let mut float = good.clone();
        float[20..22].copy_from_slice(&3u16.to_le_bytes());
        assert!(matches!(decode_wav(&float, 44_100, "x"), Err(Error::UnsupportedFormat(_))));

        let mut bits24 = good.clone();
        bits24[34..36].copy_from_slice(&24u16.to_le_bytes());
        assert!(matches!(decode_wav(&bits24, 44_100, "x"), Err(Error::UnsupportedFormat(_))));

        assert!(matches!(
            decode_wav(&good, 48_000, "x"),
            Err(Error::RateMismatch { expected: 48_000, found: 44_100 })
        ));

        assert!(matches!(decode_wav(&good[..good.len() - 7], 44_100, "x"), Err(Error::Format(_))));
    }

    #[test]
    fn clip_invariants() {
        assert!(AudioClip::new(vec![vec![0.0; 3], vec![0.0; 4]], 44_100, "x").is_err());
        assert!(AudioClip::new(vec![vec![0.0]; 3], 44_100, "x").is_err());
        assert!(AudioClip::new(vec![vec![0.0]], 0, "x").is_err());
    }

    #[test]
    fn annotation_lines() {
        let ev = parse_annotation_text("0.50\t2.10\tspeech\n").unwrap();
        assert_eq!(ev, vec![EventAnnotation { onset: 0.5, offset: 2.1, label: "speech".into() }]);
        assert!(parse_annotation_text("").unwrap().is_empty());
        match parse_annotation_text("3.0\t1.0\tcar") {
            Err(Error::Parse { line: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match parse_annotation_text("0.0\t1.0\tcar\n1.x\t2.0\tcar\n") {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn roll_overlap_rule() {
        let cl = classes(&["car", "speech"]);
        let ev = vec![EventAnnotation::new(0.0, 1.0, "speech").unwrap()];
        let roll = annotations_to_roll(&ev, 1.0, &cl, 0.02).unwrap();
        assert_eq!(roll.frames(), 50);
        assert!((0..50).all(|t| roll.is_active(t, 1) && !roll.is_active(t, 0)));

        let ev = vec![EventAnnotation::new(0.99, 1.00, "car").unwrap()];
        let roll = annotations_to_roll(&ev, 1.0, &cl, 0.02).unwrap();
        let active: Vec<usize> = (0..50).filter(|&t| roll.is_active(t, 0)).collect();
        assert_eq!(active, vec![49]);
    }

    #[test]
    fn polyphony_is_preserved() {
        let cl = classes(&["a", "b"]);
        let ev = vec![
            EventAnnotation::new(0.0, 0.6, "a").unwrap(),
            EventAnnotation::new(0.4, 1.0, "b").unwrap(),
        ];
        let roll = annotations_to_roll(&ev, 1.0, &cl, 0.02).unwrap();
        for t in 20..30 {
            assert!(roll.is_active(t, 0) && roll.is_active(t, 1));
        }
    }

    #[test]
    fn unknown_label_is_rejected() {
        let ev = vec![EventAnnotation::new(0.0, 0.5, "dog").unwrap()];
        assert!(matches!(
            annotations_to_roll(&ev, 1.0, &classes(&["cat"]), 0.02),
            Err(Error::UnknownClass(l)) if l == "dog"
        ));
    }

    fn arb_events() -> impl Strategy<Value = Vec<(f64, f64, usize)>> {
        prop::collection::vec((0.0f64..9.0, 0.01f64..3.0, 0usize..3), 0..8)
            .prop_map(|v| v.into_iter().map(|(on, len, k)| (on, (on + len).min(10.0), k)).collect())
    }

    proptest! {
        #[test]
        fn roll_round_trip_within_one_hop(raw in arb_events()) {
            let cl = classes(&["a", "b", "c"]);
            let hop = 0.02;
            let events: Vec<EventAnnotation> = raw
                .iter()
                .map(|&(on, off, k)| EventAnnotation::new(on, off, cl[k].clone()).unwrap())
                .collect();
            let roll = annotations_to_roll(&events, 10.0, &cl, hop).unwrap();
            let decoded = roll_to_events(&roll);
            // Every event is covered by a decoded event of its class.
            for ev in &events {
                let covered = decoded.iter().any(|d| {
                    d.label == ev.label && d.onset <= ev.onset + 1e-9 && d.offset >= ev.offset - 1e-9
                });
                prop_assert!(covered);
            }
            // Decoded edges match the (possibly merged) source events within one hop.
            for d in &decoded {
                let members: Vec<&EventAnnotation> = events
                    .iter()
                    .filter(|e| e.label == d.label && e.onset < d.offset && e.offset > d.onset)
                    .collect();
                prop_assert!(!members.is_empty());
                let on = members.iter().map(|e| e.onset).fold(f64::INFINITY, f64::min);
                let off = members.iter().map(|e| e.offset).fold(0.0, f64::max);
                prop_assert!((d.onset - on).abs() <= hop + 1e-9);
                prop_assert!((d.offset - off).abs() <= hop + 1e-9);
            }
        }

        #[test]
        fn adding_an_event_never_clears_cells(raw in arb_events(), extra in (0.0f64..9.0, 0.01f64..1.0, 0usize..3)) {
            let cl = classes(&["a", "b", "c"]);
            let mut events: Vec<EventAnnotation> = raw
                .iter()
                .map(|&(on, off, k)| EventAnnotation::new(on, off, cl[k].clone()).unwrap())
                .collect();
            let before = annotations_to_roll(&events, 10.0, &cl, 0.02).unwrap();
            events.push(EventAnnotation::new(extra.0, extra.0 + extra.1, cl[extra.2].clone()).unwrap());
            let after = annotations_to_roll(&events, 10.0, &cl, 0.02).unwrap();
            for (b, a) in before.values().iter().zip(after.values().iter()) {
                prop_assert!(!*b || *a);
            }
        }

        #[test]
        fn pcm16_round_trip_is_bit_exact(codes in prop::collection::vec(any::<i16>(), 2..200)) {
            let n = codes.len() / 2;
            let left: Vec<f64> = codes[..n].iter().map(|&c| c as f64 / 32768.0).collect();
            let right: Vec<f64> = codes[n..2 * n].iter().map(|&c| c as f64 / 32768.0).collect();
            let clip = AudioClip::new(vec![left, right], 44_100, "p").unwrap();
            let back = decode_wav(&encode_wav(&clip), 44_100, "p").unwrap();
            prop_assert_eq!(back.channels(), clip.channels());
        }
    }
}
