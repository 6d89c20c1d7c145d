//! Segment-based F-score and error rate.
//!
//! Rolls are reduced to per-segment sets of active classes; counts are pooled
//! over segments (and over recordings of one context) before the ratios are
//! taken. Context results are averaged without weights.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use log::warn;

use crate::audio::EventRoll;
use crate::error::{Error, Result};

/// Default evaluation segment length in seconds.
pub const SEGMENT_SECONDS: f64 = 1.0;

/// Indices of the classes active somewhere inside each segment.
pub type SegmentSets = Vec<BTreeSet<usize>>;

/// Collapse a roll into per-segment active-class sets. The final partial
/// segment is kept.
pub fn roll_to_segments(roll: &EventRoll, segment_length: f64) -> Result<SegmentSets> {
    let ratio = segment_length / roll.hop();
    let frames_per_segment = ratio.round();
    if !(segment_length > 0.0) || frames_per_segment < 1.0 || (ratio - frames_per_segment).abs() > 1e-6 {
        return Err(Error::validation(format!(
            "segment length {segment_length} s is not a positive multiple of the {} s hop",
            roll.hop()
        )));
    }
    let per = frames_per_segment as usize;
    let segments = roll.frames().div_ceil(per);
    let values = roll.values();
    Ok((0..segments)
        .map(|s| {
            let frames = s * per..((s + 1) * per).min(roll.frames());
            (0..values.ncols())
                .filter(|&k| frames.clone().any(|t| values[[t, k]]))
                .collect()
        })
        .collect())
}

/// Per-segment counts for one comparison.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SegmentTally {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub n: u64,
}

impl SegmentTally {
    pub fn substitutions(&self) -> u64 {
        self.fn_.min(self.fp)
    }

    pub fn deletions(&self) -> u64 {
        self.fn_.saturating_sub(self.fp)
    }

    pub fn insertions(&self) -> u64 {
        self.fp.saturating_sub(self.fn_)
    }
}

/// Segment tallies, in segment order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SegmentCounts {
    pub segments: Vec<SegmentTally>,
}

/// Pooled sums over all segments.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Totals {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub n: u64,
    pub s: u64,
    pub d: u64,
    pub i: u64,
}

impl SegmentCounts {
    /// Concatenate another recording's segments onto this one.
    pub fn merge(&mut self, other: SegmentCounts) {
        self.segments.extend(other.segments);
    }

    pub fn totals(&self) -> Totals {
        self.segments.iter().fold(Totals::default(), |mut acc, seg| {
            acc.tp += seg.tp;
            acc.fp += seg.fp;
            acc.fn_ += seg.fn_;
            acc.n += seg.n;
            acc.s += seg.substitutions();
            acc.d += seg.deletions();
            acc.i += seg.insertions();
            acc
        })
    }
}

/// Compare reference and system segment sets; the shorter side is padded with
/// empty segments.
pub fn count_segments(reference: &[BTreeSet<usize>], system: &[BTreeSet<usize>]) -> SegmentCounts {
    let empty = BTreeSet::new();
    let len = reference.len().max(system.len());
    let segments = (0..len)
        .map(|k| {
            let r = reference.get(k).unwrap_or(&empty);
            let s = system.get(k).unwrap_or(&empty);
            let tp = r.intersection(s).count() as u64;
            SegmentTally {
                tp,
                fp: s.len() as u64 - tp,
                fn_: r.len() as u64 - tp,
                n: r.len() as u64,
            }
        })
        .collect();
    SegmentCounts { segments }
}

/// `2 TP / (2 TP + FP + FN)`, or 0 when nothing is active on either side.
pub fn f_score(counts: &SegmentCounts) -> f64 {
    let t = counts.totals();
    let denom = 2 * t.tp + t.fp + t.fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * t.tp) as f64 / denom as f64
    }
}

/// `(S + D + I) / N`; undefined when the reference has no active events.
pub fn error_rate(counts: &SegmentCounts) -> Result<f64> {
    let t = counts.totals();
    if t.n == 0 {
        return Err(Error::UndefinedReference);
    }
    Ok((t.s + t.d + t.i) as f64 / t.n as f64)
}

/// Count one recording's reference against its system output.
pub fn compare_rolls(reference: &EventRoll, system: &EventRoll, segment_length: f64) -> Result<SegmentCounts> {
    if reference.class_list() != system.class_list() {
        return Err(Error::validation("reference and system rolls use different class lists"));
    }
    Ok(count_segments(
        &roll_to_segments(reference, segment_length)?,
        &roll_to_segments(system, segment_length)?,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextReport {
    pub context: String,
    pub f: f64,
    /// `None` when the context has no reference events.
    pub er: Option<f64>,
    pub totals: Totals,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    /// Unweighted mean F over contexts.
    pub f: f64,
    /// Unweighted mean ER over contexts with reference events.
    pub er: Option<f64>,
    pub contexts: Vec<ContextReport>,
    pub totals: Totals,
    /// Free-form tag, e.g. the feature set and layering mode.
    pub tag: String,
}

/// One scored recording.
#[derive(Debug, Clone)]
pub struct ScoredRecording<'a> {
    pub context: &'a str,
    pub reference: &'a EventRoll,
    pub system: &'a EventRoll,
}

/// Pool counts per context, then average F and ER across contexts.
pub fn evaluate_by_context(recordings: &[ScoredRecording<'_>], segment_length: f64) -> Result<MetricReport> {
    let mut grouped: BTreeMap<&str, SegmentCounts> = BTreeMap::new();
    for rec in recordings {
        let counts = compare_rolls(rec.reference, rec.system, segment_length)?;
        grouped.entry(rec.context).or_default().merge(counts);
    }
    report_from_counts(grouped.into_iter().map(|(c, n)| (c.to_string(), n)).collect())
}

/// Build a report from already pooled per-context counts. Every listed
/// context must have been scored on at least one segment.
pub fn report_from_counts(contexts: BTreeMap<String, SegmentCounts>) -> Result<MetricReport> {
    if contexts.is_empty() {
        return Err(Error::validation("no recordings to evaluate"));
    }
    let mut rows = Vec::with_capacity(contexts.len());
    let mut totals = Totals::default();
    for (context, counts) in contexts {
        if counts.segments.is_empty() {
            return Err(Error::validation(format!("context `{context}` has no scored recordings")));
        }
        let t = counts.totals();
        totals.tp += t.tp;
        totals.fp += t.fp;
        totals.fn_ += t.fn_;
        totals.n += t.n;
        totals.s += t.s;
        totals.d += t.d;
        totals.i += t.i;
        let er = match error_rate(&counts) {
            Ok(v) => Some(v),
            Err(Error::UndefinedReference) => {
                warn!("context `{context}` has no reference events; excluded from the ER average");
                None
            }
            Err(e) => return Err(e),
        };
        rows.push(ContextReport {
            context,
            f: f_score(&counts),
            er,
            totals: t,
        });
    }
    let f = rows.iter().map(|r| r.f).sum::<f64>() / rows.len() as f64;
    let ers: Vec<f64> = rows.iter().filter_map(|r| r.er).collect();
    let er = (!ers.is_empty()).then(|| ers.iter().sum::<f64>() / ers.len() as f64);
    Ok(MetricReport {
        f,
        er,
        contexts: rows,
        totals,
        tag: String::new(),
    })
}

fn fmt_er(er: Option<f64>) -> String {
    er.map_or_else(|| "nan".to_string(), |v| format!("{v:.4}"))
}

impl MetricReport {
    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = tag.into();
        self
    }

    /// Plain-text table: one row per context plus an overall row.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        if !self.tag.is_empty() {
            let _ = writeln!(out, "# {}", self.tag);
        }
        let _ = writeln!(
            out,
            "{:<20} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "context", "F", "ER", "S", "D", "I", "N"
        );
        for r in &self.contexts {
            let _ = writeln!(
                out,
                "{:<20} {:>8.4} {:>8} {:>8} {:>8} {:>8} {:>8}",
                r.context,
                r.f,
                fmt_er(r.er),
                r.totals.s,
                r.totals.d,
                r.totals.i,
                r.totals.n
            );
        }
        let t = &self.totals;
        let _ = writeln!(
            out,
            "{:<20} {:>8.4} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "overall",
            self.f,
            fmt_er(self.er),
            t.s,
            t.d,
            t.i,
            t.n
        );
        out
    }

    /// Machine-readable `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        if !self.tag.is_empty() {
            let _ = writeln!(out, "tag={}", self.tag);
        }
        let _ = writeln!(out, "f={:.6}", self.f);
        let _ = writeln!(out, "er={}", self.er.map_or("nan".into(), |v| format!("{v:.6}")));
        let t = &self.totals;
        let _ = writeln!(out, "s={}\nd={}\ni={}\nn={}", t.s, t.d, t.i, t.n);
        for r in &self.contexts {
            let _ = writeln!(out, "context.{}.f={:.6}", r.context, r.f);
            let _ = writeln!(
                out,
                "context.{}.er={}",
                r.context,
                r.er.map_or("nan".into(), |v| format!("{v:.6}"))
            );
        }
        out
    }
}
