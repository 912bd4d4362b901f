//! Frame records, JSON-lines manifests, training-pair sampling, and
//! fixation-interval handling.
//!
//! A dataset is a flat list of [`FrameRecord`]s. Pair samplers and fixation
//! extraction refer to records by index into that list, so nothing here ever
//! clones metadata or touches image files.

use crate::rng::stream;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Eye {
    Left,
    Right,
}

impl fmt::Display for Eye {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Eye::Left => write!(f, "left"),
            Eye::Right => write!(f, "right"),
        }
    }
}

/// One eye image plus metadata. Field names match the manifest schema
/// exactly; `gaze_yaw_deg`/`gaze_pitch_deg` are nullable as a pair.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FrameRecord {
    pub subject_id: String,
    pub session_id: String,
    pub eye: Eye,
    pub frame_index: i64,
    pub image_path: String,
    pub gaze_yaw_deg: Option<f64>,
    pub gaze_pitch_deg: Option<f64>,
    pub fixation: bool,
    pub head_pose_id: Option<i64>,
    pub video_id: Option<String>,
}

impl FrameRecord {
    pub fn gaze_label(&self) -> Option<(f64, f64)> {
        match (self.gaze_yaw_deg, self.gaze_pitch_deg) {
            (Some(y), Some(p)) => Some((y, p)),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: gaze label must have both yaw and pitch or neither")]
    HalfLabel { line: usize },
    #[error("duplicate record for ({subject}, {session}, {eye}, frame {frame_index})")]
    Duplicate {
        subject: String,
        session: String,
        eye: Eye,
        frame_index: i64,
    },
    #[error(
        "frame_index not strictly increasing within ({subject}, {session}, {eye}): {prev} then {next}"
    )]
    OutOfOrder {
        subject: String,
        session: String,
        eye: Eye,
        prev: i64,
        next: i64,
    },
}

/// Parse a JSON-lines manifest. Blank lines are ignored. Validates the
/// record invariants (no duplicates, strictly increasing frame_index per
/// (subject, session, eye), paired gaze fields).
pub fn parse_manifest(text: &str) -> Result<Vec<FrameRecord>, ManifestError> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: FrameRecord = serde_json::from_str(line)
            .map_err(|source| ManifestError::Parse { line: i + 1, source })?;
        if rec.gaze_yaw_deg.is_some() != rec.gaze_pitch_deg.is_some() {
            return Err(ManifestError::HalfLabel { line: i + 1 });
        }
        records.push(rec);
    }
    validate_records(&records)?;
    Ok(records)
}

/// Serialize records to JSON-lines, one record per line.
pub fn serialize_manifest(records: &[FrameRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serialization"));
        out.push('\n');
    }
    out
}

/// Enforce per-group ordering and uniqueness invariants.
pub fn validate_records(records: &[FrameRecord]) -> Result<(), ManifestError> {
    let mut last: BTreeMap<(&str, &str, Eye), i64> = BTreeMap::new();
    for r in records {
        let key = (r.subject_id.as_str(), r.session_id.as_str(), r.eye);
        match last.get(&key) {
            Some(&prev) if prev == r.frame_index => {
                return Err(ManifestError::Duplicate {
                    subject: r.subject_id.clone(),
                    session: r.session_id.clone(),
                    eye: r.eye,
                    frame_index: r.frame_index,
                });
            }
            Some(&prev) if prev > r.frame_index => {
                return Err(ManifestError::OutOfOrder {
                    subject: r.subject_id.clone(),
                    session: r.session_id.clone(),
                    eye: r.eye,
                    prev,
                    next: r.frame_index,
                });
            }
            _ => {}
        }
        last.insert(key, r.frame_index);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Training-pair sampling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    /// Same (subject, session, eye), any two distinct frames.
    NearEye,
    /// Same video, frame indices within a temporal window.
    RemoteTemporal,
    /// Same subject and head pose id.
    RemoteHeadpose,
    /// Temporal pairs plus synchronized left/right pairs with a flip.
    RemoteFlip,
}

impl fmt::Display for PairMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PairMode::NearEye => "near_eye",
            PairMode::RemoteTemporal => "remote_temporal",
            PairMode::RemoteHeadpose => "remote_headpose",
            PairMode::RemoteFlip => "remote_flip",
        };
        write!(f, "{s}")
    }
}

/// Which member of a pair is horizontally flipped before use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlipMember {
    Source,
}

/// Indices into the record list this pair was sampled from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainingPair {
    pub source: usize,
    pub target: usize,
    pub flip: Option<FlipMember>,
}

#[derive(Debug, Error)]
pub enum PairError {
    #[error("no eligible pairs for mode {mode}: {constraint}")]
    NoEligible { mode: PairMode, constraint: String },
    #[error("mode {mode} requires {field} on every record")]
    MissingField { mode: PairMode, field: &'static str },
}

/// A group of records with a precomputed count of eligible ordered pairs.
struct PairGroup {
    /// record indices, sorted by frame_index
    members: Vec<usize>,
    /// cumulative eligible-pair counts per member (for windowed modes) or
    /// empty (all-pairs modes)
    neighbor_counts: Vec<u64>,
    total: u64,
}

fn group_records<K: Ord>(
    records: &[FrameRecord],
    key: impl Fn(&FrameRecord) -> Option<K>,
) -> BTreeMap<K, Vec<usize>> {
    let mut groups: BTreeMap<K, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        if let Some(k) = key(r) {
            groups.entry(k).or_default().push(i);
        }
    }
    for v in groups.values_mut() {
        v.sort_by_key(|&i| records[i].frame_index);
    }
    groups
}

fn all_pairs_group(members: Vec<usize>) -> PairGroup {
    let n = members.len() as u64;
    PairGroup {
        members,
        neighbor_counts: Vec::new(),
        total: n * n.saturating_sub(1),
    }
}

fn windowed_group(records: &[FrameRecord], members: Vec<usize>, window: i64) -> PairGroup {
    let idx: Vec<i64> = members.iter().map(|&i| records[i].frame_index).collect();
    let mut counts = Vec::with_capacity(members.len());
    let mut total = 0u64;
    for (i, &fi) in idx.iter().enumerate() {
        let lo = idx.partition_point(|&v| v < fi - window);
        let hi = idx.partition_point(|&v| v <= fi + window);
        let c = (hi - lo - 1) as u64; // exclude self
        total += c;
        counts.push(c);
        let _ = i;
    }
    PairGroup {
        members,
        neighbor_counts: counts,
        total,
    }
}

/// Draw one ordered pair from a group, uniform over its eligible pairs.
fn draw_from_group(
    records: &[FrameRecord],
    g: &PairGroup,
    window: i64,
    r: u64,
) -> (usize, usize) {
    if g.neighbor_counts.is_empty() {
        // all ordered pairs (i, j), i != j
        let n = g.members.len() as u64;
        let i = r / (n - 1);
        let mut j = r % (n - 1);
        if j >= i {
            j += 1;
        }
        (g.members[i as usize], g.members[j as usize])
    } else {
        let mut rem = r;
        for (i, &c) in g.neighbor_counts.iter().enumerate() {
            if rem < c {
                let fi = records[g.members[i]].frame_index;
                let idx: Vec<i64> = g
                    .members
                    .iter()
                    .map(|&m| records[m].frame_index)
                    .collect();
                let lo = idx.partition_point(|&v| v < fi - window);
                let mut j = lo + rem as usize;
                if j >= i {
                    j += 1;
                }
                return (g.members[i], g.members[j]);
            }
            rem -= c;
        }
        unreachable!("pair draw out of range")
    }
}

/// Sample `count` training pairs. Deterministic under `(records, mode,
/// window, rng_seed, count)`. Pairs never cross subject boundaries.
pub fn sample_pairs(
    records: &[FrameRecord],
    mode: PairMode,
    window: i64,
    rng_seed: u64,
    count: usize,
) -> Result<Vec<TrainingPair>, PairError> {
    let mut rng = stream(rng_seed, "sample_pairs", 0);
    let mut pairs = Vec::with_capacity(count);
    match mode {
        PairMode::NearEye | PairMode::RemoteHeadpose => {
            let groups: Vec<PairGroup> = match mode {
                PairMode::NearEye => group_records(records, |r| {
                    Some((r.subject_id.clone(), r.session_id.clone(), r.eye))
                })
                .into_values()
                .map(all_pairs_group)
                .collect(),
                _ => {
                    if records.iter().any(|r| r.head_pose_id.is_none()) {
                        return Err(PairError::MissingField {
                            mode,
                            field: "head_pose_id",
                        });
                    }
                    group_records(records, |r| {
                        Some((r.subject_id.clone(), r.head_pose_id.unwrap(), r.eye))
                    })
                    .into_values()
                    .map(all_pairs_group)
                    .collect()
                }
            };
            let groups: Vec<PairGroup> = groups.into_iter().filter(|g| g.total > 0).collect();
            let total: u64 = groups.iter().map(|g| g.total).sum();
            if total == 0 {
                return Err(PairError::NoEligible {
                    mode,
                    constraint: "every group needs at least 2 frames".into(),
                });
            }
            for _ in 0..count {
                let mut r = rng.gen_range(0..total);
                for g in &groups {
                    if r < g.total {
                        let (s, t) = draw_from_group(records, g, window, r);
                        pairs.push(TrainingPair { source: s, target: t, flip: None });
                        break;
                    }
                    r -= g.total;
                }
            }
        }
        PairMode::RemoteTemporal | PairMode::RemoteFlip => {
            if records.iter().any(|r| r.video_id.is_none()) {
                return Err(PairError::MissingField {
                    mode,
                    field: "video_id",
                });
            }
            let groups: Vec<PairGroup> = group_records(records, |r| {
                Some((r.subject_id.clone(), r.video_id.clone().unwrap(), r.eye))
            })
            .into_values()
            .map(|m| windowed_group(records, m, window))
            .filter(|g| g.total > 0)
            .collect();
            let temporal_total: u64 = groups.iter().map(|g| g.total).sum();
            // synchronized left/right pairs for the flip mode
            let sync: Vec<(usize, usize)> = if mode == PairMode::RemoteFlip {
                let by_time = group_records(records, |r| {
                    Some((
                        r.subject_id.clone(),
                        r.video_id.clone().unwrap(),
                        r.frame_index,
                    ))
                });
                let mut sync = Vec::new();
                for members in by_time.into_values() {
                    let left = members.iter().find(|&&i| records[i].eye == Eye::Left);
                    let right = members.iter().find(|&&i| records[i].eye == Eye::Right);
                    if let (Some(&l), Some(&r)) = (left, right) {
                        sync.push((l, r));
                        sync.push((r, l));
                    }
                }
                sync
            } else {
                Vec::new()
            };
            let total = temporal_total + sync.len() as u64;
            if total == 0 {
                return Err(PairError::NoEligible {
                    mode,
                    constraint: format!(
                        "no two frames of the same video/eye within window {window}"
                    ),
                });
            }
            for _ in 0..count {
                let mut r = rng.gen_range(0..total);
                if r < temporal_total {
                    for g in &groups {
                        if r < g.total {
                            let (s, t) = draw_from_group(records, g, window, r);
                            pairs.push(TrainingPair { source: s, target: t, flip: None });
                            break;
                        }
                        r -= g.total;
                    }
                } else {
                    let (s, t) = sync[(r - temporal_total) as usize];
                    pairs.push(TrainingPair {
                        source: s,
                        target: t,
                        flip: Some(FlipMember::Source),
                    });
                }
            }
        }
    }
    debug_assert!(pairs
        .iter()
        .all(|p| records[p.source].subject_id == records[p.target].subject_id));
    Ok(pairs)
}

/// Every ordered pair the sampler can emit, for small record lists (used by
/// tests and never on full datasets).
pub fn enumerate_eligible_pairs(
    records: &[FrameRecord],
    mode: PairMode,
    window: i64,
) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for s in 0..records.len() {
        for t in 0..records.len() {
            if s == t {
                continue;
            }
            let (a, b) = (&records[s], &records[t]);
            if a.subject_id != b.subject_id {
                continue;
            }
            let ok = match mode {
                PairMode::NearEye => a.session_id == b.session_id && a.eye == b.eye,
                PairMode::RemoteTemporal => {
                    a.video_id.is_some()
                        && a.video_id == b.video_id
                        && a.eye == b.eye
                        && (a.frame_index - b.frame_index).abs() <= window
                }
                PairMode::RemoteHeadpose => {
                    a.head_pose_id.is_some() && a.head_pose_id == b.head_pose_id && a.eye == b.eye
                }
                PairMode::RemoteFlip => {
                    let temporal = a.video_id.is_some()
                        && a.video_id == b.video_id
                        && a.eye == b.eye
                        && (a.frame_index - b.frame_index).abs() <= window;
                    let sync = a.video_id.is_some()
                        && a.video_id == b.video_id
                        && a.eye != b.eye
                        && a.frame_index == b.frame_index;
                    temporal || sync
                }
            };
            if ok {
                out.push((s, t));
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Fixation handling
// ---------------------------------------------------------------------------

/// A maximal run of fixation-flagged frames with one constant gaze label,
/// within a (subject, session, eye) stream.
#[derive(Debug, Clone)]
pub struct FixationInterval {
    pub subject_id: String,
    pub session_id: String,
    pub eye: Eye,
    /// record indices in frame order
    pub frames: Vec<usize>,
    pub label: (f64, f64),
}

/// Find fixation intervals. Frames without labels are skipped (fixation
/// intervals are the labeled portion of a dataset).
pub fn fixation_intervals(records: &[FrameRecord]) -> Vec<FixationInterval> {
    let groups = group_records(records, |r| {
        Some((r.subject_id.clone(), r.session_id.clone(), r.eye))
    });
    let mut out = Vec::new();
    for ((subject_id, session_id, eye), members) in groups {
        let mut run: Vec<usize> = Vec::new();
        let mut run_label = (f64::NAN, f64::NAN);
        let mut flush = |run: &mut Vec<usize>, label: (f64, f64)| {
            if !run.is_empty() {
                out.push(FixationInterval {
                    subject_id: subject_id.clone(),
                    session_id: session_id.clone(),
                    eye,
                    frames: std::mem::take(run),
                    label,
                });
            }
        };
        let mut prev_index: Option<i64> = None;
        for &i in &members {
            let r = &records[i];
            let labeled_fixation = r.fixation && r.gaze_label().is_some();
            if labeled_fixation {
                let label = r.gaze_label().unwrap();
                let contiguous = prev_index.map(|p| r.frame_index == p + 1).unwrap_or(false);
                if run.is_empty() || (label == run_label && contiguous) {
                    run.push(i);
                    run_label = label;
                } else {
                    flush(&mut run, run_label);
                    run.push(i);
                    run_label = label;
                }
            } else {
                flush(&mut run, run_label);
            }
            prev_index = Some(r.frame_index);
        }
        flush(&mut run, run_label);
    }
    out
}

/// One calibration sample: synchronized left/right selections plus label.
#[derive(Debug, Clone)]
pub struct BinocularSample {
    pub subject_id: String,
    pub left: usize,
    pub right: usize,
    pub label: (f64, f64),
}

/// One calibration sample from a single eye.
#[derive(Debug, Clone)]
pub struct MonocularSample {
    pub subject_id: String,
    pub eye: Eye,
    pub frame: usize,
    pub label: (f64, f64),
}

pub struct FixationSamples {
    pub binocular: Vec<BinocularSample>,
    pub warnings: Vec<String>,
}

/// Within an interval, pick the frame whose embedding is closest (Euclidean)
/// to the coordinate-wise median of the interval's embeddings. Ties break to
/// the earliest frame.
pub fn select_median_frame(
    interval: &FixationInterval,
    embeddings: &[Option<Vec<f64>>],
) -> Option<usize> {
    let embs: Vec<&Vec<f64>> = interval
        .frames
        .iter()
        .map(|&i| embeddings[i].as_ref())
        .collect::<Option<Vec<_>>>()?;
    let dim = embs[0].len();
    let mut median = vec![0.0; dim];
    let mut buf: Vec<f64> = Vec::with_capacity(embs.len());
    for (d, m) in median.iter_mut().enumerate() {
        buf.clear();
        buf.extend(embs.iter().map(|e| e[d]));
        buf.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = buf.len();
        *m = if n % 2 == 1 {
            buf[n / 2]
        } else {
            0.5 * (buf[n / 2 - 1] + buf[n / 2])
        };
    }
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (k, e) in embs.iter().enumerate() {
        let d: f64 = e
            .iter()
            .zip(&median)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    Some(interval.frames[best])
}

/// Per fixation interval and eye, select the median-closest frame and pair
/// the synchronized left/right selections into one calibration sample.
/// Intervals missing an eye (or an embedding) are skipped with a warning.
pub fn extract_fixation_samples(
    records: &[FrameRecord],
    embeddings: &[Option<Vec<f64>>],
) -> FixationSamples {
    assert_eq!(records.len(), embeddings.len());
    let intervals = fixation_intervals(records);
    let mut warnings = Vec::new();
    // bucket intervals by (subject, session), keep frame-order
    let mut by_ss: BTreeMap<(String, String), (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (k, iv) in intervals.iter().enumerate() {
        let e = by_ss
            .entry((iv.subject_id.clone(), iv.session_id.clone()))
            .or_default();
        match iv.eye {
            Eye::Left => e.0.push(k),
            Eye::Right => e.1.push(k),
        }
    }
    let range = |iv: &FixationInterval| {
        let lo = records[*iv.frames.first().unwrap()].frame_index;
        let hi = records[*iv.frames.last().unwrap()].frame_index;
        (lo, hi)
    };
    let mut binocular = Vec::new();
    for ((subject, session), (lefts, rights)) in &by_ss {
        let mut used_right = vec![false; rights.len()];
        for &li in lefts {
            let liv = &intervals[*&li];
            let (llo, lhi) = range(liv);
            let mate = rights.iter().enumerate().find(|(ri, &rk)| {
                if used_right[*ri] {
                    return false;
                }
                let riv = &intervals[rk];
                let (rlo, rhi) = range(riv);
                rlo <= lhi && llo <= rhi && riv.label == liv.label
            });
            let Some((ri, &rk)) = mate else {
                warnings.push(format!(
                    "fixation interval {subject}/{session} frames {llo}..{lhi}: no right-eye interval, skipped"
                ));
                continue;
            };
            let riv = &intervals[rk];
            let (Some(l), Some(r)) = (
                select_median_frame(liv, embeddings),
                select_median_frame(riv, embeddings),
            ) else {
                warnings.push(format!(
                    "fixation interval {subject}/{session} frames {llo}..{lhi}: missing embeddings, skipped"
                ));
                continue;
            };
            used_right[ri] = true;
            binocular.push(BinocularSample {
                subject_id: subject.clone(),
                left: l,
                right: r,
                label: liv.label,
            });
        }
        for (ri, &rk) in rights.iter().enumerate() {
            if !used_right[ri] {
                let riv = &intervals[rk];
                let (rlo, rhi) = range(riv);
                warnings.push(format!(
                    "fixation interval {subject}/{session} frames {rlo}..{rhi}: no left-eye interval, skipped"
                ));
            }
        }
    }
    FixationSamples { binocular, warnings }
}

/// Monocular calibration samples: one per fixation interval per eye.
pub fn extract_fixation_samples_monocular(
    records: &[FrameRecord],
    embeddings: &[Option<Vec<f64>>],
) -> (Vec<MonocularSample>, Vec<String>) {
    let intervals = fixation_intervals(records);
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    for iv in &intervals {
        match select_median_frame(iv, embeddings) {
            Some(frame) => out.push(MonocularSample {
                subject_id: iv.subject_id.clone(),
                eye: iv.eye,
                frame,
                label: iv.label,
            }),
            None => warnings.push(format!(
                "fixation interval {}/{} ({}): missing embeddings, skipped",
                iv.subject_id, iv.session_id, iv.eye
            )),
        }
    }
    (out, warnings)
}

/// Split `n` items into `k` calibration indices and `n-k` evaluation
/// indices, drawn without replacement. The two sets never overlap.
pub fn disjoint_split(n: usize, k: usize, seed: u64, repeat: u64) -> (Vec<usize>, Vec<usize>) {
    assert!(k < n, "need k < n for a nonempty evaluation set");
    let mut rng = stream(seed, "split", repeat);
    let mut idx: Vec<usize> = (0..n).collect();
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    let calib = idx[..k].to_vec();
    let eval = idx[k..].to_vec();
    debug_assert!(calib.iter().all(|c| !eval.contains(c)));
    (calib, eval)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(subject: &str, session: &str, eye: Eye, idx: i64) -> FrameRecord {
        FrameRecord {
            subject_id: subject.into(),
            session_id: session.into(),
            eye,
            frame_index: idx,
            image_path: format!("{subject}/{session}/{eye}/f{idx:05}.png"),
            gaze_yaw_deg: Some(idx as f64),
            gaze_pitch_deg: Some(0.0),
            fixation: false,
            head_pose_id: None,
            video_id: None,
        }
    }

    #[test]
    fn empty_manifest_is_empty_list() {
        assert!(parse_manifest("").unwrap().is_empty());
        assert!(parse_manifest("\n\n").unwrap().is_empty());
    }

    #[test]
    fn manifest_round_trip_preserves_fields() {
        let mut records = Vec::new();
        for i in 0..200 {
            let mut r = rec("s00", "sess0", if i % 2 == 0 { Eye::Left } else { Eye::Right }, i / 2);
            r.fixation = i % 5 == 0;
            if i % 7 == 0 {
                r.gaze_yaw_deg = None;
                r.gaze_pitch_deg = None;
            }
            records.push(r);
        }
        let text = serialize_manifest(&records);
        let back = parse_manifest(&text).unwrap();
        assert_eq!(back.len(), 200);
        assert_eq!(back, records);
    }

    #[test]
    fn manifest_rejects_duplicates_and_disorder() {
        let a = rec("s00", "sess0", Eye::Left, 3);
        let b = rec("s00", "sess0", Eye::Left, 3);
        let text = serialize_manifest(&[a.clone(), b]);
        assert!(matches!(
            parse_manifest(&text),
            Err(ManifestError::Duplicate { frame_index: 3, .. })
        ));
        let c = rec("s00", "sess0", Eye::Left, 2);
        let text2 = serialize_manifest(&[a, c]);
        assert!(matches!(
            parse_manifest(&text2),
            Err(ManifestError::OutOfOrder { .. })
        ));
    }

    #[test]
    fn manifest_parse_error_carries_line_number() {
        let good = serialize_manifest(&[rec("s00", "sess0", Eye::Left, 0)]);
        let text = format!("{good}{{not json");
        match parse_manifest(&text) {
            Err(ManifestError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn near_eye_two_frames_gives_the_only_pair() {
        let records = vec![
            rec("s00", "sess0", Eye::Left, 0),
            rec("s00", "sess0", Eye::Left, 1),
        ];
        let pairs = sample_pairs(&records, PairMode::NearEye, 0, 7, 1).unwrap();
        assert_eq!(pairs.len(), 1);
        let p = pairs[0];
        assert!(
            (p.source, p.target) == (0, 1) || (p.source, p.target) == (1, 0),
            "{p:?}"
        );
    }

    #[test]
    fn near_eye_never_crosses_subjects_or_eyes() {
        let mut records = Vec::new();
        for s in 0..3 {
            for e in [Eye::Left, Eye::Right] {
                for i in 0..5 {
                    records.push(rec(&format!("s{s:02}"), "sess0", e, i));
                }
            }
        }
        let pairs = sample_pairs(&records, PairMode::NearEye, 0, 3, 500).unwrap();
        for p in &pairs {
            assert_eq!(records[p.source].subject_id, records[p.target].subject_id);
            assert_eq!(records[p.source].eye, records[p.target].eye);
            assert_ne!(records[p.source].frame_index, records[p.target].frame_index);
        }
    }

    #[test]
    fn pair_sampling_is_deterministic() {
        let mut records = Vec::new();
        for i in 0..30 {
            records.push(rec("s00", "sess0", Eye::Left, i));
        }
        let a = sample_pairs(&records, PairMode::NearEye, 0, 99, 64).unwrap();
        let b = sample_pairs(&records, PairMode::NearEye, 0, 99, 64).unwrap();
        assert_eq!(a, b);
        let c = sample_pairs(&records, PairMode::NearEye, 0, 100, 64).unwrap();
        assert_ne!(a, c, "different seeds should differ");
    }

    #[test]
    fn remote_temporal_respects_window() {
        let mut r0 = rec("s00", "sess0", Eye::Left, 0);
        r0.video_id = Some("v0".into());
        let mut r1 = rec("s00", "sess0", Eye::Left, 100);
        r1.video_id = Some("v0".into());
        let mut r2 = rec("s00", "sess0", Eye::Left, 110);
        r2.video_id = Some("v0".into());
        let records = vec![r0, r1, r2];
        let support = enumerate_eligible_pairs(&records, PairMode::RemoteTemporal, 30);
        assert!(!support.contains(&(0, 1)), "0 and 100 must never pair");
        assert!(!support.contains(&(1, 0)));
        assert!(support.contains(&(1, 2)));
        let pairs = sample_pairs(&records, PairMode::RemoteTemporal, 30, 5, 200).unwrap();
        for p in &pairs {
            assert!(support.contains(&(p.source, p.target)), "{p:?} outside support");
        }
    }

    #[test]
    fn remote_flip_emits_flagged_sync_pairs() {
        let mut records = Vec::new();
        for i in 0..4 {
            for e in [Eye::Left, Eye::Right] {
                let mut r = rec("s00", "sess0", e, i);
                r.video_id = Some("v0".into());
                records.push(r);
            }
        }
        let pairs = sample_pairs(&records, PairMode::RemoteFlip, 1, 11, 400).unwrap();
        let mut saw_flip = false;
        for p in &pairs {
            match p.flip {
                Some(FlipMember::Source) => {
                    saw_flip = true;
                    assert_ne!(records[p.source].eye, records[p.target].eye);
                    assert_eq!(records[p.source].frame_index, records[p.target].frame_index);
                }
                None => assert_eq!(records[p.source].eye, records[p.target].eye),
            }
        }
        assert!(saw_flip, "flip pairs should appear in a 400-pair draw");
    }

    #[test]
    fn no_eligible_pairs_is_a_named_error() {
        let records = vec![rec("s00", "sess0", Eye::Left, 0)];
        let err = sample_pairs(&records, PairMode::NearEye, 0, 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("near_eye"), "{msg}");
        assert!(msg.contains("at least 2"), "{msg}");
    }

    fn fixation_rec(eye: Eye, idx: i64, fix: bool, label: (f64, f64)) -> FrameRecord {
        let mut r = rec("s00", "sess0", eye, idx);
        r.fixation = fix;
        r.gaze_yaw_deg = Some(label.0);
        r.gaze_pitch_deg = Some(label.1);
        r
    }

    #[test]
    fn intervals_split_on_label_change_and_gap() {
        let records = vec![
            fixation_rec(Eye::Left, 0, true, (1.0, 2.0)),
            fixation_rec(Eye::Left, 1, true, (1.0, 2.0)),
            fixation_rec(Eye::Left, 2, false, (0.0, 0.0)),
            fixation_rec(Eye::Left, 3, true, (3.0, 4.0)),
            fixation_rec(Eye::Left, 4, true, (5.0, 6.0)), // label change
        ];
        let ivs = fixation_intervals(&records);
        assert_eq!(ivs.len(), 3);
        assert_eq!(ivs[0].frames, vec![0, 1]);
        assert_eq!(ivs[1].frames, vec![3]);
        assert_eq!(ivs[2].frames, vec![4]);
    }

    #[test]
    fn median_selection_matches_brute_force() {
        // 5 frames, hand-constructed 2D embeddings
        let records: Vec<FrameRecord> = (0..5)
            .map(|i| fixation_rec(Eye::Left, i, true, (0.0, 0.0)))
            .collect();
        let embs: Vec<Option<Vec<f64>>> = vec![
            Some(vec![0.0, 0.0]),
            Some(vec![1.0, 1.0]),
            Some(vec![0.4, 0.55]),
            Some(vec![2.0, -1.0]),
            Some(vec![0.6, 0.4]),
        ];
        let ivs = fixation_intervals(&records);
        assert_eq!(ivs.len(), 1);
        let got = select_median_frame(&ivs[0], &embs).unwrap();
        // brute force: coordinate-wise median then argmin distance
        let mut xs: Vec<f64> = embs.iter().map(|e| e.as_ref().unwrap()[0]).collect();
        let mut ys: Vec<f64> = embs.iter().map(|e| e.as_ref().unwrap()[1]).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let med = (xs[2], ys[2]);
        let want = (0..5)
            .min_by(|&a, &b| {
                let ea = embs[a].as_ref().unwrap();
                let eb = embs[b].as_ref().unwrap();
                let da = (ea[0] - med.0).powi(2) + (ea[1] - med.1).powi(2);
                let db = (eb[0] - med.0).powi(2) + (eb[1] - med.1).powi(2);
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn single_frame_interval_selects_that_frame() {
        let records = vec![fixation_rec(Eye::Left, 7, true, (0.0, 0.0))];
        let embs = vec![Some(vec![3.0, 4.0])];
        let ivs = fixation_intervals(&records);
        assert_eq!(select_median_frame(&ivs[0], &embs), Some(0));
    }

    #[test]
    fn exact_median_frame_is_selected() {
        let records: Vec<FrameRecord> = (0..3)
            .map(|i| fixation_rec(Eye::Left, i, true, (0.0, 0.0)))
            .collect();
        let embs = vec![
            Some(vec![0.0, 0.0]),
            Some(vec![1.0, 5.0]), // equals the coordinate-wise median
            Some(vec![2.0, 10.0]),
        ];
        let ivs = fixation_intervals(&records);
        assert_eq!(select_median_frame(&ivs[0], &embs), Some(1));
    }

    #[test]
    fn missing_eye_interval_skipped_with_warning() {
        let records = vec![
            fixation_rec(Eye::Left, 0, true, (1.0, 1.0)),
            fixation_rec(Eye::Left, 1, true, (1.0, 1.0)),
        ];
        let embs = vec![Some(vec![0.0]), Some(vec![0.1])];
        let got = extract_fixation_samples(&records, &embs);
        assert!(got.binocular.is_empty());
        assert_eq!(got.warnings.len(), 1);
        assert!(got.warnings[0].contains("no right-eye"));
    }

    #[test]
    fn binocular_pairing_matches_synchronized_intervals() {
        let mut records = Vec::new();
        for e in [Eye::Left, Eye::Right] {
            for i in 0..3 {
                records.push(fixation_rec(e, i, true, (2.0, -1.0)));
            }
        }
        let embs: Vec<Option<Vec<f64>>> =
            records.iter().map(|r| Some(vec![r.frame_index as f64])).collect();
        let got = extract_fixation_samples(&records, &embs);
        assert_eq!(got.binocular.len(), 1);
        let s = &got.binocular[0];
        assert_eq!(records[s.left].eye, Eye::Left);
        assert_eq!(records[s.right].eye, Eye::Right);
        assert_eq!(s.label, (2.0, -1.0));
        assert!(got.warnings.is_empty());
    }

    #[test]
    fn disjoint_split_has_no_overlap() {
        for rep in 0..10 {
            let (c, e) = disjoint_split(23, 7, 5, rep);
            assert_eq!(c.len(), 7);
            assert_eq!(e.len(), 16);
            for i in &c {
                assert!(!e.contains(i));
            }
        }
    }
}
