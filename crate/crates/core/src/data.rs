//! Keypoint sequences, their on-disk format and the preprocessing steps that
//! run before the network sees them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::COCO_NUM_JOINTS;
use crate::{rng, Error, Result};

/// View angles in degrees: 0, 18, ..., 180.
pub const VIEW_ANGLES: [u32; 11] = [0, 18, 36, 54, 72, 90, 108, 126, 144, 162, 180];

/// Frames whose mean joint confidence is strictly below this are dropped.
pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.6;

pub const DEFAULT_NUM_FRAMES: usize = 60;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, confidence: f64) -> Self {
        Self { x, y, confidence }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseFrame {
    pub keypoints: [Keypoint; COCO_NUM_JOINTS],
}

impl PoseFrame {
    pub fn new(keypoints: [Keypoint; COCO_NUM_JOINTS]) -> Self {
        Self { keypoints }
    }

    pub fn filled(k: Keypoint) -> Self {
        Self {
            keypoints: [k; COCO_NUM_JOINTS],
        }
    }
}

/// Walking condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Condition {
    /// normal walking
    NM,
    /// carrying a bag
    BG,
    /// wearing a coat
    CL,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::NM, Condition::BG, Condition::CL];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::NM => "NM",
            Condition::BG => "BG",
            Condition::CL => "CL",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "NM" => Some(Condition::NM),
            "BG" => Some(Condition::BG),
            "CL" => Some(Condition::CL),
            _ => None,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseSequence {
    pub frames: Vec<PoseFrame>,
    pub subject_id: String,
    pub condition: Condition,
    pub sequence_index: u32,
    pub view_angle: u32,
}

impl PoseSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Short identifier used in error messages, e.g. `s001/NM-01/090`.
    pub fn label(&self) -> String {
        format!(
            "{}/{}-{:02}/{:03}",
            self.subject_id, self.condition, self.sequence_index, self.view_angle
        )
    }

    fn with_frames(&self, frames: Vec<PoseFrame>) -> Self {
        Self {
            frames,
            subject_id: self.subject_id.clone(),
            condition: self.condition,
            sequence_index: self.sequence_index,
            view_angle: self.view_angle,
        }
    }

    fn coordinates(&self) -> impl Iterator<Item = &Keypoint> {
        self.frames.iter().flat_map(|f| f.keypoints.iter())
    }

    pub(crate) fn map_keypoints(&self, mut f: impl FnMut(&Keypoint) -> Keypoint) -> Self {
        let frames = self
            .frames
            .iter()
            .map(|fr| PoseFrame {
                keypoints: std::array::from_fn(|j| f(&fr.keypoints[j])),
            })
            .collect();
        self.with_frames(frames)
    }
}

/// `(Σ c_i) / M` over the 17 joints.
///
/// Summation is compensated so that a frame whose joints all report the
/// same confidence `c` averages to exactly `c`.
pub fn mean_confidence(frame: &PoseFrame) -> f64 {
    let (mut sum, mut carry) = (0.0f64, 0.0f64);
    for k in &frame.keypoints {
        let c = k.confidence;
        let t = sum + c;
        carry += if sum.abs() >= c.abs() { (sum - t) + c } else { (c - t) + sum };
        sum = t;
    }
    (sum + carry) / COCO_NUM_JOINTS as f64
}

/// Keeps the frames whose mean confidence is at least `threshold`.
pub fn filter_low_confidence(seq: &PoseSequence, threshold: f64) -> Result<PoseSequence> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!(
            "confidence threshold {threshold} outside [0, 1]"
        )));
    }
    let frames: Vec<PoseFrame> = seq
        .frames
        .iter()
        .filter(|f| mean_confidence(f) >= threshold)
        .cloned()
        .collect();
    if frames.is_empty() {
        return Err(Error::EmptySequence(seq.label()));
    }
    Ok(seq.with_frames(frames))
}

/// Centres the sequence on its mean joint position and scales it so the
/// pooled standard deviation of all x and y values is one.
pub fn normalize_coordinates(seq: &PoseSequence) -> Result<PoseSequence> {
    if seq.is_empty() {
        return Err(Error::EmptySequence(seq.label()));
    }
    let count = (seq.len() * COCO_NUM_JOINTS) as f64;
    let (sx, sy) = seq
        .coordinates()
        .fold((0.0, 0.0), |(sx, sy), k| (sx + k.x, sy + k.y));
    let (mx, my) = (sx / count, sy / count);
    let ss: f64 = seq
        .coordinates()
        .map(|k| (k.x - mx).powi(2) + (k.y - my).powi(2))
        .sum();
    let std = (ss / (2.0 * count)).sqrt();
    if !(std >= 1e-9) {
        return Err(Error::DegenerateSequence(seq.label()));
    }
    Ok(seq.map_keypoints(|k| Keypoint::new((k.x - mx) / std, (k.y - my) / std, k.confidence)))
}

/// Where to cut a fixed-length window from a longer sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Window {
    /// Evaluation: the centred window.
    Centered,
    /// Training: a window starting at the given frame (clamped to fit).
    Start(usize),
}

impl Window {
    /// Uniformly random start for a sequence of `len` frames.
    pub fn random(len: usize, target: usize, rng: &mut impl Rng) -> Self {
        Window::Start(rng.random_range(0..=len.saturating_sub(target)))
    }
}

/// Crops or pads to exactly `target` frames. Short sequences repeat their
/// final frame.
pub fn fixed_length(seq: &PoseSequence, target: usize, window: Window) -> Result<PoseSequence> {
    if seq.is_empty() {
        return Err(Error::EmptySequence(seq.label()));
    }
    if target == 0 {
        return Err(Error::Config("fixed_length target must be positive".into()));
    }
    let n = seq.len();
    let frames = if n >= target {
        let start = match window {
            Window::Centered => (n - target) / 2,
            Window::Start(s) => s.min(n - target),
        };
        seq.frames[start..start + target].to_vec()
    } else {
        let last = seq.frames[n - 1].clone();
        let mut frames = seq.frames.clone();
        frames.resize(target, last);
        frames
    };
    Ok(seq.with_frames(frames))
}

/// Train / validation / test partition at subject granularity.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<PoseSequence>,
    pub validation: Vec<PoseSequence>,
    pub test: Vec<PoseSequence>,
}

pub fn subjects_of(seqs: &[PoseSequence]) -> BTreeSet<String> {
    seqs.iter().map(|s| s.subject_id.clone()).collect()
}

/// Partitions subjects (sorted by id, then shuffled by `seed`) by cumulative
/// ratio with floor rounding; the remainder goes to test.
pub fn split_by_subject(
    sequences: &[PoseSequence],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit> {
    let (r_train, r_val, r_test) = ratios;
    if [r_train, r_val, r_test].iter().any(|r| !(*r >= 0.0))
        || (r_train + r_val + r_test - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let mut subjects: Vec<String> = subjects_of(sequences).into_iter().collect();
    subjects.shuffle(&mut rng::seeded(seed));
    let n = subjects.len();
    let n_train = (n as f64 * r_train + 1e-9).floor() as usize;
    let n_val = (n as f64 * r_val + 1e-9).floor() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::TooFewSubjects { subjects: n });
    }
    let part: BTreeMap<&str, usize> = subjects
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let p = if i < n_train {
                0
            } else if i < n_train + n_val {
                1
            } else {
                2
            };
            (s.as_str(), p)
        })
        .collect();
    let mut split = DatasetSplit::default();
    for seq in sequences {
        match part[seq.subject_id.as_str()] {
            0 => split.train.push(seq.clone()),
            1 => split.validation.push(seq.clone()),
            _ => split.test.push(seq.clone()),
        }
    }
    Ok(split)
}

/// One line of a keypoint file.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    subject: String,
    condition: String,
    seq: u32,
    angle: u32,
    frames: Vec<Vec<[f64; 3]>>,
}

impl From<&PoseSequence> for Record {
    fn from(s: &PoseSequence) -> Self {
        Record {
            subject: s.subject_id.clone(),
            condition: s.condition.as_str().to_string(),
            seq: s.sequence_index,
            angle: s.view_angle,
            frames: s
                .frames
                .iter()
                .map(|f| f.keypoints.iter().map(|k| [k.x, k.y, k.confidence]).collect())
                .collect(),
        }
    }
}

impl Record {
    fn into_sequence(self, line: usize) -> Result<PoseSequence> {
        let name = format!("line {line} ({} seq {})", self.subject, self.seq);
        let schema = |message: String| Error::Schema {
            record: name.clone(),
            message,
        };
        let condition = Condition::parse(&self.condition)
            .ok_or_else(|| schema(format!("unknown condition {:?}", self.condition)))?;
        if !VIEW_ANGLES.contains(&self.angle) {
            return Err(schema(format!("angle {} not in 0, 18, ..., 180", self.angle)));
        }
        if self.seq == 0 {
            return Err(schema("sequence index must be positive".into()));
        }
        if self.subject.is_empty() {
            return Err(schema("empty subject id".into()));
        }
        if self.frames.is_empty() {
            return Err(schema("sequence has no frames".into()));
        }
        let mut frames = Vec::with_capacity(self.frames.len());
        for (fi, frame) in self.frames.into_iter().enumerate() {
            if frame.len() != COCO_NUM_JOINTS {
                return Err(schema(format!(
                    "frame {fi} has {} keypoints, expected {COCO_NUM_JOINTS}",
                    frame.len()
                )));
            }
            for (j, [x, y, c]) in frame.iter().enumerate() {
                if !x.is_finite() || !y.is_finite() {
                    return Err(schema(format!("frame {fi} joint {j}: non-finite coordinate")));
                }
                if !(0.0..=1.0).contains(c) {
                    return Err(schema(format!(
                        "frame {fi} joint {j}: confidence {c} outside [0, 1]"
                    )));
                }
            }
            frames.push(PoseFrame {
                keypoints: std::array::from_fn(|j| {
                    let [x, y, c] = frame[j];
                    Keypoint::new(x, y, c)
                }),
            });
        }
        Ok(PoseSequence {
            frames,
            subject_id: self.subject,
            condition,
            sequence_index: self.seq,
            view_angle: self.angle,
        })
    }
}

/// Serialises one sequence as a single JSON line (no trailing newline).
pub fn sequence_to_json(seq: &PoseSequence) -> String {
    serde_json::to_string(&Record::from(seq)).expect("finite record serialises")
}

/// Parses one JSON line. `line` is the 1-based line number used in errors.
pub fn sequence_from_json(text: &str, line: usize) -> Result<PoseSequence> {
    let record: Record = serde_json::from_str(text).map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })?;
    record.into_sequence(line)
}

/// Result of reading a keypoint file without stopping at the first bad line.
#[derive(Debug, Default)]
pub struct Validation {
    pub sequences: Vec<PoseSequence>,
    pub errors: Vec<Error>,
}

pub fn validate_keypoint_file(path: &Path) -> Result<Validation> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Validation::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match sequence_from_json(&line, i + 1) {
            Ok(s) => out.sequences.push(s),
            Err(e) => out.errors.push(e),
        }
    }
    Ok(out)
}

pub fn load_keypoint_file(path: &Path) -> Result<Vec<PoseSequence>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut seqs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        seqs.push(sequence_from_json(&line, i + 1)?);
    }
    Ok(seqs)
}

pub fn save_keypoint_file(seqs: &[PoseSequence], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    for s in seqs {
        writeln!(w, "{}", sequence_to_json(s))?;
    }
    w.flush()?;
    Ok(())
}

/// `.jsonl` files under a directory (sorted), or the path itself if it is a
/// file.
pub fn keypoint_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads every keypoint file under `path`.
pub fn load_keypoint_dir(path: &Path) -> Result<Vec<PoseSequence>> {
    let mut all = Vec::new();
    for f in keypoint_files(path)? {
        all.extend(load_keypoint_file(&f)?);
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq_with_confidences(confs: &[f64]) -> PoseSequence {
        PoseSequence {
            frames: confs
                .iter()
                .enumerate()
                .map(|(i, &c)| PoseFrame::filled(Keypoint::new(i as f64, 2.0 * i as f64, c)))
                .collect(),
            subject_id: "s001".into(),
            condition: Condition::NM,
            sequence_index: 1,
            view_angle: 90,
        }
    }

    fn ramp(n: usize) -> PoseSequence {
        let mut s = seq_with_confidences(&vec![1.0; n]);
        for (t, f) in s.frames.iter_mut().enumerate() {
            for (j, k) in f.keypoints.iter_mut().enumerate() {
                k.x = (t * 17 + j) as f64 * 0.37 - 3.0;
                k.y = ((t + j) as f64).sin() * 5.0;
            }
        }
        s
    }

    #[test]
    fn mean_confidence_examples() {
        assert_eq!(mean_confidence(&PoseFrame::filled(Keypoint::new(0.0, 0.0, 0.5))), 0.5);
        assert_eq!(mean_confidence(&PoseFrame::filled(Keypoint::new(0.0, 0.0, 1.0))), 1.0);
        let mut f = PoseFrame::filled(Keypoint::new(0.0, 0.0, 0.9));
        f.keypoints[16].confidence = 0.1;
        assert!((mean_confidence(&f) - (16.0 * 0.9 + 0.1) / 17.0).abs() < 1e-15);
    }

    #[test]
    fn filter_examples() {
        let kept = filter_low_confidence(&seq_with_confidences(&[0.7; 10]), 0.6).unwrap();
        assert_eq!(kept.len(), 10);
        assert!(matches!(
            filter_low_confidence(&seq_with_confidences(&[0.5; 10]), 0.6),
            Err(Error::EmptySequence(_))
        ));
        // boundary frames survive
        let s = seq_with_confidences(&[0.5, 0.75, 0.25, 1.0]);
        let kept = filter_low_confidence(&s, 0.75).unwrap();
        assert_eq!(kept.frames, vec![s.frames[1].clone(), s.frames[3].clone()]);
        // uniform 0.6 sums to 10.199999999999998 when added naively
        let at = seq_with_confidences(&[0.6, 0.6 - 1e-12, 0.6]);
        assert_eq!(mean_confidence(&at.frames[0]), 0.6);
        assert_eq!(filter_low_confidence(&at, 0.6).unwrap().len(), 2);
    }

    #[test]
    fn normalize_statistics() {
        let n = normalize_coordinates(&ramp(7)).unwrap();
        let pts: Vec<f64> = n.coordinates().flat_map(|k| [k.x, k.y]).collect();
        let xs = n.coordinates().map(|k| k.x).sum::<f64>() / (7.0 * 17.0);
        let ys = n.coordinates().map(|k| k.y).sum::<f64>() / (7.0 * 17.0);
        assert!(xs.abs() < 1e-10 && ys.abs() < 1e-10);
        let var = pts.iter().map(|v| v * v).sum::<f64>() / pts.len() as f64;
        assert!((var.sqrt() - 1.0).abs() < 1e-10);
        // fixpoint
        let again = normalize_coordinates(&n).unwrap();
        for (a, b) in again.coordinates().zip(n.coordinates()) {
            assert!((a.x - b.x).abs() < 1e-12 && (a.y - b.y).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_rejects_coincident_joints() {
        let s = seq_with_confidences(&[1.0]);
        assert!(matches!(normalize_coordinates(&s), Err(Error::DegenerateSequence(_))));
    }

    #[test]
    fn fixed_length_examples() {
        let s60 = ramp(60);
        assert_eq!(fixed_length(&s60, 60, Window::Centered).unwrap(), s60);

        let s30 = ramp(30);
        let padded = fixed_length(&s30, 60, Window::Centered).unwrap();
        assert_eq!(padded.len(), 60);
        assert_eq!(&padded.frames[..30], &s30.frames[..]);
        assert!(padded.frames[30..].iter().all(|f| *f == s30.frames[29]));

        let s100 = ramp(100);
        let c = fixed_length(&s100, 60, Window::Centered).unwrap();
        // 1-based frames 21..=80
        assert_eq!(c.frames[..], s100.frames[20..80]);
        let w = fixed_length(&s100, 60, Window::Start(500)).unwrap();
        assert_eq!(w.frames[..], s100.frames[40..100]);
    }

    fn corpus(subjects: usize) -> Vec<PoseSequence> {
        (0..subjects)
            .flat_map(|i| {
                (1..=3).map(move |k| {
                    let mut s = seq_with_confidences(&[1.0]);
                    s.subject_id = format!("s{i:03}");
                    s.sequence_index = k;
                    s
                })
            })
            .collect()
    }

    #[test]
    fn split_counts() {
        let c = corpus(126);
        let split = split_by_subject(&c, (0.48, 0.12, 0.40), 3).unwrap();
        assert_eq!(subjects_of(&split.train).len(), 60);
        assert_eq!(subjects_of(&split.validation).len(), 15);
        assert_eq!(subjects_of(&split.test).len(), 51);
        assert_eq!(split.train.len() + split.validation.len() + split.test.len(), c.len());

        let c = corpus(10);
        let split = split_by_subject(&c, (0.5, 0.2, 0.3), 9).unwrap();
        assert_eq!(subjects_of(&split.train).len(), 5);
        assert_eq!(subjects_of(&split.validation).len(), 2);
        assert_eq!(subjects_of(&split.test).len(), 3);
        assert_eq!(split, split_by_subject(&c, (0.5, 0.2, 0.3), 9).unwrap());
    }

    #[test]
    fn split_errors() {
        assert!(matches!(
            split_by_subject(&corpus(2), (0.48, 0.12, 0.40), 0),
            Err(Error::TooFewSubjects { subjects: 2 })
        ));
        assert!(split_by_subject(&corpus(10), (0.5, 0.5, 0.5), 0).is_err());
    }

    #[test]
    fn file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.jsonl");
        save_keypoint_file(&[], &path).unwrap();
        assert!(load_keypoint_file(&path).unwrap().is_empty());

        let s = ramp(2);
        save_keypoint_file(std::slice::from_ref(&s), &path).unwrap();
        assert_eq!(load_keypoint_file(&path).unwrap(), vec![s.clone()]);

        let mut rec: serde_json::Value = serde_json::from_str(&sequence_to_json(&s)).unwrap();
        rec["frames"][1].as_array_mut().unwrap().pop();
        let bad = format!("{}\n{}\n", sequence_to_json(&s), rec);
        fs::write(&path, bad).unwrap();
        match load_keypoint_file(&path) {
            Err(Error::Schema { record, message }) => {
                assert!(record.contains("line 2"), "{record}");
                assert!(message.contains("16 keypoints"), "{message}");
            }
            other => panic!("expected schema error, got {other:?}"),
        }
        fs::write(&path, "{not json\n").unwrap();
        assert!(matches!(load_keypoint_file(&path), Err(Error::Parse { line: 1, .. })));
    }
}
