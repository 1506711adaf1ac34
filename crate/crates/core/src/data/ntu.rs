//! NTU RGB+D `.skeleton` text files and the published evaluation splits.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array3;

use super::{center_on_root, Dataset, SkeletonSequence, Topology, CHANNELS};
use crate::error::{Error, Result};

const XSUB_TRAIN_SUBJECTS: &str = include_str!("../../data/splits/xsub_train_subjects.txt");
const XVIEW_TRAIN_CAMERAS: &str = include_str!("../../data/splits/xview_train_cameras.txt");
const XSETUP_TRAIN_SETUPS: &str = include_str!("../../data/splits/xsetup_train_setups.txt");

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self, what: &str) -> Result<(usize, Vec<&'a str>)> {
        loop {
            match self.inner.next() {
                Some((i, l)) => {
                    self.last = i + 1;
                    let fields: Vec<&str> = l.split_whitespace().collect();
                    if !fields.is_empty() {
                        return Ok((i + 1, fields));
                    }
                }
                None => {
                    return Err(Error::Parse {
                        line: self.last + 1,
                        msg: format!("unexpected end of file, expected {what}"),
                    })
                }
            }
        }
    }
}

fn field<T: FromStr>(fields: &[&str], idx: usize, line: usize, what: &str) -> Result<T> {
    fields
        .get(idx)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Parse {
            line,
            msg: format!("expected {what} in field {}", idx + 1),
        })
}

/// Parses one `.skeleton` file into one sequence per tracked body.
///
/// Only the x, y, z fields of each joint line are kept. Frames where a body
/// is absent are zero-filled for that body. Bodies are returned in order of
/// first appearance.
pub fn parse_ntu_skeleton(text: &str, topology: &Topology) -> Result<Vec<SkeletonSequence>> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        last: 0,
    };
    let (ln, f) = lines.next("frame count")?;
    let n_frames: usize = field(&f, 0, ln, "frame count")?;
    let v = topology.n_joints();
    let mut order: Vec<u64> = Vec::new();
    let mut frames: HashMap<u64, Vec<Option<Vec<f32>>>> = HashMap::new();

    for t in 0..n_frames {
        let (ln, f) = lines.next("body count")?;
        let n_bodies: usize = field(&f, 0, ln, "body count")?;
        for _ in 0..n_bodies {
            let (ln, info) = lines.next("body info line")?;
            if info.len() != 10 {
                return Err(Error::Parse {
                    line: ln,
                    msg: format!("body info line has {} fields, expected 10", info.len()),
                });
            }
            let body_id: u64 = field(&info, 0, ln, "body id")?;
            let (ln, f) = lines.next("joint count")?;
            let n_joints: usize = field(&f, 0, ln, "joint count")?;
            if n_joints != v {
                return Err(Error::Schema(format!(
                    "line {ln}: file has {n_joints} joints, topology expects {v}"
                )));
            }
            let mut joints = vec![0.0f32; CHANNELS * v];
            for j in 0..v {
                let (ln, f) = lines.next("joint line")?;
                for c in 0..CHANNELS {
                    let x: f32 = field(&f, c, ln, "coordinate")?;
                    if !x.is_finite() {
                        return Err(Error::Parse {
                            line: ln,
                            msg: "non-finite coordinate".into(),
                        });
                    }
                    joints[c * v + j] = x;
                }
            }
            let slot = frames.entry(body_id).or_insert_with(|| {
                order.push(body_id);
                vec![None; n_frames]
            });
            slot[t] = Some(joints);
        }
    }

    Ok(order
        .iter()
        .map(|id| {
            let per_frame = &frames[id];
            let mut coords = Array3::zeros((CHANNELS, v, n_frames.max(1)));
            for (t, fr) in per_frame.iter().enumerate() {
                if let Some(j) = fr {
                    for c in 0..CHANNELS {
                        for vi in 0..v {
                            coords[[c, vi, t]] = j[c * v + vi];
                        }
                    }
                }
            }
            SkeletonSequence::new(coords)
        })
        .collect())
}

/// Sum of squared frame-to-frame displacements.
pub fn motion_energy(seq: &SkeletonSequence) -> f64 {
    let (c, v, t) = seq.coords.dim();
    let mut e = 0.0;
    for f in 1..t {
        for ci in 0..c {
            for vi in 0..v {
                let d = (seq.coords[[ci, vi, f]] - seq.coords[[ci, vi, f - 1]]) as f64;
                e += d * d;
            }
        }
    }
    e
}

/// Keeps the body with the largest motion energy; ties go to the earliest.
pub fn select_main_actor(bodies: Vec<SkeletonSequence>) -> Option<SkeletonSequence> {
    let mut best: Option<(f64, SkeletonSequence)> = None;
    for b in bodies {
        let e = motion_energy(&b);
        if best.as_ref().is_none_or(|(be, _)| e > *be) {
            best = Some((e, b));
        }
    }
    best.map(|(_, b)| b)
}

/// Fields of an NTU file stem such as `S001C002P003R001A004`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NtuFileName {
    pub setup: u32,
    pub camera: u32,
    pub performer: u32,
    pub replication: u32,
    pub action: u32,
}

impl NtuFileName {
    pub fn parse(name: &str) -> Option<Self> {
        let stem = name.strip_suffix(".skeleton").unwrap_or(name);
        let b = stem.as_bytes();
        if b.len() != 20 {
            return None;
        }
        let num = |tag: u8, at: usize| -> Option<u32> {
            if b[at] != tag {
                return None;
            }
            stem[at + 1..at + 4].parse().ok()
        };
        Some(Self {
            setup: num(b'S', 0)?,
            camera: num(b'C', 4)?,
            performer: num(b'P', 8)?,
            replication: num(b'R', 12)?,
            action: num(b'A', 16)?,
        })
    }

    /// Identifier shared by the simultaneous camera recordings of one take.
    pub fn performance_id(&self) -> u32 {
        ((self.setup * 1000 + self.performer) * 10 + self.replication) * 1000 + self.action
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    CrossSubject,
    CrossView,
    CrossSetup,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xsub" => Ok(Split::CrossSubject),
            "xview" => Ok(Split::CrossView),
            "xsetup" => Ok(Split::CrossSetup),
            other => Err(Error::config(format!("unknown split '{other}' (xsub, xview, xsetup)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Train,
    Test,
}

impl FromStr for Part {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Part::Train),
            "test" => Ok(Part::Test),
            other => Err(Error::config(format!("unknown part '{other}' (train, test)"))),
        }
    }
}

fn id_list(text: &str) -> Vec<u32> {
    text.lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .flat_map(|l| l.split_whitespace())
        .map(|t| t.parse().expect("split list contains integers"))
        .collect()
}

/// Whether a file belongs to `part` of `split`.
pub fn in_split(name: &NtuFileName, split: Split, part: Part) -> bool {
    let train = match split {
        Split::CrossSubject => id_list(XSUB_TRAIN_SUBJECTS).contains(&name.performer),
        Split::CrossView => id_list(XVIEW_TRAIN_CAMERAS).contains(&name.camera),
        Split::CrossSetup => id_list(XSETUP_TRAIN_SETUPS).contains(&name.setup),
    };
    train == (part == Part::Train)
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct IngestReport {
    pub ingested: usize,
    pub skipped_names: Vec<String>,
    pub skipped_empty: Vec<String>,
}

/// Reads every `.skeleton` file of `dir` that belongs to the requested split
/// part, keeping the main actor of each clip.
pub fn ingest_directory(dir: &Path, split: Split, part: Part) -> Result<(Dataset, IngestReport)> {
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".skeleton"))
        .collect();
    if names.is_empty() {
        return Err(Error::Schema(format!("no skeleton files found in {}", dir.display())));
    }
    names.sort();
    let topology = Topology::ntu25();
    let mut report = IngestReport::default();
    let mut sequences = Vec::new();
    for name in names {
        let Some(meta) = NtuFileName::parse(&name) else {
            log::warn!("skipping {name}: unrecognized file name");
            report.skipped_names.push(name);
            continue;
        };
        if !in_split(&meta, split, part) {
            continue;
        }
        let text = fs::read_to_string(dir.join(&name))?;
        let bodies = parse_ntu_skeleton(&text, &topology).map_err(|e| match e {
            Error::Parse { line, msg } => Error::Parse {
                line,
                msg: format!("{name}: {msg}"),
            },
            other => other,
        })?;
        let Some(mut seq) = select_main_actor(bodies) else {
            log::warn!("skipping {name}: no bodies");
            report.skipped_empty.push(name);
            continue;
        };
        center_on_root(&mut seq.coords, topology.root());
        seq.label = Some(meta.action - 1);
        seq.subject_id = meta.performer;
        seq.performance_id = meta.performance_id();
        seq.camera_id = meta.camera - 1;
        sequences.push(seq);
        report.ingested += 1;
    }
    if !report.skipped_names.is_empty() {
        log::warn!("skipped {} files with unrecognized names", report.skipped_names.len());
    }
    let n_classes = sequences.iter().filter_map(|s| s.label).max().map_or(0, |l| l as usize + 1);
    let class_names = (1..=n_classes).map(|a| format!("A{a:03}")).collect();
    let mut ds = Dataset::new(topology, class_names);
    ds.sequences = sequences;
    Ok((ds, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = include_str!("../../tests/fixtures/format_sample.skeleton");

    fn tiny_file(frames: &[&[u64]], joints: usize) -> String {
        let mut out = format!("{}\n", frames.len());
        for (t, bodies) in frames.iter().enumerate() {
            out += &format!("{}\n", bodies.len());
            for &b in bodies.iter() {
                out += &format!("{b} 0 1 1 1 1 0 0.1 0.2 2\n{joints}\n");
                for j in 0..joints {
                    out += &format!("{} {} {} 1 2 3 4 0 0 0 1 2\n", b as usize + j, t, 0.5);
                }
            }
        }
        out
    }

    #[test]
    fn two_frames_one_body() {
        let text = tiny_file(&[&[7], &[7]], 25);
        let seqs = parse_ntu_skeleton(&text, &Topology::ntu25()).unwrap();
        assert_eq!(seqs.len(), 1);
        assert_eq!(seqs[0].coords.dim(), (3, 25, 2));
        assert_eq!(seqs[0].coords[[0, 3, 1]], 10.0);
        assert_eq!(seqs[0].coords[[1, 3, 1]], 1.0);
    }

    #[test]
    fn disappearing_body_is_zero_filled() {
        let text = tiny_file(&[&[7, 9], &[7]], 25);
        let seqs = parse_ntu_skeleton(&text, &Topology::ntu25()).unwrap();
        assert_eq!(seqs.len(), 2);
        let gone = &seqs[1];
        assert!(gone.coords.index_axis(ndarray::Axis(2), 1).iter().all(|&x| x == 0.0));
        assert!(gone.coords.index_axis(ndarray::Axis(2), 0).iter().any(|&x| x != 0.0));
    }

    #[test]
    fn fixture_first_joint_matches_text() {
        let seqs = parse_ntu_skeleton(FIXTURE, &Topology::ntu25()).unwrap();
        assert_eq!(seqs.len(), 2);
        assert_eq!(seqs[0].coords.dim(), (3, 25, 3));
        // Line 5 of the fixture: "0.2181000 0.1723000 3.78500 ..."
        assert_eq!(seqs[0].coords[[0, 0, 0]], 0.2181);
        assert_eq!(seqs[0].coords[[1, 0, 0]], 0.1723);
        assert_eq!(seqs[0].coords[[2, 0, 0]], 3.785);
        // Second body only exists in the last frame.
        assert!(seqs[1].coords.index_axis(ndarray::Axis(2), 0).iter().all(|&x| x == 0.0));
        // Determinism.
        assert_eq!(seqs, parse_ntu_skeleton(FIXTURE, &Topology::ntu25()).unwrap());
    }

    #[test]
    fn truncated_file_names_line() {
        let text = tiny_file(&[&[7], &[7]], 25);
        let cut: String = text.lines().take(20).map(|l| format!("{l}\n")).collect();
        match parse_ntu_skeleton(&cut, &Topology::ntu25()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 21),
            other => panic!("unexpected {other:?}"),
        }
        match parse_ntu_skeleton("abc\n", &Topology::ntu25()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn joint_count_mismatch_is_schema_error() {
        let text = tiny_file(&[&[7]], 11);
        assert!(matches!(parse_ntu_skeleton(&text, &Topology::ntu25()), Err(Error::Schema(_))));
    }

    #[test]
    fn main_actor_has_most_motion() {
        let text = tiny_file(&[&[1, 2], &[1, 2]], 25);
        let mut seqs = parse_ntu_skeleton(&text, &Topology::ntu25()).unwrap();
        seqs[1].coords[[0, 4, 1]] += 3.0;
        let main = select_main_actor(seqs.clone()).unwrap();
        assert_eq!(main, seqs[1]);
    }

    #[test]
    fn file_names_and_splits() {
        let n = NtuFileName::parse("S001C001P001R001A001.skeleton").unwrap();
        assert_eq!(
            n,
            NtuFileName {
                setup: 1,
                camera: 1,
                performer: 1,
                replication: 1,
                action: 1
            }
        );
        // Cross-view: camera 1 is test, cameras 2 and 3 train.
        assert!(in_split(&n, Split::CrossView, Part::Test));
        assert!(!in_split(&n, Split::CrossView, Part::Train));
        let c2 = NtuFileName::parse("S001C002P001R001A001").unwrap();
        let c3 = NtuFileName::parse("S001C003P001R001A001").unwrap();
        assert!(in_split(&c2, Split::CrossView, Part::Train));
        assert!(in_split(&c3, Split::CrossView, Part::Train));
        // Performer 1 trains, performer 3 tests under cross-subject.
        assert!(in_split(&n, Split::CrossSubject, Part::Train));
        let p3 = NtuFileName::parse("S001C001P003R001A001").unwrap();
        assert!(in_split(&p3, Split::CrossSubject, Part::Test));
        // Even setups train under cross-setup.
        assert!(in_split(&n, Split::CrossSetup, Part::Test));
        assert!(in_split(&NtuFileName::parse("S002C001P003R001A001").unwrap(), Split::CrossSetup, Part::Train));
        assert!(NtuFileName::parse("S001C001P001R001X001").is_none());
        assert!(NtuFileName::parse("readme.txt").is_none());
        assert_ne!(n.performance_id(), p3.performance_id());
        assert_eq!(n.performance_id(), NtuFileName::parse("S001C003P001R001A001").unwrap().performance_id());
    }

    #[test]
    fn split_lists_have_published_sizes() {
        assert_eq!(id_list(XSUB_TRAIN_SUBJECTS).len(), 53);
        assert_eq!(id_list(XSUB_TRAIN_SUBJECTS).iter().filter(|&&p| p <= 40).count(), 20);
        assert_eq!(id_list(XVIEW_TRAIN_CAMERAS), vec![2, 3]);
        assert_eq!(id_list(XSETUP_TRAIN_SETUPS).len(), 16);
    }
}
