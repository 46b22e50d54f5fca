//! Silhouette ingest: frame normalization, sequence loading, clip sampling
//! and the dataset manifest.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::{is_frame_file, read_frame, Gray};
use crate::tensor::{Scalar, Tensor};

/// How raw frames are brought to the network's input size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NormalizeMode {
    /// Crop to the vertical foreground extent, center on the foreground
    /// centroid column, scale to the output height, crop/pad the width.
    #[default]
    Crop,
    /// Nearest-neighbour resize of the whole frame.
    Resize,
}

impl NormalizeMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "crop" => Some(NormalizeMode::Crop),
            "resize" => Some(NormalizeMode::Resize),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NormalizeMode::Crop => "crop",
            NormalizeMode::Resize => "resize",
        }
    }
}

/// A binary mask, values in {0, 1}.
pub type Mask = Gray;

#[derive(Clone, Debug, PartialEq)]
pub struct SilhouetteSequence {
    pub subject: String,
    pub condition: String,
    pub view: String,
    pub frames: Vec<Mask>,
}

impl SilhouetteSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(1, T, H, W)` tensor with foreground 1.0.
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let first = self
            .frames
            .first()
            .ok_or_else(|| Error::EmptySequence(self.subject.clone()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(self.frames.len() * h * w);
        for f in &self.frames {
            if (f.height, f.width) != (h, w) {
                return Err(Error::shape(
                    "sequence frames",
                    &[f.height, f.width],
                    &[h, w],
                ));
            }
            data.extend(
                f.data
                    .iter()
                    .map(|&v| if v > 0 { T::one() } else { T::zero() }),
            );
        }
        Tensor::from_vec(&[1, self.frames.len(), h, w], data)
    }
}

/// Source index range `[lo, hi)` feeding output cell `i` when `src` cells
/// are mapped onto `dst` cells. Ranges tile the source, never empty, and the
/// first/last output cells always cover the first/last source cells.
fn cell_range(i: i64, src: i64, dst: i64) -> (i64, i64) {
    let lo = (i * src).div_euclid(dst);
    let hi = ((i + 1) * src).div_euclid(dst).max(lo + 1);
    (lo, hi)
}

/// Round-half-up column of the foreground centroid, computed in integers so
/// that shifting the mask by whole columns shifts it exactly.
fn anchor_column(img: &Gray, rows: std::ops::Range<usize>) -> Option<i64> {
    let (mut sum, mut n) = (0i64, 0i64);
    for r in rows {
        for c in 0..img.width {
            if img.get(r, c) > 0 {
                sum += c as i64;
                n += 1;
            }
        }
    }
    (n > 0).then(|| (2 * sum + n).div_euclid(2 * n))
}

fn is_empty(img: &Gray) -> bool {
    img.data.iter().all(|&v| v == 0)
}

fn shift_columns(img: &Gray, shift: i64) -> Gray {
    if shift == 0 {
        return img.clone();
    }
    let mut out = Gray::new(img.height, img.width);
    for r in 0..img.height {
        for c in 0..img.width as i64 {
            let src = c - shift;
            if (0..img.width as i64).contains(&src) {
                out.set(r, c as usize, img.get(r, src as usize));
            }
        }
    }
    out
}

/// The geometric part of [`normalize_frame`], fixed by one raw frame so it
/// can be replayed on companion images such as region labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormalizePlan {
    mode: NormalizeMode,
    out_h: usize,
    out_w: usize,
    top: usize,
    h_src: i64,
    anchor: i64,
    shift: i64,
}

impl NormalizePlan {
    /// Plan for `raw` (nonzero = foreground); `None` if no foreground
    /// survives normalization.
    pub fn new(raw: &Gray, out_h: usize, out_w: usize, mode: NormalizeMode) -> Option<Self> {
        if out_h == 0 || out_w == 0 || is_empty(raw) {
            return None;
        }
        let mut plan = NormalizePlan {
            mode,
            out_h,
            out_w,
            top: 0,
            h_src: raw.height as i64,
            anchor: 0,
            shift: 0,
        };
        if mode == NormalizeMode::Crop {
            let fg_row = |r: usize| (0..raw.width).any(|c| raw.get(r, c) > 0);
            plan.top = (0..raw.height).find(|&r| fg_row(r))?;
            let bottom = (0..raw.height).rev().find(|&r| fg_row(r))?;
            plan.h_src = (bottom - plan.top + 1) as i64;
            plan.anchor = anchor_column(raw, plan.top..bottom + 1)?;
            let unshifted = plan.resample(raw);
            let a = anchor_column(&unshifted, 0..out_h)?;
            plan.shift = (out_w / 2) as i64 - a;
        }
        let out = plan.apply(raw);
        (!is_empty(&out)).then_some(plan)
    }

    fn resample(&self, img: &Gray) -> Gray {
        let half = (self.out_w / 2) as i64;
        let mut out = Gray::new(self.out_h, self.out_w);
        for r in 0..self.out_h {
            let (r0, r1) = cell_range(r as i64, self.h_src, self.out_h as i64);
            for c in 0..self.out_w {
                let (c0, c1) = cell_range(c as i64 - half, self.h_src, self.out_h as i64);
                let mut v = 0u8;
                for rr in r0..r1 {
                    let sr = self.top + rr as usize;
                    for sc in self.anchor + c0..self.anchor + c1 {
                        if sc >= 0 && (sc as usize) < img.width {
                            v = v.max(img.get(sr, sc as usize));
                        }
                    }
                }
                out.set(r, c, v);
            }
        }
        out
    }

    /// Replay the plan on an image of the raw frame's size. Crop mode keeps
    /// the maximum value over each output cell's footprint; resize mode
    /// samples the nearest cell.
    pub fn apply(&self, img: &Gray) -> Gray {
        match self.mode {
            NormalizeMode::Resize => resize_nearest(img, self.out_h, self.out_w),
            NormalizeMode::Crop => shift_columns(&self.resample(img), self.shift),
        }
    }
}

/// Normalize one raw frame (nonzero = foreground) to an `out_h x out_w`
/// binary mask. Returns `None` when no foreground survives.
///
/// In crop mode each output cell is the OR of the source cells it covers,
/// so thin limbs survive downscaling, and the result is recentered on its
/// own centroid; together these make the map idempotent.
pub fn normalize_frame(
    raw: &Gray,
    out_h: usize,
    out_w: usize,
    mode: NormalizeMode,
) -> Option<Mask> {
    let fg = raw.clone().map_values(|v| (v > 0) as u8);
    let plan = NormalizePlan::new(&fg, out_h, out_w, mode)?;
    Some(plan.apply(&fg))
}

/// Plain nearest-neighbour resize (sample at cell centres).
pub fn resize_nearest(img: &Gray, out_h: usize, out_w: usize) -> Gray {
    let mut out = Gray::new(out_h, out_w);
    for r in 0..out_h {
        let sr = ((2 * r + 1) * img.height / (2 * out_h)).min(img.height - 1);
        for c in 0..out_w {
            let sc = ((2 * c + 1) * img.width / (2 * out_w)).min(img.width - 1);
            out.set(r, c, img.get(sr, sc));
        }
    }
    out
}

impl Gray {
    pub fn map_values(mut self, f: impl Fn(u8) -> u8) -> Self {
        self.data.iter_mut().for_each(|v| *v = f(*v));
        self
    }
}

/// Frame files of a sequence directory, in name order.
pub fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_frame_file(p))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Frames kept and dropped while loading a sequence.
#[derive(Clone, Debug, Default)]
pub struct LoadReport {
    pub dropped: Vec<(PathBuf, String)>,
}

/// Load and normalize every frame under `dir`. Undecodable or empty frames
/// are dropped and listed in the report.
pub fn load_sequence_with_report(
    dir: &Path,
    out_h: usize,
    out_w: usize,
    mode: NormalizeMode,
) -> Result<(SilhouetteSequence, LoadReport)> {
    let mut frames = Vec::new();
    let mut report = LoadReport::default();
    for p in frame_paths(dir)? {
        match read_frame(&p) {
            Ok(raw) => match normalize_frame(&raw, out_h, out_w, mode) {
                Some(m) => frames.push(m),
                None => report.dropped.push((p, "no foreground".into())),
            },
            Err(Error::Decode { reason, .. }) => report.dropped.push((p, reason)),
            Err(e) => return Err(e),
        }
    }
    for (p, why) in &report.dropped {
        log::warn!("dropped frame {}: {why}", p.display());
    }
    if frames.is_empty() {
        return Err(Error::EmptySequence(dir.display().to_string()));
    }
    // <root>/<subject>/<condition>/<view>
    let part = |n: usize| {
        dir.iter()
            .rev()
            .nth(n)
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    };
    let seq = SilhouetteSequence {
        subject: part(2),
        condition: part(1),
        view: part(0),
        frames,
    };
    Ok((seq, report))
}

pub fn load_sequence(
    dir: &Path,
    out_h: usize,
    out_w: usize,
    mode: NormalizeMode,
) -> Result<SilhouetteSequence> {
    Ok(load_sequence_with_report(dir, out_h, out_w, mode)?.0)
}

/// `len` frames: a random contiguous window, or for short sequences a
/// cyclic repetition starting at a random phase.
pub fn sample_clip<R: Rng>(
    seq: &SilhouetteSequence,
    len: usize,
    rng: &mut R,
) -> SilhouetteSequence {
    let n = seq.frames.len();
    assert!(
        len >= 1 && n >= 1,
        "sample_clip needs a non-empty sequence and len >= 1"
    );
    let frames = if n >= len {
        let start = rng.gen_range(0..=n - len);
        seq.frames[start..start + len].to_vec()
    } else {
        let phase = rng.gen_range(0..n);
        (0..len)
            .map(|i| seq.frames[(phase + i) % n].clone())
            .collect()
    };
    SilhouetteSequence {
        frames,
        ..seq.clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Gallery,
    Probe,
}

impl Partition {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Partition::Train),
            "gallery" => Some(Partition::Gallery),
            "probe" => Some(Partition::Probe),
            _ => None,
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Partition::Train => "train",
            Partition::Gallery => "gallery",
            Partition::Probe => "probe",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject: String,
    pub condition: String,
    pub view: String,
    /// Sequence directory relative to the manifest root.
    pub path: String,
    pub frames: usize,
    pub partition: Partition,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.csv";

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(&e.path) {
                return Err(Error::Config(format!(
                    "sequence {} listed more than once",
                    e.path
                )));
            }
        }
        Ok(())
    }

    pub fn partition(&self, p: Partition) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.partition == p)
    }

    /// Sorted distinct subjects of a partition.
    pub fn subjects(&self, p: Partition) -> Vec<String> {
        self.partition(p)
            .map(|e| e.subject.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn sequence_dir(&self, e: &ManifestEntry) -> PathBuf {
        self.root.join(&e.path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        for e in &self.entries {
            w.serialize(e).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Read a manifest; relative sequence paths resolve against its directory.
    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let entries = r
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestEntry>, _>>()
            .map_err(|e| csv_err(path, e))?;
        let m = DatasetManifest {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            entries,
        };
        m.validate()?;
        Ok(m)
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }
    }
}

/// Load and normalize every sequence of one partition, labelled from the
/// manifest rather than the directory names.
pub fn load_partition(
    manifest: &DatasetManifest,
    p: Partition,
    (out_h, out_w): (usize, usize),
    mode: NormalizeMode,
) -> Result<Vec<SilhouetteSequence>> {
    let entries: Vec<&ManifestEntry> = manifest.partition(p).collect();
    entries
        .par_iter()
        .map(|e| {
            let mut s = load_sequence(&manifest.sequence_dir(e), out_h, out_w, mode)?;
            s.subject = e.subject.clone();
            s.condition = e.condition.clone();
            s.view = e.view.clone();
            Ok(s)
        })
        .collect()
}

/// How `prep` assigns partitions to a scanned directory tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PartitionRule {
    /// Subjects (in sorted order) whose sequences all go to training.
    pub train_subjects: usize,
    /// Per remaining subject, this many sequences go to the gallery and the
    /// rest to the probe set.
    pub gallery_per_subject: usize,
}

/// Walk `<root>/<subject>/<condition>/<view>/` and build a manifest.
pub fn scan_dataset(root: &Path, rule: PartitionRule) -> Result<DatasetManifest> {
    let dirs = |p: &Path| -> Result<Vec<PathBuf>> {
        let mut v: Vec<PathBuf> = fs::read_dir(p)
            .map_err(|e| Error::io(p, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        v.sort();
        Ok(v)
    };
    let name = |p: &Path| {
        p.file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    };
    let mut entries = Vec::new();
    for (si, subject) in dirs(root)?.iter().enumerate() {
        if name(subject) == "regions" {
            continue;
        }
        let mut k = 0;
        for cond in dirs(subject)? {
            for view in dirs(&cond)? {
                let frames = frame_paths(&view)?.len();
                if frames == 0 {
                    continue;
                }
                let partition = if si < rule.train_subjects {
                    Partition::Train
                } else if k < rule.gallery_per_subject {
                    Partition::Gallery
                } else {
                    Partition::Probe
                };
                k += 1;
                entries.push(ManifestEntry {
                    subject: name(subject),
                    condition: name(&cond),
                    view: name(&view),
                    path: format!("{}/{}/{}", name(subject), name(&cond), name(&view)),
                    frames,
                    partition,
                });
            }
        }
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_io::write_pgm;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn blob(
        h: usize,
        w: usize,
        rows: std::ops::Range<usize>,
        cols: std::ops::Range<usize>,
    ) -> Gray {
        let mut g = Gray::new(h, w);
        for r in rows {
            for c in cols.clone() {
                g.set(r, c, 255);
            }
        }
        g
    }

    #[test]
    fn full_frame_stays_full() {
        let g = blob(64, 44, 0..64, 0..44);
        let m = normalize_frame(&g, 64, 44, NormalizeMode::Crop).unwrap();
        assert!(m.data.iter().all(|&v| v == 1));
    }

    #[test]
    fn centered_bar() {
        // already at output height: no scaling, bar lands on column W/2
        let g = blob(64, 30, 0..64, 7..8);
        let m = normalize_frame(&g, 64, 44, NormalizeMode::Crop).unwrap();
        for r in 0..64 {
            for c in 0..44 {
                assert_eq!(m.get(r, c), (c == 22) as u8, "r{r} c{c}");
            }
        }
        // upscaled bar widens but stays full height and centred
        let g = blob(50, 30, 10..40, 7..8);
        let m = normalize_frame(&g, 64, 44, NormalizeMode::Crop).unwrap();
        let cols: Vec<usize> = (0..44).filter(|&c| m.get(0, c) == 1).collect();
        assert_eq!(cols, vec![21, 22, 23]);
        assert!((0..64).all(|r| (0..44).all(|c| m.get(r, c) == m.get(0, c))));
    }

    #[test]
    fn shifted_blob_matches_centered() {
        let a = blob(80, 60, 5..70, 10..25);
        let b = blob(80, 60, 5..70, 20..35);
        assert_eq!(
            normalize_frame(&a, 64, 44, NormalizeMode::Crop),
            normalize_frame(&b, 64, 44, NormalizeMode::Crop)
        );
    }

    #[test]
    fn empty_frame_is_dropped() {
        assert!(normalize_frame(&Gray::new(8, 8), 4, 4, NormalizeMode::Crop).is_none());
        assert!(normalize_frame(&Gray::new(8, 8), 4, 4, NormalizeMode::Resize).is_none());
    }

    #[test]
    fn resize_mode_is_nearest() {
        let g = blob(4, 4, 0..2, 0..2);
        let m = normalize_frame(&g, 2, 2, NormalizeMode::Resize).unwrap();
        assert_eq!(m.data, vec![1, 0, 0, 0]);
    }

    fn seq(n: usize) -> SilhouetteSequence {
        SilhouetteSequence {
            subject: "s".into(),
            condition: "c".into(),
            view: "v".into(),
            frames: (0..n)
                .map(|i| Gray::from_vec(1, 1, vec![i as u8]).unwrap())
                .collect(),
        }
    }

    #[test]
    fn clip_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_clip(&seq(30), 30, &mut rng), seq(30));

        let c = sample_clip(&seq(10), 30, &mut rng);
        assert_eq!(c.len(), 30);
        for i in 10..30 {
            assert_eq!(c.frames[i], c.frames[i - 10]);
        }

        let a = sample_clip(&seq(100), 30, &mut ChaCha8Rng::seed_from_u64(5));
        let b = sample_clip(&seq(100), 30, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        let s = a.frames[0].data[0] as usize;
        assert!(a
            .frames
            .iter()
            .enumerate()
            .all(|(i, f)| f.data[0] as usize == s + i));
    }

    fn write_seq(dir: &Path, frames: usize) {
        fs::create_dir_all(dir).unwrap();
        for i in 0..frames {
            write_pgm(
                &dir.join(format!("{i:04}.pgm")),
                &blob(16, 12, 2..14, 4..8),
                255,
            )
            .unwrap();
        }
    }

    #[test]
    fn load_sequence_cases() {
        let tmp = tempfile::tempdir().unwrap();
        let d = tmp.path().join("007/NM-01/090");
        write_seq(&d, 30);
        let s = load_sequence(&d, 16, 12, NormalizeMode::Crop).unwrap();
        assert_eq!(s.len(), 30);
        assert_eq!(
            (s.subject.as_str(), s.condition.as_str(), s.view.as_str()),
            ("007", "NM-01", "090")
        );

        fs::write(d.join("0013.pgm"), b"P5\n16 12\n255\nshort").unwrap();
        let (s, rep) = load_sequence_with_report(&d, 16, 12, NormalizeMode::Crop).unwrap();
        assert_eq!(s.len(), 29);
        assert_eq!(rep.dropped.len(), 1);

        let e = tmp.path().join("empty");
        fs::create_dir_all(&e).unwrap();
        assert!(matches!(
            load_sequence(&e, 16, 12, NormalizeMode::Crop),
            Err(Error::EmptySequence(_))
        ));
        assert!(matches!(
            load_sequence(&tmp.path().join("missing"), 16, 12, NormalizeMode::Crop),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn manifest_roundtrip_and_scan() {
        let tmp = tempfile::tempdir().unwrap();
        for s in ["a", "b"] {
            for c in ["NM-01", "NM-02", "NM-03"] {
                write_seq(&tmp.path().join(s).join(c).join("090"), 3);
            }
        }
        let m = scan_dataset(
            tmp.path(),
            PartitionRule {
                train_subjects: 1,
                gallery_per_subject: 1,
            },
        )
        .unwrap();
        assert_eq!(m.entries.len(), 6);
        assert_eq!(m.partition(Partition::Train).count(), 3);
        assert_eq!(m.partition(Partition::Gallery).count(), 1);
        assert_eq!(m.partition(Partition::Probe).count(), 2);
        let p = tmp.path().join(MANIFEST_FILE);
        m.write(&p).unwrap();
        let header = fs::read_to_string(&p).unwrap();
        assert!(header.starts_with("subject,condition,view,path,frames,partition\n"));
        assert_eq!(DatasetManifest::read(&p).unwrap(), m);
    }
}
