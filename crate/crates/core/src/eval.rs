//! Gallery/probe retrieval: embedding extraction, distances, Rank-k, mAP,
//! mINP and the cross-view protocol.
//!
//! Rankings sort gallery entries by distance, ties broken by ascending
//! gallery index. A probe with no admissible gallery entry is excluded from
//! every metric; a probe whose subject is absent from its admissible
//! gallery counts as a miss for Rank-k and is excluded from mAP/mINP.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{network_forward, ModelConfig, ModelParams};
use crate::preprocess::SilhouetteSequence;

pub const RANKS: [usize; 4] = [1, 5, 10, 20];

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub subject: String,
    pub condition: String,
    pub view: String,
    pub strips: usize,
    pub dim: usize,
    /// `strips * dim` values, strip-major.
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingSet {
    pub entries: Vec<EmbeddingRecord>,
}

impl EmbeddingSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `(S, d)` shared by every entry.
    pub fn dims(&self) -> Result<Option<(usize, usize)>> {
        let Some(first) = self.entries.first() else {
            return Ok(None);
        };
        let sd = (first.strips, first.dim);
        for e in &self.entries {
            if (e.strips, e.dim) != sd || e.values.len() != e.strips * e.dim {
                return Err(Error::shape(
                    "embedding set",
                    &[e.strips, e.dim],
                    &[sd.0, sd.1],
                ));
            }
        }
        Ok(Some(sd))
    }

    pub fn subjects(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.subject.as_str()).collect()
    }

    pub fn filter(&self, f: impl Fn(&EmbeddingRecord) -> bool) -> EmbeddingSet {
        EmbeddingSet {
            entries: self.entries.iter().filter(|e| f(e)).cloned().collect(),
        }
    }
}

/// Embed whole sequences (no clip sampling). Sequences shorter than three
/// frames are skipped and their subjects returned.
pub fn embed_all(
    seqs: &[SilhouetteSequence],
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
) -> Result<(EmbeddingSet, Vec<String>)> {
    let results: Vec<Result<Option<EmbeddingRecord>>> = seqs
        .par_iter()
        .map(|s| {
            if s.len() < 3 {
                return Ok(None);
            }
            let e = network_forward(&s.to_tensor::<f32>()?, params, cfg)?;
            if !e.all_finite() {
                return Err(Error::Divergence { step: 0 });
            }
            Ok(Some(EmbeddingRecord {
                subject: s.subject.clone(),
                condition: s.condition.clone(),
                view: s.view.clone(),
                strips: cfg.strips,
                dim: cfg.embed_dim,
                values: e.into_data(),
            }))
        })
        .collect();
    let mut set = EmbeddingSet::default();
    let mut dropped = Vec::new();
    for (s, r) in seqs.iter().zip(results) {
        match r? {
            Some(e) => set.entries.push(e),
            None => {
                log::warn!(
                    "skipping {}/{}/{}: fewer than 3 frames",
                    s.subject,
                    s.condition,
                    s.view
                );
                dropped.push(format!("{}/{}/{}", s.subject, s.condition, s.view));
            }
        }
    }
    Ok((set, dropped))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DistanceMode {
    /// Euclidean distance between concatenated strip vectors.
    #[default]
    Concat,
    /// Sum over strips of squared strip distances. Ranks identically to
    /// `Concat` since it equals its square.
    StripSum,
}

impl DistanceMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "concat" => Some(DistanceMode::Concat),
            "strip_sum" => Some(DistanceMode::StripSum),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DistanceMode::Concat => "concat",
            DistanceMode::StripSum => "strip_sum",
        }
    }
}

/// Dense row-major `rows x cols` matrix of f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

pub fn distance_matrix(
    probe: &EmbeddingSet,
    gallery: &EmbeddingSet,
    mode: DistanceMode,
) -> Result<Matrix> {
    if let (Some(a), Some(b)) = (probe.dims()?, gallery.dims()?) {
        if a != b {
            return Err(Error::shape("distance_matrix", &[a.0, a.1], &[b.0, b.1]));
        }
    }
    let (rows, cols) = (probe.len(), gallery.len());
    let mut data = vec![0.0; rows * cols];
    data.par_chunks_mut(cols.max(1))
        .enumerate()
        .for_each(|(i, row)| {
            if i >= rows {
                return;
            }
            let p = &probe.entries[i].values;
            for (j, out) in row.iter_mut().enumerate() {
                let g = &gallery.entries[j].values;
                let sq: f64 = p
                    .iter()
                    .zip(g)
                    .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                    .sum();
                *out = match mode {
                    DistanceMode::Concat => sq.sqrt(),
                    DistanceMode::StripSum => sq,
                };
            }
        });
    Ok(Matrix { rows, cols, data })
}

/// Admissible gallery indices of row `i`, sorted by distance then index.
pub fn rank_row(d: &Matrix, i: usize, admissible: impl Fn(usize) -> bool) -> Vec<usize> {
    let row = d.row(i);
    let mut idx: Vec<usize> = (0..d.cols).filter(|&j| admissible(j)).collect();
    idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    idx
}

/// Per-probe retrieval outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    /// 1-based ranks of the positives in the admissible ranking.
    pub positive_ranks: Vec<usize>,
    /// Admissible gallery size; zero means the probe is excluded.
    pub candidates: usize,
}

impl ProbeResult {
    pub fn hit_at(&self, k: usize) -> bool {
        self.positive_ranks.first().is_some_and(|&r| r <= k)
    }

    pub fn average_precision(&self) -> Option<f64> {
        if self.positive_ranks.is_empty() {
            return None;
        }
        let m = self.positive_ranks.len();
        Some(
            self.positive_ranks
                .iter()
                .enumerate()
                .map(|(i, &r)| (i + 1) as f64 / r as f64)
                .sum::<f64>()
                / m as f64,
        )
    }

    pub fn inverse_negative_penalty(&self) -> Option<f64> {
        let last = *self.positive_ranks.last()?;
        Some(self.positive_ranks.len() as f64 / last as f64)
    }
}

pub fn probe_results<L: PartialEq>(
    d: &Matrix,
    probe_labels: &[L],
    gallery_labels: &[L],
    admissible: impl Fn(usize, usize) -> bool + Sync,
) -> Vec<ProbeResult>
where
    L: Sync,
{
    (0..d.rows)
        .into_par_iter()
        .map(|i| {
            let order = rank_row(d, i, |j| admissible(i, j));
            let positive_ranks = order
                .iter()
                .enumerate()
                .filter(|(_, &j)| gallery_labels[j] == probe_labels[i])
                .map(|(r, _)| r + 1)
                .collect();
            ProbeResult {
                positive_ranks,
                candidates: order.len(),
            }
        })
        .collect()
}

/// Fraction of evaluated probes with a positive in the top `k`; probes with
/// no admissible candidate are excluded. `None` if nothing was evaluated.
pub fn rank_k_of(results: &[ProbeResult], k: usize) -> Option<f64> {
    let eval: Vec<&ProbeResult> = results.iter().filter(|r| r.candidates > 0).collect();
    (!eval.is_empty())
        .then(|| eval.iter().filter(|r| r.hit_at(k)).count() as f64 / eval.len() as f64)
}

pub fn map_of(results: &[ProbeResult]) -> Option<f64> {
    mean(results.iter().filter_map(|r| r.average_precision()))
}

pub fn minp_of(results: &[ProbeResult]) -> Option<f64> {
    mean(results.iter().filter_map(|r| r.inverse_negative_penalty()))
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn rank_k<L: PartialEq + Sync>(
    d: &Matrix,
    probe_labels: &[L],
    gallery_labels: &[L],
    k: usize,
) -> Option<f64> {
    rank_k_of(
        &probe_results(d, probe_labels, gallery_labels, |_, _| true),
        k,
    )
}

pub fn mean_average_precision<L: PartialEq + Sync>(
    d: &Matrix,
    probe_labels: &[L],
    gallery_labels: &[L],
) -> Option<f64> {
    map_of(&probe_results(d, probe_labels, gallery_labels, |_, _| true))
}

pub fn mean_inverse_negative_penalty<L: PartialEq + Sync>(
    d: &Matrix,
    probe_labels: &[L],
    gallery_labels: &[L],
) -> Option<f64> {
    minp_of(&probe_results(d, probe_labels, gallery_labels, |_, _| true))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankingReport {
    /// Rank-k for each k in [`RANKS`].
    pub rank: [f64; 4],
    pub map: Option<f64>,
    pub minp: Option<f64>,
    pub probes: usize,
    /// Probes excluded for lack of admissible gallery entries.
    pub excluded: usize,
    /// Evaluated probes whose subject never appears in the gallery.
    pub without_positive: usize,
    /// `(condition, rank-1, probes)`.
    pub per_condition: Vec<(String, f64, usize)>,
    /// `(view, rank-1, probes)`.
    pub per_view: Vec<(String, f64, usize)>,
    /// Top-ranked gallery indices per probe (up to 20) with distances.
    pub top: Vec<Vec<(usize, f64)>>,
}

fn breakdown(results: &[ProbeResult], keys: &[&str]) -> Vec<(String, f64, usize)> {
    let mut groups: BTreeMap<&str, Vec<ProbeResult>> = BTreeMap::new();
    for (r, k) in results.iter().zip(keys) {
        groups.entry(k).or_default().push(r.clone());
    }
    groups
        .into_iter()
        .filter_map(|(k, rs)| {
            let n = rs.iter().filter(|r| r.candidates > 0).count();
            rank_k_of(&rs, 1).map(|v| (k.to_string(), v, n))
        })
        .collect()
}

/// Plain gallery/probe evaluation: every gallery entry is admissible.
pub fn evaluate(
    probe: &EmbeddingSet,
    gallery: &EmbeddingSet,
    mode: DistanceMode,
) -> Result<RankingReport> {
    if gallery.is_empty() {
        return Err(Error::EmptyGallery("gallery has no embeddings".into()));
    }
    let d = distance_matrix(probe, gallery, mode)?;
    let (pl, gl) = (probe.subjects(), gallery.subjects());
    let results = probe_results(&d, &pl, &gl, |_, _| true);
    let mut rank = [0.0; 4];
    for (r, &k) in rank.iter_mut().zip(&RANKS) {
        *r = rank_k_of(&results, k).unwrap_or(0.0);
    }
    let conds: Vec<&str> = probe.entries.iter().map(|e| e.condition.as_str()).collect();
    let views: Vec<&str> = probe.entries.iter().map(|e| e.view.as_str()).collect();
    let top = (0..d.rows)
        .map(|i| {
            rank_row(&d, i, |_| true)
                .into_iter()
                .take(20)
                .map(|j| (j, d.get(i, j)))
                .collect()
        })
        .collect();
    Ok(RankingReport {
        rank,
        map: map_of(&results),
        minp: minp_of(&results),
        probes: probe.len(),
        excluded: results.iter().filter(|r| r.candidates == 0).count(),
        without_positive: results
            .iter()
            .filter(|r| r.candidates > 0 && r.positive_ranks.is_empty())
            .count(),
        per_condition: breakdown(&results, &conds),
        per_view: breakdown(&results, &views),
        top,
    })
}

impl RankingReport {
    pub fn metrics_csv(&self) -> String {
        let f = |v: Option<f64>| v.map_or("NA".to_string(), |v| format!("{v:.6}"));
        format!(
            "rank1,rank5,rank10,rank20,mAP,mINP,probes,excluded,without_positive\n{:.6},{:.6},{:.6},{:.6},{},{},{},{},{}\n",
            self.rank[0],
            self.rank[1],
            self.rank[2],
            self.rank[3],
            f(self.map),
            f(self.minp),
            self.probes,
            self.excluded,
            self.without_positive
        )
    }

    pub fn breakdown_csv(&self) -> String {
        let mut s = String::from("group,key,rank1,probes\n");
        for (k, v, n) in &self.per_condition {
            let _ = writeln!(s, "condition,{k},{v:.6},{n}");
        }
        for (k, v, n) in &self.per_view {
            let _ = writeln!(s, "view,{k},{v:.6},{n}");
        }
        s
    }

    pub fn summary(&self) -> String {
        let pct = |v: f64| v * 100.0;
        let opt = |v: Option<f64>| v.map_or("n/a".into(), |v| format!("{:.2}%", v * 100.0));
        format!(
            "probes {} (excluded {}, without positive {})\nRank-1 {:.2}%  Rank-5 {:.2}%  Rank-10 {:.2}%  Rank-20 {:.2}%\nmAP {}  mINP {}\n",
            self.probes,
            self.excluded,
            self.without_positive,
            pct(self.rank[0]),
            pct(self.rank[1]),
            pct(self.rank[2]),
            pct(self.rank[3]),
            opt(self.map),
            opt(self.minp)
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ViewProtocol {
    #[default]
    Plain,
    ExcludeIdenticalView,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossViewReport {
    pub probe_views: Vec<String>,
    pub gallery_views: Vec<String>,
    /// `cells[p][g]`: Rank-1 of probes of view `p` against gallery view `g`,
    /// `None` when the cell is excluded or empty.
    pub cells: Vec<Vec<Option<f64>>>,
    /// Mean over available cells of each probe view.
    pub per_probe_view: Vec<Option<f64>>,
    pub grand_mean: Option<f64>,
    /// `(condition, grand mean)` computed on that condition's probes only.
    pub per_condition: Vec<(String, Option<f64>)>,
}

impl CrossViewReport {
    pub fn no_valid_pairs(&self) -> bool {
        self.grand_mean.is_none()
    }

    pub fn matrix_csv(&self) -> String {
        let mut s = String::from("probe_view");
        for g in &self.gallery_views {
            let _ = write!(s, ",{g}");
        }
        s.push_str(",mean\n");
        for (p, row) in self.probe_views.iter().zip(&self.cells) {
            s.push_str(p);
            for c in row {
                match c {
                    Some(v) => {
                        let _ = write!(s, ",{v:.6}");
                    }
                    None => s.push_str(",NA"),
                }
            }
            let m = self.per_probe_view[self.probe_views.iter().position(|x| x == p).unwrap()];
            let _ = writeln!(s, ",{}", m.map_or("NA".into(), |v| format!("{v:.6}")));
        }
        s
    }

    pub fn summary(&self) -> String {
        if self.no_valid_pairs() {
            return "no valid pairs\n".into();
        }
        let mut s = format!(
            "cross-view Rank-1 mean {:.2}%\n",
            self.grand_mean.unwrap() * 100.0
        );
        for (c, v) in &self.per_condition {
            match v {
                Some(v) => {
                    let _ = writeln!(s, "  {c}: {:.2}%", v * 100.0);
                }
                None => {
                    let _ = writeln!(s, "  {c}: no valid pairs");
                }
            }
        }
        s
    }
}

fn cross_view_cells(
    d: &Matrix,
    probe: &EmbeddingSet,
    gallery: &EmbeddingSet,
    probe_mask: &[bool],
    pviews: &[String],
    gviews: &[String],
    protocol: ViewProtocol,
) -> (Vec<Vec<Option<f64>>>, Vec<Option<f64>>, Option<f64>) {
    let (pl, gl) = (probe.subjects(), gallery.subjects());
    let mut cells = Vec::new();
    let mut means = Vec::new();
    for pv in pviews {
        let mut row = Vec::new();
        for gv in gviews {
            if protocol == ViewProtocol::ExcludeIdenticalView && pv == gv {
                row.push(None);
                continue;
            }
            let results = probe_results(d, &pl, &gl, |i, j| {
                gallery.entries[j].view == *gv && probe.entries[i].view == *pv
            });
            let sel: Vec<ProbeResult> = results
                .into_iter()
                .enumerate()
                .filter(|(i, _)| probe_mask[*i] && probe.entries[*i].view == *pv)
                .map(|(_, r)| r)
                .collect();
            row.push(rank_k_of(&sel, 1));
        }
        means.push(mean(row.iter().flatten().copied()));
        cells.push(row);
    }
    let grand = mean(means.iter().flatten().copied());
    (cells, means, grand)
}

/// Rank-1 for every (probe view, gallery view) cell, averaged per probe
/// view and overall. Under [`ViewProtocol::ExcludeIdenticalView`] diagonal
/// cells are skipped.
pub fn cross_view_protocol(
    probe: &EmbeddingSet,
    gallery: &EmbeddingSet,
    protocol: ViewProtocol,
    mode: DistanceMode,
) -> Result<CrossViewReport> {
    let d = distance_matrix(probe, gallery, mode)?;
    let uniq = |s: &EmbeddingSet| {
        let mut v: Vec<String> = s.entries.iter().map(|e| e.view.clone()).collect();
        v.sort();
        v.dedup();
        v
    };
    let (pviews, gviews) = (uniq(probe), uniq(gallery));
    let all = vec![true; probe.len()];
    let (cells, per_probe_view, grand_mean) =
        cross_view_cells(&d, probe, gallery, &all, &pviews, &gviews, protocol);
    let mut conds: Vec<String> = probe.entries.iter().map(|e| e.condition.clone()).collect();
    conds.sort();
    conds.dedup();
    let per_condition = conds
        .into_iter()
        .map(|c| {
            let mask: Vec<bool> = probe.entries.iter().map(|e| e.condition == c).collect();
            let (_, _, g) = cross_view_cells(&d, probe, gallery, &mask, &pviews, &gviews, protocol);
            (c, g)
        })
        .collect();
    Ok(CrossViewReport {
        probe_views: pviews,
        gallery_views: gviews,
        cells,
        per_probe_view,
        grand_mean,
        per_condition,
    })
}

/// `subject,condition,view,v_0,...` with 9 significant digits, which
/// round-trips every f32 exactly.
pub fn embeddings_to_csv(set: &EmbeddingSet) -> Result<String> {
    let n = set.dims()?.map_or(0, |(s, d)| s * d);
    let mut out = String::from("subject,condition,view");
    for i in 0..n {
        let _ = write!(out, ",v_{i}");
    }
    out.push('\n');
    for e in &set.entries {
        let _ = write!(out, "{},{},{}", e.subject, e.condition, e.view);
        for v in &e.values {
            let _ = write!(out, ",{v:.8e}");
        }
        out.push('\n');
    }
    Ok(out)
}

/// Parse [`embeddings_to_csv`] output given the strip count.
pub fn embeddings_from_csv(text: &str, strips: usize) -> Result<EmbeddingSet> {
    let bad = |m: String| Error::Decode {
        path: "embeddings".into(),
        reason: m,
    };
    let mut r = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let mut entries = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let values = rec
            .iter()
            .skip(3)
            .map(|v| v.parse::<f32>().map_err(|e| bad(format!("{v}: {e}"))))
            .collect::<Result<Vec<f32>>>()?;
        if strips == 0 || values.len() % strips != 0 {
            return Err(bad(format!(
                "{} values do not split into {strips} strips",
                values.len()
            )));
        }
        entries.push(EmbeddingRecord {
            subject: rec[0].to_string(),
            condition: rec[1].to_string(),
            view: rec[2].to_string(),
            strips,
            dim: values.len() / strips,
            values,
        });
    }
    Ok(EmbeddingSet { entries })
}

pub fn dump_embeddings(set: &EmbeddingSet, path: &Path) -> Result<()> {
    fs::write(path, embeddings_to_csv(set)?).map_err(|e| Error::io(path, e))
}
