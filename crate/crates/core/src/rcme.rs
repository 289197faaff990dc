//! Representative correlation matrix extraction.
//!
//! Rolls a correlation matrix over the return history, measures pairwise
//! Frobenius distances between the matrices, clusters them agglomeratively,
//! and averages each cluster into one representative matrix per market
//! regime. At inference time [`nearest_representative`] maps the current
//! correlation matrix back to its regime.

use std::collections::BinaryHeap;
use std::io::{BufRead, BufReader, Read, Write};

use ndarray::Array2;
use rayon::prelude::*;
use thiserror::Error;

use crate::market_data::{CorrelationMatrix, MarketDataError, ReturnPanel};

#[derive(Debug, Error)]
pub enum RcmeError {
    #[error("dimension mismatch: {0}x{0} vs {1}x{1}")]
    DimensionMismatch(usize, usize),
    #[error("invalid cluster count {k} for {m} matrices")]
    InvalidK { k: usize, m: usize },
    #[error("correlation matrix set needs at least {needed} entries, got {got}")]
    TooFewMatrices { got: usize, needed: usize },
    #[error("cluster {0} is empty")]
    EmptyCluster(usize),
    #[error("artifact format error: {0}")]
    ArtifactFormat(String),
    #[error(transparent)]
    MarketData(#[from] MarketDataError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, RcmeError>;

/// Linkage criterion for the agglomerative clustering step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Linkage {
    Single,
    Complete,
    Average,
}

impl Linkage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Linkage::Single => "single",
            Linkage::Complete => "complete",
            Linkage::Average => "average",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "single" => Some(Linkage::Single),
            "complete" => Some(Linkage::Complete),
            "average" => Some(Linkage::Average),
            _ => None,
        }
    }
}

/// Rolling correlation matrices, one per valid anchor time.
#[derive(Debug, Clone)]
pub struct CorrelationMatrixSet {
    pub entries: Vec<CorrelationMatrix>,
    pub anchor_times: Vec<usize>,
    pub window: usize,
    pub stride: usize,
}

impl CorrelationMatrixSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.entries.first().map_or(0, |m| m.dim())
    }
}

/// Pairwise Frobenius distances between the matrices of a set.
#[derive(Debug, Clone)]
pub struct CorrelationDistanceMatrix {
    pub values: Array2<f64>,
}

impl CorrelationDistanceMatrix {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }
}

/// Flat clustering obtained by cutting the dendrogram at `k` clusters.
///
/// Labels are normalized so that clusters are numbered by their smallest
/// member index; the partition is therefore invariant under permutations of
/// the input order.
#[derive(Debug, Clone)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub k: usize,
    /// Per-cluster member point indices (positions within the CMS).
    pub member_indices: Vec<Vec<usize>>,
}

/// One merge of the agglomeration sequence. Clusters are named by their
/// smallest original member index.
#[derive(Debug, Clone, Copy)]
pub struct MergeStep {
    pub left: usize,
    pub right: usize,
    pub height: f64,
    pub merged_size: usize,
}

/// The full agglomeration sequence (m - 1 merges).
#[derive(Debug, Clone)]
pub struct Dendrogram {
    pub merges: Vec<MergeStep>,
    pub n_points: usize,
}

/// Per-cluster mean correlation matrices plus the anchor times that formed
/// each cluster (used later for regime-conditional moment estimation).
#[derive(Debug, Clone)]
pub struct RepresentativeSet {
    pub matrices: Vec<CorrelationMatrix>,
    pub member_times: Vec<Vec<usize>>,
    pub window: usize,
    pub stride: usize,
    pub linkage: Linkage,
}

impl RepresentativeSet {
    pub fn k(&self) -> usize {
        self.matrices.len()
    }

    pub fn dim(&self) -> usize {
        self.matrices.first().map_or(0, |m| m.dim())
    }
}

/// Builds the correlation matrix set: one matrix for every anchor time
/// `t in [window-1, len-1]`, stepping by `stride`.
pub fn build_cms(rp: &ReturnPanel, window: usize, stride: usize) -> Result<CorrelationMatrixSet> {
    let stride = stride.max(1);
    if rp.len() < window {
        return Err(MarketDataError::InsufficientHistory {
            t: rp.len(),
            needed: window,
        }
        .into());
    }
    let anchor_times: Vec<usize> = (window - 1..rp.len()).step_by(stride).collect();
    let entries = anchor_times
        .par_iter()
        .map(|&t| crate::market_data::rolling_correlation(rp, t, window))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(CorrelationMatrixSet {
        entries,
        anchor_times,
        window,
        stride,
    })
}

/// Frobenius norm of the difference of two correlation matrices.
pub fn correlation_distance(a: &CorrelationMatrix, b: &CorrelationMatrix) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(RcmeError::DimensionMismatch(a.dim(), b.dim()));
    }
    let mut sum = 0.0;
    for (x, y) in a.values.iter().zip(b.values.iter()) {
        let d = x - y;
        sum += d * d;
    }
    Ok(sum.sqrt())
}

/// Pairwise distance matrix over a correlation matrix set. The upper triangle
/// is computed (rows in parallel) and mirrored, so the result is exactly
/// symmetric with a zero diagonal.
pub fn build_cmdm(cms: &CorrelationMatrixSet) -> Result<CorrelationDistanceMatrix> {
    let m = cms.len();
    if m < 2 {
        return Err(RcmeError::TooFewMatrices { got: m, needed: 2 });
    }
    let rows: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| {
            (i + 1..m)
                .map(|j| correlation_distance(&cms.entries[i], &cms.entries[j]).expect("same dim"))
                .collect()
        })
        .collect();
    let mut values = Array2::<f64>::zeros((m, m));
    for (i, row) in rows.into_iter().enumerate() {
        for (off, d) in row.into_iter().enumerate() {
            let j = i + 1 + off;
            values[[i, j]] = d;
            values[[j, i]] = d;
        }
    }
    Ok(CorrelationDistanceMatrix { values })
}

/// Candidate merge pair for the agglomeration heap; ordered by
/// (distance, lower id, higher id) so ties resolve to the lowest pair.
#[derive(PartialEq)]
struct Candidate {
    dist: f64,
    a: usize,
    b: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // BinaryHeap is a max-heap; reverse so the smallest candidate pops first.
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.a.cmp(&self.a))
            .then_with(|| other.b.cmp(&self.b))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Runs the full agglomeration (Lance-Williams updates, lazy-deletion heap).
/// Active clusters are named by their smallest original member index.
pub fn agglomerate(cmdm: &CorrelationDistanceMatrix, linkage: Linkage) -> Dendrogram {
    let m = cmdm.len();
    let mut dist = cmdm.values.clone();
    let mut active = vec![true; m];
    let mut size = vec![1usize; m];
    let mut heap = BinaryHeap::with_capacity(m * (m.saturating_sub(1)) / 2);
    for i in 0..m {
        for j in (i + 1)..m {
            heap.push(Candidate {
                dist: dist[[i, j]],
                a: i,
                b: j,
            });
        }
    }
    let mut merges = Vec::with_capacity(m.saturating_sub(1));
    let mut remaining = m;
    while remaining > 1 {
        let cand = heap.pop().expect("candidates remain while clusters do");
        // Stale entries reference deactivated clusters or superseded distances.
        if !active[cand.a] || !active[cand.b] || dist[[cand.a, cand.b]] != cand.dist {
            continue;
        }
        let (keep, drop) = (cand.a, cand.b);
        let (na, nb) = (size[keep] as f64, size[drop] as f64);
        active[drop] = false;
        for c in 0..m {
            if !active[c] || c == keep {
                continue;
            }
            let dac = dist[[keep, c]];
            let dbc = dist[[drop, c]];
            let merged = match linkage {
                Linkage::Single => dac.min(dbc),
                Linkage::Complete => dac.max(dbc),
                Linkage::Average => (na * dac + nb * dbc) / (na + nb),
            };
            dist[[keep, c]] = merged;
            dist[[c, keep]] = merged;
            let (lo, hi) = if keep < c { (keep, c) } else { (c, keep) };
            heap.push(Candidate {
                dist: merged,
                a: lo,
                b: hi,
            });
        }
        size[keep] += size[drop];
        merges.push(MergeStep {
            left: keep,
            right: drop,
            height: cand.dist,
            merged_size: size[keep],
        });
        remaining -= 1;
    }
    Dendrogram {
        merges,
        n_points: m,
    }
}

impl Dendrogram {
    /// Cuts the dendrogram at exactly `k` clusters by replaying the first
    /// `n_points - k` merges.
    pub fn cut(&self, k: usize) -> Result<ClusterAssignment> {
        let m = self.n_points;
        if k == 0 || k > m {
            return Err(RcmeError::InvalidK { k, m });
        }
        let mut parent: Vec<usize> = (0..m).collect();
        fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for step in self.merges.iter().take(m - k) {
            let ra = find(&mut parent, step.left);
            let rb = find(&mut parent, step.right);
            // Root at the smaller index so cluster names stay canonical.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            parent[hi] = lo;
        }
        let roots: Vec<usize> = (0..m).map(|i| find(&mut parent, i)).collect();
        let mut ordered_roots: Vec<usize> = roots.clone();
        ordered_roots.sort_unstable();
        ordered_roots.dedup();
        debug_assert_eq!(ordered_roots.len(), k);
        let mut labels = vec![0usize; m];
        let mut member_indices = vec![Vec::new(); k];
        for (i, &r) in roots.iter().enumerate() {
            let label = ordered_roots.binary_search(&r).expect("root present");
            labels[i] = label;
            member_indices[label].push(i);
        }
        Ok(ClusterAssignment {
            labels,
            k,
            member_indices,
        })
    }

    /// Merge heights of the last `count` merges, tallest last. The jump
    /// structure here guides the choice of the regime count.
    pub fn top_heights(&self, count: usize) -> Vec<f64> {
        let n = self.merges.len();
        self.merges[n.saturating_sub(count)..]
            .iter()
            .map(|m| m.height)
            .collect()
    }
}

/// Agglomerative clustering on the precomputed distance matrix, cut at
/// exactly `k` clusters. Merge-distance ties break toward the lowest pair
/// indices, so the assignment is deterministic.
pub fn cluster(
    cmdm: &CorrelationDistanceMatrix,
    k: usize,
    linkage: Linkage,
) -> Result<ClusterAssignment> {
    if k == 0 || k > cmdm.len() {
        return Err(RcmeError::InvalidK { k, m: cmdm.len() });
    }
    agglomerate(cmdm, linkage).cut(k)
}

/// Element-wise mean of each cluster's member matrices, diagonal re-set to
/// exactly 1 after averaging.
pub fn representative_matrices(
    ca: &ClusterAssignment,
    cms: &CorrelationMatrixSet,
    linkage: Linkage,
) -> Result<RepresentativeSet> {
    let n = cms.dim();
    let mut matrices = Vec::with_capacity(ca.k);
    let mut member_times = Vec::with_capacity(ca.k);
    for (cluster_idx, members) in ca.member_indices.iter().enumerate() {
        if members.is_empty() {
            return Err(RcmeError::EmptyCluster(cluster_idx));
        }
        let mut acc = Array2::<f64>::zeros((n, n));
        for &p in members {
            acc += &cms.entries[p].values;
        }
        acc /= members.len() as f64;
        for i in 0..n {
            acc[[i, i]] = 1.0;
        }
        matrices.push(CorrelationMatrix::new(acc, cms.window, 0)?);
        member_times.push(members.iter().map(|&p| cms.anchor_times[p]).collect());
    }
    Ok(RepresentativeSet {
        matrices,
        member_times,
        window: cms.window,
        stride: cms.stride,
        linkage,
    })
}

/// Index of the representative closest (in Frobenius distance) to the
/// current correlation matrix; ties break to the lowest index.
pub fn nearest_representative(
    current: &CorrelationMatrix,
    rs: &RepresentativeSet,
) -> Result<usize> {
    let mut best = 0usize;
    let mut best_dist = f64::INFINITY;
    for (i, rep) in rs.matrices.iter().enumerate() {
        let d = correlation_distance(current, rep)?;
        if d < best_dist {
            best_dist = d;
            best = i;
        }
    }
    Ok(best)
}

const ARTIFACT_HEADER: &str = "repset v1";

impl RepresentativeSet {
    /// Writes the versioned text artifact. Format:
    ///
    /// ```text
    /// repset v1
    /// n <assets> k <reps> window <days> stride <days> linkage <name>
    /// rep <index>
    /// members <t0> <t1> ...
    /// row <v0> <v1> ...        (n rows, row-major)
    /// ```
    ///
    /// Floats use Rust's shortest round-trip formatting, so a write/read
    /// cycle is bit-exact.
    pub fn write_text(&self, mut w: impl Write) -> Result<()> {
        let n = self.dim();
        writeln!(w, "{ARTIFACT_HEADER}")?;
        writeln!(
            w,
            "n {} k {} window {} stride {} linkage {}",
            n,
            self.k(),
            self.window,
            self.stride,
            self.linkage.as_str()
        )?;
        for (idx, (mat, times)) in self.matrices.iter().zip(&self.member_times).enumerate() {
            writeln!(w, "rep {idx}")?;
            let times: Vec<String> = times.iter().map(|t| t.to_string()).collect();
            writeln!(w, "members {}", times.join(" "))?;
            for i in 0..n {
                let row: Vec<String> = (0..n).map(|j| mat.values[[i, j]].to_string()).collect();
                writeln!(w, "row {}", row.join(" "))?;
            }
        }
        Ok(())
    }

    pub fn write_file(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_text(std::io::BufWriter::new(file))
    }

    pub fn read_text(r: impl Read) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .transpose()?
                .ok_or_else(|| RcmeError::ArtifactFormat("unexpected end of file".into()))
        };
        let header = next()?;
        if header.trim() != ARTIFACT_HEADER {
            return Err(RcmeError::ArtifactFormat(format!(
                "bad header `{header}`, expected `{ARTIFACT_HEADER}`"
            )));
        }
        let meta = next()?;
        let fields: Vec<&str> = meta.split_whitespace().collect();
        if fields.len() != 10
            || fields[0] != "n"
            || fields[2] != "k"
            || fields[4] != "window"
            || fields[6] != "stride"
            || fields[8] != "linkage"
        {
            return Err(RcmeError::ArtifactFormat(format!("bad meta line `{meta}`")));
        }
        let parse_usize = |s: &str, what: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| RcmeError::ArtifactFormat(format!("bad {what} `{s}`")))
        };
        let n = parse_usize(fields[1], "n")?;
        let k = parse_usize(fields[3], "k")?;
        let window = parse_usize(fields[5], "window")?;
        let stride = parse_usize(fields[7], "stride")?;
        let linkage = Linkage::parse(fields[9])
            .ok_or_else(|| RcmeError::ArtifactFormat(format!("bad linkage `{}`", fields[9])))?;
        let mut matrices = Vec::with_capacity(k);
        let mut member_times = Vec::with_capacity(k);
        for idx in 0..k {
            let rep_line = next()?;
            if rep_line.trim() != format!("rep {idx}") {
                return Err(RcmeError::ArtifactFormat(format!(
                    "expected `rep {idx}`, got `{rep_line}`"
                )));
            }
            let members_line = next()?;
            let rest = members_line
                .strip_prefix("members")
                .ok_or_else(|| RcmeError::ArtifactFormat(format!("bad line `{members_line}`")))?;
            let times: Vec<usize> = rest
                .split_whitespace()
                .map(|s| parse_usize(s, "member time"))
                .collect::<Result<_>>()?;
            if times.is_empty() {
                return Err(RcmeError::EmptyCluster(idx));
            }
            let mut values = Array2::<f64>::zeros((n, n));
            for i in 0..n {
                let row_line = next()?;
                let rest = row_line
                    .strip_prefix("row")
                    .ok_or_else(|| RcmeError::ArtifactFormat(format!("bad line `{row_line}`")))?;
                let row: Vec<f64> = rest
                    .split_whitespace()
                    .map(|s| {
                        s.parse::<f64>()
                            .map_err(|_| RcmeError::ArtifactFormat(format!("bad value `{s}`")))
                    })
                    .collect::<Result<_>>()?;
                if row.len() != n {
                    return Err(RcmeError::ArtifactFormat(format!(
                        "row has {} values, expected {n}",
                        row.len()
                    )));
                }
                for (j, v) in row.into_iter().enumerate() {
                    values[[i, j]] = v;
                }
            }
            matrices.push(CorrelationMatrix::new(values, window, 0)?);
            member_times.push(times);
        }
        Ok(Self {
            matrices,
            member_times,
            window,
            stride,
            linkage,
        })
    }

    pub fn read_file(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_text(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::synthetic_dates;
    use chrono::NaiveDate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn corr(values: Array2<f64>) -> CorrelationMatrix {
        CorrelationMatrix::new(values, 60, 0).unwrap()
    }

    fn corr2(rho: f64) -> CorrelationMatrix {
        corr(ndarray::arr2(&[[1.0, rho], [rho, 1.0]]))
    }

    fn random_corr(n: usize, rng: &mut ChaCha8Rng) -> CorrelationMatrix {
        // Gram matrix of random unit vectors: a valid correlation matrix.
        let dim = n + 2;
        let vecs: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect();
        let mut values = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            values[[i, i]] = 1.0;
            for j in (i + 1)..n {
                let dot: f64 = vecs[i].iter().zip(&vecs[j]).map(|(a, b)| a * b).sum();
                let dot = dot.clamp(-1.0, 1.0);
                values[[i, j]] = dot;
                values[[j, i]] = dot;
            }
        }
        corr(values)
    }

    fn random_panel(t: usize, n: usize, seed: u64) -> ReturnPanel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let returns = Array2::from_shape_fn((t, n), |_| rng.random_range(-0.02..0.02));
        ReturnPanel::from_returns(
            synthetic_dates(NaiveDate::from_ymd_opt(2012, 1, 2).unwrap(), t),
            returns,
        )
        .unwrap()
    }

    #[test]
    fn cms_counts() {
        let rp = random_panel(120, 2, 1);
        assert_eq!(build_cms(&rp, 60, 1).unwrap().len(), 61);
        assert_eq!(build_cms(&rp, 60, 5).unwrap().len(), 13);
        let rp = random_panel(60, 2, 2);
        assert_eq!(build_cms(&rp, 60, 1).unwrap().len(), 1);
    }

    #[test]
    fn distance_zero_and_closed_form() {
        let a = corr2(0.5);
        assert_eq!(correlation_distance(&a, &a).unwrap(), 0.0);
        let b = corr2(1.0);
        let c = corr2(0.0);
        // two off-diagonal entries differ by 1 each
        assert!((correlation_distance(&b, &c).unwrap() - 2.0_f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn distance_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a = random_corr(5, &mut rng);
            let b = random_corr(5, &mut rng);
            let mut sum = 0.0;
            for k in 0..5 {
                for l in 0..5 {
                    let d: f64 = a.values[[k, l]] - b.values[[k, l]];
                    sum += d.abs().powi(2);
                }
            }
            let oracle = sum.sqrt();
            assert!((correlation_distance(&a, &b).unwrap() - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn distance_dimension_mismatch() {
        let a = corr2(0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = random_corr(3, &mut rng);
        assert!(matches!(
            correlation_distance(&a, &b),
            Err(RcmeError::DimensionMismatch(2, 3))
        ));
    }

    fn cms_of(entries: Vec<CorrelationMatrix>) -> CorrelationMatrixSet {
        let anchor_times = (0..entries.len()).map(|i| 59 + i).collect();
        CorrelationMatrixSet {
            entries,
            anchor_times,
            window: 60,
            stride: 1,
        }
    }

    #[test]
    fn cmdm_structure_and_oracle() {
        let a = corr2(0.3);
        let cmdm = build_cmdm(&cms_of(vec![a.clone(), a.clone()])).unwrap();
        assert_eq!(cmdm.values, Array2::zeros((2, 2)));

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let entries: Vec<CorrelationMatrix> = (0..10).map(|_| random_corr(4, &mut rng)).collect();
        let cms = cms_of(entries.clone());
        let cmdm = build_cmdm(&cms).unwrap();
        for i in 0..10 {
            assert_eq!(cmdm.values[[i, i]], 0.0);
            for j in 0..10 {
                assert_eq!(cmdm.values[[i, j]], cmdm.values[[j, i]]);
                let oracle = correlation_distance(&entries[i], &entries[j]).unwrap();
                assert!((cmdm.values[[i, j]] - oracle).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cluster_degenerate_cuts() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cms = cms_of((0..6).map(|_| random_corr(3, &mut rng)).collect());
        let cmdm = build_cmdm(&cms).unwrap();
        let all_own = cluster(&cmdm, 6, Linkage::Average).unwrap();
        assert_eq!(all_own.labels, vec![0, 1, 2, 3, 4, 5]);
        let one = cluster(&cmdm, 1, Linkage::Average).unwrap();
        assert!(one.labels.iter().all(|&l| l == 0));
        assert!(matches!(
            cluster(&cmdm, 0, Linkage::Average),
            Err(RcmeError::InvalidK { .. })
        ));
        assert!(matches!(
            cluster(&cmdm, 7, Linkage::Average),
            Err(RcmeError::InvalidK { .. })
        ));
    }

    #[test]
    fn cluster_recovers_planted_partition() {
        // Group A: off-diagonal near +0.9; group B: near -0.9. Intra-group
        // distances are ~0.01, inter-group ~2.5.
        let mut entries = Vec::new();
        let mut expect = Vec::new();
        for i in 0..8 {
            let jitter = 1e-3 * i as f64;
            if i % 2 == 0 {
                entries.push(corr2(0.9 - jitter));
                expect.push(0usize);
            } else {
                entries.push(corr2(-0.9 + jitter));
                expect.push(1usize);
            }
        }
        let cmdm = build_cmdm(&cms_of(entries)).unwrap();
        for linkage in [Linkage::Single, Linkage::Complete, Linkage::Average] {
            let ca = cluster(&cmdm, 2, linkage).unwrap();
            assert_eq!(ca.labels, expect, "{linkage:?}");
        }
    }

    #[test]
    fn cluster_is_deterministic_and_permutation_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let entries: Vec<CorrelationMatrix> = (0..12).map(|_| random_corr(3, &mut rng)).collect();
        let cms = cms_of(entries.clone());
        let cmdm = build_cmdm(&cms).unwrap();
        let a = cluster(&cmdm, 4, Linkage::Average).unwrap();
        let b = cluster(&cmdm, 4, Linkage::Average).unwrap();
        assert_eq!(a.labels, b.labels);

        // Reverse the set: the partition (as a set of sets of identities)
        // must be unchanged.
        let mut reversed = entries.clone();
        reversed.reverse();
        let cmdm_rev = build_cmdm(&cms_of(reversed)).unwrap();
        let c = cluster(&cmdm_rev, 4, Linkage::Average).unwrap();
        let as_partition = |labels: &[usize], reverse: bool| {
            let m = labels.len();
            let mut groups: Vec<Vec<usize>> = vec![Vec::new(); 4];
            for (i, &l) in labels.iter().enumerate() {
                let id = if reverse { m - 1 - i } else { i };
                groups[l].push(id);
            }
            for g in &mut groups {
                g.sort_unstable();
            }
            groups.sort();
            groups
        };
        assert_eq!(as_partition(&a.labels, false), as_partition(&c.labels, true));
    }

    #[test]
    fn representatives_average_members() {
        let single = cms_of(vec![corr2(0.37)]);
        let ca = ClusterAssignment {
            labels: vec![0],
            k: 1,
            member_indices: vec![vec![0]],
        };
        let rs = representative_matrices(&ca, &single, Linkage::Average).unwrap();
        assert_eq!(rs.matrices[0].values, single.entries[0].values);

        let pair = cms_of(vec![corr2(0.2), corr2(0.6)]);
        let ca = ClusterAssignment {
            labels: vec![0, 0],
            k: 1,
            member_indices: vec![vec![0, 1]],
        };
        let rs = representative_matrices(&ca, &pair, Linkage::Average).unwrap();
        assert!((rs.matrices[0].values[[0, 1]] - 0.4).abs() < 1e-15);
        assert_eq!(rs.matrices[0].values[[0, 0]], 1.0);
    }

    #[test]
    fn representatives_match_entrywise_mean_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let entries: Vec<CorrelationMatrix> = (0..7).map(|_| random_corr(4, &mut rng)).collect();
        let cms = cms_of(entries.clone());
        let ca = ClusterAssignment {
            labels: vec![0; 7],
            k: 1,
            member_indices: vec![(0..7).collect()],
        };
        let rs = representative_matrices(&ca, &cms, Linkage::Average).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let mean: f64 =
                    entries.iter().map(|e| e.values[[i, j]]).sum::<f64>() / 7.0;
                let expect = if i == j { 1.0 } else { mean };
                assert!((rs.matrices[0].values[[i, j]] - expect).abs() < 1e-12);
            }
        }
        // symmetry and bounds survive averaging
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(rs.matrices[0].values[[i, j]], rs.matrices[0].values[[j, i]]);
                assert!(rs.matrices[0].values[[i, j]].abs() <= 1.0);
            }
        }
    }

    #[test]
    fn representatives_of_psd_members_stay_psd() {
        // Convex combinations of PSD matrices are PSD; check via the smallest
        // eigenvalue of the average (power iteration on shifted matrix).
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let entries: Vec<CorrelationMatrix> = (0..5).map(|_| random_corr(4, &mut rng)).collect();
        let cms = cms_of(entries);
        let ca = ClusterAssignment {
            labels: vec![0; 5],
            k: 1,
            member_indices: vec![(0..5).collect()],
        };
        let rs = representative_matrices(&ca, &cms, Linkage::Average).unwrap();
        let a = &rs.matrices[0].values;
        // smallest eigenvalue via inverse shift: eigenvalues of (c*I - A) are
        // c - lambda; power-iterate on it to find max -> gives min lambda of A.
        let n = 4;
        let c = 10.0;
        let mut v = vec![1.0_f64; n];
        for _ in 0..500 {
            let mut next = vec![0.0; n];
            for i in 0..n {
                for j in 0..n {
                    let m = if i == j { c - a[[i, j]] } else { -a[[i, j]] };
                    next[i] += m * v[j];
                }
            }
            let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            v = next.into_iter().map(|x| x / norm).collect();
        }
        let mut rayleigh = 0.0;
        for i in 0..n {
            for j in 0..n {
                let m = if i == j { c - a[[i, j]] } else { -a[[i, j]] };
                rayleigh += v[i] * m * v[j];
            }
        }
        let min_eig = c - rayleigh;
        assert!(min_eig >= -1e-10, "min eigenvalue {min_eig}");
    }

    #[test]
    fn nearest_representative_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let reps: Vec<CorrelationMatrix> = (0..5).map(|_| random_corr(3, &mut rng)).collect();
        let rs = RepresentativeSet {
            matrices: reps.clone(),
            member_times: vec![vec![59]; 5],
            window: 60,
            stride: 1,
            linkage: Linkage::Average,
        };
        assert_eq!(nearest_representative(&reps[2], &rs).unwrap(), 2);
        for _ in 0..10 {
            let probe = random_corr(3, &mut rng);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (i, r) in reps.iter().enumerate() {
                let d = correlation_distance(&probe, r).unwrap();
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            assert_eq!(nearest_representative(&probe, &rs).unwrap(), best);
        }
    }

    #[test]
    fn artifact_round_trip_is_exact() {
        let rp = random_panel(140, 3, 31);
        let cms = build_cms(&rp, 60, 2).unwrap();
        let cmdm = build_cmdm(&cms).unwrap();
        let ca = cluster(&cmdm, 3, Linkage::Complete).unwrap();
        let rs = representative_matrices(&ca, &cms, Linkage::Complete).unwrap();
        let mut buf = Vec::new();
        rs.write_text(&mut buf).unwrap();
        let back = RepresentativeSet::read_text(&buf[..]).unwrap();
        assert_eq!(back.k(), rs.k());
        assert_eq!(back.window, rs.window);
        assert_eq!(back.stride, rs.stride);
        assert_eq!(back.linkage, rs.linkage);
        assert_eq!(back.member_times, rs.member_times);
        for (a, b) in back.matrices.iter().zip(&rs.matrices) {
            assert_eq!(a.values, b.values);
        }
        let mut buf2 = Vec::new();
        back.write_text(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }
}
