//! Discrete allocation action extraction.
//!
//! A reference return series is labeled up/down by its trailing k-day mean,
//! maximal runs become market intervals, and candidate weight vectors from a
//! basis-point grid are scored on each interval with the volatility-penalized
//! measure `f(mu, sigma, k) = mu - k * sigma`. The top scorers per interval,
//! de-duplicated across intervals, form the agent's action set.
//!
//! Weights are held in integer basis points throughout, so "sums to 1" is an
//! exact statement, never a floating-point tolerance.

use std::collections::{BTreeSet, HashSet};
use std::io::{BufRead, BufReader, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::market_data::ReturnPanel;

/// Whole portfolio expressed in basis points.
pub const TOTAL_BP: u32 = 10_000;

#[derive(Debug, Error)]
pub enum ActionSpaceError {
    #[error("insufficient history: series of length {len} needs at least {needed}")]
    InsufficientHistory { len: usize, needed: usize },
    #[error("no up/down intervals found (relax alpha or min_len)")]
    NoIntervalsFound,
    #[error("grid step {0} bp must be positive and divide {TOTAL_BP}")]
    BadGridStep(u32),
    #[error("grid too fine: {levels} levels across {n} assets overflows the vector count")]
    GridTooFine { levels: u64, n: usize },
    #[error("invalid sample fraction {0}; need 0 < fraction <= 1")]
    BadFraction(f64),
    #[error("artifact format error: {0}")]
    ArtifactFormat(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ActionSpaceError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrendLabel {
    Up,
    Down,
    Neutral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Up,
    Down,
}

/// Per-time up/down/neutral labels; defined from `first_t = k_window - 1`.
#[derive(Debug, Clone)]
pub struct UpDownLabeling {
    labels: Vec<TrendLabel>,
    pub k_window: usize,
    pub alpha: f64,
}

impl UpDownLabeling {
    pub fn first_t(&self) -> usize {
        self.k_window - 1
    }

    pub fn last_t(&self) -> usize {
        self.first_t() + self.labels.len() - 1
    }

    pub fn label_at(&self, t: usize) -> Option<TrendLabel> {
        t.checked_sub(self.first_t())
            .and_then(|i| self.labels.get(i).copied())
    }
}

/// Maximal run of same-direction labels, inclusive time bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MarketInterval {
    pub start: usize,
    pub end: usize,
    pub direction: Direction,
}

impl MarketInterval {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }
}

/// Long-only grid allocation; entries sum to exactly [`TOTAL_BP`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct WeightVector {
    pub weights_bp: Vec<u32>,
}

impl WeightVector {
    pub fn fractions(&self) -> Vec<f64> {
        self.weights_bp
            .iter()
            .map(|&w| w as f64 / TOTAL_BP as f64)
            .collect()
    }
}

/// Where an action came from and how it scored.
#[derive(Debug, Clone)]
pub struct ActionProvenance {
    pub interval_index: usize,
    pub interval: MarketInterval,
    pub score: f64,
    pub rank: u64,
}

/// Ordered, de-duplicated action list with provenance.
#[derive(Debug, Clone)]
pub struct ActionSet {
    pub actions: Vec<WeightVector>,
    pub provenance: Vec<ActionProvenance>,
    pub n_assets: usize,
    pub grid_step_bp: u32,
}

impl ActionSet {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Implicit description of the grid-constrained weight-vector set
/// `{w : w_i in {0, step, ..., TOTAL_BP}, sum w_i = TOTAL_BP}` with random
/// access by enumeration rank and no materialization.
#[derive(Debug, Clone)]
pub struct WeightGrid {
    pub grid_step_bp: u32,
    pub n_assets: usize,
    /// Budget in grid units: TOTAL_BP / grid_step_bp.
    pub levels: u64,
    size: u64,
}

/// `C(a, b)` with overflow detection against the 2^63 size cap.
fn binomial_checked(a: u64, b: u64) -> Option<u128> {
    let b = b.min(a - b.min(a));
    let mut acc: u128 = 1;
    for i in 1..=b {
        acc = acc.checked_mul((a - b + i) as u128)?;
        acc /= i as u128; // exact at every step for binomials
        if acc > u128::from(u64::MAX) {
            return None;
        }
    }
    Some(acc)
}

/// Number of compositions of `budget` into `parts` non-negative parts.
fn compositions(budget: u64, parts: u64) -> Option<u128> {
    if parts == 0 {
        return Some(u128::from(budget == 0));
    }
    binomial_checked(budget + parts - 1, parts - 1)
}

/// Builds the implicit weight-vector set for `n` assets on a `grid_step`
/// basis-point grid. Size is `C(levels + n - 1, n - 1)`.
pub fn weight_grid_vectors(grid_step_bp: u32, n: usize) -> Result<WeightGrid> {
    if grid_step_bp == 0 || TOTAL_BP % grid_step_bp != 0 {
        return Err(ActionSpaceError::BadGridStep(grid_step_bp));
    }
    let levels = u64::from(TOTAL_BP / grid_step_bp);
    let size = compositions(levels, n as u64)
        .filter(|&s| s < (1u128 << 63))
        .ok_or(ActionSpaceError::GridTooFine { levels, n })?;
    Ok(WeightGrid {
        grid_step_bp,
        n_assets: n,
        levels,
        size: size as u64,
    })
}

impl WeightGrid {
    pub fn size(&self) -> u64 {
        self.size
    }

    /// Vector at `rank` in ascending lexicographic order of the weights.
    /// Asking past the end is a caller bug.
    pub fn unrank(&self, rank: u64) -> WeightVector {
        assert!(rank < self.size, "rank {rank} out of {}", self.size);
        let n = self.n_assets;
        let mut weights_bp = vec![0u32; n];
        let mut remaining = self.levels;
        let mut rank = u128::from(rank);
        for pos in 0..n - 1 {
            let parts_after = (n - pos - 1) as u64;
            let mut v = 0u64;
            loop {
                let count = compositions(remaining - v, parts_after)
                    .expect("sub-counts bounded by validated total");
                if rank < count {
                    break;
                }
                rank -= count;
                v += 1;
            }
            weights_bp[pos] = (v * u64::from(self.grid_step_bp)) as u32;
            remaining -= v;
        }
        weights_bp[n - 1] = (remaining * u64::from(self.grid_step_bp)) as u32;
        WeightVector { weights_bp }
    }

    /// Enumeration rank of a vector (inverse of [`WeightGrid::unrank`]).
    pub fn rank_of(&self, w: &WeightVector) -> u64 {
        let n = self.n_assets;
        let mut remaining = self.levels;
        let mut rank: u128 = 0;
        for pos in 0..n - 1 {
            let parts_after = (n - pos - 1) as u64;
            let v = u64::from(w.weights_bp[pos]) / u64::from(self.grid_step_bp);
            for u in 0..v {
                rank += compositions(remaining - u, parts_after).expect("bounded");
            }
            remaining -= v;
        }
        rank as u64
    }
}

/// Labels each time by the trailing `k`-day mean of the reference returns:
/// Up at `>= alpha`, Down at `<= -alpha`, Neutral between.
pub fn updown_points(ref_returns: &[f64], k: usize, alpha: f64) -> Result<UpDownLabeling> {
    if k == 0 || ref_returns.len() < k {
        return Err(ActionSpaceError::InsufficientHistory {
            len: ref_returns.len(),
            needed: k.max(1),
        });
    }
    let mut labels = Vec::with_capacity(ref_returns.len() - k + 1);
    let mut window_sum: f64 = ref_returns[..k].iter().sum();
    let mut push = |sum: f64| {
        let mean = sum / k as f64;
        labels.push(if mean >= alpha {
            TrendLabel::Up
        } else if mean <= -alpha {
            TrendLabel::Down
        } else {
            TrendLabel::Neutral
        });
    };
    push(window_sum);
    for t in k..ref_returns.len() {
        window_sum += ref_returns[t] - ref_returns[t - k];
        push(window_sum);
    }
    Ok(UpDownLabeling {
        labels,
        k_window: k,
        alpha,
    })
}

/// Maximal runs of identical non-Neutral labels at least `min_len` long.
pub fn updown_intervals(l: &UpDownLabeling, min_len: usize) -> Result<Vec<MarketInterval>> {
    let min_len = min_len.max(1);
    let mut intervals = Vec::new();
    let mut run_start: Option<(usize, TrendLabel)> = None;
    let flush = |intervals: &mut Vec<MarketInterval>, start: usize, end: usize, label: TrendLabel| {
        if end - start + 1 >= min_len {
            let direction = match label {
                TrendLabel::Up => Direction::Up,
                TrendLabel::Down => Direction::Down,
                TrendLabel::Neutral => return,
            };
            intervals.push(MarketInterval {
                start,
                end,
                direction,
            });
        }
    };
    for (i, &label) in l.labels.iter().enumerate() {
        let t = l.first_t() + i;
        match run_start {
            Some((start, run_label)) if run_label == label => {
                let _ = start; // run continues
            }
            Some((start, run_label)) => {
                flush(&mut intervals, start, t - 1, run_label);
                run_start = Some((t, label));
            }
            None => run_start = Some((t, label)),
        }
    }
    if let Some((start, run_label)) = run_start {
        flush(&mut intervals, start, l.last_t(), run_label);
    }
    if intervals.is_empty() {
        return Err(ActionSpaceError::NoIntervalsFound);
    }
    Ok(intervals)
}

/// Sample-size rule: `min(|set|, max(floor, ceil(fraction * |set|)))`.
fn sample_size(total: u64, fraction: f64, floor: usize) -> Result<u64> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(ActionSpaceError::BadFraction(fraction));
    }
    let by_fraction = (fraction * total as f64).ceil() as u64;
    Ok(total.min(by_fraction.max(floor as u64)))
}

/// Uniform without-replacement sample of enumeration ranks, ascending.
pub fn sample_ranks(grid: &WeightGrid, fraction: f64, floor: usize, seed: u64) -> Result<Vec<u64>> {
    let total = grid.size();
    let target = sample_size(total, fraction, floor)?;
    if target == total {
        return Ok((0..total).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = BTreeSet::new();
    while (picked.len() as u64) < target {
        picked.insert(rng.random_range(0..total));
    }
    Ok(picked.into_iter().collect())
}

/// Uniform without-replacement sample of weight vectors; deterministic given
/// the seed, returned in enumeration order.
pub fn sample_vectors(
    grid: &WeightGrid,
    fraction: f64,
    floor: usize,
    seed: u64,
) -> Result<Vec<WeightVector>> {
    Ok(sample_ranks(grid, fraction, floor, seed)?
        .into_iter()
        .map(|r| grid.unrank(r))
        .collect())
}

/// The action evaluation measure `f(mu, sigma, k) = mu - k * sigma`.
pub fn action_evaluation(mu: f64, sigma: f64, k: f64) -> f64 {
    debug_assert!(sigma >= 0.0);
    mu - k * sigma
}

/// Extraction settings; see the module docs for the pipeline.
#[derive(Debug, Clone)]
pub struct ActionExtractConfig {
    pub grid_step_bp: u32,
    pub sample_fraction: f64,
    pub sample_floor: usize,
    /// Control term of the evaluation measure.
    pub k_control: f64,
    /// Actions kept per interval.
    pub top_per_interval: usize,
    pub seed: u64,
}

impl Default for ActionExtractConfig {
    fn default() -> Self {
        Self {
            grid_step_bp: 1000,
            sample_fraction: 1e-4,
            sample_floor: 1000,
            k_control: 1.0,
            top_per_interval: 3,
            seed: 0,
        }
    }
}

/// Buy-and-hold daily portfolio returns of initial weights `w` over return
/// rows `start..=end`.
fn buy_and_hold_returns(
    returns: &ndarray::Array2<f64>,
    w: &WeightVector,
    start: usize,
    end: usize,
) -> Vec<f64> {
    let n = returns.ncols();
    let mut positions = w.fractions();
    let mut value = 1.0f64;
    let mut out = Vec::with_capacity(end - start + 1);
    for t in start..=end {
        let mut gain = 0.0;
        for i in 0..n {
            gain += positions[i] * returns[[t, i]];
        }
        let pr = gain / value;
        value += gain;
        for i in 0..n {
            positions[i] *= 1.0 + returns[[t, i]];
        }
        out.push(pr);
    }
    out
}

/// Scores sampled vectors per interval (annualized buy-and-hold mean and
/// volatility through the evaluation measure), keeps the `top_per_interval`
/// best (ties to the lower enumeration rank), and unions the winners across
/// intervals preserving first-seen order.
pub fn extract_action_set(
    intervals: &[MarketInterval],
    rp: &ReturnPanel,
    cfg: &ActionExtractConfig,
) -> Result<ActionSet> {
    if intervals.is_empty() {
        return Err(ActionSpaceError::NoIntervalsFound);
    }
    let n = rp.n_assets();
    let grid = weight_grid_vectors(cfg.grid_step_bp, n)?;
    let mut actions: Vec<WeightVector> = Vec::new();
    let mut provenance: Vec<ActionProvenance> = Vec::new();
    let mut seen: HashSet<Vec<u32>> = HashSet::new();
    for (interval_index, interval) in intervals.iter().enumerate() {
        let ranks = sample_ranks(
            &grid,
            cfg.sample_fraction,
            cfg.sample_floor,
            cfg.seed.wrapping_add(interval_index as u64),
        )?;
        let mut scored: Vec<(f64, u64)> = ranks
            .into_iter()
            .map(|rank| {
                let w = grid.unrank(rank);
                let prs = buy_and_hold_returns(&rp.returns, &w, interval.start, interval.end);
                let mu = crate::market_data::annualize_mean(&prs);
                let sigma = crate::market_data::annualize_std(&prs);
                (action_evaluation(mu, sigma, cfg.k_control), rank)
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(score, rank) in scored.iter().take(cfg.top_per_interval) {
            let w = grid.unrank(rank);
            if seen.insert(w.weights_bp.clone()) {
                actions.push(w);
                provenance.push(ActionProvenance {
                    interval_index,
                    interval: *interval,
                    score,
                    rank,
                });
            }
        }
    }
    Ok(ActionSet {
        actions,
        provenance,
        n_assets: n,
        grid_step_bp: cfg.grid_step_bp,
    })
}

/// Reference series used for the up/down labeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceSeries {
    /// Equal-weight average of all asset returns (market proxy).
    EqualWeight,
    /// A single asset by column index.
    Asset(usize),
}

/// Extracts the labeling reference from a return panel.
pub fn reference_returns(rp: &ReturnPanel, which: ReferenceSeries) -> Vec<f64> {
    match which {
        ReferenceSeries::EqualWeight => {
            let n = rp.n_assets() as f64;
            rp.returns
                .outer_iter()
                .map(|row| row.sum() / n)
                .collect()
        }
        ReferenceSeries::Asset(i) => rp.returns.column(i).to_vec(),
    }
}

const ARTIFACT_HEADER: &str = "actionset v1";

impl ActionSet {
    /// Text artifact: one vector per line in basis points, provenance in a
    /// trailing comment.
    pub fn write_text(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{ARTIFACT_HEADER}")?;
        writeln!(w, "n {} grid_step_bp {}", self.n_assets, self.grid_step_bp)?;
        for (action, prov) in self.actions.iter().zip(&self.provenance) {
            let weights: Vec<String> = action.weights_bp.iter().map(|b| b.to_string()).collect();
            let dir = match prov.interval.direction {
                Direction::Up => "up",
                Direction::Down => "down",
            };
            writeln!(
                w,
                "{} # interval {} {}..{} {} score {} rank {}",
                weights.join(" "),
                prov.interval_index,
                prov.interval.start,
                prov.interval.end,
                dir,
                prov.score,
                prov.rank
            )?;
        }
        Ok(())
    }

    pub fn write_file(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_text(std::io::BufWriter::new(file))
    }

    pub fn read_text(r: impl Read) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let header = lines
            .next()
            .transpose()?
            .ok_or_else(|| ActionSpaceError::ArtifactFormat("empty file".into()))?;
        if header.trim() != ARTIFACT_HEADER {
            return Err(ActionSpaceError::ArtifactFormat(format!(
                "bad header `{header}`"
            )));
        }
        let meta = lines
            .next()
            .transpose()?
            .ok_or_else(|| ActionSpaceError::ArtifactFormat("missing meta line".into()))?;
        let fields: Vec<&str> = meta.split_whitespace().collect();
        if fields.len() != 4 || fields[0] != "n" || fields[2] != "grid_step_bp" {
            return Err(ActionSpaceError::ArtifactFormat(format!(
                "bad meta line `{meta}`"
            )));
        }
        let n: usize = fields[1]
            .parse()
            .map_err(|_| ActionSpaceError::ArtifactFormat(format!("bad n `{}`", fields[1])))?;
        let grid_step_bp: u32 = fields[3].parse().map_err(|_| {
            ActionSpaceError::ArtifactFormat(format!("bad grid step `{}`", fields[3]))
        })?;
        let mut actions = Vec::new();
        let mut provenance = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (weights_part, comment) = match line.split_once('#') {
                Some((w, c)) => (w, c.trim()),
                None => (line.as_str(), ""),
            };
            let weights_bp: Vec<u32> = weights_part
                .split_whitespace()
                .map(|s| {
                    s.parse::<u32>().map_err(|_| {
                        ActionSpaceError::ArtifactFormat(format!("bad weight `{s}`"))
                    })
                })
                .collect::<Result<_>>()?;
            if weights_bp.len() != n {
                return Err(ActionSpaceError::ArtifactFormat(format!(
                    "vector has {} weights, expected {n}",
                    weights_bp.len()
                )));
            }
            if weights_bp.iter().sum::<u32>() != TOTAL_BP {
                return Err(ActionSpaceError::ArtifactFormat(format!(
                    "weights sum to {}, expected {TOTAL_BP}",
                    weights_bp.iter().sum::<u32>()
                )));
            }
            // "interval <idx> <start>..<end> <dir> score <s> rank <r>"
            let c: Vec<&str> = comment.split_whitespace().collect();
            if c.len() != 8 || c[0] != "interval" || c[4] != "score" || c[6] != "rank" {
                return Err(ActionSpaceError::ArtifactFormat(format!(
                    "bad provenance comment `{comment}`"
                )));
            }
            let idx: usize = c[1].parse().map_err(|_| {
                ActionSpaceError::ArtifactFormat(format!("bad interval index `{}`", c[1]))
            })?;
            let (s, e) = c[2].split_once("..").ok_or_else(|| {
                ActionSpaceError::ArtifactFormat(format!("bad interval span `{}`", c[2]))
            })?;
            let start: usize = s.parse().map_err(|_| {
                ActionSpaceError::ArtifactFormat(format!("bad interval start `{s}`"))
            })?;
            let end: usize = e.parse().map_err(|_| {
                ActionSpaceError::ArtifactFormat(format!("bad interval end `{e}`"))
            })?;
            let direction = match c[3] {
                "up" => Direction::Up,
                "down" => Direction::Down,
                other => {
                    return Err(ActionSpaceError::ArtifactFormat(format!(
                        "bad direction `{other}`"
                    )))
                }
            };
            let score: f64 = c[5]
                .parse()
                .map_err(|_| ActionSpaceError::ArtifactFormat(format!("bad score `{}`", c[5])))?;
            let rank: u64 = c[7]
                .parse()
                .map_err(|_| ActionSpaceError::ArtifactFormat(format!("bad rank `{}`", c[7])))?;
            actions.push(WeightVector { weights_bp });
            provenance.push(ActionProvenance {
                interval_index: idx,
                interval: MarketInterval {
                    start,
                    end,
                    direction,
                },
                score,
                rank,
            });
        }
        if actions.is_empty() {
            return Err(ActionSpaceError::ArtifactFormat("no actions".into()));
        }
        Ok(Self {
            actions,
            provenance,
            n_assets: n,
            grid_step_bp,
        })
    }

    pub fn read_file(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_text(file)
    }
}
