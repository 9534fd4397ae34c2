//! Preference data for audio-video DPO: per-metric reward normalization,
//! winner/loser selection under the ranking strategies, and the DPO
//! objective itself (see [`dpo`]).

pub mod dpo;

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

pub use dpo::{
    dpo_loss, dpo_loss_against, implicit_accuracy, reference_diffs, train_dpo, DpoConfig, DpoLogRecord, DpoTerms,
    EvalSeeds, PreferencePair,
};

/// Raw (or normalized) scores of one candidate, grouped by dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardVector {
    pub audio: Vec<f64>,
    pub video: Vec<f64>,
    pub av: Vec<f64>,
}

impl RewardVector {
    pub fn new(audio: Vec<f64>, video: Vec<f64>, av: Vec<f64>) -> Result<Self> {
        let r = Self { audio, video, av };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.audio.is_empty() || self.video.is_empty() || self.av.is_empty() {
            return Err(contract("every reward dimension needs at least one metric"));
        }
        if self.dims().iter().flat_map(|d| d.iter()).any(|x| !x.is_finite()) {
            return Err(contract("non-finite reward"));
        }
        Ok(())
    }

    /// Dimensions in the fixed order audio, video, av.
    pub fn dims(&self) -> [&[f64]; 3] {
        [&self.audio, &self.video, &self.av]
    }

    fn dims_mut(&mut self) -> [&mut Vec<f64>; 3] {
        [&mut self.audio, &mut self.video, &mut self.av]
    }

    pub fn layout(&self) -> [usize; 3] {
        [self.audio.len(), self.video.len(), self.av.len()]
    }

    /// Per-dimension sums `[Σ audio, Σ video, Σ av]`.
    pub fn dimension_sums(&self) -> [f64; 3] {
        self.dims().map(|d| d.iter().sum())
    }

    /// All metrics, audio first.
    pub fn flat(&self) -> Vec<f64> {
        self.dims().concat()
    }
}

/// Per-metric population z-score over the whole pool; standard deviations
/// are floored at 1e-12 so constant metrics map to zero.
pub fn normalize_scores(pool: &[RewardVector]) -> Result<Vec<RewardVector>> {
    let first = pool.first().ok_or_else(|| contract("empty reward pool"))?;
    let layout = first.layout();
    for r in pool {
        r.validate()?;
        if r.layout() != layout {
            return Err(contract(format!("metric layout {:?} != {:?}", r.layout(), layout)));
        }
    }
    if pool.len() == 1 {
        warn!("normalizing a single-candidate pool; all scores become 0");
    }
    let n = pool.len() as f64;
    let mut out = pool.to_vec();
    for (u, &width) in layout.iter().enumerate() {
        for j in 0..width {
            let mean = pool.iter().map(|r| r.dims()[u][j]).sum::<f64>() / n;
            let var = pool.iter().map(|r| (r.dims()[u][j] - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt().max(1e-12);
            for (o, r) in out.iter_mut().zip(pool) {
                o.dims_mut()[u][j] = (r.dims()[u][j] - mean) / std;
            }
        }
    }
    Ok(out)
}

/// How scores are compared when choosing winners.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankKind {
    /// Mean of all scores; single aggregate comparison.
    AverageMicro,
    /// Mean of per-metric within-prompt ranks; single aggregate comparison.
    AverageMacro,
    /// Per-dimension score sums; winner must lead in every dimension.
    #[default]
    ModalityMicro,
    /// Per-dimension sums of within-prompt ranks; winner must lead in every
    /// dimension.
    ModalityMacro,
}

impl RankKind {
    pub const ALL: [RankKind; 4] = [
        RankKind::AverageMicro,
        RankKind::AverageMacro,
        RankKind::ModalityMicro,
        RankKind::ModalityMacro,
    ];

    fn per_dimension(self) -> bool {
        matches!(self, RankKind::ModalityMicro | RankKind::ModalityMacro)
    }

    fn uses_ranks(self) -> bool {
        matches!(self, RankKind::AverageMacro | RankKind::ModalityMacro)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RankStrategy {
    pub kind: RankKind,
    /// z-score metrics over the pool before ranking.
    pub normalized: bool,
    /// Include ground-truth candidates in the pool.
    pub with_gt: bool,
}

impl Default for RankStrategy {
    fn default() -> Self {
        Self {
            kind: RankKind::ModalityMicro,
            normalized: true,
            with_gt: true,
        }
    }
}

impl fmt::Display for RankStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            RankKind::AverageMicro => "average-micro",
            RankKind::AverageMacro => "average-macro",
            RankKind::ModalityMicro => "modality-micro",
            RankKind::ModalityMacro => "modality-macro",
        };
        write!(
            f,
            "{kind}/{}/{}",
            if self.normalized { "norm" } else { "raw" },
            if self.with_gt { "gt" } else { "no-gt" }
        )
    }
}

impl FromStr for RankStrategy {
    type Err = Error;

    /// Parses the [`Display`](fmt::Display) form, e.g. `modality-micro/norm/gt`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('/').collect();
        let bad = || contract(format!("unknown rank strategy {s:?}"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let kind = match parts[0] {
            "average-micro" => RankKind::AverageMicro,
            "average-macro" => RankKind::AverageMacro,
            "modality-micro" => RankKind::ModalityMicro,
            "modality-macro" => RankKind::ModalityMacro,
            _ => return Err(bad()),
        };
        let normalized = match parts[1] {
            "norm" => true,
            "raw" => false,
            _ => return Err(bad()),
        };
        let with_gt = match parts[2] {
            "gt" => true,
            "no-gt" => false,
            _ => return Err(bad()),
        };
        Ok(Self {
            kind,
            normalized,
            with_gt,
        })
    }
}

/// The selection-relevant part of a candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateInfo {
    pub prompt_id: u64,
    pub is_ground_truth: bool,
    pub rewards: RewardVector,
}

/// A chosen pair, as indices into the pool passed to [`select_pairs`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSelection {
    pub prompt_id: u64,
    pub winner: usize,
    pub loser: usize,
    /// Comparison scores of winner and loser: per-dimension for modality
    /// strategies, a single aggregate otherwise.
    pub winner_scores: Vec<f64>,
    pub loser_scores: Vec<f64>,
}

impl PairSelection {
    pub fn gap(&self) -> f64 {
        self.winner_scores.iter().sum::<f64>() - self.loser_scores.iter().sum::<f64>()
    }
}

/// Average ranks (1 = lowest) of `values`; ties share their mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Comparison vectors of the candidates of one prompt.
fn comparison_scores(kind: RankKind, group: &[&RewardVector]) -> Vec<Vec<f64>> {
    let table: Vec<RewardVector> = if kind.uses_ranks() {
        let mut ranked: Vec<RewardVector> = group.iter().map(|r| (*r).clone()).collect();
        for (u, &width) in group[0].layout().iter().enumerate() {
            for j in 0..width {
                let col: Vec<f64> = group.iter().map(|r| r.dims()[u][j]).collect();
                for (r, rank) in ranked.iter_mut().zip(average_ranks(&col)) {
                    r.dims_mut()[u][j] = rank;
                }
            }
        }
        ranked
    } else {
        group.iter().map(|r| (*r).clone()).collect()
    };
    table
        .iter()
        .map(|r| {
            if kind.per_dimension() {
                r.dimension_sums().to_vec()
            } else {
                let flat = r.flat();
                vec![flat.iter().sum::<f64>() / flat.len() as f64]
            }
        })
        .collect()
}

/// Chooses at most one (winner, loser) pair per prompt.
///
/// A pair is admissible when the winner's comparison scores strictly exceed
/// the loser's in every component. Among admissible pairs the one with the
/// largest total gap wins; exact ties go to the lexicographically smallest
/// (winner, loser) pool indices. Prompts without an admissible pair are
/// skipped. Output is ordered by prompt id.
pub fn select_pairs(pool: &[CandidateInfo], strategy: &RankStrategy) -> Result<Vec<PairSelection>> {
    let active: Vec<usize> = (0..pool.len())
        .filter(|&i| strategy.with_gt || !pool[i].is_ground_truth)
        .collect();
    if active.is_empty() {
        return Ok(Vec::new());
    }
    let raw: Vec<RewardVector> = active.iter().map(|&i| pool[i].rewards.clone()).collect();
    let scores = if strategy.normalized {
        normalize_scores(&raw)?
    } else {
        for r in &raw {
            r.validate()?;
        }
        raw
    };
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (k, &i) in active.iter().enumerate() {
        groups.entry(pool[i].prompt_id).or_default().push(k);
    }
    let mut out = Vec::new();
    for (prompt_id, members) in groups {
        if members.len() < 2 {
            debug!("prompt {prompt_id}: fewer than two candidates");
            continue;
        }
        let group: Vec<&RewardVector> = members.iter().map(|&k| &scores[k]).collect();
        let cmp = comparison_scores(strategy.kind, &group);
        let mut best: Option<(f64, usize, usize)> = None;
        for w in 0..members.len() {
            for l in 0..members.len() {
                if w == l || !cmp[w].iter().zip(&cmp[l]).all(|(a, b)| a > b) {
                    continue;
                }
                let gap: f64 = cmp[w].iter().sum::<f64>() - cmp[l].iter().sum::<f64>();
                let better = match best {
                    None => true,
                    Some((g, bw, bl)) => match gap.total_cmp(&g) {
                        Ordering::Greater => true,
                        Ordering::Equal => (active[members[w]], active[members[l]]) < (active[members[bw]], active[members[bl]]),
                        Ordering::Less => false,
                    },
                };
                if better {
                    best = Some((gap, w, l));
                }
            }
        }
        match best {
            Some((_, w, l)) => out.push(PairSelection {
                prompt_id,
                winner: active[members[w]],
                loser: active[members[l]],
                winner_scores: cmp[w].clone(),
                loser_scores: cmp[l].clone(),
            }),
            None => debug!("prompt {prompt_id}: no admissible pair"),
        }
    }
    Ok(out)
}

/// Re-derives every selected pair's domination from scratch and fails on
/// the first pair that does not satisfy the strategy.
pub fn validate_pairs(pool: &[CandidateInfo], strategy: &RankStrategy, pairs: &[PairSelection]) -> Result<()> {
    let members: Vec<&CandidateInfo> = pool
        .iter()
        .filter(|c| strategy.with_gt || !c.is_ground_truth)
        .collect();
    let n = members.len() as f64;
    let layout = members.first().map(|c| c.rewards.flat().len()).unwrap_or(0);
    // Column statistics over the active pool, recomputed independently.
    let stats: Vec<(f64, f64)> = (0..layout)
        .map(|j| {
            let col: Vec<f64> = members.iter().map(|c| c.rewards.flat()[j]).collect();
            let mean = col.iter().sum::<f64>() / n;
            let sd = (col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
            (mean, if sd < 1e-12 { 1e-12 } else { sd })
        })
        .collect();
    let value = |c: &CandidateInfo, j: usize| {
        let x = c.rewards.flat()[j];
        if strategy.normalized {
            (x - stats[j].0) / stats[j].1
        } else {
            x
        }
    };
    let [da, dv, _] = pool
        .first()
        .map(|c| c.rewards.layout())
        .unwrap_or([0, 0, 0]);
    let dim_of = |j: usize| if j < da { 0 } else if j < da + dv { 1 } else { 2 };
    for p in pairs {
        let (w, l) = (&pool[p.winner], &pool[p.loser]);
        if w.prompt_id != l.prompt_id || w.prompt_id != p.prompt_id || p.winner == p.loser {
            return Err(contract(format!("pair {p:?} mixes prompts")));
        }
        if !strategy.with_gt && (w.is_ground_truth || l.is_ground_truth) {
            return Err(contract("ground truth used by a without-gt strategy"));
        }
        let peers: Vec<&CandidateInfo> = members.iter().copied().filter(|c| c.prompt_id == p.prompt_id).collect();
        let score = |c: &CandidateInfo, j: usize| -> f64 {
            if strategy.kind.uses_ranks() {
                let x = value(c, j);
                let below = peers.iter().filter(|o| value(o, j) < x).count() as f64;
                let equal = peers.iter().filter(|o| value(o, j) == x).count() as f64;
                below + (equal + 1.0) / 2.0
            } else {
                value(c, j)
            }
        };
        let ok = if strategy.kind.per_dimension() {
            (0..3).all(|u| {
                let s = |c: &CandidateInfo| (0..layout).filter(|&j| dim_of(j) == u).map(|j| score(c, j)).sum::<f64>();
                s(w) > s(l)
            })
        } else {
            let s = |c: &CandidateInfo| (0..layout).map(|j| score(c, j)).sum::<f64>() / layout as f64;
            s(w) > s(l)
        };
        if !ok {
            return Err(contract(format!(
                "winner {} does not dominate loser {} for prompt {}",
                p.winner, p.loser, p.prompt_id
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rv(a: f64, v: f64, av: f64) -> RewardVector {
        RewardVector::new(vec![a], vec![v], vec![av]).unwrap()
    }

    #[test]
    fn zscore_hand_values() {
        let pool = vec![rv(1.0, 5.0, 0.0), rv(2.0, 5.0, 0.0), rv(3.0, 5.0, 0.0)];
        let z = normalize_scores(&pool).unwrap();
        let expect = [-1.224_744_871_391_589, 0.0, 1.224_744_871_391_589];
        for (r, e) in z.iter().zip(expect) {
            assert!((r.audio[0] - e).abs() < 1e-12);
            assert_eq!(r.video[0], 0.0);
        }
    }

    #[test]
    fn single_candidate_normalizes_to_zero() {
        let z = normalize_scores(&[rv(4.0, -2.0, 9.0)]).unwrap();
        assert_eq!(z[0].flat(), vec![0.0; 3]);
    }

    #[test]
    fn ranks_share_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn strategy_round_trips() {
        for kind in RankKind::ALL {
            for normalized in [true, false] {
                for with_gt in [true, false] {
                    let s = RankStrategy {
                        kind,
                        normalized,
                        with_gt,
                    };
                    assert_eq!(s.to_string().parse::<RankStrategy>().unwrap(), s);
                }
            }
        }
        assert!("modality-micro/norm".parse::<RankStrategy>().is_err());
    }

    #[test]
    fn conflicting_dimensions_split_strategies() {
        let info = |r| CandidateInfo {
            prompt_id: 0,
            is_ground_truth: false,
            rewards: r,
        };
        let pool = vec![info(rv(1.0, -1.0, 1.0)), info(rv(-1.0, 1.0, -1.0))];
        let raw = |kind| RankStrategy {
            kind,
            normalized: false,
            with_gt: true,
        };
        assert!(select_pairs(&pool, &raw(RankKind::ModalityMicro)).unwrap().is_empty());
        let avg = select_pairs(&pool, &raw(RankKind::AverageMicro)).unwrap();
        assert_eq!((avg[0].winner, avg[0].loser), (0, 1));
    }
}
