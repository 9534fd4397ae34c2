//! 3-D position ids for joint audio/video token sequences and the rotary
//! embedding applied to attention queries and keys.
//!
//! Video token `(f, y, x)` gets id `(f, y, x)`. Audio token `(s, m)` gets an id
//! according to an [`AudioIdStrategy`]; the aligned strategies map the audio
//! step to the video frame covering the same instant,
//! `round(s · T_v / T_a)`, rounding halves away from zero. The ratio is kept
//! as integers so the rounding is exact.

use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{contract, shape_err, Result};
use crate::scalar::Real;
use crate::tape::{rotate, RotaryTable};
use crate::tensor::{dims2, Tensor};

/// Token-grid extents for one joint sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub video_frames: usize,
    pub height: usize,
    pub width: usize,
    pub audio_steps: usize,
    pub freq_bins: usize,
}

impl GridSpec {
    pub fn new(video_frames: usize, height: usize, width: usize, audio_steps: usize, freq_bins: usize) -> Result<Self> {
        let g = Self {
            video_frames,
            height,
            width,
            audio_steps,
            freq_bins,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.video_frames, self.height, self.width, self.audio_steps, self.freq_bins].contains(&0) {
            return Err(contract(format!("grid extents must be >= 1: {self}")));
        }
        Ok(())
    }

    pub fn video_tokens(&self) -> usize {
        self.video_frames * self.height * self.width
    }

    pub fn audio_tokens(&self) -> usize {
        self.audio_steps * self.freq_bins
    }

    /// Video frame aligned with audio step `s`.
    pub fn aligned_frame(&self, s: usize) -> usize {
        round_ratio(s, self.video_frames, self.audio_steps)
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{}x{}/{}x{}",
            self.video_frames, self.height, self.width, self.audio_steps, self.freq_bins
        )
    }
}

/// `round(num · mul / den)` for non-negative integers, halves away from zero.
pub fn round_ratio(num: usize, mul: usize, den: usize) -> usize {
    let (n, d) = (num as u128 * mul as u128, den as u128);
    ((2 * n + d) / (2 * d)) as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct PositionTriple {
    pub t: f64,
    pub h: f64,
    pub w: f64,
}

impl PositionTriple {
    pub fn new(t: f64, h: f64, w: f64) -> Self {
        Self { t, h, w }
    }

    fn key(&self) -> [u64; 3] {
        // +0.0 folds the (unused) negative zero onto zero
        [(self.t + 0.0).to_bits(), (self.h + 0.0).to_bits(), (self.w + 0.0).to_bits()]
    }

    pub fn is_integral(&self) -> bool {
        [self.t, self.h, self.w].iter().all(|v| v.fract() == 0.0)
    }

    pub fn shifted(&self, d: f64) -> Self {
        Self::new(self.t + d, self.h + d, self.w + d)
    }
}

/// How audio tokens are placed in the 3-D id space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AudioIdStrategy {
    /// `(s, s, m)`: audio on its own time axis; collides with video ids.
    Vanilla,
    /// `(s·T_v/T_a, s·T_v/T_a, m)`: fractional, time-aligned.
    Interpolate,
    /// `(round(s·T_v/T_a), s, m)`.
    Interleave,
    /// `(round(s·T_v/T_a), s + H, m + W)`: aligned and disjoint from video ids.
    #[default]
    InterleaveOffset,
}

impl AudioIdStrategy {
    pub const ALL: [AudioIdStrategy; 4] = [
        AudioIdStrategy::Vanilla,
        AudioIdStrategy::Interpolate,
        AudioIdStrategy::Interleave,
        AudioIdStrategy::InterleaveOffset,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Vanilla => "vanilla",
            Self::Interpolate => "interpolate",
            Self::Interleave => "interleave",
            Self::InterleaveOffset => "interleave-offset",
        }
    }
}

impl fmt::Display for AudioIdStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AudioIdStrategy {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| contract(format!("unknown audio id strategy {s:?}")))
    }
}

/// Ids for the `T_v·H·W` video tokens in `(t, h, w)` lexicographic order.
pub fn video_position_ids(grid: &GridSpec) -> Vec<PositionTriple> {
    let mut out = Vec::with_capacity(grid.video_tokens());
    for t in 0..grid.video_frames {
        for h in 0..grid.height {
            for w in 0..grid.width {
                out.push(PositionTriple::new(t as f64, h as f64, w as f64));
            }
        }
    }
    out
}

pub fn audio_position_id(strategy: AudioIdStrategy, grid: &GridSpec, s: usize, m: usize) -> PositionTriple {
    let (sf, mf) = (s as f64, m as f64);
    match strategy {
        AudioIdStrategy::Vanilla => PositionTriple::new(sf, sf, mf),
        AudioIdStrategy::Interpolate => {
            let t = (s * grid.video_frames) as f64 / grid.audio_steps as f64;
            PositionTriple::new(t, t, mf)
        }
        AudioIdStrategy::Interleave => PositionTriple::new(grid.aligned_frame(s) as f64, sf, mf),
        AudioIdStrategy::InterleaveOffset => PositionTriple::new(
            grid.aligned_frame(s) as f64,
            (s + grid.height) as f64,
            (m + grid.width) as f64,
        ),
    }
}

/// Ids for the `T_a·M` audio tokens, step-major.
pub fn audio_position_ids(strategy: AudioIdStrategy, grid: &GridSpec) -> Vec<PositionTriple> {
    let mut out = Vec::with_capacity(grid.audio_tokens());
    for s in 0..grid.audio_steps {
        for m in 0..grid.freq_bins {
            out.push(audio_position_id(strategy, grid, s, m));
        }
    }
    out
}

/// Number of audio ids equal to some video id.
pub fn count_overlaps(video_ids: &[PositionTriple], audio_ids: &[PositionTriple]) -> usize {
    let video: HashSet<[u64; 3]> = video_ids.iter().map(PositionTriple::key).collect();
    audio_ids.iter().filter(|p| video.contains(&p.key())).count()
}

/// Rotary layout: the head dimension is split into temporal, height and width
/// sub-bands, each rotated by its own position component.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub split: (usize, usize, usize),
    pub base: f64,
}

impl RopeConfig {
    /// Default split `(hd/2, hd/4, hd/4)`, each floored to even, remainder to
    /// the temporal band.
    pub fn new(head_dim: usize) -> Result<Self> {
        let even = |x: usize| x - x % 2;
        let (dh, dw) = (even(head_dim / 4), even(head_dim / 4));
        let dt = head_dim.saturating_sub(dh + dw);
        let cfg = Self {
            head_dim,
            split: (dt, dh, dw),
            base: 10_000.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_split(head_dim: usize, split: (usize, usize, usize), base: f64) -> Result<Self> {
        let cfg = Self { head_dim, split, base };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sub-bands must be even and sum to `head_dim`; the temporal band needs at
    /// least one pair. Height/width bands may be empty when `head_dim < 8`.
    pub fn validate(&self) -> Result<()> {
        let (t, h, w) = self.split;
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(2) {
            return Err(contract(format!("head_dim {} must be even and positive", self.head_dim)));
        }
        if t % 2 != 0 || h % 2 != 0 || w % 2 != 0 || t + h + w != self.head_dim || t < 2 {
            return Err(contract(format!(
                "rope split {:?} invalid for head_dim {}",
                self.split, self.head_dim
            )));
        }
        if !(self.base > 1.0) {
            return Err(contract(format!("rope base {} must exceed 1", self.base)));
        }
        Ok(())
    }

    /// Rotation angle of pair `j` within a band of width `band` at position `p`.
    fn angle(&self, band: usize, j: usize, p: f64) -> f64 {
        p * self.base.powf(-2.0 * j as f64 / band as f64)
    }

    /// Angles for every (row, pair) of a `[n × head_dim]` block.
    pub fn table<T: Real>(&self, ids: &[PositionTriple]) -> RotaryTable<T> {
        let pairs = self.head_dim / 2;
        let (dt, dh, dw) = self.split;
        let mut cos = Vec::with_capacity(ids.len() * pairs);
        let mut sin = Vec::with_capacity(ids.len() * pairs);
        for id in ids {
            for (band, p) in [(dt, id.t), (dh, id.h), (dw, id.w)] {
                for j in 0..band / 2 {
                    let a = self.angle(band, j, p);
                    cos.push(T::lit(a.cos()));
                    sin.push(T::lit(a.sin()));
                }
            }
        }
        RotaryTable {
            rows: ids.len(),
            pairs,
            cos: Rc::new(cos),
            sin: Rc::new(sin),
        }
    }
}

/// Rotates `x[n × head_dim]` by the ids' angles (value-level).
pub fn apply_rotary<T: Real>(x: &Tensor<T>, ids: &[PositionTriple], cfg: &RopeConfig) -> Result<Tensor<T>> {
    let (n, d) = dims2(x.shape(), "apply_rotary")?;
    if n != ids.len() || d != cfg.head_dim {
        return Err(shape_err("apply_rotary", x.shape(), &[ids.len(), cfg.head_dim]));
    }
    let table = cfg.table::<T>(ids);
    Tensor::new(vec![n, d], rotate(x.data(), &table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(tv: usize, h: usize, w: usize, ta: usize, m: usize) -> GridSpec {
        GridSpec::new(tv, h, w, ta, m).unwrap()
    }

    #[test]
    fn video_enumeration() {
        assert_eq!(video_position_ids(&grid(1, 1, 1, 1, 1)), vec![PositionTriple::new(0.0, 0.0, 0.0)]);
        let ids = video_position_ids(&grid(2, 1, 2, 1, 1));
        let want = [(0., 0., 0.), (0., 0., 1.), (1., 0., 0.), (1., 0., 1.)];
        assert_eq!(ids, want.map(|(t, h, w)| PositionTriple::new(t, h, w)));
    }

    #[test]
    fn audio_formulas_by_hand() {
        let g = grid(4, 2, 3, 8, 5);
        let first = audio_position_id(AudioIdStrategy::InterleaveOffset, &g, 0, 0);
        assert_eq!(first, PositionTriple::new(0.0, 2.0, 3.0));
        assert_eq!(
            audio_position_id(AudioIdStrategy::InterleaveOffset, &g, 6, 2),
            PositionTriple::new(3.0, 8.0, 5.0)
        );
        assert_eq!(
            audio_position_id(AudioIdStrategy::Interpolate, &g, 3, 1),
            PositionTriple::new(1.5, 1.5, 1.0)
        );
        assert_eq!(
            audio_position_id(AudioIdStrategy::Vanilla, &g, 0, 0),
            PositionTriple::new(0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn rounding_halves_go_up() {
        // 1·4/8 = 0.5 → 1 ; 3·4/8 = 1.5 → 2 ; 5·1/2 = 2.5 → 3
        assert_eq!(round_ratio(1, 4, 8), 1);
        assert_eq!(round_ratio(3, 4, 8), 2);
        assert_eq!(round_ratio(5, 1, 2), 3);
        assert_eq!(round_ratio(1, 1, 3), 0);
        assert_eq!(round_ratio(2, 1, 3), 1);
    }

    #[test]
    fn vanilla_overlaps_by_brute_force() {
        let g = grid(4, 2, 3, 8, 5);
        let v = video_position_ids(&g);
        let a = audio_position_ids(AudioIdStrategy::Vanilla, &g);
        let mut brute = 0;
        for p in &a {
            if v.iter().any(|q| q == p) {
                brute += 1;
            }
        }
        assert!(brute >= 1);
        assert_eq!(count_overlaps(&v, &a), brute);
        assert_eq!(count_overlaps(&v, &[]), 0);
    }

    #[test]
    fn default_split() {
        assert_eq!(RopeConfig::new(8).unwrap().split, (4, 2, 2));
        assert_eq!(RopeConfig::new(16).unwrap().split, (8, 4, 4));
        assert_eq!(RopeConfig::new(12).unwrap().split, (8, 2, 2));
        assert_eq!(RopeConfig::new(4).unwrap().split, (4, 0, 0));
        assert!(RopeConfig::new(3).is_err());
        assert!(RopeConfig::with_split(8, (3, 3, 2), 1e4).is_err());
    }

    #[test]
    fn zero_positions_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = RopeConfig::new(8).unwrap();
        let x = Tensor::<f64>::randn(&[3, 8], 1.0, &mut rng);
        let out = apply_rotary(&x, &[PositionTriple::default(); 3], &cfg).unwrap();
        assert_eq!(out, x);
        assert!(apply_rotary(&x, &[PositionTriple::default(); 2], &cfg).is_err());
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn relative_shift_per_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = RopeConfig::new(12).unwrap();
        for _ in 0..50 {
            let q = Tensor::<f64>::randn(&[1, 12], 1.0, &mut rng);
            let k = Tensor::<f64>::randn(&[1, 12], 1.0, &mut rng);
            let p = PositionTriple::new(rng.gen_range(0.0..9.0), rng.gen_range(0.0..9.0), rng.gen_range(0.0..9.0));
            let r = PositionTriple::new(rng.gen_range(0.0..9.0), rng.gen_range(0.0..9.0), rng.gen_range(0.0..9.0));
            let d = rng.gen_range(-5..6) as f64;
            let base = dot(
                apply_rotary(&q, &[p], &cfg).unwrap().data(),
                apply_rotary(&k, &[r], &cfg).unwrap().data(),
            );
            for axis in 0..3 {
                let bump = |x: PositionTriple| match axis {
                    0 => PositionTriple::new(x.t + d, x.h, x.w),
                    1 => PositionTriple::new(x.t, x.h + d, x.w),
                    _ => PositionTriple::new(x.t, x.h, x.w + d),
                };
                let shifted = dot(
                    apply_rotary(&q, &[bump(p)], &cfg).unwrap().data(),
                    apply_rotary(&k, &[bump(r)], &cfg).unwrap().data(),
                );
                assert!((base - shifted).abs() < 1e-9);
            }
        }
    }

    proptest! {
        #[test]
        fn offset_strategy_never_collides(tv in 1usize..=8, h in 1usize..=6, w in 1usize..=6, ta in 1usize..=64, m in 1usize..=16) {
            let g = grid(tv, h, w, ta, m);
            let v = video_position_ids(&g);
            for s in AudioIdStrategy::ALL {
                let a = audio_position_ids(s, &g);
                prop_assert_eq!(a.len(), ta * m);
                if s == AudioIdStrategy::InterleaveOffset {
                    prop_assert_eq!(count_overlaps(&v, &a), 0);
                }
                if s != AudioIdStrategy::Interpolate {
                    prop_assert!(a.iter().all(PositionTriple::is_integral));
                }
            }
            prop_assert_eq!(v.len(), tv * h * w);
        }

        /// Rounding can carry the last half-frame of audio to `T_v` itself, so
        /// the aligned id lies in `[0, T_v]`, and below `T_v` unless the step
        /// falls in that final half-frame.
        #[test]
        fn aligned_time_stays_inside_video(tv in 1usize..=8, extra in 0usize..=56) {
            let ta = tv + extra;
            let g = grid(tv, 2, 2, ta, 3);
            for s in [AudioIdStrategy::Interleave, AudioIdStrategy::InterleaveOffset] {
                for (i, p) in audio_position_ids(s, &g).iter().enumerate() {
                    let step = i / 3;
                    let expect = ((step * tv) as f64 / ta as f64 + 0.5).floor();
                    prop_assert_eq!(p.t, expect);
                    prop_assert!(p.t <= tv as f64);
                    if 2 * step * tv < (2 * tv - 1) * ta {
                        prop_assert!(p.t <= (tv - 1) as f64);
                    }
                }
            }
        }

        #[test]
        fn rotation_preserves_pair_norms(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = RopeConfig::new(8).unwrap();
            let x = Tensor::<f64>::randn(&[1, 8], 1.0, &mut rng);
            let p = PositionTriple::new(rng.gen_range(0.0..50.0), rng.gen_range(0.0..50.0), rng.gen_range(0.0..50.0));
            let y = apply_rotary(&x, &[p], &cfg).unwrap();
            for j in 0..4 {
                let a = x.data()[2 * j].hypot(x.data()[2 * j + 1]);
                let b = y.data()[2 * j].hypot(y.data()[2 * j + 1]);
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
