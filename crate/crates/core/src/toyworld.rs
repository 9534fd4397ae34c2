//! Synthetic paired audio-video latents with controllable synchrony.
//!
//! A sample is a script of event frames. Each event frame lights a fixed
//! window of the video latent, and the audio latent gets a full-column spike
//! at the audio step aligned with that frame (optionally shifted by
//! `offset_steps`). Background is zero plus small Gaussian noise.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, shape_err, Result};
use crate::flow::{fm_error, TrainExample};
use crate::preference::RewardVector;
use crate::rope::{round_ratio, GridSpec};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Detection threshold for both event detectors.
pub const DETECT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyWorld {
    pub grid: GridSpec,
    pub video_channels: usize,
    pub audio_channels: usize,
    /// Size of the class vocabulary; class = event count, clamped.
    pub n_classes: usize,
    pub noise_std: f64,
    /// Training prompts draw `1..=max_events` events.
    pub max_events: usize,
}

impl Default for ToyWorld {
    fn default() -> Self {
        Self {
            grid: GridSpec {
                video_frames: 8,
                height: 4,
                width: 4,
                audio_steps: 32,
                freq_bins: 8,
            },
            video_channels: 2,
            audio_channels: 2,
            n_classes: 4,
            noise_std: 0.05,
            max_events: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventScript {
    pub event_frames: Vec<usize>,
    pub class_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToySample<T> {
    pub video: Tensor<T>,
    pub audio: Tensor<T>,
    /// Noise-free latents of the same script.
    pub clean_video: Tensor<T>,
    pub clean_audio: Tensor<T>,
    pub script: EventScript,
    pub offset_steps: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyncReport {
    pub desync_steps: f64,
    pub video_events: usize,
    pub audio_events: usize,
    /// Set when either modality had no detections; `desync_steps` is then
    /// the worst case `T_a`.
    pub degenerate: bool,
}

/// One line of a dataset manifest; latents are regenerated on demand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub seed: u64,
    pub n_events: usize,
    pub offset_steps: i64,
    pub grid: GridSpec,
}

/// Rows `[start, end)` of the lit window along an axis of length `n`.
fn window(n: usize) -> (usize, usize) {
    let len = (n / 2).max(1);
    let start = (n - len) / 2;
    (start, start + len)
}

impl ToyWorld {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.video_channels == 0 || self.audio_channels == 0 || self.n_classes == 0 {
            return Err(contract("toy world extents must be positive"));
        }
        if self.max_events == 0 || self.max_events > self.grid.video_frames {
            return Err(contract(format!(
                "max_events {} not in [1, {}]",
                self.max_events, self.grid.video_frames
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(contract("noise_std must be non-negative"));
        }
        Ok(())
    }

    pub fn video_shape(&self) -> [usize; 4] {
        let g = &self.grid;
        [g.video_frames, g.height, g.width, self.video_channels]
    }

    pub fn audio_shape(&self) -> [usize; 3] {
        let g = &self.grid;
        [g.audio_steps, g.freq_bins, self.audio_channels]
    }

    pub fn class_of(&self, n_events: usize) -> usize {
        n_events.min(self.n_classes - 1)
    }

    /// Audio steps that carry a spike for the given script and offset.
    pub fn spike_steps(&self, frames: &[usize], offset_steps: i64) -> Vec<usize> {
        let g = &self.grid;
        let mut steps: Vec<usize> = frames
            .iter()
            .map(|&f| round_ratio(f, g.audio_steps, g.video_frames) as i64 + offset_steps)
            .filter(|&s| (0..g.audio_steps as i64).contains(&s))
            .map(|s| s as usize)
            .collect();
        steps.sort_unstable();
        steps.dedup();
        steps
    }

    /// Noise-free latents for a script.
    pub fn render<T: Real>(&self, frames: &[usize], offset_steps: i64) -> (Tensor<T>, Tensor<T>) {
        let g = &self.grid;
        let (cv, ca) = (self.video_channels, self.audio_channels);
        let mut video = Tensor::zeros(&self.video_shape());
        let (y0, y1) = window(g.height);
        let (x0, x1) = window(g.width);
        for &f in frames {
            for y in y0..y1 {
                for x in x0..x1 {
                    for c in 0..cv {
                        video.data_mut()[((f * g.height + y) * g.width + x) * cv + c] = T::one();
                    }
                }
            }
        }
        let mut audio = Tensor::zeros(&self.audio_shape());
        for s in self.spike_steps(frames, offset_steps) {
            audio.data_mut()[s * g.freq_bins * ca..(s + 1) * g.freq_bins * ca].fill(T::one());
        }
        (video, audio)
    }

    pub fn generate_sample<T: Real>(&self, seed: u64, n_events: usize, offset_steps: i64) -> Result<ToySample<T>> {
        self.validate()?;
        let g = &self.grid;
        if n_events > g.video_frames {
            return Err(contract(format!("{n_events} events exceed {} frames", g.video_frames)));
        }
        if offset_steps.unsigned_abs() as usize >= g.audio_steps {
            return Err(contract(format!("|offset| {offset_steps} must be < {}", g.audio_steps)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut frames = sample_indices(&mut rng, g.video_frames, n_events).into_vec();
        frames.sort_unstable();
        let (clean_video, clean_audio) = self.render::<T>(&frames, offset_steps);
        let noisy = |clean: &Tensor<T>, rng: &mut ChaCha8Rng| -> Result<Tensor<T>> {
            clean.add(&Tensor::randn(clean.shape(), self.noise_std, rng))
        };
        let video = noisy(&clean_video, &mut rng)?;
        let audio = noisy(&clean_audio, &mut rng)?;
        Ok(ToySample {
            video,
            audio,
            clean_video,
            clean_audio,
            script: EventScript {
                class_id: self.class_of(n_events),
                event_frames: frames,
            },
            offset_steps,
        })
    }

    /// Deterministic training prompt `index` of the stream seeded by `seed`:
    /// `1..=max_events` aligned events.
    pub fn record(&self, seed: u64, index: u64) -> DatasetRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03));
        DatasetRecord {
            seed: rng.gen(),
            n_events: rng.gen_range(1..=self.max_events),
            offset_steps: 0,
            grid: self.grid,
        }
    }

    pub fn manifest(&self, seed: u64, n: usize) -> Vec<DatasetRecord> {
        (0..n as u64).map(|i| self.record(seed, i)).collect()
    }

    pub fn sample_for<T: Real>(&self, rec: &DatasetRecord) -> Result<ToySample<T>> {
        if rec.grid != self.grid {
            return Err(contract(format!("record grid {} != world grid {}", rec.grid, self.grid)));
        }
        self.generate_sample(rec.seed, rec.n_events, rec.offset_steps)
    }

    pub fn example<T: Real>(&self, seed: u64, index: u64) -> Result<TrainExample<T>> {
        let s = self.sample_for::<T>(&self.record(seed, index))?;
        Ok(TrainExample {
            grid: self.grid,
            video: s.video,
            audio: s.audio,
            class_id: s.script.class_id,
        })
    }

    /// Frames whose lit window has mean > 0.5.
    pub fn detect_video<T: Real>(&self, video: &Tensor<T>) -> Result<Vec<usize>> {
        if video.shape() != self.video_shape() {
            return Err(shape_err("detect_video", video.shape(), &self.video_shape()));
        }
        let g = &self.grid;
        let cv = self.video_channels;
        let (y0, y1) = window(g.height);
        let (x0, x1) = window(g.width);
        let count = ((y1 - y0) * (x1 - x0) * cv) as f64;
        Ok((0..g.video_frames)
            .filter(|&f| {
                let mut sum = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        for c in 0..cv {
                            sum += video.data()[((f * g.height + y) * g.width + x) * cv + c].as_f64();
                        }
                    }
                }
                sum / count > DETECT_THRESHOLD
            })
            .collect())
    }

    /// Audio steps whose full column has mean > 0.5.
    pub fn detect_audio<T: Real>(&self, audio: &Tensor<T>) -> Result<Vec<usize>> {
        if audio.shape() != self.audio_shape() {
            return Err(shape_err("detect_audio", audio.shape(), &self.audio_shape()));
        }
        let width = self.grid.freq_bins * self.audio_channels;
        Ok(audio
            .data()
            .chunks(width)
            .enumerate()
            .filter(|(_, col)| col.iter().map(|x| x.as_f64()).sum::<f64>() / width as f64 > DETECT_THRESHOLD)
            .map(|(s, _)| s)
            .collect())
    }

    /// Mean distance, in audio steps, from each detected video event's
    /// aligned step to the nearest detected audio spike.
    pub fn toy_desync<T: Real>(&self, video: &Tensor<T>, audio: &Tensor<T>) -> Result<SyncReport> {
        let frames = self.detect_video(video)?;
        let spikes = self.detect_audio(audio)?;
        let g = &self.grid;
        if frames.is_empty() || spikes.is_empty() {
            return Ok(SyncReport {
                desync_steps: g.audio_steps as f64,
                video_events: frames.len(),
                audio_events: spikes.len(),
                degenerate: true,
            });
        }
        let total: usize = frames
            .iter()
            .map(|&f| {
                let expected = round_ratio(f, g.audio_steps, g.video_frames);
                spikes.iter().map(|&s| s.abs_diff(expected)).min().expect("non-empty")
            })
            .sum();
        Ok(SyncReport {
            desync_steps: total as f64 / frames.len() as f64,
            video_events: frames.len(),
            audio_events: spikes.len(),
            degenerate: false,
        })
    }

    /// Raw rewards of generated latents against a reference sample:
    /// audio `[−mse]`, video `[−mse, −|event count error|]`, av `[−desync]`.
    pub fn toy_rewards<T: Real>(&self, audio: &Tensor<T>, video: &Tensor<T>, reference: &ToySample<T>) -> Result<RewardVector> {
        let mse_a = fm_error(audio, &reference.clean_audio)?.as_f64();
        let mse_v = fm_error(video, &reference.clean_video)?.as_f64();
        let detected = self.detect_video(video)?.len();
        let count_err = detected.abs_diff(reference.script.event_frames.len()) as f64;
        let sync = self.toy_desync(video, audio)?;
        RewardVector::new(vec![-mse_a], vec![-mse_v, -count_err], vec![-sync.desync_steps])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_is_centred() {
        assert_eq!(window(4), (1, 3));
        assert_eq!(window(2), (0, 1));
        assert_eq!(window(1), (0, 1));
        assert_eq!(window(5), (1, 3));
    }

    #[test]
    fn spikes_follow_aligned_steps() {
        let w = ToyWorld::default();
        assert_eq!(w.spike_steps(&[1, 6], 0), vec![4, 24]);
        assert_eq!(w.spike_steps(&[0, 7], -1), vec![27]);
        assert_eq!(w.spike_steps(&[7], 5), Vec::<usize>::new());
    }
}
