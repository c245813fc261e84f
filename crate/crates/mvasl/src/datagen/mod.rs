//! Synthetic multi-view video generation with planted, per-view-visible
//! action segments, plus the frame samplers used for training and testing.
//!
//! Each planted segment renders a class-keyed colored block at a class-keyed
//! location into exactly the views that can see it; everything else is pixel
//! noise. Video-level labels follow the planted segments, while the segment
//! table itself is kept for evaluation only and never shown to the trainer.

pub mod format;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

pub use format::{read_dataset, write_dataset, DatasetReader, ManifestEntry, RecordMeta};

use crate::numerics::Tensor;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("sampler needs raw_length >= T, got {raw} < {t}")]
    TooFewFrames { raw: usize, t: usize },
    #[error("bad magic bytes; not a dataset file")]
    BadMagic,
    #[error("unsupported format version {0}")]
    BadVersion(u16),
    #[error("truncated record at offset {0}")]
    Truncated(u64),
    #[error("record {index} out of range ({len} records)")]
    OutOfRange { index: usize, len: usize },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

/// Generator configuration. Defaults are the desk-scale setup: 4 views,
/// 6 classes, 32x32 RGB frames, 32 raw frames per video, 500 videos split
/// 400/100.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_views: usize,
    pub num_classes: usize,
    pub frames_per_video: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub videos: usize,
    pub max_concurrent_actions: usize,
    pub visibility_prob: f64,
    pub noise_std: f64,
    pub train_ratio: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_views: 4,
            num_classes: 6,
            frames_per_video: 32,
            height: 32,
            width: 32,
            channels: 3,
            videos: 500,
            max_concurrent_actions: 3,
            visibility_prob: 0.6,
            noise_std: 0.1,
            train_ratio: 0.8,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_views < 1 {
            return Err(DatasetError::InvalidConfig("num_views must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(DatasetError::InvalidConfig("num_classes must be >= 2".into()));
        }
        if self.frames_per_video < 8 {
            return Err(DatasetError::InvalidConfig("frames_per_video must be >= 8".into()));
        }
        if !(self.visibility_prob > 0.0 && self.visibility_prob <= 1.0) {
            return Err(DatasetError::InvalidConfig("visibility_prob must be in (0, 1]".into()));
        }
        if self.max_concurrent_actions < 1 || self.max_concurrent_actions > self.num_classes {
            return Err(DatasetError::InvalidConfig(
                "max_concurrent_actions must be in 1..=num_classes".into(),
            ));
        }
        if self.noise_std < 0.0 {
            return Err(DatasetError::InvalidConfig("noise_std must be >= 0".into()));
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return Err(DatasetError::InvalidConfig("train_ratio must be in (0, 1)".into()));
        }
        if self.height < 4 || self.width < 4 || self.channels < 1 {
            return Err(DatasetError::InvalidConfig("frame dimensions too small".into()));
        }
        if self.frames_per_video > u16::MAX as usize || self.num_classes > u16::MAX as usize {
            return Err(DatasetError::InvalidConfig("dimension exceeds u16 record encoding".into()));
        }
        Ok(())
    }
}

/// A planted action: class, frame interval `[onset, offset)`, and which
/// views render it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub class: u16,
    pub onset: u16,
    pub offset: u16,
    pub visible_views: Vec<bool>,
}

/// Raw multi-view frames in storage precision (f32), laid out
/// `[view][frame][channel][row][col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStore {
    pub views: usize,
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FrameStore {
    pub fn zeros(views: usize, frames: usize, channels: usize, height: usize, width: usize) -> Self {
        let len = views * frames * channels * height * width;
        FrameStore { views, frames, channels, height, width, data: vec![0.0; len] }
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn frame_offset(&self, view: usize, frame: usize) -> usize {
        (view * self.frames + frame) * self.frame_len()
    }

    pub fn frame(&self, view: usize, frame: usize) -> &[f32] {
        let o = self.frame_offset(view, frame);
        &self.data[o..o + self.frame_len()]
    }

    fn pixel_mut(&mut self, view: usize, frame: usize, channel: usize, row: usize, col: usize) -> &mut f32 {
        let o = self.frame_offset(view, frame)
            + channel * self.height * self.width
            + row * self.width
            + col;
        &mut self.data[o]
    }
}

/// One generated video: frames, weak video-level labels, and the generator's
/// ground-truth segments (evaluation only).
#[derive(Debug, Clone, PartialEq)]
pub struct SynthVideo {
    pub frames: FrameStore,
    pub labels: Vec<bool>,
    pub segments: Vec<Segment>,
}

/// Trainer-facing view of a video: frames and weak labels, no segments.
/// The training path type-checks against this, keeping the weak-label
/// discipline enforced by construction.
#[derive(Debug, Clone, Copy)]
pub struct WeakView<'a> {
    pub frames: &'a FrameStore,
    pub labels: &'a [bool],
}

impl<'a> From<&'a SynthVideo> for WeakView<'a> {
    fn from(v: &'a SynthVideo) -> Self {
        WeakView { frames: &v.frames, labels: &v.labels }
    }
}

/// Frame-sampled, f64-converted input for one video: one `[T, D*H*W]`
/// tensor per view plus the weak label vector.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub views: Vec<Tensor>,
    pub labels: Vec<bool>,
}

/// Gather the frames at `indices` from a weak view into per-view tensors.
pub fn sample_example(video: WeakView<'_>, indices: &[usize]) -> TrainExample {
    let fs = video.frames;
    let flen = fs.frame_len();
    let mut views = Vec::with_capacity(fs.views);
    for v in 0..fs.views {
        let mut data = Vec::with_capacity(indices.len() * flen);
        for &t in indices {
            data.extend(fs.frame(v, t).iter().map(|&x| x as f64));
        }
        views.push(Tensor::new(vec![indices.len(), flen], data).expect("finite frames"));
    }
    TrainExample { views, labels: video.labels.to_vec() }
}

/// Color for class `c`: each channel is +1 or -1 keyed by the bits of
/// `c + 1`, giving distinct colors for up to `2^D - 1` classes.
fn class_color(class: usize, channels: usize) -> Vec<f64> {
    let period = (1usize << channels.min(16)) - 1;
    let key = (class % period) + 1;
    (0..channels).map(|d| if key >> d & 1 == 1 { 1.0 } else { -1.0 }).collect()
}

/// Block placement for class `c` on a 4x4 grid of cells (fewer when the
/// frame is small); classes beyond the grid wrap around.
fn class_block(class: usize, height: usize, width: usize) -> (usize, usize, usize, usize) {
    let bh = (height / 4).max(1);
    let bw = (width / 4).max(1);
    let cells_y = height / bh;
    let cells_x = width / bw;
    let cell = class % (cells_x * cells_y);
    let cy = cell / cells_x;
    let cx = cell % cells_x;
    (cy * bh, bh, cx * bw, bw)
}

fn gaussian_fill(rng: &mut ChaCha8Rng, std: f64, out: &mut [f32]) {
    // Box-Muller on (0, 1] uniforms; one pair per iteration.
    let mut i = 0;
    while i < out.len() {
        let u1: f64 = 1.0 - rng.gen::<f64>();
        let u2: f64 = rng.gen();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out[i] = (std * r * theta.cos()) as f32;
        if i + 1 < out.len() {
            out[i + 1] = (std * r * theta.sin()) as f32;
        }
        i += 2;
    }
}

fn generate_one(config: &SynthConfig, index: usize) -> SynthVideo {
    // Per-video derived seed keeps output identical no matter how videos
    // are scheduled across workers.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ index as u64);
    let (n, t_raw, d, h, w) =
        (config.num_views, config.frames_per_video, config.channels, config.height, config.width);
    let mut frames = FrameStore::zeros(n, t_raw, d, h, w);
    if config.noise_std > 0.0 {
        gaussian_fill(&mut rng, config.noise_std, &mut frames.data);
    }

    let count = rng.gen_range(1..=config.max_concurrent_actions);
    let mut classes: Vec<usize> = (0..config.num_classes).collect();
    for i in 0..count {
        let j = rng.gen_range(i..classes.len());
        classes.swap(i, j);
    }
    let mut segments = Vec::with_capacity(count);
    for &class in classes.iter().take(count) {
        let min_len = (t_raw / 4).max(1);
        let max_len = (t_raw / 2).max(min_len);
        let len = rng.gen_range(min_len..=max_len);
        let onset = rng.gen_range(0..=t_raw - len);
        let visible_views: Vec<bool> = (0..n).map(|_| rng.gen_bool(config.visibility_prob)).collect();
        segments.push(Segment {
            class: class as u16,
            onset: onset as u16,
            offset: (onset + len) as u16,
            visible_views,
        });
    }

    for seg in &segments {
        let color = class_color(seg.class as usize, d);
        let (r0, bh, c0, bw) = class_block(seg.class as usize, h, w);
        for (view, visible) in seg.visible_views.iter().enumerate() {
            if !visible {
                continue;
            }
            for t in seg.onset as usize..seg.offset as usize {
                for (ch, &col) in color.iter().enumerate() {
                    for r in r0..r0 + bh {
                        for c in c0..c0 + bw {
                            *frames.pixel_mut(view, t, ch, r, c) = col as f32;
                        }
                    }
                }
            }
        }
    }

    let mut labels = vec![false; config.num_classes];
    for seg in &segments {
        labels[seg.class as usize] = true;
    }
    SynthVideo { frames, labels, segments }
}

/// Generate the full dataset. Per-video seeds are derived from the config
/// seed, so output is deterministic and order-independent.
pub fn generate(config: &SynthConfig) -> Result<Vec<SynthVideo>> {
    config.validate()?;
    Ok((0..config.videos).map(|i| generate_one(config, i)).collect())
}

/// Jittered training sampler: partition `[0, raw_length)` into `t` equal
/// bins and sample one index uniformly from each, giving strictly
/// increasing indices that cover the whole clip.
pub fn sample_train_indices(raw_length: usize, t: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if raw_length < t || t == 0 {
        return Err(DatasetError::TooFewFrames { raw: raw_length, t });
    }
    let mut out = Vec::with_capacity(t);
    for i in 0..t {
        let lo = (i * raw_length).div_ceil(t);
        let hi = ((i + 1) * raw_length).div_ceil(t);
        out.push(lo + rng.gen_range(0..hi - lo));
    }
    Ok(out)
}

/// Deterministic test sampler: the midpoint of each of the `t` equal bins.
pub fn sample_test_indices(raw_length: usize, t: usize) -> Result<Vec<usize>> {
    if raw_length < t || t == 0 {
        return Err(DatasetError::TooFewFrames { raw: raw_length, t });
    }
    Ok((0..t).map(|i| (2 * i + 1) * raw_length / (2 * t)).collect())
}

/// Train/test split tag carried by the dataset manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

/// Stratified shuffle split: videos are grouped by their exact label set,
/// each group is shuffled and split at `ratio`.
pub fn stratified_split(
    labels: &[Vec<bool>],
    ratio: f64,
    rng: &mut impl Rng,
) -> Result<Vec<SplitTag>> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DatasetError::InvalidConfig("split ratio must be in (0, 1)".into()));
    }
    let mut groups: BTreeMap<Vec<bool>, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        groups.entry(l.clone()).or_default().push(i);
    }
    let mut tags = vec![SplitTag::Train; labels.len()];
    for (_, mut members) in groups {
        for i in (1..members.len()).rev() {
            let j = rng.gen_range(0..=i);
            members.swap(i, j);
        }
        let n_train = ((members.len() as f64 * ratio).round() as usize).min(members.len());
        for &idx in &members[n_train..] {
            tags[idx] = SplitTag::Test;
        }
    }
    Ok(tags)
}
