//! Synthetic rotation-extent clips.
//!
//! Each clip shows a bright anti-aliased segment ("clock hand") swept
//! counter-clockwise about a jittered center. Classes differ only in the total
//! rotation over the clip, so a model must read motion extent rather than
//! appearance or position.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Rng};
use crate::tensor::Tensor;

pub const INDEX_VERSION: u32 = 1;
pub const INDEX_FILE: &str = "index.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Jitter {
    /// Center offset drawn uniformly from `[-position_px, position_px]` per axis.
    pub position_px: f64,
    /// Start angle drawn uniformly from `[-phase_deg, phase_deg]`.
    pub phase_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub length_px: f64,
    pub width_px: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthTaskConfig {
    pub num_classes: usize,
    pub t_frames: usize,
    /// `[H_px, W_px]`
    pub resolution: [usize; 2],
    pub channels: usize,
    /// Total rotation per class, in turns.
    pub rotation_extents: Vec<f64>,
    pub noise_sigma: f64,
    pub jitter: Jitter,
    pub segment: Segment,
    /// Per-class counts; under a long tail these are the head-class counts.
    pub samples_per_class: SplitSizes,
    /// Class `c` gets `round(n * ratio^c)` samples (at least 1) in every split.
    #[serde(default)]
    pub long_tail_ratio: Option<f64>,
    pub seed: u64,
}

impl SynthTaskConfig {
    /// 4 classes, extents {0.25, 0.5, 0.75, 1.0} turns, T=16, 32x32 pixels,
    /// 200 train and 100 test clips.
    pub fn acceptance(seed: u64) -> Self {
        Self {
            num_classes: 4,
            t_frames: 16,
            resolution: [32, 32],
            channels: 1,
            rotation_extents: vec![0.25, 0.5, 0.75, 1.0],
            noise_sigma: 0.05,
            jitter: Jitter {
                position_px: 2.0,
                phase_deg: 15.0,
            },
            segment: Segment {
                length_px: 12.0,
                width_px: 2.0,
            },
            samples_per_class: SplitSizes {
                train: 50,
                val: 10,
                test: 25,
            },
            long_tail_ratio: None,
            seed,
        }
    }

    /// Same geometry with neighbouring classes only 0.1 turns apart.
    pub fn hard(seed: u64) -> Self {
        Self {
            rotation_extents: vec![0.5, 0.6, 0.7, 0.8],
            ..Self::acceptance(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 || self.rotation_extents.len() != self.num_classes {
            return bad(format!(
                "{} rotation extents for {} classes",
                self.rotation_extents.len(),
                self.num_classes
            ));
        }
        if self.t_frames == 0 || self.resolution.contains(&0) || self.channels == 0 {
            return bad("clip dimensions must be positive".into());
        }
        if self.min_extent_gap() <= 0.0 {
            return bad("rotation extents must be pairwise distinct".into());
        }
        if !(self.noise_sigma >= 0.0) || !(self.jitter.position_px >= 0.0) || !(self.jitter.phase_deg >= 0.0) {
            return bad("noise and jitter magnitudes must be nonnegative".into());
        }
        if !(self.segment.length_px > 0.0 && self.segment.width_px > 0.0) {
            return bad("segment length and width must be positive".into());
        }
        if let Some(r) = self.long_tail_ratio {
            if !(r > 0.0 && r <= 1.0) {
                return bad(format!("long-tail ratio {r} outside (0, 1]"));
            }
        }
        Ok(())
    }

    /// Smallest pairwise distance between extents; `inf` for one class.
    pub fn min_extent_gap(&self) -> f64 {
        let mut gap = f64::INFINITY;
        for (i, a) in self.rotation_extents.iter().enumerate() {
            for b in &self.rotation_extents[i + 1..] {
                gap = gap.min((a - b).abs());
            }
        }
        gap
    }

    pub fn class_count(&self, split: Split, class: usize) -> usize {
        let n = match split {
            Split::Train => self.samples_per_class.train,
            Split::Val => self.samples_per_class.val,
            Split::Test => self.samples_per_class.test,
        };
        match self.long_tail_ratio {
            Some(r) if n > 0 => ((n as f64 * r.powi(class as i32)).round() as usize).max(1),
            _ => n,
        }
    }

    pub fn clip_shape(&self) -> [usize; 4] {
        [self.t_frames, self.resolution[0], self.resolution[1], self.channels]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Generation parameters actually drawn for a clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub split: Split,
    pub index: usize,
    pub extent_turns: f64,
    pub phase_deg: f64,
    /// `[x, y]` in pixel coordinates.
    pub center: [f64; 2],
    pub noise_sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledClip {
    /// `[T, H_px, W_px, ch]`
    pub clip: Tensor<f64>,
    pub label: usize,
    pub meta: ClipMeta,
}

fn segment_distance(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let s = (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0);
    let (qx, qy) = (ax + s * dx - px, ay + s * dy - py);
    (qx * qx + qy * qy).sqrt()
}

/// Hand angle in radians at frame `t`, counter-clockwise on screen.
pub fn hand_angle(cfg: &SynthTaskConfig, extent_turns: f64, phase_deg: f64, t: usize) -> f64 {
    let frac = if cfg.t_frames > 1 {
        t as f64 / (cfg.t_frames - 1) as f64
    } else {
        0.0
    };
    phase_deg.to_radians() + 2.0 * PI * extent_turns * frac
}

/// Renders one clip. Nuisance draws precede noise draws and do not depend on
/// the class, so equal RNG states give equal nuisances across classes.
pub fn generate_clip(cfg: &SynthTaskConfig, class_id: usize, rng: &mut Rng) -> Result<LabeledClip> {
    if class_id >= cfg.num_classes {
        return Err(Error::Range(format!("class {class_id} of {}", cfg.num_classes)));
    }
    let uniform = |rng: &mut Rng, m: f64| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
    let [h, w] = cfg.resolution;
    let cx = w as f64 / 2.0 + uniform(rng, cfg.jitter.position_px);
    let cy = h as f64 / 2.0 + uniform(rng, cfg.jitter.position_px);
    let phase = uniform(rng, cfg.jitter.phase_deg);
    let extent = cfg.rotation_extents[class_id];
    let ch = cfg.channels;
    let half = 0.5 * cfg.segment.width_px;

    let mut data = Vec::with_capacity(cfg.t_frames * h * w * ch);
    for t in 0..cfg.t_frames {
        let theta = hand_angle(cfg, extent, phase, t);
        let ex = cx + cfg.segment.length_px * theta.cos();
        let ey = cy - cfg.segment.length_px * theta.sin();
        for y in 0..h {
            for x in 0..w {
                let d = segment_distance(x as f64 + 0.5, y as f64 + 0.5, cx, cy, ex, ey);
                let v = (half + 0.5 - d).clamp(0.0, 1.0);
                data.extend(std::iter::repeat_n(v, ch));
            }
        }
    }
    if cfg.noise_sigma > 0.0 {
        for v in data.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += cfg.noise_sigma * z;
        }
    }
    Ok(LabeledClip {
        clip: Tensor::new(cfg.clip_shape().to_vec(), data)?,
        label: class_id,
        meta: ClipMeta {
            split: Split::Train,
            index: 0,
            extent_turns: extent,
            phase_deg: phase,
            center: [cx, cy],
            noise_sigma: cfg.noise_sigma,
        },
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Generator config, absent for datasets loaded from elsewhere.
    pub config: Option<SynthTaskConfig>,
    pub train: Vec<LabeledClip>,
    pub val: Vec<LabeledClip>,
    pub test: Vec<LabeledClip>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[LabeledClip] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, s: Split) -> &mut Vec<LabeledClip> {
        match s {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    pub fn num_classes(&self) -> usize {
        match &self.config {
            Some(c) => c.num_classes,
            None => Split::ALL
                .iter()
                .flat_map(|&s| self.split(s))
                .map(|c| c.label + 1)
                .max()
                .unwrap_or(0),
        }
    }

    pub fn clip_shape(&self) -> Option<Vec<usize>> {
        Split::ALL
            .iter()
            .flat_map(|&s| self.split(s))
            .next()
            .map(|c| c.clip.shape().to_vec())
    }
}

/// Every split draws from its own RNG domain; each clip from its own stream.
pub fn generate_dataset(cfg: &SynthTaskConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut ds = Dataset {
        config: Some(cfg.clone()),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for split in Split::ALL {
        let domain = format!("synth/{}", split.name());
        let out = ds.split_mut(split);
        for class in 0..cfg.num_classes {
            for _ in 0..cfg.class_count(split, class) {
                let index = out.len();
                let mut rng = stream(cfg.seed, &domain, index as u64);
                let mut clip = generate_clip(cfg, class, &mut rng)?;
                clip.meta.split = split;
                clip.meta.index = index;
                out.push(clip);
            }
        }
    }
    Ok(ds)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexItem {
    file: String,
    label: usize,
    meta: ClipMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Index {
    version: u32,
    config: Option<SynthTaskConfig>,
    /// `[T, H_px, W_px, ch]` of every clip.
    clip_shape: Vec<usize>,
    items: Vec<IndexItem>,
}

/// Writes one raw little-endian `f64` file per clip plus `index.json`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let clip_shape = ds
        .clip_shape()
        .ok_or_else(|| Error::Dataset("refusing to save an empty dataset".into()))?;
    let mut items = Vec::new();
    for split in Split::ALL {
        for (i, c) in ds.split(split).iter().enumerate() {
            if c.clip.shape() != clip_shape.as_slice() {
                return Err(Error::Dataset(format!("clip {} has shape {:?}", i, c.clip.shape())));
            }
            let file = format!("{}_{i:05}.f64", split.name());
            let mut bytes = Vec::with_capacity(c.clip.numel() * 8);
            for v in c.clip.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            fs::write(dir.join(&file), bytes)?;
            items.push(IndexItem {
                file,
                label: c.label,
                meta: c.meta.clone(),
            });
        }
    }
    let index = Index {
        version: INDEX_VERSION,
        config: ds.config.clone(),
        clip_shape,
        items,
    };
    fs::write(dir.join(INDEX_FILE), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let index: Index = serde_json::from_str(&fs::read_to_string(dir.join(INDEX_FILE))?)?;
    if index.version != INDEX_VERSION {
        return Err(Error::Dataset(format!("unsupported index version {}", index.version)));
    }
    if index.clip_shape.len() != 4 || index.clip_shape.contains(&0) {
        return Err(Error::Dataset(format!("bad clip shape {:?}", index.clip_shape)));
    }
    if let Some(cfg) = &index.config {
        if cfg.clip_shape().as_slice() != index.clip_shape.as_slice() {
            return Err(Error::Dataset("clip shape disagrees with generator config".into()));
        }
    }
    let numel: usize = index.clip_shape.iter().product();
    let mut ds = Dataset {
        config: index.config,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for item in index.items {
        if item.file.contains('/') || item.file.contains('\\') || item.file.starts_with('.') {
            return Err(Error::Dataset(format!("illegal file name {}", item.file)));
        }
        let bytes = fs::read(dir.join(&item.file))?;
        if bytes.len() != numel * 8 {
            return Err(Error::Dataset(format!(
                "{} holds {} bytes, expected {}",
                item.file,
                bytes.len(),
                numel * 8
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        let split = item.meta.split;
        ds.split_mut(split).push(LabeledClip {
            clip: Tensor::new(index.clip_shape.clone(), data)?,
            label: item.label,
            meta: item.meta,
        });
    }
    if let Some(cfg) = &ds.config {
        let k = cfg.num_classes;
        if Split::ALL.iter().flat_map(|&s| ds.split(s)).any(|c| c.label >= k) {
            return Err(Error::Dataset("label outside the configured class range".into()));
        }
    }
    Ok(ds)
}

/// Orientation of the hand in frame `t` (radians, counter-clockwise from +x),
/// from second moments about the intensity centroid, with the sign resolved
/// by which side of `center` the centroid lies on.
pub fn orientation(clip: &Tensor<f64>, t: usize, center: [f64; 2]) -> f64 {
    let [_, h, w, ch] = *clip.shape() else {
        panic!("clip must be [T, H, W, ch]");
    };
    let frame = &clip.data()[t * h * w * ch..(t + 1) * h * w * ch];
    let (mut m, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let v = frame[(y * w + x) * ch].max(0.0);
            m += v;
            sx += v * (x as f64 + 0.5);
            sy += v * (h as f64 - y as f64 - 0.5);
        }
    }
    let (mx, my) = (sx / m, sy / m);
    let (mut cxx, mut cyy, mut cxy) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let v = frame[(y * w + x) * ch].max(0.0);
            let dx = x as f64 + 0.5 - mx;
            let dy = h as f64 - y as f64 - 0.5 - my;
            cxx += v * dx * dx;
            cyy += v * dy * dy;
            cxy += v * dx * dy;
        }
    }
    let axis = 0.5 * (2.0 * cxy).atan2(cxx - cyy);
    let (ox, oy) = (mx - center[0], my - (h as f64 - center[1]));
    if ox * axis.cos() + oy * axis.sin() < 0.0 {
        axis + PI
    } else {
        axis
    }
}

/// Unwrapped orientation change from the first frame, per frame.
pub fn orientation_trajectory(clip: &LabeledClip) -> Vec<f64> {
    let t_frames = clip.clip.shape()[0];
    let mut out = Vec::with_capacity(t_frames);
    let mut prev = orientation(&clip.clip, 0, clip.meta.center);
    let mut acc = 0.0;
    out.push(0.0);
    for t in 1..t_frames {
        let a = orientation(&clip.clip, t, clip.meta.center);
        let mut d = a - prev;
        while d > PI {
            d -= 2.0 * PI;
        }
        while d <= -PI {
            d += 2.0 * PI;
        }
        acc += d;
        out.push(acc);
        prev = a;
    }
    out
}

/// Accuracy of a nearest-centroid classifier on orientation trajectories,
/// fitted on `train` and scored on `test`.
pub fn nearest_centroid_accuracy(train: &[LabeledClip], test: &[LabeledClip], num_classes: usize) -> f64 {
    let t_frames = train.first().map_or(0, |c| c.clip.shape()[0]);
    let mut sums = vec![vec![0.0; t_frames]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for c in train {
        for (s, v) in sums[c.label].iter_mut().zip(orientation_trajectory(c)) {
            *s += v;
        }
        counts[c.label] += 1;
    }
    let centroids: Vec<Option<Vec<f64>>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect();
    let correct = test
        .iter()
        .filter(|c| {
            let traj = orientation_trajectory(c);
            let mut best = (usize::MAX, f64::INFINITY);
            for (k, cen) in centroids.iter().enumerate() {
                if let Some(cen) = cen {
                    let d: f64 = cen.iter().zip(&traj).map(|(a, b)| (a - b).powi(2)).sum();
                    if d < best.1 {
                        best = (k, d);
                    }
                }
            }
            best.0 == c.label
        })
        .count();
    correct as f64 / test.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clean(seed: u64) -> SynthTaskConfig {
        SynthTaskConfig {
            noise_sigma: 0.0,
            jitter: Jitter {
                position_px: 0.0,
                phase_deg: 0.0,
            },
            ..SynthTaskConfig::acceptance(seed)
        }
    }

    fn angle_diff_deg(a: f64, b: f64) -> f64 {
        let d = (a - b).to_degrees().rem_euclid(360.0);
        d.min(360.0 - d)
    }

    #[test]
    fn zero_extent_gives_static_clip() {
        let cfg = SynthTaskConfig {
            rotation_extents: vec![0.0, 0.5],
            num_classes: 2,
            ..clean(1)
        };
        let c = generate_clip(&cfg, 0, &mut stream(1, "t", 0)).unwrap();
        let frame = 32 * 32;
        let first = &c.clip.data()[..frame];
        for t in 1..16 {
            assert_eq!(&c.clip.data()[t * frame..(t + 1) * frame], first);
        }
        assert!(c.clip.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn half_turn_flips_orientation() {
        let cfg = clean(2);
        let c = generate_clip(&cfg, 1, &mut stream(2, "t", 0)).unwrap();
        let first = orientation(&c.clip, 0, c.meta.center);
        let last = orientation(&c.clip, 15, c.meta.center);
        assert!(angle_diff_deg(last, first + PI) < 2.0, "{first} {last}");
        for t in 0..16 {
            let want = hand_angle(&cfg, 0.5, 0.0, t);
            assert!(angle_diff_deg(orientation(&c.clip, t, c.meta.center), want) < 2.0);
        }
    }

    #[test]
    fn oracle_tracks_jittered_hand() {
        let cfg = SynthTaskConfig {
            noise_sigma: 0.0,
            ..SynthTaskConfig::acceptance(3)
        };
        for i in 0..8 {
            let c = generate_clip(&cfg, i % 4, &mut stream(3, "t", i as u64)).unwrap();
            for t in [0, 7, 15] {
                let want = hand_angle(&cfg, c.meta.extent_turns, c.meta.phase_deg, t);
                assert!(angle_diff_deg(orientation(&c.clip, t, c.meta.center), want) < 2.0);
            }
        }
    }

    #[test]
    fn same_nuisance_different_extent() {
        let cfg = SynthTaskConfig::acceptance(4);
        let a = generate_clip(&cfg, 1, &mut stream(4, "t", 9)).unwrap();
        let b = generate_clip(&cfg, 3, &mut stream(4, "t", 9)).unwrap();
        let frame = 32 * 32;
        assert_eq!(&a.clip.data()[..frame], &b.clip.data()[..frame]);
        assert_ne!(&a.clip.data()[15 * frame..], &b.clip.data()[15 * frame..]);
        assert_eq!(a.meta.center, b.meta.center);
    }

    #[test]
    fn balanced_and_long_tail_counts() {
        let mut cfg = SynthTaskConfig::acceptance(5);
        cfg.samples_per_class = SplitSizes {
            train: 10,
            val: 0,
            test: 1,
        };
        let ds = generate_dataset(&cfg).unwrap();
        assert_eq!(ds.train.len(), 40);
        for k in 0..4 {
            assert_eq!(ds.train.iter().filter(|c| c.label == k).count(), 10);
        }
        cfg.samples_per_class.train = 16;
        cfg.long_tail_ratio = Some(0.5);
        let counts: Vec<usize> = (0..4).map(|k| cfg.class_count(Split::Train, k)).collect();
        assert_eq!(counts, vec![16, 8, 4, 2]);
        assert!(generate_dataset(&cfg).unwrap().val.is_empty());
    }

    #[test]
    fn splits_use_disjoint_nuisance_draws() {
        let ds = generate_dataset(&SynthTaskConfig {
            samples_per_class: SplitSizes {
                train: 3,
                val: 3,
                test: 3,
            },
            ..SynthTaskConfig::acceptance(6)
        })
        .unwrap();
        for (a, b) in ds.train.iter().zip(&ds.test) {
            assert_ne!(a.meta.center, b.meta.center);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = SynthTaskConfig::acceptance(7);
        cfg.rotation_extents = vec![0.5, 0.5, 0.75, 1.0];
        assert!(cfg.validate().is_err());
        let mut cfg = SynthTaskConfig::acceptance(7);
        cfg.num_classes = 3;
        assert!(cfg.validate().is_err());
        let cfg = SynthTaskConfig::acceptance(7);
        assert!(generate_clip(&cfg, 4, &mut stream(0, "t", 0)).is_err());
        assert!((SynthTaskConfig::hard(0).min_extent_gap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn oracle_identifies_noise_free_labels() {
        let cfg = SynthTaskConfig {
            noise_sigma: 0.0,
            samples_per_class: SplitSizes {
                train: 4,
                val: 0,
                test: 6,
            },
            ..SynthTaskConfig::hard(8)
        };
        let ds = generate_dataset(&cfg).unwrap();
        assert_eq!(nearest_centroid_accuracy(&ds.train, &ds.test, 4), 1.0);
    }
}
