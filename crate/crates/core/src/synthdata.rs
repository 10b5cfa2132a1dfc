//! Synthetic two-modality video corpus: small shapes sliding across a noisy
//! background, plus a motion modality derived from frame differences.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, SeededRng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Diamond,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    PosX,
    NegX,
    PosY,
    NegY,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::PosX,
        Direction::NegX,
        Direction::PosY,
        Direction::NegY,
    ];

    /// Unit step as `(dy, dx)`.
    pub fn step(self) -> (f64, f64) {
        match self {
            Direction::PosX => (0.0, 1.0),
            Direction::NegX => (0.0, -1.0),
            Direction::PosY => (1.0, 0.0),
            Direction::NegY => (-1.0, 0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Motion {
    pub shape: ShapeKind,
    pub direction: Direction,
    /// Pixels per frame.
    pub speed: f64,
}

impl Motion {
    pub fn for_class(class_id: usize) -> Self {
        Self {
            shape: if (class_id / 4).is_multiple_of(2) {
                ShapeKind::Square
            } else {
                ShapeKind::Diamond
            },
            direction: Direction::ALL[class_id % 4],
            speed: (1 + class_id / 8) as f64,
        }
    }

    /// Ground-truth feature vector `[is_square, is_diamond, vx, vy]`.
    pub fn oracle_features(&self) -> Vec<f64> {
        let (dy, dx) = self.direction.step();
        let square = (self.shape == ShapeKind::Square) as u8 as f64;
        vec![square, 1.0 - square, dx * self.speed, dy * self.speed]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub num_classes: usize,
    pub clips_per_class: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    pub seed: u64,
    pub train_fraction: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            clips_per_class: 40,
            frames: 8,
            height: 16,
            width: 16,
            noise: 0.05,
            seed: 0,
            train_fraction: 0.75,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 16 {
            return Err(Error::Parameter(format!(
                "num_classes must be in [2, 16], got {}",
                self.num_classes
            )));
        }
        if self.clips_per_class < 2 {
            return Err(Error::Parameter(
                "clips_per_class must be at least 2".into(),
            ));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Parameter(format!(
                "frames must be at least 8x8, got {}x{}",
                self.height, self.width
            )));
        }
        if self.frames < 2 {
            return Err(Error::Parameter("clips need at least 2 frames".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Parameter(format!(
                "noise must be non-negative, got {}",
                self.noise
            )));
        }
        let train = self.train_per_class();
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0)
            || train == 0
            || train == self.clips_per_class
        {
            return Err(Error::Parameter(format!(
                "train_fraction {} leaves an empty split",
                self.train_fraction
            )));
        }
        Ok(())
    }

    pub fn train_per_class(&self) -> usize {
        (self.clips_per_class as f64 * self.train_fraction).round() as usize
    }

    pub fn clip_shape(&self) -> [usize; 4] {
        [3, self.frames, self.height, self.width]
    }
}

#[derive(Debug, Clone)]
pub struct SynthClip {
    /// `(3, T, H, W)` in `[0, 1]`.
    pub video: Tensor,
    pub class_id: usize,
    pub clip_id: usize,
    pub motion: Motion,
    /// Shape centre `(y, x)` at frame 0.
    pub start: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub train: Vec<SynthClip>,
    pub test: Vec<SynthClip>,
}

impl Corpus {
    /// Hash of the train/test membership; equal across runs sharing a spec.
    pub fn split_hash(&self) -> u64 {
        let mut parts: Vec<u64> = self.train.iter().map(|c| c.clip_id as u64).collect();
        parts.push(u64::MAX);
        parts.extend(self.test.iter().map(|c| c.clip_id as u64));
        derive_seed(&parts)
    }
}

fn shape_mask(kind: ShapeKind, dy: f64, dx: f64) -> bool {
    match kind {
        ShapeKind::Square => dy.abs() <= 2.0 && dx.abs() <= 2.0,
        ShapeKind::Diamond => dy.abs() + dx.abs() <= 2.5,
    }
}

fn start_range(extent: usize, travel: f64) -> (f64, f64) {
    let lo = 2.0;
    let hi = extent as f64 - 3.0 - travel;
    if hi >= lo {
        (lo, hi)
    } else {
        let mid = (extent as f64 - 1.0 - travel) / 2.0;
        (mid, mid)
    }
}

/// Renders one clip; fully determined by `(spec.seed, clip_id)`.
pub fn render_clip(spec: &CorpusSpec, class_id: usize, clip_id: usize) -> SynthClip {
    let mut rng = SeededRng::new(derive_seed(&[spec.seed, clip_id as u64]));
    let motion = Motion::for_class(class_id);
    let (t, h, w) = (spec.frames, spec.height, spec.width);
    let (sy, sx) = motion.direction.step();
    let travel = (t - 1) as f64 * motion.speed;

    let along = |extent: usize, s: f64, rng: &mut SeededRng| {
        let (lo, hi) = start_range(extent, travel);
        let p = rng.uniform_range(lo, hi).round();
        if s < 0.0 {
            p + travel
        } else {
            p
        }
    };
    let across =
        |extent: usize, rng: &mut SeededRng| rng.uniform_range(2.0, extent as f64 - 3.0).round();
    let start = if sx != 0.0 {
        let x0 = along(w, sx, &mut rng);
        (across(h, &mut rng), x0)
    } else {
        let y0 = along(h, sy, &mut rng);
        (y0, across(w, &mut rng))
    };

    let background: Vec<f64> = (0..3).map(|_| rng.uniform_range(0.0, 0.3)).collect();
    let foreground: Vec<f64> = (0..3).map(|_| rng.uniform_range(0.6, 1.0)).collect();
    let mut video = Tensor::zeros(&spec.clip_shape());
    let data = video.data_mut();
    for f in 0..t {
        let cy = start.0 + sy * motion.speed * f as f64;
        let cx = start.1 + sx * motion.speed * f as f64;
        for y in 0..h {
            for x in 0..w {
                let inside = shape_mask(motion.shape, y as f64 - cy, x as f64 - cx);
                for c in 0..3 {
                    let base = if inside { foreground[c] } else { background[c] };
                    let v = base + spec.noise * rng.normal();
                    data[((c * t + f) * h + y) * w + x] = v.clamp(0.0, 1.0);
                }
            }
        }
    }
    SynthClip {
        video,
        class_id,
        clip_id,
        motion,
        start,
    }
}

/// Generates the corpus and its per-class stratified train/test split.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut split_rng = SeededRng::new(derive_seed(&[spec.seed, 0x5b11]));
    let n_train = spec.train_per_class();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class_id in 0..spec.num_classes {
        let ids: Vec<usize> = (0..spec.clips_per_class)
            .map(|j| class_id * spec.clips_per_class + j)
            .collect();
        let order = split_rng.permutation(ids.len());
        let mut is_train = vec![false; ids.len()];
        for &o in &order[..n_train] {
            is_train[o] = true;
        }
        for (j, &id) in ids.iter().enumerate() {
            let clip = render_clip(spec, class_id, id);
            if is_train[j] {
                train.push(clip);
            } else {
                test.push(clip);
            }
        }
    }
    Ok(Corpus {
        spec: spec.clone(),
        train,
        test,
    })
}

/// `np.gradient`-style derivative along a strided line of `n` samples.
fn gradient_line(src: &[f64], offset: usize, stride: usize, n: usize, out: &mut [f64]) {
    let at = |i: usize| src[offset + i * stride];
    for i in 0..n {
        out[offset + i * stride] = if n == 1 {
            0.0
        } else if i == 0 {
            at(1) - at(0)
        } else if i == n - 1 {
            at(n - 1) - at(n - 2)
        } else {
            (at(i + 1) - at(i - 1)) / 2.0
        };
    }
}

fn rescale(v: f64) -> f64 {
    0.5 + 0.5 * v.clamp(-1.0, 1.0)
}

/// Motion modality `(2, T, H, W)`: x and y spatial gradients of the grey
/// frame difference, mapped to `[0, 1]` with 0.5 as zero motion. The last
/// frame repeats the previous difference.
pub fn derive_second_modality(video: &Tensor) -> Result<Tensor> {
    if video.rank() != 4 || video.shape()[0] != 3 {
        return Err(Error::Structural(format!(
            "expected a (3, T, H, W) clip, got {:?}",
            video.shape()
        )));
    }
    let (t, h, w) = (video.shape()[1], video.shape()[2], video.shape()[3]);
    if t < 2 {
        return Err(Error::Parameter(format!("need at least 2 frames, got {t}")));
    }
    let plane = h * w;
    let src = video.data();
    let grey: Vec<f64> = (0..t * plane)
        .map(|i| (src[i] + src[t * plane + i] + src[2 * t * plane + i]) / 3.0)
        .collect();
    let mut diff = vec![0.0; t * plane];
    for f in 0..t {
        let f0 = f.min(t - 2);
        for p in 0..plane {
            diff[f * plane + p] = grey[(f0 + 1) * plane + p] - grey[f0 * plane + p];
        }
    }
    let mut gx = vec![0.0; t * plane];
    let mut gy = vec![0.0; t * plane];
    for f in 0..t {
        for y in 0..h {
            gradient_line(&diff, f * plane + y * w, 1, w, &mut gx);
        }
        for x in 0..w {
            gradient_line(&diff, f * plane + x, w, h, &mut gy);
        }
    }
    let mut out: Vec<f64> = gx.into_iter().map(rescale).collect();
    out.extend(gy.into_iter().map(rescale));
    Tensor::new(vec![2, t, h, w], out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Side of the square crop, resized back to the full frame.
    pub crop: usize,
    pub flip_prob: f64,
    /// Brightness is scaled by `1 + u`, `u ~ U(-jitter, jitter)`.
    pub jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop: 14,
            flip_prob: 0.5,
            jitter: 0.2,
        }
    }
}

/// Clip-consistent view transform; every frame gets the same crop and flip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewTransform {
    pub origin: (usize, usize),
    pub size: (usize, usize),
    pub flip: bool,
    pub brightness: f64,
}

impl ViewTransform {
    pub fn identity(h: usize, w: usize) -> Self {
        Self {
            origin: (0, 0),
            size: (h, w),
            flip: false,
            brightness: 0.0,
        }
    }

    pub fn sample(cfg: &AugmentConfig, h: usize, w: usize, rng: &mut SeededRng) -> Result<Self> {
        if cfg.crop == 0 || cfg.crop > h || cfg.crop > w {
            return Err(Error::Parameter(format!(
                "crop {} does not fit a {h}x{w} frame",
                cfg.crop
            )));
        }
        let oy = rng.below(h - cfg.crop + 1);
        let ox = rng.below(w - cfg.crop + 1);
        let flip = rng.bernoulli(cfg.flip_prob);
        let brightness = if cfg.jitter > 0.0 {
            rng.uniform_range(-cfg.jitter, cfg.jitter)
        } else {
            0.0
        };
        Ok(Self {
            origin: (oy, ox),
            size: (cfg.crop, cfg.crop),
            flip,
            brightness,
        })
    }

    fn geometric(&self, x: &Tensor) -> Result<Tensor> {
        let [c, t, h, w] = dims4(x)?;
        let cropped = crop_frames(x, self.origin, self.size)?;
        let mut out = resize_nearest(&cropped, h, w)?;
        if self.flip {
            out = flip_frames(&out)?;
        }
        debug_assert_eq!(out.shape(), &[c, t, h, w]);
        Ok(out)
    }

    /// Crop, resize, flip, then brightness jitter of an RGB clip.
    pub fn apply_rgb(&self, x: &Tensor) -> Result<Tensor> {
        let out = self.geometric(x)?;
        if self.brightness == 0.0 {
            return Ok(out);
        }
        let s = 1.0 + self.brightness;
        Ok(out.map(|v| (v * s).clamp(0.0, 1.0)))
    }

    /// Geometric part on a motion clip; a horizontal flip negates x motion.
    pub fn apply_motion(&self, m: &Tensor) -> Result<Tensor> {
        let mut out = self.geometric(m)?;
        if self.flip {
            let n = out.len() / out.shape()[0];
            out.data_mut()[..n].iter_mut().for_each(|v| *v = 1.0 - *v);
        }
        Ok(out)
    }
}

fn dims4(x: &Tensor) -> Result<[usize; 4]> {
    match *x.shape() {
        [c, t, h, w] => Ok([c, t, h, w]),
        _ => Err(Error::Structural(format!(
            "expected a (C, T, H, W) clip, got {:?}",
            x.shape()
        ))),
    }
}

pub fn crop_frames(x: &Tensor, origin: (usize, usize), size: (usize, usize)) -> Result<Tensor> {
    let [c, t, _, _] = dims4(x)?;
    x.region(&[0, 0, origin.0, origin.1], &[c, t, size.0, size.1])
}

/// Horizontal mirror of every frame.
pub fn flip_frames(x: &Tensor) -> Result<Tensor> {
    let [_, _, _, w] = dims4(x)?;
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    Ok(out)
}

pub fn resize_nearest(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [c, t, h, w] = dims4(x)?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let ys: Vec<usize> = (0..out_h)
        .map(|i| ((2 * i + 1) * h) / (2 * out_h))
        .collect();
    let xs: Vec<usize> = (0..out_w)
        .map(|j| ((2 * j + 1) * w) / (2 * out_w))
        .collect();
    let src = x.data();
    let mut out = Vec::with_capacity(c * t * out_h * out_w);
    for ct in 0..c * t {
        for &y in &ys {
            for &xx in &xs {
                out.push(src[(ct * h + y) * w + xx]);
            }
        }
    }
    Tensor::new(vec![c, t, out_h, out_w], out)
}

/// One augmented RGB view.
pub fn augment_view(clip: &Tensor, cfg: &AugmentConfig, rng: &mut SeededRng) -> Result<Tensor> {
    let [_, _, h, w] = dims4(clip)?;
    ViewTransform::sample(cfg, h, w, rng)?.apply_rgb(clip)
}

/// Clips of one split with both modalities precomputed.
#[derive(Debug, Clone)]
pub struct PairedSet {
    pub rgb: Vec<Tensor>,
    pub motion: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub clip_ids: Vec<usize>,
}

impl PairedSet {
    pub fn from_clips(clips: &[SynthClip]) -> Result<Self> {
        let mut set = Self {
            rgb: Vec::with_capacity(clips.len()),
            motion: Vec::with_capacity(clips.len()),
            labels: Vec::with_capacity(clips.len()),
            clip_ids: Vec::with_capacity(clips.len()),
        };
        for c in clips {
            set.motion.push(derive_second_modality(&c.video)?);
            set.rgb.push(c.video.clone());
            set.labels.push(c.class_id);
            set.clip_ids.push(c.clip_id);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Clips of modality 1 (RGB) or 2 (motion).
    pub fn modality(&self, m: usize) -> Result<&[Tensor]> {
        match m {
            1 => Ok(&self.rgb),
            2 => Ok(&self.motion),
            _ => Err(Error::Parameter(format!(
                "modality must be 1 or 2, got {m}"
            ))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    clip_id: usize,
    class_id: usize,
    split: String,
    motion: Motion,
    start: (f64, f64),
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusIndex {
    spec: CorpusSpec,
    clips: Vec<IndexEntry>,
}

/// Writes one `clip_{id}.ndt` blob per clip plus `index.json`.
pub fn export_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut clips = Vec::new();
    for (split, set) in [("train", &corpus.train), ("test", &corpus.test)] {
        for c in set {
            c.video.save(&dir.join(format!("clip_{}.ndt", c.clip_id)))?;
            clips.push(IndexEntry {
                clip_id: c.clip_id,
                class_id: c.class_id,
                split: split.into(),
                motion: c.motion,
                start: c.start,
            });
        }
    }
    let index = CorpusIndex {
        spec: corpus.spec.clone(),
        clips,
    };
    let path = dir.join("index.json");
    fs::write(&path, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&path, e))
}

pub fn import_corpus(dir: &Path) -> Result<Corpus> {
    let path = dir.join("index.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: CorpusIndex = serde_json::from_str(&text)?;
    let mut corpus = Corpus {
        spec: index.spec,
        train: Vec::new(),
        test: Vec::new(),
    };
    for e in index.clips {
        let clip = SynthClip {
            video: Tensor::load(&dir.join(format!("clip_{}.ndt", e.clip_id)))?,
            class_id: e.class_id,
            clip_id: e.clip_id,
            motion: e.motion,
            start: e.start,
        };
        match e.split.as_str() {
            "train" => corpus.train.push(clip),
            "test" => corpus.test.push(clip),
            other => return Err(Error::Format(format!("unknown split {other:?}"))),
        }
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            clips_per_class: 8,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn default_corpus_counts_and_balance() {
        let c = generate_corpus(&CorpusSpec::default()).unwrap();
        assert_eq!(c.train.len(), 240);
        assert_eq!(c.test.len(), 80);
        for k in 0..8 {
            assert_eq!(c.train.iter().filter(|x| x.class_id == k).count(), 30);
            assert_eq!(c.test.iter().filter(|x| x.class_id == k).count(), 10);
        }
        let mut ids: Vec<usize> = c.train.iter().chain(&c.test).map(|x| x.clip_id).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..320).collect::<Vec<_>>());
        for clip in c.train.iter().chain(&c.test) {
            assert!(clip.video.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_corpus(&small_spec()).unwrap();
        let b = generate_corpus(&small_spec()).unwrap();
        assert_eq!(a.split_hash(), b.split_hash());
        for (x, y) in a.train.iter().zip(&b.train) {
            assert!(x.video.bitwise_eq(&y.video));
        }
        let other = generate_corpus(&CorpusSpec {
            seed: 1,
            ..small_spec()
        })
        .unwrap();
        assert!(
            !a.train[0].video.bitwise_eq(&other.train[0].video)
                || a.split_hash() != other.split_hash()
        );
    }

    #[test]
    fn degenerate_specs_rejected() {
        for spec in [
            CorpusSpec {
                height: 7,
                ..CorpusSpec::default()
            },
            CorpusSpec {
                width: 4,
                ..CorpusSpec::default()
            },
            CorpusSpec {
                num_classes: 1,
                ..CorpusSpec::default()
            },
            CorpusSpec {
                clips_per_class: 1,
                ..CorpusSpec::default()
            },
        ] {
            assert!(matches!(generate_corpus(&spec), Err(Error::Parameter(_))));
        }
    }

    #[test]
    fn oracle_features_distinguish_classes() {
        let feats: Vec<Vec<f64>> = (0..8)
            .map(|k| Motion::for_class(k).oracle_features())
            .collect();
        for i in 0..8 {
            for j in 0..i {
                assert_ne!(feats[i], feats[j]);
            }
        }
    }

    #[test]
    fn static_clip_gives_neutral_motion() {
        let mut rng = SeededRng::new(3);
        let frame = Tensor::uniform(&[3, 1, 10, 10], 0.0, 1.0, &mut rng);
        let clip = Tensor::stack(&vec![frame.reshape(&[3, 10, 10]).unwrap(); 5])
            .unwrap()
            .transpose_frames();
        let m = derive_second_modality(&clip).unwrap();
        assert_eq!(m.shape(), &[2, 5, 10, 10]);
        assert!(m.data().iter().all(|&v| v == 0.5));
    }

    trait TransposeFrames {
        fn transpose_frames(self) -> Tensor;
    }

    impl TransposeFrames for Tensor {
        /// `(T, C, H, W)` to `(C, T, H, W)`.
        fn transpose_frames(self) -> Tensor {
            let [t, c, h, w] = dims4(&self).unwrap();
            let mut out = Tensor::zeros(&[c, t, h, w]);
            for ti in 0..t {
                for ci in 0..c {
                    out.copy_region(
                        &[ci, ti, 0, 0],
                        &self.reshape(&[t, c, h, w]).unwrap(),
                        &[ti, ci, 0, 0],
                        &[1, 1, h, w],
                    )
                    .unwrap();
                }
            }
            out
        }
    }

    #[test]
    fn moving_square_motion_is_horizontal() {
        let spec = CorpusSpec {
            noise: 0.0,
            ..CorpusSpec::default()
        };
        let clip = render_clip(&spec, 0, 0);
        assert_eq!(clip.motion.direction, Direction::PosX);
        let m = derive_second_modality(&clip.video).unwrap();
        let n = m.len() / 2;
        let dev = |s: &[f64]| s.iter().map(|v| (v - 0.5).abs()).sum::<f64>();
        let (ch0, ch1) = m.data().split_at(n);
        assert!(dev(ch0) > 2.0 * dev(ch1), "x {} y {}", dev(ch0), dev(ch1));
        assert!(m.data().iter().all(|v| (0.0..=1.0).contains(v)));

        // Activity sits on the shape's left and right edges in frame 0.
        let (h, w) = (spec.height, spec.width);
        let (cy, cx) = (clip.start.0 as usize, clip.start.1 as usize);
        let at = |y: usize, x: usize| (ch0[y * w + x] - 0.5).abs();
        let edge = at(cy, cx + 3) + at(cy, cx - 3);
        let far: f64 = (0..h)
            .filter(|y| y.abs_diff(cy) > 3)
            .map(|y| at(y, cx))
            .sum();
        assert!(edge > 0.1);
        assert_eq!(far, 0.0);
    }

    #[test]
    fn augmentation_identity_and_involution() {
        let spec = small_spec();
        let clip = render_clip(&spec, 3, 5).video;
        let cfg = AugmentConfig {
            crop: 16,
            flip_prob: 0.0,
            jitter: 0.0,
        };
        let out = augment_view(&clip, &cfg, &mut SeededRng::new(1)).unwrap();
        assert!(out.bitwise_eq(&clip));
        let flip = ViewTransform {
            flip: true,
            ..ViewTransform::identity(16, 16)
        };
        let twice = flip.apply_rgb(&flip.apply_rgb(&clip).unwrap()).unwrap();
        assert!(twice.bitwise_eq(&clip));
    }

    #[test]
    fn crop_offset_constant_across_frames() {
        // Every frame carries the same coordinate code, so any per-frame offset change is visible.
        let (t, h, w) = (6, 16, 16);
        let mut clip = Tensor::zeros(&[3, t, h, w]);
        for (i, v) in clip.data_mut().iter_mut().enumerate() {
            *v = (i % (h * w)) as f64;
        }
        let mut rng = SeededRng::new(8);
        for _ in 0..20 {
            let tf = ViewTransform::sample(
                &AugmentConfig {
                    jitter: 0.0,
                    ..AugmentConfig::default()
                },
                h,
                w,
                &mut rng,
            )
            .unwrap();
            let cropped = crop_frames(&clip, tf.origin, tf.size).unwrap();
            let plane = tf.size.0 * tf.size.1;
            let first = &cropped.data()[..plane];
            assert_eq!(first[0] as usize, tf.origin.0 * w + tf.origin.1);
            for chunk in cropped.data().chunks_exact(plane) {
                assert_eq!(chunk, first);
            }
        }
    }

    #[test]
    fn motion_commutes_with_flip() {
        let clip = render_clip(&small_spec(), 1, 2).video;
        let tf = ViewTransform {
            flip: true,
            ..ViewTransform::identity(16, 16)
        };
        let a = derive_second_modality(&tf.apply_rgb(&clip).unwrap()).unwrap();
        let b = tf
            .apply_motion(&derive_second_modality(&clip).unwrap())
            .unwrap();
        assert!(a.sub(&b).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn motion_commutes_with_crop_in_interior() {
        let clip = render_clip(&small_spec(), 6, 3).video;
        let (origin, size) = ((2, 3), (10, 11));
        let a = derive_second_modality(&crop_frames(&clip, origin, size).unwrap()).unwrap();
        let b = crop_frames(&derive_second_modality(&clip).unwrap(), origin, size).unwrap();
        // One-sided differences at the crop border differ; the interior must agree exactly.
        let inner = (1, 1);
        let ext = (size.0 - 2, size.1 - 2);
        let a = crop_frames(&a, inner, ext).unwrap();
        let b = crop_frames(&b, inner, ext).unwrap();
        assert!(a.bitwise_eq(&b));
    }

    #[test]
    fn export_import_round_trip() {
        let corpus = generate_corpus(&CorpusSpec {
            clips_per_class: 4,
            ..CorpusSpec::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_corpus(&corpus, dir.path()).unwrap();
        let back = import_corpus(dir.path()).unwrap();
        assert_eq!(back.spec, corpus.spec);
        assert_eq!(back.split_hash(), corpus.split_hash());
        for (x, y) in back.test.iter().zip(&corpus.test) {
            assert!(x.video.bitwise_eq(&y.video));
            assert_eq!(x.motion, y.motion);
        }
    }
}
