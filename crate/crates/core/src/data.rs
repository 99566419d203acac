//! Synthetic video dataset and augmentation pipeline.
//!
//! Videos are built so that the structure the pretraining objective exploits
//! is actually present: each class has its own global pattern (an oriented
//! sinusoid whose orientation and frequency bucket are class-determined),
//! all classes share one local texture bank (so local crops look alike
//! across classes), frames of one video drift smoothly in phase, and pixel
//! noise sits on top. Every pixel is quantized to f32 at generation time, so
//! a dataset written to disk and read back trains bit-identically to one
//! kept in memory.
//!
//! Determinism: all randomness flows from the manifest seed (generation,
//! labeled subset) or an epoch seed (shuffling, pair sampling, augmentation)
//! through named stream derivation. Augmentation draws in a fixed order:
//! crop scale, row offset, column offset, flip, contrast, brightness.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::autodiff::{Shape, Tensor};
use crate::rng::{self, Rng};
use crate::wire::{self, Reader};
use crate::{Error, Result};

// ── manifest ────────────────────────────────────────────────────────────────

/// Knobs of the frame synthesizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorParams {
    /// Cycles across the image for the lowest-frequency class bucket.
    pub freq_lo: f64,
    /// Cycles across the image for the highest-frequency class bucket.
    pub freq_hi: f64,
    /// Amplitude of the shared local texture patches.
    pub texture_amp: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise_sigma: f64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            freq_lo: 2.0,
            freq_hi: 4.0,
            texture_amp: 0.3,
            noise_sigma: 0.05,
        }
    }
}

/// Everything needed to regenerate a dataset bit-identically.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub num_videos: usize,
    pub num_classes: usize,
    pub frames_per_video: usize,
    pub image_size: usize,
    pub gen: GeneratorParams,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        DatasetManifest {
            seed: 0,
            num_videos: 60,
            num_classes: 3,
            frames_per_video: 8,
            image_size: 64,
            gen: GeneratorParams::default(),
        }
    }
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::ConfigError(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.num_videos < self.num_classes {
            return Err(Error::ConfigError(format!(
                "need at least one video per class: {} videos for {} classes",
                self.num_videos, self.num_classes
            )));
        }
        if self.frames_per_video < 2 {
            return Err(Error::ConfigError(format!(
                "videos need at least 2 frames for positive pairs, got {}",
                self.frames_per_video
            )));
        }
        if self.image_size < 8 {
            return Err(Error::ConfigError(format!("image_size must be at least 8, got {}", self.image_size)));
        }
        let g = &self.gen;
        if !(g.freq_lo > 0.0 && g.freq_hi >= g.freq_lo) {
            return Err(Error::ConfigError(format!(
                "frequency range must satisfy 0 < lo <= hi, got [{}, {}]",
                g.freq_lo, g.freq_hi
            )));
        }
        if g.texture_amp < 0.0 || g.noise_sigma < 0.0 {
            return Err(Error::ConfigError("texture_amp and noise_sigma must be nonnegative".into()));
        }
        Ok(())
    }

    /// Key=value text form, fixed key order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "num_videos={}", self.num_videos);
        let _ = writeln!(s, "num_classes={}", self.num_classes);
        let _ = writeln!(s, "frames_per_video={}", self.frames_per_video);
        let _ = writeln!(s, "image_size={}", self.image_size);
        let _ = writeln!(s, "freq_lo={:?}", self.gen.freq_lo);
        let _ = writeln!(s, "freq_hi={:?}", self.gen.freq_hi);
        let _ = writeln!(s, "texture_amp={:?}", self.gen.texture_amp);
        let _ = writeln!(s, "noise_sigma={:?}", self.gen.noise_sigma);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut m = DatasetManifest::default();
        let mut seen = BTreeSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::FormatError(format!("manifest line {} is not key=value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::FormatError(format!("manifest repeats key {key}")));
            }
            let parse_usize = || {
                value
                    .parse::<usize>()
                    .map_err(|_| Error::FormatError(format!("manifest key {key} has non-integer value {value}")))
            };
            let parse_f64 = || {
                value
                    .parse::<f64>()
                    .map_err(|_| Error::FormatError(format!("manifest key {key} has non-numeric value {value}")))
            };
            match key {
                "seed" => {
                    m.seed = value
                        .parse::<u64>()
                        .map_err(|_| Error::FormatError(format!("manifest seed is not a u64: {value}")))?
                }
                "num_videos" => m.num_videos = parse_usize()?,
                "num_classes" => m.num_classes = parse_usize()?,
                "frames_per_video" => m.frames_per_video = parse_usize()?,
                "image_size" => m.image_size = parse_usize()?,
                "freq_lo" => m.gen.freq_lo = parse_f64()?,
                "freq_hi" => m.gen.freq_hi = parse_f64()?,
                "texture_amp" => m.gen.texture_amp = parse_f64()?,
                "noise_sigma" => m.gen.noise_sigma = parse_f64()?,
                other => return Err(Error::FormatError(format!("manifest has unknown key {other}"))),
            }
        }
        for required in [
            "seed",
            "num_videos",
            "num_classes",
            "frames_per_video",
            "image_size",
        ] {
            if !seen.contains(required) {
                return Err(Error::FormatError(format!("manifest is missing key {required}")));
            }
        }
        m.validate()?;
        Ok(m)
    }
}

// ── records ─────────────────────────────────────────────────────────────────

/// One video: frames [T, 1, S, S] with values in [0, 1], f32-quantized.
#[derive(Debug, Clone)]
pub struct VideoRecord {
    pub video_id: u32,
    pub class_id: u32,
    pub frames: Tensor,
}

impl VideoRecord {
    pub fn num_frames(&self) -> usize {
        self.frames.shape().dims()[0]
    }

    /// Frame t as a [1, S, S] tensor.
    pub fn frame(&self, t: usize) -> Result<Tensor> {
        let dims = self.frames.shape().dims();
        let (frames, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
        if t >= frames {
            return Err(Error::InvalidShape(format!("frame {t} out of {frames}")));
        }
        let plane = c * h * w;
        Tensor::from_vec(Shape::new(&[c, h, w])?, self.frames.data()[t * plane..(t + 1) * plane].to_vec())
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub videos: Vec<VideoRecord>,
}

// ── generation ──────────────────────────────────────────────────────────────

const TEXTURE_BANK_SIZE: usize = 4;
const TEXTURE_PATCH: usize = 8;
const PATCHES_PER_VIDEO: usize = 3;

/// Smooth random patches shared by every class, drawn from the manifest seed.
fn texture_bank(seed: u64, amp: f64) -> Vec<Vec<f64>> {
    let mut rng = Rng::new(rng::derive(seed, "texture-bank"));
    (0..TEXTURE_BANK_SIZE)
        .map(|_| {
            let raw: Vec<f64> = (0..TEXTURE_PATCH * TEXTURE_PATCH)
                .map(|_| rng.uniform(-1.0, 1.0))
                .collect();
            // One box-blur pass smooths the noise into blobby texture.
            let mut patch = vec![0.0; raw.len()];
            for y in 0..TEXTURE_PATCH {
                for x in 0..TEXTURE_PATCH {
                    let mut sum = 0.0;
                    let mut count = 0.0;
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                            if (0..TEXTURE_PATCH as i64).contains(&ny) && (0..TEXTURE_PATCH as i64).contains(&nx) {
                                sum += raw[ny as usize * TEXTURE_PATCH + nx as usize];
                                count += 1.0;
                            }
                        }
                    }
                    patch[y * TEXTURE_PATCH + x] = amp * sum / count;
                }
            }
            patch
        })
        .collect()
}

/// Build the full dataset described by the manifest. Classes are assigned
/// round-robin, so counts differ by at most one.
pub fn generate_dataset(manifest: &DatasetManifest) -> Result<Dataset> {
    manifest.validate()?;
    let s = manifest.image_size;
    let t_frames = manifest.frames_per_video;
    let g = &manifest.gen;
    let base = rng::derive(manifest.seed, "dataset");
    let bank = texture_bank(manifest.seed, g.texture_amp);

    let mut videos = Vec::with_capacity(manifest.num_videos);
    for vi in 0..manifest.num_videos {
        let class = vi % manifest.num_classes;
        let vseed = rng::derive_u64(base, vi as u64);
        let mut vrng = Rng::new(rng::derive_u64(vseed, 0));

        // Class determines orientation and frequency bucket; the video adds
        // a phase in [0, pi) (a restricted range keeps the class template
        // linearly detectable), a small frequency jitter and a drift rate.
        let theta = std::f64::consts::PI * (class as f64 + 0.5) / manifest.num_classes as f64;
        let bucket = if manifest.num_classes > 1 {
            class as f64 / (manifest.num_classes - 1) as f64
        } else {
            0.0
        };
        let freq = (g.freq_lo + (g.freq_hi - g.freq_lo) * bucket) * vrng.uniform(0.95, 1.05);
        let phase = vrng.uniform(0.0, std::f64::consts::PI);
        let drift = vrng.uniform(0.2, 0.6) / t_frames as f64;

        // Shared local texture: same bank for all classes, patch identity
        // and position fixed per video (static local structure).
        let patches: Vec<(usize, usize, usize)> = (0..PATCHES_PER_VIDEO)
            .map(|_| {
                let which = vrng.below(TEXTURE_BANK_SIZE);
                let max_off = s.saturating_sub(TEXTURE_PATCH) + 1;
                (which, vrng.below(max_off), vrng.below(max_off))
            })
            .collect();

        let (cos_t, sin_t) = (theta.cos(), theta.sin());
        let two_pi = 2.0 * std::f64::consts::PI;
        let mut data = Vec::with_capacity(t_frames * s * s);
        for t in 0..t_frames {
            let mut noise = Rng::new(rng::derive_u64(vseed, 1 + t as u64));
            let phase_t = phase + drift * two_pi * t as f64;
            for y in 0..s {
                for x in 0..s {
                    let coord = (x as f64 * cos_t + y as f64 * sin_t) / s as f64;
                    let mut v = 0.5 + 0.5 * (two_pi * freq * coord + phase_t).sin();
                    for &(which, oy, ox) in &patches {
                        if (oy..oy + TEXTURE_PATCH).contains(&y) && (ox..ox + TEXTURE_PATCH).contains(&x) {
                            v += bank[which][(y - oy) * TEXTURE_PATCH + (x - ox)];
                        }
                    }
                    v += g.noise_sigma * noise.normal();
                    // f32 quantization pins the dataset across file round
                    // trips and platform libm differences.
                    data.push((v.clamp(0.0, 1.0) as f32) as f64);
                }
            }
        }
        videos.push(VideoRecord {
            video_id: vi as u32,
            class_id: class as u32,
            frames: Tensor::from_vec(Shape::new(&[t_frames, 1, s, s])?, data)?,
        });
    }
    Ok(Dataset { manifest: *manifest, videos })
}

// ── augmentation ────────────────────────────────────────────────────────────

/// Augmentation ranges. The null config is the identity transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    /// Crop side as a fraction of the image, sampled uniformly.
    pub crop_scale: (f64, f64),
    pub flip_prob: f64,
    /// Additive brightness sampled from [-jitter, jitter].
    pub brightness_jitter: f64,
    /// Multiplicative contrast sampled uniformly from this range.
    pub contrast_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_scale: (0.6, 1.0),
            flip_prob: 0.5,
            brightness_jitter: 0.2,
            contrast_range: (0.8, 1.25),
        }
    }
}

impl AugmentConfig {
    /// Identity: full crop, no flip, no jitter.
    pub fn null() -> Self {
        AugmentConfig {
            crop_scale: (1.0, 1.0),
            flip_prob: 0.0,
            brightness_jitter: 0.0,
            contrast_range: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::ConfigError(format!("crop_scale must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})")));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::ConfigError(format!("flip_prob must be in [0, 1], got {}", self.flip_prob)));
        }
        if self.brightness_jitter < 0.0 {
            return Err(Error::ConfigError("brightness_jitter must be nonnegative".into()));
        }
        let (clo, chi) = self.contrast_range;
        if !(clo > 0.0 && clo <= chi) {
            return Err(Error::ConfigError(format!("contrast_range must satisfy 0 < lo <= hi, got ({clo}, {chi})")));
        }
        Ok(())
    }
}

/// Corner-aligned bilinear resize of one channel plane.
fn resize_bilinear(src: &[f64], src_size: usize, dst_size: usize, out: &mut Vec<f64>) {
    if src_size == dst_size {
        out.extend_from_slice(src);
        return;
    }
    let scale = if dst_size > 1 {
        (src_size - 1) as f64 / (dst_size - 1) as f64
    } else {
        0.0
    };
    for oy in 0..dst_size {
        let fy = oy as f64 * scale;
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(src_size - 1);
        let wy = fy - y0 as f64;
        for ox in 0..dst_size {
            let fx = ox as f64 * scale;
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(src_size - 1);
            let wx = fx - x0 as f64;
            let top = src[y0 * src_size + x0] * (1.0 - wx) + src[y0 * src_size + x1] * wx;
            let bot = src[y1 * src_size + x0] * (1.0 - wx) + src[y1 * src_size + x1] * wx;
            out.push(top * (1.0 - wy) + bot * wy);
        }
    }
}

/// One augmented view of a [C, S, S] frame: random square crop, bilinear
/// resize back to S, horizontal flip, contrast and brightness jitter, clip
/// to [0, 1]. Draw order is fixed (scale, row offset, column offset, flip,
/// contrast, brightness) so a seed fully determines the transform.
pub fn augment_frame(frame: &Tensor, cfg: &AugmentConfig, seed: u64) -> Result<Tensor> {
    cfg.validate()?;
    let dims = frame.shape().dims();
    if dims.len() != 3 || dims[1] != dims[2] {
        return Err(Error::InvalidShape(format!(
            "augment_frame expects a square [C, S, S] frame, got {}",
            frame.shape()
        )));
    }
    let (channels, s) = (dims[0], dims[1]);
    let mut rng = Rng::new(seed);
    let scale = rng.uniform(cfg.crop_scale.0, cfg.crop_scale.1);
    let side = ((scale * s as f64).round() as usize).clamp(1, s);
    let oy = rng.below(s - side + 1);
    let ox = rng.below(s - side + 1);
    let flip = rng.next_f64() < cfg.flip_prob;
    let contrast = rng.uniform(cfg.contrast_range.0, cfg.contrast_range.1);
    let brightness = if cfg.brightness_jitter > 0.0 {
        rng.uniform(-cfg.brightness_jitter, cfg.brightness_jitter)
    } else {
        0.0
    };

    let mut out = Vec::with_capacity(channels * s * s);
    let mut crop = Vec::with_capacity(side * side);
    for c in 0..channels {
        let plane = &frame.data()[c * s * s..(c + 1) * s * s];
        crop.clear();
        for y in oy..oy + side {
            crop.extend_from_slice(&plane[y * s + ox..y * s + ox + side]);
        }
        let at = out.len();
        resize_bilinear(&crop, side, s, &mut out);
        if flip {
            let plane_out = &mut out[at..at + s * s];
            for row in plane_out.chunks_exact_mut(s) {
                row.reverse();
            }
        }
    }
    for v in &mut out {
        *v = (*v * contrast + brightness).clamp(0.0, 1.0);
    }
    Tensor::from_vec(frame.shape().clone(), out)
}

/// The two augmented views of one video for one step.
#[derive(Debug, Clone)]
pub struct FramePair {
    pub view1: Tensor,
    pub view2: Tensor,
    pub video_id: u32,
    pub class_id: u32,
    pub labeled: bool,
}

/// Draw two distinct frames uniformly without replacement and augment each
/// independently (streams derived from `seed` as "index", "view1", "view2").
pub fn sample_positive_pair(
    video: &VideoRecord,
    cfg: &AugmentConfig,
    seed: u64,
    labeled: bool,
) -> Result<FramePair> {
    let t = video.num_frames();
    if t < 2 {
        return Err(Error::TooFewFrames(format!(
            "video {} has {t} frames, positive pairs need 2",
            video.video_id
        )));
    }
    let mut rng = Rng::new(rng::derive(seed, "index"));
    let i = rng.below(t);
    let mut j = rng.below(t - 1);
    if j >= i {
        j += 1;
    }
    let view1 = augment_frame(&video.frame(i)?, cfg, rng::derive(seed, "view1"))?;
    let view2 = augment_frame(&video.frame(j)?, cfg, rng::derive(seed, "view2"))?;
    Ok(FramePair {
        view1,
        view2,
        video_id: video.video_id,
        class_id: video.class_id,
        labeled,
    })
}

/// The fixed labeled subset of a dataset: a label_rate fraction of videos,
/// chosen by the dataset's own seed so every epoch and every run against the
/// same dataset agrees on which videos carry labels.
pub fn labeled_video_ids(ds: &Dataset, label_rate: f64) -> Result<BTreeSet<u32>> {
    if !(0.0..=1.0).contains(&label_rate) {
        return Err(Error::ConfigError(format!("label_rate must be in [0, 1], got {label_rate}")));
    }
    let mut ids: Vec<u32> = ds.videos.iter().map(|v| v.video_id).collect();
    let mut rng = Rng::new(rng::derive(ds.manifest.seed, "label-subset"));
    rng.shuffle(&mut ids);
    let count = (label_rate * ids.len() as f64).round() as usize;
    Ok(ids.into_iter().take(count).collect())
}

/// Batches for one epoch: videos shuffled by the epoch seed, chunked into
/// batches of `batch_size` distinct videos (incomplete tail dropped), each
/// video sampled into an augmented positive pair with a seed derived from
/// (epoch seed, video id).
pub fn make_batches(
    ds: &Dataset,
    batch_size: usize,
    epoch_seed: u64,
    label_rate: f64,
    cfg: &AugmentConfig,
) -> Result<Vec<Vec<FramePair>>> {
    if batch_size == 0 {
        return Err(Error::ConfigError("batch_size must be positive".into()));
    }
    if batch_size > ds.videos.len() {
        return Err(Error::ConfigError(format!(
            "batch_size {batch_size} exceeds {} videos",
            ds.videos.len()
        )));
    }
    let labeled = labeled_video_ids(ds, label_rate)?;
    let mut order: Vec<usize> = (0..ds.videos.len()).collect();
    let mut rng = Rng::new(rng::derive(epoch_seed, "shuffle"));
    rng.shuffle(&mut order);

    let mut batches = Vec::with_capacity(ds.videos.len() / batch_size);
    for chunk in order.chunks_exact(batch_size) {
        let mut batch = Vec::with_capacity(batch_size);
        for &vi in chunk {
            let video = &ds.videos[vi];
            let pair_seed = rng::derive_u64(epoch_seed, video.video_id as u64);
            batch.push(sample_positive_pair(
                video,
                cfg,
                pair_seed,
                labeled.contains(&video.video_id),
            )?);
        }
        batches.push(batch);
    }
    Ok(batches)
}

// ── serialization ───────────────────────────────────────────────────────────

const MAGIC: &[u8; 4] = b"HICO";
const VERSION: u32 = 1;

/// The manifest text file that travels with a dataset binary.
pub fn manifest_path_for(dataset_path: &Path) -> PathBuf {
    dataset_path.with_extension("manifest")
}

/// Write the binary dataset plus its manifest text file alongside.
pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    ds.manifest.validate()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    wire::put_u32(&mut buf, VERSION);
    wire::put_u32(&mut buf, ds.videos.len() as u32);
    wire::put_u32(&mut buf, ds.manifest.num_classes as u32);
    wire::put_u32(&mut buf, ds.manifest.image_size as u32);
    for video in &ds.videos {
        wire::put_u32(&mut buf, video.video_id);
        wire::put_u32(&mut buf, video.class_id);
        wire::put_u32(&mut buf, video.num_frames() as u32);
        for &v in video.frames.data() {
            wire::put_f32(&mut buf, v as f32);
        }
    }
    wire::atomic_write(path, &buf)?;
    wire::atomic_write(&manifest_path_for(path), ds.manifest.to_text().as_bytes())?;
    Ok(())
}

/// Read a dataset binary and its manifest, checking that they agree.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let manifest_text = std::fs::read_to_string(manifest_path_for(path)).map_err(|e| {
        Error::FormatError(format!(
            "cannot read manifest {}: {e}",
            manifest_path_for(path).display()
        ))
    })?;
    let manifest = DatasetManifest::from_text(&manifest_text)?;

    let bytes = std::fs::read(path)?;
    let mut r = Reader::new(&bytes);
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::FormatError(format!("bad magic {magic:02x?}, expected {MAGIC:02x?}")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::FormatError(format!("unsupported dataset version {version}")));
    }
    let num_videos = r.u32()? as usize;
    let num_classes = r.u32()? as usize;
    let image_size = r.u32()? as usize;
    if num_videos != manifest.num_videos
        || num_classes != manifest.num_classes
        || image_size != manifest.image_size
    {
        return Err(Error::FormatError(format!(
            "manifest disagrees with binary: {num_videos} videos/{num_classes} classes/{image_size}px vs {}/{}/{}",
            manifest.num_videos, manifest.num_classes, manifest.image_size
        )));
    }
    let mut videos = Vec::with_capacity(num_videos);
    for _ in 0..num_videos {
        let video_id = r.u32()?;
        let class_id = r.u32()?;
        if (class_id as usize) >= num_classes {
            return Err(Error::FormatError(format!(
                "video {video_id} has class {class_id}, dataset has {num_classes} classes"
            )));
        }
        let t = r.u32()? as usize;
        if t != manifest.frames_per_video {
            return Err(Error::FormatError(format!(
                "video {video_id} has {t} frames, manifest says {}",
                manifest.frames_per_video
            )));
        }
        let count = t * image_size * image_size;
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let v = r.f32()? as f64;
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::FormatError(format!("video {video_id} has pixel {v} outside [0, 1]")));
            }
            data.push(v);
        }
        videos.push(VideoRecord {
            video_id,
            class_id,
            frames: Tensor::from_vec(Shape::new(&[t, 1, image_size, image_size])?, data)?,
        });
    }
    if r.remaining() != 0 {
        return Err(Error::FormatError(format!("{} trailing bytes after last video", r.remaining())));
    }
    Ok(Dataset { manifest, videos })
}
