//! Synthetic datasets with known token-level relevance.
//!
//! Every generator is a pure function of `(seed, index)` — samples are
//! drawn from independent ChaCha streams so shards can be generated in
//! parallel and re-generated bytewise.
//!
//! The needle-classification task is the main verification vehicle: the
//! class is decidable *only* from a few "informative" patches stamped with
//! a class-specific template, while high-variance distractor patches carry
//! no label information at all. A selector that keys on task relevance
//! will keep the informative patches; one that keys on raw pixel variance
//! will waste its budget on distractors first.

use rand::Rng;
use serde::{Deserialize, Serialize};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CroprError, Result};
use crate::scalar::Scalar;
use crate::vit::Image;

/// Deterministic per-sample stream: one fixed seed, one stream per index.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Geometry shared by the generators below.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeedleSpec {
    pub classes: usize,
    /// Patches carrying the class template (the only label evidence).
    pub informative: usize,
    /// Patches carrying a label-independent high-variance checkerboard.
    pub distractors: usize,
    pub image_side: usize,
    pub patch: usize,
    pub channels: usize,
    pub noise_amp: f64,
    pub template_amp: f64,
    pub distractor_amp: f64,
}

impl NeedleSpec {
    /// Matches the toy backbone: 64x64 single-channel images in 8x8
    /// patches, so 64 tokens.
    pub fn toy() -> Self {
        NeedleSpec {
            classes: 2,
            informative: 8,
            distractors: 12,
            image_side: 64,
            patch: 8,
            channels: 1,
            noise_amp: 0.6,
            template_amp: 1.0,
            distractor_amp: 1.2,
        }
    }

    pub fn num_patches(&self) -> usize {
        let per_side = self.image_side / self.patch;
        per_side * per_side
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(CroprError::config("need at least two classes"));
        }
        if self.patch == 0 || self.image_side % self.patch != 0 {
            return Err(CroprError::config("image side must be a multiple of patch"));
        }
        if self.informative == 0 {
            return Err(CroprError::config("need at least one informative patch"));
        }
        if self.informative + self.distractors > self.num_patches() {
            return Err(CroprError::config("more stamped patches than patches"));
        }
        Ok(())
    }
}

pub struct NeedleSample<T: Scalar> {
    pub image: Image<T>,
    pub label: usize,
    /// One flag per patch in raster order; true = informative.
    pub mask: Vec<bool>,
}

/// The class-specific stamp: +-template_amp per pixel, fixed across all
/// samples so a nearest-centroid readout is well defined.
pub fn class_template<T: Scalar>(spec: &NeedleSpec, class: usize) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1A5_5000 + class as u64);
    (0..spec.channels * spec.patch * spec.patch)
        .map(|_| {
            let sign = if rng.random_range(0..2) == 0 { 1.0 } else { -1.0 };
            T::from_f64(sign * spec.template_amp)
        })
        .collect()
}

fn checkerboard<T: Scalar>(spec: &NeedleSpec) -> Vec<T> {
    let mut out = Vec::with_capacity(spec.channels * spec.patch * spec.patch);
    for _c in 0..spec.channels {
        for y in 0..spec.patch {
            for x in 0..spec.patch {
                let sign = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
                out.push(T::from_f64(sign * spec.distractor_amp));
            }
        }
    }
    out
}

fn stamp<T: Scalar>(image: &mut Image<T>, patch_index: usize, patch: usize, values: &[T]) {
    let per_side = image.side / patch;
    let py = patch_index / per_side;
    let px = patch_index % per_side;
    let mut i = 0;
    for c in 0..image.channels {
        for dy in 0..patch {
            for dx in 0..patch {
                let y = py * patch + dy;
                let x = px * patch + dx;
                image.pixels[(c * image.side + y) * image.side + x] = values[i];
                i += 1;
            }
        }
    }
}

/// Draw `count` distinct values from `0..n` (partial Fisher-Yates).
fn distinct(rng: &mut impl Rng, n: usize, count: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(count);
    pool
}

pub fn needle_sample<T: Scalar>(spec: &NeedleSpec, seed: u64, index: u64) -> Result<NeedleSample<T>> {
    spec.validate()?;
    let mut rng = stream_rng(seed, index);
    let label = rng.random_range(0..spec.classes);
    let side = spec.image_side;
    let pixels: Vec<T> = (0..spec.channels * side * side)
        .map(|_| T::from_f64(rng.random_range(-spec.noise_amp..spec.noise_amp)))
        .collect();
    let mut image = Image::new(spec.channels, side, pixels)?;

    let spots = distinct(&mut rng, spec.num_patches(), spec.informative + spec.distractors);
    let template = class_template::<T>(spec, label);
    let board = checkerboard::<T>(spec);
    let mut mask = vec![false; spec.num_patches()];
    for (i, &p) in spots.iter().enumerate() {
        if i < spec.informative {
            stamp(&mut image, p, spec.patch, &template);
            mask[p] = true;
        } else {
            stamp(&mut image, p, spec.patch, &board);
        }
    }
    Ok(NeedleSample { image, label, mask })
}

/// Axis-aligned rectangle with its painted class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub class: usize,
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegSpec {
    /// Total classes including background class 0.
    pub classes: usize,
    pub image_side: usize,
    pub patch: usize,
    pub channels: usize,
    pub min_rects: usize,
    pub max_rects: usize,
    pub background_amp: f64,
    pub fill_amp: f64,
}

impl SegSpec {
    pub fn toy() -> Self {
        SegSpec {
            classes: 4,
            image_side: 64,
            patch: 8,
            channels: 1,
            min_rects: 1,
            max_rects: 3,
            background_amp: 0.15,
            fill_amp: 0.05,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(CroprError::config("need background plus one foreground class"));
        }
        if self.patch == 0 || self.image_side % self.patch != 0 {
            return Err(CroprError::config("image side must be a multiple of patch"));
        }
        if self.min_rects > self.max_rects {
            return Err(CroprError::config("min_rects exceeds max_rects"));
        }
        Ok(())
    }

    /// Intensity painted for a foreground class; distinct per class and
    /// away from the near-zero background.
    pub fn class_level(&self, class: usize) -> f64 {
        let fg = (self.classes - 1) as f64;
        -1.0 + 2.0 * class as f64 / fg
    }
}

pub struct SegSample<T: Scalar> {
    pub image: Image<T>,
    /// Per-pixel labels, raster order; background is class 0.
    pub labels: Vec<usize>,
    /// Paint order; later rectangles overwrite earlier ones.
    pub rects: Vec<Rect>,
}

pub fn seg_sample<T: Scalar>(spec: &SegSpec, seed: u64, index: u64) -> Result<SegSample<T>> {
    spec.validate()?;
    let mut rng = stream_rng(seed, index);
    let side = spec.image_side;
    let pixels: Vec<T> = (0..spec.channels * side * side)
        .map(|_| T::from_f64(rng.random_range(-spec.background_amp..spec.background_amp)))
        .collect();
    let mut image = Image::new(spec.channels, side, pixels)?;
    let mut labels = vec![0usize; side * side];

    let count = rng.random_range(spec.min_rects..=spec.max_rects);
    let mut rects = Vec::with_capacity(count);
    for _ in 0..count {
        let w = rng.random_range(spec.patch..=side / 2);
        let h = rng.random_range(spec.patch..=side / 2);
        let x0 = rng.random_range(0..=side - w);
        let y0 = rng.random_range(0..=side - h);
        let class = rng.random_range(1..spec.classes);
        let level = spec.class_level(class);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                labels[y * side + x] = class;
                for c in 0..spec.channels {
                    let jitter = rng.random_range(-spec.fill_amp..spec.fill_amp);
                    image.pixels[(c * side + y) * side + x] = T::from_f64(level + jitter);
                }
            }
        }
        rects.push(Rect { class, x0, y0, w, h });
    }
    Ok(SegSample { image, labels, rects })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultiSpec {
    pub classes: usize,
    /// Patches stamped per present class.
    pub per_class_patches: usize,
    pub image_side: usize,
    pub patch: usize,
    pub channels: usize,
    pub noise_amp: f64,
    pub template_amp: f64,
    pub present_prob: f64,
}

impl MultiSpec {
    pub fn toy() -> Self {
        MultiSpec {
            classes: 3,
            per_class_patches: 4,
            image_side: 64,
            patch: 8,
            channels: 1,
            noise_amp: 0.6,
            template_amp: 1.0,
            present_prob: 0.5,
        }
    }

    pub fn num_patches(&self) -> usize {
        let per_side = self.image_side / self.patch;
        per_side * per_side
    }

    fn needle_view(&self) -> NeedleSpec {
        NeedleSpec {
            classes: self.classes.max(2),
            informative: self.per_class_patches,
            distractors: 0,
            image_side: self.image_side,
            patch: self.patch,
            channels: self.channels,
            noise_amp: self.noise_amp,
            template_amp: self.template_amp,
            distractor_amp: 0.0,
        }
    }
}

pub struct MultiSample<T: Scalar> {
    pub image: Image<T>,
    /// Multi-hot target, one entry per class.
    pub targets: Vec<T>,
    /// True where any class template was stamped.
    pub mask: Vec<bool>,
}

pub fn multi_sample<T: Scalar>(spec: &MultiSpec, seed: u64, index: u64) -> Result<MultiSample<T>> {
    if spec.classes == 0 {
        return Err(CroprError::config("need at least one class"));
    }
    if spec.classes * spec.per_class_patches > spec.num_patches() {
        return Err(CroprError::config("more stamped patches than patches"));
    }
    let view = spec.needle_view();
    let mut rng = stream_rng(seed, index);
    let present: Vec<bool> =
        (0..spec.classes).map(|_| rng.random_range(0.0..1.0) < spec.present_prob).collect();
    let side = spec.image_side;
    let pixels: Vec<T> = (0..spec.channels * side * side)
        .map(|_| T::from_f64(rng.random_range(-spec.noise_amp..spec.noise_amp)))
        .collect();
    let mut image = Image::new(spec.channels, side, pixels)?;

    let stamped: usize = present.iter().filter(|&&p| p).count() * spec.per_class_patches;
    let spots = distinct(&mut rng, spec.num_patches(), stamped);
    let mut mask = vec![false; spec.num_patches()];
    let mut cursor = 0;
    for (class, &is_present) in present.iter().enumerate() {
        if !is_present {
            continue;
        }
        let template = class_template::<T>(&view, class);
        for _ in 0..spec.per_class_patches {
            let p = spots[cursor];
            cursor += 1;
            stamp(&mut image, p, spec.patch, &template);
            mask[p] = true;
        }
    }
    let targets =
        present.iter().map(|&p| if p { T::one() } else { T::zero() }).collect();
    Ok(MultiSample { image, targets, mask })
}

/// Fraction of informative patches that survive to the final keep set.
/// Vacuously 1.0 when the mask is empty.
pub fn retention_recall(keep_positions: &[usize], mask: &[bool]) -> f64 {
    let informative = mask.iter().filter(|&&b| b).count();
    if informative == 0 {
        return 1.0;
    }
    let hit = keep_positions
        .iter()
        .filter(|&&p| p < mask.len() && mask[p])
        .count();
    hit as f64 / informative as f64
}

/// On-disk export of a needle stream: a small text header plus raw
/// little-endian blocks (pixels, then label, then the mask bytes), one
/// block per sample. Layout documented in docs/FORMATS.md.
pub fn export_needle<T: Scalar>(
    dir: &std::path::Path,
    spec: &NeedleSpec,
    seed: u64,
    count: u64,
) -> Result<()> {
    use std::io::Write as _;
    std::fs::create_dir_all(dir)?;
    let mut header = String::new();
    header.push_str("croprsynth v1\n");
    header.push_str("kind needle\n");
    header.push_str(&format!("dtype {}\n", T::DTYPE));
    header.push_str(&format!("count {count}\n"));
    header.push_str(&format!("seed {seed}\n"));
    header.push_str(&format!(
        "classes {} informative {} distractors {} side {} patch {} channels {}\n",
        spec.classes, spec.informative, spec.distractors, spec.image_side, spec.patch,
        spec.channels
    ));
    std::fs::write(dir.join("header.txt"), header)?;

    let mut blocks = std::io::BufWriter::new(std::fs::File::create(dir.join("samples.bin"))?);
    for index in 0..count {
        let s = needle_sample::<T>(spec, seed, index)?;
        for &v in &s.image.pixels {
            blocks.write_all(&v.to_le_bytes_vec())?;
        }
        blocks.write_all(&(s.label as u64).to_le_bytes())?;
        let mask_bytes: Vec<u8> = s.mask.iter().map(|&b| u8::from(b)).collect();
        blocks.write_all(&mask_bytes)?;
    }
    blocks.into_inner().map_err(|e| CroprError::Io(e.into_error()))?.sync_all()?;
    Ok(())
}

/// Reload an exported needle stream; the inverse of [`export_needle`].
pub fn import_needle<T: Scalar>(dir: &std::path::Path) -> Result<Vec<NeedleSample<T>>> {
    let header = std::fs::read_to_string(dir.join("header.txt"))?;
    let mut lines = header.lines();
    if lines.next() != Some("croprsynth v1") {
        return Err(CroprError::checkpoint("not a croprsynth v1 export"));
    }
    if lines.next() != Some("kind needle") {
        return Err(CroprError::checkpoint("export is not a needle stream"));
    }
    let mut dtype = String::new();
    let mut count = 0u64;
    let mut geom: Option<(usize, usize, usize, usize, usize, usize)> = None;
    for line in lines {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["dtype", d] => dtype = d.to_string(),
            ["count", n] => {
                count = n.parse().map_err(|_| CroprError::checkpoint("bad count"))?
            }
            ["seed", _] => {}
            ["classes", c, "informative", i, "distractors", d, "side", s, "patch", p, "channels", ch] => {
                let parse = |v: &str| {
                    v.parse::<usize>().map_err(|_| CroprError::checkpoint("bad geometry"))
                };
                geom = Some((parse(c)?, parse(i)?, parse(d)?, parse(s)?, parse(p)?, parse(ch)?));
            }
            _ => return Err(CroprError::checkpoint(format!("bad header line: {line}"))),
        }
    }
    if dtype != T::DTYPE {
        return Err(CroprError::checkpoint(format!("dtype {dtype} != {}", T::DTYPE)));
    }
    let (_, _, _, side, patch, channels) =
        geom.ok_or_else(|| CroprError::checkpoint("missing geometry line"))?;
    let per_side = side / patch;
    let num_patches = per_side * per_side;
    let pixel_bytes = channels * side * side * T::BYTE_WIDTH;

    let data = std::fs::read(dir.join("samples.bin"))?;
    let block = pixel_bytes + 8 + num_patches;
    if data.len() != block * count as usize {
        return Err(CroprError::checkpoint(format!(
            "expected {} bytes of blocks, found {}",
            block * count as usize,
            data.len()
        )));
    }
    let mut out = Vec::with_capacity(count as usize);
    for i in 0..count as usize {
        let b = &data[i * block..(i + 1) * block];
        let pixels: Vec<T> =
            b[..pixel_bytes].chunks_exact(T::BYTE_WIDTH).map(T::from_le_bytes_slice).collect();
        let label = u64::from_le_bytes(b[pixel_bytes..pixel_bytes + 8].try_into().unwrap());
        let mask = b[pixel_bytes + 8..].iter().map(|&v| v != 0).collect();
        out.push(NeedleSample { image: Image::new(channels, side, pixels)?, label: label as usize, mask });
    }
    Ok(out)
}
