//! Sample sets: the synthetic light-guide-plate generator, a PNG directory
//! loader/writer and the stratified train/test split.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_SIDE: usize = 224;
pub const DEFAULT_DEFECTIVE: usize = 422;
pub const DEFAULT_CLEAN: usize = 400;
pub const TRAIN_FRACTION: f64 = 0.25;
/// Minimum pixels a defect must change, and by how much.
pub const MIN_DEFECT_PIXELS: usize = 20;
pub const MIN_DEFECT_DELTA: f32 = 0.05;
pub const NOISE_SIGMA: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    NonDefective,
    Defective,
}

impl Label {
    /// Class index used by the model heads.
    pub fn class(self) -> usize {
        match self {
            Label::NonDefective => 0,
            Label::Defective => 1,
        }
    }

    pub fn from_class(c: usize) -> Label {
        if c == 1 {
            Label::Defective
        } else {
            Label::NonDefective
        }
    }

    /// Filename tag: `NG` for defective, `OK` otherwise.
    pub fn tag(self) -> &'static str {
        match self {
            Label::NonDefective => "OK",
            Label::Defective => "NG",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Unassigned,
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `(1, H, W)` with values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label: Label,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleSet {
    pub samples: Vec<Sample>,
    /// `None` for externally loaded data.
    pub generator_seed: Option<u64>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.samples[i].split == split)
            .collect()
    }

    pub fn count(&self, label: Label) -> usize {
        self.samples.iter().filter(|s| s.label == label).count()
    }

    /// Stack the given samples into an `(N, C, H, W)` batch plus class labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let images: Vec<&Tensor<f32>> = indices.iter().map(|&i| &self.samples[i].image).collect();
        let labels = indices.iter().map(|&i| self.samples[i].label.class()).collect();
        Ok((Tensor::stack(&images)?, labels))
    }

    /// Box-filter every image down by an integer factor.
    pub fn downscaled(&self, factor: usize) -> Result<SampleSet> {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                Ok(Sample {
                    image: box_downscale(&s.image, factor)?,
                    ..s.clone()
                })
            })
            .collect::<Result<_>>()?;
        Ok(SampleSet {
            samples,
            generator_seed: self.generator_seed,
        })
    }
}

/// One of the eight symmetries of the square applied to every channel of a
/// `(N, C, S, S)` batch item: bit 0 transposes, bit 1 flips rows, bit 2
/// flips columns.
pub fn dihedral_in_place(x: &mut Tensor<f32>, item: usize, k: u8) -> Result<()> {
    let (_, c, h, w) = x.dims4("dihedral")?;
    if h != w {
        return Err(Error::shape("dihedral", "image", "square", format!("{h}x{w}")));
    }
    let plane = h * w;
    for ch in 0..c {
        let off = (item * c + ch) * plane;
        let src = x.data()[off..off + plane].to_vec();
        let dst = &mut x.data_mut()[off..off + plane];
        for y in 0..h {
            for xx in 0..w {
                let (mut sy, mut sx) = if k & 1 == 1 { (xx, y) } else { (y, xx) };
                if k & 2 == 2 {
                    sy = h - 1 - sy;
                }
                if k & 4 == 4 {
                    sx = w - 1 - sx;
                }
                dst[y * w + xx] = src[sy * w + sx];
            }
        }
    }
    Ok(())
}

fn box_downscale(img: &Tensor<f32>, f: usize) -> Result<Tensor<f32>> {
    let &[c, h, w] = img.shape() else {
        return Err(Error::shape("downscale", "rank", 3, img.rank()));
    };
    if f == 0 || h % f != 0 || w % f != 0 {
        return Err(Error::invalid(
            "downscale",
            format!("factor {f} does not divide {h}x{w}"),
        ));
    }
    let (ho, wo) = (h / f, w / f);
    let norm = 1.0 / (f * f) as f32;
    let d = img.data();
    Ok(Tensor::from_fn([c, ho, wo], |i| {
        let (ch, y, x) = (i / (ho * wo), (i / wo) % ho, i % wo);
        let mut s = 0.0;
        for dy in 0..f {
            for dx in 0..f {
                s += d[ch * h * w + (y * f + dy) * w + x * f + dx];
            }
        }
        s * norm
    }))
}

// generator

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    Scratch,
    BrightSpot,
    DarkSpot,
    Impurity,
}

impl DefectKind {
    pub const ALL: [DefectKind; 4] = [
        DefectKind::Scratch,
        DefectKind::BrightSpot,
        DefectKind::DarkSpot,
        DefectKind::Impurity,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectSpec {
    pub kind: DefectKind,
    /// Center (scratch: start point) in pixels.
    pub x: f32,
    pub y: f32,
    /// Scratch length or spot/impurity radius, pixels.
    pub size: f32,
    /// Scratch direction in radians; unused otherwise.
    pub angle: f32,
    /// Signed intensity change at the core of the defect.
    pub delta: f32,
}

/// Plate appearance parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateSpec {
    pub pitch: f32,
    pub dot_radius: f32,
    pub dot_gain: f32,
    pub base: f32,
    pub grad_x: f32,
    pub grad_y: f32,
    pub offset_x: f32,
    pub offset_y: f32,
    pub staggered: bool,
}

/// One generated image with its noiseless ingredients, for oracle checks.
#[derive(Debug, Clone)]
pub struct Generated {
    pub plate: PlateSpec,
    pub defects: Vec<DefectSpec>,
    /// The plate before defect injection (same noise realization).
    pub clean: Tensor<f32>,
    pub image: Tensor<f32>,
}

fn image_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn sample_plate(rng: &mut ChaCha8Rng) -> PlateSpec {
    let pitch = rng.gen_range(6.0f32..=14.0);
    PlateSpec {
        pitch,
        dot_radius: rng.gen_range(1.0f32..=3.0),
        dot_gain: rng.gen_range(0.10f32..=0.30),
        base: rng.gen_range(0.20f32..=0.55),
        grad_x: rng.gen_range(-0.15f32..=0.15),
        grad_y: rng.gen_range(-0.15f32..=0.15),
        offset_x: rng.gen_range(0.0..pitch),
        offset_y: rng.gen_range(0.0..pitch),
        staggered: rng.gen_bool(0.5),
    }
}

fn render_plate(p: &PlateSpec, side: usize) -> Vec<f32> {
    let s = side as f32;
    let mut img = vec![0.0f32; side * side];
    for y in 0..side {
        for x in 0..side {
            let (fx, fy) = (x as f32, y as f32);
            let bg = p.base + p.grad_x * (fx / s - 0.5) + p.grad_y * (fy / s - 0.5);
            let row = ((fy - p.offset_y) / p.pitch).round();
            let shift = if p.staggered && (row as i64).rem_euclid(2) == 1 {
                p.pitch / 2.0
            } else {
                0.0
            };
            let col = ((fx - p.offset_x - shift) / p.pitch).round();
            let cx = p.offset_x + shift + col * p.pitch;
            let cy = p.offset_y + row * p.pitch;
            let d = ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt();
            // soft-edged dot
            let dot = (p.dot_radius + 0.5 - d).clamp(0.0, 1.0);
            img[y * side + x] = bg + p.dot_gain * dot;
        }
    }
    img
}

fn sample_defect(rng: &mut ChaCha8Rng, kind: DefectKind, side: usize) -> DefectSpec {
    let s = side as f32;
    let margin = (s / 4.0).min(12.0);
    let (x, y) = (rng.gen_range(margin..s - margin), rng.gen_range(margin..s - margin));
    let (size, delta) = match kind {
        DefectKind::Scratch => (rng.gen_range(60.0..150.0), rng.gen_range(0.25..0.45)),
        DefectKind::BrightSpot => (rng.gen_range(8.0..16.0), rng.gen_range(0.25..0.45)),
        DefectKind::DarkSpot => (rng.gen_range(8.0..16.0), -rng.gen_range(0.25..0.45)),
        DefectKind::Impurity => (rng.gen_range(7.0..13.0), -rng.gen_range(0.25..0.45)),
    };
    DefectSpec {
        kind,
        x,
        y,
        size,
        angle: rng.gen_range(0.0..std::f32::consts::PI),
        delta,
    }
}

/// Additive intensity change of `d` at pixel `(px, py)`.
fn defect_delta(d: &DefectSpec, px: f32, py: f32) -> f32 {
    match d.kind {
        DefectKind::Scratch => {
            let (dx, dy) = (d.angle.cos(), d.angle.sin());
            let (rx, ry) = (px - d.x, py - d.y);
            let t = (rx * dx + ry * dy).clamp(0.0, d.size);
            let dist = ((rx - t * dx).powi(2) + (ry - t * dy).powi(2)).sqrt();
            d.delta * (2.5 - dist).clamp(0.0, 1.0)
        }
        DefectKind::BrightSpot | DefectKind::DarkSpot => {
            let r = ((px - d.x).powi(2) + (py - d.y).powi(2)).sqrt() / d.size;
            // flat core with a smooth rim
            d.delta * (1.0 - r * r).clamp(0.0, 1.0).sqrt()
        }
        DefectKind::Impurity => {
            // irregular blob: radius modulated by angle
            let (rx, ry) = (px - d.x, py - d.y);
            let theta = ry.atan2(rx);
            let radius = d.size * (1.0 + 0.35 * (3.0 * theta + d.angle).sin());
            let r = (rx * rx + ry * ry).sqrt();
            d.delta * (radius + 0.5 - r).clamp(0.0, 1.0)
        }
    }
}

fn apply_defect(img: &mut [f32], d: &DefectSpec, side: usize) {
    let reach = match d.kind {
        DefectKind::Scratch => d.size + 2.0,
        _ => d.size * 1.4 + 2.0,
    };
    let (x0, x1) = (
        ((d.x - reach).floor().max(0.0)) as usize,
        ((d.x + reach).ceil() as usize).min(side - 1),
    );
    let (y0, y1) = (
        ((d.y - reach).floor().max(0.0)) as usize,
        ((d.y + reach).ceil() as usize).min(side - 1),
    );
    for y in y0..=y1 {
        for x in x0..=x1 {
            img[y * side + x] += defect_delta(d, x as f32, y as f32);
        }
    }
}

fn finish(img: &[f32], noise: &[f32]) -> Vec<f32> {
    img.iter()
        .zip(noise)
        .map(|(&v, &n)| (v + n).clamp(0.0, 1.0))
        .collect()
}

/// Pixels where `a` and `b` differ by at least [`MIN_DEFECT_DELTA`].
pub fn changed_pixels(a: &Tensor<f32>, b: &Tensor<f32>) -> usize {
    a.data()
        .iter()
        .zip(b.data())
        .filter(|(x, y)| (*x - *y).abs() >= MIN_DEFECT_DELTA)
        .count()
}

/// Generate image `index` of the stream for `seed` at the given side length
/// (at least 8 pixels, so that every defect can reach the visibility floor).
pub fn generate_one(seed: u64, index: u64, defective: bool, side: usize) -> Generated {
    assert!(side >= 8, "image side {side} is below the 8 pixel minimum");
    let mut rng = image_rng(seed, index);
    let plate = sample_plate(&mut rng);
    let base = render_plate(&plate, side);
    let normal = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let noise: Vec<f32> = (0..side * side)
        .map(|_| normal.sample(&mut rng) as f32)
        .collect();
    let clean = Tensor::new([1, side, side], finish(&base, &noise)).expect("sized");
    if !defective {
        return Generated {
            plate,
            defects: Vec::new(),
            image: clean.clone(),
            clean,
        };
    }
    let count = rng.gen_range(1..=3);
    let mut defects = Vec::with_capacity(count);
    let mut img = base;
    for _ in 0..count {
        // resample until the defect is visible on its own
        loop {
            let kind = *DefectKind::ALL.choose(&mut rng).expect("non-empty");
            let d = sample_defect(&mut rng, kind, side);
            let mut trial = img.clone();
            apply_defect(&mut trial, &d, side);
            let before = finish(&img, &noise);
            let after = finish(&trial, &noise);
            let changed = before
                .iter()
                .zip(&after)
                .filter(|(a, b)| (*a - *b).abs() >= MIN_DEFECT_DELTA)
                .count();
            if changed >= MIN_DEFECT_PIXELS {
                img = trial;
                defects.push(d);
                break;
            }
        }
    }
    let image = Tensor::new([1, side, side], finish(&img, &noise)).expect("sized");
    Generated {
        plate,
        defects,
        clean,
        image,
    }
}

/// Generate a seeded set: `n_defective` defective plates followed by
/// `n_clean` clean ones, unsplit.
pub fn generate(seed: u64, n_defective: usize, n_clean: usize) -> SampleSet {
    generate_sized(seed, n_defective, n_clean, IMAGE_SIDE)
}

pub fn generate_sized(seed: u64, n_defective: usize, n_clean: usize, side: usize) -> SampleSet {
    let samples = (0..n_defective + n_clean)
        .into_par_iter()
        .map(|i| {
            let defective = i < n_defective;
            let g = generate_one(seed, i as u64, defective, side);
            let label = if defective {
                Label::Defective
            } else {
                Label::NonDefective
            };
            Sample {
                id: format!("{i:05}"),
                image: g.image,
                label,
                split: Split::Unassigned,
            }
        })
        .collect();
    SampleSet {
        samples,
        generator_seed: Some(seed),
    }
}

/// Best accuracy of a single threshold on mean image brightness (either
/// polarity). A set is not trivially separable when this stays well below 1.
pub fn brightness_threshold_accuracy(set: &SampleSet) -> f64 {
    if set.is_empty() {
        return 0.0;
    }
    let mut points: Vec<(f64, usize)> = set
        .samples
        .iter()
        .map(|s| {
            let img = s.image.data();
            let mean = img.iter().map(|&v| v as f64).sum::<f64>() / img.len().max(1) as f64;
            (mean, s.label.class())
        })
        .collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = points.len();
    let positives = points.iter().filter(|p| p.1 == 1).count();
    // threshold after position k: predict 0 below, 1 above (and the flip)
    let mut best = positives.max(n - positives);
    let mut neg_below = 0;
    let mut pos_below = 0;
    for (k, p) in points.iter().enumerate() {
        if p.1 == 1 {
            pos_below += 1;
        } else {
            neg_below += 1;
        }
        if k + 1 < n && points[k + 1].0 == p.0 {
            continue;
        }
        let correct = neg_below + (positives - pos_below);
        best = best.max(correct).max(n - correct);
    }
    best as f64 / n as f64
}

// split

/// Stratified split: `round(0.25 * N)` training samples, distributed over
/// classes by largest remainder. Within a class samples are ordered by id
/// before the seeded shuffle, so the result does not depend on input order.
pub fn split(set: &SampleSet, seed: u64) -> Result<SampleSet> {
    split_fraction(set, seed, TRAIN_FRACTION)
}

pub fn split_fraction(set: &SampleSet, seed: u64, fraction: f64) -> Result<SampleSet> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid("split", format!("fraction {fraction} outside [0, 1]")));
    }
    let mut out = set.clone();
    let n = set.len();
    let classes = [Label::NonDefective, Label::Defective];
    let members: Vec<Vec<usize>> = classes
        .iter()
        .map(|&l| {
            let mut idx: Vec<usize> = (0..n).filter(|&i| set.samples[i].label == l).collect();
            idx.sort_by(|&a, &b| set.samples[a].id.cmp(&set.samples[b].id));
            idx
        })
        .collect();
    for (l, m) in classes.iter().zip(&members) {
        if m.len() == 1 {
            return Err(Error::invalid(
                "split",
                format!("class {l:?} has a single sample; need at least 2"),
            ));
        }
    }
    let total = (fraction * n as f64).round() as usize;
    let quotas: Vec<f64> = members
        .iter()
        .map(|m| total as f64 * m.len() as f64 / n.max(1) as f64)
        .collect();
    let mut take: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..classes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = total - take.iter().sum::<usize>();
    for &c in &order {
        if left == 0 {
            break;
        }
        if take[c] < members[c].len() {
            take[c] += 1;
            left -= 1;
        }
    }
    for (c, m) in members.iter().enumerate() {
        let mut rng = image_rng(seed, c as u64);
        let mut shuffled = m.clone();
        shuffled.shuffle(&mut rng);
        for (rank, &i) in shuffled.iter().enumerate() {
            out.samples[i].split = if rank < take[c] {
                Split::Train
            } else {
                Split::Test
            };
        }
    }
    Ok(out)
}

// PNG directories

pub const MANIFEST: &str = "split.csv";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    filename: String,
    label: Label,
    split: Split,
}

/// Parse `<id>_<OK|NG>[_anything].png`.
pub fn parse_filename(name: &str) -> Option<(String, Label)> {
    let stem = name.strip_suffix(".png").or_else(|| name.strip_suffix(".PNG"))?;
    let mut parts = stem.split('_');
    let id = parts.next().filter(|s| !s.is_empty())?;
    let label = match parts.next()? {
        "NG" => Label::Defective,
        "OK" => Label::NonDefective,
        _ => return None,
    };
    Some((id.to_string(), label))
}

fn file_err(path: &Path, reason: impl ToString) -> Error {
    Error::File {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Decode an 8-bit image into a `(1, H, W)` tensor in `[0, 1]`.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor<f32>> {
    let img = image::load_from_memory(bytes)
        .map_err(|e| Error::invalid("decode", e.to_string()))?
        .to_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Tensor::new([1, h as usize, w as usize], data)
}

/// Encode a `(1, H, W)` tensor as an 8-bit grayscale PNG.
pub fn encode_png(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let &[1, h, w] = image.shape() else {
        return Err(Error::shape("encode", "shape", "(1, H, W)", format!("{:?}", image.shape())));
    };
    let raw: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| Error::invalid("encode", "buffer size mismatch"))?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::invalid("encode", e.to_string()))?;
    Ok(out.into_inner())
}

/// Load every `<id>_<OK|NG>*.png` in `dir` (sorted by filename). Images
/// must be 224x224. A `split.csv` manifest, if present, restores the split.
pub fn load_directory(dir: &Path) -> Result<SampleSet> {
    let entries = fs::read_dir(dir).map_err(|e| file_err(dir, e))?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
        .collect();
    names.sort();
    let mut splits = std::collections::HashMap::new();
    let manifest = dir.join(MANIFEST);
    if manifest.exists() {
        let mut rdr = csv::Reader::from_path(&manifest)?;
        for row in rdr.deserialize::<ManifestRow>() {
            let row = row?;
            splits.insert(row.filename, row.split);
        }
    }
    let mut samples = Vec::with_capacity(names.len());
    for name in names {
        let path = dir.join(&name);
        let Some((id, label)) = parse_filename(&name) else {
            return Err(file_err(&path, "name is not <id>_<OK|NG>.png"));
        };
        let bytes = fs::read(&path).map_err(|e| file_err(&path, e))?;
        let image = decode_image(&bytes).map_err(|e| file_err(&path, e))?;
        if image.shape() != [1, IMAGE_SIDE, IMAGE_SIDE] {
            return Err(file_err(
                &path,
                format!(
                    "expected {IMAGE_SIDE}x{IMAGE_SIDE}, got {}x{}",
                    image.shape()[2],
                    image.shape()[1]
                ),
            ));
        }
        samples.push(Sample {
            id,
            image,
            label,
            split: splits.get(&name).copied().unwrap_or(Split::Unassigned),
        });
    }
    Ok(SampleSet {
        samples,
        generator_seed: None,
    })
}

pub fn sample_filename(s: &Sample) -> String {
    format!("{}_{}.png", s.id, s.label.tag())
}

/// Write every sample as a PNG plus the `split.csv` manifest.
pub fn write_directory(set: &SampleSet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| file_err(dir, e))?;
    let mut w = csv::Writer::from_path(dir.join(MANIFEST))?;
    for s in &set.samples {
        let name = sample_filename(s);
        let path = dir.join(&name);
        fs::write(&path, encode_png(&s.image)?).map_err(|e| file_err(&path, e))?;
        w.serialize(ManifestRow {
            filename: name,
            label: s.label,
            split: s.split,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filename_labels() {
        assert_eq!(
            parse_filename("00209_NG_Image.png"),
            Some(("00209".into(), Label::Defective))
        );
        assert_eq!(parse_filename("7_OK.png"), Some(("7".into(), Label::NonDefective)));
        assert_eq!(parse_filename("7_XX.png"), None);
        assert_eq!(parse_filename("7.png"), None);
    }

    #[test]
    fn generation_is_deterministic_and_bounded() {
        let a = generate_sized(5, 3, 3, 64);
        let b = generate_sized(5, 3, 3, 64);
        assert_eq!(a, b);
        assert_ne!(a, generate_sized(6, 3, 3, 64));
        for s in &a.samples {
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn split_sizes() {
        let set = SampleSet {
            samples: (0..822)
                .map(|i| Sample {
                    id: format!("{i:05}"),
                    image: Tensor::zeros([1, 1, 1]),
                    label: if i < 422 {
                        Label::Defective
                    } else {
                        Label::NonDefective
                    },
                    split: Split::Unassigned,
                })
                .collect(),
            generator_seed: None,
        };
        let s = split(&set, 1).unwrap();
        assert_eq!(s.indices(Split::Train).len(), 206);
        assert_eq!(s.indices(Split::Test).len(), 616);
    }

    #[test]
    fn threshold_accuracy_detects_separable_sets() {
        let mk = |v: f32, l| Sample {
            id: String::new(),
            image: Tensor::full([1, 2, 2], v),
            label: l,
            split: Split::Unassigned,
        };
        let set = SampleSet {
            samples: vec![
                mk(0.1, Label::NonDefective),
                mk(0.2, Label::NonDefective),
                mk(0.8, Label::Defective),
                mk(0.9, Label::Defective),
            ],
            generator_seed: None,
        };
        assert_eq!(brightness_threshold_accuracy(&set), 1.0);
    }
}
