//! Synthetic rectangle scenes, flip augmentation and the on-disk dataset
//! format.
//!
//! A dataset directory holds `annotations.txt` and one binary PPM (`P6`,
//! 8-bit) image per scene under `images/`. The annotation file is
//!
//! ```text
//! classes 2
//! scene 0 images/00000.ppm
//! 0 12.5 20 9 14
//! scene 1 images/00001.ppm
//! ```
//!
//! where each object line is `class_id cx cy w h`. Pixel values are stored as
//! `round(255 v)` and read back as `byte / 255`.

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::assignment::GroundTruth;
use crate::autodiff::Tensor;
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

/// Config keys read by [`GenSpec::from_config`].
pub const GEN_KEYS: &[&str] = &[
    "image_size",
    "n_classes",
    "class_freq",
    "size_ranges",
    "objects_per_scene",
    "crowding",
    "noise",
    "data_seed",
];

/// Minimum box side in pixels.
pub const MIN_SIDE: usize = 4;
/// Independent objects may overlap earlier ones up to this IoU.
pub const MAX_INDEPENDENT_IOU: f64 = 0.1;
/// IoU interval of crowd pairs.
pub const CROWD_IOU: (f64, f64) = (0.3, 0.7);

const BACKGROUND: f64 = 0.1;
const PALETTE: [[f64; 3]; 8] = [
    [0.9, 0.2, 0.2],
    [0.2, 0.8, 0.3],
    [0.25, 0.35, 0.95],
    [0.95, 0.85, 0.2],
    [0.8, 0.3, 0.85],
    [0.2, 0.85, 0.9],
    [0.95, 0.55, 0.15],
    [0.6, 0.6, 0.6],
];

/// Scene generator parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GenSpec {
    pub image_size: usize,
    pub n_classes: usize,
    pub class_freq: Vec<f64>,
    /// Per-class `(min, max)` side length in pixels, drawn independently for
    /// width and height.
    pub size_ranges: Vec<(usize, usize)>,
    /// Independent objects per scene, inclusive.
    pub objects_per_scene: (usize, usize),
    /// Probability that an object spawns an overlapping same-class neighbor.
    pub crowding: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            image_size: 64,
            n_classes: 2,
            class_freq: vec![0.5, 0.5],
            size_ranges: vec![(8, 24), (8, 24)],
            objects_per_scene: (1, 4),
            crowding: 0.0,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_classes == 0 {
            return bad("n_classes must be positive".into());
        }
        if self.class_freq.len() != self.n_classes || self.size_ranges.len() != self.n_classes {
            return bad(format!("class_freq and size_ranges need {} entries", self.n_classes));
        }
        if self.class_freq.iter().any(|&p| !(p >= 0.0)) || (self.class_freq.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!(
                "class_freq {:?} must be non-negative and sum to 1",
                self.class_freq
            ));
        }
        for &(lo, hi) in &self.size_ranges {
            if lo < MIN_SIDE || lo > hi || hi > self.image_size {
                return bad(format!(
                    "size range {lo}:{hi} must satisfy {MIN_SIDE} <= min <= max <= image_size"
                ));
            }
        }
        if self.objects_per_scene.0 > self.objects_per_scene.1 {
            return bad("objects_per_scene min exceeds max".into());
        }
        if !(0.0..=1.0).contains(&self.crowding) || !(self.noise >= 0.0) {
            return bad("crowding must be in [0, 1] and noise non-negative".into());
        }
        Ok(())
    }

    /// Reads the [`GEN_KEYS`], defaulting absent ones.
    pub fn from_config(kv: &KeyValues) -> Result<Self> {
        let d = GenSpec::default();
        let n_classes = kv.get_or("n_classes", d.n_classes)?;
        let spec = GenSpec {
            image_size: kv.get_or("image_size", d.image_size)?,
            n_classes,
            class_freq: kv
                .get_list("class_freq")?
                .unwrap_or_else(|| vec![1.0 / n_classes as f64; n_classes]),
            size_ranges: kv
                .get_ranges("size_ranges")?
                .unwrap_or_else(|| vec![d.size_ranges[0]; n_classes]),
            objects_per_scene: match kv.get_ranges("objects_per_scene")? {
                None => d.objects_per_scene,
                Some(r) if r.len() == 1 => r[0],
                Some(_) => return Err(kv.invalid("objects_per_scene", "expected a single min:max range")),
            },
            crowding: kv.get_or("crowding", d.crowding)?,
            noise: kv.get_or("noise", d.noise)?,
            seed: kv.get_or("data_seed", d.seed)?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// An image with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// `[H, W, 3]`, values in `[0, 1]`.
    pub image: Tensor,
    pub gt: GroundTruth,
}

impl Scene {
    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }
}

/// Color of class `c`.
pub fn class_color(c: usize) -> [f64; 3] {
    if c < PALETTE.len() {
        return PALETTE[c];
    }
    let t = (c as f64 * 0.618_033_988_75).fract() * TAU;
    [0.0, 1.0, 2.0].map(|k| 0.5 + 0.4 * (t + k * TAU / 3.0).cos())
}

/// Scenes `0..n` of `spec`; scene `i` depends only on `(spec, i)`.
pub fn generate(spec: &GenSpec, n: usize) -> Result<Vec<Scene>> {
    spec.validate()?;
    (0..n).map(|i| generate_scene(spec, i as u64)).collect()
}

pub fn generate_scene(spec: &GenSpec, index: u64) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let s = spec.image_size;
    let classes = WeightedIndex::new(&spec.class_freq).map_err(|e| Error::Config(format!("class_freq: {e}")))?;

    // boxes as integer corners (x1, y1, w, h)
    let mut rects: Vec<(usize, usize, usize, usize, usize)> = Vec::new();
    let count = rng.gen_range(spec.objects_per_scene.0..=spec.objects_per_scene.1);
    for _ in 0..count {
        let c = classes.sample(&mut rng);
        let (lo, hi) = spec.size_ranges[c];
        let w = rng.gen_range(lo..=hi);
        let h = rng.gen_range(lo..=hi);
        let placed = (0..100).find_map(|_| {
            let r = (c, rng.gen_range(0..=s - w), rng.gen_range(0..=s - h), w, h);
            let b = rect_box(r);
            rects
                .iter()
                .all(|&o| iou(&b, &rect_box(o)) <= MAX_INDEPENDENT_IOU)
                .then_some(r)
        });
        let Some(r) = placed else { continue };
        rects.push(r);
        if spec.crowding > 0.0 && rng.gen_bool(spec.crowding) {
            if let Some(n) = crowd_neighbor(&mut rng, r, s) {
                rects.push(n);
            }
        }
    }

    let mut data = vec![BACKGROUND; s * s * 3];
    for &(c, x1, y1, w, h) in &rects {
        let color = class_color(c);
        for y in y1..y1 + h {
            for x in x1..x1 + w {
                let edge = y == y1 || y == y1 + h - 1 || x == x1 || x == x1 + w - 1;
                let k = if edge { 0.5 } else { 1.0 };
                for ch in 0..3 {
                    data[(y * s + x) * 3 + ch] = color[ch] * k;
                }
            }
        }
    }
    if spec.noise > 0.0 {
        let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(format!("noise: {e}")))?;
        for v in &mut data {
            *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    let gt = GroundTruth::new(
        rects.iter().map(|&r| rect_box(r)).collect(),
        rects.iter().map(|r| r.0).collect(),
    )?;
    Ok(Scene {
        image: Tensor::new(vec![s, s, 3], data)?,
        gt,
    })
}

fn rect_box((_, x1, y1, w, h): (usize, usize, usize, usize, usize)) -> BBox {
    BBox::new(
        x1 as f64 + w as f64 / 2.0,
        y1 as f64 + h as f64 / 2.0,
        w as f64,
        h as f64,
    )
}

/// A same-size copy shifted along one axis so that the pair's IoU lands in
/// [`CROWD_IOU`].
fn crowd_neighbor(
    rng: &mut ChaCha8Rng,
    r: (usize, usize, usize, usize, usize),
    s: usize,
) -> Option<(usize, usize, usize, usize, usize)> {
    let (c, x1, y1, w, h) = r;
    for _ in 0..20 {
        let u: f64 = rng.gen_range(0.35..0.65);
        let horizontal = rng.gen_bool(0.5);
        let side = if horizontal { w } else { h };
        // same-size boxes shifted by d along one axis: IoU = (side - d) / (side + d)
        let d = (side as f64 * (1.0 - u) / (1.0 + u)).round() as usize;
        if d == 0 {
            continue;
        }
        let first_sign = rng.gen_bool(0.5);
        for positive in [first_sign, !first_sign] {
            let (pos, limit) = if horizontal { (x1, s - w) } else { (y1, s - h) };
            let moved = if positive { pos + d } else { pos.wrapping_sub(d) };
            if moved > limit {
                continue;
            }
            let n = if horizontal {
                (c, moved, y1, w, h)
            } else {
                (c, x1, moved, w, h)
            };
            let v = iou(&rect_box(r), &rect_box(n));
            if (CROWD_IOU.0..=CROWD_IOU.1).contains(&v) {
                return Some(n);
            }
        }
    }
    None
}

/// Mirrors the image columns and maps every box `cx -> W - cx`.
pub fn hflip(scene: &Scene) -> Scene {
    let (h, w) = (scene.height(), scene.width());
    let src = scene.image.data();
    let mut data = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let (d, s) = ((y * w + x) * 3, (y * w + (w - 1 - x)) * 3);
            data[d..d + 3].copy_from_slice(&src[s..s + 3]);
        }
    }
    let boxes = scene
        .gt
        .boxes
        .iter()
        .map(|b| BBox::new(w as f64 - b.cx, b.cy, b.w, b.h))
        .collect();
    Scene {
        image: Tensor::new(scene.image.shape().to_vec(), data).expect("same shape"),
        gt: GroundTruth::new(boxes, scene.gt.class_ids.clone()).expect("same lengths"),
    }
}

/// Scenes plus the class count they were drawn for.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_classes: usize,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    /// Box shapes grouped by class, for anchor clustering.
    pub fn shapes_per_class(&self) -> Vec<Vec<(f64, f64)>> {
        let mut out = vec![Vec::new(); self.n_classes];
        for s in &self.scenes {
            for (b, &c) in s.gt.boxes.iter().zip(&s.gt.class_ids) {
                if c < out.len() {
                    out[c].push((b.w, b.h));
                }
            }
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("images"))?;
        let mut ann = format!("classes {}\n", self.n_classes);
        for (i, scene) in self.scenes.iter().enumerate() {
            let rel = format!("images/{i:05}.ppm");
            write_ppm(&dir.join(&rel), &scene.image)?;
            writeln!(ann, "scene {i} {rel}").expect("write to String");
            for (b, c) in scene.gt.boxes.iter().zip(&scene.gt.class_ids) {
                writeln!(ann, "{c} {} {} {} {}", b.cx, b.cy, b.w, b.h).expect("write to String");
            }
        }
        fs::write(dir.join("annotations.txt"), ann)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("annotations.txt");
        let text = fs::read_to_string(&path)?;
        let records = parse_annotations(&text, &path)?;
        let n_classes = records.n_classes.unwrap_or_else(|| {
            records
                .scenes
                .iter()
                .flat_map(|(_, g)| g.class_ids.iter().map(|c| c + 1))
                .max()
                .unwrap_or(0)
        });
        let mut scenes = Vec::with_capacity(records.scenes.len());
        for (rel, gt) in records.scenes {
            if let Some(&c) = gt.class_ids.iter().find(|&&c| c >= n_classes) {
                return Err(Error::parse(
                    &path,
                    0,
                    format!("class {c} outside the declared {n_classes} classes"),
                ));
            }
            scenes.push(Scene {
                image: read_ppm(&dir.join(rel))?,
                gt,
            });
        }
        Ok(Dataset { n_classes, scenes })
    }
}

struct Annotations {
    n_classes: Option<usize>,
    scenes: Vec<(PathBuf, GroundTruth)>,
}

fn parse_annotations(text: &str, path: &Path) -> Result<Annotations> {
    let mut out = Annotations {
        n_classes: None,
        scenes: Vec::new(),
    };
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let err = |m: String| Error::parse(path, n + 1, m);
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields[0] {
            "classes" => {
                let [_, k] = fields[..] else {
                    return Err(err(format!("expected `classes N`, got `{line}`")));
                };
                out.n_classes = Some(k.parse().map_err(|_| err(format!("bad class count `{k}`")))?);
            }
            "scene" => {
                let [_, _, file] = fields[..] else {
                    return Err(err(format!("expected `scene ID FILE`, got `{line}`")));
                };
                out.scenes.push((PathBuf::from(file), GroundTruth::default()));
            }
            _ => {
                if fields.len() != 5 {
                    return Err(err(format!(
                        "expected 5 fields `class cx cy w h`, got {}",
                        fields.len()
                    )));
                }
                let Some((_, gt)) = out.scenes.last_mut() else {
                    return Err(err("object line before any `scene` record".into()));
                };
                let c: usize = fields[0]
                    .parse()
                    .map_err(|_| err(format!("bad class id `{}`", fields[0])))?;
                let mut v = [0.0; 4];
                for (slot, f) in v.iter_mut().zip(&fields[1..]) {
                    *slot = f.parse().map_err(|_| err(format!("bad number `{f}`")))?;
                }
                let b = BBox::try_new(v[0], v[1], v[2], v[3])
                    .ok_or_else(|| err("box width and height must be positive".into()))?;
                gt.push(b, c);
            }
        }
    }
    Ok(out)
}

/// Writes an `[H, W, 3]` tensor as 8-bit binary PPM.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    buf.extend(image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Writes an `[H, W]` map with values in `[0, 1]` as 8-bit binary PGM.
pub fn write_pgm(path: &Path, w: usize, h: usize, values: &[f64]) -> Result<()> {
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    buf.extend(values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| Error::parse(path, 1, m.to_string());
    // header: magic, width, height, maxval separated by whitespace, comments allowed
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated PPM header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    i += 1;
    if tokens[0] != "P6" || tokens[3] != "255" {
        return Err(bad("expected an 8-bit binary P6 image"));
    }
    let w: usize = tokens[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = tokens[2].parse().map_err(|_| bad("bad height"))?;
    let pixels = bytes.get(i..i + w * h * 3).ok_or_else(|| bad("truncated pixel data"))?;
    Tensor::new(vec![h, w, 3], pixels.iter().map(|&b| b as f64 / 255.0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quantized(s: &Scene) -> Scene {
        let mut q = s.clone();
        q.image
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = (*v * 255.0).round() / 255.0);
        q
    }

    #[test]
    fn empty_scenes() {
        let spec = GenSpec {
            objects_per_scene: (0, 0),
            ..GenSpec::default()
        };
        let scenes = generate(&spec, 5).unwrap();
        assert!(scenes.iter().all(|s| s.gt.is_empty()));
    }

    #[test]
    fn generation_is_seeded() {
        let spec = GenSpec {
            crowding: 0.5,
            ..GenSpec::default()
        };
        assert_eq!(generate(&spec, 4).unwrap(), generate(&spec, 4).unwrap());
        let other = GenSpec {
            seed: 1,
            ..spec.clone()
        };
        assert_ne!(generate(&spec, 4).unwrap(), generate(&other, 4).unwrap());
    }

    #[test]
    fn boxes_respect_bounds_and_ranges() {
        let spec = GenSpec {
            size_ranges: vec![(4, 10), (12, 30)],
            crowding: 0.5,
            objects_per_scene: (1, 6),
            ..GenSpec::default()
        };
        for s in generate(&spec, 50).unwrap() {
            for (b, &c) in s.gt.boxes.iter().zip(&s.gt.class_ids) {
                let (x1, y1, x2, y2) = b.corners();
                assert!(x1 >= 0.0 && y1 >= 0.0 && x2 <= 64.0 && y2 <= 64.0);
                let (lo, hi) = spec.size_ranges[c];
                assert!(b.w >= lo as f64 && b.w <= hi as f64 && b.h >= lo as f64 && b.h <= hi as f64);
            }
        }
    }

    #[test]
    fn full_crowding_always_yields_a_pair() {
        let spec = GenSpec {
            crowding: 1.0,
            objects_per_scene: (1, 3),
            ..GenSpec::default()
        };
        for s in generate(&spec, 100).unwrap() {
            let g = &s.gt;
            let found = (0..g.len()).any(|i| {
                (i + 1..g.len()).any(|j| {
                    let v = iou(&g.boxes[i], &g.boxes[j]);
                    g.class_ids[i] == g.class_ids[j] && (0.3..=0.7).contains(&v)
                })
            });
            assert!(found);
        }
    }

    #[test]
    fn class_frequencies_match_binomial() {
        let spec = GenSpec {
            class_freq: vec![0.9, 0.1],
            objects_per_scene: (4, 4),
            size_ranges: vec![(4, 6), (4, 6)],
            noise: 0.0,
            ..GenSpec::default()
        };
        let mut counts = [0usize; 2];
        let mut total = 0;
        let mut i = 0;
        while total < 10_000 {
            let s = generate_scene(&spec, i).unwrap();
            for &c in &s.gt.class_ids {
                if total < 10_000 {
                    counts[c] += 1;
                    total += 1;
                }
            }
            i += 1;
        }
        let (n, p): (f64, f64) = (10_000.0, 0.9);
        let sigma = (n * p * (1.0 - p)).sqrt();
        assert!((counts[0] as f64 - n * p).abs() < 3.0 * sigma, "{counts:?}");
    }

    #[test]
    fn flip_examples() {
        let spec = GenSpec::default();
        let s = generate_scene(&spec, 3).unwrap();
        assert_eq!(hflip(&hflip(&s)), s);
        let mut one = s.clone();
        one.gt = GroundTruth::new(
            vec![BBox::new(10.0, 5.0, 4.0, 4.0), BBox::new(32.0, 9.0, 6.0, 6.0)],
            vec![0, 1],
        )
        .unwrap();
        let f = hflip(&one);
        assert_eq!(f.gt.boxes[0].cx, 54.0);
        assert_eq!(f.gt.boxes[1].cx, 32.0);
        let px = |t: &Tensor, y: usize, x: usize| t.data()[(y * 64 + x) * 3];
        assert_eq!(px(&f.image, 7, 0), px(&s.image, 7, 63));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = GenSpec {
            crowding: 0.5,
            ..GenSpec::default()
        };
        let ds = Dataset {
            n_classes: 2,
            scenes: generate(&spec, 6).unwrap(),
        };
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.n_classes, 2);
        for (a, b) in ds.scenes.iter().zip(&back.scenes) {
            assert_eq!(a.gt, b.gt);
            assert_eq!(quantized(a).image, b.image);
        }
    }

    #[test]
    fn empty_and_malformed_annotations() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("annotations.txt"), "").unwrap();
        assert!(Dataset::load(dir.path()).unwrap().scenes.is_empty());

        fs::write(
            dir.path().join("annotations.txt"),
            "classes 2\nscene 0 a.ppm\n0 1 2 3\n",
        )
        .unwrap();
        let e = Dataset::load(dir.path()).unwrap_err().to_string();
        assert!(e.contains("annotations.txt:3:") && e.contains("5 fields"), "{e}");
    }

    #[test]
    fn spec_from_config() {
        let kv = KeyValues::parse(
            "n_classes = 2\nclass_freq = 0.9, 0.1\nsize_ranges = 6:12, 16:28\nobjects_per_scene = 2:5\ncrowding = 0.8\n",
            Path::new("g.cfg"),
        )
        .unwrap();
        let g = GenSpec::from_config(&kv).unwrap();
        assert_eq!(g.size_ranges, vec![(6, 12), (16, 28)]);
        assert_eq!(g.objects_per_scene, (2, 5));
        let bad = KeyValues::parse("class_freq = 0.5, 0.6\n", Path::new("g.cfg")).unwrap();
        assert!(GenSpec::from_config(&bad).is_err());
    }
}
