//! Annotation formats (WIDER-style boxes, FDDB-style ellipses), the synthetic
//! dataset generator and dataset manifests.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::geometry::{BBox, Ellipse};
use crate::pyramid::{read_image, write_ppm, Raster};

/// Per-box attribute flags in WIDER column order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Attributes {
    pub blur: u8,
    pub expression: u8,
    pub illumination: u8,
    pub invalid: u8,
    pub occlusion: u8,
    pub pose: u8,
}

impl Attributes {
    pub const NAMES: [&'static str; 6] = ["blur", "expression", "illumination", "invalid", "occlusion", "pose"];

    pub fn values(&self) -> [u8; 6] {
        [self.blur, self.expression, self.illumination, self.invalid, self.occlusion, self.pose]
    }

    pub fn from_values(v: [u8; 6]) -> Self {
        Attributes { blur: v[0], expression: v[1], illumination: v[2], invalid: v[3], occlusion: v[4], pose: v[5] }
    }

    pub fn is_invalid(&self) -> bool {
        self.invalid != 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annotation {
    pub bbox: BBox,
    pub attrs: Attributes,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnnotatedImage {
    pub path: String,
    pub boxes: Vec<Annotation>,
    pub ellipses: Vec<Ellipse>,
}

impl AnnotatedImage {
    pub fn bboxes(&self) -> Vec<BBox> {
        self.boxes.iter().map(|a| a.bbox).collect()
    }
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    source: &'a str,
    last_good: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str, source: &'a str) -> Self {
        Lines { inner: text.lines().enumerate(), source, last_good: 0 }
    }

    /// Next line with its 1-based number; `None` at end of input.
    fn next_line(&mut self) -> Option<(usize, &'a str)> {
        let (i, l) = self.inner.next()?;
        Some((i + 1, l.trim()))
    }

    fn require(&mut self, what: &str) -> Result<(usize, &'a str)> {
        self.next_line().ok_or_else(|| {
            Error::parse(
                self.source,
                self.last_good + 1,
                format!("unexpected end of file while reading {what} (last good line {})", self.last_good),
            )
        })
    }
}

fn parse_count(line: (usize, &str), source: &str) -> Result<usize> {
    line.1.parse().map_err(|_| Error::parse(source, line.0, format!("expected an object count, got {:?}", line.1)))
}

/// Parses WIDER-style box annotations.
pub fn parse_wider_str(text: &str, source: &str) -> Result<Vec<AnnotatedImage>> {
    let mut lines = Lines::new(text, source);
    let mut out = Vec::new();
    while let Some((ln, path)) = lines.next_line() {
        if path.is_empty() {
            // blank lines are tolerated only at the end of input
            if let Some((n, l)) = lines.next_line() {
                return Err(Error::parse(source, n, format!("expected end of file after blank line, got {l:?}")));
            }
            break;
        }
        lines.last_good = ln;
        let count_line = lines.require("an object count")?;
        let count = parse_count(count_line, source)?;
        lines.last_good = count_line.0;
        let mut img = AnnotatedImage { path: path.to_string(), ..Default::default() };
        for k in 0..count.max(1) {
            let (n, l) = lines.require("a box line")?;
            let vals: Vec<i64> = l
                .split_whitespace()
                .map(|t| t.parse::<i64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::parse(source, n, format!("box line must hold integers: {l:?}")))?;
            if vals.len() != 10 {
                return Err(Error::parse(source, n, format!("box line needs 10 fields, found {}", vals.len())));
            }
            lines.last_good = n;
            if count == 0 {
                // placeholder line of an empty block
                debug_assert_eq!(k, 0);
                continue;
            }
            if vals[2] <= 0 || vals[3] <= 0 {
                return Err(Error::parse(source, n, format!("box dimensions must be positive, got {}x{}", vals[2], vals[3])));
            }
            let mut flags = [0u8; 6];
            for (f, v) in flags.iter_mut().zip(&vals[4..]) {
                *f = u8::try_from(*v).map_err(|_| Error::parse(source, n, format!("attribute out of range: {v}")))?;
            }
            let bbox = BBox::new(vals[0] as f64, vals[1] as f64, vals[2] as f64, vals[3] as f64)
                .map_err(|e| Error::parse(source, n, e.to_string()))?;
            img.boxes.push(Annotation { bbox, attrs: Attributes::from_values(flags) });
        }
        out.push(img);
    }
    Ok(out)
}

pub fn parse_wider(path: impl AsRef<Path>) -> Result<Vec<AnnotatedImage>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_wider_str(&text, &path.display().to_string())
}

/// Writes WIDER-style text. Box coordinates must be integers.
pub fn write_wider(images: &[AnnotatedImage]) -> Result<String> {
    let mut s = String::new();
    for img in images {
        let _ = writeln!(s, "{}\n{}", img.path, img.boxes.len());
        if img.boxes.is_empty() {
            s.push_str("0 0 0 0 0 0 0 0 0 0\n");
        }
        for a in &img.boxes {
            let b = a.bbox;
            let coords = [b.x, b.y, b.w, b.h];
            if coords.iter().any(|v| v.fract() != 0.0) {
                return Err(Error::Data(format!("{}: box {b:?} has non-integer coordinates", img.path)));
            }
            let f = a.attrs.values();
            let _ = writeln!(
                s,
                "{} {} {} {} {} {} {} {} {} {}",
                b.x, b.y, b.w, b.h, f[0], f[1], f[2], f[3], f[4], f[5]
            );
        }
    }
    Ok(s)
}

/// Parses FDDB-style ellipse annotations: `ra rb angle cx cy 1` per object.
pub fn parse_fddb_str(text: &str, source: &str) -> Result<Vec<AnnotatedImage>> {
    let mut lines = Lines::new(text, source);
    let mut out = Vec::new();
    while let Some((ln, name)) = lines.next_line() {
        if name.is_empty() {
            if let Some((n, l)) = lines.next_line() {
                return Err(Error::parse(source, n, format!("expected end of file after blank line, got {l:?}")));
            }
            break;
        }
        lines.last_good = ln;
        let cl = lines.require("an ellipse count")?;
        let count = parse_count(cl, source)?;
        lines.last_good = cl.0;
        let mut img = AnnotatedImage { path: name.to_string(), ..Default::default() };
        for _ in 0..count {
            let (n, l) = lines.require("an ellipse line")?;
            let v: Vec<f64> = l
                .split_whitespace()
                .map(str::parse::<f64>)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::parse(source, n, format!("ellipse line must hold numbers: {l:?}")))?;
            if v.len() != 6 {
                return Err(Error::parse(source, n, format!("ellipse line needs 6 fields, found {}", v.len())));
            }
            let e = Ellipse::new(v[3], v[4], v[0], v[1], v[2]).map_err(|e| Error::parse(source, n, e.to_string()))?;
            img.ellipses.push(e);
            lines.last_good = n;
        }
        out.push(img);
    }
    Ok(out)
}

pub fn parse_fddb(path: impl AsRef<Path>) -> Result<Vec<AnnotatedImage>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_fddb_str(&text, &path.display().to_string())
}

pub fn write_fddb(images: &[AnnotatedImage]) -> String {
    let mut s = String::new();
    for img in images {
        let _ = writeln!(s, "{}\n{}", img.path, img.ellipses.len());
        for e in &img.ellipses {
            let _ = writeln!(s, "{} {} {} {} {} 1", e.ra, e.rb, e.theta, e.cx, e.cy);
        }
    }
    s
}

// ---------------------------------------------------------------------------
// Synthetic data

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub width: usize,
    pub height: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_height: f64,
    pub max_height: f64,
    /// Object width over height.
    pub aspect: f64,
    /// Standard deviation of per-pixel noise.
    pub noise: f64,
    /// Number of distractor rectangles per image.
    pub clutter: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            width: 320,
            height: 320,
            min_objects: 1,
            max_objects: 5,
            min_height: 10.0,
            max_height: 300.0,
            aspect: 0.8,
            noise: 0.03,
            clutter: 6,
            seed: 0,
        }
    }
}

const PLACEMENT_ATTEMPTS: usize = 100;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.min_objects > self.max_objects {
            return bad("min_objects exceeds max_objects".into());
        }
        if !(self.min_height >= 1.0 && self.min_height <= self.max_height) {
            return bad("need 1 <= min_height <= max_height".into());
        }
        if self.max_height > self.height as f64 || (self.max_height * self.aspect).round() > self.width as f64 {
            return bad(format!("objects up to {} px tall do not fit a {}x{} image", self.max_height, self.width, self.height));
        }
        if !(self.aspect > 0.0 && self.noise >= 0.0) {
            return bad("aspect must be positive and noise non-negative".into());
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("width".into(), self.width.to_string()),
            ("height".into(), self.height.to_string()),
            ("min_objects".into(), self.min_objects.to_string()),
            ("max_objects".into(), self.max_objects.to_string()),
            ("min_height".into(), self.min_height.to_string()),
            ("max_height".into(), self.max_height.to_string()),
            ("aspect".into(), self.aspect.to_string()),
            ("noise".into(), self.noise.to_string()),
            ("clutter".into(), self.clutter.to_string()),
            ("seed".into(), self.seed.to_string()),
        ]
    }

    /// Defaults overridden by the keys present in `kv`.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut s = SyntheticSpec::default();
        let known: Vec<String> = s.to_kv().into_iter().map(|(k, _)| k).collect();
        kv.reject_unknown(&known.iter().map(String::as_str).collect::<Vec<_>>())?;
        kv.read_into("width", &mut s.width)?;
        kv.read_into("height", &mut s.height)?;
        kv.read_into("min_objects", &mut s.min_objects)?;
        kv.read_into("max_objects", &mut s.max_objects)?;
        kv.read_into("min_height", &mut s.min_height)?;
        kv.read_into("max_height", &mut s.max_height)?;
        kv.read_into("aspect", &mut s.aspect)?;
        kv.read_into("noise", &mut s.noise)?;
        kv.read_into("clutter", &mut s.clutter)?;
        kv.read_into("seed", &mut s.seed)?;
        s.validate()?;
        Ok(s)
    }
}

fn image_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One rendered image with its ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticImage {
    pub raster: Raster,
    pub boxes: Vec<BBox>,
    /// Objects dropped because no free position was found.
    pub skipped: usize,
}

/// Height drawn log-uniformly from `[min_height, max_height]`, rounded.
pub fn sample_height(spec: &SyntheticSpec, rng: &mut impl Rng) -> f64 {
    let (a, b) = (spec.min_height.ln(), spec.max_height.ln());
    let h = if a == b { a.exp() } else { rng.gen_range(a..b).exp() };
    h.round().clamp(spec.min_height.ceil(), spec.max_height.floor())
}

/// Renders image `index` of the dataset described by `spec`.
pub fn render_synthetic(spec: &SyntheticSpec, index: usize) -> Result<SyntheticImage> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(image_seed(spec.seed, index));
    let (w, h) = (spec.width, spec.height);
    let mut img = Raster::filled(w, h, [0.0; 3]);

    // background: tinted gradient
    let base: [f64; 3] = [rng.gen_range(0.25..0.6), rng.gen_range(0.25..0.6), rng.gen_range(0.25..0.6)];
    let grad: [f64; 2] = [rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)];
    for y in 0..h {
        for x in 0..w {
            let t = grad[0] * (x as f64 / w as f64 - 0.5) + grad[1] * (y as f64 / h as f64 - 0.5);
            for c in 0..3 {
                img.set(x, y, c, (base[c] + t) as f32);
            }
        }
    }
    // distractors: flat and striped rectangles
    for _ in 0..spec.clutter {
        let rw = rng.gen_range(4..=(w / 3).max(5));
        let rh = rng.gen_range(4..=(h / 3).max(5));
        let rx = rng.gen_range(0..=w - rw.min(w));
        let ry = rng.gen_range(0..=h - rh.min(h));
        let col: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let stripe = rng.gen_range(3..12usize);
        let striped = rng.gen_bool(0.5);
        for y in ry..(ry + rh).min(h) {
            for x in rx..(rx + rw).min(w) {
                let k = if striped && ((x + y) / stripe) % 2 == 1 { 0.6 } else { 1.0 };
                for c in 0..3 {
                    img.set(x, y, c, (col[c] * k) as f32);
                }
            }
        }
    }

    // objects: tallest first so large ones rarely fail to fit
    let n = rng.gen_range(spec.min_objects..=spec.max_objects);
    let mut heights: Vec<f64> = (0..n).map(|_| sample_height(spec, &mut rng)).collect();
    heights.sort_by(|a, b| b.total_cmp(a));
    let mut boxes: Vec<BBox> = Vec::new();
    let mut skipped = 0;
    for oh in heights {
        let ow = (oh * spec.aspect).round().max(1.0);
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let x = rng.gen_range(0..=(w - ow as usize)) as f64;
            let y = rng.gen_range(0..=(h - oh as usize)) as f64;
            let cand = BBox { x, y, w: ow, h: oh, score: 0.0 };
            if boxes.iter().all(|b| b.intersection_area(&cand) == 0.0) {
                placed = Some(cand);
                break;
            }
        }
        match placed {
            Some(b) => {
                let tint: [f64; 3] = [rng.gen_range(0.85..1.0), rng.gen_range(0.55..0.7), rng.gen_range(0.35..0.5)];
                draw_ring_object(&mut img, &b, tint);
                boxes.push(b);
            }
            None => skipped += 1,
        }
    }

    if spec.noise > 0.0 {
        for v in img.data_mut() {
            // sum of uniforms approximates a gaussian
            let g: f64 = (0..4).map(|_| rng.gen_range(-1.0..1.0)).sum::<f64>() * (3.0f64 / 4.0).sqrt();
            *v = (*v as f64 + spec.noise * g).clamp(0.0, 1.0) as f32;
        }
    } else {
        for v in img.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    boxes.sort_by(|a, b| a.y.total_cmp(&b.y).then(a.x.total_cmp(&b.x)));
    Ok(SyntheticImage { raster: img, boxes, skipped })
}

/// Elliptical target filling `b`: a dark rim, then concentric rings about
/// 6 px apart, so larger objects carry more internal structure.
fn draw_ring_object(img: &mut Raster, b: &BBox, tint: [f64; 3]) {
    let rings = (b.h / 12.0).round().max(1.0);
    let (cx, cy) = (b.cx(), b.cy());
    let (ax, ay) = (b.w / 2.0, b.h / 2.0);
    for y in b.y as usize..b.bottom() as usize {
        for x in b.x as usize..b.right() as usize {
            // 2x2 supersampled coverage
            let mut acc = [0.0f64; 3];
            let mut inside = 0;
            for (sx, sy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                let u = (x as f64 + sx - cx) / ax;
                let v = (y as f64 + sy - cy) / ay;
                let r = (u * u + v * v).sqrt();
                if r > 1.0 {
                    continue;
                }
                inside += 1;
                let value = if r > 0.85 { 0.08 } else { 0.55 + 0.4 * (std::f64::consts::TAU * rings * r).cos() };
                for c in 0..3 {
                    acc[c] += value * tint[c];
                }
            }
            if inside == 0 {
                continue;
            }
            let cover = inside as f64 / 4.0;
            for c in 0..3 {
                let bg = img.get(x, y, c) as f64;
                img.set(x, y, c, (bg * (1.0 - cover) + acc[c] / 4.0) as f32);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Manifests

pub const MANIFEST_NAME: &str = "manifest.txt";
const ANNOTATION_MARKER: &str = "[annotations]";

/// `key=value` header plus WIDER-format annotations; image paths are relative
/// to the manifest's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub entries: Vec<(String, String)>,
    pub images: Vec<AnnotatedImage>,
}

impl Manifest {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value.to_string(),
            None => self.entries.push((key.to_string(), value.to_string())),
        }
    }

    pub fn mean_rgb(&self) -> Option<[f64; 3]> {
        let v: Vec<f64> = self.get("mean_rgb")?.split_whitespace().filter_map(|t| t.parse().ok()).collect();
        (v.len() == 3).then(|| [v[0], v[1], v[2]])
    }

    pub fn to_text(&self) -> Result<String> {
        let mut s = String::from("# tinyface dataset manifest\n");
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k}={v}");
        }
        let _ = writeln!(s, "{ANNOTATION_MARKER}");
        s.push_str(&write_wider(&self.images)?);
        Ok(s)
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut offset = None;
        let mut pos = 0;
        for (i, line) in text.split_inclusive('\n').enumerate() {
            pos += line.len();
            let l = line.trim();
            if l == ANNOTATION_MARKER {
                offset = Some((i + 1, pos));
                break;
            }
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| Error::parse(source, i + 1, format!("expected key=value, got {l:?}")))?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        let (line0, start) = offset.ok_or_else(|| Error::parse(source, text.lines().count(), "missing [annotations] section"))?;
        let images = parse_wider_str(&text[start..], source).map_err(|e| match e {
            Error::Parse { path, line, message } => Error::Parse { path, line: line + line0, message },
            other => other,
        })?;
        Ok(Manifest { entries, images })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()?).map_err(|e| Error::io(path, e))
    }
}

/// A manifest together with the directory its paths are relative to.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    /// Opens `path`, which is either a manifest file or a directory holding one.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = if path.is_dir() { path.join(MANIFEST_NAME) } else { path.to_path_buf() };
        let manifest = Manifest::load(&file)?;
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Dataset { root, manifest })
    }

    pub fn len(&self) -> usize {
        self.manifest.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.images.is_empty()
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.manifest.images[i].path)
    }

    pub fn load_image(&self, i: usize) -> Result<Raster> {
        read_image(self.image_path(i))
    }
}

/// Box annotations from a dataset directory, a manifest file or a plain
/// WIDER-format annotation file.
pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<AnnotatedImage>> {
    let path = path.as_ref();
    if path.is_dir() {
        return Ok(Dataset::open(path)?.manifest.images);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let source = path.display().to_string();
    if text.lines().any(|l| l.trim() == ANNOTATION_MARKER) {
        Ok(Manifest::parse(&text, &source)?.images)
    } else {
        parse_wider_str(&text, &source)
    }
}

/// Renders `n` images into `out` as PPM files and writes the manifest.
pub fn generate_synthetic(spec: &SyntheticSpec, n: usize, out: impl AsRef<Path>) -> Result<Dataset> {
    spec.validate()?;
    let out = out.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let rendered: Vec<(String, SyntheticImage)> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<_> {
            let name = format!("img_{i:05}.ppm");
            let s = render_synthetic(spec, i)?;
            write_ppm(&s.raster, out.join(&name))?;
            Ok((name, s))
        })
        .collect::<Result<_>>()?;
    let mut sum = [0.0f64; 3];
    let mut pixels = 0usize;
    let mut skipped = 0;
    let mut images = Vec::with_capacity(n);
    for (name, s) in &rendered {
        // mean of the stored 8-bit values, which is what readers see
        for px in s.raster.data().chunks_exact(3) {
            for c in 0..3 {
                sum[c] += ((px[c] * 255.0).round() / 255.0) as f64;
            }
        }
        pixels += s.raster.width() * s.raster.height();
        skipped += s.skipped;
        images.push(AnnotatedImage {
            path: name.clone(),
            boxes: s.boxes.iter().map(|b| Annotation { bbox: *b, attrs: Attributes::default() }).collect(),
            ellipses: Vec::new(),
        });
    }
    let mean = sum.map(|v| if pixels > 0 { v / pixels as f64 } else { 0.0 });
    let mut manifest = Manifest { entries: vec![("format".into(), "1".into()), ("kind".into(), "synthetic".into())], images };
    for (k, v) in spec.to_kv() {
        manifest.set(&k, v);
    }
    manifest.set("images", n);
    manifest.set("objects", manifest.images.iter().map(|i| i.boxes.len()).sum::<usize>());
    manifest.set("skipped", skipped);
    manifest.set("mean_rgb", format!("{} {} {}", mean[0], mean[1], mean[2]));
    manifest.save(out.join(MANIFEST_NAME))?;
    Ok(Dataset { root: out.to_path_buf(), manifest })
}

/// Ground-truth ellipses inscribed in each box, for the synthetic renderer.
pub fn inscribed_ellipses(images: &mut [AnnotatedImage]) {
    for img in images {
        img.ellipses = img.boxes.iter().map(|a| crate::geometry::box_to_ellipse(&a.bbox)).collect();
    }
}
