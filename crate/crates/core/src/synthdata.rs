//! Deterministic synthetic shape-detection scenes and their on-disk format.
//!
//! Dataset directory layout:
//!
//! ```text
//! <dir>/annotations.json
//! <dir>/images/000000.ppm
//! <dir>/images/000001.ppm
//! ...
//! ```
//!
//! Images are binary PPM (P6, 8-bit RGB). `annotations.json` holds the category
//! name table and one record per image.

use crate::boxgeom::{iou, BBox};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const CATEGORIES: [&str; 5] = ["square", "circle", "triangle", "cross", "ring"];
pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const IMAGES_DIR: &str = "images";

const SUPERSAMPLE: usize = 4;
const MAX_PLACEMENT_TRIES: usize = 100;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: malformed annotations at line {line}, column {column}: {msg}")]
    Parse { path: PathBuf, line: usize, column: usize, msg: String },
    #[error("{path}: bad image: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error("invalid scene spec: {0}")]
    Spec(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object extent range in pixels.
    pub scale_min: f64,
    pub scale_max: f64,
    /// Uniform per-channel noise amplitude in 8-bit levels.
    pub noise: f64,
    /// Largest allowed IoU between two ground-truth boxes.
    pub max_overlap: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_size: 128,
            min_objects: 1,
            max_objects: 4,
            scale_min: 16.0,
            scale_max: 72.0,
            noise: 12.0,
            max_overlap: 0.3,
            seed: 1,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Spec(m.to_string()));
        if self.image_size == 0 {
            return bad("image_size must be > 0");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("need 1 <= min_objects <= max_objects");
        }
        if !(self.scale_min >= 2.0 && self.scale_min <= self.scale_max && self.scale_max <= self.image_size as f64) {
            return bad("need 2 <= scale_min <= scale_max <= image_size");
        }
        if !(self.noise >= 0.0) || !(0.0..=1.0).contains(&self.max_overlap) {
            return bad("noise must be >= 0 and max_overlap in [0,1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Object {
    pub bbox: BBox,
    pub category_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub file: String,
    pub width: usize,
    pub height: usize,
    pub objects: Vec<Object>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationFile {
    categories: Vec<String>,
    images: Vec<Annotation>,
}

/// 8-bit interleaved RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        RgbImage { width, height, data: rgb.iter().copied().cycle().take(width * height * 3).collect() }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// `[3, H, W]` planar tensor scaled to `[-0.5, 0.5]`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let hw = self.width * self.height;
        let mut out = vec![0.0f32; 3 * hw];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + i] = px[c] as f32 / 255.0 - 0.5;
            }
        }
        Tensor::new(vec![3, self.height, self.width], out).expect("image tensor shape")
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self, String> {
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated header".into());
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P6" {
            return Err(format!("unsupported magic {}", fields[0]));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field '{s}'"));
        let (w, h, maxv) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxv != 255 {
            return Err(format!("unsupported max value {maxv}"));
        }
        pos += 1; // single whitespace byte after maxval
        let need = w * h * 3;
        if bytes.len() < pos + need {
            return Err(format!("truncated pixel data: {} of {need} bytes", bytes.len().saturating_sub(pos)));
        }
        Ok(RgbImage { width: w, height: h, data: bytes[pos..pos + need].to_vec() })
    }
}

/// One generated image with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: RgbImage,
    pub annotation: Annotation,
}

/// Whether local coordinates `(u, v) ∈ [0,1]²` of a box fall inside the shape.
pub fn shape_contains(category: usize, u: f64, v: f64) -> bool {
    if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
        return false;
    }
    let (du, dv) = (u - 0.5, v - 0.5);
    let r2 = du * du + dv * dv;
    match CATEGORIES[category] {
        "square" => true,
        "circle" => r2 <= 0.25,
        "triangle" => du.abs() <= 0.5 * v,
        "cross" => du.abs() <= 1.0 / 6.0 || dv.abs() <= 1.0 / 6.0,
        "ring" => (0.09..=0.25).contains(&r2),
        _ => false,
    }
}

fn coverage(category: usize, bbox: &BBox, px: usize, py: usize) -> f64 {
    let mut hits = 0;
    for sy in 0..SUPERSAMPLE {
        let y = py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
        for sx in 0..SUPERSAMPLE {
            let x = px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
            let u = (x - bbox.x1) / bbox.width();
            let v = (y - bbox.y1) / bbox.height();
            if shape_contains(category, u, v) {
                hits += 1;
            }
        }
    }
    hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
}

/// Alpha-blends a filled shape into `img`.
pub fn draw_shape(img: &mut RgbImage, category: usize, bbox: &BBox, color: [u8; 3]) {
    let x0 = bbox.x1.floor().max(0.0) as usize;
    let y0 = bbox.y1.floor().max(0.0) as usize;
    let x1 = (bbox.x2.ceil() as usize).min(img.width);
    let y1 = (bbox.y2.ceil() as usize).min(img.height);
    for py in y0..y1 {
        for px in x0..x1 {
            let a = coverage(category, bbox, px, py);
            if a == 0.0 {
                continue;
            }
            let i = (py * img.width + px) * 3;
            for c in 0..3 {
                let blended = img.data[i + c] as f64 * (1.0 - a) + color[c] as f64 * a;
                img.data[i + c] = blended.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
}

fn quarter(v: f64) -> f64 {
    (v * 4.0).round() / 4.0
}

fn luminance(c: [u8; 3]) -> f64 {
    (c[0] as f64 + c[1] as f64 + c[2] as f64) / 3.0
}

fn try_scene<R: Rng>(spec: &SceneSpec, rng: &mut R) -> Option<(Vec<Object>, [u8; 3], Vec<[u8; 3]>)> {
    let size = spec.image_size as f64;
    let count = rng.gen_range(spec.min_objects..=spec.max_objects);
    let bg_level: u8 = rng.gen_range(0..=255);
    let bg = [bg_level; 3];
    let mut objects: Vec<Object> = Vec::with_capacity(count);
    let mut colors = Vec::with_capacity(count);
    for _ in 0..count {
        let category = rng.gen_range(0..CATEGORIES.len());
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let s = quarter(rng.gen_range(spec.scale_min..=spec.scale_max));
            let aspect = match CATEGORIES[category] {
                "triangle" | "cross" => rng.gen_range(0.75..1.0 / 0.75),
                _ => 1.0,
            };
            let (w, h) = if aspect >= 1.0 { (quarter(s / aspect), s) } else { (s, quarter(s * aspect)) };
            let x1 = quarter(rng.gen_range(0.0..=(size - w)));
            let y1 = quarter(rng.gen_range(0.0..=(size - h)));
            let Ok(bbox) = BBox::new(x1, y1, x1 + w, y1 + h) else { continue };
            if bbox.inside(size, size) && objects.iter().all(|o| iou(&o.bbox, &bbox) <= spec.max_overlap) {
                placed = Some(bbox);
                break;
            }
        }
        let bbox = placed?;
        let color = loop {
            let c: [u8; 3] = [rng.gen(), rng.gen(), rng.gen()];
            if (luminance(c) - bg_level as f64).abs() >= 60.0 {
                break c;
            }
        };
        objects.push(Object { bbox, category_id: category });
        colors.push(color);
    }
    Some((objects, bg, colors))
}

/// Renders one scene. Placement failure restarts the scene from the same stream.
pub fn generate_scene<R: Rng>(spec: &SceneSpec, rng: &mut R, file: String) -> Result<Scene, DataError> {
    spec.validate()?;
    let (objects, bg, colors) = loop {
        if let Some(s) = try_scene(spec, rng) {
            break s;
        }
    };
    let n = spec.image_size;
    let mut image = RgbImage::filled(n, n, bg);
    for (o, c) in objects.iter().zip(&colors) {
        draw_shape(&mut image, o.category_id, &o.bbox, *c);
    }
    if spec.noise > 0.0 {
        for v in image.data.iter_mut() {
            let noisy = *v as f64 + rng.gen_range(-spec.noise..=spec.noise);
            *v = noisy.round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(Scene { image, annotation: Annotation { file, width: n, height: n, objects } })
}

pub fn image_file_name(index: usize) -> String {
    format!("{IMAGES_DIR}/{index:06}.ppm")
}

/// Per-scene generator: stream `index` of a ChaCha generator keyed by the split seed.
pub fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Generates `count` scenes in parallel; output depends only on `spec`.
pub fn generate_split(spec: &SceneSpec, count: usize) -> Result<Vec<Scene>, DataError> {
    spec.validate()?;
    (0..count)
        .into_par_iter()
        .map(|i| generate_scene(spec, &mut scene_rng(spec.seed, i), image_file_name(i)))
        .collect()
}

pub fn write_dataset(dir: &Path, scenes: &[Scene]) -> Result<(), DataError> {
    let images = dir.join(IMAGES_DIR);
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    for s in scenes {
        let path = dir.join(&s.annotation.file);
        fs::write(&path, s.image.to_ppm()).map_err(io_err(&path))?;
    }
    let file = AnnotationFile {
        categories: CATEGORIES.iter().map(|s| s.to_string()).collect(),
        images: scenes.iter().map(|s| s.annotation.clone()).collect(),
    };
    let path = dir.join(ANNOTATIONS_FILE);
    let json = serde_json::to_string_pretty(&file).expect("annotations serialize");
    fs::write(&path, json + "\n").map_err(io_err(&path))?;
    Ok(())
}

pub fn read_annotations(dir: &Path) -> Result<(Vec<String>, Vec<Annotation>), DataError> {
    let path = dir.join(ANNOTATIONS_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let file: AnnotationFile = serde_json::from_str(&text).map_err(|e| DataError::Parse {
        path: path.clone(),
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    })?;
    for a in &file.images {
        for o in &a.objects {
            if o.category_id >= file.categories.len() || !o.bbox.inside(a.width as f64, a.height as f64) {
                return Err(DataError::Parse {
                    path: path.clone(),
                    line: 0,
                    column: 0,
                    msg: format!("{}: object {:?} outside image or unknown category", a.file, o),
                });
            }
        }
    }
    Ok((file.categories, file.images))
}

pub fn read_image(path: &Path) -> Result<RgbImage, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    RgbImage::from_ppm(&bytes).map_err(|msg| DataError::Image { path: path.to_path_buf(), msg })
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Scene>, DataError> {
    let (_, anns) = read_annotations(dir)?;
    anns.into_iter()
        .map(|a| {
            let path = dir.join(&a.file);
            let image = read_image(&path)?;
            if image.width != a.width || image.height != a.height {
                return Err(DataError::Image {
                    path,
                    msg: format!("size {}x{} but annotation says {}x{}", image.width, image.height, a.width, a.height),
                });
            }
            Ok(Scene { image, annotation: a })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SceneSpec {
        SceneSpec::default()
    }

    #[test]
    fn single_object_range() {
        let s = SceneSpec { min_objects: 1, max_objects: 1, ..spec() };
        for i in 0..20 {
            let sc = generate_scene(&s, &mut scene_rng(3, i), image_file_name(i)).unwrap();
            assert_eq!(sc.annotation.objects.len(), 1);
        }
    }

    #[test]
    fn black_square_on_white_has_exact_extent() {
        let mut img = RgbImage::filled(32, 32, [255; 3]);
        let bbox = BBox::new(5.0, 7.0, 19.0, 26.0).unwrap();
        draw_shape(&mut img, 0, &bbox, [0; 3]);
        for y in 0..32 {
            for x in 0..32 {
                let inside = (5..19).contains(&x) && (7..26).contains(&y);
                assert_eq!(img.pixel(x, y), if inside { [0; 3] } else { [255; 3] }, "({x},{y})");
            }
        }
    }

    #[test]
    fn shapes_touch_all_four_sides() {
        for cat in 0..CATEGORIES.len() {
            assert!(shape_contains(cat, 0.5, 0.001) || shape_contains(cat, 0.5, 0.0), "{cat} top");
            assert!(shape_contains(cat, 0.5, 0.999), "{cat} bottom");
            assert!(shape_contains(cat, 0.001, 0.5) || shape_contains(cat, 0.001, 0.999), "{cat} left");
            assert!(shape_contains(cat, 0.999, 0.5) || shape_contains(cat, 0.999, 0.999), "{cat} right");
        }
    }

    #[test]
    fn scenes_respect_invariants() {
        let scenes = generate_split(&spec(), 50).unwrap();
        for s in &scenes {
            let objs = &s.annotation.objects;
            assert!(!objs.is_empty() && objs.len() <= 4);
            for (i, a) in objs.iter().enumerate() {
                assert!(a.bbox.inside(128.0, 128.0));
                for b in &objs[i + 1..] {
                    assert!(iou(&a.bbox, &b.bbox) <= 0.3);
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_split(&spec(), 6).unwrap();
        let b = generate_split(&spec(), 6).unwrap();
        assert_eq!(a, b);
        let other = generate_split(&SceneSpec { seed: 2, ..spec() }, 6).unwrap();
        assert_ne!(a[0].image, other[0].image);
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = generate_split(&spec(), 10).unwrap();
        write_dataset(dir.path(), &scenes).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), scenes);
    }

    #[test]
    fn empty_dataset_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &[]).unwrap();
        assert!(read_dataset(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn truncated_image_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = generate_split(&spec(), 1).unwrap();
        write_dataset(dir.path(), &scenes).unwrap();
        let p = dir.path().join(image_file_name(0));
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(DataError::Image { .. })));
    }

    #[test]
    fn malformed_annotations_report_position() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(ANNOTATIONS_FILE), "{\n  \"categories\": [],\n  \"images\": [ oops ]\n}").unwrap();
        match read_dataset(dir.path()) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn tensor_conversion_is_planar() {
        let img = RgbImage { width: 2, height: 1, data: vec![255, 0, 0, 0, 255, 0] };
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data(), &[0.5, -0.5, -0.5, 0.5, -0.5, -0.5]);
    }
}
