//! Procedural multi-task scenes: a slanted background plane with rectangles
//! and discs painted on top, each carrying its own depth plane.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::bytes::{put_f32s, put_u32, ByteReader};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

const MAGIC: &[u8; 4] = b"MTIS";
const VERSION: u32 = 1;
const LIGHT: [f64; 3] = [0.3, -0.5, 0.8];
const AMBIENT: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    pub num_shapes: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub noise_std: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            num_shapes: 4,
            num_classes: 5,
            seed: 0,
            noise_std: 0.02,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        self.check_geometry()?;
        if self.num_shapes == 0 {
            return Err(Error::Config("num_shapes must be at least 1".into()));
        }
        Ok(())
    }

    /// Everything [`validate`](Self::validate) checks except the shape count.
    fn check_geometry(&self) -> Result<()> {
        for (name, v) in [("height", self.height), ("width", self.width)] {
            if v == 0 || v % 32 != 0 {
                return Err(Error::Config(format!("{name} {v} must be a positive multiple of 32")));
            }
        }
        if !(2..=256).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "num_classes {} must lie in [2, 256]",
                self.num_classes
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise_std {} must be finite and >= 0", self.noise_std)));
        }
        Ok(())
    }

    /// `key=value` lines, one per field.
    pub fn to_meta(&self) -> String {
        format!(
            "height={}\nwidth={}\nnum_shapes={}\nnum_classes={}\nseed={}\nnoise_std={}\n",
            self.height, self.width, self.num_shapes, self.num_classes, self.seed, self.noise_std
        )
    }

    pub fn from_meta(text: &str) -> Result<Self> {
        let mut cfg = GenConfig::default();
        let mut seen = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("meta.txt line {}: expected key=value", i + 1)))?;
            let bad = |e: &dyn std::fmt::Display| Error::Config(format!("meta.txt line {}: {k}: {e}", i + 1));
            match k {
                "height" => cfg.height = v.parse().map_err(|e| bad(&e))?,
                "width" => cfg.width = v.parse().map_err(|e| bad(&e))?,
                "num_shapes" => cfg.num_shapes = v.parse().map_err(|e| bad(&e))?,
                "num_classes" => cfg.num_classes = v.parse().map_err(|e| bad(&e))?,
                "seed" => cfg.seed = v.parse().map_err(|e| bad(&e))?,
                "noise_std" => cfg.noise_std = v.parse().map_err(|e| bad(&e))?,
                _ => return Err(Error::Config(format!("meta.txt line {}: unknown key {k:?}", i + 1))),
            }
            seen.push(k.to_string());
        }
        for key in ["height", "width", "num_shapes", "num_classes", "seed", "noise_std"] {
            if !seen.iter().any(|s| s == key) {
                return Err(Error::Config(format!("meta.txt: missing key {key}")));
            }
        }
        cfg.check_geometry()?;
        Ok(cfg)
    }
}

/// One generated scene. Rasters are row-major `[h, w]`; image and normals
/// are channel-major `[3, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub image: Vec<f32>,
    pub seg: Vec<u8>,
    pub depth: Vec<f32>,
    pub edge: Vec<u8>,
    pub normals: Vec<f32>,
}

/// Depth plane `z = z0 + gx * u + gy * v` over normalized coordinates
/// `u = x / w`, `v = y / h`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Plane {
    pub z0: f64,
    pub gx: f64,
    pub gy: f64,
}

impl Plane {
    pub fn depth(&self, u: f64, v: f64) -> f64 {
        self.z0 + self.gx * u + self.gy * v
    }

    pub fn normal(&self) -> [f64; 3] {
        let n = [-self.gx, -self.gy, 1.0];
        let len = n.iter().map(|c| c * c).sum::<f64>().sqrt();
        n.map(|c| c / len)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Footprint {
    Rect { cx: f64, cy: f64, hw: f64, hh: f64 },
    Disc { cx: f64, cy: f64, r: f64 },
}

impl Footprint {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Footprint::Rect { cx, cy, hw, hh } => (x - cx).abs() <= hw && (y - cy).abs() <= hh,
            Footprint::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub class: u8,
    pub plane: Plane,
    /// `None` for the background, which covers every pixel.
    pub footprint: Option<Footprint>,
}

/// A sample together with the layers it was painted from and the index of
/// the layer visible at each pixel.
#[derive(Clone, Debug)]
pub struct Scene {
    pub sample: SceneSample,
    pub layers: Vec<Layer>,
    pub owner: Vec<usize>,
}

fn albedo(class: u8) -> [f64; 3] {
    if class == 0 {
        return [0.55, 0.55, 0.6];
    }
    let t = f64::from(class) * 0.618_033_988_749_895;
    [0.0, 1.0 / 3.0, 2.0 / 3.0].map(|o| {
        let phase = (t + o).fract();
        0.15 + 0.8 * (0.5 + 0.5 * (std::f64::consts::TAU * phase).cos())
    })
}

/// Deterministic in `(cfg.seed, index)`. Accepts `num_shapes == 0`, which
/// yields the bare background.
pub fn generate_scene(cfg: &GenConfig, index: u64) -> Result<Scene> {
    cfg.check_geometry()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);

    let mut layers = vec![Layer {
        class: 0,
        plane: Plane {
            z0: rng.random_range(2.5..3.0),
            gx: rng.random_range(-0.25..0.25),
            gy: rng.random_range(0.0..0.5),
        },
        footprint: None,
    }];
    let (wf, hf) = (w as f64, h as f64);
    let mut shapes = Vec::with_capacity(cfg.num_shapes);
    for _ in 0..cfg.num_shapes {
        let class = rng.random_range(1..cfg.num_classes) as u8;
        let plane = Plane {
            z0: rng.random_range(0.9..2.0),
            gx: rng.random_range(-0.2..0.2),
            gy: rng.random_range(-0.2..0.2),
        };
        let cx = rng.random_range(0.0..wf);
        let cy = rng.random_range(0.0..hf);
        let footprint = if rng.random_bool(0.5) {
            Footprint::Rect {
                cx,
                cy,
                hw: rng.random_range(wf / 12.0..wf / 4.0),
                hh: rng.random_range(hf / 12.0..hf / 4.0),
            }
        } else {
            Footprint::Disc {
                cx,
                cy,
                r: rng.random_range(wf.min(hf) / 12.0..wf.min(hf) / 5.0),
            }
        };
        shapes.push(Layer {
            class,
            plane,
            footprint: Some(footprint),
        });
    }
    // Far shapes are painted first so nearer ones occlude them.
    shapes.sort_by(|a, b| b.plane.z0.total_cmp(&a.plane.z0));
    layers.extend(shapes);

    let hw = h * w;
    let mut owner = vec![0usize; hw];
    for (li, layer) in layers.iter().enumerate().skip(1) {
        let fp = layer.footprint.expect("shapes have footprints");
        for y in 0..h {
            for x in 0..w {
                if fp.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    owner[y * w + x] = li;
                }
            }
        }
    }

    let light = {
        let len = LIGHT.iter().map(|c| c * c).sum::<f64>().sqrt();
        LIGHT.map(|c| c / len)
    };
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut sample = SceneSample {
        height: h,
        width: w,
        num_classes: cfg.num_classes,
        image: vec![0.0; 3 * hw],
        seg: vec![0; hw],
        depth: vec![0.0; hw],
        edge: vec![0; hw],
        normals: vec![0.0; 3 * hw],
    };
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let layer = &layers[owner[p]];
            let n = layer.plane.normal();
            sample.seg[p] = layer.class;
            sample.depth[p] = layer.plane.depth((x as f64 + 0.5) / wf, (y as f64 + 0.5) / hf) as f32;
            let shade = AMBIENT + (1.0 - AMBIENT) * (n[0] * light[0] + n[1] * light[1] + n[2] * light[2]).max(0.0);
            let a = albedo(layer.class);
            for c in 0..3 {
                sample.normals[c * hw + p] = n[c] as f32;
                let v = a[c] * shade + noise.sample(&mut rng);
                sample.image[c * hw + p] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            sample.edge[p] = u8::from(has_label_change(&sample.seg, h, w, y, x));
        }
    }
    Ok(Scene { sample, layers, owner })
}

pub fn generate_sample(cfg: &GenConfig, index: u64) -> Result<SceneSample> {
    Ok(generate_scene(cfg, index)?.sample)
}

fn has_label_change(seg: &[u8], h: usize, w: usize, y: usize, x: usize) -> bool {
    let here = seg[y * w + x];
    let mut differs = false;
    if y > 0 {
        differs |= seg[(y - 1) * w + x] != here;
    }
    if y + 1 < h {
        differs |= seg[(y + 1) * w + x] != here;
    }
    if x > 0 {
        differs |= seg[y * w + x - 1] != here;
    }
    if x + 1 < w {
        differs |= seg[y * w + x + 1] != here;
    }
    differs
}

impl Scene {
    /// The sample invariants plus per-layer depth and normal consistency:
    /// every visible pixel carries exactly the depth and normal of its layer.
    pub fn check_invariants(&self) -> Result<()> {
        self.sample.check_invariants()?;
        let s = &self.sample;
        let hw = s.height * s.width;
        for p in 0..hw {
            let (y, x) = (p / s.width, p % s.width);
            let plane = self.layers[self.owner[p]].plane;
            let u = (x as f64 + 0.5) / s.width as f64;
            let v = (y as f64 + 0.5) / s.height as f64;
            if s.depth[p] != plane.depth(u, v) as f32 {
                return Err(Error::Invalid(format!("depth at ({y}, {x}) is off its layer's plane")));
            }
            let n = plane.normal();
            if (0..3).any(|c| s.normals[c * hw + p] != n[c] as f32) {
                return Err(Error::Invalid(format!("normal at ({y}, {x}) differs from its layer's plane")));
            }
        }
        Ok(())
    }
}

impl SceneSample {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Checks label ranges, unit normals (within 1e-5), positive depth, the
    /// image range, and that every edge pixel has a 4-neighbour with a
    /// different segmentation label.
    pub fn check_invariants(&self) -> Result<()> {
        let hw = self.pixels();
        if self.image.len() != 3 * hw
            || self.seg.len() != hw
            || self.depth.len() != hw
            || self.edge.len() != hw
            || self.normals.len() != 3 * hw
        {
            return Err(Error::Invalid("raster lengths do not match the sample size".into()));
        }
        if let Some(p) = self.seg.iter().position(|&c| usize::from(c) >= self.num_classes) {
            return Err(Error::Invalid(format!("seg label {} at pixel {p} out of range", self.seg[p])));
        }
        if let Some(p) = self.depth.iter().position(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(Error::Invalid(format!("depth {} at pixel {p} is not positive", self.depth[p])));
        }
        if let Some(v) = self.image.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("image value {v} outside [0, 1]")));
        }
        for p in 0..hw {
            let len = (0..3)
                .map(|c| f64::from(self.normals[c * hw + p]).powi(2))
                .sum::<f64>()
                .sqrt();
            if (len - 1.0).abs() > 1e-5 {
                return Err(Error::Invalid(format!("normal at pixel {p} has length {len}")));
            }
            match self.edge[p] {
                0 => {}
                1 => {
                    if !has_label_change(&self.seg, self.height, self.width, p / self.width, p % self.width) {
                        return Err(Error::Invalid(format!("edge pixel {p} is not on a label boundary")));
                    }
                }
                v => return Err(Error::Invalid(format!("edge value {v} at pixel {p}"))),
            }
        }
        Ok(())
    }

    pub fn image_tensor(&self) -> Tensor {
        to_tensor(&self.image, Shape::new(1, 3, self.height, self.width))
    }

    pub fn depth_tensor(&self) -> Tensor {
        to_tensor(&self.depth, Shape::new(1, 1, self.height, self.width))
    }

    pub fn normals_tensor(&self) -> Tensor {
        to_tensor(&self.normals, Shape::new(1, 3, self.height, self.width))
    }

    pub fn edge_tensor(&self) -> Tensor {
        let data = self.edge.iter().map(|&e| f64::from(e)).collect();
        Tensor::from_vec(Shape::new(1, 1, self.height, self.width), data).expect("length matches")
    }

    pub fn seg_labels(&self) -> Vec<i64> {
        self.seg.iter().map(|&c| i64::from(c)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let hw = self.pixels();
        let mut out = Vec::with_capacity(20 + hw * (12 + 1 + 4 + 1 + 12));
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.height as u32);
        put_u32(&mut out, self.width as u32);
        put_u32(&mut out, self.num_classes as u32);
        put_f32s(&mut out, &self.image);
        out.extend_from_slice(&self.seg);
        put_f32s(&mut out, &self.depth);
        out.extend_from_slice(&self.edge);
        put_f32s(&mut out, &self.normals);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let height = r.u32()? as usize;
        let width = r.u32()? as usize;
        let at = r.offset();
        let num_classes = r.u32()? as usize;
        if !(2..=256).contains(&num_classes) {
            return Err(Error::data_at(at, format!("class count {num_classes} outside [2, 256]")));
        }
        let hw = height
            .checked_mul(width)
            .filter(|v| v.checked_mul(12).is_some())
            .ok_or_else(|| Error::data_at(8, format!("size {height}x{width} overflows")))?;
        let image = r.f32s(3 * hw)?;
        let at = r.offset();
        let seg = r.take(hw)?.to_vec();
        if let Some(p) = seg.iter().position(|&c| usize::from(c) >= num_classes) {
            return Err(Error::data_at(at + p as u64, format!("seg label {} out of range", seg[p])));
        }
        let depth = r.f32s(hw)?;
        let at = r.offset();
        let edge = r.take(hw)?.to_vec();
        if let Some(p) = edge.iter().position(|&e| e > 1) {
            return Err(Error::data_at(at + p as u64, format!("edge value {} is not binary", edge[p])));
        }
        let normals = r.f32s(3 * hw)?;
        if !r.is_empty() {
            return Err(Error::data_at(r.offset(), "trailing bytes after sample payload"));
        }
        Ok(Self {
            height,
            width,
            num_classes,
            image,
            seg,
            depth,
            edge,
            normals,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn to_tensor(v: &[f32], shape: Shape) -> Tensor {
    Tensor::from_vec(shape, v.iter().map(|&x| f64::from(x)).collect()).expect("length matches")
}

pub fn sample_path(dir: impl AsRef<Path>, index: usize) -> PathBuf {
    dir.as_ref().join(format!("sample_{index:06}.mtis"))
}

pub fn write_meta(dir: impl AsRef<Path>, cfg: &GenConfig) -> Result<()> {
    fs::create_dir_all(&dir)?;
    fs::write(dir.as_ref().join("meta.txt"), cfg.to_meta())?;
    Ok(())
}

/// Writes `meta.txt` and `count` samples, calling `progress` after each one.
pub fn write_dataset(
    dir: impl AsRef<Path>,
    cfg: &GenConfig,
    count: usize,
    mut progress: impl FnMut(usize),
) -> Result<()> {
    cfg.validate()?;
    write_meta(&dir, cfg)?;
    for i in 0..count {
        generate_sample(cfg, i as u64)?.write(sample_path(&dir, i))?;
        progress(i + 1);
    }
    Ok(())
}

/// An in-memory dataset loaded from a directory written by [`write_dataset`].
#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: GenConfig,
    pub samples: Vec<SceneSample>,
}

impl Dataset {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        if !dir.is_dir() {
            return Err(Error::Config(format!("data directory {} does not exist", dir.display())));
        }
        let meta = fs::read_to_string(dir.join("meta.txt"))
            .map_err(|e| Error::Config(format!("{}: {e}", dir.join("meta.txt").display())))?;
        let config = GenConfig::from_meta(&meta)?;
        let mut files: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("sample_") && n.ends_with(".mtis"))
            })
            .collect();
        files.sort();
        let mut samples = Vec::with_capacity(files.len());
        for f in &files {
            let s = SceneSample::read(f).map_err(|e| match e {
                Error::Data { offset, message } => Error::Data {
                    offset,
                    message: format!("{}: {message}", f.display()),
                },
                other => other,
            })?;
            if s.height != config.height || s.width != config.width || s.num_classes != config.num_classes {
                return Err(Error::Config(format!(
                    "{}: {}x{} with {} classes does not match meta.txt",
                    f.display(),
                    s.height,
                    s.width,
                    s.num_classes
                )));
            }
            samples.push(s);
        }
        Ok(Self { config, samples })
    }

    pub fn from_config(config: &GenConfig, count: usize) -> Result<Self> {
        let samples = (0..count as u64)
            .map(|i| generate_sample(config, i))
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_index() {
        let cfg = GenConfig::default();
        assert_eq!(generate_sample(&cfg, 3).unwrap(), generate_sample(&cfg, 3).unwrap());
        assert_ne!(generate_sample(&cfg, 3).unwrap(), generate_sample(&cfg, 4).unwrap());
    }

    #[test]
    fn background_only_scene() {
        let cfg = GenConfig {
            num_shapes: 0,
            ..GenConfig::default()
        };
        assert!(cfg.validate().is_err());
        let s = generate_sample(&cfg, 0).unwrap();
        assert!(s.seg.iter().all(|&c| c == 0));
        assert!(s.edge.iter().all(|&e| e == 0));
        let hw = s.pixels();
        for c in 0..3 {
            assert!(s.normals[c * hw..(c + 1) * hw].iter().all(|&v| v == s.normals[c * hw]));
        }
        s.check_invariants().unwrap();
    }

    #[test]
    fn invariants_hold() {
        let cfg = GenConfig::default();
        for i in 0..20 {
            generate_scene(&cfg, i).unwrap().check_invariants().unwrap();
        }
    }

    #[test]
    fn rejects_bad_geometry() {
        for cfg in [
            GenConfig { height: 48, ..GenConfig::default() },
            GenConfig { num_classes: 1, ..GenConfig::default() },
            GenConfig { noise_std: -1.0, ..GenConfig::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn round_trip_and_corruption() {
        let s = generate_sample(&GenConfig::default(), 1).unwrap();
        let bytes = s.to_bytes();
        assert_eq!(bytes.len(), 20 + 64 * 64 * 30);
        assert_eq!(SceneSample::from_bytes(&bytes).unwrap(), s);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        let err = SceneSample::from_bytes(&bad).unwrap_err();
        assert!(matches!(err, Error::Data { offset: 0, .. }));
        assert!(err.to_string().contains("\"MTIS\""));

        let err = SceneSample::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Data { .. }));

        let mut bad = bytes;
        bad[4] = 9;
        assert!(matches!(SceneSample::from_bytes(&bad), Err(Error::Data { offset: 4, .. })));
    }

    #[test]
    fn meta_round_trip() {
        let cfg = GenConfig {
            seed: 77,
            noise_std: 0.125,
            ..GenConfig::default()
        };
        assert_eq!(GenConfig::from_meta(&cfg.to_meta()).unwrap(), cfg);
        assert!(GenConfig::from_meta("height=64\n").is_err());
        assert!(GenConfig::from_meta(&format!("{}colour=red\n", cfg.to_meta())).is_err());
    }

    #[test]
    fn dataset_directory() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig::default();
        let mut ticks = 0;
        write_dataset(dir.path(), &cfg, 3, |_| ticks += 1).unwrap();
        assert_eq!(ticks, 3);
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.samples[2], generate_sample(&cfg, 2).unwrap());
        assert!(Dataset::open(dir.path().join("missing")).is_err());
    }
}
