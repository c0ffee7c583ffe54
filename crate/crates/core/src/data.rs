//! Dataset loading, preprocessing and the synthetic partial-defocus scene
//! generator.
//!
//! On disk a dataset is `<root>/image/*.{jpg,png}`, `<root>/gt/<stem>.png`
//! (8-bit, 255 = in focus) and optionally `<root>/depth/<stem>.pfm`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::distill::{normalize, synthetic_teacher, DepthMap};
use crate::error::{Error, Result};
use crate::io::{pfm, write_atomic};
use crate::network::BackboneSpec;
use crate::tensor::{Shape, Tensor};

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

#[derive(Clone, Debug, PartialEq)]
pub struct DefocusSample {
    pub id: String,
    /// `1×3×H×W` RGB in `[0, 1]`.
    pub image: Tensor,
    /// `1×1×H×W`, 1 = in focus.
    pub mask: Tensor,
    pub depth: Option<DepthMap>,
}

impl DefocusSample {
    pub fn size(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s.h, s.w)
    }
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    Ok(rgb_to_tensor(&img))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    Tensor::from_fn(Shape::new(1, 3, h as usize, w as usize), |_, c, y, x| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    })
}

/// Reads an 8-bit mask and thresholds it at 128.
pub fn read_mask(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Tensor::from_fn(
        Shape::new(1, 1, h as usize, w as usize),
        |_, _, y, x| (img.get_pixel(x as u32, y as u32)[0] >= 128) as u8 as f64,
    ))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode_png(img: impl Into<image::DynamicImage>, path: &Path) -> Result<Vec<u8>> {
    let mut bytes = std::io::Cursor::new(Vec::new());
    img.into()
        .write_to(&mut bytes, ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    Ok(bytes.into_inner())
}

/// Writes the first item of a `N×3×H×W` tensor in `[0, 1]` as 8-bit RGB.
pub fn write_rgb_png(path: &Path, t: &Tensor) -> Result<()> {
    let s = t.shape();
    if s.c != 3 {
        return Err(Error::Shape(format!("RGB PNG needs 3 channels, got {s}")));
    }
    let img = RgbImage::from_fn(s.w as u32, s.h as u32, |x, y| {
        image::Rgb([0, 1, 2].map(|c| to_u8(t.at(0, c, y as usize, x as usize))))
    });
    write_atomic(path, &encode_png(img, path)?)
}

/// Writes channel 0 of the first item, values in `[0, 1]`, as 8-bit gray.
pub fn write_gray_png(path: &Path, t: &Tensor) -> Result<()> {
    let s = t.shape();
    let img = GrayImage::from_fn(s.w as u32, s.h as u32, |x, y| {
        image::Luma([to_u8(t.at(0, 0, y as usize, x as usize))])
    });
    write_atomic(path, &encode_png(img, path)?)
}

fn stem_of(path: &Path) -> Option<String> {
    path.file_stem().and_then(|s| s.to_str()).map(str::to_string)
}

/// Files in `dir` with one of `extensions`, keyed by stem. A missing
/// directory is empty.
pub fn files_by_stem(dir: &Path, extensions: &[&str]) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !path.is_file() || !ext.is_some_and(|e| extensions.contains(&e.as_str())) {
            continue;
        }
        let Some(stem) = stem_of(&path) else { continue };
        if let Some(prev) = out.insert(stem.clone(), path.clone()) {
            return Err(Error::InvalidArgument(format!(
                "stem `{stem}` appears twice: {} and {}",
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

/// Loads `<root>[/split]` in lexicographic stem order.
pub fn load_dataset(root: &Path, split: Option<&str>) -> Result<Vec<DefocusSample>> {
    let root = match split {
        Some(s) => root.join(s),
        None => root.to_path_buf(),
    };
    let images = files_by_stem(&root.join("image"), &IMAGE_EXTENSIONS)?;
    let depth_dir = root.join("depth");
    let mut samples = Vec::with_capacity(images.len());
    for (stem, image_path) in images {
        let gt = root.join("gt").join(format!("{stem}.png"));
        if !gt.is_file() {
            return Err(Error::MissingGroundTruth { stem, expected: gt });
        }
        let image = read_image(&image_path)?;
        let mask = read_mask(&gt)?;
        let (is, ms) = (image.shape(), mask.shape());
        if (is.h, is.w) != (ms.h, ms.w) {
            return Err(Error::Shape(format!(
                "`{stem}`: image is {}×{} but mask is {}×{}",
                is.h, is.w, ms.h, ms.w
            )));
        }
        let depth_path = depth_dir.join(format!("{stem}.pfm"));
        let depth = if depth_path.is_file() {
            let raw = pfm::read(&depth_path)?.resize_bilinear(is.h, is.w);
            Some(DepthMap::raw(raw).normalize())
        } else {
            None
        };
        samples.push(DefocusSample {
            id: stem,
            image,
            mask,
            depth,
        });
    }
    Ok(samples)
}

/// Writes samples in the dataset layout; depth goes to `depth/` when present.
pub fn write_dataset(root: &Path, samples: &[DefocusSample]) -> Result<()> {
    for s in samples {
        write_rgb_png(&root.join("image").join(format!("{}.png", s.id)), &s.image)?;
        write_gray_png(&root.join("gt").join(format!("{}.png", s.id)), &s.mask)?;
        if let Some(d) = &s.depth {
            pfm::write(&root.join("depth").join(format!("{}.pfm", s.id)), &d.values)?;
        }
    }
    Ok(())
}

/// A sample resized and standardized for the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub id: String,
    /// `1×3×H×W`, standardized with the backbone statistics.
    pub image: Tensor,
    pub mask: Tensor,
    /// Normalized at the prepared resolution.
    pub depth: Option<Tensor>,
}

pub fn standardize(image: &Tensor, backbone: &BackboneSpec) -> Tensor {
    let mut out = image.clone();
    let s = image.shape();
    for n in 0..s.n {
        for c in 0..s.c.min(3) {
            for v in out.plane_mut(n, c) {
                *v = (*v - backbone.mean[c]) / backbone.std[c];
            }
        }
    }
    out
}

/// Bilinear resize of image and depth, nearest resize of the mask, then an
/// optional horizontal flip of all three.
pub fn preprocess(
    sample: &DefocusSample,
    size: (usize, usize),
    flip: bool,
    backbone: &BackboneSpec,
) -> Result<Prepared> {
    let (h, w) = size;
    let s = sample.image.shape();
    if h == 0 || w == 0 || s.h == 0 || s.w == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot resize `{}` from {}×{} to {h}×{w}",
            sample.id, s.h, s.w
        )));
    }
    let flip_if = |t: Tensor| if flip { t.flip_horizontal() } else { t };
    let image = flip_if(standardize(&sample.image.resize_bilinear(h, w), backbone));
    let mask = flip_if(sample.mask.resize_nearest(h, w));
    let depth = sample
        .depth
        .as_ref()
        .map(|d| flip_if(normalize(&d.values.resize_bilinear(h, w))));
    Ok(Prepared {
        id: sample.id.clone(),
        image,
        mask,
        depth,
    })
}

/// [`preprocess`] with a coin-flip horizontal mirror when `augment` is set.
pub fn preprocess_augmented(
    sample: &DefocusSample,
    size: (usize, usize),
    augment: bool,
    rng: &mut impl Rng,
    backbone: &BackboneSpec,
) -> Result<Prepared> {
    let flip = augment && rng.random_bool(0.5);
    preprocess(sample, size, flip, backbone)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Foreground {
    /// Center, semi-axes and rotation (radians), in pixels.
    Ellipse {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        angle: f64,
    },
    /// Vertices `(x, y)` in pixels, in order.
    Polygon { vertices: Vec<(f64, f64)> },
}

impl Foreground {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Foreground::Ellipse { cx, cy, rx, ry, angle } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Foreground::Polygon { vertices } => {
                let mut inside = false;
                let n = vertices.len();
                for i in 0..n {
                    let (xi, yi) = vertices[i];
                    let (xj, yj) = vertices[(i + n - 1) % n];
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                }
                inside
            }
        }
    }

    pub fn area(&self) -> f64 {
        match self {
            Foreground::Ellipse { rx, ry, .. } => PI * rx * ry,
            Foreground::Polygon { vertices } => {
                let n = vertices.len();
                let twice: f64 = (0..n)
                    .map(|i| {
                        let (x0, y0) = vertices[i];
                        let (x1, y1) = vertices[(i + 1) % n];
                        x0 * y1 - x1 * y0
                    })
                    .sum();
                twice.abs() / 2.0
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthParams {
    pub d_fg: f64,
    /// Background depth at the top row.
    pub d_bg_near: f64,
    /// Background depth at the bottom row.
    pub d_bg_far: f64,
}

/// Everything needed to render one synthetic scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// `(H, W)`.
    pub size: (usize, usize),
    pub foreground: Option<Foreground>,
    pub fg_texture_seed: u64,
    pub bg_texture_seed: u64,
    pub sigma_bg: f64,
    pub depth: DepthParams,
    pub seed: u64,
}

impl SceneSpec {
    /// Samples a scene from `seed`: an ellipse or star-shaped polygon in
    /// front of a blurred background. The background depth gap grows with
    /// the blur.
    pub fn random(seed: u64, size: (usize, usize)) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (size.0 as f64, size.1 as f64);
        let cx = rng.random_range(0.35..0.65) * w;
        let cy = rng.random_range(0.35..0.65) * h;
        let foreground = if rng.random_bool(0.5) {
            Foreground::Ellipse {
                cx,
                cy,
                rx: rng.random_range(0.25..0.38) * w,
                ry: rng.random_range(0.25..0.38) * h,
                angle: rng.random_range(0.0..PI),
            }
        } else {
            let n = rng.random_range(5..=8);
            let r = rng.random_range(0.32..0.45) * h.min(w);
            let phase = rng.random_range(0.0..2.0 * PI);
            let vertices = (0..n)
                .map(|i| {
                    let a = phase + 2.0 * PI * (i as f64 + rng.random_range(-0.25..0.25)) / n as f64;
                    let ri = r * rng.random_range(0.6..1.0);
                    (cx + ri * a.cos(), cy + ri * a.sin())
                })
                .collect();
            Foreground::Polygon { vertices }
        };
        let sigma_bg = rng.random_range(1.5..3.0);
        let d_fg = rng.random_range(1.0..2.0);
        let d_bg_near = d_fg + 1.0 + sigma_bg;
        let d_bg_far = d_bg_near + rng.random_range(0.5..1.0);
        Self {
            size,
            foreground: Some(foreground),
            fg_texture_seed: rng.random(),
            bg_texture_seed: rng.random(),
            sigma_bg,
            depth: DepthParams {
                d_fg,
                d_bg_near,
                d_bg_far,
            },
            seed,
        }
    }

    /// `1×1×H×W` mask of pixels whose centers fall inside the foreground.
    /// Shapes extending past the canvas are clipped.
    pub fn rasterize_mask(&self) -> Tensor {
        let (h, w) = self.size;
        Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, y, x| match &self.foreground {
            Some(f) => f.contains(x as f64 + 0.5, y as f64 + 0.5) as u8 as f64,
            None => 0.0,
        })
    }
}

/// Blocky multi-colour noise around a random base colour; the same
/// generator serves foreground and background.
pub fn texture(seed: u64, size: (usize, usize)) -> Tensor {
    let (h, w) = size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.7));
    let cell = rng.random_range(2..=4usize);
    let (ch, cw) = (h.div_ceil(cell), w.div_ceil(cell));
    let coarse = Normal::new(0.0, 0.16).expect("valid std");
    let fine = Normal::new(0.0, 0.04).expect("valid std");
    let cells: Vec<f64> = (0..3 * ch * cw).map(|_| coarse.sample(&mut rng)).collect();
    let mut t = Tensor::zeros(Shape::new(1, 3, h, w));
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let v = base[c] + cells[(c * ch + y / cell) * cw + x / cell] + fine.sample(&mut rng);
                t.set(0, c, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
    t
}

/// Separable Gaussian blur with clamp-to-edge borders. `sigma <= 0` copies.
pub fn gaussian_blur(t: &Tensor, sigma: f64) -> Tensor {
    if sigma <= 0.0 {
        return t.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let s = t.shape();
    let pass = |src: &Tensor, horizontal: bool| {
        let mut out = Tensor::zeros(s);
        for n in 0..s.n {
            for c in 0..s.c {
                let plane = src.plane(n, c);
                let dst = out.plane_mut(n, c);
                for y in 0..s.h {
                    for x in 0..s.w {
                        let mut acc = 0.0;
                        for (k, &kv) in kernel.iter().enumerate() {
                            let o = k as isize - radius;
                            let (sy, sx) = if horizontal {
                                (y, (x as isize + o).clamp(0, s.w as isize - 1) as usize)
                            } else {
                                ((y as isize + o).clamp(0, s.h as isize - 1) as usize, x)
                            };
                            acc += kv * plane[sy * s.w + sx];
                        }
                        dst[y * s.w + x] = acc;
                    }
                }
            }
        }
        out
    };
    pass(&pass(t, true), false)
}

/// Renders a scene: sharp textured foreground over a blurred textured
/// background, with its analytic depth attached (normalized).
pub fn generate_scene(spec: &SceneSpec) -> DefocusSample {
    let bg = gaussian_blur(&texture(spec.bg_texture_seed, spec.size), spec.sigma_bg);
    let fg = texture(spec.fg_texture_seed, spec.size);
    let mask = spec.rasterize_mask();
    let (h, w) = spec.size;
    let image = Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        if mask.at(0, 0, y, x) == 1.0 {
            fg.at(0, c, y, x)
        } else {
            bg.at(0, c, y, x)
        }
    });
    DefocusSample {
        id: format!("scene_{:06}", spec.seed),
        image,
        mask,
        depth: Some(synthetic_teacher(spec).normalize()),
    }
}

/// `n` scenes whose seeds are derived from `seed`; ids `scene_0000..`.
pub fn synthetic_dataset(n: usize, size: (usize, usize), seed: u64) -> Vec<DefocusSample> {
    (0..n)
        .map(|i| {
            let scene_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64);
            let mut s = generate_scene(&SceneSpec::random(scene_seed, size));
            s.id = format!("scene_{i:04}");
            s
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn laplacian_energy(t: &Tensor, mask: &Tensor, want: f64) -> f64 {
        let s = t.shape();
        let (mut e, mut n) = (0.0, 0);
        for y in 1..s.h - 1 {
            for x in 1..s.w - 1 {
                let interior = [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)]
                    .iter()
                    .all(|&(dy, dx)| mask.at(0, 0, (y as i64 + dy) as usize, (x as i64 + dx) as usize) == want);
                if !interior {
                    continue;
                }
                for c in 0..3 {
                    let l = 4.0 * t.at(0, c, y, x)
                        - t.at(0, c, y - 1, x)
                        - t.at(0, c, y + 1, x)
                        - t.at(0, c, y, x - 1)
                        - t.at(0, c, y, x + 1);
                    e += l * l;
                }
                n += 1;
            }
        }
        e / n as f64
    }

    fn gradient_magnitude(t: &Tensor, mask: &Tensor, want: f64) -> f64 {
        let s = t.shape();
        let (mut g, mut n) = (0.0, 0);
        for y in 0..s.h - 1 {
            for x in 0..s.w - 1 {
                if mask.at(0, 0, y, x) != want {
                    continue;
                }
                for c in 0..3 {
                    let gx = t.at(0, c, y, x + 1) - t.at(0, c, y, x);
                    let gy = t.at(0, c, y + 1, x) - t.at(0, c, y, x);
                    g += (gx * gx + gy * gy).sqrt();
                }
                n += 1;
            }
        }
        g / n as f64
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SceneSpec::random(17, (40, 48));
        assert_eq!(generate_scene(&spec), generate_scene(&spec));
        assert_eq!(synthetic_dataset(3, (32, 32), 5), synthetic_dataset(3, (32, 32), 5));
        assert_ne!(synthetic_dataset(1, (32, 32), 5), synthetic_dataset(1, (32, 32), 6));
    }

    #[test]
    fn sample_invariants() {
        for s in synthetic_dataset(6, (32, 40), 1) {
            assert_eq!(s.image.shape(), Shape::new(1, 3, 32, 40));
            assert_eq!(s.mask.shape(), Shape::new(1, 1, 32, 40));
            assert!(s.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
            assert!(s.image.min() >= 0.0 && s.image.max() <= 1.0);
            assert!(s.depth.unwrap().normalized);
        }
    }

    #[test]
    fn in_focus_region_is_sharper() {
        for seed in 0..20 {
            let mut spec = SceneSpec::random(seed, (64, 64));
            spec.sigma_bg = 1.0 + seed as f64 * 0.1;
            let s = generate_scene(&spec);
            let inside = gradient_magnitude(&s.image, &s.mask, 1.0);
            let outside = gradient_magnitude(&s.image, &s.mask, 0.0);
            assert!(inside > outside, "seed {seed}: {inside} vs {outside}");
        }
    }

    #[test]
    fn vanishing_blur_equalizes_high_frequency_energy() {
        let ratio_at = |sigma: f64| {
            let ratios: Vec<f64> = (0..40)
                .map(|seed| {
                    let mut spec = SceneSpec::random(seed, (64, 64));
                    spec.sigma_bg = sigma;
                    let s = generate_scene(&spec);
                    laplacian_energy(&s.image, &s.mask, 0.0) / laplacian_energy(&s.image, &s.mask, 1.0)
                })
                .collect();
            ratios.iter().sum::<f64>() / ratios.len() as f64
        };
        let sharp = ratio_at(0.0);
        assert!((sharp - 1.0).abs() < 0.15, "{sharp}");
        assert!(ratio_at(2.0) < 0.1);
    }

    #[test]
    fn ellipse_area_matches_raster() {
        let spec = SceneSpec {
            size: (96, 96),
            foreground: Some(Foreground::Ellipse {
                cx: 47.3,
                cy: 50.1,
                rx: 25.0,
                ry: 17.5,
                angle: 0.7,
            }),
            ..SceneSpec::random(0, (96, 96))
        };
        let count = spec.rasterize_mask().sum();
        let area = spec.foreground.as_ref().unwrap().area();
        assert!((count - area).abs() / area < 0.02, "{count} vs {area}");
    }

    #[test]
    fn polygon_area_matches_raster() {
        for seed in 0..50 {
            let spec = SceneSpec::random(seed, (96, 96));
            let f = spec.foreground.as_ref().unwrap();
            if !matches!(f, Foreground::Polygon { .. }) {
                continue;
            }
            let count = spec.rasterize_mask().sum();
            assert!((count - f.area()).abs() / f.area() < 0.05, "seed {seed}");
        }
    }

    #[test]
    fn foreground_is_clipped_to_canvas() {
        let spec = SceneSpec {
            foreground: Some(Foreground::Ellipse {
                cx: 0.0,
                cy: 0.0,
                rx: 10.0,
                ry: 10.0,
                angle: 0.0,
            }),
            ..SceneSpec::random(0, (20, 20))
        };
        let s = generate_scene(&spec);
        let count = s.mask.sum();
        assert!(count > 0.0 && (count - PI * 100.0 / 4.0).abs() < 8.0);
    }

    #[test]
    fn blur_preserves_constant_and_mass() {
        let t = Tensor::full(Shape::new(1, 1, 9, 9), 0.3);
        assert!(gaussian_blur(&t, 2.0).max_abs_diff(&t) < 1e-12);
        assert_eq!(gaussian_blur(&t, 0.0), t);
    }

    #[test]
    fn preprocess_contracts() {
        let spec = SceneSpec::random(2, (48, 64));
        let s = generate_scene(&spec);
        let bb = BackboneSpec::tiny();
        let p = preprocess(&s, (32, 32), false, &bb).unwrap();
        assert_eq!(p.image.shape(), Shape::new(1, 3, 32, 32));
        assert!(p.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let d = p.depth.as_ref().unwrap();
        assert!(d.mean().abs() < 1e-9);
        let flipped = preprocess(&s, (32, 32), true, &bb).unwrap();
        assert_eq!(flipped.image.flip_horizontal(), p.image);
        assert_eq!(flipped.mask.flip_horizontal(), p.mask);
        assert!(preprocess(&s, (0, 32), false, &bb).is_err());
    }

    #[test]
    fn resize_to_320() {
        let s = DefocusSample {
            id: "big".into(),
            image: Tensor::full(Shape::new(1, 3, 48, 64), 0.5),
            mask: Tensor::full(Shape::new(1, 1, 48, 64), 1.0),
            depth: None,
        };
        let p = preprocess(&s, (320, 320), false, &BackboneSpec::tiny()).unwrap();
        assert_eq!(p.image.shape(), Shape::new(1, 3, 320, 320));
        assert_eq!(p.mask.shape(), Shape::new(1, 1, 320, 320));
    }

    #[test]
    fn empty_and_missing_directories() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset(dir.path(), None).unwrap().is_empty());
        std::fs::create_dir_all(dir.path().join("image")).unwrap();
        write_rgb_png(&dir.path().join("image/a.png"), &Tensor::zeros(Shape::new(1, 3, 2, 2))).unwrap();
        match load_dataset(dir.path(), None) {
            Err(Error::MissingGroundTruth { stem, .. }) => assert_eq!(stem, "a"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mask_threshold_at_128() {
        let dir = tempfile::tempdir().unwrap();
        let img = GrayImage::from_raw(4, 1, vec![0, 127, 128, 200]).unwrap();
        let path = dir.path().join("m.png");
        img.save(&path).unwrap();
        assert_eq!(read_mask(&path).unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);
        let img = GrayImage::from_raw(3, 1, vec![0, 200, 255]).unwrap();
        img.save(&path).unwrap();
        assert_eq!(read_mask(&path).unwrap().data(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn dataset_round_trip_in_sorted_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut samples = synthetic_dataset(3, (16, 16), 9);
        samples.reverse();
        write_dataset(dir.path(), &samples).unwrap();
        let loaded = load_dataset(dir.path(), None).unwrap();
        let ids: Vec<&str> = loaded.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["scene_0000", "scene_0001", "scene_0002"]);
        for l in &loaded {
            let orig = samples.iter().find(|s| s.id == l.id).unwrap();
            assert_eq!(l.mask, orig.mask);
            assert!(l.image.max_abs_diff(&orig.image) <= 0.5 / 255.0 + 1e-12);
            let d = l.depth.as_ref().unwrap();
            assert!(d.values.max_abs_diff(&orig.depth.as_ref().unwrap().values) < 1e-5);
        }
    }
}
