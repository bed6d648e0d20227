//! Antialiased shape rasterizer and the six procedural physics transforms.
//! Images are `[size, size]` grayscale in `[-1, 1]` with background −1.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::ImageLatent;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const OBJECTS: [&str; 8] = [
    "circle", "square", "triangle", "star", "ring", "cross", "diamond", "gear",
];

/// Supersampling factor per axis.
const AA: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub name: String,
    /// Offset of the shape center from the image center, in pixels.
    pub center: (f64, f64),
    /// Shape radius as a fraction of half the image size.
    pub scale: f64,
    /// Foreground value.
    pub intensity: f64,
}

impl ObjectSpec {
    pub fn new(name: &str) -> Self {
        ObjectSpec {
            name: name.to_string(),
            center: (0.0, 0.0),
            scale: 0.8,
            intensity: 1.0,
        }
    }
}

fn star_polygon() -> Vec<(f64, f64)> {
    (0..10)
        .map(|i| {
            let r = if i % 2 == 0 { 0.95 } else { 0.42 };
            let a = -std::f64::consts::FRAC_PI_2 + i as f64 * std::f64::consts::PI / 5.0;
            (r * a.cos(), r * a.sin())
        })
        .collect()
}

fn in_polygon(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Membership test in shape coordinates (unit radius, y pointing down).
fn shape_fn(name: &str) -> Result<Box<dyn Fn(f64, f64) -> bool>> {
    Ok(match name {
        "circle" => Box::new(|x, y| x * x + y * y <= 0.9 * 0.9),
        "square" => Box::new(|x: f64, y: f64| x.abs().max(y.abs()) <= 0.72),
        "triangle" => {
            let tri = [(0.0, -0.85), (0.85, 0.7), (-0.85, 0.7)];
            Box::new(move |x, y| in_polygon(&tri, x, y))
        }
        "star" => {
            let poly = star_polygon();
            Box::new(move |x, y| in_polygon(&poly, x, y))
        }
        "ring" => Box::new(|x, y| {
            let r2 = x * x + y * y;
            (0.5 * 0.5..=0.92 * 0.92).contains(&r2)
        }),
        "cross" => Box::new(|x: f64, y: f64| {
            let (ax, ay) = (x.abs(), y.abs());
            (ax <= 0.27 && ay <= 0.9) || (ay <= 0.27 && ax <= 0.9)
        }),
        "diamond" => Box::new(|x: f64, y: f64| x.abs() + y.abs() <= 0.95),
        "gear" => Box::new(|x: f64, y: f64| {
            let r = (x * x + y * y).sqrt();
            let tooth = (6.0 * y.atan2(x)).cos() > 0.0;
            r >= 0.22 && (r <= 0.62 || (r <= 0.95 && tooth))
        }),
        other => return Err(Error::UnknownObject(other.to_string())),
    })
}

pub fn rasterize_object(spec: &ObjectSpec, size: usize) -> Result<ImageLatent<f32>> {
    let inside = shape_fn(&spec.name)?;
    let radius = spec.scale * size as f64 / 2.0;
    if !(radius.is_finite() && radius > 0.0) || !spec.intensity.is_finite() {
        return Err(Error::DegenerateObject(spec.name.clone()));
    }
    let cx = size as f64 / 2.0 + spec.center.0;
    let cy = size as f64 / 2.0 + spec.center.1;
    let lo = -1.0;
    let hi = spec.intensity.clamp(-1.0, 1.0);
    let mut data = Vec::with_capacity(size * size);
    let mut any = false;
    for row in 0..size {
        for col in 0..size {
            let mut hits = 0usize;
            for sy in 0..AA {
                for sx in 0..AA {
                    let px = col as f64 + (sx as f64 + 0.5) / AA as f64;
                    let py = row as f64 + (sy as f64 + 0.5) / AA as f64;
                    if inside((px - cx) / radius, (py - cy) / radius) {
                        hits += 1;
                    }
                }
            }
            let cover = hits as f64 / (AA * AA) as f64;
            any |= hits > 0;
            data.push((lo + (hi - lo) * cover) as f32);
        }
    }
    if !any || hi <= lo {
        return Err(Error::DegenerateObject(spec.name.clone()));
    }
    Tensor::new(vec![size, size], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    Melt,
    Burn,
    Expand,
    Dissolve,
    Shatter,
    Deform,
}

impl Transform {
    pub const ALL: [Transform; 6] = [
        Transform::Melt,
        Transform::Burn,
        Transform::Expand,
        Transform::Dissolve,
        Transform::Shatter,
        Transform::Deform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Transform::Melt => "melt",
            Transform::Burn => "burn",
            Transform::Expand => "expand",
            Transform::Dissolve => "dissolve",
            Transform::Shatter => "shatter",
            Transform::Deform => "deform",
        }
    }

    pub fn index(self) -> usize {
        Transform::ALL.iter().position(|&t| t == self).unwrap_or(0)
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Transform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Transform::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::UnknownTransform(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicsTransform {
    pub kind: Transform,
    pub severity: f64,
    pub seed: u64,
}

/// Grayscale plane in coverage units: 0 background, 1 full foreground.
struct Plane {
    n: usize,
    v: Vec<f64>,
}

impl Plane {
    fn from_image(img: &ImageLatent<f32>) -> Result<Self> {
        let &[h, w] = img.shape() else {
            return Err(Error::shape("apply_physics", format!("{:?}", img.shape())));
        };
        if h != w || h == 0 {
            return Err(Error::shape("apply_physics", format!("{h}x{w}")));
        }
        Ok(Plane {
            n: h,
            v: img.data().iter().map(|&x| (x as f64 + 1.0) / 2.0).collect(),
        })
    }

    fn into_image(self) -> Result<ImageLatent<f32>> {
        let data = self
            .v
            .iter()
            .map(|&c| (2.0 * c - 1.0).clamp(-1.0, 1.0) as f32)
            .collect();
        Tensor::new(vec![self.n, self.n], data)
    }

    fn at(&self, r: isize, c: isize) -> f64 {
        let n = self.n as isize;
        if r < 0 || c < 0 || r >= n || c >= n {
            0.0
        } else {
            self.v[(r * n + c) as usize]
        }
    }

    fn bilinear(&self, y: f64, x: f64) -> f64 {
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        let (r, c) = (y0 as isize, x0 as isize);
        self.at(r, c) * (1.0 - fy) * (1.0 - fx)
            + self.at(r, c + 1) * (1.0 - fy) * fx
            + self.at(r + 1, c) * fy * (1.0 - fx)
            + self.at(r + 1, c + 1) * fy * fx
    }

    fn is_boundary(&self, r: usize, c: usize) -> bool {
        let (r, c) = (r as isize, c as isize);
        [(-1, 0), (1, 0), (0, -1), (0, 1)]
            .iter()
            .any(|(dr, dc)| self.at(r + dr, c + dc) < 0.5)
    }
}

pub fn apply_physics(img: &ImageLatent<f32>, t: &PhysicsTransform) -> Result<ImageLatent<f32>> {
    let s = t.severity;
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::Config(format!("severity {s} outside [0, 1]")));
    }
    let mut p = Plane::from_image(img)?;
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    match t.kind {
        Transform::Melt => melt(&mut p, s, &mut rng),
        Transform::Burn => burn(&mut p, s, &mut rng),
        Transform::Expand => {
            for _ in 0..(s * 3.0).ceil() as usize {
                dilate(&mut p);
            }
        }
        Transform::Dissolve => {
            for c in p.v.iter_mut() {
                let drop = rng.random::<f64>() < s;
                if *c > 0.0 && drop {
                    *c = 0.0;
                }
            }
        }
        Transform::Shatter => p = shatter(&p, s, &mut rng),
        Transform::Deform => p = deform(&p, s, &mut rng),
    }
    p.into_image()
}

/// Mass slides down each column; each column gets its own rate so the
/// result drips unevenly.
fn melt(p: &mut Plane, s: f64, rng: &mut ChaCha8Rng) {
    if s == 0.0 {
        return;
    }
    let n = p.n;
    let passes = 2 + (s * 6.0).ceil() as usize;
    for col in 0..n {
        let rate = s * (0.5 + 0.5 * rng.random::<f64>());
        for _ in 0..passes {
            for row in (0..n - 1).rev() {
                let here = row * n + col;
                let below = here + n;
                let moved = (p.v[here] * rate).min(1.0 - p.v[below]).max(0.0);
                p.v[here] -= moved;
                p.v[below] += moved;
            }
        }
    }
}

fn burn(p: &mut Plane, s: f64, rng: &mut ChaCha8Rng) {
    if s == 0.0 {
        return;
    }
    let n = p.n;
    for c in p.v.iter_mut() {
        if *c < 0.5 {
            *c = 0.0;
        }
    }
    let edge: Vec<usize> = (0..n * n)
        .filter(|&i| p.v[i] > 0.0 && p.is_boundary(i / n, i % n))
        .collect();
    for &i in &edge {
        if rng.random::<f64>() < 0.3 + 0.5 * s {
            p.v[i] = 0.0;
        }
    }
    // the surviving outer layer turns to a dark grey char
    let rim: Vec<usize> = (0..n * n)
        .filter(|&i| p.v[i] > 0.0 && p.is_boundary(i / n, i % n))
        .collect();
    for i in rim {
        p.v[i] = 0.45 - 0.25 * s;
    }
}

/// One step of 4-neighbour grey dilation.
fn dilate(p: &mut Plane) {
    let n = p.n as isize;
    let src = Plane {
        n: p.n,
        v: p.v.clone(),
    };
    for r in 0..n {
        for c in 0..n {
            let m = [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)]
                .iter()
                .map(|(dr, dc)| src.at(r + dr, c + dc))
                .fold(0.0, f64::max);
            p.v[(r * n + c) as usize] = m;
        }
    }
}

fn shatter(p: &Plane, s: f64, rng: &mut ChaCha8Rng) -> Plane {
    let n = p.n;
    let fg: Vec<usize> = (0..n * n).filter(|&i| p.v[i] > 0.0).collect();
    let mut out = Plane {
        n,
        v: vec![0.0; n * n],
    };
    if fg.is_empty() {
        return out;
    }
    let k = (2.0 + 4.0 * s).ceil() as usize;
    let seeds: Vec<(f64, f64)> = (0..k)
        .map(|_| {
            let i = fg[rng.random_range(0..fg.len())];
            ((i / n) as f64, (i % n) as f64)
        })
        .collect();
    let (cy, cx) = fg.iter().fold((0.0, 0.0), |(a, b), &i| {
        (a + (i / n) as f64, b + (i % n) as f64)
    });
    let (cy, cx) = (cy / fg.len() as f64, cx / fg.len() as f64);
    let push = 0.8 + 1.2 * s;
    let offsets: Vec<(isize, isize)> = seeds
        .iter()
        .map(|&(sy, sx)| {
            let a = rng.random::<f64>() * std::f64::consts::TAU;
            let (dy, dx) = (sy - cy, sx - cx);
            let len = (dy * dy + dx * dx).sqrt();
            let (uy, ux) = if len > 1e-9 {
                (dy / len, dx / len)
            } else {
                (a.sin(), a.cos())
            };
            (
                (uy * push + 0.3 * a.sin()).round() as isize,
                (ux * push + 0.3 * a.cos()).round() as isize,
            )
        })
        .collect();
    for &i in &fg {
        let (r, c) = ((i / n) as f64, (i % n) as f64);
        let nearest = seeds
            .iter()
            .enumerate()
            .min_by(|a, b| {
                let da = (a.1 .0 - r).powi(2) + (a.1 .1 - c).powi(2);
                let db = (b.1 .0 - r).powi(2) + (b.1 .1 - c).powi(2);
                da.total_cmp(&db)
            })
            .map(|(j, _)| j)
            .unwrap_or(0);
        let (dr, dc) = offsets[nearest];
        let (nr, nc) = ((i / n) as isize + dr, (i % n) as isize + dc);
        if nr >= 0 && nc >= 0 && (nr as usize) < n && (nc as usize) < n {
            let j = nr as usize * n + nc as usize;
            out.v[j] = out.v[j].max(p.v[i]);
        }
    }
    out
}

fn deform(p: &Plane, s: f64, rng: &mut ChaCha8Rng) -> Plane {
    let n = p.n;
    let amp = 3.0 * s;
    let wavelength = n as f64 / 2.0;
    let k = std::f64::consts::TAU / wavelength;
    let (ph1, ph2) = (
        rng.random::<f64>() * std::f64::consts::TAU,
        rng.random::<f64>() * std::f64::consts::TAU,
    );
    let mut out = Plane {
        n,
        v: vec![0.0; n * n],
    };
    for r in 0..n {
        for c in 0..n {
            let y = r as f64 + amp * (k * c as f64 + ph1).sin();
            let x = c as f64 + amp * (k * r as f64 + ph2).sin();
            out.v[r * n + c] = p.bilinear(y, x);
        }
    }
    out
}

/// Pixels with value above zero.
pub fn foreground_count(img: &ImageLatent<f32>) -> usize {
    img.data().iter().filter(|&&x| x > 0.0).count()
}

/// Total foreground coverage in `[0, 1]` units.
pub fn coverage_mass(img: &ImageLatent<f32>) -> f64 {
    img.data().iter().map(|&x| (x as f64 + 1.0) / 2.0).sum()
}

/// 8-bit code for a pixel value.
pub fn quantize_byte(x: f32) -> u8 {
    ((x as f64 + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn dequantize_byte(b: u8) -> f32 {
    (b as f64 / 127.5 - 1.0) as f32
}

/// Rounds every pixel to the value it will have after a PNG round trip.
pub fn quantize(img: &ImageLatent<f32>) -> ImageLatent<f32> {
    let data = img
        .data()
        .iter()
        .map(|&x| dequantize_byte(quantize_byte(x)))
        .collect();
    Tensor::new(img.shape().to_vec(), data).expect("quantized pixels are finite")
}

/// Connected foreground components (4-neighbour, threshold 0).
pub fn components(img: &ImageLatent<f32>) -> usize {
    let n = img.shape()[0];
    let d = img.data();
    let mut seen = vec![false; d.len()];
    let mut count = 0;
    for start in 0..d.len() {
        if seen[start] || d[start] <= 0.0 {
            continue;
        }
        count += 1;
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            let (r, c) = (i / n, i % n);
            let mut visit = |j: usize| {
                if !seen[j] && d[j] > 0.0 {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if r > 0 {
                visit(i - n);
            }
            if r + 1 < n {
                visit(i + n);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < n {
                visit(i + 1);
            }
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;

    fn circle() -> ImageLatent<f32> {
        rasterize_object(&ObjectSpec::new("circle"), 16).unwrap()
    }

    fn tf(kind: Transform, severity: f64, seed: u64) -> PhysicsTransform {
        PhysicsTransform {
            kind,
            severity,
            seed,
        }
    }

    #[test]
    fn every_object_renders() {
        for name in OBJECTS {
            let img = rasterize_object(&ObjectSpec::new(name), 16).unwrap();
            assert!(foreground_count(&img) > 10, "{name}");
            assert!(img.data().iter().all(|&x| (-1.0..=1.0).contains(&x)));
            assert_eq!(img.data()[0], -1.0);
        }
    }

    #[test]
    fn circle_is_mirror_symmetric() {
        let img = circle();
        for r in 0..16 {
            for c in 0..16 {
                let a = img.data()[r * 16 + c];
                let b = img.data()[r * 16 + 15 - c];
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn degenerate_and_unknown_specs() {
        let mut spec = ObjectSpec::new("circle");
        spec.scale = 0.0;
        assert!(matches!(
            rasterize_object(&spec, 16),
            Err(Error::DegenerateObject(_))
        ));
        assert!(matches!(
            rasterize_object(&ObjectSpec::new("hexagon"), 16),
            Err(Error::UnknownObject(_))
        ));
        let mut far = ObjectSpec::new("square");
        far.center = (100.0, 0.0);
        assert!(rasterize_object(&far, 16).is_err());
    }

    #[test]
    fn rendering_is_deterministic() {
        assert_eq!(circle(), circle());
    }

    #[test]
    fn dissolve_extremes() {
        let img = circle();
        assert_eq!(
            apply_physics(&img, &tf(Transform::Dissolve, 0.0, 3)).unwrap(),
            img
        );
        let gone = apply_physics(&img, &tf(Transform::Dissolve, 1.0, 3)).unwrap();
        assert_eq!(foreground_count(&gone), 0);
        assert!(gone.data().iter().all(|&x| x == -1.0));
    }

    #[test]
    fn expand_grows_foreground() {
        let img = circle();
        let big = apply_physics(&img, &tf(Transform::Expand, 0.5, 0)).unwrap();
        // two dilation steps; every input foreground pixel survives
        assert!(foreground_count(&big) > foreground_count(&img));
        for (a, b) in img.data().iter().zip(big.data()) {
            assert!(b >= a);
        }
        assert_eq!(
            apply_physics(&img, &tf(Transform::Expand, 0.0, 0)).unwrap(),
            img
        );
    }

    #[test]
    fn melt_moves_mass_down_and_conserves_it() {
        let img = circle();
        let m = apply_physics(&img, &tf(Transform::Melt, 0.8, 5)).unwrap();
        let before = coverage_mass(&img);
        let after = coverage_mass(&m);
        assert!((after - before).abs() / before < 0.01);
        let centroid = |im: &ImageLatent<f32>| {
            let mut acc = 0.0;
            for (i, &x) in im.data().iter().enumerate() {
                acc += (i / 16) as f64 * (x as f64 + 1.0) / 2.0;
            }
            acc / coverage_mass(im)
        };
        assert!(centroid(&m) > centroid(&img) + 1.0);
    }

    #[test]
    fn shatter_fragments() {
        let mut spec = ObjectSpec::new("square");
        spec.scale = 0.6;
        let img = rasterize_object(&spec, 16).unwrap();
        assert_eq!(components(&img), 1);
        let s = apply_physics(&img, &tf(Transform::Shatter, 1.0, 11)).unwrap();
        assert!(components(&s) >= 2);
    }

    #[test]
    fn burn_and_deform_change_the_image() {
        let img = circle();
        for kind in [Transform::Burn, Transform::Deform] {
            let out = apply_physics(&img, &tf(kind, 0.8, 2)).unwrap();
            assert_ne!(out, img, "{kind}");
            assert!(out.data().iter().all(|&x| (-1.0..=1.0).contains(&x)));
        }
        let burnt = apply_physics(&img, &tf(Transform::Burn, 1.0, 2)).unwrap();
        assert!(foreground_count(&burnt) < foreground_count(&img));
        assert_eq!(
            apply_physics(&img, &tf(Transform::Deform, 0.0, 2)).unwrap(),
            img
        );
    }

    #[test]
    fn transforms_are_deterministic() {
        let img = circle();
        for kind in Transform::ALL {
            let a = apply_physics(&img, &tf(kind, 0.6, 9)).unwrap();
            let b = apply_physics(&img, &tf(kind, 0.6, 9)).unwrap();
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn dissolve_survival_rate() {
        let img = circle();
        let n0 = img.data().iter().filter(|&&x| x > -1.0).count() as f64;
        for s in [0.25, 0.5, 0.75] {
            let mean = (0..200)
                .map(|seed| {
                    let out = apply_physics(&img, &tf(Transform::Dissolve, s, seed)).unwrap();
                    out.data().iter().filter(|&&x| x > -1.0).count() as f64 / n0
                })
                .sum::<f64>()
                / 200.0;
            assert!((mean - (1.0 - s)).abs() < 0.05, "{s}: {mean}");
        }
    }

    #[test]
    fn transform_names_roundtrip() {
        for t in Transform::ALL {
            assert_eq!(t.name().parse::<Transform>().unwrap(), t);
        }
        assert!(matches!(
            "fracture".parse::<Transform>(),
            Err(Error::UnknownTransform(_))
        ));
        assert!(apply_physics(&circle(), &tf(Transform::Melt, 1.5, 0)).is_err());
    }

    #[test]
    fn quantization_is_idempotent() {
        let img = apply_physics(&circle(), &tf(Transform::Burn, 0.4, 1)).unwrap();
        let q = quantize(&img);
        assert_eq!(quantize(&q), q);
        for b in 0..=255u8 {
            assert_eq!(quantize_byte(dequantize_byte(b)), b);
        }
    }
}
