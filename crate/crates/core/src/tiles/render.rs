//! Procedural city tiles for offline runs.
//!
//! Every city gets a fixed [`CityLayout`] hashed from its name and the
//! dataset seed: road-grid spacing, orientation and width, patch densities
//! and a set of surface tones. A sample point only perturbs the phase of the
//! grid and the placement of patches, so tiles of one city share statistics
//! and differ from other cities.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::augment::blur;
use crate::geo::{City, SamplePoint};
use crate::raster::{Image, Rgb};
use crate::seed;

use super::{Domain, StyleSpec};

/// Layout parameters are expressed in pixels of a 256-pixel tile and scaled
/// to the requested size, so all sizes cover the same ground area.
const REFERENCE_PX: f64 = 256.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PixelClass {
    Background,
    Greenspace,
    Water,
    Road,
    Transit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CityLayout {
    pub spacing: [f64; 2],
    pub angle: f64,
    /// Angle between the two street families.
    pub cross_angle: f64,
    pub road_width: f64,
    /// Every n-th street of the first family is an arterial of double width.
    pub arterial_every: u32,
    pub green_patches: f64,
    pub water_patches: f64,
    pub transit_lines: f64,
    pub patch_radius: f64,
    /// Satellite tones per class, in [Background, Greenspace, Water, Road, Transit] order.
    pub tones: [[f64; 3]; 5],
    pub texture_scale: f64,
    pub texture_contrast: f64,
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

impl CityLayout {
    pub fn for_city(name: &str, seed: u64) -> Self {
        let mut r = seed::rng(seed, &format!("layout:{name}"), 0);
        let mut u = move || r.gen::<f64>();
        let spacing = [lerp(18.0, 64.0, u()), lerp(18.0, 64.0, u())];
        let angle = u() * PI / 2.0;
        let cross_angle = PI / 2.0 + lerp(-0.5, 0.5, u());
        let road_width = lerp(2.5, 7.0, u());
        let arterial_every = 2 + (u() * 4.0) as u32;
        let green_patches = lerp(0.0, 3.0, u());
        let water_patches = lerp(0.0, 1.5, u());
        let transit_lines = lerp(0.0, 1.2, u());
        let patch_radius = lerp(14.0, 40.0, u());
        let ground = [lerp(0.45, 0.65, u()), lerp(0.4, 0.55, u()), lerp(0.3, 0.45, u())];
        let g = lerp(0.25, 0.5, u());
        let roof = lerp(-0.05, 0.05, u());
        let tones = [
            [ground[0] + roof, ground[1] + roof, ground[2] + roof],
            [lerp(0.1, 0.3, u()), g, lerp(0.05, 0.25, u())],
            [lerp(0.05, 0.2, u()), lerp(0.15, 0.35, u()), lerp(0.3, 0.55, u())],
            [lerp(0.25, 0.6, u()); 3],
            [lerp(0.4, 0.6, u()), lerp(0.3, 0.45, u()), lerp(0.25, 0.4, u())],
        ];
        let texture_scale = lerp(3.0, 16.0, u());
        let texture_contrast = lerp(0.04, 0.2, u());
        CityLayout {
            spacing,
            angle,
            cross_angle,
            road_width,
            arterial_every,
            green_patches,
            water_patches,
            transit_lines,
            patch_radius,
            tones,
            texture_scale,
            texture_contrast,
        }
    }
}

fn point_seed(city: &City, point: &SamplePoint, seed: u64) -> u64 {
    let mut bytes = Vec::with_capacity(16);
    bytes.extend_from_slice(&point.latitude.to_bits().to_le_bytes());
    bytes.extend_from_slice(&point.longitude.to_bits().to_le_bytes());
    seed::splitmix64(seed::derive(seed, &city.name, 0) ^ seed::fnv1a(&bytes))
}

/// Per-tile magnification in [0.7, 1.4], log-uniform.
fn tile_zoom(city: &City, point: &SamplePoint, seed: u64) -> f64 {
    let mut r = seed::substream(point_seed(city, point, seed), 3);
    (r.gen::<f64>() * 2f64.ln() + 0.7f64.ln()).exp()
}

/// Poisson-distributed count by inversion; means here are small.
fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    let limit = (-mean).exp();
    let mut p = 1.0;
    let mut k = 0;
    loop {
        p *= rng.gen::<f64>();
        if p <= limit {
            return k;
        }
        k += 1;
    }
}

struct Polygon {
    vertices: Vec<(f64, f64)>,
    bbox: (f64, f64, f64, f64),
}

impl Polygon {
    fn new(vertices: Vec<(f64, f64)>) -> Self {
        let mut bbox = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for &(x, y) in &vertices {
            bbox = (bbox.0.min(x), bbox.1.min(y), bbox.2.max(x), bbox.3.max(y));
        }
        Polygon { vertices, bbox }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        if x < self.bbox.0 || x > self.bbox.2 || y < self.bbox.1 || y > self.bbox.3 {
            return false;
        }
        let v = &self.vertices;
        let mut inside = false;
        let mut j = v.len() - 1;
        for i in 0..v.len() {
            let (xi, yi) = v[i];
            let (xj, yj) = v[j];
            if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                inside = !inside;
            }
            j = i;
        }
        inside
    }
}

fn blob(rng: &mut ChaCha8Rng, radius: f64) -> Polygon {
    let cx = rng.gen::<f64>() * REFERENCE_PX;
    let cy = rng.gen::<f64>() * REFERENCE_PX;
    let r = radius * (0.6 + 0.8 * rng.gen::<f64>());
    let k = rng.gen_range(5..9);
    let start = rng.gen::<f64>() * 2.0 * PI;
    let vertices = (0..k)
        .map(|i| {
            let a = start + 2.0 * PI * i as f64 / k as f64;
            let rr = r * (0.7 + 0.3 * rng.gen::<f64>());
            (cx + rr * a.cos(), cy + rr * a.sin())
        })
        .collect();
    Polygon::new(vertices)
}

fn corridor(rng: &mut ChaCha8Rng, width: f64) -> Polygon {
    let cx = rng.gen::<f64>() * REFERENCE_PX;
    let cy = rng.gen::<f64>() * REFERENCE_PX;
    let a = rng.gen::<f64>() * PI;
    let (dx, dy) = (a.cos(), a.sin());
    let (nx, ny) = (-dy * width / 2.0, dx * width / 2.0);
    let l = REFERENCE_PX * 1.5;
    Polygon::new(vec![
        (cx - dx * l + nx, cy - dy * l + ny),
        (cx + dx * l + nx, cy + dy * l + ny),
        (cx + dx * l - nx, cy + dy * l - ny),
        (cx - dx * l - nx, cy - dy * l - ny),
    ])
}

/// Distance from `t` to the nearest multiple of `spacing`, plus the index
/// of that multiple.
fn grid_distance(t: f64, spacing: f64) -> (f64, i64) {
    let k = (t / spacing).round();
    ((t - k * spacing).abs(), k as i64)
}

/// Per-pixel semantic classes of a tile, row-major.
pub fn render_classes(city: &City, point: &SamplePoint, size_px: usize, seed: u64) -> Vec<PixelClass> {
    let layout = CityLayout::for_city(&city.name, seed);
    let mut rng = seed::substream(point_seed(city, point, seed), 0);
    let jitter = (rng.gen::<f64>() - 0.5) * 0.12;
    let a1 = layout.angle + jitter;
    let a2 = a1 + layout.cross_angle;
    let phase = [rng.gen::<f64>() * layout.spacing[0], rng.gen::<f64>() * layout.spacing[1]];
    let greens: Vec<Polygon> =
        (0..poisson(&mut rng, layout.green_patches)).map(|_| blob(&mut rng, layout.patch_radius)).collect();
    let waters: Vec<Polygon> =
        (0..poisson(&mut rng, layout.water_patches)).map(|_| blob(&mut rng, layout.patch_radius * 1.4)).collect();
    let transit: Vec<Polygon> = (0..poisson(&mut rng, layout.transit_lines))
        .map(|_| corridor(&mut rng, layout.road_width * 0.8 + 2.0))
        .collect();

    let scale = size_px as f64 / REFERENCE_PX * tile_zoom(city, point, seed);
    let (n1, n2) = ((a1.cos(), a1.sin()), (a2.cos(), a2.sin()));
    let half = layout.road_width / 2.0;
    let mut out = Vec::with_capacity(size_px * size_px);
    for py in 0..size_px {
        for px in 0..size_px {
            let x = (px as f64 + 0.5) / scale;
            let y = (py as f64 + 0.5) / scale;
            let class = if transit.iter().any(|p| p.contains(x, y)) {
                PixelClass::Transit
            } else {
                let (d1, k1) = grid_distance(x * n1.0 + y * n1.1 + phase[0], layout.spacing[0]);
                let (d2, _) = grid_distance(-x * n2.1 + y * n2.0 + phase[1], layout.spacing[1]);
                let w1 = if k1.rem_euclid(layout.arterial_every as i64) == 0 { 2.0 * half } else { half };
                if d1 <= w1 || d2 <= half {
                    PixelClass::Road
                } else if waters.iter().any(|p| p.contains(x, y)) {
                    PixelClass::Water
                } else if greens.iter().any(|p| p.contains(x, y)) {
                    PixelClass::Greenspace
                } else {
                    PixelClass::Background
                }
            };
            out.push(class);
        }
    }
    out
}

fn class_index(c: PixelClass) -> usize {
    match c {
        PixelClass::Background => 0,
        PixelClass::Greenspace => 1,
        PixelClass::Water => 2,
        PixelClass::Road => 3,
        PixelClass::Transit => 4,
    }
}

fn lattice(h: u64, ix: i64, iy: i64) -> f64 {
    let k = seed::splitmix64(h ^ seed::splitmix64((ix as u64).wrapping_mul(0x9E37_79B9) ^ (iy as u64) << 32));
    seed::unit(k) * 2.0 - 1.0
}

/// Smooth value noise in [-1, 1].
fn value_noise(h: u64, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (tx, ty) = (x - fx, y - fy);
    let (sx, sy) = (tx * tx * (3.0 - 2.0 * tx), ty * ty * (3.0 - 2.0 * ty));
    let (ix, iy) = (fx as i64, fy as i64);
    let a = lerp(lattice(h, ix, iy), lattice(h, ix + 1, iy), sx);
    let b = lerp(lattice(h, ix, iy + 1), lattice(h, ix + 1, iy + 1), sx);
    lerp(a, b, sy)
}

/// Scene-wide radiometry of one capture: exposure, contrast, a colour cast
/// and haze, drawn per tile.
struct Acquisition {
    gain: f64,
    contrast: f64,
    saturation: f64,
    /// Optical blur, in reference pixels.
    softness: f64,
    cast: [f64; 3],
    haze: f64,
}

impl Acquisition {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        Acquisition {
            gain: lerp(0.6, 1.4, rng.gen()),
            contrast: lerp(0.6, 1.4, rng.gen()),
            saturation: 1.0,
            softness: lerp(0.0, 3.0, rng.gen()),
            cast: [0; 3].map(|_| lerp(-0.03, 0.03, rng.gen())),
            haze: lerp(0.0, 0.2, rng.gen()),
        }
    }

    fn apply(&self, rgb: [f64; 3]) -> [f64; 3] {
        let luma = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
        let mut i = 0;
        rgb.map(|v| {
            let v = luma + (v - luma) * self.saturation;
            let v = ((v - 0.45) * self.contrast + 0.45) * self.gain + self.cast[i];
            i += 1;
            v * (1.0 - self.haze) + 0.8 * self.haze
        })
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Renders one tile. Map tiles use only the five style colors; satellite
/// tiles use noise-modulated city tones over the same layout.
pub fn render_synthetic_tile(
    city: &City,
    point: &SamplePoint,
    domain: Domain,
    style: &StyleSpec,
    size_px: usize,
    seed: u64,
) -> Image {
    let classes = render_classes(city, point, size_px, seed);
    let mut pixels = Vec::with_capacity(size_px * size_px * 3);
    match domain {
        Domain::Map => {
            let palette: [Rgb; 5] = [
                style.background_color,
                style.greenspace_color,
                style.water_color,
                style.road_color,
                style.transit_color,
            ];
            for c in classes {
                pixels.extend_from_slice(&palette[class_index(c)]);
            }
        }
        Domain::Satellite => {
            let layout = CityLayout::for_city(&city.name, seed);
            let ps = point_seed(city, point, seed);
            let mut grain = seed::substream(ps, 1);
            let look = Acquisition::draw(&mut seed::substream(ps, 2));
            let scale = size_px as f64 / REFERENCE_PX * tile_zoom(city, point, seed);
            for (i, c) in classes.into_iter().enumerate() {
                let x = ((i % size_px) as f64 + 0.5) / scale;
                let y = ((i / size_px) as f64 + 0.5) / scale;
                let n = value_noise(ps, x / layout.texture_scale, y / layout.texture_scale);
                let fine = (grain.gen::<f64>() - 0.5) * 0.05;
                let shade = 1.0 + layout.texture_contrast * n * 2.0;
                let rgb = layout.tones[class_index(c)].map(|t| t * shade + fine);
                pixels.extend(look.apply(rgb).map(to_u8));
            }
            let sigma = look.softness * size_px as f64 / REFERENCE_PX;
            if sigma > 0.05 {
                let img = Image::new(size_px, size_px, pixels).expect("buffer sized from size_px");
                return blur(&img.to_float(), sigma).to_image();
            }
        }
    }
    Image::new(size_px, size_px, pixels).expect("buffer sized from size_px")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn city(name: &str) -> City {
        City { name: name.into(), country: "X".into(), latitude: 10.0, longitude: 20.0, population: 1_000_000 }
    }

    #[test]
    fn map_tiles_are_palette_closed() {
        let style = StyleSpec::default();
        let palette = style.palette();
        for i in 0..5 {
            let p = SamplePoint::at(10.0 + i as f64 * 1e-3, 20.0);
            let img = render_synthetic_tile(&city(&format!("c{i}")), &p, Domain::Map, &style, 96, 3);
            assert!(img.iter_pixels().all(|px| palette.contains(&px)));
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let p = SamplePoint::at(10.01, 20.02);
        for d in Domain::ALL {
            let a = render_synthetic_tile(&city("a"), &p, d, &StyleSpec::default(), 64, 5);
            let b = render_synthetic_tile(&city("a"), &p, d, &StyleSpec::default(), 64, 5);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn points_vary_within_a_city() {
        let a = render_classes(&city("a"), &SamplePoint::at(10.0, 20.0), 64, 1);
        let b = render_classes(&city("a"), &SamplePoint::at(10.001, 20.0), 64, 1);
        assert_ne!(a, b);
    }

    #[test]
    fn poisson_mean() {
        let mut r = seed::substream(1, 0);
        let n = 20_000;
        let total: usize = (0..n).map(|_| poisson(&mut r, 1.5)).sum();
        assert!((total as f64 / n as f64 - 1.5).abs() < 0.05);
    }
}
