//! Population-scaled sampling discs, water masks and seeded point sampling.

use std::io::Read;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{seed, Error, Result};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;
/// Web-Mercator ground width of one pixel at the equator, zoom 0.
pub const MERCATOR_M_PER_PX: f64 = 156_543.033_92;
/// Latitude limit of the Web-Mercator projection.
pub const MAX_MERCATOR_LAT: f64 = 85.051_13;
/// Default radius constant (meters per person^0.85).
pub const DEFAULT_RADIUS_K: f64 = 0.05;
pub const RADIUS_EXPONENT: f64 = 0.85;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct City {
    pub name: String,
    pub country: String,
    pub latitude: f64,
    pub longitude: f64,
    pub population: u64,
}

impl City {
    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::Validation("city name is empty".into()));
        }
        if !(-90.0..=90.0).contains(&self.latitude) || !(-180.0..=180.0).contains(&self.longitude) {
            return Err(Error::Validation(format!(
                "{}: coordinates ({}, {}) out of range",
                self.name, self.latitude, self.longitude
            )));
        }
        if self.population == 0 {
            return Err(Error::Validation(format!("{}: population must be positive", self.name)));
        }
        Ok(())
    }

    pub fn center(&self) -> LatLon {
        LatLon { latitude: self.latitude, longitude: self.longitude }
    }

    pub fn disc(&self, k: f64) -> Result<SamplingDisc> {
        SamplingDisc::new(self.center(), compute_radius(self.population, k)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub latitude: f64,
    pub longitude: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingDisc {
    pub center: LatLon,
    pub radius_m: f64,
}

impl SamplingDisc {
    pub fn new(center: LatLon, radius_m: f64) -> Result<Self> {
        if !(radius_m.is_finite() && radius_m > 0.0) {
            return Err(Error::Validation(format!("disc radius {radius_m} must be positive and finite")));
        }
        Ok(SamplingDisc { center, radius_m })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePoint {
    pub latitude: f64,
    pub longitude: f64,
    pub city_name: String,
}

impl SamplePoint {
    pub fn at(latitude: f64, longitude: f64) -> Self {
        SamplePoint { latitude, longitude, city_name: String::new() }
    }

    pub fn lat_lon(&self) -> LatLon {
        LatLon { latitude: self.latitude, longitude: self.longitude }
    }
}

/// Closed polygon rings in `(latitude, longitude)`; closure is implicit.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WaterMask {
    polygons: Vec<Vec<(f64, f64)>>,
}

impl WaterMask {
    pub fn new(polygons: Vec<Vec<(f64, f64)>>) -> Result<Self> {
        for (i, ring) in polygons.iter().enumerate() {
            if ring.len() < 3 {
                return Err(Error::Validation(format!(
                    "water polygon {i} has {} vertices; at least 3 required",
                    ring.len()
                )));
            }
        }
        Ok(WaterMask { polygons })
    }

    pub fn empty() -> Self {
        WaterMask::default()
    }

    pub fn polygons(&self) -> &[Vec<(f64, f64)>] {
        &self.polygons
    }

    /// Parses one polygon per line as comma-separated `lat lon` pairs.
    /// Blank lines and lines starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut polygons = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let ring = line
                .split(',')
                .map(|pair| {
                    let mut it = pair.split_whitespace().map(str::parse::<f64>);
                    match (it.next(), it.next(), it.next()) {
                        (Some(Ok(lat)), Some(Ok(lon)), None) => Ok((lat, lon)),
                        _ => Err(Error::Validation(format!(
                            "line {}: expected `lat lon`, got {pair:?}",
                            lineno + 1
                        ))),
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            polygons.push(ring);
        }
        WaterMask::new(polygons)
    }

    pub fn load(path: &Path) -> Result<Self> {
        WaterMask::parse(&std::fs::read_to_string(path)?)
    }
}

/// `k · population^0.85`, in meters.
pub fn compute_radius(population: u64, k: f64) -> Result<f64> {
    if population == 0 {
        return Err(Error::Domain("population must be at least 1".into()));
    }
    if !(k.is_finite() && k > 0.0) {
        return Err(Error::Domain(format!("radius constant k = {k} must be positive")));
    }
    Ok(k * (population as f64).powf(RADIUS_EXPONENT))
}

/// Great-circle distance on a spherical Earth.
pub fn haversine_m(a: LatLon, b: LatLon) -> f64 {
    let (p1, p2) = (a.latitude.to_radians(), b.latitude.to_radians());
    let dp = p2 - p1;
    let dl = (b.longitude - a.longitude).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Point reached by travelling `distance_m` from `start` along `bearing_rad`.
pub fn destination(start: LatLon, bearing_rad: f64, distance_m: f64) -> LatLon {
    let d = distance_m / EARTH_RADIUS_M;
    let p1 = start.latitude.to_radians();
    let l1 = start.longitude.to_radians();
    let p2 = (p1.sin() * d.cos() + p1.cos() * d.sin() * bearing_rad.cos()).asin();
    let l2 = l1 + (bearing_rad.sin() * d.sin() * p1.cos()).atan2(d.cos() - p1.sin() * p2.sin());
    let mut lon = l2.to_degrees();
    if lon > 180.0 {
        lon -= 360.0;
    } else if lon < -180.0 {
        lon += 360.0;
    }
    LatLon { latitude: p2.to_degrees(), longitude: lon }
}

/// Closed-disc containment by haversine distance.
pub fn point_in_disc(p: &SamplePoint, d: &SamplingDisc) -> bool {
    haversine_m(p.lat_lon(), d.center) <= d.radius_m
}

/// Even-odd containment in the `(lat, lon)` plane against any ring.
pub fn point_in_mask(p: &SamplePoint, m: &WaterMask) -> bool {
    m.polygons.iter().any(|ring| point_in_ring(p.latitude, p.longitude, ring))
}

fn point_in_ring(lat: f64, lon: f64, ring: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = ring.len() - 1;
    for i in 0..ring.len() {
        let (yi, xi) = ring[i];
        let (yj, xj) = ring[j];
        if (yi > lat) != (yj > lat) {
            let x_cross = xi + (lat - yi) / (yj - yi) * (xj - xi);
            if lon < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Rejection attempts allowed per requested point.
    pub attempts_per_point: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { attempts_per_point: 10_000 }
    }
}

/// Draws `n` area-uniform points inside `disc` and outside `mask`.
pub fn sample_points(disc: &SamplingDisc, mask: &WaterMask, n: usize, seed: u64) -> Result<Vec<SamplePoint>> {
    sample_points_with(disc, mask, n, seed, "", SamplerConfig::default())
}

pub fn sample_points_with(
    disc: &SamplingDisc,
    mask: &WaterMask,
    n: usize,
    seed: u64,
    city_name: &str,
    config: SamplerConfig,
) -> Result<Vec<SamplePoint>> {
    if n == 0 {
        return Err(Error::Validation("sample count must be at least 1".into()));
    }
    let budget = config.attempts_per_point.saturating_mul(n as u64);
    let mut rng = seed::rng(seed, "sample_points", 0);
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0u64;
    while out.len() < n {
        if attempts >= budget {
            return Err(Error::DiscMasked { attempts });
        }
        attempts += 1;
        let u: f64 = rng.gen();
        let bearing = rng.gen::<f64>() * std::f64::consts::TAU;
        let ll = destination(disc.center, bearing, disc.radius_m * u.sqrt());
        let p = SamplePoint { latitude: ll.latitude, longitude: ll.longitude, city_name: city_name.to_string() };
        if point_in_disc(&p, disc) && !point_in_mask(&p, mask) {
            out.push(p);
        }
    }
    Ok(out)
}

/// Ground width in meters of a `tile_px`-wide Web-Mercator tile.
pub fn ground_resolution(latitude: f64, zoom: u32, tile_px: u32) -> Result<f64> {
    if latitude.abs() >= MAX_MERCATOR_LAT || !latitude.is_finite() {
        return Err(Error::Domain(format!("latitude {latitude} is outside the Web-Mercator projection")));
    }
    if zoom > 22 {
        return Err(Error::Domain(format!("zoom {zoom} outside [0, 22]")));
    }
    if tile_px == 0 {
        return Err(Error::Domain("tile size must be positive".into()));
    }
    Ok(tile_px as f64 * MERCATOR_M_PER_PX * latitude.to_radians().cos() / 2f64.powi(zoom as i32))
}

/// Reads `name,country,latitude,longitude,population` rows (with header).
pub fn read_cities<R: Read>(reader: R) -> Result<Vec<City>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut cities = Vec::new();
    for row in rdr.deserialize() {
        let city: City = row?;
        city.validate()?;
        cities.push(city);
    }
    Ok(cities)
}

pub fn load_cities(path: &Path) -> Result<Vec<City>> {
    read_cities(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disc() -> SamplingDisc {
        SamplingDisc::new(LatLon { latitude: 48.85, longitude: 2.35 }, 2_000.0).unwrap()
    }

    #[test]
    fn radius_values() {
        assert_eq!(compute_radius(1, 1.0).unwrap(), 1.0);
        let ratio = compute_radius(2_000, 0.3).unwrap() / compute_radius(1_000, 0.3).unwrap();
        assert!((ratio - 2f64.powf(0.85)).abs() < 1e-12);
        // 0.05 * 300000^0.85, evaluated at 40 significant digits
        let r = compute_radius(300_000, 0.05).unwrap();
        assert!((r - 2262.158_708_307_495).abs() < 1e-9, "got {r}");
        assert!(compute_radius(0, 1.0).is_err());
        assert!(compute_radius(10, 0.0).is_err());
        assert!(compute_radius(10, -1.0).is_err());
    }

    #[test]
    fn disc_containment() {
        let d = disc();
        let c = SamplePoint::at(d.center.latitude, d.center.longitude);
        assert!(point_in_disc(&c, &d));
        let tiny = SamplingDisc::new(d.center, 10.0).unwrap();
        let north = SamplePoint::at(d.center.latitude + 1.0, d.center.longitude);
        assert!(!point_in_disc(&north, &tiny));
        let dist = haversine_m(north.lat_lon(), d.center);
        assert!((dist - 111_195.0).abs() < 1.0, "{dist}");
        let boundary = SamplingDisc::new(d.center, dist).unwrap();
        assert!(point_in_disc(&north, &boundary));
    }

    #[test]
    fn mask_containment() {
        let p = SamplePoint::at(0.5, 0.5);
        assert!(!point_in_mask(&p, &WaterMask::empty()));
        let sq = WaterMask::new(vec![vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0), (1.0, 0.0)]]).unwrap();
        assert!(point_in_mask(&p, &sq));
        assert!(!point_in_mask(&SamplePoint::at(2.0, 2.0), &sq));
        assert!(WaterMask::new(vec![vec![(0.0, 0.0), (1.0, 1.0)]]).is_err());
    }

    #[test]
    fn mask_file_format() {
        let m = WaterMask::parse("# lake\n0 0, 0 1, 1 1, 1 0\n\n2 2,2 3,3 3\n").unwrap();
        assert_eq!(m.polygons().len(), 2);
        assert!(WaterMask::parse("0 0, 1 1").is_err());
        assert!(WaterMask::parse("0 0, 1, 1 1").is_err());
    }

    #[test]
    fn small_samples_are_contained() {
        let d = disc();
        let pts = sample_points(&d, &WaterMask::empty(), 5, 1).unwrap();
        assert_eq!(pts.len(), 5);
        assert!(pts.iter().all(|p| point_in_disc(p, &d)));
    }

    #[test]
    fn fully_masked_disc_errors() {
        let d = disc();
        let m = WaterMask::new(vec![vec![(48.0, 1.0), (48.0, 4.0), (50.0, 4.0), (50.0, 1.0)]]).unwrap();
        let cfg = SamplerConfig { attempts_per_point: 50 };
        let err = sample_points_with(&d, &m, 3, 0, "x", cfg).unwrap_err();
        assert!(matches!(err, Error::DiscMasked { attempts: 150 }));
        assert!(matches!(sample_points(&d, &m, 1, 0), Err(Error::DiscMasked { .. })));
    }

    #[test]
    fn inner_half_radius_holds_a_quarter() {
        let d = disc();
        let pts = sample_points(&d, &WaterMask::empty(), 10_000, 42).unwrap();
        let inner = pts.iter().filter(|p| haversine_m(p.lat_lon(), d.center) <= d.radius_m / 2.0).count();
        let frac = inner as f64 / 10_000.0;
        assert!((frac - 0.25).abs() <= 0.02, "{frac}");
    }

    #[test]
    fn ground_resolution_values() {
        let eq = ground_resolution(0.0, 16, 256).unwrap();
        assert!((eq - 611.496).abs() < 0.01, "{eq}");
        let sixty = ground_resolution(60.0, 16, 256).unwrap();
        assert!((sixty - eq / 2.0).abs() < 1e-6);
        assert_eq!(ground_resolution(0.0, 17, 256).unwrap(), eq / 2.0);
        assert!(ground_resolution(85.06, 16, 256).is_err());
        assert!(ground_resolution(0.0, 23, 256).is_err());
        assert!(ground_resolution(0.0, 16, 0).is_err());
    }

    #[test]
    fn city_csv() {
        let text = "name,country,latitude,longitude,population\nParis,France,48.85,2.35,10000000\nOslo , Norway, 59.9, 10.7, 700000\n";
        let cities = read_cities(text.as_bytes()).unwrap();
        assert_eq!(cities.len(), 2);
        assert_eq!(cities[1].name, "Oslo");
        let bad = "name,country,latitude,longitude,population\nX,Y,91,0,5\n";
        assert!(read_cities(bad.as_bytes()).is_err());
        let bad = "name,country,latitude,longitude,population\nX,Y,1,0,0\n";
        assert!(read_cities(bad.as_bytes()).is_err());
    }
}
