//! From sample points to imagery: tile records, per-city manifests with
//! train/test splits, the synthetic renderer and the static-map client.

mod fetch;
mod render;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::geo::{sample_points_with, City, SamplePoint, SamplerConfig, WaterMask, DEFAULT_RADIUS_K};
use crate::raster::{Image, Rgb};
use crate::{seed, Error, Result};

pub use fetch::{build_request, HttpResponse, RateLimiter, TileFetcher, Transport, API_KEY_ENV, MAX_ATTEMPTS};
#[cfg(feature = "online")]
pub use fetch::UreqTransport;
pub use render::{render_classes, render_synthetic_tile, CityLayout, PixelClass};

pub const DEFAULT_ZOOM: u32 = 16;
pub const DEFAULT_TILE_PX: u32 = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Satellite,
    Map,
}

impl Domain {
    pub const ALL: [Domain; 2] = [Domain::Satellite, Domain::Map];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Satellite => "satellite",
            Domain::Map => "map",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "satellite" => Ok(Domain::Satellite),
            "map" => Ok(Domain::Map),
            other => Err(Error::Config(format!("unsupported domain {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// The five-color abstraction used for map tiles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleSpec {
    pub road_color: Rgb,
    pub transit_color: Rgb,
    pub greenspace_color: Rgb,
    pub water_color: Rgb,
    pub background_color: Rgb,
}

impl Default for StyleSpec {
    fn default() -> Self {
        StyleSpec {
            road_color: [0, 0, 0],
            transit_color: [255, 165, 0],
            greenspace_color: [0, 128, 0],
            water_color: [0, 0, 255],
            background_color: [255, 255, 255],
        }
    }
}

impl StyleSpec {
    pub fn palette(&self) -> [Rgb; 5] {
        [self.road_color, self.transit_color, self.greenspace_color, self.water_color, self.background_color]
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.palette();
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                if p[i] == p[j] {
                    return Err(Error::Validation(format!("style colors {i} and {j} are identical")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileRecord {
    pub city_name: String,
    /// Position of the point within its city's sample list.
    pub index: usize,
    pub point: SamplePoint,
    pub domain: Domain,
    pub split: Split,
    pub cache_path: PathBuf,
    pub zoom: u32,
    pub size_px: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub cities: Vec<City>,
    pub records: Vec<TileRecord>,
    pub samples_per_city: usize,
    pub split_ratio: f64,
    pub seed: u64,
}

/// Everything `build_manifest_with` needs beyond the city list.
#[derive(Clone, Debug)]
pub struct ManifestOptions {
    pub samples_per_city: usize,
    pub split_ratio: f64,
    pub seed: u64,
    pub radius_k: f64,
    pub zoom: u32,
    pub size_px: u32,
    /// City names or country names to leave out entirely.
    pub blocklist: Vec<String>,
    pub masks: BTreeMap<String, WaterMask>,
    pub sampler: SamplerConfig,
}

impl Default for ManifestOptions {
    fn default() -> Self {
        ManifestOptions {
            samples_per_city: 1000,
            split_ratio: 0.8,
            seed: 0,
            radius_k: DEFAULT_RADIUS_K,
            zoom: DEFAULT_ZOOM,
            size_px: DEFAULT_TILE_PX,
            blocklist: Vec::new(),
            masks: BTreeMap::new(),
            sampler: SamplerConfig::default(),
        }
    }
}

/// Filesystem-safe form of a city name (Unicode letters and digits kept).
pub fn path_component(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

pub fn cache_relative_path(domain: Domain, city: &str, index: usize) -> PathBuf {
    Path::new(domain.as_str()).join(path_component(city)).join(format!("{index}.png"))
}

/// Train count for a split of `n` items at `ratio`.
pub fn train_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64) + 1e-9).floor() as usize
}

pub fn build_manifest(cities: &[City], samples_per_city: usize, split_ratio: f64, seed: u64) -> Result<DatasetManifest> {
    build_manifest_with(cities, &ManifestOptions { samples_per_city, split_ratio, seed, ..Default::default() })
}

pub fn build_manifest_with(cities: &[City], opts: &ManifestOptions) -> Result<DatasetManifest> {
    if opts.samples_per_city < 2 {
        return Err(Error::Validation("samples_per_city must be at least 2".into()));
    }
    if !(opts.split_ratio > 0.0 && opts.split_ratio < 1.0) {
        return Err(Error::Validation(format!("split ratio {} must lie in (0, 1)", opts.split_ratio)));
    }
    let blocked: BTreeSet<&str> = opts.blocklist.iter().map(String::as_str).collect();
    let kept: Vec<City> = cities
        .iter()
        .filter(|c| !blocked.contains(c.name.as_str()) && !blocked.contains(c.country.as_str()))
        .cloned()
        .collect();
    let mut names = BTreeSet::new();
    let mut slugs = BTreeSet::new();
    for c in &kept {
        c.validate()?;
        if !names.insert(c.name.as_str()) {
            return Err(Error::Validation(format!("duplicate city name {:?}", c.name)));
        }
        if !slugs.insert(path_component(&c.name)) {
            return Err(Error::Validation(format!("city name {:?} collides with another in the tile cache", c.name)));
        }
    }
    let empty = WaterMask::empty();
    let n = opts.samples_per_city;
    let n_train = train_count(n, opts.split_ratio);
    let mut records = Vec::with_capacity(kept.len() * n * 2);
    for city in &kept {
        let disc = city.disc(opts.radius_k)?;
        let mask = opts.masks.get(&city.name).unwrap_or(&empty);
        let city_seed = seed::derive(opts.seed, &city.name, 0);
        let points = sample_points_with(&disc, mask, n, city_seed, &city.name, opts.sampler)?;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::rng(opts.seed, &format!("split:{}", city.name), 0));
        let mut split = vec![Split::Test; n];
        for &i in &order[..n_train] {
            split[i] = Split::Train;
        }
        for domain in Domain::ALL {
            for (index, point) in points.iter().enumerate() {
                records.push(TileRecord {
                    city_name: city.name.clone(),
                    index,
                    point: point.clone(),
                    domain,
                    split: split[index],
                    cache_path: cache_relative_path(domain, &city.name, index),
                    zoom: opts.zoom,
                    size_px: opts.size_px,
                });
            }
        }
    }
    Ok(DatasetManifest {
        cities: kept,
        records,
        samples_per_city: n,
        split_ratio: opts.split_ratio,
        seed: opts.seed,
    })
}

impl DatasetManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: DatasetManifest = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        DatasetManifest::from_json(&std::fs::read_to_string(path)?)
    }

    /// Checks record/city consistency, per-city counts and path uniqueness.
    pub fn validate(&self) -> Result<()> {
        let names: BTreeSet<&str> = self.cities.iter().map(|c| c.name.as_str()).collect();
        if names.len() != self.cities.len() {
            return Err(Error::Validation("duplicate city names in manifest".into()));
        }
        let mut paths = BTreeSet::new();
        let mut counts: BTreeMap<(&str, Domain), usize> = BTreeMap::new();
        for r in &self.records {
            if !names.contains(r.city_name.as_str()) {
                return Err(Error::Validation(format!("record for unknown city {:?}", r.city_name)));
            }
            if !paths.insert(&r.cache_path) {
                return Err(Error::Validation(format!("duplicate cache path {}", r.cache_path.display())));
            }
            *counts.entry((r.city_name.as_str(), r.domain)).or_default() += 1;
        }
        for ((city, domain), n) in counts {
            if n != self.samples_per_city {
                return Err(Error::Validation(format!(
                    "{city} has {n} {domain} records, expected {}",
                    self.samples_per_city
                )));
            }
        }
        Ok(())
    }

    /// Records of one domain, in manifest order.
    pub fn domain_records(&self, domain: Domain) -> Vec<&TileRecord> {
        self.records.iter().filter(|r| r.domain == domain).collect()
    }

    pub fn city(&self, name: &str) -> Option<&City> {
        self.cities.iter().find(|c| c.name == name)
    }

    pub fn class_index(&self) -> BTreeMap<&str, usize> {
        self.cities.iter().enumerate().map(|(i, c)| (c.name.as_str(), i)).collect()
    }
}

/// Where tile rasters come from.
pub enum TileSource {
    /// Procedural rendering; needs nothing on disk.
    Synthetic { style: StyleSpec, size_px: Option<u32> },
    /// Read-only cache; a missing file is an error.
    CacheOnly { cache_dir: PathBuf },
    /// Cache first, then the live static-map service.
    Online { cache_dir: PathBuf, fetcher: TileFetcher, style: StyleSpec, api_key: String },
}

impl TileSource {
    pub fn synthetic() -> Self {
        TileSource::Synthetic { style: StyleSpec::default(), size_px: None }
    }

    pub fn load(&self, manifest: &DatasetManifest, record: &TileRecord) -> Result<Image> {
        match self {
            TileSource::Synthetic { style, size_px } => {
                let city = manifest
                    .city(&record.city_name)
                    .ok_or_else(|| Error::Validation(format!("unknown city {}", record.city_name)))?;
                let size = size_px.unwrap_or(record.size_px) as usize;
                Ok(render_synthetic_tile(city, &record.point, record.domain, style, size, manifest.seed))
            }
            TileSource::CacheOnly { cache_dir } => {
                let path = cache_dir.join(&record.cache_path);
                if !path.exists() {
                    return Err(Error::MissingTile(path));
                }
                Image::load_png(&path).map_err(|e| Error::CorruptTile { path, message: e.to_string() })
            }
            TileSource::Online { cache_dir, fetcher, style, api_key } => {
                let url = build_request(&record.point, record.domain, record.zoom, record.size_px, style, api_key)?;
                fetcher.fetch_tile(&url, &cache_dir.join(&record.cache_path))
            }
        }
    }
}

/// Loads the `indices`-th records of `domain` (positions within
/// [`DatasetManifest::domain_records`]) in the given order.
pub fn load_batch(manifest: &DatasetManifest, indices: &[usize], domain: Domain, source: &TileSource) -> Result<Vec<Image>> {
    let records = manifest.domain_records(domain);
    indices
        .iter()
        .map(|&i| {
            let r = records
                .get(i)
                .ok_or_else(|| Error::Validation(format!("index {i} out of range for {} {domain} records", records.len())))?;
            source.load(manifest, r)
        })
        .collect()
}
