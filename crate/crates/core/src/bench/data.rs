//! Synthetic city lists, rendered tile banks and the holdout-enforcing
//! pretraining loader.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::geo::City;
use crate::raster::{FloatImage, Image};
use crate::tiles::{DatasetManifest, Domain, Split, TileSource};
use crate::{seed, Error, Result};

/// `n` fictional cities with populations above 300,000, spread over the
/// habitable latitudes.
pub fn synthetic_cities(n: usize, seed: u64) -> Vec<City> {
    let mut rng = seed::rng(seed, "synthetic_cities", 0);
    (0..n)
        .map(|i| {
            let log_pop = rng.gen_range((3.0e5f64).ln()..(1.0e7f64).ln());
            City {
                name: format!("Synthetic {i:02}"),
                country: format!("Region {}", i % 5),
                latitude: rng.gen_range(-55.0..65.0),
                longitude: rng.gen_range(-180.0..180.0),
                population: log_pop.exp().round() as u64,
            }
        })
        .collect()
}

/// Every tile of one domain, decoded once and kept in memory.
pub struct TileBank {
    pub domain: Domain,
    pub class_names: Vec<String>,
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
}

impl TileBank {
    pub fn load(manifest: &DatasetManifest, domain: Domain, source: &TileSource) -> Result<Self> {
        let classes = manifest.class_index();
        let records = manifest.domain_records(domain);
        let mut images = Vec::with_capacity(records.len());
        let mut labels = Vec::with_capacity(records.len());
        let mut splits = Vec::with_capacity(records.len());
        for r in records {
            images.push(source.load(manifest, r)?);
            labels.push(classes[r.city_name.as_str()]);
            splits.push(r.split);
        }
        Ok(TileBank {
            domain,
            class_names: manifest.cities.iter().map(|c| c.name.clone()).collect(),
            images,
            labels,
            splits,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn float(&self, i: usize) -> FloatImage {
        self.images[i].to_float()
    }

    /// Indices of `split` records whose class is in `classes`, in bank order.
    pub fn select(&self, split: Split, classes: &BTreeSet<usize>) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split && classes.contains(&self.labels[i])).collect()
    }

    /// Images and labels remapped to `0..classes.len()` in ascending class order.
    pub fn labeled(&self, indices: &[usize], classes: &BTreeSet<usize>) -> (Vec<FloatImage>, Vec<usize>) {
        let remap: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(new, &old)| (old, new)).collect();
        let images = indices.iter().map(|&i| self.float(i)).collect();
        let labels = indices.iter().map(|&i| remap[&self.labels[i]]).collect();
        (images, labels)
    }
}

/// Picks `count` of `n` class indices with a seeded shuffle.
pub fn choose_classes(n: usize, count: usize, selection_seed: u64) -> Result<BTreeSet<usize>> {
    if count == 0 || count > n {
        return Err(Error::Config(format!("cannot pick {count} of {n} cities")));
    }
    let mut all: Vec<usize> = (0..n).collect();
    all.shuffle(&mut seed::rng(selection_seed, "pretrain_cities", 0));
    Ok(all.into_iter().take(count).collect())
}

/// Serves random training-split batches restricted to an allowed class set
/// and counts every tile it hands out.
pub struct PretrainLoader<'a> {
    bank: &'a TileBank,
    allowed: BTreeSet<usize>,
    pool: Vec<usize>,
    rng: ChaCha8Rng,
    served: BTreeMap<usize, usize>,
}

impl<'a> PretrainLoader<'a> {
    pub fn new(bank: &'a TileBank, allowed: BTreeSet<usize>, seed: u64) -> Result<Self> {
        let pool = bank.select(Split::Train, &allowed);
        if pool.is_empty() {
            return Err(Error::Config("no training tiles for the pretraining cities".into()));
        }
        Ok(PretrainLoader { bank, allowed, pool, rng: seed::rng(seed, "pretrain_loader", 0), served: BTreeMap::new() })
    }

    pub fn pool_size(&self) -> usize {
        self.pool.len()
    }

    /// Draws `batch` tiles with replacement.
    pub fn next_batch(&mut self, batch: usize) -> Result<Vec<FloatImage>> {
        let picks: Vec<usize> = (0..batch).map(|_| self.pool[self.rng.gen_range(0..self.pool.len())]).collect();
        let mut out = Vec::with_capacity(batch);
        for i in picks {
            let label = self.bank.labels[i];
            if !self.allowed.contains(&label) || self.bank.splits[i] != Split::Train {
                return Err(Error::Contract(format!("pretraining loader produced tile {i} of held-out class {label}")));
            }
            *self.served.entry(label).or_default() += 1;
            out.push(self.bank.float(i));
        }
        Ok(out)
    }

    /// Tiles served per class.
    pub fn served(&self) -> &BTreeMap<usize, usize> {
        &self.served
    }

    pub fn total_served(&self) -> usize {
        self.served.values().sum()
    }

    /// Tiles served from classes outside `allowed`; zero by construction.
    pub fn holdout_served(&self) -> usize {
        self.served.iter().filter(|(c, _)| !self.allowed.contains(c)).map(|(_, n)| n).sum()
    }
}
