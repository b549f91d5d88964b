//! Self-supervised representation learning on satellite and abstract map
//! tiles, scaled to run on a desk: city sampling, tile ingestion,
//! augmentations, momentum-contrast and self-distillation pretraining,
//! frozen linear probes and the experiment harness.

mod error;
pub mod augment;
pub mod bench;
pub mod contrastive;
pub mod dino;
pub mod geo;
pub mod probe;
pub mod raster;
pub mod seed;
pub mod tiles;
pub mod train;

pub use error::{Error, Result};
pub use urbanssl_nn as nn;
