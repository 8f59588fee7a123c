//! Multi-domain datasets: synthetic generation, CSV ingestion, the
//! leave-one-domain-out split, feature-space augmentations and batching.
//!
//! Domain and class ids are stored on every sample, including unlabeled
//! ones, but training code only ever sees class ids of labeled samples.
//! Domain ids are read by the generator, the split, the per-domain batch
//! sampler and the metrics.

mod augment;
mod batches;
mod csv_io;
mod split;
mod synthetic;

pub use augment::Augmenter;
pub use batches::{BatchIndices, BatchIterator};
pub use csv_io::{load_csv, write_csv};
pub use split::{split, Split, SplitPlan};
pub use synthetic::{generate_synthetic, SyntheticParams};

use crate::numerics::Array2;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub class_id: usize,
    pub domain_id: usize,
    /// False for samples used without their label.
    pub truth_visible: bool,
}

/// Which input coordinates carry class signal and which carry domain noise.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DimRoles {
    pub signal: Vec<usize>,
    pub noise: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub num_domains: usize,
    pub input_dim: usize,
    /// Known only for generated data.
    pub roles: Option<DimRoles>,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Stacks sample features into a batch matrix.
pub fn feature_matrix<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Array2 {
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = 0;
    for s in samples {
        cols = s.features.len();
        data.extend_from_slice(&s.features);
        rows += 1;
    }
    Array2::from_vec(rows, cols, data).expect("samples share one input dimension")
}
