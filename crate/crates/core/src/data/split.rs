use rand::seq::SliceRandom;

use super::{DomainDataset, Sample};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitPlan {
    pub target_domain: usize,
    pub labels_per_class: usize,
    pub seed: u64,
}

/// Leave-one-domain-out partition.
///
/// `unlabeled` holds every source sample, the labeled ones included, with
/// `truth_visible` cleared.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub target_test: Vec<Sample>,
    pub num_classes: usize,
    pub source_domains: Vec<usize>,
}

pub fn split(dataset: &DomainDataset, plan: &SplitPlan) -> Result<Split> {
    if plan.target_domain >= dataset.num_domains {
        return Err(Error::Split(format!(
            "target domain {} but dataset has {} domains",
            plan.target_domain, dataset.num_domains
        )));
    }
    if plan.labels_per_class == 0 {
        return Err(Error::Split("labels_per_class must be at least 1".into()));
    }
    let source_domains: Vec<usize> = (0..dataset.num_domains)
        .filter(|&d| d != plan.target_domain)
        .collect();
    if source_domains.is_empty() {
        return Err(Error::Split("no source domains left".into()));
    }

    let mut rng = rng::stream(plan.seed, &[rng::tag::SPLIT]);
    let mut labeled = Vec::new();
    for &d in &source_domains {
        for c in 0..dataset.num_classes {
            let mut pool: Vec<&Sample> = dataset
                .samples
                .iter()
                .filter(|s| s.domain_id == d && s.class_id == c)
                .collect();
            if pool.len() < plan.labels_per_class {
                return Err(Error::Split(format!(
                    "domain {d} class {c} has {} samples, {} labels requested",
                    pool.len(),
                    plan.labels_per_class
                )));
            }
            pool.shuffle(&mut rng);
            labeled.extend(pool.into_iter().take(plan.labels_per_class).map(|s| Sample {
                truth_visible: true,
                ..s.clone()
            }));
        }
    }

    let mut unlabeled = Vec::new();
    let mut target_test = Vec::new();
    for s in &dataset.samples {
        let hidden = Sample {
            truth_visible: false,
            ..s.clone()
        };
        if s.domain_id == plan.target_domain {
            target_test.push(hidden);
        } else {
            unlabeled.push(hidden);
        }
    }

    Ok(Split {
        labeled,
        unlabeled,
        target_test,
        num_classes: dataset.num_classes,
        source_domains,
    })
}
