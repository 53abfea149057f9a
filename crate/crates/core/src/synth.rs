//! Contextual hypergraph stochastic block model with two balanced classes.

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypergraph::Hypergraph;
use crate::linalg::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_nodes: usize,
    pub num_hyperedges: usize,
    pub cardinality: usize,
    /// Class-0 members per hyperedge.
    pub beta: usize,
    pub feature_dim: usize,
    pub mean_separation: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_nodes: 5000,
            num_hyperedges: 1000,
            cardinality: 15,
            beta: 1,
            feature_dim: 10,
            mean_separation: 1.0,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Heterophily level `min(β, cardinality − β)`.
    pub fn alpha(&self) -> usize {
        self.beta.min(self.cardinality.saturating_sub(self.beta))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.num_nodes == 0 || self.num_nodes % 2 != 0 {
            return fail(format!("num_nodes must be even and positive, got {}", self.num_nodes));
        }
        if self.num_hyperedges == 0 {
            return fail("num_hyperedges must be positive".into());
        }
        if self.cardinality == 0 {
            return fail("cardinality must be positive".into());
        }
        if self.beta > self.cardinality {
            return fail(format!(
                "beta = {} exceeds cardinality {}",
                self.beta, self.cardinality
            ));
        }
        let half = self.num_nodes / 2;
        if self.beta > half || self.cardinality - self.beta > half {
            return fail(format!(
                "a hyperedge needs {} class-0 and {} class-1 nodes but each class has {half}",
                self.beta,
                self.cardinality - self.beta
            ));
        }
        if self.feature_dim == 0 {
            return fail("feature_dim must be positive".into());
        }
        if !(self.mean_separation > 0.0) || !self.mean_separation.is_finite() {
            return fail(format!("mean_separation must be positive, got {}", self.mean_separation));
        }
        if !(self.noise_std > 0.0) || !self.noise_std.is_finite() {
            return fail(format!("noise_std must be positive, got {}", self.noise_std));
        }
        Ok(())
    }
}

/// Nodes `0..n/2` are class 0 and the rest class 1. Hyperedges are drawn
/// first, then features, all from one generator seeded by `cfg.seed`.
pub fn generate(cfg: &SynthConfig) -> Result<Hypergraph> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let half = cfg.num_nodes / 2;
    let mut hyperedges = Vec::with_capacity(cfg.num_hyperedges);
    for _ in 0..cfg.num_hyperedges {
        let mut members: Vec<usize> = index::sample(&mut rng, half, cfg.beta).into_vec();
        members.extend(
            index::sample(&mut rng, half, cfg.cardinality - cfg.beta)
                .into_iter()
                .map(|i| half + i),
        );
        hyperedges.push(members);
    }
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let shift = cfg.mean_separation / 2.0;
    let mut features = Mat::zeros(cfg.num_nodes, cfg.feature_dim);
    let labels: Vec<usize> = (0..cfg.num_nodes).map(|v| usize::from(v >= half)).collect();
    for (v, &label) in labels.iter().enumerate() {
        let row = features.row_mut(v);
        for x in row.iter_mut() {
            *x = noise.sample(&mut rng);
        }
        row[0] += if label == 0 { shift } else { -shift };
    }
    Hypergraph::new(cfg.num_nodes, hyperedges)?
        .with_features(features)?
        .with_labels(labels)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded random partition. Train and validation sizes are `⌊n·fraction⌋`; the
/// test set takes the rest.
pub fn split(n: usize, fractions: (f64, f64, f64), seed: u64) -> Result<Split> {
    let (tr, va, te) = fractions;
    if !(tr > 0.0 && va > 0.0 && te > 0.0) || ((tr + va + te) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must be positive and sum to 1, got ({tr}, {va}, {te})"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64) * tr + 1e-9).floor() as usize;
    let n_val = (((n as f64) * va + 1e-9).floor() as usize).min(n - n_train);
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    Ok(Split {
        train: order,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SynthConfig {
        SynthConfig {
            num_nodes: 6,
            num_hyperedges: 4,
            cardinality: 3,
            beta: 1,
            feature_dim: 2,
            seed: 5,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn tiny_edges_have_exact_composition() {
        let h = generate(&tiny()).unwrap();
        let labels = h.labels().unwrap();
        assert_eq!(labels, &[0, 0, 0, 1, 1, 1]);
        for e in h.hyperedges() {
            assert_eq!(e.len(), 3);
            assert_eq!(e.iter().filter(|&&v| labels[v] == 0).count(), 1);
        }
    }

    #[test]
    fn alpha_is_min_of_sides() {
        let cfg = |beta| SynthConfig {
            beta,
            ..SynthConfig::default()
        };
        assert_eq!(cfg(1).alpha(), 1);
        assert_eq!(cfg(7).alpha(), 7);
        assert_eq!(cfg(8).alpha(), 7);
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            SynthConfig { num_nodes: 7, ..tiny() },
            SynthConfig { beta: 4, ..tiny() },
            SynthConfig { cardinality: 5, beta: 0, ..tiny() },
            SynthConfig { noise_std: 0.0, ..tiny() },
        ];
        for cfg in bad {
            assert!(matches!(generate(&cfg), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn generation_is_reproducible() {
        assert_eq!(generate(&tiny()).unwrap().to_json(), generate(&tiny()).unwrap().to_json());
        let other = SynthConfig { seed: 6, ..tiny() };
        assert_ne!(generate(&tiny()).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn split_sizes() {
        let s = split(8, (0.5, 0.25, 0.25), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (4, 2, 2));
        assert_eq!(s, split(8, (0.5, 0.25, 0.25), 1).unwrap());
        let s = split(10, (0.5, 0.25, 0.25), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (5, 2, 3));
        let mut all: Vec<_> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(split(10, (0.5, 0.5, 0.5), 1).is_err());
        assert!(split(10, (1.0, 0.0, 0.0), 1).is_err());
    }
}
