//! Linear and non-linear sheaf diffusion with per-step energy traces.

use std::fmt::Write as _;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::energy::{dirichlet_energy, total_variation};
use crate::error::{Error, Result};
use crate::hypergraph::Hypergraph;
use crate::laplacian::{
    discrepant_pairs, linear_laplacian, nonlinear_laplacian_from_pairs, normalize, squared_distance,
    stalk_projections, DiscrepantPair, NormStyle, Normalizer,
};
use crate::linalg::Mat;
use crate::sheaf::Sheaf;

pub const DEFAULT_STEP_SIZE: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Law {
    #[serde(alias = "linear")]
    LinearDirichlet,
    #[serde(alias = "nonlinear")]
    NonlinearTv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub energy: f64,
    /// Fingerprint of the pair graph used to reach this step (non-linear only).
    pub fingerprint: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyTrace {
    pub law: Law,
    pub step_size: f64,
    pub steps: Vec<TraceStep>,
}

impl EnergyTrace {
    pub fn energies(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.energy).collect()
    }

    /// `step,energy` lines, one per recorded step, no header.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            let _ = writeln!(out, "{},{}", s.step, s.energy);
        }
        out
    }
}

/// FNV-1a over the selected (edge, u, v) triples.
pub fn pair_fingerprint(pairs: &[DiscrepantPair]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for p in pairs {
        for word in [p.edge as u64, p.u as u64, p.v as u64] {
            for byte in word.to_le_bytes() {
                hash ^= u64::from(byte);
                hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    }
    hash
}

/// Iterates `X ← (I − Δ)X` for `steps` steps, recording the Dirichlet energy
/// before the first step and after each one.
pub fn diffuse_linear(
    h: &Hypergraph,
    s: &Sheaf,
    norm: &Normalizer,
    x0: &Mat,
    steps: usize,
) -> Result<(Mat, EnergyTrace)> {
    let delta = normalize(&linear_laplacian(h, s)?, norm)?;
    let mut x = x0.clone();
    let mut trace = EnergyTrace {
        law: Law::LinearDirichlet,
        step_size: 1.0,
        steps: Vec::with_capacity(steps + 1),
    };
    trace.steps.push(TraceStep {
        step: 0,
        energy: dirichlet_energy(h, s, norm, &x)?.value,
        fingerprint: None,
    });
    for k in 1..=steps {
        let dx = delta.apply(&x)?;
        x = x.sub(&dx)?;
        trace.steps.push(TraceStep {
            step: k,
            energy: dirichlet_energy(h, s, norm, &x)?.value,
            fingerprint: None,
        });
    }
    Ok((x, trace))
}

/// Subgradient descent on the sheaf total variation: every step re-selects the
/// discrepant pairs at the current signal and applies `X ← X − η·Δ̄(X)·X`.
/// Step `k` draws its tie-break seed from a stream seeded by `seed`.
#[allow(clippy::too_many_arguments)]
pub fn diffuse_nonlinear(
    h: &Hypergraph,
    s: &Sheaf,
    norm: &Normalizer,
    x0: &Mat,
    steps: usize,
    eta: f64,
    mediators: bool,
    seed: u64,
) -> Result<(Mat, EnergyTrace)> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::Config(format!("step size must be positive, got {eta}")));
    }
    let mut stream = ChaCha8Rng::seed_from_u64(seed);
    let mut x = x0.clone();
    let mut trace = EnergyTrace {
        law: Law::NonlinearTv,
        step_size: eta,
        steps: Vec::with_capacity(steps + 1),
    };
    trace.steps.push(TraceStep {
        step: 0,
        energy: total_variation(h, s, norm, &x)?.value,
        fingerprint: None,
    });
    for k in 1..=steps {
        let pairs = discrepant_pairs(h, s, &x, Some(norm), stream.next_u64())?;
        let delta = normalize(&nonlinear_laplacian_from_pairs(h, s, &pairs, mediators)?, norm)?;
        let dx = delta.apply(&x)?;
        x.axpy(-eta, &dx)?;
        trace.steps.push(TraceStep {
            step: k,
            energy: total_variation(h, s, norm, &x)?.value,
            fingerprint: Some(pair_fingerprint(&pairs)),
        });
    }
    Ok((x, trace))
}

fn symmetric(norm: &Normalizer) -> Normalizer {
    let mut n = norm.clone();
    n.style = NormStyle::Symmetric;
    n
}

/// Fails with `DegeneratePoint(e)` when hyperedge `e` has more than one
/// maximizing pair at `x`.
fn check_unique(h: &Hypergraph, s: &Sheaf, norm: &Normalizer, x: &Mat) -> Result<()> {
    let proj = stalk_projections(h, s, x, Some(norm))?;
    for (e, members) in h.hyperedges().iter().enumerate() {
        let base = h.incidence_offset(e);
        let mut best = f64::NEG_INFINITY;
        let mut count = 0;
        for i in 0..members.len() {
            for j in (i + 1)..members.len() {
                let dist = squared_distance(&proj[base + i], &proj[base + j]);
                if dist > best {
                    best = dist;
                    count = 1;
                } else if dist == best {
                    count += 1;
                }
            }
        }
        if count > 1 {
            return Err(Error::DegeneratePoint(e));
        }
    }
    Ok(())
}

/// Largest relative gap between `Δ̄(x)·x` and central differences of the total
/// variation with step `step`.
///
/// Relative errors use `max(|g|, |fd|, 1e-6·max(‖g‖∞, 1))` as denominator so
/// coordinates with a vanishing gradient are compared on an absolute scale.
pub fn subgradient_check(
    h: &Hypergraph,
    s: &Sheaf,
    norm: &Normalizer,
    x: &Mat,
    step: f64,
) -> Result<f64> {
    let norm = symmetric(norm);
    check_unique(h, s, &norm, x)?;
    let pairs = discrepant_pairs(h, s, x, Some(&norm), 0)?;
    let delta = normalize(&nonlinear_laplacian_from_pairs(h, s, &pairs, false)?, &norm)?;
    let grad = delta.apply(x)?;
    let floor = 1e-6 * grad.max_abs().max(1.0);
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.as_slice().len() {
        let orig = probe.as_slice()[i];
        let mut side = |offset: f64| -> Result<f64> {
            probe.as_mut_slice()[i] = orig + offset;
            let moved = discrepant_pairs(h, s, &probe, Some(&norm), 0)?;
            let same = moved.iter().zip(&pairs).all(|(a, b)| (a.u, a.v) == (b.u, b.v));
            if !same {
                let e = moved
                    .iter()
                    .zip(&pairs)
                    .position(|(a, b)| (a.u, a.v) != (b.u, b.v))
                    .unwrap_or(0);
                return Err(Error::DegeneratePoint(e));
            }
            check_unique(h, s, &norm, &probe)?;
            Ok(total_variation(h, s, &norm, &probe)?.value)
        };
        let plus = side(step)?;
        let minus = side(-step)?;
        probe.as_mut_slice()[i] = orig;
        let fd = (plus - minus) / (2.0 * step);
        let g = grad.as_slice()[i];
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(floor);
        worst = worst.max(rel);
    }
    Ok(worst)
}
