//! Sheaf Dirichlet energy and sheaf total variation, computed straight from
//! their pairwise sums.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::hypergraph::Hypergraph;
use crate::laplacian::{squared_distance, stalk_projections, BlockMatrix, Normalizer};
use crate::linalg::Mat;
use crate::sheaf::Sheaf;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyKind {
    Dirichlet,
    TotalVariation,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyValue {
    pub value: f64,
    pub kind: EnergyKind,
}

fn check_normalizer(h: &Hypergraph, s: &Sheaf, norm: &Normalizer) -> Result<()> {
    if norm.num_nodes() != h.num_nodes() || norm.block_dim() != s.stalk_dim() {
        return shape_err(format!(
            "normalizer for n = {}, d = {} used with n = {}, d = {}",
            norm.num_nodes(),
            norm.block_dim(),
            h.num_nodes(),
            s.stalk_dim()
        ));
    }
    Ok(())
}

/// `½ Σ_e (1/δ_e) Σ_{u≠v∈e} ‖F_{v⊴e}D_v^{-1/2}x_v − F_{u⊴e}D_u^{-1/2}x_u‖²`,
/// summed over channels.
pub fn dirichlet_energy(h: &Hypergraph, s: &Sheaf, norm: &Normalizer, x: &Mat) -> Result<EnergyValue> {
    check_normalizer(h, s, norm)?;
    let proj = stalk_projections(h, s, x, Some(norm))?;
    let mut total = 0.0;
    for (e, members) in h.hyperedges().iter().enumerate() {
        let base = h.incidence_offset(e);
        let mut pair_sum = 0.0;
        for i in 0..members.len() {
            for j in (i + 1)..members.len() {
                pair_sum += squared_distance(&proj[base + i], &proj[base + j]);
            }
        }
        // ordered pairs count each unordered pair twice, cancelling the ½
        total += pair_sum / members.len() as f64;
    }
    Ok(EnergyValue {
        value: total,
        kind: EnergyKind::Dirichlet,
    })
}

/// `½ Σ_e (1/δ_e) max_{u,v∈e} ‖F_{v⊴e}D_v^{-1/2}x_v − F_{u⊴e}D_u^{-1/2}x_u‖²`.
pub fn total_variation(h: &Hypergraph, s: &Sheaf, norm: &Normalizer, x: &Mat) -> Result<EnergyValue> {
    check_normalizer(h, s, norm)?;
    let proj = stalk_projections(h, s, x, Some(norm))?;
    let mut total = 0.0;
    for (e, members) in h.hyperedges().iter().enumerate() {
        let base = h.incidence_offset(e);
        let mut best = 0.0f64;
        for i in 0..members.len() {
            for j in (i + 1)..members.len() {
                best = best.max(squared_distance(&proj[base + i], &proj[base + j]));
            }
        }
        total += 0.5 * best / members.len() as f64;
    }
    Ok(EnergyValue {
        value: total,
        kind: EnergyKind::TotalVariation,
    })
}

/// `Σ_c x_cᵀ M x_c` over the columns of `x`.
pub fn quadratic_form(m: &BlockMatrix, x: &Mat) -> Result<f64> {
    let mx = m.apply(x)?;
    Ok(x.as_slice().iter().zip(mx.as_slice()).map(|(a, b)| a * b).sum())
}
