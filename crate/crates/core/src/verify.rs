//! Randomized certification suites for the Laplacian identities, spectral
//! bounds, diffusion laws and trivial-sheaf reductions.

use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diffusion::{diffuse_linear, subgradient_check};
use crate::energy::{dirichlet_energy, quadratic_form, total_variation};
use crate::error::{Error, Result};
use crate::hypergraph::Hypergraph;
use crate::laplacian::{
    discrepant_pairs, linear_laplacian, nonlinear_laplacian, nonlinear_laplacian_from_pairs,
    normalize, BlockMatrix, NormMode, NormStyle, Normalizer,
};
use crate::linalg::Mat;
use crate::sheaf::{MapKind, Sheaf};
use crate::spectral::{eigenvalues_sym, lambda_star};

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyConfig {
    pub trials: usize,
    pub seed: u64,
    pub max_nodes: usize,
    /// Corrupts one entry of every normalized Laplacian before the spectral
    /// checks, to exercise the failure path.
    pub inject_asymmetry: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            trials: 50,
            seed: 0,
            max_nodes: 8,
            inject_asymmetry: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PropertyResult {
    pub name: String,
    pub passed: bool,
    pub trials: usize,
    /// Largest observed violation measure; its meaning depends on the property.
    pub worst: f64,
    pub detail: String,
}

impl PropertyResult {
    pub fn line(&self) -> String {
        format!(
            "{} {} trials={} worst={:e}{}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.trials,
            self.worst,
            if self.detail.is_empty() {
                String::new()
            } else {
                format!(" ({})", self.detail)
            }
        )
    }
}

/// A random hypergraph (every node covered), sheaf and signal.
#[derive(Clone, Debug)]
pub struct Instance {
    pub h: Hypergraph,
    pub sheaf: Sheaf,
    pub x: Mat,
}

pub fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (trial as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Hypergraph on `2..=max_nodes` nodes with `1..=max_edges` random hyperedges
/// of size ≥ 2; uncovered nodes are gathered into one extra hyperedge (joined
/// to node 0 when only one is left).
pub fn random_hypergraph(rng: &mut impl Rng, max_nodes: usize, max_edges: usize) -> Hypergraph {
    let n = rng.random_range(2..=max_nodes.max(2));
    let m = rng.random_range(1..=max_edges.max(1));
    let mut edges: Vec<Vec<usize>> = (0..m)
        .map(|_| {
            let k = rng.random_range(2..=n);
            index::sample(rng, n, k).into_vec()
        })
        .collect();
    let mut covered = vec![false; n];
    for e in &edges {
        for &v in e {
            covered[v] = true;
        }
    }
    let mut rest: Vec<usize> = (0..n).filter(|&v| !covered[v]).collect();
    if !rest.is_empty() {
        if rest.len() == 1 {
            rest.push(if rest[0] == 0 { 1 } else { 0 });
        }
        edges.push(rest);
    }
    Hypergraph::new(n, edges).expect("generated hypergraph is valid")
}

pub fn random_kind(rng: &mut impl Rng, d: usize) -> MapKind {
    match rng.random_range(0..3) {
        0 => MapKind::Diagonal,
        1 => MapKind::LowRank(rng.random_range(1..=d)),
        _ => MapKind::General,
    }
}

pub fn random_signal(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("shape")
}

pub fn random_instance(rng: &mut impl Rng, max_nodes: usize, max_edges: usize, max_d: usize) -> Instance {
    let h = random_hypergraph(rng, max_nodes, max_edges);
    let d = rng.random_range(1..=max_d);
    let kind = random_kind(rng, d);
    let sheaf = Sheaf::random(&h, d, kind, rng.random()).expect("valid kind");
    let channels = rng.random_range(1..=3);
    let x = random_signal(rng, h.num_nodes() * d, channels);
    Instance { h, sheaf, x }
}

fn sheaf_normalizer(inst: &Instance) -> Result<Normalizer> {
    Normalizer::new(&inst.h, &inst.sheaf, NormMode::Sheaf, NormStyle::Symmetric, 0.0)
}

fn corrupt(m: &BlockMatrix) -> Result<BlockMatrix> {
    let mut dense = m.to_dense();
    if dense.rows() >= 2 {
        dense[(0, 1)] += 1e-3;
    }
    BlockMatrix::from_dense(m.num_nodes(), m.block_dim(), &dense)
}

struct Tally {
    name: &'static str,
    trials: usize,
    failures: usize,
    worst: f64,
    first_error: Option<String>,
}

impl Tally {
    fn new(name: &'static str) -> Self {
        Tally {
            name,
            trials: 0,
            failures: 0,
            worst: 0.0,
            first_error: None,
        }
    }

    fn record(&mut self, outcome: Result<(bool, f64)>) {
        self.trials += 1;
        match outcome {
            Ok((ok, measure)) => {
                if !ok {
                    self.failures += 1;
                }
                if measure > self.worst || measure.is_nan() {
                    self.worst = measure;
                }
            }
            Err(e) => {
                self.failures += 1;
                self.first_error.get_or_insert_with(|| e.to_string());
            }
        }
    }

    fn finish(self) -> PropertyResult {
        let mut detail = if self.failures > 0 {
            format!("{} of {} trials failed", self.failures, self.trials)
        } else {
            String::new()
        };
        if let Some(e) = self.first_error {
            detail.push_str(&format!("; first error: {e}"));
        }
        PropertyResult {
            name: self.name.to_string(),
            passed: self.failures == 0,
            trials: self.trials,
            worst: self.worst,
            detail,
        }
    }
}

fn relative_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// `xᵀΔx` against the Dirichlet sum; measure is the relative gap (≤ 1e-10).
pub fn check_quadratic_form(inst: &Instance, inject: bool) -> Result<(bool, f64)> {
    let norm = sheaf_normalizer(inst)?;
    let mut delta = normalize(&linear_laplacian(&inst.h, &inst.sheaf)?, &norm)?;
    if inject {
        delta = corrupt(&delta)?;
    }
    let q = quadratic_form(&delta, &inst.x)?;
    let e = dirichlet_energy(&inst.h, &inst.sheaf, &norm, &inst.x)?.value;
    let gap = relative_gap(q, e);
    Ok((gap <= 1e-10 || (q - e).abs() <= 1e-14, gap))
}

/// Spectrum of the sheaf-normalized Laplacian inside `[−1e-9, 1 + 1e-9]`;
/// measure is the largest excursion outside `[0, 1]`.
pub fn check_spectrum(inst: &Instance, inject: bool) -> Result<(bool, f64)> {
    let norm = sheaf_normalizer(inst)?;
    let mut delta = normalize(&linear_laplacian(&inst.h, &inst.sheaf)?, &norm)?;
    if inject {
        delta = corrupt(&delta)?;
    }
    let spec = eigenvalues_sym(&delta.to_dense())?;
    let lo = spec.min().unwrap_or(0.0);
    let hi = spec.max().unwrap_or(0.0);
    let excursion = (-lo).max(hi - 1.0).max(0.0);
    Ok((lo >= -1e-9 && hi <= 1.0 + 1e-9, excursion))
}

/// Ten linear diffusion steps contract the energy by at least λ*; measure is
/// the largest `E(k+1)/E(k) − λ*` over steps with `E(k) > 1e-12·E(0)`.
pub fn check_contraction(inst: &Instance, steps: usize, inject: bool) -> Result<(bool, f64)> {
    let norm = sheaf_normalizer(inst)?;
    let mut delta = normalize(&linear_laplacian(&inst.h, &inst.sheaf)?, &norm)?;
    if inject {
        delta = corrupt(&delta)?;
    }
    let spec = eigenvalues_sym(&delta.to_dense())?;
    let lstar = match lambda_star(&spec) {
        Ok(l) => l,
        Err(Error::AllZeroSpectrum) => return Ok((true, 0.0)),
        Err(e) => return Err(e),
    };
    let (_, trace) = diffuse_linear(&inst.h, &inst.sheaf, &norm, &inst.x, steps)?;
    let e = trace.energies();
    let mut ok = true;
    let mut worst = f64::NEG_INFINITY;
    for w in e.windows(2) {
        if w[0] > 1e-12 * e[0] {
            let excess = w[1] / w[0] - lstar;
            worst = worst.max(excess);
            ok &= excess <= 1e-9;
        } else {
            ok &= w[1] <= w[0] + 1e-15 * e[0].max(1.0);
        }
    }
    Ok((ok, worst.max(0.0)))
}

/// `xᵀΔ̄x = 2·TV(x)` without mediators; measure is the relative gap.
pub fn check_tv_identity(inst: &Instance, seed: u64) -> Result<(bool, f64)> {
    let norm = sheaf_normalizer(inst)?;
    let nl = nonlinear_laplacian(&inst.h, &inst.sheaf, &inst.x, false, Some(&norm), seed)?;
    let q = quadratic_form(&normalize(&nl, &norm)?, &inst.x)?;
    let tv = total_variation(&inst.h, &inst.sheaf, &norm, &inst.x)?.value;
    let gap = relative_gap(q, 2.0 * tv);
    Ok((gap <= 1e-10 || (q - 2.0 * tv).abs() <= 1e-14, gap))
}

/// Non-linear diffusion where each step uses `η = 0.5/λ_max` of the current
/// normalized Δ̄; measure is the largest per-step increase of the total variation.
pub fn check_descent(inst: &Instance, steps: usize, mediators: bool, seed: u64) -> Result<(bool, f64)> {
    let norm = sheaf_normalizer(inst)?;
    let (h, s) = (&inst.h, &inst.sheaf);
    let mut stream = ChaCha8Rng::seed_from_u64(seed);
    let mut x = inst.x.clone();
    let mut tv = total_variation(h, s, &norm, &x)?.value;
    let mut rise = 0.0f64;
    for _ in 0..steps {
        let pairs = discrepant_pairs(h, s, &x, Some(&norm), stream.next_u64())?;
        let delta = normalize(&nonlinear_laplacian_from_pairs(h, s, &pairs, mediators)?, &norm)?;
        let lmax = eigenvalues_sym(&delta.to_dense())?.max().unwrap_or(0.0);
        if lmax <= 0.0 {
            break;
        }
        x.axpy(-0.5 / lmax, &delta.apply(&x)?)?;
        let next = total_variation(h, s, &norm, &x)?.value;
        rise = rise.max(next - tv);
        tv = next;
    }
    Ok((rise <= 1e-9, rise))
}

/// Finite-difference check of `Δ̄(x)·x` at a generic point, resampling the
/// signal up to 20 times when the discrepant pairs are not locally unique.
pub fn check_subgradient(inst: &Instance, rng: &mut impl Rng) -> Result<(bool, f64)> {
    let norm = sheaf_normalizer(inst)?;
    let mut x = inst.x.clone();
    for _ in 0..20 {
        match subgradient_check(&inst.h, &inst.sheaf, &norm, &x, 1e-5) {
            Ok(err) => return Ok((err < 1e-4, err)),
            Err(Error::DegeneratePoint(_)) => x = random_signal(rng, x.rows(), x.cols()),
            Err(e) => return Err(e),
        }
    }
    Err(Error::DegeneratePoint(0))
}

/// Classical linear hypergraph Laplacian
/// `L(x)_v = Σ_e (1/δ_e) Σ_{u∈e} (x_v − x_u)` as a dense scalar matrix.
pub fn classical_linear(h: &Hypergraph) -> Vec<Vec<f64>> {
    let n = h.num_nodes();
    let mut l = vec![vec![0.0; n]; n];
    for e in h.hyperedges() {
        let delta = e.len();
        if delta < 2 {
            continue;
        }
        let w = 1.0 / delta as f64;
        for &v in e {
            l[v][v] += (delta - 1) as f64 / delta as f64;
        }
        for (i, &u) in e.iter().enumerate() {
            for &v in &e[i + 1..] {
                l[u][v] -= w;
                l[v][u] -= w;
            }
        }
    }
    l
}

/// Classical non-linear hypergraph Laplacian: per hyperedge the first pair
/// maximizing `Σ_c (x_uc − x_vc)²`, plus mediator connections, all weighted 1/δ_e.
/// Returns `None` when some hyperedge has tied pairs.
pub fn classical_nonlinear(h: &Hypergraph, x: &Mat, mediators: bool) -> Option<Vec<Vec<f64>>> {
    let n = h.num_nodes();
    let mut l = vec![vec![0.0; n]; n];
    for e in h.hyperedges() {
        if e.len() < 2 {
            continue;
        }
        let mut best = (0, 0, f64::NEG_INFINITY);
        let mut tied = false;
        for (i, &u) in e.iter().enumerate() {
            for &v in &e[i + 1..] {
                let dist: f64 = x.row(u).iter().zip(x.row(v)).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist > best.2 {
                    best = (u, v, dist);
                    tied = false;
                } else if dist == best.2 {
                    tied = true;
                }
            }
        }
        if tied {
            return None;
        }
        let w = 1.0 / e.len() as f64;
        let (u, v, _) = best;
        let mut links = vec![(u, v)];
        if mediators {
            for &k in e.iter().filter(|&&k| k != u && k != v) {
                links.push((u, k));
                links.push((v, k));
            }
        }
        for (a, b) in links {
            l[a][a] += w;
            l[b][b] += w;
            l[a][b] -= w;
            l[b][a] -= w;
        }
    }
    Some(l)
}

fn bitwise_equal(dense: &Mat, oracle: &[Vec<f64>]) -> bool {
    oracle
        .iter()
        .enumerate()
        .all(|(i, row)| row.iter().enumerate().all(|(j, &v)| dense[(i, j)].to_bits() == v.to_bits() || dense[(i, j)] == v))
}

/// Trivial-sheaf Laplacians equal the classical scalar ones exactly; measure
/// is the number of mismatching operators.
pub fn check_trivial_reduction(h: &Hypergraph, x: &Mat) -> Result<(bool, f64)> {
    let s = Sheaf::trivial(h);
    let mut mismatches = 0;
    if !bitwise_equal(&linear_laplacian(h, &s)?.to_dense(), &classical_linear(h)) {
        mismatches += 1;
    }
    for mediators in [false, true] {
        let Some(oracle) = classical_nonlinear(h, x, mediators) else {
            continue;
        };
        let pairs = discrepant_pairs(h, &s, x, None, 0)?;
        let ours = nonlinear_laplacian_from_pairs(h, &s, &pairs, mediators)?;
        if !bitwise_equal(&ours.to_dense(), &oracle) {
            mismatches += 1;
        }
    }
    Ok((mismatches == 0, mismatches as f64))
}

/// Runs every suite for `cfg.trials` random instances each.
pub fn run_all(cfg: &VerifyConfig) -> Vec<PropertyResult> {
    let max_nodes = cfg.max_nodes.max(2);
    let max_edges = 6;
    let max_d = 3;
    let mut quad = Tally::new("quadratic_form_identity");
    let mut spec = Tally::new("spectrum_in_unit_interval");
    let mut contraction = Tally::new("linear_contraction");
    let mut tv = Tally::new("tv_identity");
    let mut subgrad = Tally::new("subgradient_check");
    let mut reduction = Tally::new("trivial_reduction");
    for t in 0..cfg.trials {
        let mut rng = trial_rng(cfg.seed, t);
        let inst = random_instance(&mut rng, max_nodes, max_edges, max_d);
        quad.record(check_quadratic_form(&inst, cfg.inject_asymmetry));
        spec.record(check_spectrum(&inst, cfg.inject_asymmetry));
        contraction.record(check_contraction(&inst, 10, cfg.inject_asymmetry));
        tv.record(check_tv_identity(&inst, rng.random()));
        subgrad.record(check_subgradient(&inst, &mut rng));
        let channels = rng.random_range(1..=3);
        let x = random_signal(&mut rng, inst.h.num_nodes(), channels);
        reduction.record(check_trivial_reduction(&inst.h, &x));
    }
    [quad, spec, contraction, tv, subgrad, reduction]
        .into_iter()
        .map(Tally::finish)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_hypergraphs_cover_every_node() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let h = random_hypergraph(&mut rng, 8, 6);
            assert!(h.degrees().node_degrees.iter().all(|&d| d > 0));
        }
    }

    #[test]
    fn classical_oracles_on_h3() {
        let h = Hypergraph::new(3, vec![vec![0, 1, 2]]).unwrap();
        let l = classical_linear(&h);
        assert_eq!(l[0][0], 2.0 / 3.0);
        assert_eq!(l[0][1], -1.0 / 3.0);
        let nl = classical_nonlinear(&h, &Mat::column(&[0.0, 1.0, 5.0]), false).unwrap();
        assert_eq!(nl[1], vec![0.0, 0.0, 0.0]);
        assert!(classical_nonlinear(&h, &Mat::column(&[0.0, 5.0, 0.0]), false).is_none());
    }

    #[test]
    fn small_suite_passes() {
        let results = run_all(&VerifyConfig {
            trials: 10,
            seed: 4,
            ..VerifyConfig::default()
        });
        for r in &results {
            assert!(r.passed, "{}", r.line());
        }
    }

    #[test]
    fn injected_asymmetry_fails() {
        let results = run_all(&VerifyConfig {
            trials: 2,
            inject_asymmetry: true,
            ..VerifyConfig::default()
        });
        let spec = results.iter().find(|r| r.name == "spectrum_in_unit_interval").unwrap();
        assert!(!spec.passed);
    }
}
