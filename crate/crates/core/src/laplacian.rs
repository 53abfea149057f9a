//! Linear and non-linear sheaf hypergraph Laplacians as block-sparse operators.
//!
//! A signal on an n-node hypergraph with stalk dimension d is an `(n·d) × f`
//! matrix: node `v` owns rows `v·d .. v·d + d`, and each column is a channel.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::hypergraph::Hypergraph;
use crate::linalg::Mat;
use crate::sheaf::{MapKind, Sheaf};
use crate::spectral;

pub const DEFAULT_EPSILON: f64 = 1e-6;
const SINGULAR_THRESHOLD: f64 = 1e-12;

/// An `(n·d) × (n·d)` operator stored as d×d blocks keyed by node pair.
/// Absent blocks are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockMatrix {
    n: usize,
    d: usize,
    blocks: BTreeMap<(usize, usize), Mat>,
}

impl BlockMatrix {
    pub fn zeros(n: usize, d: usize) -> Self {
        BlockMatrix {
            n,
            d,
            blocks: BTreeMap::new(),
        }
    }

    pub fn identity(n: usize, d: usize) -> Self {
        let mut m = Self::zeros(n, d);
        for v in 0..n {
            m.blocks.insert((v, v), Mat::identity(d));
        }
        m
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn block_dim(&self) -> usize {
        self.d
    }

    pub fn dim(&self) -> usize {
        self.n * self.d
    }

    pub fn block(&self, u: usize, v: usize) -> Option<&Mat> {
        self.blocks.get(&(u, v))
    }

    pub fn blocks(&self) -> impl Iterator<Item = (&(usize, usize), &Mat)> {
        self.blocks.iter()
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn set_block(&mut self, u: usize, v: usize, block: Mat) -> Result<()> {
        if block.shape() != (self.d, self.d) || u >= self.n || v >= self.n {
            return shape_err(format!(
                "block ({u}, {v}) of shape {:?} does not fit an n = {}, d = {} operator",
                block.shape(),
                self.n,
                self.d
            ));
        }
        self.blocks.insert((u, v), block);
        Ok(())
    }

    /// `block(u, v) += coef · m`
    fn accumulate(&mut self, u: usize, v: usize, coef: f64, m: &Mat) {
        let d = self.d;
        let b = self.blocks.entry((u, v)).or_insert_with(|| Mat::zeros(d, d));
        for (acc, &x) in b.as_mut_slice().iter_mut().zip(m.as_slice()) {
            *acc += coef * x;
        }
    }

    pub fn to_dense(&self) -> Mat {
        let d = self.d;
        let mut out = Mat::zeros(self.dim(), self.dim());
        for (&(u, v), b) in &self.blocks {
            for i in 0..d {
                for j in 0..d {
                    out[(u * d + i, v * d + j)] = b[(i, j)];
                }
            }
        }
        out
    }

    /// Splits a dense `(n·d)²` matrix into blocks, keeping only nonzero ones.
    pub fn from_dense(n: usize, d: usize, m: &Mat) -> Result<Self> {
        if m.shape() != (n * d, n * d) {
            return shape_err(format!("dense matrix {:?} is not {}x{}", m.shape(), n * d, n * d));
        }
        let mut out = Self::zeros(n, d);
        for u in 0..n {
            for v in 0..n {
                let mut b = Mat::zeros(d, d);
                for i in 0..d {
                    for j in 0..d {
                        b[(i, j)] = m[(u * d + i, v * d + j)];
                    }
                }
                if b.as_slice().iter().any(|&x| x != 0.0) {
                    out.blocks.insert((u, v), b);
                }
            }
        }
        Ok(out)
    }

    /// Exact block-sparse product; each output row block sums its terms in
    /// ascending column-block order.
    pub fn apply(&self, x: &Mat) -> Result<Mat> {
        if x.rows() != self.dim() {
            return shape_err(format!(
                "operator of dimension {} applied to a signal with {} rows",
                self.dim(),
                x.rows()
            ));
        }
        let d = self.d;
        let f = x.cols();
        let mut out = Mat::zeros(x.rows(), f);
        let xs = x.as_slice();
        let os = out.as_mut_slice();
        for (&(u, v), b) in &self.blocks {
            let bs = b.as_slice();
            for i in 0..d {
                let orow = &mut os[(u * d + i) * f..(u * d + i + 1) * f];
                for k in 0..d {
                    let coef = bs[i * d + k];
                    if coef == 0.0 {
                        continue;
                    }
                    let xrow = &xs[(v * d + k) * f..(v * d + k + 1) * f];
                    for (o, &xv) in orow.iter_mut().zip(xrow) {
                        *o += coef * xv;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Exact block symmetry: `block(u, v) == block(v, u)ᵀ` for every pair.
    pub fn is_block_symmetric(&self) -> bool {
        self.blocks.iter().all(|(&(u, v), b)| match self.blocks.get(&(v, u)) {
            Some(t) => *t == b.transpose(),
            None => b.as_slice().iter().all(|&x| x == 0.0),
        })
    }

    /// Coordinate-list export: one `row col value` line per nonzero scalar,
    /// sorted by (row, col).
    pub fn to_coordinate_text(&self) -> String {
        let d = self.d;
        let mut entries: Vec<(usize, usize, f64)> = Vec::new();
        for (&(u, v), b) in &self.blocks {
            for i in 0..d {
                for j in 0..d {
                    let val = b[(i, j)];
                    if val != 0.0 {
                        entries.push((u * d + i, v * d + j, val));
                    }
                }
            }
        }
        entries.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut out = String::new();
        for (r, c, val) in entries {
            let _ = writeln!(out, "{r} {c} {val}");
        }
        out
    }
}

/// Free-function form of [`BlockMatrix::apply`].
pub fn apply(m: &BlockMatrix, x: &Mat) -> Result<Mat> {
    m.apply(x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// `D_v = I`
    Identity,
    /// `D_v = d_v · I`
    Degree,
    /// `D_v = Σ_{e∋v} F_{v⊴e}ᵀ F_{v⊴e} + ε·I`
    Sheaf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormStyle {
    /// `D^{-1/2} L D^{-1/2}`
    Symmetric,
    /// `D^{-1} L`
    Asymmetric,
}

/// Per-node d×d normalization blocks with their inverse square roots and inverses.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mode: NormMode,
    pub style: NormStyle,
    pub epsilon: f64,
    pub d_blocks: Vec<Mat>,
    pub inv_sqrt_blocks: Vec<Mat>,
    pub inv_blocks: Vec<Mat>,
}

impl Normalizer {
    pub fn identity(n: usize, d: usize) -> Self {
        Normalizer {
            mode: NormMode::Identity,
            style: NormStyle::Symmetric,
            epsilon: 0.0,
            d_blocks: vec![Mat::identity(d); n],
            inv_sqrt_blocks: vec![Mat::identity(d); n],
            inv_blocks: vec![Mat::identity(d); n],
        }
    }

    pub fn new(
        h: &Hypergraph,
        s: &Sheaf,
        mode: NormMode,
        style: NormStyle,
        epsilon: f64,
    ) -> Result<Self> {
        if !(epsilon >= 0.0) {
            return Err(Error::Config(format!("epsilon must be nonnegative, got {epsilon}")));
        }
        s.check_host(h)?;
        let n = h.num_nodes();
        let d = s.stalk_dim();
        let mut out = Normalizer::identity(n, d);
        out.mode = mode;
        out.style = style;
        out.epsilon = epsilon;
        match mode {
            NormMode::Identity => {}
            NormMode::Degree => {
                let degrees = h.degrees().node_degrees;
                for (v, &dv) in degrees.iter().enumerate() {
                    let value = if dv == 0 { epsilon } else { dv as f64 };
                    if value < SINGULAR_THRESHOLD {
                        return Err(Error::SingularBlock {
                            node: v,
                            eigenvalue: value,
                        });
                    }
                    let r = 1.0 / value.sqrt();
                    out.d_blocks[v] = Mat::identity(d).scale(value);
                    out.inv_sqrt_blocks[v] = Mat::identity(d).scale(r);
                    out.inv_blocks[v] = Mat::identity(d).scale(1.0 / value);
                }
            }
            NormMode::Sheaf => {
                let maps = s.maps();
                let mut dv = vec![Mat::zeros(d, d); n];
                for inc in h.incidence_pairs().iter().zip(&maps) {
                    let (inc, f) = inc;
                    dv[inc.node].add_assign(&f.t_matmul(f)?)?;
                }
                for (v, mut block) in dv.into_iter().enumerate() {
                    for i in 0..d {
                        block[(i, i)] += epsilon;
                    }
                    let (sqrt_inv, inv) = if s.kind() == MapKind::Diagonal {
                        let diag: Vec<f64> = (0..d).map(|i| block[(i, i)]).collect();
                        if let Some(&low) = diag.iter().min_by(|a, b| a.total_cmp(b)) {
                            if !(low >= SINGULAR_THRESHOLD) {
                                return Err(Error::SingularBlock {
                                    node: v,
                                    eigenvalue: low,
                                });
                            }
                        }
                        (
                            Mat::diag(&diag.iter().map(|x| 1.0 / x.sqrt()).collect::<Vec<_>>()),
                            Mat::diag(&diag.iter().map(|x| 1.0 / x).collect::<Vec<_>>()),
                        )
                    } else {
                        let (vals, vecs) = spectral::symmetric_eigen(&block)?;
                        if !(vals[0] >= SINGULAR_THRESHOLD) {
                            return Err(Error::SingularBlock {
                                node: v,
                                eigenvalue: vals[0],
                            });
                        }
                        (
                            spectral::spectral_map(&vals, &vecs, |l| 1.0 / l.sqrt()),
                            spectral::spectral_map(&vals, &vecs, |l| 1.0 / l),
                        )
                    };
                    out.d_blocks[v] = block;
                    out.inv_sqrt_blocks[v] = sqrt_inv;
                    out.inv_blocks[v] = inv;
                }
            }
        }
        Ok(out)
    }

    pub fn num_nodes(&self) -> usize {
        self.d_blocks.len()
    }

    pub fn block_dim(&self) -> usize {
        self.d_blocks.first().map_or(0, Mat::rows)
    }

    /// The blocks `normalize` multiplies by on the left.
    pub fn left_blocks(&self) -> &[Mat] {
        match self.style {
            NormStyle::Symmetric => &self.inv_sqrt_blocks,
            NormStyle::Asymmetric => &self.inv_blocks,
        }
    }

    /// `D^{-1/2} x`, node by node.
    pub fn half_normalize(&self, x: &Mat) -> Result<Mat> {
        apply_block_diagonal(&self.inv_sqrt_blocks, x)
    }
}

/// `y_v = B_v x_v` for per-node d×d blocks.
pub fn apply_block_diagonal(blocks: &[Mat], x: &Mat) -> Result<Mat> {
    let d = blocks.first().map_or(0, Mat::rows);
    if x.rows() != blocks.len() * d {
        return shape_err(format!(
            "block-diagonal operator of dimension {} applied to {} rows",
            blocks.len() * d,
            x.rows()
        ));
    }
    let mut out = Mat::zeros(x.rows(), x.cols());
    for (v, b) in blocks.iter().enumerate() {
        let xv = x.row_block(v * d, d);
        out.set_row_block(v * d, &b.matmul(&xv)?);
    }
    Ok(out)
}

fn check_signal(h: &Hypergraph, s: &Sheaf, x: &Mat) -> Result<()> {
    s.check_host(h)?;
    if x.rows() != h.num_nodes() * s.stalk_dim() {
        return shape_err(format!(
            "signal has {} rows, expected n·d = {}",
            x.rows(),
            h.num_nodes() * s.stalk_dim()
        ));
    }
    Ok(())
}

/// Linear sheaf Laplacian.
///
/// Diagonal blocks `Σ_{e∋v} ((δ_e − 1)/δ_e)·F_{v⊴e}ᵀF_{v⊴e}`, off-diagonal
/// blocks `−Σ_{e∋u,v} (1/δ_e)·F_{u⊴e}ᵀF_{v⊴e}`, accumulated in ascending
/// hyperedge order.
pub fn linear_laplacian(h: &Hypergraph, s: &Sheaf) -> Result<BlockMatrix> {
    s.check_host(h)?;
    let maps = s.maps();
    let mut out = BlockMatrix::zeros(h.num_nodes(), s.stalk_dim());
    for (e, members) in h.hyperedges().iter().enumerate() {
        let delta = members.len();
        if delta < 2 {
            continue;
        }
        let base = h.incidence_offset(e);
        let diag_coef = (delta - 1) as f64 / delta as f64;
        let off_coef = -(1.0 / delta as f64);
        for (i, &v) in members.iter().enumerate() {
            let fv = &maps[base + i];
            out.accumulate(v, v, diag_coef, &fv.t_matmul(fv)?);
        }
        for i in 0..delta {
            for j in (i + 1)..delta {
                let (u, v) = (members[i], members[j]);
                let cross = maps[base + i].t_matmul(&maps[base + j])?;
                out.accumulate(u, v, off_coef, &cross);
                out.accumulate(v, u, off_coef, &cross.transpose());
            }
        }
    }
    Ok(out)
}

/// Normalizes a Laplacian: `D^{-1/2} L D^{-1/2}` or `D^{-1} L`.
///
/// In the symmetric style, mirrored block pairs of the input produce exactly
/// mirrored output blocks.
pub fn normalize(l: &BlockMatrix, norm: &Normalizer) -> Result<BlockMatrix> {
    if norm.num_nodes() != l.n || norm.block_dim() != l.d {
        return shape_err(format!(
            "normalizer for n = {}, d = {} applied to operator with n = {}, d = {}",
            norm.num_nodes(),
            norm.block_dim(),
            l.n,
            l.d
        ));
    }
    let mut out = BlockMatrix::zeros(l.n, l.d);
    match norm.style {
        NormStyle::Asymmetric => {
            for (&(u, v), b) in &l.blocks {
                out.blocks.insert((u, v), norm.inv_blocks[u].matmul(b)?);
            }
        }
        NormStyle::Symmetric => {
            let s = &norm.inv_sqrt_blocks;
            for (&(u, v), b) in &l.blocks {
                if u > v {
                    if let Some(mirror) = l.blocks.get(&(v, u)) {
                        if *mirror == b.transpose() {
                            continue;
                        }
                    }
                }
                let mut nb = s[u].matmul(b)?.matmul(&s[v])?;
                if u == v {
                    for i in 0..l.d {
                        for j in (i + 1)..l.d {
                            nb[(j, i)] = nb[(i, j)];
                        }
                    }
                }
                if u < v {
                    if let Some(mirror) = l.blocks.get(&(v, u)) {
                        if *mirror == b.transpose() {
                            out.blocks.insert((v, u), nb.transpose());
                        }
                    }
                }
                out.blocks.insert((u, v), nb);
            }
        }
    }
    Ok(out)
}

/// The most discrepant pair of a hyperedge and its remaining members.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscrepantPair {
    pub edge: usize,
    /// `u < v`, or `u == v` for a single-node hyperedge.
    pub u: usize,
    pub v: usize,
    /// Squared stalk distance over all channels.
    pub distance: f64,
    pub mediators: Vec<usize>,
}

/// Per-hyperedge stalk projections `F_{v⊴e}·x_v` (or `F_{v⊴e}·D_v^{-1/2}x_v`),
/// in canonical incidence order.
pub(crate) fn stalk_projections(
    h: &Hypergraph,
    s: &Sheaf,
    x: &Mat,
    norm: Option<&Normalizer>,
) -> Result<Vec<Mat>> {
    check_signal(h, s, x)?;
    let d = s.stalk_dim();
    let xs = match norm {
        Some(nm) => nm.half_normalize(x)?,
        None => x.clone(),
    };
    h.incidence_pairs()
        .iter()
        .enumerate()
        .map(|(i, inc)| s.map(i).matmul(&xs.row_block(inc.node * d, d)))
        .collect()
}

pub(crate) fn squared_distance(a: &Mat, b: &Mat) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// For every hyperedge, the pair maximizing the squared stalk distance.
/// Ties are broken uniformly at random from `seed`.
pub fn discrepant_pairs(
    h: &Hypergraph,
    s: &Sheaf,
    x: &Mat,
    norm: Option<&Normalizer>,
    seed: u64,
) -> Result<Vec<DiscrepantPair>> {
    let proj = stalk_projections(h, s, x, norm)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(h.num_hyperedges());
    for (e, members) in h.hyperedges().iter().enumerate() {
        let base = h.incidence_offset(e);
        let mut best = f64::NEG_INFINITY;
        let mut ties: Vec<(usize, usize)> = Vec::new();
        for i in 0..members.len() {
            for j in (i + 1)..members.len() {
                let dist = squared_distance(&proj[base + i], &proj[base + j]);
                if dist > best {
                    best = dist;
                    ties.clear();
                    ties.push((i, j));
                } else if dist == best {
                    ties.push((i, j));
                }
            }
        }
        let (i, j) = match ties.len() {
            0 => (0, 0),
            1 => ties[0],
            k => ties[rng.random_range(0..k)],
        };
        let mediators = members
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != i && k != j)
            .map(|(_, &v)| v)
            .collect();
        out.push(DiscrepantPair {
            edge: e,
            u: members[i],
            v: members[j],
            distance: if ties.is_empty() { 0.0 } else { best },
            mediators,
        });
    }
    Ok(out)
}

/// One weighted connection of the induced graph `G_H`, with the incidence
/// indices of both endpoints inside its hyperedge.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Relation {
    pub edge: usize,
    pub a: usize,
    pub b: usize,
    pub inc_a: usize,
    pub inc_b: usize,
    pub weight: f64,
}

fn incidence_of(h: &Hypergraph, e: usize, v: usize) -> usize {
    let pos = h
        .hyperedge(e)
        .binary_search(&v)
        .expect("pair endpoints are members of their hyperedge");
    h.incidence_offset(e) + pos
}

/// Connections of `G_H`: the discrepant pair of every hyperedge and, with
/// mediators, both pair endpoints joined to every remaining member. Every
/// connection carries weight `1/δ_e`.
pub fn relations(h: &Hypergraph, pairs: &[DiscrepantPair], mediators: bool) -> Vec<Relation> {
    let mut out = Vec::new();
    for p in pairs {
        if p.u == p.v {
            continue;
        }
        let weight = 1.0 / h.hyperedge(p.edge).len() as f64;
        let mut push = |a: usize, b: usize| {
            out.push(Relation {
                edge: p.edge,
                a,
                b,
                inc_a: incidence_of(h, p.edge, a),
                inc_b: incidence_of(h, p.edge, b),
                weight,
            })
        };
        push(p.u, p.v);
        if mediators {
            for &k in &p.mediators {
                push(p.u, k);
                push(p.v, k);
            }
        }
    }
    out
}

/// Assembles `Σ_rel w·[F_aᵀF_a, −F_aᵀF_b; −F_bᵀF_a, F_bᵀF_b]`.
pub fn laplacian_from_relations(
    h: &Hypergraph,
    s: &Sheaf,
    rels: &[Relation],
) -> Result<BlockMatrix> {
    s.check_host(h)?;
    let maps = s.maps();
    let mut out = BlockMatrix::zeros(h.num_nodes(), s.stalk_dim());
    for r in rels {
        let fa = &maps[r.inc_a];
        let fb = &maps[r.inc_b];
        out.accumulate(r.a, r.a, r.weight, &fa.t_matmul(fa)?);
        out.accumulate(r.b, r.b, r.weight, &fb.t_matmul(fb)?);
        let cross = fa.t_matmul(fb)?;
        out.accumulate(r.a, r.b, -r.weight, &cross);
        out.accumulate(r.b, r.a, -r.weight, &cross.transpose());
    }
    Ok(out)
}

pub fn nonlinear_laplacian_from_pairs(
    h: &Hypergraph,
    s: &Sheaf,
    pairs: &[DiscrepantPair],
    mediators: bool,
) -> Result<BlockMatrix> {
    laplacian_from_relations(h, s, &relations(h, pairs, mediators))
}

/// Non-linear sheaf Laplacian at signal `x`. With a normalizer, pair selection
/// compares `F_{u⊴e}·D_u^{-1/2}x_u`; the returned operator is unnormalized.
pub fn nonlinear_laplacian(
    h: &Hypergraph,
    s: &Sheaf,
    x: &Mat,
    mediators: bool,
    norm: Option<&Normalizer>,
    seed: u64,
) -> Result<BlockMatrix> {
    let pairs = discrepant_pairs(h, s, x, norm, seed)?;
    nonlinear_laplacian_from_pairs(h, s, &pairs, mediators)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn h3() -> Hypergraph {
        Hypergraph::new(3, vec![vec![0, 1, 2]]).unwrap()
    }

    fn close(a: &Mat, b: &Mat, tol: f64) -> bool {
        a.sub(b).unwrap().max_abs() <= tol
    }

    #[test]
    fn h3_trivial_linear_laplacian() {
        let h = h3();
        let l = linear_laplacian(&h, &Sheaf::trivial(&h)).unwrap();
        let want = Mat::from_rows(&[[2.0, -1.0, -1.0], [-1.0, 2.0, -1.0], [-1.0, -1.0, 2.0]])
            .unwrap()
            .scale(1.0 / 3.0);
        assert!(close(&l.to_dense(), &want, 1e-15));
        let y = l.apply(&Mat::column(&[0.0, 1.0, 5.0])).unwrap();
        assert!(close(&y, &Mat::column(&[-2.0, -1.0, 3.0]), 1e-14));
    }

    #[test]
    fn graph_edge_keeps_half_factor() {
        let h = Hypergraph::new(2, vec![vec![0, 1]]).unwrap();
        let l = linear_laplacian(&h, &Sheaf::trivial(&h)).unwrap();
        let want = Mat::from_rows(&[[0.5, -0.5], [-0.5, 0.5]]).unwrap();
        assert_eq!(l.to_dense(), want);
    }

    #[test]
    fn host_mismatch_is_reported() {
        let h = h3();
        let other = Hypergraph::new(3, vec![vec![0, 1]]).unwrap();
        let s = Sheaf::trivial(&other);
        assert!(matches!(linear_laplacian(&h, &s), Err(Error::HostMismatch(_))));
        assert!(matches!(
            nonlinear_laplacian(&h, &s, &Mat::zeros(3, 1), false, None, 0),
            Err(Error::HostMismatch(_))
        ));
    }

    #[test]
    fn normalizer_examples() {
        let h = h3();
        let n = Normalizer::new(&h, &Sheaf::trivial(&h), NormMode::Sheaf, NormStyle::Symmetric, 0.0)
            .unwrap();
        assert!(n.d_blocks.iter().all(|b| *b == Mat::identity(1)));

        let doubled = Sheaf::trivial(&h).scaled(2.0);
        let n = Normalizer::new(&h, &doubled, NormMode::Sheaf, NormStyle::Symmetric, 0.0).unwrap();
        assert_eq!(n.d_blocks[0][(0, 0)], 4.0);
        assert_eq!(n.inv_sqrt_blocks[0][(0, 0)], 0.5);

        let isolated = Hypergraph::new(4, vec![vec![0, 1, 2]]).unwrap();
        let s = Sheaf::trivial(&isolated);
        let n = Normalizer::new(&isolated, &s, NormMode::Sheaf, NormStyle::Symmetric, 1e-6).unwrap();
        assert_eq!(n.d_blocks[3][(0, 0)], 1e-6);
        let n = Normalizer::new(&isolated, &s, NormMode::Degree, NormStyle::Symmetric, 1e-6).unwrap();
        assert_eq!(n.d_blocks[3][(0, 0)], 1e-6);
        assert!(matches!(
            Normalizer::new(&isolated, &s, NormMode::Sheaf, NormStyle::Symmetric, 0.0),
            Err(Error::SingularBlock { node: 3, .. })
        ));
    }

    #[test]
    fn singular_general_block_is_detected() {
        let h = Hypergraph::new(2, vec![vec![0, 1]]).unwrap();
        // rank-one maps leave D_v singular without regularization
        let s = Sheaf::new(2, MapKind::General, vec![vec![1.0, 0.0, 0.0, 0.0]; 2]).unwrap();
        assert!(matches!(
            Normalizer::new(&h, &s, NormMode::Sheaf, NormStyle::Symmetric, 0.0),
            Err(Error::SingularBlock { .. })
        ));
        assert!(Normalizer::new(&h, &s, NormMode::Sheaf, NormStyle::Symmetric, 1e-6).is_ok());
    }

    #[test]
    fn normalization_examples() {
        let h = h3();
        let triv = Sheaf::trivial(&h);
        let l = linear_laplacian(&h, &triv).unwrap();
        let sym = Normalizer::new(&h, &triv, NormMode::Sheaf, NormStyle::Symmetric, 0.0).unwrap();
        let asym = Normalizer::new(&h, &triv, NormMode::Sheaf, NormStyle::Asymmetric, 0.0).unwrap();
        assert_eq!(normalize(&l, &sym).unwrap(), l);
        assert_eq!(normalize(&l, &asym).unwrap(), l);

        // a uniform scale of the maps is absorbed by D
        let doubled = triv.scaled(2.0);
        let l2 = linear_laplacian(&h, &doubled).unwrap();
        let n2 = Normalizer::new(&h, &doubled, NormMode::Sheaf, NormStyle::Symmetric, 0.0).unwrap();
        assert!(close(&normalize(&l2, &n2).unwrap().to_dense(), &l.to_dense(), 1e-15));

        let wrong = Normalizer::identity(3, 2);
        assert!(matches!(normalize(&l, &wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn symmetric_normalization_is_exactly_block_symmetric() {
        let h = Hypergraph::new(5, vec![vec![0, 1, 2], vec![1, 3, 4], vec![0, 4]]).unwrap();
        let s = Sheaf::random(&h, 3, MapKind::General, 5).unwrap();
        let l = linear_laplacian(&h, &s).unwrap();
        assert!(l.is_block_symmetric());
        let n = Normalizer::new(&h, &s, NormMode::Sheaf, NormStyle::Symmetric, 0.0).unwrap();
        let delta = normalize(&l, &n).unwrap();
        assert!(delta.is_block_symmetric());
        assert_eq!(delta.to_dense().asymmetry().2, 0.0);
    }

    #[test]
    fn h3_discrepant_pairs() {
        let h = h3();
        let x = Mat::column(&[0.0, 1.0, 5.0]);
        let pairs = discrepant_pairs(&h, &Sheaf::trivial(&h), &x, None, 0).unwrap();
        assert_eq!((pairs[0].u, pairs[0].v), (0, 2));
        assert_eq!(pairs[0].mediators, vec![1]);
        assert_eq!(pairs[0].distance, 25.0);

        let edge = Hypergraph::new(3, vec![vec![0, 2]]).unwrap();
        let pairs = discrepant_pairs(&edge, &Sheaf::trivial(&edge), &x, None, 0).unwrap();
        assert_eq!((pairs[0].u, pairs[0].v), (0, 2));
        assert!(pairs[0].mediators.is_empty());
    }

    #[test]
    fn ties_are_seeded() {
        let h = Hypergraph::new(6, vec![vec![0, 1, 2, 3, 4, 5]]).unwrap();
        let s = Sheaf::trivial(&h);
        let x = Mat::filled(6, 2, 0.7);
        let a = discrepant_pairs(&h, &s, &x, None, 42).unwrap();
        let b = discrepant_pairs(&h, &s, &x, None, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].distance, 0.0);
        let picked: std::collections::BTreeSet<_> = (0..40)
            .map(|seed| {
                let p = &discrepant_pairs(&h, &s, &x, None, seed).unwrap()[0];
                (p.u, p.v)
            })
            .collect();
        assert!(picked.len() > 1, "tie-break never varies with the seed");
    }

    #[test]
    fn h3_nonlinear_laplacian() {
        let h = h3();
        let s = Sheaf::trivial(&h);
        let x = Mat::column(&[0.0, 1.0, 5.0]);
        let l = nonlinear_laplacian(&h, &s, &x, false, None, 0).unwrap();
        let y = l.apply(&x).unwrap();
        assert!(close(&y, &Mat::column(&[-5.0 / 3.0, 0.0, 5.0 / 3.0]), 1e-15));

        let lm = nonlinear_laplacian(&h, &s, &x, true, None, 0).unwrap();
        let y = lm.apply(&x).unwrap();
        assert!(close(&y, &Mat::column(&[-2.0, -1.0, 3.0]), 1e-14));
    }

    #[test]
    fn constants_are_in_the_kernel() {
        let h = Hypergraph::new(6, vec![vec![0, 1, 2, 3], vec![2, 4], vec![1, 3, 5]]).unwrap();
        let s = Sheaf::trivial(&h);
        let ones = Mat::filled(6, 1, 1.0);
        let l = linear_laplacian(&h, &s).unwrap();
        assert!(l.apply(&ones).unwrap().max_abs() <= 1e-12);
        let probe = Mat::column(&[0.3, -1.0, 2.0, 0.1, 0.9, -0.4]);
        let nl = nonlinear_laplacian(&h, &s, &probe, true, None, 1).unwrap();
        assert!(nl.apply(&ones).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn apply_examples() {
        let x = Mat::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0]]).unwrap();
        assert_eq!(BlockMatrix::identity(2, 2).apply(&x).unwrap(), x);
        assert_eq!(BlockMatrix::zeros(2, 2).apply(&x).unwrap(), Mat::zeros(4, 2));
        assert!(matches!(
            BlockMatrix::identity(3, 2).apply(&x),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn coordinate_export_is_sorted_and_sparse() {
        let h = Hypergraph::new(3, vec![vec![0, 1]]).unwrap();
        let l = linear_laplacian(&h, &Sheaf::trivial(&h)).unwrap();
        assert_eq!(l.to_coordinate_text(), "0 0 0.5\n0 1 -0.5\n1 0 -0.5\n1 1 0.5\n");
    }
}
