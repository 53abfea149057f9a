//! Reverse-mode differentiation over a fixed set of tensor operations.
//!
//! Every operation evaluates eagerly and records itself on the [`Tape`];
//! [`Tape::backward`] then walks the records in reverse.

use std::rc::Rc;

use crate::error::{shape_err, Error, Result};
use crate::hypergraph::Hypergraph;
use crate::laplacian::{
    laplacian_from_relations, linear_laplacian, normalize, BlockMatrix, NormMode, NormStyle,
    Normalizer, Relation,
};
use crate::linalg::Mat;
use crate::sheaf::{hyperedge_mean, materialize, materialize_backward, sigmoid, MapKind, Sheaf};
use crate::spectral;

const SINGULAR_THRESHOLD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Structure of a sheaf Laplacian application: the full hyperedge form when
/// `relations` is `None`, otherwise the listed pair relations.
#[derive(Clone, Debug)]
pub struct LapStructure {
    pub hypergraph: Rc<Hypergraph>,
    pub relations: Option<Rc<Vec<Relation>>>,
    pub style: NormStyle,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Mask(Var, Mat),
    Reshape(Var),
    KronApply {
        x: Var,
        w: Var,
    },
    HyperedgeMean {
        x: Var,
        h: Rc<Hypergraph>,
    },
    GatherConcat {
        x: Var,
        e: Var,
        h: Rc<Hypergraph>,
    },
    MaterializeMaps {
        p: Var,
        d: usize,
        kind: MapKind,
    },
    NormBlocks {
        maps: Var,
        h: Rc<Hypergraph>,
        power: f64,
        eigen: Vec<(Vec<f64>, Mat)>,
    },
    LapApply {
        maps: Var,
        norm: Var,
        z: Var,
        lap: LapStructure,
        unnormalized: BlockMatrix,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        probs: Mat,
    },
    SumSquares(Var),
    RowArgmax,
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; variables the loss does not reach have none.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// The gradient, or zeros shaped like `like` when the loss does not reach `v`.
    pub fn get_or_zeros(&self, v: Var, like: &Mat) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(like.rows(), like.cols()))
    }
}

/// Stacks per-incidence d×d maps into an `(k·d) × d` matrix.
pub fn stack_blocks(blocks: &[Mat], d: usize) -> Mat {
    let mut out = Mat::zeros(blocks.len() * d, d);
    for (i, b) in blocks.iter().enumerate() {
        out.set_row_block(i * d, b);
    }
    out
}

pub fn unstack_blocks(m: &Mat, d: usize) -> Vec<Mat> {
    (0..m.rows() / d).map(|i| m.row_block(i * d, d)).collect()
}

fn sheaf_from_maps(maps: &Mat, d: usize) -> Result<Sheaf> {
    let params = unstack_blocks(maps, d).into_iter().map(Mat::into_vec).collect();
    Sheaf::new(d, MapKind::General, params)
}

fn normalizer_from_blocks(blocks: Vec<Mat>, style: NormStyle) -> Normalizer {
    Normalizer {
        mode: NormMode::Sheaf,
        style,
        epsilon: 0.0,
        d_blocks: blocks.clone(),
        inv_sqrt_blocks: blocks.clone(),
        inv_blocks: blocks,
    }
}

fn block_diag(blocks: &[Mat], x: &Mat, transpose: bool) -> Result<Mat> {
    let d = blocks.first().map_or(0, Mat::rows);
    let mut out = Mat::zeros(x.rows(), x.cols());
    for (v, b) in blocks.iter().enumerate() {
        let xv = x.row_block(v * d, d);
        let y = if transpose { b.t_matmul(&xv)? } else { b.matmul(&xv)? };
        out.set_row_block(v * d, &y);
    }
    Ok(out)
}

/// `∂(gᵀ L(F) z)/∂F` for every incidence map, stacked like the maps.
fn laplacian_map_grad(lap: &LapStructure, maps: &[Mat], z: &Mat, g: &Mat, d: usize) -> Result<Mat> {
    let h = &lap.hypergraph;
    let mut grad = vec![Mat::zeros(d, d); maps.len()];
    let block = |m: &Mat, v: usize| m.row_block(v * d, d);
    match &lap.relations {
        None => {
            for (e, members) in h.hyperedges().iter().enumerate() {
                let delta = members.len();
                if delta < 2 {
                    continue;
                }
                let base = h.incidence_offset(e);
                let inv = 1.0 / delta as f64;
                let zs: Vec<Mat> = members.iter().map(|&v| block(z, v)).collect();
                let gs: Vec<Mat> = members.iter().map(|&v| block(g, v)).collect();
                let mut a = Vec::with_capacity(delta);
                let mut b = Vec::with_capacity(delta);
                let mut sum_a = Mat::zeros(d, z.cols());
                let mut sum_b = Mat::zeros(d, z.cols());
                for k in 0..delta {
                    let ak = maps[base + k].matmul(&zs[k])?;
                    let bk = maps[base + k].matmul(&gs[k])?;
                    sum_a.add_assign(&ak)?;
                    sum_b.add_assign(&bk)?;
                    a.push(ak);
                    b.push(bk);
                }
                for k in 0..delta {
                    let mut ra = a[k].clone();
                    ra.axpy(-inv, &sum_a)?;
                    let mut rb = b[k].clone();
                    rb.axpy(-inv, &sum_b)?;
                    let gk = &mut grad[base + k];
                    gk.add_assign(&ra.matmul_t(&gs[k])?)?;
                    gk.add_assign(&rb.matmul_t(&zs[k])?)?;
                }
            }
        }
        Some(rels) => {
            for r in rels.iter() {
                let (za, zb) = (block(z, r.a), block(z, r.b));
                let (ga, gb) = (block(g, r.a), block(g, r.b));
                let (fa, fb) = (&maps[r.inc_a], &maps[r.inc_b]);
                let da = fa.matmul(&za)?.sub(&fb.matmul(&zb)?)?;
                let db = fa.matmul(&ga)?.sub(&fb.matmul(&gb)?)?;
                let ta = da.matmul_t(&ga)?.add(&db.matmul_t(&za)?)?;
                let tb = da.matmul_t(&gb)?.add(&db.matmul_t(&zb)?)?;
                grad[r.inc_a].axpy(r.weight, &ta)?;
                grad[r.inc_b].axpy(-r.weight, &tb)?;
            }
        }
    }
    Ok(stack_blocks(&grad, d))
}

fn power_derivative_kernel(values: &[f64], power: f64) -> Mat {
    let n = values.len();
    let f = |l: f64| l.powf(power);
    let mut k = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let (li, lj) = (values[i], values[j]);
            k[(i, j)] = if (li - lj).abs() > 1e-10 * li.abs().max(1.0) {
                (f(li) - f(lj)) / (li - lj)
            } else {
                power * li.powf(power - 1.0)
            };
        }
    }
    k
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// Adds a `1 × c` bias row to every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return shape_err(format!("bias {:?} for rows of width {}", bv.shape(), xv.cols()));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.row(0)) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRowBias(x, bias)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).scale(s);
        self.push(v, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        self.push(v, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::tanh);
        self.push(v, Op::Tanh(x))
    }

    /// Elementwise product with a constant mask (inverted dropout).
    pub fn mask(&mut self, x: Var, mask: Mat) -> Result<Var> {
        let v = self.value(x).hadamard(&mask)?;
        Ok(self.push(v, Op::Mask(x, mask)))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let v = self.value(x).clone().reshape(rows, cols)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    /// `(I_n ⊗ W)·x` for an `(n·d) × f` signal and a d×d `W`.
    pub fn kron_apply(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let d = wv.rows();
        if !wv.is_square() || d == 0 || xv.rows() % d != 0 {
            return shape_err(format!("kron apply of {:?} to {:?}", wv.shape(), xv.shape()));
        }
        let blocks = vec![wv.clone(); xv.rows() / d];
        let out = block_diag(&blocks, xv, false)?;
        Ok(self.push(out, Op::KronApply { x, w }))
    }

    pub fn hyperedge_mean(&mut self, x: Var, h: Rc<Hypergraph>) -> Result<Var> {
        let v = hyperedge_mean(&h, self.value(x))?;
        Ok(self.push(v, Op::HyperedgeMean { x, h }))
    }

    /// One row `[x_v ‖ e_e]` per incidence in canonical order.
    pub fn gather_concat(&mut self, x: Var, e: Var, h: Rc<Hypergraph>) -> Result<Var> {
        let (xv, ev) = (self.value(x), self.value(e));
        if xv.rows() != h.num_nodes() || ev.rows() != h.num_hyperedges() {
            return shape_err("gather-concat inputs do not match the hypergraph");
        }
        let (cx, ce) = (xv.cols(), ev.cols());
        let mut out = Mat::zeros(h.num_incidences(), cx + ce);
        for (i, inc) in h.incidence_pairs().iter().enumerate() {
            let row = out.row_mut(i);
            row[..cx].copy_from_slice(xv.row(inc.node));
            row[cx..].copy_from_slice(ev.row(inc.edge));
        }
        Ok(self.push(out, Op::GatherConcat { x, e, h }))
    }

    /// Restriction maps from one parameter row per incidence, stacked `(k·d) × d`.
    pub fn materialize_maps(&mut self, p: Var, d: usize, kind: MapKind) -> Result<Var> {
        let pv = self.value(p);
        let maps: Vec<Mat> = (0..pv.rows())
            .map(|i| materialize(pv.row(i), d, kind))
            .collect::<Result<_>>()?;
        let out = stack_blocks(&maps, d);
        Ok(self.push(out, Op::MaterializeMaps { p, d, kind }))
    }

    /// Per-node `(Σ_{e∋v} FᵀF + εI)^power`, stacked `(n·d) × d`.
    pub fn norm_blocks(&mut self, maps: Var, h: Rc<Hypergraph>, epsilon: f64, power: f64) -> Result<Var> {
        let mv = self.value(maps);
        let d = mv.cols();
        if mv.rows() != h.num_incidences() * d {
            return shape_err("stacked maps do not match the hypergraph incidences");
        }
        let mut dv = vec![Mat::identity(d).scale(epsilon); h.num_nodes()];
        for (i, inc) in h.incidence_pairs().iter().enumerate() {
            let f = mv.row_block(i * d, d);
            dv[inc.node].add_assign(&f.t_matmul(&f)?)?;
        }
        let mut eigen = Vec::with_capacity(dv.len());
        let mut blocks = Vec::with_capacity(dv.len());
        for (v, b) in dv.iter().enumerate() {
            let (vals, vecs) = spectral::symmetric_eigen(b)?;
            if !(vals[0] >= SINGULAR_THRESHOLD) {
                return Err(Error::SingularBlock {
                    node: v,
                    eigenvalue: vals[0],
                });
            }
            blocks.push(spectral::spectral_map(&vals, &vecs, |l| l.powf(power)));
            eigen.push((vals, vecs));
        }
        let out = stack_blocks(&blocks, d);
        Ok(self.push(out, Op::NormBlocks { maps, h, power, eigen }))
    }

    /// Normalized sheaf Laplacian applied to `z`: `S·L·S·z` for the symmetric
    /// style and `B·L·z` for the asymmetric one, where `norm` stacks the
    /// per-node blocks `S` or `B`.
    pub fn lap_apply(&mut self, maps: Var, norm: Var, z: Var, lap: LapStructure) -> Result<Var> {
        let d = self.value(maps).cols();
        let sheaf = sheaf_from_maps(self.value(maps), d)?;
        let h = &lap.hypergraph;
        let unnormalized = match &lap.relations {
            None => linear_laplacian(h, &sheaf)?,
            Some(rels) => laplacian_from_relations(h, &sheaf, rels)?,
        };
        let blocks = unstack_blocks(self.value(norm), d);
        if blocks.len() != h.num_nodes() {
            return shape_err("normalization blocks do not match the node count");
        }
        let delta = normalize(&unnormalized, &normalizer_from_blocks(blocks, lap.style))?;
        let out = delta.apply(self.value(z))?;
        Ok(self.push(
            out,
            Op::LapApply {
                maps,
                norm,
                z,
                lap,
                unnormalized,
            },
        ))
    }

    /// Mean softmax cross-entropy over `(row, class)` targets; a 1×1 result.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Vec<(usize, usize)>) -> Result<Var> {
        let lv = self.value(logits);
        if targets.is_empty() {
            return shape_err("cross-entropy needs at least one target");
        }
        let mut probs = Mat::zeros(lv.rows(), lv.cols());
        for r in 0..lv.rows() {
            let row = lv.row(r);
            let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&x| (x - top).exp()).sum();
            for (p, &x) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (x - top).exp() / z;
            }
        }
        let mut loss = 0.0;
        for &(r, c) in &targets {
            if r >= lv.rows() || c >= lv.cols() {
                return shape_err(format!("target ({r}, {c}) outside logits {:?}", lv.shape()));
            }
            let row = lv.row(r);
            let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = top + row.iter().map(|&x| (x - top).exp()).sum::<f64>().ln();
            loss += lse - row[c];
        }
        loss /= targets.len() as f64;
        Ok(self.push(
            Mat::filled(1, 1, loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            },
        ))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let v = self.value(x).frobenius_sq();
        self.push(Mat::filled(1, 1, v), Op::SumSquares(x))
    }

    /// Column index of each row's maximum, as an n×1 matrix. Not differentiable.
    pub fn row_argmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let idx: Vec<f64> = (0..xv.rows())
            .map(|r| {
                let row = xv.row(r);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best as f64
            })
            .collect();
        self.push(Mat::column(&idx), Op::RowArgmax)
    }

    /// Sign pattern of every ReLU input, for detecting kinks crossed by a
    /// perturbation.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                out.extend(self.value(x).as_slice().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    /// Gradients of the 1×1 `loss` with respect to every variable.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).shape() != (1, 1) {
            return shape_err(format!("loss must be 1x1, got {:?}", self.value(loss).shape()));
        }
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Mat::filled(1, 1, 1.0));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) -> Result<()> {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b))?;
                    let gb = self.value(*a).t_matmul(&g)?;
                    acc(&mut grads, *a, ga)?;
                    acc(&mut grads, *b, gb)?;
                }
                Op::AddRowBias(x, b) => {
                    let mut gb = Mat::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &v) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *b, gb)?;
                    acc(&mut grads, *x, g.clone())?;
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone())?;
                    acc(&mut grads, *b, g.clone())?;
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.scale(-1.0))?;
                    acc(&mut grads, *a, g.clone())?;
                }
                Op::Scale(x, s) => acc(&mut grads, *x, g.scale(*s))?,
                Op::Relu(x) => {
                    let gx = g.zip_map(self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })?;
                    acc(&mut grads, *x, gx)?;
                }
                Op::Sigmoid(x) => {
                    let gx = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y))?;
                    acc(&mut grads, *x, gx)?;
                }
                Op::Tanh(x) => {
                    let gx = g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y))?;
                    acc(&mut grads, *x, gx)?;
                }
                Op::Mask(x, mask) => acc(&mut grads, *x, g.hadamard(mask)?)?,
                Op::Reshape(x) => {
                    let (r, c) = self.value(*x).shape();
                    acc(&mut grads, *x, g.clone().reshape(r, c)?)?;
                }
                Op::KronApply { x, w } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let d = wv.rows();
                    let n = xv.rows() / d;
                    let gx = block_diag(&vec![wv.clone(); n], &g, true)?;
                    let mut gw = Mat::zeros(d, d);
                    for v in 0..n {
                        gw.add_assign(&g.row_block(v * d, d).matmul_t(&xv.row_block(v * d, d))?)?;
                    }
                    acc(&mut grads, *x, gx)?;
                    acc(&mut grads, *w, gw)?;
                }
                Op::HyperedgeMean { x, h } => {
                    let xv = self.value(*x);
                    let mut gx = Mat::zeros(xv.rows(), xv.cols());
                    for (e, members) in h.hyperedges().iter().enumerate() {
                        let inv = 1.0 / members.len() as f64;
                        for &v in members {
                            for (o, &ge) in gx.row_mut(v).iter_mut().zip(g.row(e)) {
                                *o += ge * inv;
                            }
                        }
                    }
                    acc(&mut grads, *x, gx)?;
                }
                Op::GatherConcat { x, e, h } => {
                    let (xv, ev) = (self.value(*x), self.value(*e));
                    let cx = xv.cols();
                    let mut gx = Mat::zeros(xv.rows(), cx);
                    let mut ge = Mat::zeros(ev.rows(), ev.cols());
                    for (i, inc) in h.incidence_pairs().iter().enumerate() {
                        let row = g.row(i);
                        for (o, &v) in gx.row_mut(inc.node).iter_mut().zip(&row[..cx]) {
                            *o += v;
                        }
                        for (o, &v) in ge.row_mut(inc.edge).iter_mut().zip(&row[cx..]) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *x, gx)?;
                    acc(&mut grads, *e, ge)?;
                }
                Op::MaterializeMaps { p, d, kind } => {
                    let pv = self.value(*p);
                    let mut gp = Mat::zeros(pv.rows(), pv.cols());
                    for r in 0..pv.rows() {
                        let gm = g.row_block(r * d, *d);
                        let row = materialize_backward(pv.row(r), *d, *kind, &gm);
                        gp.row_mut(r).copy_from_slice(&row);
                    }
                    acc(&mut grads, *p, gp)?;
                }
                Op::NormBlocks { maps, h, power, eigen } => {
                    let mv = self.value(*maps);
                    let d = mv.cols();
                    // Daleckii–Krein: dY = Q (K ∘ Qᵀ dD Q) Qᵀ
                    let mut gd = Vec::with_capacity(eigen.len());
                    for (v, (vals, q)) in eigen.iter().enumerate() {
                        let gv = g.row_block(v * d, d);
                        let sym = gv.add(&gv.transpose())?.scale(0.5);
                        let inner = q.t_matmul(&sym)?.matmul(q)?;
                        let k = power_derivative_kernel(vals, *power);
                        let gd_v = q.matmul(&inner.hadamard(&k)?)?.matmul_t(q)?;
                        gd.push(gd_v);
                    }
                    let mut gm = Mat::zeros(mv.rows(), d);
                    for (i, inc) in h.incidence_pairs().iter().enumerate() {
                        let f = mv.row_block(i * d, d);
                        let gsym = gd[inc.node].add(&gd[inc.node].transpose())?;
                        gm.set_row_block(i * d, &f.matmul(&gsym)?);
                    }
                    acc(&mut grads, *maps, gm)?;
                }
                Op::LapApply {
                    maps,
                    norm,
                    z,
                    lap,
                    unnormalized,
                } => {
                    let mv = self.value(*maps);
                    let d = mv.cols();
                    let map_list = unstack_blocks(mv, d);
                    let blocks = unstack_blocks(self.value(*norm), d);
                    let zv = self.value(*z);
                    let n = blocks.len();
                    let mut gn = vec![Mat::zeros(d, d); n];
                    let (gz, gmaps) = match lap.style {
                        NormStyle::Symmetric => {
                            let w = block_diag(&blocks, zv, false)?;
                            let u = unnormalized.apply(&w)?;
                            let gu = block_diag(&blocks, &g, true)?;
                            let gw = unnormalized.apply(&gu)?;
                            for v in 0..n {
                                gn[v].add_assign(&g.row_block(v * d, d).matmul_t(&u.row_block(v * d, d))?)?;
                                gn[v].add_assign(&gw.row_block(v * d, d).matmul_t(&zv.row_block(v * d, d))?)?;
                            }
                            let gz = block_diag(&blocks, &gw, true)?;
                            (gz, laplacian_map_grad(lap, &map_list, &w, &gu, d)?)
                        }
                        NormStyle::Asymmetric => {
                            let u = unnormalized.apply(zv)?;
                            let gu = block_diag(&blocks, &g, true)?;
                            for v in 0..n {
                                gn[v].add_assign(&g.row_block(v * d, d).matmul_t(&u.row_block(v * d, d))?)?;
                            }
                            let gz = unnormalized.apply(&gu)?;
                            (gz, laplacian_map_grad(lap, &map_list, zv, &gu, d)?)
                        }
                    };
                    acc(&mut grads, *z, gz)?;
                    acc(&mut grads, *maps, gmaps)?;
                    acc(&mut grads, *norm, stack_blocks(&gn, d))?;
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let scale = g[(0, 0)] / targets.len() as f64;
                    let mut gl = Mat::zeros(probs.rows(), probs.cols());
                    for &(r, c) in targets {
                        for (o, &p) in gl.row_mut(r).iter_mut().zip(probs.row(r)) {
                            *o += scale * p;
                        }
                        gl[(r, c)] -= scale;
                    }
                    acc(&mut grads, *logits, gl)?;
                }
                Op::SumSquares(x) => {
                    let s = 2.0 * g[(0, 0)];
                    acc(&mut grads, *x, self.value(*x).scale(s))?;
                }
                Op::RowArgmax => {
                    return Err(Error::UnsupportedOp(
                        "row argmax has no derivative".into(),
                    ));
                }
            }
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::laplacian::{discrepant_pairs, relations};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central differences of `f` at every coordinate of `x`.
    fn numeric(x: &Mat, f: &dyn Fn(&Mat) -> f64) -> Mat {
        let h = 1e-6;
        let mut out = Mat::zeros(x.rows(), x.cols());
        let mut p = x.clone();
        for i in 0..x.as_slice().len() {
            let o = p.as_slice()[i];
            p.as_mut_slice()[i] = o + h;
            let up = f(&p);
            p.as_mut_slice()[i] = o - h;
            let down = f(&p);
            p.as_mut_slice()[i] = o;
            out.as_mut_slice()[i] = (up - down) / (2.0 * h);
        }
        out
    }

    fn assert_close(a: &Mat, b: &Mat, tol: f64) {
        let scale = a.max_abs().max(b.max_abs()).max(1.0);
        let gap = a.sub(b).unwrap().max_abs();
        assert!(gap <= tol * scale, "gap {gap}\n{a:?}\n{b:?}");
    }

    #[test]
    fn quadratic_loss_gradient() {
        // ½‖Wx‖² has gradient W·x·xᵀ
        let w = Mat::from_rows(&[[1.0, 2.0], [0.5, -1.0]]).unwrap();
        let x = Mat::column(&[3.0, -1.0]);
        let mut t = Tape::new();
        let wv = t.leaf(w.clone());
        let xv = t.leaf(x.clone());
        let y = t.matmul(wv, xv).unwrap();
        let s = t.sum_squares(y);
        let loss = t.scale(s, 0.5);
        let g = t.backward(loss).unwrap();
        let want = w.matmul(&x).unwrap().matmul_t(&x).unwrap();
        assert_eq!(g.get(wv).unwrap(), &want);
    }

    #[test]
    fn relu_blocks_negative_units() {
        let mut t = Tape::new();
        let x = t.leaf(Mat::column(&[-1.0, 2.0]));
        let r = t.relu(x);
        let loss = t.sum_squares(r);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &Mat::column(&[0.0, 4.0]));
    }

    #[test]
    fn argmax_is_not_differentiable() {
        let mut t = Tape::new();
        let x = t.leaf(Mat::from_rows(&[[1.0, 3.0], [2.0, 0.0]]).unwrap());
        let a = t.row_argmax(x);
        assert_eq!(t.value(a), &Mat::column(&[1.0, 0.0]));
        let loss = t.sum_squares(a);
        assert!(matches!(t.backward(loss), Err(Error::UnsupportedOp(_))));
    }

    #[test]
    fn elementwise_and_structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = Rc::new(Hypergraph::new(4, vec![vec![0, 1, 2], vec![1, 3]]).unwrap());
        let x0 = random_mat(&mut rng, 4, 3);
        let w0 = random_mat(&mut rng, 3, 3);
        let b0 = random_mat(&mut rng, 1, 3);
        let mask = Mat::from_vec(5, 6, (0..30).map(|i| (i % 3) as f64 * 0.5).collect()).unwrap();
        let targets = vec![(0, 1), (2, 4), (4, 0)];
        let build = |t: &mut Tape, x: &Mat, w: &Mat, b: &Mat| -> (Var, Var, Var, Var) {
            let xv = t.leaf(x.clone());
            let wv = t.leaf(w.clone());
            let bv = t.leaf(b.clone());
            let y = t.matmul(xv, wv).unwrap();
            let y = t.add_row_bias(y, bv).unwrap();
            let s = t.sigmoid(y);
            let th = t.tanh(y);
            let y = t.sub(s, th).unwrap();
            let y = t.add(y, xv).unwrap();
            let e = t.hyperedge_mean(y, h.clone()).unwrap();
            let c = t.gather_concat(y, e, h.clone()).unwrap();
            let c = t.mask(c, mask.clone()).unwrap();
            let c = t.scale(c, 1.7);
            let loss = t.softmax_cross_entropy(c, targets.clone()).unwrap();
            (xv, wv, bv, loss)
        };
        let mut t = Tape::new();
        let (xv, wv, bv, loss) = build(&mut t, &x0, &w0, &b0);
        let g = t.backward(loss).unwrap();
        let eval = |x: &Mat, w: &Mat, b: &Mat| {
            let mut t = Tape::new();
            let (_, _, _, l) = build(&mut t, x, w, b);
            t.value(l)[(0, 0)]
        };
        assert_close(g.get(xv).unwrap(), &numeric(&x0, &|x| eval(x, &w0, &b0)), 1e-7);
        assert_close(g.get(wv).unwrap(), &numeric(&w0, &|w| eval(&x0, w, &b0)), 1e-7);
        assert_close(g.get(bv).unwrap(), &numeric(&b0, &|b| eval(&x0, &w0, b)), 1e-7);
    }

    #[test]
    fn kron_and_reshape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = random_mat(&mut rng, 6, 2);
        let w0 = random_mat(&mut rng, 2, 2);
        let f = |x: &Mat, w: &Mat| {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let wv = t.leaf(w.clone());
            let y = t.kron_apply(xv, wv).unwrap();
            let y = t.reshape(y, 3, 4).unwrap();
            let y = t.tanh(y);
            let l = t.sum_squares(y);
            (t, xv, wv, l)
        };
        let (t, xv, wv, l) = f(&x0, &w0);
        let g = t.backward(l).unwrap();
        let val = |x: &Mat, w: &Mat| {
            let (t, _, _, l) = f(x, w);
            t.value(l)[(0, 0)]
        };
        assert_close(g.get(xv).unwrap(), &numeric(&x0, &|x| val(x, &w0)), 1e-7);
        assert_close(g.get(wv).unwrap(), &numeric(&w0, &|w| val(&x0, w)), 1e-7);
    }

    fn laplacian_case(kind: MapKind, style: NormStyle, use_relations: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = Rc::new(Hypergraph::new(5, vec![vec![0, 1, 2, 3], vec![1, 4], vec![0, 2, 4]]).unwrap());
        let d = 2;
        let width = kind.param_width(d);
        let p0 = random_mat(&mut rng, h.num_incidences(), width);
        let z0 = random_mat(&mut rng, 5 * d, 3);
        let rels = if use_relations {
            let s = Sheaf::new(d, kind, p0.to_rows()).unwrap();
            let pairs = discrepant_pairs(&h, &s, &z0, None, 0).unwrap();
            Some(Rc::new(relations(&h, &pairs, true)))
        } else {
            None
        };
        let power = match style {
            NormStyle::Symmetric => -0.5,
            NormStyle::Asymmetric => -1.0,
        };
        let run = |p: &Mat, z: &Mat| {
            let mut t = Tape::new();
            let pv = t.leaf(p.clone());
            let zv = t.leaf(z.clone());
            let maps = t.materialize_maps(pv, d, kind).unwrap();
            let nb = t.norm_blocks(maps, h.clone(), 0.1, power).unwrap();
            let lap = LapStructure {
                hypergraph: h.clone(),
                relations: rels.clone(),
                style,
            };
            let y = t.lap_apply(maps, nb, zv, lap).unwrap();
            let y = t.tanh(y);
            let l = t.sum_squares(y);
            (t, pv, zv, l)
        };
        let (t, pv, zv, l) = run(&p0, &z0);
        let g = t.backward(l).unwrap();
        let val = |p: &Mat, z: &Mat| {
            let (t, _, _, l) = run(p, z);
            t.value(l)[(0, 0)]
        };
        assert_close(g.get(zv).unwrap(), &numeric(&z0, &|z| val(&p0, z)), 1e-6);
        assert_close(g.get(pv).unwrap(), &numeric(&p0, &|p| val(p, &z0)), 1e-6);
    }

    #[test]
    fn linear_laplacian_gradients() {
        laplacian_case(MapKind::General, NormStyle::Symmetric, false);
        laplacian_case(MapKind::Diagonal, NormStyle::Asymmetric, false);
        laplacian_case(MapKind::LowRank(1), NormStyle::Symmetric, false);
    }

    #[test]
    fn relation_laplacian_gradients() {
        laplacian_case(MapKind::General, NormStyle::Symmetric, true);
        laplacian_case(MapKind::Diagonal, NormStyle::Asymmetric, true);
    }

    #[test]
    fn lap_apply_matches_library_operator() {
        let h = Rc::new(Hypergraph::new(4, vec![vec![0, 1, 2], vec![2, 3]]).unwrap());
        let s = Sheaf::random(&h, 2, MapKind::General, 8).unwrap();
        let norm = Normalizer::new(&h, &s, NormMode::Degree, NormStyle::Symmetric, 0.0).unwrap();
        let z = Mat::from_vec(8, 1, (0..8).map(f64::from).collect()).unwrap();
        let want = normalize(&linear_laplacian(&h, &s).unwrap(), &norm).unwrap().apply(&z).unwrap();
        let mut t = Tape::new();
        let maps = t.leaf(stack_blocks(&s.maps(), 2));
        let nb = t.leaf(stack_blocks(&norm.inv_sqrt_blocks, 2));
        let zv = t.leaf(z);
        let lap = LapStructure {
            hypergraph: h.clone(),
            relations: None,
            style: NormStyle::Symmetric,
        };
        let y = t.lap_apply(maps, nb, zv, lap).unwrap();
        assert_eq!(t.value(y), &want);
    }
}
