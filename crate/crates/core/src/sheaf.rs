//! Cellular sheaves on hypergraphs: one d×d restriction map per incidence.
//!
//! Restriction maps are stored as flat parameter vectors in canonical incidence
//! order and materialized on demand according to their [`MapKind`]:
//!
//! * `Diagonal` — `d` entries placed on the diagonal,
//! * `LowRank(r)` — `2·d·r + d` entries packed as `A` (d×r, row-major), then
//!   `B` (r×d, row-major), then `c`; the map is `A·B + diag(c)`,
//! * `General` — `d²` entries reshaped row-major.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::hypergraph::Hypergraph;
use crate::linalg::{Linear, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MapKind {
    Diagonal,
    LowRank(usize),
    General,
}

impl MapKind {
    pub fn param_width(self, d: usize) -> usize {
        match self {
            MapKind::Diagonal => d,
            MapKind::LowRank(r) => 2 * d * r + d,
            MapKind::General => d * d,
        }
    }

    pub fn validate(self, d: usize) -> Result<()> {
        if d == 0 {
            return Err(Error::Config("stalk dimension must be at least 1".into()));
        }
        if let MapKind::LowRank(r) = self {
            if r == 0 || r > d {
                return Err(Error::Config(format!(
                    "low-rank maps need 1 <= rank <= d, got rank {r} with d = {d}"
                )));
            }
        }
        Ok(())
    }

    pub fn name(self) -> &'static str {
        match self {
            MapKind::Diagonal => "diagonal",
            MapKind::LowRank(_) => "low_rank",
            MapKind::General => "general",
        }
    }
}

pub fn materialize(params: &[f64], d: usize, kind: MapKind) -> Result<Mat> {
    let expected = kind.param_width(d);
    if params.len() != expected {
        return Err(Error::Width {
            expected,
            got: params.len(),
        });
    }
    Ok(match kind {
        MapKind::Diagonal => Mat::diag(params),
        MapKind::General => Mat::from_vec(d, d, params.to_vec())?,
        MapKind::LowRank(r) => {
            let a = &params[..d * r];
            let b = &params[d * r..2 * d * r];
            let c = &params[2 * d * r..];
            let mut m = Mat::diag(c);
            for i in 0..d {
                for j in 0..d {
                    let mut acc = 0.0;
                    for k in 0..r {
                        acc += a[i * r + k] * b[k * d + j];
                    }
                    m[(i, j)] += acc;
                }
            }
            m
        }
    })
}

/// Pulls a gradient with respect to a materialized map back onto its parameters.
pub fn materialize_backward(params: &[f64], d: usize, kind: MapKind, grad_map: &Mat) -> Vec<f64> {
    match kind {
        MapKind::Diagonal => (0..d).map(|i| grad_map[(i, i)]).collect(),
        MapKind::General => grad_map.as_slice().to_vec(),
        MapKind::LowRank(r) => {
            let a = &params[..d * r];
            let b = &params[d * r..2 * d * r];
            let mut g = vec![0.0; 2 * d * r + d];
            // M_ij = Σ_k A_ik B_kj + δ_ij c_i
            for i in 0..d {
                for j in 0..d {
                    let gm = grad_map[(i, j)];
                    for k in 0..r {
                        g[i * r + k] += gm * b[k * d + j];
                        g[d * r + k * d + j] += gm * a[i * r + k];
                    }
                }
                g[2 * d * r + i] = grad_map[(i, i)];
            }
            g
        }
    }
}

/// A sheaf hosted on a hypergraph: stalks `ℝ^d` and one restriction map per incidence.
#[derive(Clone, Debug, PartialEq)]
pub struct Sheaf {
    stalk_dim: usize,
    kind: MapKind,
    params: Vec<Vec<f64>>,
}

impl Sheaf {
    pub fn new(stalk_dim: usize, kind: MapKind, params: Vec<Vec<f64>>) -> Result<Self> {
        kind.validate(stalk_dim)?;
        let width = kind.param_width(stalk_dim);
        for p in &params {
            if p.len() != width {
                return Err(Error::Width {
                    expected: width,
                    got: p.len(),
                });
            }
        }
        Ok(Sheaf {
            stalk_dim,
            kind,
            params,
        })
    }

    /// `d = 1`, every restriction map the identity.
    pub fn trivial(h: &Hypergraph) -> Self {
        Sheaf {
            stalk_dim: 1,
            kind: MapKind::Diagonal,
            params: vec![vec![1.0]; h.num_incidences()],
        }
    }

    /// Identity restriction maps on `ℝ^d`.
    pub fn identity(h: &Hypergraph, d: usize) -> Self {
        Sheaf {
            stalk_dim: d,
            kind: MapKind::Diagonal,
            params: vec![vec![1.0; d]; h.num_incidences()],
        }
    }

    /// Parameters drawn i.i.d. uniform on [−1, 1] from a seeded generator.
    pub fn random(h: &Hypergraph, d: usize, kind: MapKind, seed: u64) -> Result<Self> {
        kind.validate(d)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let width = kind.param_width(d);
        let params = (0..h.num_incidences())
            .map(|_| (0..width).map(|_| rng.random_range(-1.0..=1.0)).collect())
            .collect();
        Ok(Sheaf {
            stalk_dim: d,
            kind,
            params,
        })
    }

    #[inline]
    pub fn stalk_dim(&self) -> usize {
        self.stalk_dim
    }

    pub fn kind(&self) -> MapKind {
        self.kind
    }

    pub fn params(&self) -> &[Vec<f64>] {
        &self.params
    }

    pub fn num_maps(&self) -> usize {
        self.params.len()
    }

    pub fn map(&self, incidence: usize) -> Mat {
        materialize(&self.params[incidence], self.stalk_dim, self.kind)
            .expect("widths are validated at construction")
    }

    /// All restriction maps in canonical incidence order.
    pub fn maps(&self) -> Vec<Mat> {
        (0..self.params.len()).map(|i| self.map(i)).collect()
    }

    pub fn check_host(&self, h: &Hypergraph) -> Result<()> {
        if self.params.len() != h.num_incidences() {
            return Err(Error::HostMismatch(format!(
                "sheaf has {} restriction maps, hypergraph has {} incidences",
                self.params.len(),
                h.num_incidences()
            )));
        }
        Ok(())
    }

    /// Same maps with every parameter multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        for p in &mut out.params {
            for v in p.iter_mut() {
                *v *= s;
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        let file = SheafFile {
            stalk_dim: self.stalk_dim,
            kind: self.kind.name().to_string(),
            rank: match self.kind {
                MapKind::LowRank(r) => Some(r),
                _ => None,
            },
            params: self.params.clone(),
        };
        serde_json::to_string(&file).expect("sheaf serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SheafFile = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let kind = match (file.kind.as_str(), file.rank) {
            ("diagonal", None) => MapKind::Diagonal,
            ("general", None) => MapKind::General,
            ("low_rank", Some(r)) => MapKind::LowRank(r),
            (k, r) => {
                return Err(Error::Parse(format!("unknown map kind {k:?} with rank {r:?}")))
            }
        };
        Sheaf::new(file.stalk_dim, kind, file.params)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SheafFile {
    stalk_dim: usize,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rank: Option<usize>,
    params: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Squash {
    Sigmoid,
    Tanh,
}

impl Squash {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Squash::Sigmoid => sigmoid(v),
            Squash::Tanh => v.tanh(),
        }
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Where hyperedge features come from when the data provides none.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeFeatureMode {
    /// mean of the node features fed to the predictor
    MeanOfInputs,
    /// mean of the layer's hidden node representation `(I ⊗ W1)·X·W2`
    MeanOfHidden,
    /// mean of a learned perceptron `ReLU(x·W + b)` of the node features
    MeanOfTransformed,
}

/// Row-wise mean of `x` over the members of each hyperedge (m × f).
pub fn hyperedge_mean(h: &Hypergraph, x: &Mat) -> Result<Mat> {
    if x.rows() != h.num_nodes() {
        return shape_err(format!(
            "node matrix has {} rows, hypergraph has {} nodes",
            x.rows(),
            h.num_nodes()
        ));
    }
    let mut out = Mat::zeros(h.num_hyperedges(), x.cols());
    for (e, members) in h.hyperedges().iter().enumerate() {
        let inv = 1.0 / members.len() as f64;
        let row = out.row_mut(e);
        for &v in members {
            for (o, &xv) in row.iter_mut().zip(x.row(v)) {
                *o += xv;
            }
        }
        for o in row.iter_mut() {
            *o *= inv;
        }
    }
    Ok(out)
}

const MAP_START: f64 = 0.9;

/// Positions of the parameters that feed the diagonal of a materialized map.
fn diagonal_params(kind: MapKind, d: usize) -> Vec<usize> {
    match kind {
        MapKind::Diagonal => (0..d).collect(),
        MapKind::General => (0..d).map(|i| i * d + i).collect(),
        MapKind::LowRank(r) => (2 * d * r..2 * d * r + d).collect(),
    }
}

/// One-hidden-layer perceptron predicting restriction-map parameters from
/// `x_v ‖ h_e` for every incidence.
#[derive(Clone, Debug, PartialEq)]
pub struct SheafPredictor {
    pub stalk_dim: usize,
    pub kind: MapKind,
    pub squash: Squash,
    pub edge_mode: EdgeFeatureMode,
    /// `2·f_h → width`, followed by ReLU
    pub hidden: Linear,
    /// `width → width`, followed by the squash
    pub output: Linear,
    /// `f_h → f_h` node transform for [`EdgeFeatureMode::MeanOfTransformed`]
    pub transform: Linear,
}

impl SheafPredictor {
    pub fn zeros(
        feature_dim: usize,
        stalk_dim: usize,
        kind: MapKind,
        squash: Squash,
        edge_mode: EdgeFeatureMode,
    ) -> Result<Self> {
        kind.validate(stalk_dim)?;
        let width = kind.param_width(stalk_dim);
        Ok(SheafPredictor {
            stalk_dim,
            kind,
            squash,
            edge_mode,
            hidden: Linear::zeros(2 * feature_dim, width),
            output: Linear::zeros(width, width),
            transform: Linear::zeros(feature_dim, feature_dim),
        })
    }

    /// Glorot-uniform weights from a seeded generator. Output biases start the
    /// maps near `0.9·I`; all other biases are zero.
    pub fn random(
        feature_dim: usize,
        stalk_dim: usize,
        kind: MapKind,
        squash: Squash,
        edge_mode: EdgeFeatureMode,
        seed: u64,
    ) -> Result<Self> {
        let mut p = Self::zeros(feature_dim, stalk_dim, kind, squash, edge_mode)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for lin in [&mut p.hidden, &mut p.output, &mut p.transform] {
            glorot_fill(&mut lin.weight, &mut rng);
        }
        let start = match squash {
            Squash::Sigmoid => (MAP_START / (1.0 - MAP_START)).ln(),
            Squash::Tanh => MAP_START.atanh(),
        };
        for i in diagonal_params(kind, stalk_dim) {
            p.output.bias[i] = start;
        }
        Ok(p)
    }

    pub fn feature_dim(&self) -> usize {
        self.transform.input_dim()
    }

    pub fn param_width(&self) -> usize {
        self.kind.param_width(self.stalk_dim)
    }

    /// Hyperedge features for the configured mode. `hidden` is the layer's
    /// hidden representation and is required for `MeanOfHidden`.
    pub fn edge_features(&self, h: &Hypergraph, x: &Mat, hidden: Option<&Mat>) -> Result<Mat> {
        match self.edge_mode {
            EdgeFeatureMode::MeanOfInputs => hyperedge_mean(h, x),
            EdgeFeatureMode::MeanOfHidden => match hidden {
                Some(hid) => hyperedge_mean(h, hid),
                None => shape_err("mean-of-hidden edge features need the hidden representation"),
            },
            EdgeFeatureMode::MeanOfTransformed => {
                let t = self.transform.forward(x)?.map(|v| v.max(0.0));
                hyperedge_mean(h, &t)
            }
        }
    }

    pub fn predict(&self, h: &Hypergraph, x: &Mat, hidden: Option<&Mat>) -> Result<Sheaf> {
        let fh = self.feature_dim();
        if x.rows() != h.num_nodes() || x.cols() != fh {
            return shape_err(format!(
                "predictor expects {}x{fh} node features, got {}x{}",
                h.num_nodes(),
                x.rows(),
                x.cols()
            ));
        }
        if let Some(hid) = hidden {
            if hid.shape() != x.shape() {
                return shape_err("hidden representation must match node feature shape");
            }
        }
        let edges = self.edge_features(h, x, hidden)?;
        let mut inputs = Mat::zeros(h.num_incidences(), 2 * fh);
        for inc in h.incidence_pairs().iter().enumerate() {
            let (i, inc) = inc;
            let row = inputs.row_mut(i);
            row[..fh].copy_from_slice(x.row(inc.node));
            row[fh..].copy_from_slice(edges.row(inc.edge));
        }
        let hid = self.hidden.forward(&inputs)?.map(|v| v.max(0.0));
        let out = self.output.forward(&hid)?.map(|v| self.squash.apply(v));
        Sheaf::new(self.stalk_dim, self.kind, out.to_rows())
    }
}

pub(crate) fn glorot_fill(w: &mut Mat, rng: &mut impl Rng) {
    let bound = (6.0 / (w.rows() + w.cols()).max(1) as f64).sqrt();
    for v in w.as_mut_slice() {
        *v = rng.random_range(-bound..=bound);
    }
}

/// Predicts a sheaf for `h` from node features, checking that the predictor was
/// built for the requested stalk dimension and map kind.
pub fn predict_sheaf(
    h: &Hypergraph,
    x: &Mat,
    predictor: &SheafPredictor,
    d: usize,
    kind: MapKind,
) -> Result<Sheaf> {
    if predictor.stalk_dim != d || predictor.kind != kind {
        return shape_err(format!(
            "predictor built for d = {} / {:?}, requested d = {d} / {kind:?}",
            predictor.stalk_dim, predictor.kind
        ));
    }
    predictor.predict(h, x, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn h3() -> Hypergraph {
        Hypergraph::new(3, vec![vec![0, 1, 2]]).unwrap()
    }

    #[test]
    fn trivial_sheaf_is_unit_maps() {
        let s = Sheaf::trivial(&h3());
        assert_eq!(s.num_maps(), 3);
        for m in s.maps() {
            assert_eq!(m, Mat::identity(1));
        }
        let empty = Hypergraph::new(2, vec![]).unwrap();
        assert!(Sheaf::trivial(&empty).params().is_empty());
    }

    #[test]
    fn random_sheaf_is_deterministic_with_expected_widths() {
        let h = h3();
        let a = Sheaf::random(&h, 2, MapKind::Diagonal, 7).unwrap();
        let b = Sheaf::random(&h, 2, MapKind::Diagonal, 7).unwrap();
        assert_eq!(a, b);
        let g = Sheaf::random(&h, 2, MapKind::General, 7).unwrap();
        assert!(g.params().iter().all(|p| p.len() == 4));
        assert_eq!(g.num_maps(), 3);
        let lr = Sheaf::random(&h, 3, MapKind::LowRank(1), 1).unwrap();
        assert!(lr.params().iter().all(|p| p.len() == 9));
        assert!(lr.params().iter().flatten().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn materialize_each_kind() {
        assert_eq!(
            materialize(&[2.0, 3.0], 2, MapKind::Diagonal).unwrap(),
            Mat::from_rows(&[[2.0, 0.0], [0.0, 3.0]]).unwrap()
        );
        // A = [1, 0]ᵀ, B = [0, 1], c = 0
        assert_eq!(
            materialize(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0], 2, MapKind::LowRank(1)).unwrap(),
            Mat::from_rows(&[[0.0, 1.0], [0.0, 0.0]]).unwrap()
        );
        assert_eq!(
            materialize(&[1.0, 2.0, 3.0, 4.0], 2, MapKind::General).unwrap(),
            Mat::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap()
        );
        assert!(matches!(
            materialize(&[1.0], 2, MapKind::General),
            Err(Error::Width { expected: 4, got: 1 })
        ));
    }

    #[test]
    fn low_rank_bounds() {
        assert!(MapKind::LowRank(0).validate(2).is_err());
        assert!(MapKind::LowRank(3).validate(2).is_err());
        assert!(MapKind::LowRank(2).validate(2).is_ok());
    }

    #[test]
    fn materialize_backward_matches_finite_differences() {
        let d = 3;
        for kind in [MapKind::Diagonal, MapKind::LowRank(2), MapKind::General] {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let w = kind.param_width(d);
            let p: Vec<f64> = (0..w).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g = Mat::from_vec(d, d, (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap();
            let f = |q: &[f64]| {
                let m = materialize(q, d, kind).unwrap();
                crate::linalg::dot(m.as_slice(), g.as_slice())
            };
            let analytic = materialize_backward(&p, d, kind, &g);
            for i in 0..w {
                let mut hi = p.clone();
                let mut lo = p.clone();
                hi[i] += 1e-6;
                lo[i] -= 1e-6;
                let fd = (f(&hi) - f(&lo)) / 2e-6;
                assert!((fd - analytic[i]).abs() < 1e-8, "{kind:?} coordinate {i}");
            }
        }
    }

    #[test]
    fn hyperedge_means() {
        let x = Mat::column(&[0.0, 1.0, 5.0]);
        assert_eq!(hyperedge_mean(&h3(), &x).unwrap(), Mat::column(&[2.0]));
        let h = Hypergraph::new(3, vec![vec![0, 1], vec![1, 2]]).unwrap();
        let x = Mat::column(&[0.0, 2.0, 4.0]);
        assert_eq!(hyperedge_mean(&h, &x).unwrap(), Mat::column(&[1.0, 3.0]));
    }

    #[test]
    fn zero_predictor_outputs_squash_of_zero() {
        let h = h3();
        let x = Mat::from_rows(&[[0.3, -1.0], [2.0, 0.5], [1.0, 1.0]]).unwrap();
        let p = SheafPredictor::zeros(2, 2, MapKind::General, Squash::Tanh, EdgeFeatureMode::MeanOfInputs)
            .unwrap();
        for m in predict_sheaf(&h, &x, &p, 2, MapKind::General).unwrap().maps() {
            assert_eq!(m, Mat::zeros(2, 2));
        }
        let p = SheafPredictor::zeros(2, 2, MapKind::Diagonal, Squash::Sigmoid, EdgeFeatureMode::MeanOfInputs)
            .unwrap();
        for m in predict_sheaf(&h, &x, &p, 2, MapKind::Diagonal).unwrap().maps() {
            assert_eq!(m, Mat::identity(2).scale(0.5));
        }
    }

    #[test]
    fn predictor_shape_mismatch() {
        let h = h3();
        let p = SheafPredictor::zeros(2, 2, MapKind::Diagonal, Squash::Tanh, EdgeFeatureMode::MeanOfInputs)
            .unwrap();
        assert!(matches!(
            predict_sheaf(&h, &Mat::zeros(3, 5), &p, 2, MapKind::Diagonal),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            predict_sheaf(&h, &Mat::zeros(3, 2), &p, 3, MapKind::Diagonal),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn json_round_trip() {
        let s = Sheaf::random(&h3(), 2, MapKind::LowRank(1), 4).unwrap();
        let text = s.to_json();
        assert!(text.starts_with(r#"{"stalk_dim":2,"kind":"low_rank","rank":1,"params":"#));
        assert_eq!(Sheaf::from_json(&text).unwrap(), s);
    }
}
