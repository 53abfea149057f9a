//! Sheaf hypergraph network layers `Y = ReLU((I − Δ)(I ⊗ W1) X W2)` and the
//! full node classifier built from them.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::energy::dirichlet_energy;
use crate::error::{shape_err, Error, Result};
use crate::hypergraph::Hypergraph;
use crate::laplacian::{
    discrepant_pairs, relations, BlockMatrix, DiscrepantPair, NormMode, NormStyle, Normalizer,
    DEFAULT_EPSILON,
};
use crate::linalg::{Linear, Mat};
use crate::nn::tape::{stack_blocks, unstack_blocks, LapStructure, Tape, Var};
use crate::sheaf::{glorot_fill, EdgeFeatureMode, MapKind, Sheaf, SheafPredictor, Squash};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// linear sheaf Laplacian
    SheafGnn,
    /// non-linear sheaf Laplacian
    SheafGcn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SheafPolicy {
    FixedFirstLayer,
    RecomputeEachLayer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KindName {
    #[serde(alias = "diag")]
    Diagonal,
    #[serde(alias = "lowrank")]
    LowRank,
    General,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub d: usize,
    pub kind: KindName,
    /// only read for low-rank maps
    pub rank: usize,
    pub layers: usize,
    pub hidden: usize,
    pub learn_w1: bool,
    pub sheaf_policy: SheafPolicy,
    /// identity restriction maps instead of predicted ones
    pub trivial_sheaf: bool,
    /// train on the hypergraph with a singleton hyperedge added at every node
    pub self_loops: bool,
    pub norm_mode: NormMode,
    pub norm_style: NormStyle,
    pub epsilon: f64,
    pub mediators: bool,
    pub squash: Squash,
    pub edge_mode: EdgeFeatureMode,
    pub dropout: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::SheafGnn,
            d: 4,
            kind: KindName::Diagonal,
            rank: 1,
            layers: 2,
            hidden: 32,
            learn_w1: true,
            sheaf_policy: SheafPolicy::FixedFirstLayer,
            trivial_sheaf: false,
            self_loops: true,
            norm_mode: NormMode::Sheaf,
            norm_style: NormStyle::Symmetric,
            epsilon: DEFAULT_EPSILON,
            mediators: true,
            squash: Squash::Tanh,
            edge_mode: EdgeFeatureMode::MeanOfInputs,
            dropout: 0.2,
            lr: 0.1,
            weight_decay: 1e-5,
            epochs: 100,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn map_kind(&self) -> MapKind {
        match self.kind {
            KindName::Diagonal => MapKind::Diagonal,
            KindName::LowRank => MapKind::LowRank(self.rank),
            KindName::General => MapKind::General,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        self.map_kind().validate(self.d)?;
        if self.layers == 0 {
            return fail("layers must be at least 1".into());
        }
        if self.hidden == 0 {
            return fail("hidden must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.epsilon >= 0.0) {
            return fail("lr, weight_decay and epsilon must be nonnegative".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub w1: Mat,
    pub w2: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub input: Linear,
    pub predictor: SheafPredictor,
    pub layers: Vec<LayerParams>,
    pub readout: Linear,
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions<'a> {
    /// Seed for dropout masks; `None` evaluates without dropout.
    pub dropout_seed: Option<u64>,
    /// Per-layer discrepant pairs to reuse instead of selecting them.
    pub frozen_pairs: Option<&'a [Vec<DiscrepantPair>]>,
}

#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// Leaves in [`Model::tensors`] order.
    pub params: Vec<Var>,
    pub logits: Var,
    /// Output `Y` of every layer, `(n·d) × f`.
    pub layer_outputs: Vec<Var>,
    /// Pairs selected per layer (non-linear variant only).
    pub pairs: Vec<Vec<DiscrepantPair>>,
}

/// Projects `n × f_in` features to `n × (d·f)` and views the buffer as
/// `(n·d) × f`: node `v`, stalk row `k`, channel `c` reads coordinate `k·f + c`.
pub fn input_embed(x: &Mat, d: usize, f: usize, projection: &Linear) -> Result<Mat> {
    if projection.output_dim() != d * f || projection.input_dim() != x.cols() {
        return shape_err(format!(
            "projection {}→{} cannot embed {} features into d·f = {}",
            projection.input_dim(),
            projection.output_dim(),
            x.cols(),
            d * f
        ));
    }
    let n = x.rows();
    projection.forward(x)?.reshape(n * d, f)
}

/// `ReLU(Z − Δ·Z)` with `Z = (I_n ⊗ W1)·Xt·W2`.
pub fn layer_forward(xt: &Mat, delta: &BlockMatrix, w1: &Mat, w2: &Mat) -> Result<Mat> {
    let d = delta.block_dim();
    if w1.shape() != (d, d) || xt.rows() != delta.dim() {
        return shape_err(format!(
            "layer with W1 {:?} and operator of dimension {} applied to {:?}",
            w1.shape(),
            delta.dim(),
            xt.shape()
        ));
    }
    let t = xt.matmul(w2)?;
    let mut z = Mat::zeros(t.rows(), t.cols());
    for v in 0..delta.num_nodes() {
        z.set_row_block(v * d, &w1.matmul(&t.row_block(v * d, d))?);
    }
    let dz = delta.apply(&z)?;
    Ok(z.sub(&dz)?.map(|v| v.max(0.0)))
}

fn bias_row(b: &[f64]) -> Mat {
    Mat::from_vec(1, b.len(), b.to_vec()).expect("row shape")
}

struct LayerSheaf {
    maps: Var,
    norm: Var,
}

impl Model {
    pub fn new(config: ModelConfig, input_dim: usize, num_classes: usize) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 || num_classes == 0 {
            return Err(Error::Config("input width and class count must be positive".into()));
        }
        let (d, f) = (config.d, config.hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut input = Linear::zeros(input_dim, d * f);
        glorot_fill(&mut input.weight, &mut rng);
        let predictor = SheafPredictor::random(
            d * f,
            d,
            config.map_kind(),
            config.squash,
            config.edge_mode,
            rng.random(),
        )?;
        let layers = (0..config.layers)
            .map(|_| {
                let mut w2 = Mat::zeros(f, f);
                glorot_fill(&mut w2, &mut rng);
                LayerParams {
                    w1: Mat::identity(d),
                    w2,
                }
            })
            .collect();
        let mut readout = Linear::zeros(d * f, num_classes);
        glorot_fill(&mut readout.weight, &mut rng);
        Ok(Model {
            config,
            input,
            predictor,
            layers,
            readout,
        })
    }

    /// Trainable buffers in a fixed order shared with [`ForwardPass::params`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        let p = &self.predictor;
        let mut out: Vec<&[f64]> = vec![
            self.input.weight.as_slice(),
            &self.input.bias,
            p.hidden.weight.as_slice(),
            &p.hidden.bias,
            p.output.weight.as_slice(),
            &p.output.bias,
            p.transform.weight.as_slice(),
            &p.transform.bias,
        ];
        for l in &self.layers {
            out.push(l.w1.as_slice());
            out.push(l.w2.as_slice());
        }
        out.push(self.readout.weight.as_slice());
        out.push(&self.readout.bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let p = &mut self.predictor;
        let mut out: Vec<&mut [f64]> = vec![
            self.input.weight.as_mut_slice(),
            &mut self.input.bias,
            p.hidden.weight.as_mut_slice(),
            &mut p.hidden.bias,
            p.output.weight.as_mut_slice(),
            &mut p.output.bias,
            p.transform.weight.as_mut_slice(),
            &mut p.transform.bias,
        ];
        for l in &mut self.layers {
            out.push(l.w1.as_mut_slice());
            out.push(l.w2.as_mut_slice());
        }
        out.push(self.readout.weight.as_mut_slice());
        out.push(&mut self.readout.bias);
        out
    }

    fn layer_sheaf(
        &self,
        tape: &mut Tape,
        h: &Rc<Hypergraph>,
        node_features: Var,
        hidden: Var,
        pv: &[Var],
    ) -> Result<LayerSheaf> {
        let cfg = &self.config;
        let d = cfg.d;
        let maps = if cfg.trivial_sheaf {
            tape.leaf(stack_blocks(&vec![Mat::identity(d); h.num_incidences()], d))
        } else {
            let edges = match cfg.edge_mode {
                EdgeFeatureMode::MeanOfInputs => tape.hyperedge_mean(node_features, h.clone())?,
                EdgeFeatureMode::MeanOfHidden => {
                    let n = h.num_nodes();
                    let flat = tape.reshape(hidden, n, d * cfg.hidden)?;
                    tape.hyperedge_mean(flat, h.clone())?
                }
                EdgeFeatureMode::MeanOfTransformed => {
                    let t = tape.matmul(node_features, pv[6])?;
                    let t = tape.add_row_bias(t, pv[7])?;
                    let t = tape.relu(t);
                    tape.hyperedge_mean(t, h.clone())?
                }
            };
            let inp = tape.gather_concat(node_features, edges, h.clone())?;
            let hid = tape.matmul(inp, pv[2])?;
            let hid = tape.add_row_bias(hid, pv[3])?;
            let hid = tape.relu(hid);
            let out = tape.matmul(hid, pv[4])?;
            let out = tape.add_row_bias(out, pv[5])?;
            let params = match cfg.squash {
                Squash::Sigmoid => tape.sigmoid(out),
                Squash::Tanh => tape.tanh(out),
            };
            tape.materialize_maps(params, d, cfg.map_kind())?
        };
        let power = match cfg.norm_style {
            NormStyle::Symmetric => -0.5,
            NormStyle::Asymmetric => -1.0,
        };
        let norm = match cfg.norm_mode {
            NormMode::Identity => tape.leaf(stack_blocks(&vec![Mat::identity(d); h.num_nodes()], d)),
            NormMode::Degree => {
                let n = Normalizer::new(h, &Sheaf::identity(h, d), NormMode::Degree, cfg.norm_style, cfg.epsilon)?;
                tape.leaf(stack_blocks(n.left_blocks(), d))
            }
            NormMode::Sheaf => tape.norm_blocks(maps, h.clone(), cfg.epsilon, power)?,
        };
        Ok(LayerSheaf { maps, norm })
    }

    /// Pairs for the non-linear Laplacian, compared on `D^{-1/2}`-scaled inputs.
    fn select_pairs(&self, h: &Hypergraph, maps: &Mat, xt: &Mat, layer: usize) -> Result<Vec<DiscrepantPair>> {
        let cfg = &self.config;
        let d = cfg.d;
        let sheaf = Sheaf::new(
            d,
            MapKind::General,
            unstack_blocks(maps, d).into_iter().map(Mat::into_vec).collect(),
        )?;
        let norm = Normalizer::new(h, &sheaf, cfg.norm_mode, NormStyle::Symmetric, cfg.epsilon)?;
        discrepant_pairs(h, &sheaf, xt, Some(&norm), cfg.seed.wrapping_add(layer as u64))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        h: &Rc<Hypergraph>,
        x: &Mat,
        opts: &ForwardOptions,
    ) -> Result<ForwardPass> {
        let cfg = &self.config;
        let (d, f, n) = (cfg.d, cfg.hidden, h.num_nodes());
        if x.rows() != n || x.cols() != self.input.input_dim() {
            return shape_err(format!(
                "model expects {}x{} features, got {:?}",
                n,
                self.input.input_dim(),
                x.shape()
            ));
        }
        let pv: Vec<Var> = {
            let p = &self.predictor;
            let mut leaves = vec![
                tape.leaf(self.input.weight.clone()),
                tape.leaf(bias_row(&self.input.bias)),
                tape.leaf(p.hidden.weight.clone()),
                tape.leaf(bias_row(&p.hidden.bias)),
                tape.leaf(p.output.weight.clone()),
                tape.leaf(bias_row(&p.output.bias)),
                tape.leaf(p.transform.weight.clone()),
                tape.leaf(bias_row(&p.transform.bias)),
            ];
            for l in &self.layers {
                leaves.push(tape.leaf(l.w1.clone()));
                leaves.push(tape.leaf(l.w2.clone()));
            }
            leaves.push(tape.leaf(self.readout.weight.clone()));
            leaves.push(tape.leaf(bias_row(&self.readout.bias)));
            leaves
        };
        let mut dropout_rng = opts.dropout_seed.map(ChaCha8Rng::seed_from_u64);

        let xv = tape.leaf(x.clone());
        let embedded = tape.matmul(xv, pv[0])?;
        let embedded = tape.add_row_bias(embedded, pv[1])?;
        let mut xt = tape.reshape(embedded, n * d, f)?;

        let mut fixed: Option<LayerSheaf> = None;
        let mut layer_outputs = Vec::with_capacity(self.layers.len());
        let mut all_pairs = Vec::new();
        for (l, _) in self.layers.iter().enumerate() {
            let (w1, w2) = (pv[8 + 2 * l], pv[9 + 2 * l]);
            let t = tape.matmul(xt, w2)?;
            let z = if cfg.learn_w1 { tape.kron_apply(t, w1)? } else { t };

            let sheaf = match (&fixed, cfg.sheaf_policy) {
                (Some(s), SheafPolicy::FixedFirstLayer) => LayerSheaf {
                    maps: s.maps,
                    norm: s.norm,
                },
                _ => {
                    let node_features = tape.reshape(xt, n, d * f)?;
                    let s = self.layer_sheaf(tape, h, node_features, z, &pv)?;
                    fixed = Some(LayerSheaf {
                        maps: s.maps,
                        norm: s.norm,
                    });
                    s
                }
            };

            let relations = match cfg.variant {
                Variant::SheafGnn => None,
                Variant::SheafGcn => {
                    let pairs = match opts.frozen_pairs {
                        Some(frozen) => frozen
                            .get(l)
                            .cloned()
                            .ok_or_else(|| Error::Shape(format!("no frozen pairs for layer {l}")))?,
                        None => self.select_pairs(h, tape.value(sheaf.maps), tape.value(xt), l)?,
                    };
                    let rels = relations(h, &pairs, cfg.mediators);
                    all_pairs.push(pairs);
                    Some(Rc::new(rels))
                }
            };
            let lap = LapStructure {
                hypergraph: h.clone(),
                relations,
                style: cfg.norm_style,
            };
            let dz = tape.lap_apply(sheaf.maps, sheaf.norm, z, lap)?;
            let y = tape.sub(z, dz)?;
            let mut y = tape.relu(y);
            if let Some(rng) = dropout_rng.as_mut() {
                if cfg.dropout > 0.0 {
                    let keep = 1.0 - cfg.dropout;
                    let shape = tape.value(y).shape();
                    let mask = Mat::from_vec(
                        shape.0,
                        shape.1,
                        (0..shape.0 * shape.1)
                            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                            .collect(),
                    )?;
                    y = tape.mask(y, mask)?;
                }
            }
            layer_outputs.push(y);
            xt = y;
        }
        let flat = tape.reshape(xt, n, d * f)?;
        let logits = tape.matmul(flat, pv[pv.len() - 2])?;
        let logits = tape.add_row_bias(logits, pv[pv.len() - 1])?;
        Ok(ForwardPass {
            params: pv,
            logits,
            layer_outputs,
            pairs: all_pairs,
        })
    }

    /// Logits and final-layer representation without dropout.
    pub fn evaluate(&self, h: &Rc<Hypergraph>, x: &Mat) -> Result<(Mat, Mat)> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, h, x, &ForwardOptions::default())?;
        let last = *pass.layer_outputs.last().expect("at least one layer");
        Ok((tape.value(pass.logits).clone(), tape.value(last).clone()))
    }

    pub fn predict(&self, h: &Rc<Hypergraph>, x: &Mat) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.evaluate(h, x)?.0))
    }
}

pub fn argmax_rows(m: &Mat) -> Vec<usize> {
    (0..m.rows())
        .map(|r| {
            let row = m.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Trivial-sheaf Dirichlet energy (identity normalization) of an `(n·d) × f`
/// representation flattened to `n × (d·f)`.
pub fn representation_energy(h: &Hypergraph, repr: &Mat) -> Result<f64> {
    let n = h.num_nodes();
    if n == 0 || repr.rows() % n != 0 {
        return shape_err("representation rows are not a multiple of the node count");
    }
    let width = repr.rows() / n * repr.cols();
    let flat = repr.clone().reshape(n, width)?;
    Ok(dirichlet_energy(h, &Sheaf::trivial(h), &Normalizer::identity(n, 1), &flat)?.value)
}

/// Dirichlet energy of the model's final-layer node representations.
pub fn dirichlet_probe(model: &Model, h: &Rc<Hypergraph>, x: &Mat) -> Result<f64> {
    let (_, last) = model.evaluate(h, x)?;
    representation_energy(h, &last)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::laplacian::{linear_laplacian, normalize};

    fn h3() -> Hypergraph {
        Hypergraph::new(3, vec![vec![0, 1, 2]]).unwrap()
    }

    #[test]
    fn layer_examples() {
        let xt = Mat::from_rows(&[[-1.0, 2.0], [0.5, -3.0]]).unwrap();
        let zero = BlockMatrix::zeros(2, 1);
        let y = layer_forward(&xt, &zero, &Mat::identity(1), &Mat::identity(2)).unwrap();
        assert_eq!(y, xt.map(|v| v.max(0.0)));

        let h = h3();
        let l = linear_laplacian(&h, &Sheaf::trivial(&h)).unwrap();
        let y = layer_forward(&Mat::column(&[0.0, 1.0, 5.0]), &l, &Mat::identity(1), &Mat::identity(1))
            .unwrap();
        assert!(y.sub(&Mat::column(&[2.0, 2.0, 2.0])).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn embedding_layout() {
        let mut p = Linear::zeros(3, 4);
        for (i, v) in p.weight.as_mut_slice().iter_mut().enumerate() {
            *v = i as f64 * 0.1 - 0.4;
        }
        p.bias = vec![0.5, -0.5, 1.0, 0.0];
        let x = Mat::from_rows(&[[1.0, 2.0, 3.0], [0.0, -1.0, 1.0]]).unwrap();
        let flat = p.forward(&x).unwrap();
        let e = input_embed(&x, 2, 2, &p).unwrap();
        assert_eq!(e.shape(), (4, 2));
        for v in 0..2 {
            for k in 0..2 {
                for c in 0..2 {
                    assert_eq!(e[(v * 2 + k, c)], flat[(v, k * 2 + c)]);
                }
            }
        }
        let d1 = input_embed(&x, 1, 4, &p).unwrap();
        assert_eq!(d1, flat);
        assert!(input_embed(&x, 3, 2, &p).is_err());
    }

    #[test]
    fn tape_forward_matches_plain_layers() {
        let h = Rc::new(Hypergraph::new(5, vec![vec![0, 1, 2], vec![2, 3, 4], vec![0, 4]]).unwrap());
        let cfg = ModelConfig {
            d: 2,
            hidden: 3,
            kind: KindName::General,
            norm_mode: NormMode::Sheaf,
            ..ModelConfig::default()
        };
        let mut model = Model::new(cfg, 4, 2).unwrap();
        model.layers[0].w1 = Mat::from_rows(&[[1.0, 0.3], [-0.2, 0.9]]).unwrap();
        let x = Mat::from_vec(5, 4, (0..20).map(|i| ((i * 5 % 7) as f64) / 7.0 - 0.4).collect()).unwrap();
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &h, &x, &ForwardOptions::default()).unwrap();

        let xt = input_embed(&x, 2, 3, &model.input).unwrap();
        let sheaf = model
            .predictor
            .predict(&h, &xt.clone().reshape(5, 6).unwrap(), None)
            .unwrap();
        let norm = Normalizer::new(&h, &sheaf, NormMode::Sheaf, NormStyle::Symmetric, model.config.epsilon)
            .unwrap();
        let delta = normalize(&linear_laplacian(&h, &sheaf).unwrap(), &norm).unwrap();
        let mut y = xt;
        for (l, layer) in model.layers.iter().enumerate() {
            y = layer_forward(&y, &delta, &layer.w1, &layer.w2).unwrap();
            let got = tape.value(pass.layer_outputs[l]);
            assert!(got.sub(&y).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn constant_representation_has_zero_energy() {
        let h = h3();
        assert_eq!(representation_energy(&h, &Mat::filled(6, 3, 1.5)).unwrap(), 0.0);
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig {
            kind: KindName::LowRank,
            rank: 3,
            d: 2,
            ..ModelConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = ModelConfig {
            dropout: 1.0,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let parsed: ModelConfig = serde_json::from_str(r#"{"kind":"diag","d":3}"#).unwrap();
        assert_eq!(parsed.map_kind(), MapKind::Diagonal);
        assert_eq!(parsed.d, 3);
    }
}
