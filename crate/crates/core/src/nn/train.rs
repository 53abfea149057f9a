//! Full-batch node classification with Adam.

use std::rc::Rc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypergraph::Hypergraph;
use crate::nn::model::{argmax_rows, representation_energy, ForwardOptions, Model, ModelConfig};
use crate::nn::tape::Tape;
use crate::synth::Split;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Test accuracy at the best-validation epoch.
    pub test_acc: f64,
    /// Final-layer Dirichlet energy at the best-validation epoch.
    pub dirichlet_probe: f64,
}

impl TrainReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serialization is infallible")
    }
}

/// Adam with L2 weight decay added to the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    weight_decay: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64, shapes: &[usize]) -> Self {
        Adam {
            lr,
            weight_decay,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn update(&mut self, params: Vec<&mut [f64]>, grads: &[Vec<f64>]) {
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step);
        let c2 = 1.0 - BETA2.powi(self.step);
        for (k, p) in params.into_iter().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                let g = grads[k][i] + self.weight_decay * p[i];
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
    }
}

fn accuracy(pred: &[usize], labels: &[usize], idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    idx.iter().filter(|&&i| pred[i] == labels[i]).count() as f64 / idx.len() as f64
}

fn check_split(n: usize, split: &Split) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in split.train.iter().chain(&split.val).chain(&split.test) {
        if i >= n {
            return Err(Error::Config(format!("split index {i} out of range for {n} nodes")));
        }
        if seen[i] {
            return Err(Error::Config(format!("node {i} appears in more than one split")));
        }
        seen[i] = true;
    }
    if split.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    Ok(())
}

/// Trains a fresh model. Test accuracy and the probe come from the epoch with
/// the highest validation accuracy; the untrained model counts as epoch 0.
/// The probe is measured on `h` itself, without the optional self-loops.
pub fn train(h: &Hypergraph, split: &Split, cfg: &ModelConfig) -> Result<(TrainReport, Model)> {
    cfg.validate()?;
    let labels = h
        .labels()
        .ok_or_else(|| Error::Config("training needs node labels".into()))?
        .to_vec();
    let x = h
        .features()
        .ok_or_else(|| Error::Config("training needs node features".into()))?
        .clone();
    check_split(h.num_nodes(), split)?;
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    let hg = Rc::new(if cfg.self_loops { h.with_self_loops() } else { h.clone() });
    let mut model = Model::new(cfg.clone(), x.cols(), num_classes)?;
    let shapes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
    let mut adam = Adam::new(cfg.lr, cfg.weight_decay, &shapes);
    let mut stream = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d20b);
    let targets: Vec<(usize, usize)> = split.train.iter().map(|&i| (i, labels[i])).collect();

    let evaluate = |model: &Model| -> Result<(f64, f64, f64)> {
        let (logits, last) = model.evaluate(&hg, &x)?;
        let pred = argmax_rows(&logits);
        Ok((
            accuracy(&pred, &labels, &split.val),
            accuracy(&pred, &labels, &split.test),
            representation_energy(h, &last)?,
        ))
    };

    let (mut best_val, mut test_acc, mut probe) = evaluate(&model)?;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut tape = Tape::new();
        let opts = ForwardOptions {
            dropout_seed: Some(stream.next_u64()),
            frozen_pairs: None,
        };
        let pass = model.forward(&mut tape, &hg, &x, &opts)?;
        let loss = tape.softmax_cross_entropy(pass.logits, targets.clone())?;
        let train_loss = tape.value(loss)[(0, 0)];
        let grads = tape.backward(loss)?;
        let flat: Vec<Vec<f64>> = pass
            .params
            .iter()
            .map(|&v| grads.get_or_zeros(v, tape.value(v)).into_vec())
            .collect();
        adam.update(model.tensors_mut(), &flat);

        let (val, test, energy) = evaluate(&model)?;
        if val > best_val {
            best_val = val;
            test_acc = test;
            probe = energy;
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_acc: val,
        });
    }
    Ok((
        TrainReport {
            epochs,
            test_acc,
            dirichlet_probe: probe,
        },
        model,
    ))
}
