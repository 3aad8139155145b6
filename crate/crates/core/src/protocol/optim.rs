use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Gradients, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Plain stochastic gradient descent, no momentum.
    Sgd,
    Adam,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimizer with its per-parameter state. Parameters outside `mask`
/// are never touched.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    steps: u64,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, n_params: usize) -> Self {
        Self {
            kind,
            steps: 0,
            first: vec![None; n_params],
            second: vec![None; n_params],
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Rescales `grads` so their global L2 norm is at most `max_norm`;
    /// returns the norm before clipping.
    pub fn clip(grads: &mut Gradients, max_norm: f64) -> f64 {
        let norm = grads
            .iter()
            .map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if max_norm > 0.0 && norm > max_norm {
            let s = max_norm / norm;
            let mut scaled = Gradients::empty(grads.len());
            scaled.accumulate(grads, s);
            *grads = scaled;
        }
        norm
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, mask: &[bool], lr: f64) -> Result<()> {
        self.steps += 1;
        for id in store.ids().collect::<Vec<_>>() {
            let i = id.index();
            if !mask[i] {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            match self.kind {
                OptimizerKind::Sgd => store.get_mut(id).add_scaled(g, -lr),
                OptimizerKind::Adam => {
                    let m = self.first[i].get_or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
                    let v = self.second[i].get_or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
                    let t = self.steps as i32;
                    let c1 = 1.0 - BETA1.powi(t);
                    let c2 = 1.0 - BETA2.powi(t);
                    let p = store.get_mut(id).data_mut();
                    for (((pk, gk), mk), vk) in p
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut().iter_mut())
                        .zip(v.data_mut().iter_mut())
                    {
                        *mk = BETA1 * *mk + (1.0 - BETA1) * gk;
                        *vk = BETA2 * *vk + (1.0 - BETA2) * gk * gk;
                        *pk -= lr * (*mk / c1) / ((*vk / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        if !store.all_finite() {
            return Err(Error::NonFinite("parameters after optimizer step".into()));
        }
        Ok(())
    }

    /// Named state tensors for checkpointing.
    pub fn export(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for id in store.ids() {
            let name = store.name(id);
            if let Some(m) = &self.first[id.index()] {
                out.push((format!("m:{name}"), m.clone()));
            }
            if let Some(v) = &self.second[id.index()] {
                out.push((format!("v:{name}"), v.clone()));
            }
        }
        out
    }

    pub fn import(kind: OptimizerKind, steps: u64, store: &ParamStore, tensors: &[(String, Tensor)]) -> Result<Self> {
        let mut opt = Self::new(kind, store.len());
        opt.steps = steps;
        for (name, t) in tensors {
            let (slot, pname) = name
                .split_once(':')
                .ok_or_else(|| Error::format("optimizer state", format!("bad tensor name `{name}`")))?;
            let id = store
                .id(pname)
                .ok_or_else(|| Error::format("optimizer state", format!("unknown parameter `{pname}`")))?;
            if store.get(id).shape() != t.shape() {
                return Err(Error::format("optimizer state", format!("shape of `{name}`")));
            }
            match slot {
                "m" => opt.first[id.index()] = Some(t.clone()),
                "v" => opt.second[id.index()] = Some(t.clone()),
                _ => return Err(Error::format("optimizer state", format!("bad tensor name `{name}`"))),
            }
        }
        Ok(opt)
    }
}
