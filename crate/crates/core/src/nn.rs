//! Parameter storage, layer helpers and the Adam optimizer.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Graph, Var};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    /// Partition label, e.g. `encoder` or `depth_decoder`.
    pub group: String,
    pub tensor: Tensor,
}

/// Ordered collection of named parameters partitioned into groups.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(
        &mut self,
        name: impl Into<String>,
        group: impl Into<String>,
        tensor: Tensor,
    ) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter {name}"
        );
        self.params.push(Param {
            name,
            group: group.into(),
            tensor,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for p in &self.params {
            if !out.contains(&p.group) {
                out.push(p.group.clone());
            }
        }
        out
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.shape().len()).sum()
    }

    /// SHA-256 over the names, shapes and little-endian values of every
    /// parameter in `group`, or of all parameters when `group` is `None`.
    pub fn checksum(&self, group: Option<&str>) -> String {
        let mut h = Sha256::new();
        for p in self
            .params
            .iter()
            .filter(|p| group.is_none_or(|g| p.group == g))
        {
            h.update(p.name.as_bytes());
            let s = p.tensor.shape();
            for d in [s.n, s.c, s.h, s.w] {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Places every parameter on the graph. Parameters whose group satisfies
    /// `trainable` become gradient-tracked leaves; the rest are constants.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable(&p.group) {
                    g.leaf(p.tensor.clone())
                } else {
                    g.constant(p.tensor.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Graph handles for the parameters of a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// A square-kernel convolution layer referencing its weights in a [`ParamStore`].
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub kernel: usize,
}

impl Conv {
    /// Registers a conv layer with He-uniform weights and zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let dist = Uniform::new(-bound, bound).expect("valid uniform bound");
        let shape = Shape::new(out_ch, in_ch, kernel, kernel);
        let w = Tensor::from_vec(shape, (0..shape.len()).map(|_| dist.sample(rng)).collect());
        let weight = store.push(format!("{name}.weight"), group, w);
        let bias = store.push(
            format!("{name}.bias"),
            group,
            Tensor::zeros(Shape::new(1, out_ch, 1, 1)),
        );
        Conv {
            weight,
            bias,
            stride,
            kernel,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.conv2d(
            x,
            p.var(self.weight),
            Some(p.var(self.bias)),
            self.stride,
            self.kernel / 2,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept per parameter and only
/// allocated for parameters that have received a gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Option<Tensor>>,
    pub second: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        Adam {
            config,
            step: 0,
            first: vec![None; store.len()],
            second: vec![None; store.len()],
        }
    }

    /// Applies one update to every parameter with a gradient in `grads`.
    pub fn update(&mut self, store: &mut ParamStore, bound: &Bound, grads: &Gradients, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(grad) = grads.get(bound.var(id)) else {
                continue;
            };
            let shape = grad.shape();
            let m = self.first[id.0].get_or_insert_with(|| Tensor::zeros(shape));
            let v = self.second[id.0].get_or_insert_with(|| Tensor::zeros(shape));
            let param = store.get_mut(id).tensor.data_mut();
            for (((p, &g), m), v) in param
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Piecewise-constant learning rate: `base` until the first milestone, then
/// each `(epoch, lr)` pair from its epoch on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub base: f64,
    #[serde(default)]
    pub milestones: Vec<(usize, f64)>,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            base: lr,
            milestones: Vec::new(),
        }
    }

    pub fn at_epoch(&self, epoch: usize) -> f64 {
        self.milestones
            .iter()
            .filter(|(e, _)| *e <= epoch)
            .max_by_key(|(e, _)| *e)
            .map_or(self.base, |(_, lr)| *lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_steps_at_milestones() {
        let s = LrSchedule {
            base: 2e-4,
            milestones: vec![(25, 1e-4), (40, 5e-5)],
        };
        assert_eq!(s.at_epoch(0), 2e-4);
        assert_eq!(s.at_epoch(24), 2e-4);
        assert_eq!(s.at_epoch(25), 1e-4);
        assert_eq!(s.at_epoch(39), 1e-4);
        assert_eq!(s.at_epoch(54), 5e-5);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.push("x", "g", Tensor::full(Shape::new(1, 1, 1, 3), 5.0));
        let mut adam = Adam::new(AdamConfig::default(), &store);
        for _ in 0..2000 {
            let mut g = Graph::new();
            let b = store.bind(&mut g, |_| true);
            let sq = g.square(b.var(id));
            let l = g.weighted_sum(sq, Tensor::full(Shape::new(1, 1, 1, 3), 1.0));
            let grads = g.backward(l);
            adam.update(&mut store, &b, &grads, 0.05);
        }
        assert!(store.get(id).tensor.data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let conv = Conv::new(&mut store, "c", "g", 1, 2, 3, 1, &mut rng);
        let before = store.clone();
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let mut g = Graph::new();
        let b = store.bind(&mut g, |_| true);
        let x = g.constant(Tensor::full(Shape::new(1, 1, 4, 4), 1.0));
        let y = conv.forward(&mut g, &b, x);
        let l = g.weighted_sum(y, Tensor::full(Shape::new(1, 2, 4, 4), 1.0));
        let grads = g.backward(l);
        adam.update(&mut store, &b, &grads, 0.0);
        assert_eq!(store, before);
    }

    #[test]
    fn checksum_is_group_scoped() {
        let mut store = ParamStore::new();
        store.push("a", "enc", Tensor::scalar(1.0));
        let id = store.push("b", "dec", Tensor::scalar(2.0));
        let enc = store.checksum(Some("enc"));
        store.get_mut(id).tensor.data_mut()[0] = 3.0;
        assert_eq!(enc, store.checksum(Some("enc")));
        assert_ne!(store.checksum(Some("dec")), store.checksum(None));
    }
}
