//! Sparse-to-dense network predicting a coarse dense depth and its log
//! uncertainty from sparse depth alone, with its two-stage training.
//!
//! The network is a U-Net style encoder with two decoders sharing it. The
//! input has two channels, depth divided by `max_depth` and the measurement
//! mask. Stage 1 fits the encoder and depth decoder with a squared error;
//! stage 2 freezes both and fits the uncertainty decoder with a Gaussian
//! negative log-likelihood.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::{restore_into, Checkpoint};
use crate::depthmap::augment::AugmentConfig;
use crate::depthmap::{
    DepthMap, Raster, Sample, SparseDepthMap, UncertaintyMap, LOG_SIGMA_MAX, LOG_SIGMA_MIN,
};
use crate::error::{Error, Result};
use crate::losses::{self, Target};
use crate::nn::{Adam, AdamConfig, Bound, Conv, LrSchedule, ParamStore};
use crate::tensor::{Shape, Tensor};
use crate::train::{check_loss, epoch_batches, prepare_batch, LossRecord, PhaseConfig};

pub const ENCODER: &str = "encoder";
pub const DEPTH_DECODER: &str = "depth_decoder";
pub const UNCERTAINTY_DECODER: &str = "uncertainty_decoder";
pub const GROUPS: [&str; 3] = [ENCODER, DEPTH_DECODER, UNCERTAINTY_DECODER];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpadeArch {
    /// Number of stride-2 downsamplings.
    pub levels: usize,
    pub base_channels: usize,
    /// Upper bound of predicted depth, also the input normalization.
    pub max_depth: f64,
    /// Depth predicted everywhere by a freshly initialized network.
    pub init_depth: f64,
    /// Log uncertainty predicted everywhere by a fresh uncertainty decoder.
    pub init_log_sigma: f64,
}

impl Default for SpadeArch {
    fn default() -> Self {
        SpadeArch {
            levels: 4,
            base_channels: 16,
            max_depth: 80.0,
            init_depth: 20.0,
            init_log_sigma: 1.0,
        }
    }
}

impl SpadeArch {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 || self.base_channels == 0 {
            return Err(Error::Config(format!(
                "spade needs levels >= 2 and base_channels >= 1, got {} and {}",
                self.levels, self.base_channels
            )));
        }
        if !(self.max_depth > 0.0 && self.max_depth.is_finite()) {
            return Err(Error::Config(format!(
                "max_depth {} must be positive",
                self.max_depth
            )));
        }
        if !(self.init_depth > 0.0 && self.init_depth < self.max_depth) {
            return Err(Error::Config(format!(
                "init_depth {} must lie in (0, max_depth)",
                self.init_depth
            )));
        }
        if !(LOG_SIGMA_MIN..=LOG_SIGMA_MAX).contains(&self.init_log_sigma) {
            return Err(Error::Config(format!(
                "init_log_sigma {} out of range",
                self.init_log_sigma
            )));
        }
        Ok(())
    }

    /// Channel width at resolution level `i` (0 is full resolution).
    pub fn channels(&self, i: usize) -> usize {
        self.base_channels << i.min(2)
    }

    /// Spatial dims must be multiples of this; other sizes are padded.
    pub fn stride(&self) -> usize {
        1 << self.levels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpadeOutput {
    pub zhat: DepthMap,
    pub sigma: UncertaintyMap,
}

#[derive(Clone, Debug)]
struct Decoder {
    /// `ups[i]` fuses level `i + 1` features into level `i`.
    ups: Vec<Conv>,
    head: Conv,
}

#[derive(Clone, Debug)]
struct Layers {
    stem: Conv,
    downs: Vec<Conv>,
    depth: Decoder,
    sigma: Decoder,
}

impl Layers {
    fn build(arch: &SpadeArch, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Layers {
        let stem = Conv::new(store, "enc.stem", ENCODER, 2, arch.channels(0), 3, 1, rng);
        let downs = (1..=arch.levels)
            .map(|i| {
                Conv::new(
                    store,
                    &format!("enc.down{i}"),
                    ENCODER,
                    arch.channels(i - 1),
                    arch.channels(i),
                    3,
                    2,
                    rng,
                )
            })
            .collect();
        let mut decoder = |prefix: &str, group: &str, store: &mut ParamStore| {
            let ups = (0..arch.levels)
                .map(|i| {
                    Conv::new(
                        store,
                        &format!("{prefix}.up{i}"),
                        group,
                        arch.channels(i + 1) + arch.channels(i),
                        arch.channels(i),
                        3,
                        1,
                        rng,
                    )
                })
                .collect();
            let head = Conv::new(
                store,
                &format!("{prefix}.head"),
                group,
                arch.channels(0),
                1,
                3,
                1,
                rng,
            );
            Decoder { ups, head }
        };
        let depth = decoder("depth", DEPTH_DECODER, store);
        let sigma = decoder("sigma", UNCERTAINTY_DECODER, store);
        Layers {
            stem,
            downs,
            depth,
            sigma,
        }
    }
}

/// Parameters plus the layer layout that interprets them.
#[derive(Clone, Debug)]
pub struct SpadeModel {
    pub arch: SpadeArch,
    pub params: ParamStore,
    layers: Layers,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Heads {
    Depth,
    Both,
}

impl SpadeModel {
    pub fn new(arch: SpadeArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let layers = Layers::build(&arch, &mut params, &mut rng);
        let p = arch.init_depth / arch.max_depth;
        params.get_mut(layers.depth.head.bias).tensor =
            Tensor::full(Shape::new(1, 1, 1, 1), (p / (1.0 - p)).ln());
        params.get_mut(layers.sigma.head.bias).tensor =
            Tensor::full(Shape::new(1, 1, 1, 1), arch.init_log_sigma);
        Ok(SpadeModel {
            arch,
            params,
            layers,
        })
    }

    /// Rebuilds the layout for `arch` and fills it from `params`, which must
    /// match in names, groups and shapes.
    pub fn from_params(arch: SpadeArch, params: &ParamStore) -> Result<Self> {
        let mut model = SpadeModel::new(arch, 0)?;
        restore_into(&mut model.params, params)?;
        if model.params.len()
            != params
                .iter()
                .filter(|p| GROUPS.contains(&p.group.as_str()))
                .count()
        {
            return Err(Error::Checkpoint("unexpected extra network tensors".into()));
        }
        Ok(model)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let kind: String = ck.meta("kind")?;
        if kind != "spade" {
            return Err(Error::Checkpoint(format!(
                "expected a spade checkpoint, found {kind}"
            )));
        }
        Self::from_params(ck.meta("arch")?, &ck.params)
    }

    pub fn checksum(&self, group: Option<&str>) -> String {
        self.params.checksum(group)
    }

    /// Network input `[z / max_depth, mask]` for a batch of equally sized maps.
    pub fn input_tensor(&self, zs: &[&SparseDepthMap]) -> Result<Tensor> {
        let first = zs
            .first()
            .ok_or_else(|| Error::Input("empty batch".into()))?;
        let dims = first.dims();
        let mut items = Vec::with_capacity(zs.len());
        for z in zs {
            crate::error::ensure_same_dims("spade batch", z.dims(), dims)?;
            let (h, w) = z.dims();
            let mut data = Vec::with_capacity(2 * h * w);
            data.extend(z.values().iter().map(|v| v / self.arch.max_depth));
            data.extend(z.values().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }));
            items.push(Tensor::from_vec(Shape::new(1, 2, h, w), data));
        }
        Ok(Tensor::stack(&items))
    }

    /// Raw graph forward. Returns `(zhat, sigma)` where `sigma` is `None`
    /// for [`Heads::Depth`]. Input is padded and outputs cropped back.
    fn graph_forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        input: &Tensor,
        heads: Heads,
    ) -> (Var, Option<Var>) {
        let s = input.shape();
        let m = self.arch.stride();
        let (ph, pw) = (s.h.div_ceil(m) * m, s.w.div_ceil(m) * m);
        let x = g.constant(input.pad_to(ph, pw));
        let stem = self.layers.stem.forward(g, p, x);
        let mut feats = vec![g.silu(stem)];
        for down in &self.layers.downs {
            let prev = *feats.last().expect("stem feature present");
            let y = down.forward(g, p, prev);
            feats.push(g.silu(y));
        }
        let decode = |g: &mut Graph, dec: &Decoder| {
            let mut y = feats[self.arch.levels];
            for i in (0..self.arch.levels).rev() {
                let up = g.upsample2(y);
                let cat = g.concat(up, feats[i]);
                let conv = dec.ups[i].forward(g, p, cat);
                y = g.silu(conv);
            }
            let raw = dec.head.forward(g, p, y);
            g.crop(raw, s.h, s.w)
        };
        let raw_depth = decode(g, &self.layers.depth);
        let logits = g.clamp(raw_depth, -20.0, 20.0);
        let unit = g.sigmoid(logits);
        let zhat = g.affine(unit, self.arch.max_depth, 0.0);
        let sigma = match heads {
            Heads::Depth => None,
            Heads::Both => {
                let raw = decode(g, &self.layers.sigma);
                Some(g.clamp(raw, LOG_SIGMA_MIN, LOG_SIGMA_MAX))
            }
        };
        (zhat, sigma)
    }

    /// Inference on a batch of equally sized sparse maps.
    pub fn forward_batch(&self, zs: &[&SparseDepthMap]) -> Result<Vec<SpadeOutput>> {
        let input = self.input_tensor(zs)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, |_| false);
        let (zhat, sigma) = self.graph_forward(&mut g, &p, &input, Heads::Both);
        let sigma = sigma.expect("both heads requested");
        let (zt, st) = (g.value(zhat), g.value(sigma));
        if !zt.is_finite() || !st.is_finite() {
            return Err(Error::Input(
                "spade produced non-finite output; parameters are corrupt".into(),
            ));
        }
        let s = input.shape();
        (0..s.n)
            .map(|n| {
                Ok(SpadeOutput {
                    zhat: DepthMap::dense(s.h, s.w, zt.plane(n, 0).to_vec())?,
                    sigma: UncertaintyMap::new(s.h, s.w, st.plane(n, 0).to_vec())?,
                })
            })
            .collect()
    }

    pub fn forward(&self, z: &SparseDepthMap) -> Result<SpadeOutput> {
        Ok(self
            .forward_batch(&[z])?
            .pop()
            .expect("one output per input"))
    }
}

/// Predicts `(zhat, sigma)` from a sparse map.
pub fn spade_forward(z: &SparseDepthMap, model: &SpadeModel) -> Result<SpadeOutput> {
    model.forward(z)
}

/// Which parameters a training stage updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Encoder and depth decoder against squared depth error.
    Depth,
    /// Uncertainty decoder against the Gaussian log-likelihood.
    Uncertainty,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Depth => 1,
            Stage::Uncertainty => 2,
        }
    }

    pub fn trains(self, group: &str) -> bool {
        match self {
            Stage::Depth => group == ENCODER || group == DEPTH_DECODER,
            Stage::Uncertainty => group == UNCERTAINTY_DECODER,
        }
    }

    fn phase(self) -> &'static str {
        match self {
            Stage::Depth => "spade stage 1",
            Stage::Uncertainty => "spade stage 2",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpadeTrainConfig {
    pub arch: SpadeArch,
    pub stage1: PhaseConfig,
    pub stage2: PhaseConfig,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for SpadeTrainConfig {
    fn default() -> Self {
        SpadeTrainConfig {
            arch: SpadeArch::default(),
            stage1: PhaseConfig {
                epochs: 30,
                lr: LrSchedule::constant(2e-4),
            },
            stage2: PhaseConfig {
                epochs: 55,
                lr: LrSchedule {
                    base: 2e-4,
                    milestones: vec![(25, 1e-4), (40, 5e-5)],
                },
            },
            batch_size: 4,
            adam: AdamConfig::default(),
            augment: AugmentConfig {
                resize_range: Some([1.0, 1.25]),
                crop: Some((544, 704)),
                flip_prob: 0.5,
                ..Default::default()
            },
            seed: 0,
        }
    }
}

impl SpadeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.stage1.validate("stage1")?;
        self.stage2.validate("stage2")?;
        self.augment.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Model, optimizer and progress of a SpaDe training run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: SpadeModel,
    pub adam: Adam,
    /// Highest completed stage; 0 for a fresh model.
    pub stage: u8,
    /// Epochs completed within the current stage.
    pub epoch: usize,
    pub seed: u64,
    pub history: Vec<LossRecord>,
}

const OPT_FIRST: &str = "optimizer.first";
const OPT_SECOND: &str = "optimizer.second";

impl TrainState {
    pub fn new(arch: SpadeArch, adam: AdamConfig, seed: u64) -> Result<Self> {
        let model = SpadeModel::new(arch, seed)?;
        let adam = Adam::new(adam, &model.params);
        Ok(TrainState {
            model,
            adam,
            stage: 0,
            epoch: 0,
            seed,
            history: Vec::new(),
        })
    }

    /// One optimizer step on `batch`; returns the loss before the update.
    pub fn step(&mut self, batch: &[Sample], stage: Stage, lr: f64) -> Result<f64> {
        let zs: Vec<&SparseDepthMap> = batch.iter().map(|s| &s.sparse).collect();
        let gts: Vec<&DepthMap> = batch.iter().map(|s| &s.gt).collect();
        let input = self.model.input_tensor(&zs)?;
        let target = Target::new(&gts)?;
        let mut g = Graph::new();
        let p = self.model.params.bind(&mut g, |grp| stage.trains(grp));
        let loss = match stage {
            Stage::Depth => {
                let (zhat, _) = self.model.graph_forward(&mut g, &p, &input, Heads::Depth);
                losses::depth_l2(&mut g, zhat, &target)?
            }
            Stage::Uncertainty => {
                let (zhat, sigma) = self.model.graph_forward(&mut g, &p, &input, Heads::Both);
                losses::log_uncertainty(
                    &mut g,
                    zhat,
                    sigma.expect("both heads requested"),
                    &target,
                )?
            }
        };
        let value = g.value(loss).item();
        check_loss(stage.phase(), self.adam.step as usize, value)?;
        let grads = g.backward(loss);
        self.adam.update(&mut self.model.params, &p, &grads, lr);
        Ok(value)
    }

    /// Runs a full stage. Starting a stage resets the optimizer.
    pub fn run_stage(
        &mut self,
        samples: &[Sample],
        stage: Stage,
        cfg: &SpadeTrainConfig,
    ) -> Result<()> {
        cfg.validate()?;
        if samples.is_empty() {
            return Err(Error::Config("no training samples".into()));
        }
        if stage == Stage::Uncertainty && self.stage < 1 {
            return Err(Error::Config(
                "stage 2 requires a completed stage-1 model".into(),
            ));
        }
        let phase = match stage {
            Stage::Depth => &cfg.stage1,
            Stage::Uncertainty => &cfg.stage2,
        };
        self.adam = Adam::new(cfg.adam, &self.model.params);
        self.epoch = 0;
        let mut step = 0;
        for epoch in 0..phase.epochs {
            let lr = phase.lr.at_epoch(epoch);
            let stage_seed = crate::synth::derive_seed(cfg.seed, stage.number() as u64);
            for idx in epoch_batches(samples.len(), cfg.batch_size, stage_seed, epoch) {
                let batch = prepare_batch(samples, &idx, &cfg.augment, stage_seed, step)?;
                let loss = self.step(&batch, stage, lr)?;
                self.history.push(LossRecord {
                    phase: stage.phase().replace(' ', "_"),
                    epoch,
                    step,
                    lr,
                    loss,
                });
                step += 1;
            }
            self.epoch = epoch + 1;
            if let Some(last) = self.history.last() {
                log::info!("{} epoch {} loss {:.5}", stage.phase(), epoch, last.loss);
            }
        }
        self.stage = self.stage.max(stage.number());
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut params = self.model.params.clone();
        for (id, (m, v)) in self
            .model
            .params
            .ids()
            .zip(self.adam.first.iter().zip(&self.adam.second))
        {
            let name = &self.model.params.get(id).name;
            if let (Some(m), Some(v)) = (m, v) {
                params.push(format!("{OPT_FIRST}/{name}"), OPT_FIRST, m.clone());
                params.push(format!("{OPT_SECOND}/{name}"), OPT_SECOND, v.clone());
            }
        }
        Checkpoint {
            metadata: serde_json::json!({
                "kind": "spade",
                "arch": self.model.arch,
                "stage": self.stage,
                "epoch": self.epoch,
                "seed": self.seed,
                "adam_config": self.adam.config,
                "adam_step": self.adam.step,
                "history": self.history,
            }),
            params,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = SpadeModel::from_checkpoint(ck)?;
        let mut adam = Adam::new(ck.meta("adam_config")?, &model.params);
        adam.step = ck.meta("adam_step")?;
        for (idx, p) in model.params.iter().enumerate() {
            let name = &p.name;
            adam.first[idx] = ck
                .params
                .by_name(&format!("{OPT_FIRST}/{name}"))
                .map(|p| p.tensor.clone());
            adam.second[idx] = ck
                .params
                .by_name(&format!("{OPT_SECOND}/{name}"))
                .map(|p| p.tensor.clone());
        }
        Ok(TrainState {
            model,
            adam,
            stage: ck.meta("stage")?,
            epoch: ck.meta("epoch")?,
            seed: ck.meta("seed")?,
            history: ck.meta("history")?,
        })
    }
}

/// Stage 1 from a freshly initialized model.
pub fn train_spade_stage1(samples: &[Sample], cfg: &SpadeTrainConfig) -> Result<TrainState> {
    let mut state = TrainState::new(cfg.arch.clone(), cfg.adam, cfg.seed)?;
    state.run_stage(samples, Stage::Depth, cfg)?;
    Ok(state)
}

/// Stage 2 continuing from a stage-1 state; encoder and depth decoder stay fixed.
pub fn train_spade_stage2(
    mut state: TrainState,
    samples: &[Sample],
    cfg: &SpadeTrainConfig,
) -> Result<TrainState> {
    state.run_stage(samples, Stage::Uncertainty, cfg)?;
    Ok(state)
}

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<std::path::Path>) -> Result<()> {
    state.to_checkpoint().save(path)
}

pub fn load_checkpoint(path: impl AsRef<std::path::Path>) -> Result<TrainState> {
    TrainState::from_checkpoint(&Checkpoint::load(path)?)
}
