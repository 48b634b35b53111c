//! Downstream depth-completion backbones, uncertainty-driven residual
//! learning (URL) on top of a frozen SpaDe, and plug-and-play evaluation.
//!
//! A backbone consumes the image plus either the raw sparse map
//! ([`InputMode::Sparse`]) or the packed `[z, zhat, sigma]` channels
//! ([`InputMode::Packed`]). The bundled [`ReferenceBackbone`] is a small
//! encoder-decoder predicting a bounded log-ratio against a depth prior:
//! `zhat` when packed, a normalized neighbourhood fill of `z` otherwise. In
//! sparse mode the network sees depth only through that fill, which keeps
//! it usable when the sparse map gets denser than in training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::{restore_into, Checkpoint};
use crate::depthmap::augment::AugmentConfig;
use crate::depthmap::io::{Dataset, Split};
use crate::depthmap::{
    DepthMap, Image, Raster, Sample, SparseDepthMap, UncertaintyMap, LOG_SIGMA_MAX,
};
use crate::error::{ensure_same_dims, Error, Result};
use crate::fusion::{
    fuse_residual, fuse_residual_graph, lambda_weight, merge_plug_and_play, pack_url_input,
    FusionConfig, PackedInput, WeightMap,
};
use crate::losses::{self, EdgeWeights, LossConfig, PNorm, Target};
use crate::metrics::{evaluate, EvalConfig, SplitReport};
use crate::nn::{Adam, AdamConfig, Bound, Conv, LrSchedule, ParamStore};
use crate::spade::SpadeModel;
use crate::tensor::{Shape, Tensor};
use crate::train::{check_loss, epoch_batches, prepare_batch, LossRecord, PhaseConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    /// Image plus the raw (or merged) sparse depth map.
    Sparse,
    /// Image plus the packed `[z, zhat, sigma]` channels.
    Packed,
}

/// Depth input handed to a backbone alongside the image.
#[derive(Clone, Copy, Debug)]
pub enum BackboneInput<'a> {
    Sparse(&'a SparseDepthMap),
    Packed(&'a PackedInput),
}

impl BackboneInput<'_> {
    pub fn mode(&self) -> InputMode {
        match self {
            BackboneInput::Sparse(_) => InputMode::Sparse,
            BackboneInput::Packed(_) => InputMode::Packed,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        match self {
            BackboneInput::Sparse(z) => z.dims(),
            BackboneInput::Packed(p) => p.dims(),
        }
    }
}

/// The plug-in contract for depth-completion networks.
///
/// Implementors describe their parameters and a differentiable forward pass
/// over batched tensors; inference and training are built on top of these.
pub trait Backbone: Send + Sync {
    /// Registry name.
    fn name(&self) -> &'static str;

    fn mode(&self) -> InputMode;

    /// Norm of the supervised loss the backbone is trained with.
    fn loss_norm(&self) -> PNorm;

    fn params(&self) -> &ParamStore;

    fn params_mut(&mut self) -> &mut ParamStore;

    /// Network input tensor for a batch of equally sized inputs.
    fn input_tensor(&self, images: &[&Image], inputs: &[BackboneInput<'_>]) -> Result<Tensor>;

    /// Differentiable forward; returns a strictly positive `N x 1 x H x W` depth.
    fn graph_forward(&self, g: &mut Graph, p: &Bound, input: &Tensor) -> Var;

    /// Serializable description sufficient to rebuild the layout.
    fn metadata(&self) -> serde_json::Value;

    fn forward(&self, image: &Image, input: BackboneInput<'_>) -> Result<DepthMap> {
        Ok(self
            .forward_batch(&[image], &[input])?
            .pop()
            .expect("one output per input"))
    }

    fn forward_batch(
        &self,
        images: &[&Image],
        inputs: &[BackboneInput<'_>],
    ) -> Result<Vec<DepthMap>> {
        let x = self.input_tensor(images, inputs)?;
        let mut g = Graph::new();
        let p = self.params().bind(&mut g, |_| false);
        let out = self.graph_forward(&mut g, &p, &x);
        let t = g.value(out);
        if !t.is_finite() {
            return Err(Error::Input(format!(
                "backbone {} produced non-finite depth",
                self.name()
            )));
        }
        let s = t.shape();
        (0..s.n)
            .map(|n| DepthMap::dense(s.h, s.w, t.plane(n, 0).to_vec()))
            .collect()
    }

    fn to_checkpoint(&self) -> Checkpoint {
        let mut metadata = self.metadata();
        if let Some(m) = metadata.as_object_mut() {
            m.insert("kind".into(), "backbone".into());
            m.insert("name".into(), self.name().into());
        }
        Checkpoint {
            metadata,
            params: self.params().clone(),
        }
    }
}

/// Constructor entry of the backbone registry.
pub struct BackboneEntry {
    pub name: &'static str,
    pub description: &'static str,
    /// Fresh model from a JSON architecture description (`null` for defaults).
    pub create: fn(&serde_json::Value, InputMode, u64) -> Result<Box<dyn Backbone>>,
    /// Rebuilds a model from its checkpoint.
    pub load: fn(&Checkpoint) -> Result<Box<dyn Backbone>>,
}

pub fn registry() -> &'static [BackboneEntry] {
    &[BackboneEntry {
        name: ReferenceBackbone::NAME,
        description: "small encoder-decoder refining a depth prior with a bounded log-ratio",
        create: |arch, mode, seed| {
            let arch: BackboneArch = if arch.is_null() {
                BackboneArch::default()
            } else {
                serde_json::from_value(arch.clone())
                    .map_err(|e| Error::Config(format!("backbone arch: {e}")))?
            };
            Ok(Box::new(ReferenceBackbone::new(arch, mode, seed)?))
        },
        load: |ck| Ok(Box::new(ReferenceBackbone::from_checkpoint(ck)?)),
    }]
}

fn lookup(name: &str) -> Result<&'static BackboneEntry> {
    registry().iter().find(|e| e.name == name).ok_or_else(|| {
        let known: Vec<&str> = registry().iter().map(|e| e.name).collect();
        Error::Config(format!(
            "unknown backbone {name:?}; available: {}",
            known.join(", ")
        ))
    })
}

pub fn create_backbone(
    name: &str,
    arch: &serde_json::Value,
    mode: InputMode,
    seed: u64,
) -> Result<Box<dyn Backbone>> {
    (lookup(name)?.create)(arch, mode, seed)
}

pub fn load_backbone(ck: &Checkpoint) -> Result<Box<dyn Backbone>> {
    let kind: String = ck.meta("kind")?;
    if kind != "backbone" {
        return Err(Error::Checkpoint(format!(
            "expected a backbone checkpoint, found {kind}"
        )));
    }
    let name: String = ck.meta("name")?;
    (lookup(&name)?.load)(ck)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneArch {
    pub levels: usize,
    pub base_channels: usize,
    /// Depth normalization of the input channels.
    pub max_depth: f64,
    /// Prior used where a sparse map has no measurements at all.
    pub fallback_depth: f64,
    /// Bound on `|ln(dhat / prior)|`.
    pub max_log_ratio: f64,
    pub loss_norm: PNorm,
}

impl Default for BackboneArch {
    fn default() -> Self {
        BackboneArch {
            levels: 4,
            base_channels: 32,
            max_depth: 80.0,
            fallback_depth: 20.0,
            max_log_ratio: 3.0,
            loss_norm: PNorm::L1,
        }
    }
}

impl BackboneArch {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 || self.base_channels == 0 {
            return Err(Error::Config(
                "backbone needs levels >= 1 and base_channels >= 1".into(),
            ));
        }
        for (name, v) in [
            ("max_depth", self.max_depth),
            ("fallback_depth", self.fallback_depth),
            ("max_log_ratio", self.max_log_ratio),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "backbone {name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    fn channels(&self, i: usize) -> usize {
        self.base_channels << i.min(2)
    }
}

impl InputMode {
    /// Convolved input channels of the reference backbone: the image plus
    /// `[z, zhat, sigma]` when packed, or plus the fill of `z` when sparse.
    pub fn reference_channels(self) -> usize {
        match self {
            InputMode::Packed => 6,
            InputMode::Sparse => 4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReferenceBackbone {
    pub arch: BackboneArch,
    pub mode: InputMode,
    params: ParamStore,
    stem: Conv,
    downs: Vec<Conv>,
    ups: Vec<Conv>,
    head: Conv,
}

impl ReferenceBackbone {
    pub const NAME: &'static str = "reference";
    const GROUP: &'static str = "backbone";

    pub fn new(arch: BackboneArch, mode: InputMode, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let g = Self::GROUP;
        let stem = Conv::new(
            &mut params,
            "bb.stem",
            g,
            mode.reference_channels(),
            arch.channels(0),
            3,
            1,
            &mut rng,
        );
        let downs = (1..=arch.levels)
            .map(|i| {
                let (cin, cout) = (arch.channels(i - 1), arch.channels(i));
                Conv::new(
                    &mut params,
                    &format!("bb.down{i}"),
                    g,
                    cin,
                    cout,
                    3,
                    2,
                    &mut rng,
                )
            })
            .collect();
        let ups = (0..arch.levels)
            .map(|i| {
                let (cin, cout) = (arch.channels(i + 1) + arch.channels(i), arch.channels(i));
                Conv::new(
                    &mut params,
                    &format!("bb.up{i}"),
                    g,
                    cin,
                    cout,
                    3,
                    1,
                    &mut rng,
                )
            })
            .collect();
        let head = Conv::new(
            &mut params,
            "bb.head",
            g,
            arch.channels(0),
            1,
            3,
            1,
            &mut rng,
        );
        let w = params.get_mut(head.weight);
        w.tensor = Tensor::zeros(w.tensor.shape());
        Ok(ReferenceBackbone {
            arch,
            mode,
            params,
            stem,
            downs,
            ups,
            head,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut bb = Self::new(ck.meta("arch")?, ck.meta("mode")?, 0)?;
        restore_into(&mut bb.params, &ck.params)?;
        if ck.params.len() != bb.params.len() {
            return Err(Error::Checkpoint(
                "unexpected extra backbone tensors".into(),
            ));
        }
        Ok(bb)
    }

    /// Depth prior and the depth channels for one input.
    fn depth_channels(&self, input: &BackboneInput<'_>) -> (Vec<f64>, Vec<f64>) {
        let m = self.arch.max_depth;
        match input {
            BackboneInput::Packed(p) => {
                let prior = p.channel(1).to_vec();
                let mut ch = Vec::with_capacity(3 * prior.len());
                ch.extend(p.channel(0).iter().map(|v| v / m));
                ch.extend(p.channel(1).iter().map(|v| v / m));
                ch.extend(p.channel(2).iter().map(|v| v / LOG_SIGMA_MAX));
                (prior, ch)
            }
            BackboneInput::Sparse(z) => {
                let prior = normalized_fill(z, self.arch.fallback_depth);
                let ch = prior.iter().map(|v| v / m).collect();
                (prior, ch)
            }
        }
    }
}

impl Backbone for ReferenceBackbone {
    fn name(&self) -> &'static str {
        Self::NAME
    }

    fn mode(&self) -> InputMode {
        self.mode
    }

    fn loss_norm(&self) -> PNorm {
        self.arch.loss_norm
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Channels: 3 image, the depth channels, then the prior as a last
    /// channel that the network does not convolve but scales its output by.
    fn input_tensor(&self, images: &[&Image], inputs: &[BackboneInput<'_>]) -> Result<Tensor> {
        if images.is_empty() || images.len() != inputs.len() {
            return Err(Error::Input(format!(
                "backbone batch has {} images and {} depth inputs",
                images.len(),
                inputs.len()
            )));
        }
        let dims = images[0].dims();
        let mut items = Vec::with_capacity(images.len());
        for (img, input) in images.iter().zip(inputs) {
            if input.mode() != self.mode {
                return Err(Error::Input(format!(
                    "backbone expects {:?} input, got {:?}",
                    self.mode,
                    input.mode()
                )));
            }
            ensure_same_dims("backbone batch", img.dims(), dims)?;
            ensure_same_dims("backbone image vs depth", img.dims(), input.dims())?;
            let (prior, depth) = self.depth_channels(input);
            let (h, w) = dims;
            let c = self.mode.reference_channels() + 1;
            let mut data = Vec::with_capacity(c * h * w);
            data.extend_from_slice(img.data());
            data.extend(depth);
            data.extend(prior);
            items.push(Tensor::from_vec(Shape::new(1, c, h, w), data));
        }
        Ok(Tensor::stack(&items))
    }

    fn graph_forward(&self, g: &mut Graph, p: &Bound, input: &Tensor) -> Var {
        let s = input.shape();
        assert_eq!(
            s.c,
            self.mode.reference_channels() + 1,
            "reference backbone input channels"
        );
        let (features, prior) = split_last_channel(input);
        let m = 1 << self.arch.levels;
        let (ph, pw) = (s.h.div_ceil(m) * m, s.w.div_ceil(m) * m);
        let x = g.constant(features.pad_to(ph, pw));
        let stem = self.stem.forward(g, p, x);
        let mut feats = vec![g.silu(stem)];
        for down in &self.downs {
            let y = down.forward(g, p, *feats.last().expect("stem feature present"));
            feats.push(g.silu(y));
        }
        let mut y = feats[self.arch.levels];
        for i in (0..self.arch.levels).rev() {
            let up = g.upsample2(y);
            let cat = g.concat(up, feats[i]);
            let conv = self.ups[i].forward(g, p, cat);
            y = g.silu(conv);
        }
        let raw = self.head.forward(g, p, y);
        let raw = g.crop(raw, s.h, s.w);
        let r = self.arch.max_log_ratio;
        let bounded = g.clamp(raw, -r, r);
        let ratio = g.exp(bounded);
        g.mul_const(ratio, prior)
    }

    fn metadata(&self) -> serde_json::Value {
        serde_json::json!({ "arch": self.arch, "mode": self.mode })
    }
}

fn split_last_channel(t: &Tensor) -> (Tensor, Tensor) {
    let s = t.shape();
    let mut head = Vec::with_capacity(s.n * (s.c - 1) * s.plane());
    let mut last = Vec::with_capacity(s.n * s.plane());
    for n in 0..s.n {
        for c in 0..s.c - 1 {
            head.extend_from_slice(t.plane(n, c));
        }
        last.extend_from_slice(t.plane(n, s.c - 1));
    }
    (
        Tensor::from_vec(Shape::new(s.n, s.c - 1, s.h, s.w), head),
        Tensor::from_vec(Shape::new(s.n, 1, s.h, s.w), last),
    )
}

/// Dense fill of a sparse map: each pixel takes the mean measurement of the
/// smallest square window (radius 0, 1, 2, 4, ...) that contains one.
/// Returns `fallback` everywhere when there are no measurements.
pub fn normalized_fill(z: &SparseDepthMap, fallback: f64) -> Vec<f64> {
    let (h, w) = z.dims();
    if z.measured_count() == 0 {
        return vec![fallback; h * w];
    }
    // integral images with a zero border row and column
    let stride = w + 1;
    let mut sum = vec![0.0; (h + 1) * stride];
    let mut cnt = vec![0u32; (h + 1) * stride];
    for y in 0..h {
        for x in 0..w {
            let v = z.get(y, x);
            let i = (y + 1) * stride + x + 1;
            sum[i] = v + sum[i - 1] + sum[i - stride] - sum[i - stride - 1];
            cnt[i] = u32::from(v > 0.0) + cnt[i - 1] + cnt[i - stride] - cnt[i - stride - 1];
        }
    }
    let boxed = |y0: usize, x0: usize, y1: usize, x1: usize| {
        let (a, b, c, d) = (
            y0 * stride + x0,
            y0 * stride + x1,
            y1 * stride + x0,
            y1 * stride + x1,
        );
        (
            sum[d] - sum[b] - sum[c] + sum[a],
            cnt[d] + cnt[a] - cnt[b] - cnt[c],
        )
    };
    let max_r = h.max(w);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut r = 0;
            loop {
                let (y0, x0) = (y.saturating_sub(r), x.saturating_sub(r));
                let (y1, x1) = ((y + r + 1).min(h), (x + r + 1).min(w));
                let (s, n) = boxed(y0, x0, y1, x1);
                if n > 0 {
                    out.push(s / f64::from(n));
                    break;
                }
                r = if r == 0 { 1 } else { 2 * r };
                debug_assert!(
                    r <= 2 * max_r,
                    "a measurement exists, so some window finds it"
                );
            }
        }
    }
    out
}

/// Intermediate maps of a URL forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct UrlOutput {
    pub d: DepthMap,
    pub zhat: DepthMap,
    pub sigma: UncertaintyMap,
    pub lambda: WeightMap,
    pub dhat: DepthMap,
}

/// SpaDe, then the backbone on the packed input, then the uncertainty-weighted blend.
pub fn url_forward(
    image: &Image,
    z: &SparseDepthMap,
    spade: &SpadeModel,
    backbone: &dyn Backbone,
    cfg: &FusionConfig,
) -> Result<UrlOutput> {
    if backbone.mode() != InputMode::Packed {
        return Err(Error::Config(
            "URL needs a backbone in packed input mode".into(),
        ));
    }
    ensure_same_dims("url image vs sparse", image.dims(), z.dims())?;
    let s = spade.forward(z)?;
    let packed = pack_url_input(z, &s.zhat, &s.sigma)?;
    let dhat = backbone.forward(image, BackboneInput::Packed(&packed))?;
    let lambda = lambda_weight(&s.sigma, cfg);
    let d = fuse_residual(&s.zhat, &dhat, &lambda)?;
    Ok(UrlOutput {
        d,
        zhat: s.zhat,
        sigma: s.sigma,
        lambda,
        dhat,
    })
}

/// Settings for training a backbone, with or without URL.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UrlConfig {
    pub fusion: FusionConfig,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    pub phase: PhaseConfig,
    pub batch_size: usize,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for UrlConfig {
    fn default() -> Self {
        UrlConfig {
            fusion: FusionConfig::default(),
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            phase: PhaseConfig {
                epochs: 90,
                lr: LrSchedule {
                    base: 1e-3,
                    milestones: vec![(10, 5e-4), (20, 2e-4), (25, 1e-4)],
                },
            },
            batch_size: 4,
            augment: AugmentConfig {
                jitter: crate::depthmap::augment::ColorJitter {
                    brightness: 0.2,
                    contrast: 0.2,
                    saturation: 0.2,
                },
                resize_range: Some([1.0, 1.25]),
                crop: Some((544, 704)),
                flip_prob: 0.5,
            },
            seed: 0,
        }
    }
}

impl UrlConfig {
    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        self.loss.validate()?;
        self.phase.validate("url")?;
        self.augment.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Differentiable URL objective for a batch. `spade` is only evaluated, never
/// bound for gradients. Returns the loss and the fused prediction.
pub fn url_loss(
    g: &mut Graph,
    p: &Bound,
    batch: &[Sample],
    spade: &SpadeModel,
    backbone: &dyn Backbone,
    cfg: &UrlConfig,
) -> Result<(Var, Var)> {
    let zs: Vec<&SparseDepthMap> = batch.iter().map(|s| &s.sparse).collect();
    let outs = spade.forward_batch(&zs)?;
    let packed = batch
        .iter()
        .zip(&outs)
        .map(|(s, o)| pack_url_input(&s.sparse, &o.zhat, &o.sigma))
        .collect::<Result<Vec<_>>>()?;
    let images: Vec<&Image> = batch.iter().map(|s| &s.image).collect();
    let inputs: Vec<BackboneInput<'_>> = packed.iter().map(BackboneInput::Packed).collect();
    let x = backbone.input_tensor(&images, &inputs)?;
    let dhat = backbone.graph_forward(g, p, &x);
    let zhat = Tensor::stack(&outs.iter().map(|o| o.zhat.to_tensor()).collect::<Vec<_>>());
    let lam = Tensor::stack(
        &outs
            .iter()
            .map(|o| lambda_weight(&o.sigma, &cfg.fusion).to_tensor())
            .collect::<Vec<_>>(),
    );
    let d = fuse_residual_graph(g, &zhat, dhat, &lam);
    let loss = objective(g, d, batch, backbone.loss_norm(), &cfg.loss)?;
    Ok((loss, d))
}

/// Supervised plus edge-aware smoothness loss of a prediction for `batch`.
pub fn objective(
    g: &mut Graph,
    d: Var,
    batch: &[Sample],
    p: PNorm,
    cfg: &LossConfig,
) -> Result<Var> {
    let gts: Vec<&DepthMap> = batch.iter().map(|s| &s.gt).collect();
    let images: Vec<&Image> = batch.iter().map(|s| &s.image).collect();
    let target = Target::new(&gts)?;
    let sup = losses::supervised(g, d, &target, p)?;
    let sm = losses::smoothness(g, d, &EdgeWeights::new(&images)?)?;
    Ok(losses::total(g, sup, sm, cfg))
}

/// Trains `backbone` in place and returns the loss history.
///
/// Packed backbones are trained through URL with `spade` frozen; sparse
/// backbones are trained directly on raw sparse input and ignore `spade`.
pub fn train_backbone(
    backbone: &mut dyn Backbone,
    spade: Option<&SpadeModel>,
    samples: &[Sample],
    cfg: &UrlConfig,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    let phase = match backbone.mode() {
        InputMode::Packed => "url",
        InputMode::Sparse => "backbone",
    };
    let spade = match (backbone.mode(), spade) {
        (InputMode::Packed, None) => {
            return Err(Error::Config("URL training needs a SpaDe model".into()))
        }
        (_, s) => s,
    };
    let mut adam = Adam::new(cfg.adam, backbone.params());
    let mut history = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.phase.epochs {
        let lr = cfg.phase.lr.at_epoch(epoch);
        for idx in epoch_batches(samples.len(), cfg.batch_size, cfg.seed, epoch) {
            let batch = prepare_batch(samples, &idx, &cfg.augment, cfg.seed, step)?;
            let mut g = Graph::new();
            let p = backbone.params().bind(&mut g, |_| true);
            let loss = match (backbone.mode(), spade) {
                (InputMode::Packed, Some(spade)) => {
                    url_loss(&mut g, &p, &batch, spade, &*backbone, cfg)?.0
                }
                _ => {
                    let images: Vec<&Image> = batch.iter().map(|s| &s.image).collect();
                    let inputs: Vec<BackboneInput<'_>> = batch
                        .iter()
                        .map(|s| BackboneInput::Sparse(&s.sparse))
                        .collect();
                    let x = backbone.input_tensor(&images, &inputs)?;
                    let d = backbone.graph_forward(&mut g, &p, &x);
                    objective(&mut g, d, &batch, backbone.loss_norm(), &cfg.loss)?
                }
            };
            let value = g.value(loss).item();
            check_loss(phase, step, value)?;
            let grads = g.backward(loss);
            adam.update(backbone.params_mut(), &p, &grads, lr);
            history.push(LossRecord {
                phase: phase.to_string(),
                epoch,
                step,
                lr,
                loss: value,
            });
            step += 1;
        }
        if let Some(last) = history.last() {
            log::info!("{phase} epoch {epoch} loss {:.5}", last.loss);
        }
    }
    Ok(history)
}

/// URL training: the backbone must take packed input; SpaDe stays frozen.
pub fn train_url(
    spade: &SpadeModel,
    backbone: &mut dyn Backbone,
    samples: &[Sample],
    cfg: &UrlConfig,
) -> Result<Vec<LossRecord>> {
    if backbone.mode() != InputMode::Packed {
        return Err(Error::Config(
            "URL needs a backbone in packed input mode".into(),
        ));
    }
    train_backbone(backbone, Some(spade), samples, cfg)
}

/// Sparse input for a backbone: raw `z`, or `z` merged with SpaDe
/// predictions when `spade` is given.
pub fn plug_and_play_input(
    z: &SparseDepthMap,
    spade: Option<&SpadeModel>,
    cfg: &FusionConfig,
) -> Result<SparseDepthMap> {
    match spade {
        None => Ok(z.clone()),
        Some(m) => {
            let out = m.forward(z)?;
            merge_plug_and_play(z, &out.zhat, &out.sigma, cfg)
        }
    }
}

/// Evaluates a sparse-input backbone on `split` of `dataset`, with SpaDe
/// preprocessing when `spade` is given. The backbone is never updated.
pub fn plug_and_play_eval(
    method: &str,
    backbone: &dyn Backbone,
    spade: Option<&SpadeModel>,
    dataset: &Dataset,
    split: Option<Split>,
    fusion: &FusionConfig,
    eval: &EvalConfig,
) -> Result<SplitReport> {
    if backbone.mode() != InputMode::Sparse {
        return Err(Error::Config(
            "plug-and-play needs a backbone in sparse input mode".into(),
        ));
    }
    fusion.validate()?;
    evaluate(method, dataset, split, eval, |s: &Sample| {
        let merged = plug_and_play_input(&s.sparse, spade, fusion)?;
        backbone.forward(&s.image, BackboneInput::Sparse(&merged))
    })
}
