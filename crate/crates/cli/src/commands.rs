use std::path::{Path, PathBuf};

use alldepth::backbone::{
    create_backbone, load_backbone, plug_and_play_eval, plug_and_play_input, train_backbone,
    train_url, url_forward, Backbone, BackboneInput, InputMode,
};
use alldepth::checkpoint::Checkpoint;
use alldepth::depthmap::io::{self, Dataset, Manifest, Split};
use alldepth::depthmap::{Sample, Tag};
use alldepth::fusion::FusionConfig;
use alldepth::metrics::{
    evaluate, report_csv, report_markdown, write_error_map, write_sigma_map, SplitReport,
};
use alldepth::spade::{
    load_checkpoint, train_spade_stage1, train_spade_stage2, SpadeModel, TrainState,
};
use alldepth::synth::write_dataset;
use alldepth::train::{write_loss_csv, LossRecord};
use alldepth::{Error, Result};
use serde::Serialize;

use crate::config::{checkpoint_path, RunConfig};

/// Upper bound used to scale error-map brightness, meters.
const ERROR_MAP_RANGE: f64 = 10.0;

pub struct Context {
    pub cfg: RunConfig,
    pub digest: String,
}

impl Context {
    /// Validates the final configuration and fixes its digest.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let digest = cfg.digest();
        log::info!("config digest {digest}");
        Ok(Context { cfg, digest })
    }
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path)
}

fn training_samples(ds: &Dataset, tag: Option<Tag>) -> Result<Vec<Sample>> {
    let samples: Vec<Sample> = ds
        .load_split(Some(Split::Train))?
        .into_iter()
        .filter(|s| tag.is_none_or(|t| s.tag == t))
        .collect();
    if samples.is_empty() {
        return Err(Error::Config(
            "the manifest has no matching training samples".into(),
        ));
    }
    Ok(samples)
}

/// An existing checkpoint, or a configuration error naming the missing file.
fn existing_checkpoint(p: &Path, what: &str) -> Result<PathBuf> {
    let path = checkpoint_path(p);
    if !path.is_file() {
        return Err(Error::Config(format!(
            "{what} checkpoint {} does not exist",
            path.display()
        )));
    }
    Ok(path)
}

fn with_meta(mut ck: Checkpoint, entries: &[(&str, serde_json::Value)]) -> Checkpoint {
    let meta = ck
        .metadata
        .as_object_mut()
        .expect("checkpoint metadata is an object");
    for (k, v) in entries {
        meta.insert((*k).to_string(), v.clone());
    }
    ck
}

fn default_losses_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("losses.csv")
}

pub fn generate_data(ctx: &Context, out: &Path) -> Result<PathBuf> {
    let d = &ctx.cfg.data;
    let path = write_dataset(d.scenes, &d.dataset, out, d.seed, Some(ctx.digest.clone()))?;
    log::info!("wrote {} scenes to {}", d.scenes, path.display());
    Ok(path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageSel {
    One,
    Two,
    Both,
}

pub fn train_spade(
    ctx: &Context,
    data: &Path,
    stage: StageSel,
    ckpt: &Path,
    init: Option<&Path>,
    losses: Option<&Path>,
) -> Result<TrainState> {
    let cfg = &ctx.cfg.spade;
    let out = checkpoint_path(ckpt);
    // resolve the stage-1 input before spending time on data
    let init = match stage {
        StageSel::Two => Some(existing_checkpoint(init.unwrap_or(ckpt), "stage-1")?),
        _ => None,
    };
    let samples = training_samples(&load_dataset(data)?, None)?;
    let state = match (stage, init) {
        (StageSel::One, _) => train_spade_stage1(&samples, cfg)?,
        (StageSel::Both, _) => {
            train_spade_stage2(train_spade_stage1(&samples, cfg)?, &samples, cfg)?
        }
        (StageSel::Two, Some(path)) => {
            let state = load_checkpoint(&path)?;
            if state.stage < 1 {
                return Err(Error::Config(format!(
                    "{} holds no completed stage-1 model",
                    path.display()
                )));
            }
            train_spade_stage2(state, &samples, cfg)?
        }
        (StageSel::Two, None) => unreachable!("stage 2 input resolved above"),
    };
    let ck = with_meta(
        state.to_checkpoint(),
        &[("config_digest", ctx.digest.clone().into())],
    );
    ck.save(&out)?;
    write_loss_csv(
        &state.history,
        Some(&ctx.digest),
        losses.map_or_else(|| default_losses_path(&out), Path::to_path_buf),
    )?;
    log::info!(
        "saved stage-{} SpaDe checkpoint to {}",
        state.stage,
        out.display()
    );
    Ok(state)
}

fn load_spade(p: &Path) -> Result<SpadeModel> {
    SpadeModel::from_checkpoint(&Checkpoint::load(existing_checkpoint(p, "SpaDe")?)?)
}

fn load_any_backbone(p: &Path) -> Result<Box<dyn Backbone>> {
    load_backbone(&Checkpoint::load(existing_checkpoint(p, "backbone")?)?)
}

/// Writes SpaDe-merged sparse maps plus copies of images and ground truth
/// as a new dataset under `out`.
pub fn preprocess(ctx: &Context, data: &Path, spade_ckpt: &Path, out: &Path) -> Result<PathBuf> {
    let spade = load_spade(spade_ckpt)?;
    let ds = load_dataset(data)?;
    let fusion = &ctx.cfg.url.fusion;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut manifest = Manifest {
        config_digest: Some(ctx.digest.clone()),
        ..Default::default()
    };
    let mut content = Vec::new();
    let (mut before, mut after) = (0usize, 0usize);
    for record in &ds.manifest.records {
        let sample = ds.load_record(record)?;
        let merged = plug_and_play_input(&sample.sparse, Some(&spade), fusion)?;
        before += sample.sparse.measured_count();
        after += merged.measured_count();
        for rel in [&record.image_path, &record.gt_path] {
            let (src, dst) = (ds.resolve(rel), out.join(rel));
            create_parent(&dst)?;
            std::fs::copy(&src, &dst).map_err(|e| Error::io(&src, e))?;
        }
        let sparse_out = out.join(&record.sparse_path);
        create_parent(&sparse_out)?;
        io::write_sparse_png16(&merged, &sparse_out)?;
        for rel in [&record.image_path, &record.sparse_path, &record.gt_path] {
            let p = out.join(rel);
            content.extend(std::fs::read(&p).map_err(|e| Error::io(&p, e))?);
        }
        manifest.records.push(record.clone());
    }
    manifest.content_digest = Some(io::sha256_hex(&content));
    let path = out.join("manifest.json");
    manifest.save(&path)?;
    log::info!(
        "merged {} records: {before} -> {after} measured pixels",
        ds.len()
    );
    Ok(path)
}

fn create_parent(p: &Path) -> Result<()> {
    match p.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
        }
        _ => Ok(()),
    }
}

fn save_backbone(
    ctx: &Context,
    bb: &dyn Backbone,
    history: &[LossRecord],
    extra: &[(&str, serde_json::Value)],
    ckpt: &Path,
    losses: Option<&Path>,
) -> Result<()> {
    let out = checkpoint_path(ckpt);
    let mut meta = vec![
        ("config_digest", ctx.digest.clone().into()),
        (
            "history",
            serde_json::to_value(history).expect("history serializes"),
        ),
    ];
    meta.extend_from_slice(extra);
    with_meta(bb.to_checkpoint(), &meta).save(&out)?;
    write_loss_csv(
        history,
        Some(&ctx.digest),
        losses.map_or_else(|| default_losses_path(&out), Path::to_path_buf),
    )?;
    log::info!("saved {} backbone to {}", bb.name(), out.display());
    Ok(())
}

/// Trains a sparse-input backbone directly, optionally on one tag only.
pub fn train_sparse_backbone(
    ctx: &Context,
    data: &Path,
    tag: Option<Tag>,
    ckpt: &Path,
    losses: Option<&Path>,
) -> Result<()> {
    let b = &ctx.cfg.backbone;
    let samples = training_samples(&load_dataset(data)?, tag)?;
    let mut bb = create_backbone(&b.name, &b.arch, InputMode::Sparse, b.train.seed)?;
    let history = train_backbone(bb.as_mut(), None, &samples, &b.train)?;
    let tag_meta = serde_json::to_value(tag).expect("tag serializes");
    save_backbone(
        ctx,
        bb.as_ref(),
        &history,
        &[("train_tag", tag_meta)],
        ckpt,
        losses,
    )
}

pub fn train_url_backbone(
    ctx: &Context,
    data: &Path,
    spade_ckpt: &Path,
    ckpt: &Path,
    losses: Option<&Path>,
) -> Result<()> {
    let spade = load_spade(spade_ckpt)?;
    let samples = training_samples(&load_dataset(data)?, None)?;
    let b = &ctx.cfg.backbone;
    let cfg = &ctx.cfg.url;
    let mut bb = create_backbone(&b.name, &b.arch, InputMode::Packed, cfg.seed)?;
    let history = train_url(&spade, bb.as_mut(), &samples, cfg)?;
    let extra = [
        (
            "fusion",
            serde_json::to_value(cfg.fusion).expect("fusion serializes"),
        ),
        ("spade_checksum", spade.checksum(None).into()),
    ];
    save_backbone(ctx, bb.as_ref(), &history, &extra, ckpt, losses)
}

/// A model to evaluate, parsed from `kind[=ckpt[,ckpt]]`.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelSpec {
    GroundTruth,
    Spade(PathBuf),
    Backbone(PathBuf),
    PlugAndPlay { spade: PathBuf, backbone: PathBuf },
    Url { spade: PathBuf, backbone: PathBuf },
}

impl std::str::FromStr for ModelSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (kind, rest) = s.split_once('=').unwrap_or((s, ""));
        let paths: Vec<PathBuf> = rest
            .split(',')
            .filter(|p| !p.is_empty())
            .map(PathBuf::from)
            .collect();
        let usage =
            "expected gt, spade=CKPT, backbone=CKPT, pnp=SPADE,BACKBONE or url=SPADE,BACKBONE";
        match (kind, paths.as_slice()) {
            ("gt", []) => Ok(ModelSpec::GroundTruth),
            ("spade", [p]) => Ok(ModelSpec::Spade(p.clone())),
            ("backbone", [p]) => Ok(ModelSpec::Backbone(p.clone())),
            ("pnp", [s, b]) => Ok(ModelSpec::PlugAndPlay {
                spade: s.clone(),
                backbone: b.clone(),
            }),
            ("url", [s, b]) => Ok(ModelSpec::Url {
                spade: s.clone(),
                backbone: b.clone(),
            }),
            _ => Err(format!("invalid model {s:?}: {usage}")),
        }
    }
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(
        || p.display().to_string(),
        |s| s.to_string_lossy().into_owned(),
    )
}

impl ModelSpec {
    /// Report label; independent of directories so reports compare across runs.
    pub fn label(&self) -> String {
        match self {
            ModelSpec::GroundTruth => "gt".into(),
            ModelSpec::Spade(p) => format!("spade:{}", stem(p)),
            ModelSpec::Backbone(p) => format!("backbone:{}", stem(p)),
            ModelSpec::PlugAndPlay { spade, backbone } => {
                format!("pnp:{}+{}", stem(spade), stem(backbone))
            }
            ModelSpec::Url { spade, backbone } => format!("url:{}+{}", stem(spade), stem(backbone)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReportFormats {
    pub csv: bool,
    pub markdown: bool,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    config_digest: &'a str,
    manifest_content_digest: Option<&'a str>,
    split: Option<Split>,
    reports: &'a [SplitReport],
}

fn url_fusion(bb_ckpt: &Path, fallback: &FusionConfig) -> Result<FusionConfig> {
    let ck = Checkpoint::load(existing_checkpoint(bb_ckpt, "backbone")?)?;
    Ok(ck.meta("fusion").unwrap_or(*fallback))
}

fn evaluate_model(
    ctx: &Context,
    ds: &Dataset,
    split: Option<Split>,
    spec: &ModelSpec,
) -> Result<SplitReport> {
    let label = spec.label();
    let eval = &ctx.cfg.eval;
    let fusion = &ctx.cfg.url.fusion;
    match spec {
        ModelSpec::GroundTruth => evaluate(&label, ds, split, eval, |s| Ok(s.gt.clone())),
        ModelSpec::Spade(p) => {
            let m = load_spade(p)?;
            evaluate(&label, ds, split, eval, |s| Ok(m.forward(&s.sparse)?.zhat))
        }
        ModelSpec::Backbone(p) => plug_and_play_eval(
            &label,
            load_any_backbone(p)?.as_ref(),
            None,
            ds,
            split,
            fusion,
            eval,
        ),
        ModelSpec::PlugAndPlay { spade, backbone } => {
            let m = load_spade(spade)?;
            plug_and_play_eval(
                &label,
                load_any_backbone(backbone)?.as_ref(),
                Some(&m),
                ds,
                split,
                fusion,
                eval,
            )
        }
        ModelSpec::Url { spade, backbone } => {
            let m = load_spade(spade)?;
            let bb = load_any_backbone(backbone)?;
            let fusion = url_fusion(backbone, fusion)?;
            evaluate(&label, ds, split, eval, |s| {
                Ok(url_forward(&s.image, &s.sparse, &m, bb.as_ref(), &fusion)?.d)
            })
        }
    }
}

/// Error maps (and uncertainty maps where the model has them) for the
/// first `n` evaluated samples.
fn write_plots(
    ctx: &Context,
    ds: &Dataset,
    split: Option<Split>,
    spec: &ModelSpec,
    n: usize,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let label = spec.label().replace([':', '+'], "_");
    let records = ds
        .manifest
        .records
        .iter()
        .filter(|r| split.is_none_or(|s| r.split == s))
        .take(n);
    let spade = match spec {
        ModelSpec::Spade(p)
        | ModelSpec::PlugAndPlay { spade: p, .. }
        | ModelSpec::Url { spade: p, .. } => Some(load_spade(p)?),
        _ => None,
    };
    let backbone = match spec {
        ModelSpec::Backbone(p)
        | ModelSpec::PlugAndPlay { backbone: p, .. }
        | ModelSpec::Url { backbone: p, .. } => Some(load_any_backbone(p)?),
        _ => None,
    };
    let fusion = match spec {
        ModelSpec::Url { backbone, .. } => url_fusion(backbone, &ctx.cfg.url.fusion)?,
        _ => ctx.cfg.url.fusion,
    };
    for (i, record) in records.enumerate() {
        let s = ctx.cfg.eval.crop_sample(&ds.load_record(record)?)?;
        let (d, sigma) = match (spec, &spade, &backbone) {
            (ModelSpec::GroundTruth, _, _) => (s.gt.clone(), None),
            (ModelSpec::Spade(_), Some(m), _) => {
                let o = m.forward(&s.sparse)?;
                (o.zhat, Some(o.sigma))
            }
            (ModelSpec::Url { .. }, Some(m), Some(bb)) => {
                let o = url_forward(&s.image, &s.sparse, m, bb.as_ref(), &fusion)?;
                (o.d, Some(o.sigma))
            }
            (_, m, Some(bb)) => {
                let z = plug_and_play_input(&s.sparse, m.as_ref(), &fusion)?;
                (bb.forward(&s.image, BackboneInput::Sparse(&z))?, None)
            }
            _ => unreachable!("models loaded per spec"),
        };
        write_error_map(
            &d,
            &s.gt,
            ERROR_MAP_RANGE,
            dir.join(format!("{label}_{i:03}_error.png")),
        )?;
        if let Some(sigma) = sigma {
            write_sigma_map(&sigma, dir.join(format!("{label}_{i:03}_sigma.png")))?;
        }
    }
    Ok(())
}

pub struct EvaluateArgs<'a> {
    pub data: &'a Path,
    pub models: &'a [ModelSpec],
    pub split: Option<Split>,
    pub formats: ReportFormats,
    pub out: &'a Path,
    pub plots: usize,
}

pub fn evaluate_models(ctx: &Context, args: &EvaluateArgs<'_>) -> Result<Vec<SplitReport>> {
    let ds = load_dataset(args.data)?;
    if ds.is_empty() {
        return Err(Error::Config(format!(
            "manifest {} lists no samples",
            args.data.display()
        )));
    }
    if args.models.is_empty() {
        return Err(Error::Config("no models to evaluate".into()));
    }
    let reports = args
        .models
        .iter()
        .map(|m| evaluate_model(ctx, &ds, args.split, m))
        .collect::<Result<Vec<_>>>()?;
    let out = args.out;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let write = |name: &str, text: &str| {
        let p = out.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    if args.formats.csv {
        write("report.csv", &report_csv(&reports))?;
    }
    if args.formats.markdown {
        let md = format!(
            "{}\nConfig digest: `{}`\n",
            report_markdown(&reports),
            ctx.digest
        );
        write("report.md", &md)?;
    }
    let record = RunRecord {
        config_digest: &ctx.digest,
        manifest_content_digest: ds.manifest.content_digest.as_deref(),
        split: args.split,
        reports: &reports,
    };
    let mut json = serde_json::to_string_pretty(&record).expect("run record serializes");
    json.push('\n');
    write("run.json", &json)?;
    if args.plots > 0 {
        for m in args.models {
            write_plots(ctx, &ds, args.split, m, args.plots, &out.join("plots"))?;
        }
    }
    Ok(reports)
}
