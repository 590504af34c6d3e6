//! Pipeline stages over a run directory.
//!
//! Layout under the run root:
//!
//! ```text
//! config.txt                      resolved config, rewritten by every stage
//! data/{source_train,source_val,target_train,target_test}/
//! source/epoch_NNN.ckpt, metrics.csv, selected.ckpt, selection.txt
//! valuenet/valuenet.ckpt, metrics.csv
//! adapt/round_R/                  pseudo-labels in the dataset record format,
//!                                 provenance.bin, thresholds.csv, ece_hat.csv
//! adapt/adapted.ckpt, metrics.csv, selection.txt
//! eval/<checkpoint>_<split>/      iou.csv, reliability.csv/.svg, summary.txt
//! summary.csv                     written by `run`
//! ```
//!
//! Each stage reads only files written by earlier stages, so deleting a
//! stage's outputs and re-running it reproduces them byte for byte.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::checkpoint::CheckpointFile;
use super::config::RunConfig;
use crate::autodiff::Tensor;
use crate::calibration::{confidence_and_prediction, export_reliability, EceAccumulator, ReliabilityDiagram};
use crate::datagen::{
    generate_domain, read_dataset, split_validation, write_dataset, Dataset, DomainSpec, LabeledImage, DATASET_INDEX,
};
use crate::error::{Error, Result};
use crate::model::{set_stage_masks, SegArch, SegModel, Stage, ValueArch, ValueNet};
use crate::rng;
use crate::source_stage::{
    select_by_ece_stats, source_metrics_csv, train_source, train_value_net, value_metrics_csv, EceStats,
};
use crate::target_stage::{adapt, target_metrics_csv, ConfusionMatrix, MiouReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    SourceTrain,
    SourceVal,
    TargetTrain,
    TargetTest,
}

impl Split {
    pub const ALL: [Split; 4] = [
        Split::SourceTrain,
        Split::SourceVal,
        Split::TargetTrain,
        Split::TargetTest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Split::SourceTrain => "source_train",
            Split::SourceVal => "source_val",
            Split::TargetTrain => "target_train",
            Split::TargetTest => "target_test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown split `{s}`")))
    }
}

/// Paths inside one run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn split(&self, split: Split) -> PathBuf {
        self.data().join(split.name())
    }

    pub fn source_dir(&self) -> PathBuf {
        self.root.join("source")
    }

    pub fn source_checkpoint(&self, epoch: usize) -> PathBuf {
        self.source_dir().join(format!("epoch_{epoch:03}.ckpt"))
    }

    pub fn selected(&self) -> PathBuf {
        self.source_dir().join("selected.ckpt")
    }

    pub fn valuenet_dir(&self) -> PathBuf {
        self.root.join("valuenet")
    }

    pub fn valuenet(&self) -> PathBuf {
        self.valuenet_dir().join("valuenet.ckpt")
    }

    pub fn adapt_dir(&self) -> PathBuf {
        self.root.join("adapt")
    }

    pub fn round_dir(&self, round: usize) -> PathBuf {
        self.adapt_dir().join(format!("round_{round}"))
    }

    pub fn adapted(&self) -> PathBuf {
        self.adapt_dir().join("adapted.ckpt")
    }

    pub fn eval_dir(&self, checkpoint_label: &str, split: Split) -> PathBuf {
        self.root.join("eval").join(format!("{checkpoint_label}_{split}"))
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.csv")
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn require(path: PathBuf, stage: &'static str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact { stage, path })
    }
}

fn prepare(cfg: &RunConfig) -> Result<RunDir> {
    cfg.validate()?;
    let run = RunDir::new(&cfg.out_dir);
    write(&run.root.join("config.txt"), cfg.render())?;
    Ok(run)
}

fn load_split(run: &RunDir, split: Split) -> Result<Dataset> {
    let dir = run.split(split);
    require(dir.join(DATASET_INDEX), "generate")?;
    read_dataset(&dir)
}

fn seg_model(cfg: &RunConfig, classes: usize) -> Result<SegModel<f32>> {
    let arch = SegArch {
        classes,
        ..SegArch::default()
    };
    SegModel::new(arch, &mut rng::stream(cfg.seed, rng::INIT, 0))
}

fn value_net(cfg: &RunConfig, seg: &SegModel<f32>) -> Result<ValueNet<f32>> {
    let arch = ValueArch {
        in_channels: seg.arch.feature_channels(),
        ..ValueArch::default()
    };
    ValueNet::new(arch, &mut rng::stream(cfg.seed, rng::INIT, 1))
}

fn load_into(params: &mut crate::model::ParamSet<f32>, path: &Path) -> Result<CheckpointFile> {
    let ckpt = CheckpointFile::load(path)?;
    params
        .load_from(&ckpt.params)
        .map_err(|e| Error::format(path, format!("checkpoint does not fit the model: {e}")))?;
    Ok(ckpt)
}

/// Writes the four dataset splits. Refuses to touch existing data unless
/// `force` is set.
pub fn cmd_generate(cfg: &RunConfig, force: bool) -> Result<()> {
    let run = prepare(cfg)?;
    let data = run.data();
    let occupied = fs::read_dir(&data).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied {
        if !force {
            return Err(Error::Config(format!(
                "{} already holds data; pass --force to regenerate",
                data.display()
            )));
        }
        fs::remove_dir_all(&data).map_err(|e| Error::io(&data, e))?;
    }
    let d = &cfg.data;
    let source = generate_domain(&cfg.source_spec())?;
    let fraction = d.source_val as f64 / source.len() as f64;
    let (train, val) = split_validation(&source, fraction, cfg.seed)?;
    let target = generate_domain(&cfg.target_spec())?;
    let (head, tail) = target.images.split_at(d.target_train);
    let part = |images: &[LabeledImage]| Dataset {
        spec: DomainSpec {
            n_images: images.len(),
            ..target.spec.clone()
        },
        images: images.to_vec(),
    };
    write_dataset(&train, &run.split(Split::SourceTrain))?;
    write_dataset(&val, &run.split(Split::SourceVal))?;
    write_dataset(&part(head), &run.split(Split::TargetTrain))?;
    write_dataset(&part(tail), &run.split(Split::TargetTest))
}

/// Trains the source model and writes one checkpoint per epoch.
pub fn cmd_train_source(cfg: &RunConfig) -> Result<()> {
    let run = prepare(cfg)?;
    let train = load_split(&run, Split::SourceTrain)?;
    let val = load_split(&run, Split::SourceVal)?;
    let mut seg = seg_model(cfg, train.spec.classes)?;
    let pool = train_source(&train, &val, &mut seg, &cfg.source, cfg.seed)?;
    for rec in &pool {
        CheckpointFile::new(Stage::Source, rec.params.clone())
            .with_metric("epoch", rec.epoch as f64)
            .with_metric("L_seg", rec.metrics.seg_loss)
            .with_metric("L_ECE_diff", rec.metrics.ece_loss)
            .with_metric("val_ece_mean", rec.val_ece.mean)
            .with_metric("val_ece_max", rec.val_ece.max)
            .with_metric("val_ece_min", rec.val_ece.min)
            .with_metric("source_miou", rec.metrics.source_miou)
            .save(&run.source_checkpoint(rec.epoch))?;
    }
    write(&run.source_dir().join("metrics.csv"), source_metrics_csv(&pool))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceSelection {
    pub epoch: usize,
    pub stats: EceStats,
    pub source_miou: f64,
}

/// Copies the epoch with the smallest validation ECE score to
/// `selected.ckpt`.
pub fn cmd_select_source(cfg: &RunConfig) -> Result<SourceSelection> {
    let run = prepare(cfg)?;
    let mut pool = Vec::with_capacity(cfg.source.epochs);
    for epoch in 1..=cfg.source.epochs {
        let path = require(run.source_checkpoint(epoch), "train-source")?;
        let ckpt = CheckpointFile::load(&path)?;
        let get = |name: &str| {
            ckpt.metric(name)
                .ok_or_else(|| Error::format(&path, format!("metric `{name}` missing")))
        };
        let stats = EceStats {
            mean: get("val_ece_mean")?,
            max: get("val_ece_max")?,
            min: get("val_ece_min")?,
        };
        pool.push((path.clone(), stats, get("source_miou")?));
    }
    let stats: Vec<EceStats> = pool.iter().map(|p| p.1).collect();
    let best = select_by_ece_stats(&stats)?;
    let (path, stats, source_miou) = &pool[best];
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    write(&run.selected(), bytes)?;
    let sel = SourceSelection {
        epoch: best + 1,
        stats: *stats,
        source_miou: *source_miou,
    };
    write(
        &run.source_dir().join("selection.txt"),
        format!(
            "epoch = {}\nscore = {}\nval_ece_mean = {}\nval_ece_max = {}\nval_ece_min = {}\nsource_miou = {}\n",
            sel.epoch,
            stats.score(),
            stats.mean,
            stats.max,
            stats.min,
            source_miou
        ),
    )?;
    Ok(sel)
}

/// Trains the value net on features of the frozen selected source model.
pub fn cmd_train_valuenet(cfg: &RunConfig) -> Result<()> {
    let run = prepare(cfg)?;
    let selected = require(run.selected(), "select-source")?;
    let train = load_split(&run, Split::SourceTrain)?;
    let val = load_split(&run, Split::SourceVal)?;
    let mut seg = seg_model(cfg, train.spec.classes)?;
    load_into(&mut seg.params, &selected)?;
    let mut value = value_net(cfg, &seg)?;
    set_stage_masks(&mut seg, Some(&mut value), Stage::ValueNet);
    let report = train_value_net(&train, &val, &seg, &mut value, &cfg.value, cfg.seed)?;
    CheckpointFile::new(Stage::ValueNet, value.params)
        .with_metric("epoch", report.best_epoch as f64)
        .with_metric("val_L_match", report.best_val_match())
        .with_metric("val_target_variance", report.val_variance)
        .save(&run.valuenet())?;
    write(&run.valuenet_dir().join("metrics.csv"), value_metrics_csv(&report))
}

/// Self-trains the selected source model on the unlabeled target split.
pub fn cmd_adapt(cfg: &RunConfig) -> Result<()> {
    let run = prepare(cfg)?;
    let selected = require(run.selected(), "select-source")?;
    let value_path = require(run.valuenet(), "train-valuenet")?;
    let data = load_split(&run, Split::TargetTrain)?;
    let classes = data.spec.classes;
    let mut seg = seg_model(cfg, classes)?;
    load_into(&mut seg.params, &selected)?;
    let mut value = value_net(cfg, &seg)?;
    load_into(&mut value.params, &value_path)?;
    let out = adapt(&data, &mut seg, &mut value, &cfg.target, cfg.seed)?;

    for labels in &out.rounds {
        let dir = run.round_dir(labels.round);
        let pseudo = Dataset {
            spec: data.spec.clone(),
            images: data
                .images
                .iter()
                .zip(&labels.maps)
                .map(|(img, map)| LabeledImage {
                    labels: map.labels.clone(),
                    ..img.clone()
                })
                .collect(),
        };
        write_dataset(&pseudo, &dir)?;
        let provenance: Vec<u8> = labels
            .maps
            .iter()
            .flat_map(|m| m.provenance.iter().map(|&p| p as u8))
            .collect();
        write(&dir.join("provenance.bin"), provenance)?;
        let mut t = String::from("class,xi,w,labeled_fraction\n");
        for c in 0..classes {
            let _ = writeln!(
                t,
                "{c},{},{},{}",
                labels.thresholds.xi[c], labels.thresholds.w[c], labels.labeled_fraction[c]
            );
        }
        write(&dir.join("thresholds.csv"), t)?;
        let mut e = String::from("image,ece_hat\n");
        for (i, v) in labels.ece_hat.iter().enumerate() {
            let _ = writeln!(e, "{i},{v}");
        }
        write(&dir.join("ece_hat.csv"), e)?;
    }
    write(
        &run.adapt_dir().join("metrics.csv"),
        target_metrics_csv(&out.epochs, classes),
    )?;

    let best = out
        .selected
        .ok_or_else(|| Error::Empty("adaptation produced no checkpoints".into()))?;
    let chosen = &out.pool[best];
    CheckpointFile::new(Stage::Adapt, seg.params)
        .with_metric("round", chosen.round as f64)
        .with_metric("epoch", chosen.epoch as f64)
        .with_metric("mean_entropy", chosen.mean_entropy)
        .save(&run.adapted())?;
    write(
        &run.adapt_dir().join("selection.txt"),
        format!(
            "round = {}\nepoch = {}\nmean_entropy = {}\n",
            chosen.round, chosen.epoch, chosen.mean_entropy
        ),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub miou: MiouReport,
    pub ece: f64,
    pub reliability: ReliabilityDiagram,
}

/// Scores `N x C x H x W`-shaped logits (one tensor per image) against
/// labels; pixels with the ignore label count toward neither metric.
pub fn evaluate_logits(logits: &[Tensor<f32>], labels: &[&[u8]], classes: usize, bins: usize) -> Result<EvalSummary> {
    if logits.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit maps for {} label maps",
            logits.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(classes);
    let mut acc = EceAccumulator::new(bins);
    for (l, y) in logits.iter().zip(labels) {
        let p = confidence_and_prediction(l)?;
        cm.push(&p.prediction, y)?;
        for ((&conf, &pred), &label) in p.confidence.iter().zip(&p.prediction).zip(y.iter()) {
            if label != crate::IGNORE_LABEL {
                acc.push(conf, pred == label);
            }
        }
    }
    if acc.total() == 0 {
        return Err(Error::Empty("no labeled pixels to evaluate".into()));
    }
    let reliability = acc.finish();
    Ok(EvalSummary {
        miou: cm.report(),
        ece: reliability.ece(),
        reliability,
    })
}

fn checkpoint_label(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into())
}

/// Scores a segmentation checkpoint on one split and writes the per-class
/// IoU table, the dataset ECE and the reliability diagram.
pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: &Path, split: Split) -> Result<EvalSummary> {
    let run = prepare(cfg)?;
    if !checkpoint.exists() {
        return Err(Error::MissingArtifact {
            stage: "train-source, select-source or adapt",
            path: checkpoint.to_path_buf(),
        });
    }
    let data = load_split(&run, split)?;
    let mut seg = seg_model(cfg, data.spec.classes)?;
    load_into(&mut seg.params, checkpoint)?;
    let outputs = seg.infer_images(&data.images, 8, false)?;
    let labels: Vec<&[u8]> = data.images.iter().map(|i| i.labels.as_slice()).collect();
    let summary = evaluate_logits(&outputs.logits, &labels, data.spec.classes, cfg.source.calib.bins)?;

    let dir = run.eval_dir(&checkpoint_label(checkpoint), split);
    let mut iou = String::from("class,iou\n");
    for (c, v) in summary.miou.iou.iter().enumerate() {
        let _ = writeln!(iou, "{c},{}", v.map(|x| x.to_string()).unwrap_or_default());
    }
    let _ = writeln!(iou, "mean,{}", summary.miou.mean);
    write(&dir.join("iou.csv"), iou)?;
    export_reliability(&summary.reliability, &dir, "reliability")?;
    write(
        &dir.join("summary.txt"),
        format!(
            "miou = {}\nece = {}\npixels = {}\n",
            summary.miou.mean, summary.ece, summary.reliability.n
        ),
    )?;
    Ok(summary)
}

/// Last stage `cmd_run` executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineEnd {
    /// Stop after source selection and score it on the target.
    SourceOnly,
    Full,
}

pub const SUMMARY_HEADER: &str = "seed,alpha,source_epoch,source_val_miou,source_target_miou,source_target_ece,adapted_target_miou,adapted_target_ece";

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub seed: u64,
    pub alpha: f64,
    pub source_epoch: usize,
    pub source_val_miou: f64,
    pub source_target: (f64, f64),
    /// `(mIoU, ECE)` of the adapted model; absent for source-only runs.
    pub adapted_target: Option<(f64, f64)>,
}

impl RunSummary {
    pub fn to_csv(&self) -> String {
        let (am, ae) = self
            .adapted_target
            .map(|(m, e)| (m.to_string(), e.to_string()))
            .unwrap_or_default();
        format!(
            "{SUMMARY_HEADER}\n{},{},{},{},{},{},{am},{ae}\n",
            self.seed, self.alpha, self.source_epoch, self.source_val_miou, self.source_target.0, self.source_target.1
        )
    }

    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(SUMMARY_HEADER) {
            return Err(Error::format(path, "missing summary header"));
        }
        let row = lines
            .next()
            .ok_or_else(|| Error::format(path, "summary has no data row"))?;
        let cols: Vec<&str> = row.split(',').collect();
        let bad = || Error::format(path, format!("malformed summary row `{row}`"));
        if cols.len() != 8 {
            return Err(bad());
        }
        let f = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let adapted_target = match (cols[6], cols[7]) {
            ("", "") => None,
            (m, e) => Some((f(m)?, f(e)?)),
        };
        Ok(Self {
            seed: cols[0].parse().map_err(|_| bad())?,
            alpha: f(cols[1])?,
            source_epoch: cols[2].parse().map_err(|_| bad())?,
            source_val_miou: f(cols[3])?,
            source_target: (f(cols[4])?, f(cols[5])?),
            adapted_target,
        })
    }
}

/// Runs every stage in order and writes `summary.csv`.
pub fn cmd_run(cfg: &RunConfig, force: bool, end: PipelineEnd) -> Result<RunSummary> {
    let run = prepare(cfg)?;
    cmd_generate(cfg, force)?;
    cmd_train_source(cfg)?;
    let sel = cmd_select_source(cfg)?;
    let before = cmd_evaluate(cfg, &run.selected(), Split::TargetTest)?;
    let adapted_target = if end == PipelineEnd::Full {
        cmd_train_valuenet(cfg)?;
        cmd_adapt(cfg)?;
        let after = cmd_evaluate(cfg, &run.adapted(), Split::TargetTest)?;
        Some((after.miou.mean, after.ece))
    } else {
        None
    };
    let summary = RunSummary {
        seed: cfg.seed,
        alpha: cfg.source.alpha,
        source_epoch: sel.epoch,
        source_val_miou: sel.source_miou,
        source_target: (before.miou.mean, before.ece),
        adapted_target,
    };
    write(&run.summary(), summary.to_csv())?;
    Ok(summary)
}
