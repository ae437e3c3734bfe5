//! Run-directory commands behind the `nexvitad` binary.
//!
//! Every command is a function of a [`RunConfig`] and the files already under
//! the run directory, which has a fixed layout:
//!
//! ```text
//! <out>/config.json      resolved run configuration
//! <out>/data/            PNG corpus, dataset.json, manifest.jsonl
//! <out>/log.jsonl        one EpochLog per line
//! <out>/checkpoints/     last/ (model + train state), final/
//! <out>/bank/k{K}/class{c}/
//! <out>/scores/{tag}/    score tensors, heatmaps, index.jsonl
//! <out>/report.json      metric reports keyed by score tag
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneSpec;
use crate::checkpoint::{load_model, load_train_state, save_model, save_train_state};
use crate::datagen::{
    generate_dataset, load_mask_png, load_rgb_png, make_split, save_mask_png, save_rgb_png, DatagenConfig, DomainSplit,
    ImageSample, Split, SplitConfig, CLASS_NAMES, NUM_CLASSES,
};
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::inference::bench::{bench_inference, linear_fit, monotone_within, BenchConfig, BenchRecord};
use crate::inference::{
    build_bank, decoder_score_maps, save_heatmap_png, score_batch, BankConfig, FeatureMode, MemoryBank, DEFAULT_K,
    DEFAULT_M, DEFAULT_SIGMA,
};
use crate::metrics::{evaluate, MetricReport, ThresholdMode};
use crate::model::{Model, ModelConfig};
use crate::numkernel::io::{read_nxt1, write_nxt1};
use crate::numkernel::{GradCheckReport, Tensor};
use crate::trainer::{full_loss_check_options, grad_check_full_loss, EpochLog, FeatureCache, TrainConfig, Trainer};

pub const THREADS_ENV: &str = "NEXVITAD_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub k: usize,
    pub m: usize,
    pub sigma: f64,
    pub eps: Option<f64>,
    pub mode: FeatureMode,
    /// Cluster counts used by `--k-sweep` and the timing bench.
    pub k_sweep: Vec<usize>,
    pub bench_batches: Vec<usize>,
    pub bench_repeats: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        let bench = BenchConfig::default();
        Self {
            k: DEFAULT_K,
            m: DEFAULT_M,
            sigma: DEFAULT_SIGMA,
            eps: None,
            mode: FeatureMode::Fused,
            k_sweep: bench.ks,
            bench_batches: bench.batches,
            bench_repeats: bench.repeats,
        }
    }
}

/// Everything a run depends on, serialized as one JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DatagenConfig,
    pub split: SplitConfig,
    pub backbone: BackboneSpec,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub threshold: ThresholdMode,
    /// Save a resumable checkpoint every this many epochs.
    pub checkpoint_every: usize,
}

impl RunConfig {
    /// Defaults with `n_target` randomly chosen target classes, all seeds
    /// derived from `seed`.
    pub fn new(out: impl Into<PathBuf>, seed: u64, n_target: usize) -> Result<Self> {
        let mut split = SplitConfig::random(NUM_CLASSES, n_target, seed)?;
        split.bank_size = DEFAULT_M;
        Ok(Self {
            seed,
            out: out.into(),
            data: DatagenConfig {
                seed,
                ..DatagenConfig::default()
            },
            split,
            backbone: BackboneSpec::default(),
            decoder: DecoderConfig::default(),
            train: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            inference: InferenceConfig::default(),
            threshold: ThresholdMode::BestSweep,
            checkpoint_every: 1,
        })
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            decoder: self.decoder.clone(),
            image_size: self.data.size,
            source_classes: self.split.source_classes.iter().copied().collect(),
            target_classes: self.split.target_classes.iter().copied().collect(),
            shared_source_head: !self.train.mtl_enabled,
            seed: self.seed,
        }
    }

    pub fn bank_config(&self, k: usize) -> BankConfig {
        BankConfig {
            k,
            m: self.inference.m,
            mode: self.inference.mode,
            eps: self.inference.eps,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate(NUM_CLASSES)?;
        self.train.validate()?;
        self.model_config().validate()?;
        let inf = &self.inference;
        if self.split.bank_size != inf.m {
            return Err(Error::Config(format!(
                "split reserves {} bank images but M = {}",
                self.split.bank_size, inf.m
            )));
        }
        if inf.m == 0 || inf.k == 0 || inf.k_sweep.contains(&0) {
            return Err(Error::Config("K and M must be positive".into()));
        }
        if !(inf.sigma > 0.0) || inf.eps.is_some_and(|e| !(e > 0.0)) {
            return Err(Error::Config("sigma and eps must be positive".into()));
        }
        if inf.bench_repeats == 0 || inf.bench_batches.contains(&0) {
            return Err(Error::Config("bench needs positive batches and repeats".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        if let ThresholdMode::Fixed(t) = self.threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("fixed threshold {t} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Writes `config.json` under the run directory.
    pub fn save(&self) -> Result<()> {
        fs::create_dir_all(&self.out)?;
        write_json(&self.layout().config(), self)
    }

    pub fn layout(&self) -> Layout {
        Layout { root: self.out.clone() }
    }
}

/// Paths inside a run directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn manifest(&self) -> PathBuf {
        self.data().join("manifest.jsonl")
    }
    pub fn log(&self) -> PathBuf {
        self.root.join("log.jsonl")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn last(&self) -> PathBuf {
        self.checkpoints().join("last")
    }
    pub fn final_model(&self) -> PathBuf {
        self.checkpoints().join("final")
    }
    pub fn bank(&self, k: usize, class_id: usize) -> PathBuf {
        self.root
            .join("bank")
            .join(format!("k{k}"))
            .join(format!("class{class_id}"))
    }
    pub fn scores(&self, tag: &str) -> PathBuf {
        self.root.join("scores").join(tag)
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn bench(&self) -> PathBuf {
        self.root.join("bench.json")
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    fs::write(path, buf)?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?);
        }
    }
    Ok(out)
}

/// Sets the global rayon pool size. `NEXVITAD_THREADS` overrides `requested`;
/// the default is one thread.
pub fn init_threads(requested: Option<usize>) -> Result<usize> {
    let n = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("{THREADS_ENV}={v} is not a thread count")))?,
        Err(_) => requested.unwrap_or(1),
    };
    if n == 0 {
        return Err(Error::Config("thread count must be positive".into()));
    }
    // A pool built earlier in the process stays in place.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(n)
}

// ---------------------------------------------------------------------------
// gen-data

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// One line of `manifest.jsonl`. Paths are relative to the data directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: String,
    pub class_id: usize,
    pub class_name: String,
    pub split: Split,
    pub index: usize,
    pub is_defective: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mask_path: Option<String>,
    pub domain: Domain,
    /// Source/target class counts, e.g. `"11/1"`.
    pub split_label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DatasetInfo {
    data: DatagenConfig,
    split: SplitConfig,
}

fn split_dir(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Test => "test",
    }
}

/// Writes the PNG corpus and its manifest. Refuses to touch an existing
/// dataset unless `force` is set.
pub fn cmd_gen_data(cfg: &RunConfig, force: bool) -> Result<Vec<ManifestRecord>> {
    cfg.validate()?;
    let layout = cfg.layout();
    let dir = layout.data();
    if dir.exists() {
        if !force {
            return Err(Error::Config(format!(
                "{} exists; pass --force to overwrite",
                dir.display()
            )));
        }
        fs::remove_dir_all(&dir)?;
    }
    let ds = generate_dataset(&cfg.data, &cfg.split)?;
    let label = cfg.split.label();
    let mut records = Vec::with_capacity(ds.samples.len());
    for s in &ds.samples {
        let class_name = CLASS_NAMES[s.class_id];
        let rel = format!("{class_name}/{}", split_dir(s.split));
        fs::create_dir_all(dir.join(&rel))?;
        let path = format!("{rel}/{:03}.png", s.index);
        save_rgb_png(dir.join(&path), &s.image)?;
        let mask_path = if s.split == Split::Test || s.is_defective {
            let p = format!("{rel}/{:03}_mask.png", s.index);
            save_mask_png(dir.join(&p), &s.mask)?;
            Some(p)
        } else {
            None
        };
        records.push(ManifestRecord {
            path,
            class_id: s.class_id,
            class_name: class_name.to_string(),
            split: s.split,
            index: s.index,
            is_defective: s.is_defective,
            mask_path,
            domain: if cfg.split.target_classes.contains(&s.class_id) {
                Domain::Target
            } else {
                Domain::Source
            },
            split_label: label.clone(),
        });
    }
    write_json(
        &dir.join("dataset.json"),
        &DatasetInfo {
            data: cfg.data.clone(),
            split: cfg.split.clone(),
        },
    )?;
    write_jsonl(&layout.manifest(), &records)?;
    log::info!("wrote {} samples ({label} split) to {}", records.len(), dir.display());
    Ok(records)
}

pub fn read_manifest(cfg: &RunConfig) -> Result<Vec<ManifestRecord>> {
    read_jsonl(&cfg.layout().manifest())
}

/// Reads the corpus back from disk, checking it was generated for `cfg`.
pub fn load_samples(cfg: &RunConfig) -> Result<Vec<ImageSample>> {
    let dir = cfg.layout().data();
    let info: DatasetInfo = serde_json::from_slice(
        &fs::read(dir.join("dataset.json")).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?,
    )?;
    let same_split = info.split.source_classes == cfg.split.source_classes
        && info.split.target_classes == cfg.split.target_classes
        && info.split.seed == cfg.split.seed;
    if info.data != cfg.data || !same_split {
        return Err(Error::Config(format!(
            "dataset in {} was generated with a different data or split config",
            dir.display()
        )));
    }
    read_manifest(cfg)?
        .into_iter()
        .map(|r| {
            let image = load_rgb_png(dir.join(&r.path))?;
            let mask = match &r.mask_path {
                Some(p) => load_mask_png(dir.join(p))?,
                None => Tensor::zeros(&[image.dims()[0], image.dims()[1]]),
            };
            Ok(ImageSample {
                image,
                mask,
                class_id: r.class_id,
                split: r.split,
                is_defective: r.is_defective,
                index: r.index,
            })
        })
        .collect()
}

pub fn load_split(cfg: &RunConfig) -> Result<DomainSplit> {
    make_split(&load_samples(cfg)?, &cfg.split)
}

// ---------------------------------------------------------------------------
// train

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrainOptions {
    /// Discard existing checkpoints and start over.
    pub force: bool,
    /// Continue from `checkpoints/last` when present.
    pub resume: bool,
    /// Stop once this many epochs are done, leaving a resumable checkpoint
    /// and no final model.
    pub stop_after: Option<usize>,
}

fn save_last(layout: &Layout, trainer: &Trainer) -> Result<()> {
    let tmp = layout.checkpoints().join("last.tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    save_model(tmp.join("model"), &trainer.model)?;
    save_train_state(tmp.join("state"), &trainer.state)?;
    let last = layout.last();
    if last.exists() {
        fs::remove_dir_all(&last)?;
    }
    fs::rename(&tmp, &last)?;
    Ok(())
}

/// Trains (or resumes) and writes `checkpoints/final` plus `log.jsonl`.
/// Training state is saved to `checkpoints/last` every `checkpoint_every`
/// epochs; resuming from it reproduces an uninterrupted run bit for bit.
pub fn cmd_train(cfg: &RunConfig, opts: TrainOptions) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    let layout = cfg.layout();
    if opts.force && layout.checkpoints().exists() {
        fs::remove_dir_all(layout.checkpoints())?;
    }
    if layout.final_model().exists() && !opts.resume {
        return Err(Error::Config(format!(
            "{} exists; pass --force to retrain",
            layout.final_model().display()
        )));
    }
    let data = load_split(cfg)?;
    let fresh = Model::new(&cfg.model_config())?;
    let checksum = fresh.backbones.checksum();
    let mut trainer = if opts.resume && layout.last().exists() {
        let model = load_model(layout.last().join("model"))?;
        if model.config != cfg.model_config() {
            return Err(Error::Config("checkpoint model config differs from run config".into()));
        }
        let state = load_train_state(layout.last().join("state"))?;
        log::info!("resuming at epoch {}", state.epoch);
        Trainer::resume(model, cfg.train.clone(), state)?
    } else {
        Trainer::new(fresh, cfg.train.clone())?
    };
    fs::create_dir_all(layout.checkpoints())?;
    let cache = FeatureCache::build(&trainer.model, &data)?;
    let stop = opts.stop_after.unwrap_or(usize::MAX);
    while !trainer.finished() && trainer.state.epoch < stop {
        let t0 = Instant::now();
        let line = trainer.run_epoch(&data, &cache)?;
        log::info!(
            "epoch {} lr {:.2e} L_s {:.4} total {:.4} ({:.1}s)",
            line.epoch,
            line.lr,
            line.l_s,
            line.total,
            t0.elapsed().as_secs_f64()
        );
        write_jsonl(&layout.log(), &trainer.state.log)?;
        if trainer.state.epoch % cfg.checkpoint_every == 0 || trainer.finished() || trainer.state.epoch == stop {
            save_last(&layout, &trainer)?;
        }
    }
    if trainer.model.backbones.checksum() != checksum {
        return Err(Error::Contract("backbone parameters changed during training".into()));
    }
    write_jsonl(&layout.log(), &trainer.state.log)?;
    if trainer.finished() {
        save_model(layout.final_model(), &trainer.model)?;
    }
    Ok(trainer.state.log)
}

// ---------------------------------------------------------------------------
// build-bank

/// Builds one bank per target class for each `k`, under `bank/k{K}/class{c}`.
pub fn cmd_build_bank(cfg: &RunConfig, ks: &[usize]) -> Result<Vec<MemoryBank>> {
    cfg.validate()?;
    let layout = cfg.layout();
    let model = load_model(layout.final_model())?;
    let data = load_split(cfg)?;
    let mut out = Vec::new();
    for &k in ks {
        for (&class_id, normals) in &data.normal_bank {
            let images: Vec<Tensor> = normals.iter().map(|n| n.image.clone()).collect();
            let bank = build_bank(&model, class_id, &images, &cfg.bank_config(k))?;
            bank.save(layout.bank(k, class_id))?;
            log::info!(
                "bank K={k} class {class_id}: outer iterations {:?}",
                bank.meta.outer_iterations
            );
            out.push(bank);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// infer

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreSource {
    /// Prototype bank with `K` clusters.
    Bank(usize),
    /// Trained target segmentation head.
    Decoder,
}

impl ScoreSource {
    pub fn tag(&self) -> String {
        match self {
            ScoreSource::Bank(k) => format!("bank_k{k}"),
            ScoreSource::Decoder => "decoder".into(),
        }
    }
}

/// One line of `scores/{tag}/index.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    pub class_id: usize,
    pub index: usize,
    pub scores: String,
    pub heatmap: String,
}

/// Scores every target-domain test image; writes NXT1 score maps and PNG
/// heatmaps under `scores/{tag}`.
pub fn cmd_infer(cfg: &RunConfig, source: ScoreSource) -> Result<Vec<ScoreRecord>> {
    cfg.validate()?;
    let layout = cfg.layout();
    let model = load_model(layout.final_model())?;
    let data = load_split(cfg)?;
    let dir = layout.scores(&source.tag());
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    let mut records = Vec::new();
    for &class_id in &cfg.split.target_classes {
        let tests: Vec<&ImageSample> = data.target_test.iter().filter(|s| s.class_id == class_id).collect();
        if tests.is_empty() {
            continue;
        }
        let x = Tensor::stack(&tests.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
        let maps: Vec<Tensor> = match source {
            ScoreSource::Bank(k) => {
                let bank = MemoryBank::load(layout.bank(k, class_id))?;
                if bank.meta.class_id != class_id {
                    return Err(Error::Data(format!(
                        "bank for class {class_id} holds class {}",
                        bank.meta.class_id
                    )));
                }
                score_batch(&model, &bank, &x, cfg.inference.sigma)?
                    .into_iter()
                    .map(|m| m.a_prime)
                    .collect()
            }
            ScoreSource::Decoder => decoder_score_maps(&model, class_id, &x)?,
        };
        for (s, map) in tests.iter().zip(&maps) {
            if !map.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite score for class {class_id} image {}",
                    s.index
                )));
            }
            let id = format!("c{class_id}_{:03}", s.index);
            let rec = ScoreRecord {
                scores: format!("{id}.nxt1"),
                heatmap: format!("{id}.png"),
                id,
                class_id,
                index: s.index,
            };
            write_nxt1(dir.join(&rec.scores), map)?;
            save_heatmap_png(dir.join(&rec.heatmap), map)?;
            records.push(rec);
        }
    }
    write_jsonl(&dir.join("index.jsonl"), &records)?;
    Ok(records)
}

// ---------------------------------------------------------------------------
// eval

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: BTreeMap<usize, MetricReport>,
    /// Means over target classes.
    pub auc: f64,
    pub ap: f64,
    pub pro: f64,
}

#[derive(Default)]
struct ClassScores {
    maps: Vec<Tensor>,
    masks: Vec<Tensor>,
    ids: Vec<String>,
}

/// Evaluates `scores/{tag}` against the manifest masks and records the
/// result under `tag` in `report.json`.
pub fn cmd_eval(cfg: &RunConfig, tag: &str) -> Result<EvalReport> {
    let layout = cfg.layout();
    let dir = layout.scores(tag);
    let records: Vec<ScoreRecord> = read_jsonl(&dir.join("index.jsonl"))?;
    let masks: BTreeMap<(usize, usize), String> = read_manifest(cfg)?
        .into_iter()
        .filter(|r| r.split == Split::Test)
        .filter_map(|r| Some(((r.class_id, r.index), r.mask_path?)))
        .collect();
    let mut grouped: BTreeMap<usize, ClassScores> = BTreeMap::new();
    for r in &records {
        let mask_path = masks
            .get(&(r.class_id, r.index))
            .ok_or_else(|| Error::Data(format!("no mask for {}", r.id)))?;
        let g = grouped.entry(r.class_id).or_default();
        g.maps.push(read_nxt1(dir.join(&r.scores))?);
        g.masks.push(load_mask_png(layout.data().join(mask_path))?);
        g.ids.push(r.id.clone());
    }
    if grouped.is_empty() {
        return Err(Error::Data(format!("no scores under {}", dir.display())));
    }
    let mut per_class = BTreeMap::new();
    for (class_id, g) in grouped {
        per_class.insert(class_id, evaluate(&g.maps, &g.masks, &g.ids, cfg.threshold)?);
    }
    let n = per_class.len() as f64;
    let mean = |f: fn(&MetricReport) -> f64| per_class.values().map(f).sum::<f64>() / n;
    let report = EvalReport {
        auc: mean(|r| r.auc),
        ap: mean(|r| r.ap),
        pro: mean(|r| r.pro),
        per_class,
    };
    let path = layout.report();
    let mut all: BTreeMap<String, EvalReport> = if path.exists() {
        serde_json::from_slice(&fs::read(&path)?)?
    } else {
        BTreeMap::new()
    };
    all.insert(tag.to_string(), report.clone());
    write_json(&path, &all)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// grad-check, bench

/// Full-objective finite-difference check; a failure is a numeric error.
pub fn cmd_grad_check(seed: u64, out: Option<&Path>) -> Result<GradCheckReport> {
    let report = grad_check_full_loss(seed, full_loss_check_options())?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("grad_check.json"), &report)?;
    }
    if !report.passed() {
        return Err(Error::Numeric(format!(
            "gradient check failed: max rel err {:.3e} at {:?}",
            report.max_rel_err, report.worst
        )));
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchFit {
    pub batch: usize,
    pub slope_ms_per_k: f64,
    pub intercept_ms: f64,
    pub r2: f64,
    pub monotone: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub class_id: usize,
    pub records: Vec<BenchRecord>,
    pub fits: Vec<BenchFit>,
}

/// Fits time against `K` at each batch size; `monotone` allows a 10% band.
pub fn fit_bench(records: &[BenchRecord]) -> Vec<BenchFit> {
    let mut batches: Vec<usize> = records.iter().map(|r| r.batch).collect();
    batches.sort_unstable();
    batches.dedup();
    batches
        .into_iter()
        .map(|batch| {
            let mut rows: Vec<&BenchRecord> = records.iter().filter(|r| r.batch == batch).collect();
            rows.sort_by_key(|r| r.k);
            let xs: Vec<f64> = rows.iter().map(|r| r.k as f64).collect();
            let ys: Vec<f64> = rows.iter().map(|r| r.mean_ms).collect();
            let (slope, intercept, r2) = linear_fit(&xs, &ys);
            BenchFit {
                batch,
                slope_ms_per_k: slope,
                intercept_ms: intercept,
                r2,
                monotone: monotone_within(&ys, 0.10),
            }
        })
        .collect()
}

/// Times bank scoring on the first target class and writes `bench.json`.
pub fn cmd_bench(cfg: &RunConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let layout = cfg.layout();
    let model = load_model(layout.final_model())?;
    let data = load_split(cfg)?;
    let (&class_id, normals) = data
        .normal_bank
        .iter()
        .next()
        .ok_or_else(|| Error::Data("no target class".into()))?;
    let bank_images: Vec<Tensor> = normals.iter().map(|n| n.image.clone()).collect();
    let tests: Vec<Tensor> = data
        .target_test
        .iter()
        .filter(|s| s.class_id == class_id)
        .map(|s| s.image.clone())
        .collect();
    let bench_cfg = BenchConfig {
        ks: cfg.inference.k_sweep.clone(),
        batches: cfg.inference.bench_batches.clone(),
        repeats: cfg.inference.bench_repeats,
        sigma: cfg.inference.sigma,
        seed: cfg.seed,
    };
    let records = bench_inference(&model, class_id, &bank_images, &tests, &bench_cfg)?;
    let report = BenchReport {
        class_id,
        fits: fit_bench(&records),
        records,
    };
    fs::create_dir_all(&layout.root)?;
    write_json(&layout.bench(), &report)?;
    Ok(report)
}

/// Data generation, training, bank, inference and evaluation in one go.
pub fn cmd_run(cfg: &RunConfig, force: bool) -> Result<EvalReport> {
    cfg.save()?;
    cmd_gen_data(cfg, force)?;
    cmd_train(
        cfg,
        TrainOptions {
            force,
            ..TrainOptions::default()
        },
    )?;
    cmd_build_bank(cfg, &[cfg.inference.k])?;
    let source = ScoreSource::Bank(cfg.inference.k);
    cmd_infer(cfg, source)?;
    cmd_eval(cfg, &source.tag())
}

/// Appends a human-readable line to `w`; used by the binary for summaries.
pub fn print_report(w: &mut impl Write, tag: &str, r: &EvalReport) -> std::io::Result<()> {
    writeln!(w, "{tag}: auc {:.4} ap {:.4} pro {:.4}", r.auc, r.ap, r.pro)?;
    for (c, m) in &r.per_class {
        writeln!(
            w,
            "  class {c} ({}): auc {:.4} ap {:.4} pro {:.4} (tau {:.2})",
            CLASS_NAMES[*c], m.auc, m.ap, m.pro, m.pro_threshold
        )?;
    }
    Ok(())
}
