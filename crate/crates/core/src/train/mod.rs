//! Training loop, evaluation, prediction and curve smoothing.

mod checkpoint;
mod curves;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use curves::{parse_metrics_csv, smooth_curve, smooth_rows, METRICS_HEADER};

use crate::adversarial::{wgan_train_step, Critic, CriticConfig, WganState};
use crate::augment::{build_augmented_dataset, AugmentConfig};
use crate::autograd::{Mode, Tape};
use crate::error::{Error, Result};
use crate::io::{read_image, read_manifest, read_mask, DatasetManifest, ResolvedEntry, Split};
use crate::metrics::{average_annotations, evaluate_full, MetricsReport};
use crate::nn::{build_model, Model, ModelConfig, Variant};
use crate::optim::{adam_step, AdamState, OptimConfig};
use crate::resample::{resample_mask_soft, resample_trilinear, threshold_mask, THRESHOLD};
use crate::tensor::Tensor;
use crate::util::{mix_seed, reflect_index, rng};
use crate::volume::{Dims, MaskVolume, Volume};

fn default_iterations() -> usize {
    10
}
fn default_batch() -> usize {
    1
}
fn default_eval_interval() -> usize {
    10
}
fn default_eval_splits() -> Vec<Split> {
    vec![Split::Validation, Split::Test]
}
fn default_smooth_window() -> usize {
    200
}

/// Serialized description of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub variant: Variant,
    /// Architecture; defaults to the variant's preset at base 8 channels.
    #[serde(default)]
    pub model: Option<ModelConfig>,
    /// Optimizer; defaults to the variant's preset.
    #[serde(default)]
    pub optim: Option<OptimConfig>,
    pub epochs: usize,
    #[serde(default = "default_iterations")]
    pub iterations_per_epoch: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Independent repetitions; when non-empty each seed trains into its
    /// own subdirectory and the results are aggregated.
    #[serde(default)]
    pub seeds: Vec<u64>,
    pub manifest: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: usize,
    #[serde(default = "default_eval_splits")]
    pub eval_splits: Vec<Split>,
    /// Augmentation of the training split; `None` trains on the resized
    /// originals.
    #[serde(default)]
    pub augment: Option<AugmentConfig>,
    /// Critic settings for the adversarial variants.
    #[serde(default)]
    pub adversarial: Option<CriticConfig>,
    /// Stop once the first evaluated split reaches this Jaccard index.
    #[serde(default)]
    pub stop_at_jaccard: Option<f64>,
    /// Smoothing window for the reported peak, in epochs.
    #[serde(default = "default_smooth_window")]
    pub smooth_window_epochs: usize,
    #[serde(default)]
    pub deterministic: bool,
    #[serde(default)]
    pub verbose: bool,
}

impl TrainRun {
    /// Full schedule: 6400 epochs of 10 iterations at batch size 1.
    pub fn full_schedule(variant: Variant, manifest: PathBuf, output_dir: PathBuf) -> Self {
        TrainRun {
            variant,
            model: Some(ModelConfig::for_variant(variant, 16)),
            optim: Some(OptimConfig::for_variant(variant)),
            epochs: 6400,
            iterations_per_epoch: 10,
            batch_size: 1,
            seed: 0,
            seeds: Vec::new(),
            manifest,
            output_dir,
            eval_interval: default_eval_interval(),
            eval_splits: default_eval_splits(),
            augment: Some(AugmentConfig::default()),
            adversarial: variant.is_adversarial().then(CriticConfig::default),
            stop_at_jaccard: None,
            smooth_window_epochs: default_smooth_window(),
            deterministic: true,
            verbose: false,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model
            .clone()
            .unwrap_or_else(|| ModelConfig::for_variant(self.variant, 8).with_input([32, 32, 17]))
    }

    pub fn optim_config(&self) -> OptimConfig {
        self.optim.clone().unwrap_or_else(|| OptimConfig::for_variant(self.variant))
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.iterations_per_epoch < 1 || self.batch_size < 1 || self.eval_interval < 1 {
            return Err(Error::Config(
                "epochs, iterations_per_epoch, batch_size and eval_interval must be >= 1".into(),
            ));
        }
        let m = self.model_config();
        m.plan()?;
        if m.variant_tag.generator() != self.variant.generator() {
            return Err(Error::Config(format!(
                "model variant_tag {:?} does not match run variant {:?}",
                m.variant_tag, self.variant
            )));
        }
        self.optim_config().validate()?;
        if let Some(c) = &self.adversarial {
            c.validate()?;
        }
        Ok(())
    }
}

/// Spatial extents the network predicts at (its output grid).
pub fn work_dims(cfg: &ModelConfig) -> Result<Dims> {
    Ok(Dims::from_array(cfg.plan()?.output_shape))
}

/// Per-axis (x, y, z) mirror margin between the output grid and the input
/// tile of a `valid`-padding network.
fn margins(cfg: &ModelConfig) -> Result<[usize; 3]> {
    let out = cfg.plan()?.output_shape;
    let mut m = [0; 3];
    for i in 0..3 {
        let diff = cfg.input_shape[i] - out[i];
        if !diff.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "input {:?} and output {:?} differ by an odd margin",
                cfg.input_shape, out
            )));
        }
        m[i] = diff / 2;
    }
    Ok(m)
}

/// Network input for a volume: resized to the output grid, then
/// mirror-padded to the input tile when the network shrinks its input.
pub fn prepare_input(cfg: &ModelConfig, v: &Volume) -> Result<Tensor<f32>> {
    let work = work_dims(cfg)?;
    let small = resample_trilinear(v, work);
    pad_input(cfg, &small)
}

fn pad_input(cfg: &ModelConfig, small: &Volume) -> Result<Tensor<f32>> {
    let [mx, my, mz] = margins(cfg)?;
    let d = small.dims();
    if mx + my + mz == 0 {
        return Ok(small.to_tensor());
    }
    let [w, h, z] = cfg.input_shape;
    let mut data = Vec::with_capacity(w * h * z);
    for k in 0..z {
        let sz = reflect_index(k as isize - mz as isize, d.z);
        for j in 0..h {
            let sy = reflect_index(j as isize - my as isize, d.h);
            for i in 0..w {
                data.push(small.get(reflect_index(i as isize - mx as isize, d.w), sy, sz));
            }
        }
    }
    Tensor::new(&[1, 1, z, h, w], data)
}

fn stack(items: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let mut shape = items[0].shape().to_vec();
    shape[0] = items.len();
    let data = items.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(&shape, data)
}

/// Eval-mode probability map on the network's output grid.
pub fn predict_volume(model: &mut Model<f32>, v: &Volume) -> Result<Volume> {
    let x = prepare_input(model.config(), v)?;
    let y = model.predict(&x)?;
    Volume::from_tensor(&y)
}

/// Probability maps at network resolution and at the input's resolution.
pub fn predict(model: &mut Model<f32>, v: &Volume) -> Result<(Volume, Volume)> {
    let small = predict_volume(model, v)?;
    let full = resample_trilinear(&small, v.dims());
    Ok((small, full))
}

/// Ground truth of an entry: the mean of its annotations thresholded at 0.5.
pub fn consensus_mask(annotations: &[MaskVolume]) -> Result<MaskVolume> {
    Ok(threshold_mask(&average_annotations(annotations)?, THRESHOLD))
}

/// Per-annotator rows plus one row against the thresholded consensus.
pub fn evaluate(pred: &Volume, gts: &[(String, MaskVolume)], full_dims: Dims) -> Result<Vec<(String, MetricsReport)>> {
    if gts.is_empty() {
        return Err(Error::Config("evaluate needs at least one ground truth".into()));
    }
    let mut rows = Vec::with_capacity(gts.len() + 1);
    for (label, gt) in gts {
        let gt = threshold_mask(gt, THRESHOLD);
        rows.push((label.clone(), evaluate_full(pred, &gt, full_dims)?));
    }
    let masks: Vec<MaskVolume> = gts.iter().map(|(_, m)| m.clone()).collect();
    rows.push(("averaged".to_string(), evaluate_full(pred, &consensus_mask(&masks)?, full_dims)?));
    Ok(rows)
}

/// Mean of several reports; AP is averaged over the finite values only.
pub fn mean_report(reports: &[MetricsReport]) -> MeanMetrics {
    let n = reports.len() as f64;
    let avg = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let aps: Vec<f64> = reports.iter().map(|r| r.average_precision).filter(|v| v.is_finite()).collect();
    MeanMetrics {
        jaccard: avg(&|r| r.jaccard),
        dice: avg(&|r| r.dice),
        precision: avg(&|r| r.precision),
        recall: avg(&|r| r.recall),
        avd: avg(&|r| r.absolute_volume_difference as f64),
        ap: if aps.is_empty() {
            f64::NAN
        } else {
            aps.iter().sum::<f64>() / aps.len() as f64
        },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub jaccard: f64,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub avd: f64,
    pub ap: f64,
}

/// One evaluated entry: network input and full-resolution ground truth.
struct EvalEntry {
    image: Volume,
    gt: MaskVolume,
}

fn load_entry(e: &ResolvedEntry) -> Result<(Volume, Vec<MaskVolume>)> {
    let image = read_image(&e.image)?;
    let masks = e.annotations.iter().map(|p| read_mask(p)).collect::<Result<Vec<_>>>()?;
    for (p, m) in e.annotations.iter().zip(&masks) {
        if m.dims() != image.dims() {
            return Err(Error::Shape(format!(
                "annotation {} is {}, image {} is {}",
                p.display(),
                m.dims(),
                e.image.display(),
                image.dims()
            )));
        }
    }
    Ok((image, masks))
}

fn evaluate_split(model: &mut Model<f32>, entries: &[EvalEntry]) -> Result<MeanMetrics> {
    let mut reports = Vec::with_capacity(entries.len());
    for e in entries {
        let prob = predict_volume(model, &e.image)?;
        match evaluate_full(&prob, &e.gt, e.gt.dims()) {
            Ok(r) => reports.push(r),
            Err(Error::Undefined(_)) => {
                let prob_full = resample_trilinear(&prob, e.gt.dims());
                let c = crate::metrics::confusion(&crate::resample::threshold(&prob_full, THRESHOLD), &e.gt)?;
                reports.push(MetricsReport::from_counts(c, f64::NAN));
            }
            Err(err) => return Err(err),
        }
    }
    Ok(mean_report(&reports))
}

fn metrics_row(epoch: usize, m: &MeanMetrics, loss: f64) -> String {
    format!(
        "{epoch},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
        m.jaccard, m.dice, m.precision, m.recall, m.avd, m.ap, loss
    )
}

/// Per-iteration training losses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub loss: f64,
    pub bce: f64,
    pub adversarial: f64,
    pub wasserstein: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitHistory {
    pub split: Split,
    pub rows: Vec<(usize, MeanMetrics)>,
    pub peak_jaccard: f64,
    pub peak_smoothed_jaccard: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub seed: u64,
    pub epochs_run: usize,
    pub iterations_run: usize,
    pub best_epoch: usize,
    pub best_jaccard: f64,
    pub splits: Vec<SplitHistory>,
    pub losses: Vec<LossRecord>,
    pub parameter_count: usize,
}

impl TrainOutcome {
    pub fn split(&self, s: Split) -> Option<&SplitHistory> {
        self.splits.iter().find(|h| h.split == s)
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn append(file: &mut fs::File, path: &Path, line: &str) -> Result<()> {
    writeln!(file, "{line}").map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

struct Sample {
    input: Tensor<f32>,
    target: Tensor<f32>,
}

fn training_samples(run: &TrainRun, cfg: &ModelConfig, manifest: &DatasetManifest, seed: u64) -> Result<Vec<Sample>> {
    let work = work_dims(cfg)?;
    let mut sources = Vec::new();
    for e in manifest.split(Split::Train) {
        let (image, masks) = load_entry(&e)?;
        sources.push((image, average_annotations(&masks)?));
    }
    if sources.is_empty() {
        return Err(Error::Config("manifest has no training entries".into()));
    }
    let pairs: Vec<(Volume, MaskVolume)> = match &run.augment {
        Some(a) => build_augmented_dataset(&sources, a, mix_seed(seed, 2), work)?
            .into_iter()
            .map(|it| (it.image, it.target))
            .collect(),
        None => sources
            .iter()
            .map(|(i, m)| (resample_trilinear(i, work), resample_mask_soft(m, work)))
            .collect(),
    };
    pairs
        .iter()
        .map(|(i, m)| {
            Ok(Sample {
                input: pad_input(cfg, i)?,
                target: m.to_tensor(),
            })
        })
        .collect()
}

/// One plain BCE update. Gradients stay in the parameter slots.
pub fn bce_train_step(
    model: &mut Model<f32>,
    adam: &mut AdamState<f32>,
    cfg: &OptimConfig,
    input: &Tensor<f32>,
    target: &Tensor<f32>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let fwd = model.forward(&mut tape, x, Mode::Train)?;
    let t = tape.constant(target.clone());
    let loss = tape.bce(fwd.output, t)?;
    let value = tape.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss ({value})")));
    }
    let grads = tape.backward(loss)?;
    model.params_mut().zero_grad();
    model.params_mut().accumulate(&grads, &fwd.params)?;
    adam_step(model.params_mut(), adam, cfg)?;
    Ok(value)
}

/// Trains one seed. Writes `metrics_<split>.csv`, `loss.csv`,
/// `latest.ckpt`, `best.ckpt`, `run.json` and `summary.json` into the
/// output directory.
pub fn train(run: &TrainRun) -> Result<TrainOutcome> {
    run.validate()?;
    let out = &run.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_file(&out.join("run.json"), &serde_json::to_string_pretty(run).expect("run serializes"))?;

    let seed = run.seed;
    let cfg = run.model_config();
    let optim = run.optim_config();
    let manifest = read_manifest(&run.manifest)?;
    let samples = training_samples(run, &cfg, &manifest, seed)?;

    let mut eval_sets = Vec::new();
    for &s in &run.eval_splits {
        let mut entries = Vec::new();
        for e in manifest.split(s) {
            let (image, masks) = load_entry(&e)?;
            entries.push(EvalEntry {
                image,
                gt: consensus_mask(&masks)?,
            });
        }
        if !entries.is_empty() {
            eval_sets.push((s, entries));
        }
    }

    let mut model = build_model::<f32>(&cfg, seed)?;
    let mut adam = AdamState::new(model.params());
    let mut adversarial = if run.variant.is_adversarial() {
        let ccfg = run.adversarial.clone().unwrap_or_default();
        let critic = Critic::<f32>::new(ccfg, mix_seed(seed, 1))?;
        let state = WganState {
            generator: AdamState::new(model.params()),
            critic: AdamState::new(critic.params()),
        };
        Some((critic, state))
    } else {
        None
    };

    let mut csv = Vec::new();
    for (s, _) in &eval_sets {
        let p = out.join(format!("metrics_{s}.csv"));
        let mut f = create(&p)?;
        append(&mut f, &p, METRICS_HEADER)?;
        csv.push((p, f));
    }
    let loss_path = out.join("loss.csv");
    let mut loss_file = create(&loss_path)?;
    append(&mut loss_file, &loss_path, "iteration,loss,bce,adversarial,wasserstein")?;

    let mut histories: Vec<SplitHistory> = eval_sets
        .iter()
        .map(|(s, _)| SplitHistory {
            split: *s,
            rows: Vec::new(),
            peak_jaccard: f64::NAN,
            peak_smoothed_jaccard: f64::NAN,
        })
        .collect();
    let best_split = eval_sets
        .iter()
        .position(|(s, _)| *s == Split::Validation)
        .or(if eval_sets.is_empty() { None } else { Some(0) });

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut pass = 0u64;
    let mut losses = Vec::new();
    let mut best = (0usize, f64::NEG_INFINITY);
    let mut epochs_run = 0;
    let latest = out.join("latest.ckpt");
    let best_path = out.join("best.ckpt");

    for epoch in 1..=run.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..run.iterations_per_epoch {
            let mut batch = Vec::with_capacity(run.batch_size);
            while batch.len() < run.batch_size {
                if cursor == order.len() {
                    order = (0..samples.len()).collect();
                    order.shuffle(&mut rng(mix_seed(seed, 1000 + pass)));
                    pass += 1;
                    cursor = 0;
                }
                batch.push(order[cursor]);
                cursor += 1;
            }
            let input = stack(&batch.iter().map(|&i| &samples[i].input).collect::<Vec<_>>())?;
            let target = stack(&batch.iter().map(|&i| &samples[i].target).collect::<Vec<_>>())?;
            let rec = match &mut adversarial {
                Some((critic, state)) => {
                    let r = wgan_train_step(&mut model, critic, state, &optim, &input, &target)?;
                    LossRecord {
                        loss: r.total,
                        bce: r.bce,
                        adversarial: r.adversarial,
                        wasserstein: r.wasserstein,
                    }
                }
                None => {
                    let l = bce_train_step(&mut model, &mut adam, &optim, &input, &target)?;
                    LossRecord {
                        loss: l,
                        bce: l,
                        ..Default::default()
                    }
                }
            };
            epoch_loss += rec.loss;
            append(
                &mut loss_file,
                &loss_path,
                &format!(
                    "{},{:.6},{:.6},{:.6},{:.6}",
                    losses.len() + 1,
                    rec.loss,
                    rec.bce,
                    rec.adversarial,
                    rec.wasserstein
                ),
            )?;
            losses.push(rec);
        }
        epochs_run = epoch;
        epoch_loss /= run.iterations_per_epoch as f64;

        if epoch % run.eval_interval != 0 && epoch != run.epochs {
            continue;
        }
        let mut stop = false;
        for (k, (_, entries)) in eval_sets.iter().enumerate() {
            let m = evaluate_split(&mut model, entries)?;
            let (p, f) = &mut csv[k];
            append(f, p, &metrics_row(epoch, &m, epoch_loss))?;
            histories[k].rows.push((epoch, m));
            if run.verbose {
                eprintln!(
                    "epoch {epoch} {} jaccard {:.4} dice {:.4} loss {:.5}",
                    histories[k].split, m.jaccard, m.dice, epoch_loss
                );
            }
            if Some(k) == best_split && m.jaccard > best.1 {
                best = (epoch, m.jaccard);
                save_checkpoint(&best_path, &model, Some(generator_adam(&adam, &adversarial)), seed, epoch as u64)?;
            }
            if k == 0 && run.stop_at_jaccard.is_some_and(|t| m.jaccard >= t) {
                stop = true;
            }
        }
        save_checkpoint(&latest, &model, Some(generator_adam(&adam, &adversarial)), seed, epoch as u64)?;
        if stop {
            break;
        }
    }
    if best_split.is_none() {
        fs::copy(&latest, &best_path).map_err(|e| Error::io(&best_path, e))?;
        best = (epochs_run, f64::NAN);
    }

    let window_rows = (run.smooth_window_epochs / run.eval_interval).max(1);
    for h in &mut histories {
        let js: Vec<f64> = h.rows.iter().map(|(_, m)| m.jaccard).collect();
        h.peak_jaccard = js.iter().copied().fold(f64::NAN, f64::max);
        h.peak_smoothed_jaccard = js
            .chunks(window_rows)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .fold(f64::NAN, f64::max);
    }
    let outcome = TrainOutcome {
        seed,
        epochs_run,
        iterations_run: losses.len(),
        best_epoch: best.0,
        best_jaccard: best.1,
        splits: histories,
        losses,
        parameter_count: model.parameter_count(),
    };
    let summary = serde_json::json!({
        "seed": outcome.seed,
        "epochs_run": outcome.epochs_run,
        "iterations_run": outcome.iterations_run,
        "best_epoch": outcome.best_epoch,
        "best_jaccard": outcome.best_jaccard,
        "parameter_count": outcome.parameter_count,
        "splits": outcome.splits.iter().map(|h| serde_json::json!({
            "split": h.split,
            "peak_jaccard": h.peak_jaccard,
            "peak_smoothed_jaccard": h.peak_smoothed_jaccard,
        })).collect::<Vec<_>>(),
    });
    write_file(&out.join("summary.json"), &serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    Ok(outcome)
}

fn generator_adam<'a>(adam: &'a AdamState<f32>, adv: &'a Option<(Critic<f32>, WganState<f32>)>) -> &'a AdamState<f32> {
    match adv {
        Some((_, s)) => &s.generator,
        None => adam,
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Runs every seed of `run.seeds` (or just `run.seed`) and writes
/// `aggregate.json` with mean and standard deviation of the peak Jaccard
/// per split.
pub fn train_all(run: &TrainRun) -> Result<Vec<TrainOutcome>> {
    if run.seeds.is_empty() {
        return Ok(vec![train(run)?]);
    }
    let mut outcomes = Vec::new();
    for &s in &run.seeds {
        let mut r = run.clone();
        r.seed = s;
        r.seeds.clear();
        r.output_dir = run.output_dir.join(format!("seed_{s}"));
        outcomes.push(train(&r)?);
    }
    let mut splits = serde_json::Map::new();
    for h in &outcomes[0].splits {
        let raw: Vec<f64> = outcomes.iter().filter_map(|o| o.split(h.split)).map(|h| h.peak_jaccard).collect();
        let smooth: Vec<f64> = outcomes
            .iter()
            .filter_map(|o| o.split(h.split))
            .map(|h| h.peak_smoothed_jaccard)
            .collect();
        let (rm, rs) = mean_std(&raw);
        let (sm, ss) = mean_std(&smooth);
        splits.insert(
            h.split.to_string(),
            serde_json::json!({
                "peak_jaccard_mean": rm, "peak_jaccard_std": rs,
                "peak_smoothed_jaccard_mean": sm, "peak_smoothed_jaccard_std": ss,
            }),
        );
    }
    let agg = serde_json::json!({ "seeds": run.seeds, "splits": splits });
    write_file(&run.output_dir.join("aggregate.json"), &serde_json::to_string_pretty(&agg).expect("aggregate serializes"))?;
    Ok(outcomes)
}
