//! Graspability estimation: a BiLSTM over perceived object states with a
//! per-object two-class head, plus the confidence-threshold baseline and the
//! evaluation report shared by both.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{GraspSample, MAX_GROUP};
use crate::exec;
use crate::nn::io::{load_weights, save_weights};
use crate::nn::ops::{linear, linear_backward, masked_cross_entropy, softmax};
use crate::nn::transformer::add_linear;
use crate::nn::{AdamConfig, Grads, LstmStack, LstmStackConfig, NnError, ParamId, ParamStore};
use crate::perception::{ObjectState, N_FEATURES};
use crate::util::rng_from;

/// Samples per gradient chunk. Fixed so the reduction order never depends on
/// the number of worker threads.
pub const GRAD_CHUNK: usize = 8;
pub const GEM_THRESHOLD: f64 = 0.5;
pub const SWEEP_STEPS: u32 = 50;

#[derive(Debug, Error)]
pub enum GemError {
    #[error("at most {MAX_GROUP} objects per call, got {0}; partition first")]
    TooManyObjects(usize),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("weight file metadata: {0}")]
    Metadata(String),
}

/// Per-feature standardization taken from the training objects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: [f64; N_FEATURES],
    pub std: [f64; N_FEATURES],
    /// Positions are taken relative to the sample's centroid before scaling.
    #[serde(default)]
    pub centered: bool,
}

impl Default for FeatureNorm {
    fn default() -> Self {
        Self {
            mean: [0.0; N_FEATURES],
            std: [1.0; N_FEATURES],
            centered: false,
        }
    }
}

impl FeatureNorm {
    pub fn fit(samples: &[GraspSample], centered: bool) -> Self {
        let mut n = 0.0;
        let mut sum = [0.0; N_FEATURES];
        let mut sq = [0.0; N_FEATURES];
        for s in samples {
            for f in raw_features(&s.states, centered) {
                for k in 0..N_FEATURES {
                    sum[k] += f[k];
                    sq[k] += f[k] * f[k];
                }
                n += 1.0;
            }
        }
        if n == 0.0 {
            return Self::default();
        }
        let mut out = Self {
            centered,
            ..Self::default()
        };
        for k in 0..N_FEATURES {
            let m = sum[k] / n;
            let var = (sq[k] / n - m * m).max(0.0);
            out.mean[k] = m;
            out.std[k] = if var > 1e-18 { var.sqrt() } else { 1.0 };
        }
        out
    }

    pub fn apply(&self, states: &[ObjectState]) -> Vec<f64> {
        raw_features(states, self.centered)
            .into_iter()
            .flat_map(|f| (0..N_FEATURES).map(move |k| (f[k] - self.mean[k]) / self.std[k]))
            .collect()
    }
}

fn raw_features(states: &[ObjectState], centered: bool) -> Vec<[f64; N_FEATURES]> {
    let mut feats: Vec<[f64; N_FEATURES]> = states.iter().map(ObjectState::features).collect();
    if centered && !feats.is_empty() {
        let n = feats.len() as f64;
        let cx = feats.iter().map(|f| f[0]).sum::<f64>() / n;
        let cy = feats.iter().map(|f| f[1]).sum::<f64>() / n;
        for f in &mut feats {
            f[0] -= cx;
            f[1] -= cy;
        }
    }
    feats
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GemTrainConfig {
    pub lstm: LstmStackConfig,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Feed positions relative to each sample's centroid.
    pub center_positions: bool,
    /// Cosine decay from `lr` to `lr * final_lr_fraction` over the run; 1 keeps it constant.
    pub final_lr_fraction: f64,
    pub seed: u64,
}

impl Default for GemTrainConfig {
    fn default() -> Self {
        Self {
            lstm: LstmStackConfig::default(),
            epochs: 12,
            lr: 2e-3,
            batch_size: 32,
            center_positions: true,
            final_lr_fraction: 0.1,
            seed: 0,
        }
    }
}

impl GemTrainConfig {
    pub fn validate(&self) -> Result<(), GemError> {
        if self.lstm.input_size != N_FEATURES {
            return Err(GemError::Config(format!(
                "lstm input_size must be {N_FEATURES}, got {}",
                self.lstm.input_size
            )));
        }
        if self.lstm.hidden_size == 0 || self.lstm.num_layers == 0 {
            return Err(GemError::Config("lstm sizes must be positive".into()));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(GemError::Config("final_lr_fraction must lie in (0, 1]".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.batch_size == 0 {
            return Err(GemError::Config("lr and batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GemModel {
    pub store: ParamStore,
    pub lstm: LstmStack,
    head: (ParamId, ParamId),
    pub norm: FeatureNorm,
}

/// Loss summed over objects, gradient of that sum, and correct-count.
#[derive(Debug, Clone)]
pub struct SampleGrad {
    pub loss_sum: f64,
    pub objects: usize,
    pub correct: usize,
    pub grads: Grads,
}

impl GemModel {
    pub fn new(cfg: LstmStackConfig, seed: u64) -> Result<Self, GemError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let lstm = LstmStack::new(&mut store, "gem.lstm", cfg, &mut rng)?;
        let head = add_linear(&mut store, "gem.head", cfg.output_size(), 2, &mut rng)?;
        Ok(Self {
            store,
            lstm,
            head,
            norm: FeatureNorm::default(),
        })
    }

    fn check_len(states: &[ObjectState]) -> Result<(), GemError> {
        if states.is_empty() {
            return Err(GemError::Empty("no object states"));
        }
        if states.len() > MAX_GROUP {
            return Err(GemError::TooManyObjects(states.len()));
        }
        Ok(())
    }

    /// Raw logits `T × 2` for a standardized feature sequence.
    fn logits(&self, store: &ParamStore, feats: &[f64], t: usize) -> Result<(Vec<f64>, Vec<f64>, crate::nn::lstm::LstmCache), NnError> {
        let (hidden, cache) = self.lstm.forward(store, feats, &vec![true; t])?;
        let w = self.lstm.cfg.output_size();
        let mut logits = Vec::with_capacity(2 * t);
        for row in hidden.chunks(w) {
            logits.extend(linear(store, self.head.0, self.head.1, row)?);
        }
        Ok((logits, hidden, cache))
    }

    /// Per-object probability of being graspable.
    pub fn predict(&self, states: &[ObjectState]) -> Result<Vec<f64>, GemError> {
        Self::check_len(states)?;
        let feats = self.norm.apply(states);
        let (logits, _, _) = self.logits(&self.store, &feats, states.len())?;
        Ok(logits.chunks(2).map(|l| softmax(l)[1]).collect())
    }

    /// Forward and backward for one sample against an arbitrary store (used
    /// by training and by finite-difference checks).
    pub fn sample_grad_with(
        &self,
        store: &ParamStore,
        states: &[ObjectState],
        labels: &[u8],
    ) -> Result<SampleGrad, GemError> {
        Self::check_len(states)?;
        let t = states.len();
        let feats = self.norm.apply(states);
        let (logits, hidden, cache) = self.logits(store, &feats, t)?;
        let lab: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        let (mean_loss, dlogits) = masked_cross_entropy(&logits, 2, &lab, &vec![true; t])?;
        let mut grads = store.new_grads();
        let w = self.lstm.cfg.output_size();
        let mut dh = Vec::with_capacity(t * w);
        for i in 0..t {
            // undo the 1/t averaging: callers normalise by their own object count
            let dy: Vec<f64> = dlogits[2 * i..2 * i + 2].iter().map(|g| g * t as f64).collect();
            dh.extend(linear_backward(store, self.head.0, self.head.1, &hidden[i * w..(i + 1) * w], &dy, &mut grads));
        }
        self.lstm.backward(store, &cache, &dh, &mut grads)?;
        let correct = logits
            .chunks(2)
            .zip(labels)
            .filter(|(l, &y)| ((l[1] >= l[0]) as u8) == y)
            .count();
        Ok(SampleGrad {
            loss_sum: mean_loss * t as f64,
            objects: t,
            correct,
            grads,
        })
    }

    /// Mean loss and gradient over `samples`, reduced in fixed chunk order.
    pub fn batch_grad(&self, samples: &[&GraspSample]) -> Result<(f64, usize, Grads), GemError> {
        let chunks: Vec<&[&GraspSample]> = samples.chunks(GRAD_CHUNK).collect();
        let parts = exec::map_slice(&chunks, |chunk| -> Result<SampleGrad, GemError> {
            let mut acc: Option<SampleGrad> = None;
            for s in chunk.iter() {
                let g = self.sample_grad_with(&self.store, &s.states, &s.labels)?;
                match &mut acc {
                    None => acc = Some(g),
                    Some(a) => {
                        a.loss_sum += g.loss_sum;
                        a.objects += g.objects;
                        a.correct += g.correct;
                        a.grads.add_assign(&g.grads);
                    }
                }
            }
            acc.ok_or(GemError::Empty("gradient chunk"))
        });
        let mut total: Option<SampleGrad> = None;
        for p in parts {
            let p = p?;
            match &mut total {
                None => total = Some(p),
                Some(t) => {
                    t.loss_sum += p.loss_sum;
                    t.objects += p.objects;
                    t.correct += p.correct;
                    t.grads.add_assign(&p.grads);
                }
            }
        }
        let mut t = total.ok_or(GemError::Empty("batch"))?;
        let n = t.objects as f64;
        t.grads.scale(1.0 / n);
        Ok((t.loss_sum / n, t.correct, t.grads))
    }

    /// Mean loss and accuracy over a dataset, without gradients.
    pub fn loss_and_accuracy(&self, samples: &[GraspSample]) -> Result<(f64, f64), GemError> {
        let parts = exec::map_slice(samples, |s| -> Result<(f64, usize, usize), GemError> {
            let feats = self.norm.apply(&s.states);
            let (logits, _, _) = self.logits(&self.store, &feats, s.len())?;
            let lab: Vec<usize> = s.labels.iter().map(|&l| l as usize).collect();
            let (l, _) = masked_cross_entropy(&logits, 2, &lab, &vec![true; s.len()])?;
            let correct = logits
                .chunks(2)
                .zip(&s.labels)
                .filter(|(l, &y)| ((softmax(l)[1] >= GEM_THRESHOLD) as u8) == y)
                .count();
            Ok((l * s.len() as f64, correct, s.len()))
        });
        let (mut loss, mut correct, mut n) = (0.0, 0, 0);
        for p in parts {
            let (l, c, k) = p?;
            loss += l;
            correct += c;
            n += k;
        }
        if n == 0 {
            return Err(GemError::Empty("evaluation set"));
        }
        Ok((loss / n as f64, correct as f64 / n as f64))
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<(), GemError> {
        let meta = serde_json::json!({
            "kind": "gem",
            "lstm": self.lstm.cfg,
            "norm": self.norm,
            "extra": extra,
        });
        save_weights(path, &self.store, meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value), GemError> {
        let (store, meta) = load_weights(path)?;
        if meta["kind"] != "gem" {
            return Err(GemError::Metadata(format!("{} is not a GEM weight file", path.display())));
        }
        let cfg: LstmStackConfig =
            serde_json::from_value(meta["lstm"].clone()).map_err(|e| GemError::Metadata(e.to_string()))?;
        let norm: FeatureNorm =
            serde_json::from_value(meta["norm"].clone()).map_err(|e| GemError::Metadata(e.to_string()))?;
        let lstm = LstmStack::bind(&store, "gem.lstm", cfg)?;
        let get = |n: &str| store.id(n).ok_or_else(|| NnError::MissingParam(n.to_string()));
        let head = (get("gem.head.w")?, get("gem.head.b")?);
        Ok((Self { store, lstm, head, norm }, meta["extra"].clone()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

/// Shuffles object order inside a sample, keeping labels aligned.
fn shuffled_objects(s: &GraspSample, rng: &mut ChaCha8Rng) -> GraspSample {
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.shuffle(rng);
    GraspSample {
        states: idx.iter().map(|&i| s.states[i]).collect(),
        labels: idx.iter().map(|&i| s.labels[i]).collect(),
        truth: Vec::new(),
        ..s.clone()
    }
}

/// Trains with Adam; returns the weights from the epoch with the best
/// validation accuracy (earliest on ties).
pub fn train(
    train_set: &[GraspSample],
    val_set: &[GraspSample],
    cfg: &GemTrainConfig,
) -> Result<(GemModel, TrainHistory), GemError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(GemError::Empty("training set"));
    }
    if val_set.is_empty() {
        return Err(GemError::Empty("validation set"));
    }
    if let Some(s) = train_set.iter().chain(val_set).find(|s| s.is_empty() || s.len() > MAX_GROUP) {
        return Err(GemError::TooManyObjects(s.len()));
    }
    let mut model = GemModel::new(cfg.lstm, cfg.seed)?;
    model.norm = FeatureNorm::fit(train_set, cfg.center_positions);
    let adam = AdamConfig::default();
    let mut history = TrainHistory::default();
    let mut best: Option<ParamStore> = None;

    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.epochs).max(1);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut rng = rng_from(cfg.seed, &[0x6E5, epoch as u64]);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let epoch_set: Vec<GraspSample> = order.iter().map(|&i| shuffled_objects(&train_set[i], &mut rng)).collect();

        let (mut loss_sum, mut correct, mut objects) = (0.0, 0usize, 0usize);
        for batch in epoch_set.chunks(cfg.batch_size) {
            let refs: Vec<&GraspSample> = batch.iter().collect();
            let (loss, c, grads) = model.batch_grad(&refs)?;
            if !loss.is_finite() || !grads.max_abs().is_finite() {
                return Err(GemError::Diverged { epoch, loss });
            }
            let n: usize = batch.iter().map(GraspSample::len).sum();
            loss_sum += loss * n as f64;
            correct += c;
            objects += n;
            model.store.set_grads(grads);
            let cos = 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos());
            let lr = cfg.lr * (cfg.final_lr_fraction + (1.0 - cfg.final_lr_fraction) * cos);
            model.store.adam_step(lr, adam);
            step += 1;
        }
        let train_loss = loss_sum / objects as f64;
        let (val_loss, val_accuracy) = model.loss_and_accuracy(val_set)?;
        if !val_loss.is_finite() {
            return Err(GemError::Diverged { epoch, loss: val_loss });
        }
        log::info!(
            "gem epoch {epoch}: train loss {train_loss:.4} acc {:.4}, val loss {val_loss:.4} acc {val_accuracy:.4}",
            correct as f64 / objects as f64
        );
        history.epochs.push(EpochStats {
            epoch,
            train_loss,
            train_accuracy: correct as f64 / objects as f64,
            val_loss,
            val_accuracy,
        });
        if best.is_none() || val_accuracy > history.best_val_accuracy {
            history.best_epoch = epoch;
            history.best_val_accuracy = val_accuracy;
            best = Some(model.store.clone());
        }
    }
    if let Some(b) = best {
        model.store.load_values(&b)?;
    }
    Ok((model, history))
}

/// Threshold sweep result for the confidence baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub threshold: f64,
    pub accuracy: f64,
    /// `(θ, accuracy)` for every grid point.
    pub curve: Vec<(f64, f64)>,
}

pub fn sweep_threshold(k: u32) -> f64 {
    k as f64 / SWEEP_STEPS as f64
}

/// Tries θ = 0.00, 0.02, …, 1.00 with `conf ≥ θ` meaning graspable.
pub fn baseline_sweep(samples: &[GraspSample]) -> Result<SweepResult, GemError> {
    let pairs: Vec<(f64, u8)> = samples
        .iter()
        .flat_map(|s| s.states.iter().map(|st| st.confidence).zip(s.labels.iter().copied()))
        .collect();
    if pairs.is_empty() {
        return Err(GemError::Empty("sweep set"));
    }
    let n = pairs.len() as f64;
    let mut best = (0, 0usize);
    let mut curve = Vec::with_capacity(SWEEP_STEPS as usize + 1);
    for k in 0..=SWEEP_STEPS {
        let th = sweep_threshold(k);
        let correct = pairs.iter().filter(|(c, y)| ((*c >= th) as u8) == *y).count();
        curve.push((th, correct as f64 / n));
        if k == 0 || correct > best.1 {
            best = (k, correct);
        }
    }
    Ok(SweepResult {
        threshold: sweep_threshold(best.0),
        accuracy: best.1 as f64 / n,
        curve,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total().max(1) as f64
    }

    /// FP / (FP + TN); zero when there are no negatives.
    pub fn false_positive_rate(&self) -> f64 {
        let neg = self.fp + self.tn;
        if neg == 0 {
            0.0
        } else {
            self.fp as f64 / neg as f64
        }
    }
}

/// Error is `|score − label|`, averaged within each sample first; the
/// statistics run over samples. Accuracy runs over objects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub threshold: f64,
    pub samples: usize,
    pub objects: usize,
    pub error_mean: f64,
    pub error_std: f64,
    pub error_min: f64,
    pub error_max: f64,
    pub accuracy: f64,
    pub confusion: Confusion,
    pub false_positive_rate: f64,
}

pub fn evaluate<F>(label: &str, scorer: F, samples: &[GraspSample], threshold: f64) -> Result<EvalReport, GemError>
where
    F: Fn(&GraspSample) -> Result<Vec<f64>, GemError> + Sync + Send,
{
    if samples.is_empty() {
        return Err(GemError::Empty("evaluation set"));
    }
    let scored = exec::map_slice(samples, |s| scorer(s));
    let mut confusion = Confusion::default();
    let mut errs = Vec::with_capacity(samples.len());
    for (s, scores) in samples.iter().zip(scored) {
        let scores = scores?;
        if scores.len() != s.len() {
            return Err(GemError::Config("scorer returned the wrong number of scores".into()));
        }
        let mut e = 0.0;
        for (&p, &y) in scores.iter().zip(&s.labels) {
            e += (p - y as f64).abs();
            match (p >= threshold, y == 1) {
                (true, true) => confusion.tp += 1,
                (false, false) => confusion.tn += 1,
                (true, false) => confusion.fp += 1,
                (false, true) => confusion.fn_ += 1,
            }
        }
        errs.push(e / s.len() as f64);
    }
    let n = errs.len() as f64;
    let mean = errs.iter().sum::<f64>() / n;
    let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    Ok(EvalReport {
        label: label.to_string(),
        threshold,
        samples: samples.len(),
        objects: confusion.total(),
        error_mean: mean,
        error_std: var.sqrt(),
        error_min: errs.iter().cloned().fold(f64::INFINITY, f64::min),
        error_max: errs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        accuracy: confusion.accuracy(),
        false_positive_rate: confusion.false_positive_rate(),
        confusion,
    })
}

/// Baseline scorer: the perception confidence itself.
pub fn confidence_scores(s: &GraspSample) -> Result<Vec<f64>, GemError> {
    Ok(s.states.iter().map(|st| st.confidence).collect())
}

/// Mean absolute change of per-object probabilities when each sample's
/// objects are presented in a random order.
pub fn permutation_sensitivity(model: &GemModel, samples: &[GraspSample], seed: u64) -> Result<f64, GemError> {
    let parts = exec::map_indexed(samples.len(), |i| -> Result<(f64, usize), GemError> {
        let s = &samples[i];
        let mut rng = rng_from(seed, &[0x9E4, i as u64]);
        let mut idx: Vec<usize> = (0..s.len()).collect();
        idx.shuffle(&mut rng);
        let base = model.predict(&s.states)?;
        let perm: Vec<ObjectState> = idx.iter().map(|&j| s.states[j]).collect();
        let p = model.predict(&perm)?;
        let d: f64 = idx.iter().enumerate().map(|(k, &j)| (p[k] - base[j]).abs()).sum();
        Ok((d, s.len()))
    });
    let (mut d, mut n) = (0.0, 0);
    for p in parts {
        let (a, b) = p?;
        d += a;
        n += b;
    }
    Ok(if n == 0 { 0.0 } else { d / n as f64 })
}

/// Table rows: label, Mean, Std, Min, Max, Accuracy.
pub fn format_reports(reports: &[EvalReport]) -> String {
    let mut out = String::from("prediction error = |score - label|, mean per sample; accuracy over objects\n");
    out.push_str(&format!(
        "{:<10} {:>9} {:>9} {:>9} {:>9} {:>9} {:>6}\n",
        "method", "Mean", "Std", "Min", "Max", "Accuracy", "θ"
    ));
    for r in reports {
        out.push_str(&format!(
            "{:<10} {:>9.5} {:>9.5} {:>9.5} {:>9.5} {:>8.3}% {:>6.2}\n",
            r.label,
            r.error_mean,
            r.error_std,
            r.error_min,
            r.error_max,
            100.0 * r.accuracy,
            r.threshold
        ));
    }
    for r in reports {
        let c = r.confusion;
        out.push_str(&format!(
            "{}: TP {} TN {} FP {} FN {} (FP rate {:.4})\n",
            r.label, c.tp, c.tn, c.fp, c.fn_, r.false_positive_rate
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Scenario;

    fn state(conf: f64) -> ObjectState {
        ObjectState {
            x: 0.3,
            y: 0.0,
            yaw: 0.0,
            width: 0.02,
            length: 0.04,
            confidence: conf,
        }
    }

    fn sample(confs: &[f64], labels: &[u8]) -> GraspSample {
        GraspSample {
            scene_id: 0,
            step: 0,
            scenario: Scenario::Sparse,
            states: confs.iter().map(|&c| state(c)).collect(),
            labels: labels.to_vec(),
            truth: Vec::new(),
        }
    }

    #[test]
    fn evaluate_hand_example() {
        let s = sample(&[0.9, 0.2, 0.7], &[1, 0, 1]);
        let r = evaluate("t", confidence_scores, &[s], 0.5).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert!((r.error_mean - 0.2).abs() < 1e-12);
        assert_eq!(r.confusion, Confusion { tp: 2, tn: 1, fp: 0, fn_: 0 });
    }

    #[test]
    fn sweep_tie_rules() {
        let exact = vec![sample(&[1.0, 0.0, 1.0], &[1, 0, 1]), sample(&[0.0], &[0])];
        let r = baseline_sweep(&exact).unwrap();
        assert_eq!(r.threshold, 0.02);
        assert_eq!(r.accuracy, 1.0);
        let pos = vec![sample(&[0.3, 0.9, 0.01], &[1, 1, 1])];
        let r = baseline_sweep(&pos).unwrap();
        assert_eq!(r.threshold, 0.0);
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.curve.len(), 51);
    }

    #[test]
    fn predict_rejects_long_input() {
        let m = GemModel::new(
            LstmStackConfig {
                input_size: 6,
                hidden_size: 3,
                num_layers: 1,
                bidirectional: true,
            },
            0,
        )
        .unwrap();
        assert!(matches!(m.predict(&[state(0.5); 6]), Err(GemError::TooManyObjects(6))));
        let p = m.predict(&[state(0.5); 5]).unwrap();
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
