//! Training loop with early stopping, evaluation, and resumable checkpoints.
//!
//! Every random choice is drawn from a stream derived from
//! `(seed, purpose, epoch, …)`, clip gradients are computed in parallel but
//! summed in batch order, and tap caching never changes values, so a run is
//! a pure function of its seed, data and configuration.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Graph;
use crate::detector::{
    clip_loss, detector_forward, fcg_term, focal_loss_value, output_of, Checkpoint, DetectorConfig, DetectorOutput,
    DetectorParams,
};
use crate::encoder::{EncoderWeights, LayerAttributes};
use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::pipeline::augment::{augment, AugmentConfig};
use crate::pipeline::config::TrainConfig;
use crate::pipeline::data::VideoSource;
use crate::pipeline::metrics::video_auroc;
use crate::pipeline::sampling::{sample_windows, SamplingConfig};
use crate::pipeline::video::select_frames;
use crate::rng::{hash_str, rng_for, streams};
use crate::spatial::FacialPartAttributes;
use crate::tensor::Tensor;

/// Patience-based early stopping on a maximized metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None, bad_epochs: 0 }
    }

    /// Records one epoch's metric; returns `(improved, stop)`.
    pub fn update(&mut self, metric: f64) -> (bool, bool) {
        let improved = self.best.is_none_or(|b| metric > b);
        if improved {
            self.best = Some(metric);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        (improved, self.bad_epochs >= self.patience)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps completed at the end of the epoch.
    pub steps: u64,
    pub loss_t: f64,
    pub loss_s: f64,
    pub loss_st: f64,
    pub loss_fcg: f64,
    pub loss_total: f64,
    pub train_auroc: Option<f64>,
    pub val_auroc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("history serializes")
    }

    /// SHA-256 of the JSON form, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_json().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Mean losses over one optimizer step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct StepLosses {
    t: f64,
    s: f64,
    st: f64,
    fcg: f64,
    total: f64,
}

type TapKey = (String, Vec<usize>);

pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub detector: DetectorConfig,
    pub augment: AugmentConfig,
    /// Also score the training split after every epoch.
    pub track_train_auroc: bool,
    encoder: &'a EncoderWeights,
    phi: Option<&'a FacialPartAttributes>,
    params: DetectorParams,
    best_params: DetectorParams,
    optimizer: AdamW<f32>,
    epoch: usize,
    early: EarlyStopping,
    history: History,
    cache: Mutex<HashMap<TapKey, Arc<Vec<LayerAttributes>>>>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: History,
    pub best_params: DetectorParams,
    pub best_val_auroc: f64,
    pub stopped_early: bool,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, encoder: &'a EncoderWeights, phi: Option<&'a FacialPartAttributes>) -> Result<Self> {
        config.validate()?;
        let detector = config.detector_config(&encoder.config);
        let params = DetectorParams::init(&detector, phi, config.seed)?;
        let optimizer = AdamW::new(config.optimizer(), params.tensors());
        Ok(Self {
            augment: if config.augment { AugmentConfig::default() } else { AugmentConfig::disabled() },
            early: EarlyStopping::new(config.patience),
            best_params: params.clone(),
            config,
            detector,
            track_train_auroc: false,
            encoder,
            phi,
            params,
            optimizer,
            epoch: 0,
            history: History::default(),
            cache: Mutex::new(HashMap::new()),
        })
    }

    /// Restores a trainer from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(
        checkpoint: Checkpoint,
        config: TrainConfig,
        encoder: &'a EncoderWeights,
        phi: Option<&'a FacialPartAttributes>,
    ) -> Result<Self> {
        let mut t = Self::new(config, encoder, phi)?;
        if checkpoint.config != t.detector {
            return Err(Error::Config("checkpoint was trained with a different detector configuration".into()));
        }
        let meta = |k: &str| {
            checkpoint
                .meta
                .get(k)
                .ok_or_else(|| Error::Load(format!("checkpoint lacks `{k}`")))
        };
        let parse_err = |k: &str| Error::Load(format!("malformed checkpoint field `{k}`"));
        if meta("seed")?.parse::<u64>().map_err(|_| parse_err("seed"))? != t.config.seed {
            return Err(Error::Config("checkpoint seed differs from the configured seed".into()));
        }
        t.epoch = meta("epoch")?.parse().map_err(|_| parse_err("epoch"))?;
        t.early = serde_json::from_str(meta("early_stopping")?).map_err(|_| parse_err("early_stopping"))?;
        t.history = serde_json::from_str(meta("history")?).map_err(|_| parse_err("history"))?;
        t.optimizer = checkpoint.optimizer.ok_or_else(|| Error::Load("checkpoint has no optimizer state".into()))?;
        t.best_params = checkpoint.best_params.unwrap_or_else(|| checkpoint.params.clone());
        t.params = checkpoint.params;
        Ok(t)
    }

    /// An evaluation-only trainer holding `checkpoint`'s current weights. No
    /// mined attributes are needed because the FCG term is never evaluated.
    pub fn for_checkpoint(checkpoint: &Checkpoint, config: TrainConfig, encoder: &'a EncoderWeights) -> Result<Self> {
        let frames = checkpoint.config.frames;
        let mut t = Self::new(TrainConfig { use_fcg: false, frames, ..config }, encoder, None)?;
        if t.detector.width() != checkpoint.config.width() || t.detector.patch_count != checkpoint.config.patch_count {
            return Err(Error::Config(format!(
                "checkpoint expects an encoder with width {} and {} patches, got width {} and {} patches",
                checkpoint.config.width(),
                checkpoint.config.patch_count,
                t.detector.width(),
                t.detector.patch_count
            )));
        }
        t.detector = checkpoint.config.clone();
        t.params = checkpoint.params.clone();
        t.best_params = checkpoint.params.clone();
        Ok(t)
    }

    pub fn params(&self) -> &DetectorParams {
        &self.params
    }

    pub fn history(&self) -> &History {
        &self.history
    }

    pub fn epochs_completed(&self) -> usize {
        self.epoch
    }

    pub fn steps(&self) -> u64 {
        self.optimizer.step_count()
    }

    /// Full training state, including optimizer moments and history.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut meta = BTreeMap::new();
        meta.insert("seed".into(), self.config.seed.to_string());
        meta.insert("epoch".into(), self.epoch.to_string());
        meta.insert("step".into(), self.steps().to_string());
        meta.insert(
            "best_val_auroc".into(),
            self.early.best.map(|b| b.to_string()).unwrap_or_default(),
        );
        meta.insert("bad_epochs".into(), self.early.bad_epochs.to_string());
        meta.insert("early_stopping".into(), serde_json::to_string(&self.early).expect("serializes"));
        meta.insert("history".into(), self.history.to_json());
        meta.insert("train_config".into(), serde_json::to_string(&self.config).expect("serializes"));
        Checkpoint {
            config: self.detector.clone(),
            params: self.params.clone(),
            optimizer: Some(self.optimizer.clone()),
            best_params: Some(self.best_params.clone()),
            meta,
        }
    }

    fn sampling(&self) -> SamplingConfig {
        SamplingConfig { frames: self.config.frames, ..Default::default() }
    }

    fn encode(&self, frames: &Tensor) -> Result<Vec<LayerAttributes>> {
        self.encoder.encode_clip(&self.encoder.normalize(frames)?)
    }

    fn cached_taps(&self, source: &VideoSource, indices: &[usize]) -> Result<Arc<Vec<LayerAttributes>>> {
        let key = (source.key.clone(), indices.to_vec());
        if let Some(hit) = self.cache.lock().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        let taps = Arc::new(self.encode(&select_frames(&source.frames, indices)?)?);
        self.cache.lock().unwrap().insert(key, taps.clone());
        Ok(taps)
    }

    /// Evaluation windows for a source: fixed for the whole run.
    pub fn eval_windows(&self, source: &VideoSource) -> Result<Vec<Vec<usize>>> {
        let mut rng = rng_for(self.config.seed, &[streams::EVAL, hash_str(&source.key)]);
        sample_windows(source.frame_count(), source.fps, self.config.clips_per_video, &self.sampling(), &mut rng)
    }

    /// Scores every evaluation clip of `sources` with `params`.
    pub fn score_sources(&self, params: &DetectorParams, sources: &[VideoSource]) -> Result<Vec<(usize, DetectorOutput)>> {
        let clips: Vec<(usize, Vec<usize>)> = sources
            .iter()
            .enumerate()
            .map(|(i, s)| Ok(self.eval_windows(s)?.into_iter().map(move |w| (i, w))))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        clips
            .par_iter()
            .map(|(i, w)| {
                let taps = self.cached_taps(&sources[*i], w)?;
                let mut g = Graph::<f32>::new();
                let vars = params.bind(&mut g, &self.detector)?;
                let fwd = detector_forward(&mut g, &self.detector, &vars, &taps)?;
                Ok((*i, output_of(&g, &fwd)))
            })
            .collect()
    }

    /// Video-level AUROC of `params` on `sources`.
    pub fn evaluate(&self, params: &DetectorParams, sources: &[VideoSource]) -> Result<f64> {
        let scored = self.score_sources(params, sources)?;
        let scores: Vec<f64> = scored.iter().map(|(_, o)| o.score).collect();
        let ids: Vec<String> = scored.iter().map(|(i, _)| sources[*i].video_id.clone()).collect();
        let labels: Vec<bool> = scored.iter().map(|(i, _)| sources[*i].label).collect();
        video_auroc(&scores, &ids, &labels)
    }

    /// The epoch's clip list `(source, frame indices)` in training order.
    fn epoch_plan(&self, epoch: usize, train: &[VideoSource]) -> Result<Vec<(usize, Vec<usize>)>> {
        let mut plan = Vec::new();
        for (i, s) in train.iter().enumerate() {
            let mut rng = rng_for(self.config.seed, &[streams::SAMPLING, epoch as u64, hash_str(&s.key)]);
            for w in sample_windows(s.frame_count(), s.fps, self.config.clips_per_video, &self.sampling(), &mut rng)? {
                plan.push((i, w));
            }
        }
        plan.shuffle(&mut rng_for(self.config.seed, &[streams::EPOCH_ORDER, epoch as u64]));
        Ok(plan)
    }

    fn step(&mut self, epoch: usize, position: usize, batch: &[(usize, Vec<usize>)], train: &[VideoSource]) -> Result<StepLosses> {
        let n = batch.len() as f64;
        let augmenting = self.augment != AugmentConfig::disabled();
        let results: Vec<(Vec<Tensor>, DetectorOutput, bool)> = batch
            .par_iter()
            .enumerate()
            .map(|(j, (i, w))| {
                let source = &train[*i];
                let taps = if augmenting {
                    let mut rng = rng_for(self.config.seed, &[streams::AUGMENT, epoch as u64, (position + j) as u64]);
                    let frames = augment(&select_frames(&source.frames, w)?, &self.augment, &mut rng)?;
                    Arc::new(self.encode(&frames)?)
                } else {
                    self.cached_taps(source, w)?
                };
                let mut g = Graph::<f32>::new();
                let vars = self.params.bind(&mut g, &self.detector)?;
                let fwd = detector_forward(&mut g, &self.detector, &vars, &taps)?;
                let loss = clip_loss(&mut g, &fwd, source.label, self.detector.focal_gamma)?;
                let loss = g.scale(loss, 1.0 / n)?;
                let mut grads = g.backward(loss)?;
                let grads = vars.all.iter().map(|&v| grads.take(v).expect("parameter gradient")).collect();
                Ok((grads, output_of(&g, &fwd), source.label))
            })
            .collect::<Result<_>>()?;

        let mut total: Vec<Tensor> = self.params.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        let mut losses = StepLosses::default();
        let gamma = self.detector.focal_gamma;
        for (grads, out, label) in &results {
            for (acc, g) in total.iter_mut().zip(grads) {
                acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
            }
            let f = |z: Option<f64>| z.map(|z| focal_loss_value(z, *label, gamma) / n).unwrap_or(0.0);
            losses.t += f(out.logit_t);
            losses.s += f(out.logit_s);
            losses.st += f(out.logit_st);
        }
        losses.total = losses.t + losses.s + losses.st;

        let mut g = Graph::<f32>::new();
        let vars = self.params.bind(&mut g, &self.detector)?;
        if let Some(fcg) = fcg_term(&mut g, &self.detector, &vars, self.phi)? {
            losses.fcg = g.value(fcg).data()[0] as f64;
            losses.total += self.detector.fcg_weight * losses.fcg;
            let weighted = g.scale(fcg, self.detector.fcg_weight)?;
            let mut grads = g.backward(weighted)?;
            for (acc, &v) in total.iter_mut().zip(&vars.all) {
                let gv = grads.take(v).expect("parameter gradient");
                acc.data_mut().iter_mut().zip(gv.data()).for_each(|(a, b)| *a += b);
            }
        }

        let names = self.params.names().to_vec();
        let mut refs: Vec<&mut Tensor> = self.params.tensors_mut().iter_mut().collect();
        self.optimizer.step(&mut refs, &total.iter().collect::<Vec<_>>(), &names)?;
        Ok(losses)
    }

    /// Runs one epoch (training + validation) and returns whether early
    /// stopping triggered.
    pub fn run_epoch(&mut self, train: &[VideoSource], val: &[VideoSource]) -> Result<bool> {
        if train.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        if val.is_empty() {
            return Err(Error::Config("validation split is empty".into()));
        }
        let epoch = self.epoch + 1;
        let plan = self.epoch_plan(epoch, train)?;
        let mut sum = StepLosses::default();
        let mut steps = 0usize;
        for (b, batch) in plan.chunks(self.config.batch_size).enumerate() {
            let l = self.step(epoch, b * self.config.batch_size, batch, train)?;
            sum.t += l.t;
            sum.s += l.s;
            sum.st += l.st;
            sum.fcg += l.fcg;
            sum.total += l.total;
            steps += 1;
        }
        let k = steps.max(1) as f64;
        let val_auroc = self.evaluate(&self.params, val)?;
        let train_auroc = if self.track_train_auroc { Some(self.evaluate(&self.params, train)?) } else { None };
        let (improved, stop) = self.early.update(val_auroc);
        if improved {
            self.best_params = self.params.clone();
        }
        self.epoch = epoch;
        self.history.epochs.push(EpochRecord {
            epoch,
            steps: self.steps(),
            loss_t: sum.t / k,
            loss_s: sum.s / k,
            loss_st: sum.st / k,
            loss_fcg: sum.fcg / k,
            loss_total: sum.total / k,
            train_auroc,
            val_auroc,
        });
        Ok(stop)
    }

    /// Trains until the epoch budget or early stopping. With `checkpoint_dir`,
    /// writes `last.ckpt` every epoch and `best.ckpt` on improvement.
    pub fn fit(&mut self, train: &[VideoSource], val: &[VideoSource], checkpoint_dir: Option<&Path>) -> Result<TrainOutcome> {
        let mut stopped = false;
        while self.epoch < self.config.epochs && !stopped {
            stopped = self.run_epoch(train, val)?;
            if let Some(dir) = checkpoint_dir {
                std::fs::create_dir_all(dir)?;
                let ck = self.checkpoint();
                ck.save(dir.join("last.ckpt"))?;
                if self.early.bad_epochs == 0 {
                    Checkpoint { params: self.best_params.clone(), optimizer: None, best_params: None, ..ck }
                        .save(dir.join("best.ckpt"))?;
                }
            }
        }
        Ok(TrainOutcome {
            history: self.history.clone(),
            best_params: self.best_params.clone(),
            best_val_auroc: self.early.best.unwrap_or(f64::NAN),
            stopped_early: stopped,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strictly_worsening_validation_stops_at_epoch_eleven() {
        let mut es = EarlyStopping::new(10);
        let mut stopped_at = None;
        for epoch in 1..=30 {
            let (_, stop) = es.update(1.0 - epoch as f64 * 0.01);
            if stop {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(11));
    }

    #[test]
    fn improvement_resets_patience() {
        let mut es = EarlyStopping::new(2);
        assert_eq!(es.update(0.5), (true, false));
        assert_eq!(es.update(0.4), (false, false));
        assert_eq!(es.update(0.6), (true, false));
        assert_eq!(es.update(0.6), (false, false));
        assert_eq!(es.update(0.1), (false, true));
    }

    #[test]
    fn history_hash_is_stable_and_sensitive() {
        let rec = EpochRecord {
            epoch: 1,
            steps: 8,
            loss_t: 0.1,
            loss_s: 0.2,
            loss_st: 0.3,
            loss_fcg: 1.0,
            loss_total: 0.75,
            train_auroc: None,
            val_auroc: 0.5,
        };
        let a = History { epochs: vec![rec.clone()] };
        assert_eq!(a.hash(), a.clone().hash());
        assert_eq!(a.hash().len(), 64);
        let b = History { epochs: vec![EpochRecord { val_auroc: 0.5000000001, ..rec }] };
        assert_ne!(a.hash(), b.hash());
    }

    proptest::proptest! {
        #[test]
        fn history_json_round_trips_bit_exactly(loss in 0.0f64..10.0, auc in 0.0f64..1.0) {
            let rec = EpochRecord {
                epoch: 3,
                steps: 24,
                loss_t: loss,
                loss_s: loss / 3.0,
                loss_st: loss.sqrt(),
                loss_fcg: loss * 0.7,
                loss_total: loss * 1.1,
                train_auroc: Some(auc),
                val_auroc: auc / 7.0,
            };
            let h = History { epochs: vec![rec] };
            let back: History = serde_json::from_str(&h.to_json()).unwrap();
            proptest::prop_assert_eq!(back.hash(), h.hash());
        }
    }
}
