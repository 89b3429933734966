use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::{batch_loss, mean_loss, EncodedPair, ParamVars};
use super::model::{ModelParams, Seq2SeqModel};
use super::vocab::{Vocab, EOS};
use crate::error::{Error, Result};
use crate::synth_corpus::SamplePair;
use crate::tensor_core::{Tape, Tensor};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Adam {
            lr,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut ModelParams, grads: &[Vec<f64>]) {
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step);
        let c2 = 1.0 - BETA2.powi(self.step);
        for (k, t) in params.tensors_mut().into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for (i, w) in t.data_mut().iter_mut().enumerate() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                *w -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= k);
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Patience {
    Improved,
    Waiting,
    Stop,
}

/// Stops after `patience` consecutive epochs without a new best dev loss.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    bad: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            bad: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> Patience {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.bad = 0;
            Patience::Improved
        } else {
            self.bad += 1;
            if self.bad >= self.patience {
                Patience::Stop
            } else {
                Patience::Waiting
            }
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub elapsed_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_dev_loss: f64,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "train_loss", "dev_loss", "elapsed_seconds"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.dev_loss.to_string(),
                format!("{:.3}", e.elapsed_seconds),
            ])?;
        }
        w.flush().map_err(|err| Error::io(path, err))
    }
}

/// Builds both vocabularies from `train` and a freshly initialised model.
pub fn init_model(train: &[SamplePair], hyper: super::Hyperparams) -> Result<Seq2SeqModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    Seq2SeqModel::new(Vocab::for_sources(train), Vocab::for_targets(train), hyper, &mut rng)
}

impl Seq2SeqModel {
    pub fn encode_pair(&self, p: &SamplePair) -> Result<EncodedPair> {
        let src = self.src_vocab.encode_source(&p.log_sequence());
        if src.is_empty() {
            return Err(Error::Empty("source sequence"));
        }
        let tgt = self.tgt_vocab.encode_target(&p.target);
        if tgt.last() != Some(&EOS) {
            return Err(Error::MalformedSequence("target does not end with <EOC>".into()));
        }
        Ok(EncodedPair { src, tgt })
    }

    pub fn encode_pairs(&self, pairs: &[SamplePair]) -> Result<Vec<EncodedPair>> {
        pairs.iter().map(|p| self.encode_pair(p)).collect()
    }

    /// Mean teacher-forced loss per target token, without dropout.
    pub fn eval_loss(&self, pairs: &[SamplePair]) -> Result<f64> {
        let enc = self.encode_pairs(pairs)?;
        Ok(mean_loss(&self.params, &self.hyper, &enc, self.hyper.batch_size))
    }
}

/// Teacher-forced training with early stopping on dev loss. The returned
/// model carries the parameters of the best dev epoch.
pub fn train(
    model: Seq2SeqModel,
    train: &[SamplePair],
    dev: &[SamplePair],
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(Seq2SeqModel, TrainReport)> {
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if dev.is_empty() {
        return Err(Error::Empty("development set"));
    }
    let tr = model.encode_pairs(train)?;
    let dv = model.encode_pairs(dev)?;
    train_encoded(model, &tr, &dv, on_epoch)
}

pub fn train_encoded(
    mut model: Seq2SeqModel,
    train: &[EncodedPair],
    dev: &[EncodedPair],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(Seq2SeqModel, TrainReport)> {
    let hp = model.hyper.clone();
    hp.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Empty("training or development set"));
    }
    // Separate stream from initialisation.
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed ^ 0x5EED_0F_BA7C4);
    let mut adam = Adam::new(hp.learning_rate, &model.params);
    let mut stopper = EarlyStopping::new(hp.patience_epochs);
    let mut best = model.params.clone();
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    let start = Instant::now();

    for epoch in 1..=hp.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        // Bucket by source length; shuffling first varies batch membership.
        order.sort_by_key(|&i| train[i].src.len());
        let mut batches: Vec<&[usize]> = order.chunks(hp.batch_size).collect();
        batches.shuffle(&mut rng);

        let mut total = 0.0;
        let mut tokens = 0;
        for (bi, idx) in batches.iter().enumerate() {
            let pairs: Vec<&EncodedPair> = idx.iter().map(|&i| &train[i]).collect();
            let mut tape = Tape::new();
            let (pv, vars) = ParamVars::leaves(&mut tape, &model.params);
            let (sum, n) = batch_loss(&mut tape, &pv, &hp, &pairs, Some(&mut rng));
            let loss = tape.scale(sum, 1.0 / n as f64);
            let mut grads = tape.backward(loss).map_err(|e| {
                Error::Training(format!("epoch {epoch}, batch {bi}: {e}"))
            })?;
            let mut g: Vec<Vec<f64>> = vars
                .iter()
                .zip(model.params.tensors())
                .map(|(v, t)| grads.take(*v).unwrap_or_else(|| vec![0.0; t.len()]))
                .collect();
            clip_global_norm(&mut g, hp.clip_norm);
            adam.update(&mut model.params, &g);
            total += tape.value(sum).data()[0];
            tokens += n;
        }
        let train_loss = total / tokens as f64;
        let dev_loss = mean_loss(&model.params, &hp, dev, hp.batch_size);
        if !train_loss.is_finite() || !dev_loss.is_finite() {
            return Err(Error::Training(format!(
                "epoch {epoch}: non-finite loss (train {train_loss}, dev {dev_loss})"
            )));
        }
        let log = EpochLog {
            epoch,
            train_loss,
            dev_loss,
            elapsed_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&log);
        epochs.push(log);
        match stopper.observe(epoch, dev_loss) {
            Patience::Improved => best = model.params.clone(),
            Patience::Waiting => {}
            Patience::Stop => {
                stopped_early = true;
                break;
            }
        }
    }
    model.params = best;
    Ok((
        model,
        TrainReport {
            epochs,
            best_epoch: stopper.best_epoch(),
            best_dev_loss: stopper.best_loss(),
            stopped_early,
        },
    ))
}

/// Every parameter tensor, flattened, for equality checks.
pub fn flat_params(p: &ModelParams) -> Vec<f64> {
    p.tensors().iter().flat_map(|t: &&Tensor| t.data().iter().copied()).collect()
}
