//! Training, evaluation and prediction over feature records.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{FusionVariant, RunConfig};
use crate::data::{FeatureRecord, LabelScale};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::head::batch_mse;
use crate::metrics::{evaluate_predictions, MetricReport};
use crate::model::{Model, ModelInput};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::smoe::balance_loss;

/// Stream of the shuffling generator; stream 0 initialises parameters.
pub const SHUFFLE_STREAM: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        Self {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean batch objective over the epoch.
    pub loss: f64,
    pub train_mae: f64,
    pub val_mae: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub params: ParamStore<f32>,
    pub log: Vec<EpochLog>,
    /// Epoch whose parameters were kept.
    pub epoch: usize,
    pub rng: RngState,
}

pub fn prepare(records: &[FeatureRecord], config: &RunConfig) -> Result<Vec<ModelInput<f32>>> {
    records
        .iter()
        .map(|r| ModelInput::from_record(r, &config.model))
        .collect()
}

pub fn predict_inputs(model: &Model, params: &ParamStore<f32>, inputs: &[ModelInput<f32>]) -> Result<Vec<f64>> {
    inputs.iter().map(|i| model.predict(params, i).map(|(s, _)| s)).collect()
}

fn mae(preds: &[f64], inputs: &[ModelInput<f32>]) -> f64 {
    let total: f64 = preds.iter().zip(inputs).map(|(p, i)| (p - i.label as f64).abs()).sum();
    total / preds.len() as f64
}

fn diverged(epoch: usize, batch: usize, loss: f64) -> impl FnOnce(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::Divergence { epoch, batch, loss },
        other => other,
    }
}

/// Trains a fresh model; `on_epoch` sees every log entry as it is produced.
pub fn train_with(
    config: &RunConfig,
    train: &[FeatureRecord],
    val: &[FeatureRecord],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.model.validate()?;
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let (model, mut params) = Model::init::<f32>(&config.model, config.seed)?;
    let train_in = prepare(train, config)?;
    let val_in = prepare(val, config)?;
    let mut adam = Adam::new(config.optimizer.clone(), &params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let balance = config.model.smoe.balance_coef;
    let use_balance = balance > 0.0 && config.model.fusion == FusionVariant::Smoe;

    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    let mut order: Vec<usize> = (0..train_in.len()).collect();
    for epoch in 1..=config.epochs {
        order.sort_unstable();
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        let batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        for (bi, batch) in batches.iter().enumerate() {
            let grads = {
                let mut g = Graph::with_params(&params);
                let mut preds = Vec::with_capacity(batch.len());
                let mut labels = Vec::with_capacity(batch.len());
                let mut probs = Vec::new();
                let mut routes = Vec::new();
                for &i in *batch {
                    let out = model
                        .forward(&mut g, &train_in[i], None)
                        .map_err(diverged(epoch, bi, f64::NAN))?;
                    preds.push(out.score);
                    labels.push(train_in[i].label);
                    for l in out.layers {
                        probs.push(l.probs);
                        routes.push(l.routing);
                    }
                }
                let mut loss = batch_mse(&mut g, &preds, &labels).map_err(diverged(epoch, bi, f64::NAN))?;
                if use_balance {
                    let refs: Vec<_> = routes.iter().collect();
                    let aux = balance_loss(&mut g, &probs, &refs, config.model.smoe.num_experts)?;
                    let aux = g.scale(aux, balance as f32)?;
                    loss = g.add(loss, aux).map_err(diverged(epoch, bi, f64::NAN))?;
                }
                let value = g.value(loss)?.data()[0] as f64;
                if !value.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        batch: bi,
                        loss: value,
                    });
                }
                loss_sum += value;
                g.backward(loss).map_err(diverged(epoch, bi, value))?.params(&params)
            };
            adam.update(&mut params, &grads);
        }
        let train_mae = mae(&predict_inputs(&model, &params, &train_in).map_err(diverged(epoch, 0, f64::NAN))?, &train_in);
        let val_mae = if val_in.is_empty() {
            None
        } else {
            Some(mae(&predict_inputs(&model, &params, &val_in)?, &val_in))
        };
        let entry = EpochLog {
            epoch,
            loss: loss_sum / batches.len() as f64,
            train_mae,
            val_mae,
        };
        log::info!(
            "epoch {epoch}: loss {:.6} train_mae {:.6} val_mae {}",
            entry.loss,
            entry.train_mae,
            val_mae.map_or("-".to_string(), |v| format!("{v:.6}"))
        );
        on_epoch(&entry);
        log.push(entry);
        if config.keep_best_val {
            if let Some(v) = val_mae {
                if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                    best = Some((v, epoch, params.clone()));
                }
            }
        }
        if config.target_train_mae.is_some_and(|t| train_mae < t) {
            break;
        }
    }
    let mut epoch = log.len();
    if let Some((_, e, p)) = best {
        epoch = e;
        params = p;
    }
    Ok(TrainOutcome {
        model,
        params,
        log,
        epoch,
        rng: RngState::capture(config.seed, &rng),
    })
}

pub fn train(config: &RunConfig, train: &[FeatureRecord], val: &[FeatureRecord]) -> Result<TrainOutcome> {
    train_with(config, train, val, |_| {})
}

/// Metric suite over `records`, which must use `scale`.
pub fn evaluate(
    model: &Model,
    params: &ParamStore<f32>,
    records: &[FeatureRecord],
    scale: LabelScale,
) -> Result<(MetricReport, Vec<f64>)> {
    if records.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    if let Some(r) = records.iter().find(|r| r.label_scale != scale) {
        return Err(Error::Data(format!(
            "record `{}` uses scale {:?}, model was trained on {:?}",
            r.id, r.label_scale, scale
        )));
    }
    let inputs: Vec<ModelInput<f32>> = records
        .iter()
        .map(|r| ModelInput::from_record(r, &model.config))
        .collect::<Result<_>>()?;
    let preds = predict_inputs(model, params, &inputs)?;
    let labels: Vec<f64> = records.iter().map(|r| r.label as f64).collect();
    Ok((evaluate_predictions(&preds, &labels, scale)?, preds))
}
