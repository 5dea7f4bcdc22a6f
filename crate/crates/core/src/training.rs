//! Mini-batch Adam training with validation-based early stopping.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::datamodel::{AttackConfig, AttackExample, DatasetSplit};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricRow, MetricsReport, MrrMode};
use crate::model::{AttackModel, ModelSpec};
use crate::nn::{Graph, Mode, ParamStore, Tensor};
use crate::seeds;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamSettings {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamSettings {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment accumulators, shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub settings: AdamSettings,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(params: &ParamStore, settings: AdamSettings) -> Self {
        Self { settings, m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update with gradients `grads` (one per parameter).
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), self.m.len())));
        }
        self.step += 1;
        let AdamSettings { learning_rate, beta1, beta2, eps } = self.settings;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("gradient {:?} vs parameter {:?}", g.shape(), p.shape())));
            }
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *w -= learning_rate * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Loop controls that sit beside the model hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub max_epochs: usize,
    pub patience: usize,
    /// The `k` of the validation Recall@k used for model selection.
    pub select_k: usize,
    /// Evaluate at most this many validation examples per epoch.
    pub valid_limit: Option<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { max_epochs: 100, patience: 5, select_k: 10, valid_limit: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_recall: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub adam: AdamSettings,
    pub batch_size: usize,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_recall: f64,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "# adam lr={} beta1={} beta2={} eps={} batch_size={} seed={} best_epoch={}\nepoch,train_loss,valid_recall@10,wall_seconds\n",
            self.adam.learning_rate, self.adam.beta1, self.adam.beta2, self.adam.eps, self.batch_size, self.seed, self.best_epoch
        );
        for e in &self.epochs {
            let _ = writeln!(s, "{},{},{},{:.3}", e.epoch, e.train_loss, e.valid_recall, e.wall_seconds);
        }
        s
    }
}

/// Everything that changes while training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: AttackModel,
    pub optimizer: Adam,
    pub epoch: usize,
    pub best_valid_recall: f64,
    pub seed: u64,
    dropout: f64,
}

impl TrainState {
    pub fn new(spec: ModelSpec, cfg: &AttackConfig) -> Result<Self> {
        cfg.validate()?;
        let model = AttackModel::new(spec, seeds::derive_seed(cfg.seed, &[0]))?;
        let optimizer = Adam::new(model.params(), AdamSettings::with_learning_rate(cfg.learning_rate));
        Ok(Self { dropout: model.spec().dropout, model, optimizer, epoch: 0, best_valid_recall: f64::NEG_INFINITY, seed: cfg.seed })
    }

    /// Mean loss over `batch`, followed by one optimizer update. `batch_index`
    /// keys the dropout streams and is reported on divergence.
    pub fn step(&mut self, batch: &[&AttackExample], batch_index: usize) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset("empty batch".into()));
        }
        let mut grads = self.model.params().zeros_like();
        let mut total = 0.0;
        for (j, ex) in batch.iter().enumerate() {
            let rng = seeds::stream(self.seed, &[1, self.epoch as u64, batch_index as u64, j as u64]);
            let mut mode = Mode::train(self.dropout, rng);
            let mut g = Graph::new(self.model.params());
            let loss = self.model.loss(&mut g, ex, &mut mode)?;
            total += g.value(loss).get(0, 0);
            g.backward(loss).accumulate_into(&mut grads);
        }
        let scale = 1.0 / batch.len() as f64;
        let mean = total * scale;
        if !mean.is_finite() || grads.iter().any(|t| !t.is_finite()) {
            return Err(Error::Divergence { epoch: self.epoch, batch: batch_index });
        }
        for t in &mut grads {
            t.scale_assign(scale);
        }
        self.optimizer.update(self.model.params_mut(), &grads)?;
        Ok(mean)
    }

    /// One pass over `examples` in a seeded shuffled order; returns the mean batch loss.
    pub fn run_epoch(&mut self, examples: &[AttackExample], batch_size: usize) -> Result<f64> {
        let mut order: Vec<&AttackExample> = examples.iter().collect();
        order.shuffle(&mut seeds::stream(self.seed, &[2, self.epoch as u64]));
        let mut sum = 0.0;
        let mut batches = 0;
        for (b, batch) in order.chunks(batch_size).enumerate() {
            sum += self.step(batch, b)?;
            batches += 1;
        }
        Ok(sum / batches.max(1) as f64)
    }
}

/// Trains `spec` on `split.train`, selecting the epoch with the best
/// validation Recall@k. The returned model holds that epoch's parameters
/// rounded to `f32`, exactly what a checkpoint stores.
pub fn train(spec: ModelSpec, split: &DatasetSplit, cfg: &AttackConfig, opts: &TrainOptions) -> Result<(AttackModel, TrainLog)> {
    if split.train.is_empty() {
        return Err(Error::EmptyDataset("training partition is empty".into()));
    }
    if split.valid.is_empty() {
        return Err(Error::EmptyDataset("validation partition is empty".into()));
    }
    if opts.max_epochs == 0 {
        return Err(Error::Config("max_epochs must be >= 1".into()));
    }
    let valid = match opts.valid_limit {
        Some(n) => &split.valid[..n.min(split.valid.len())],
        None => &split.valid[..],
    };
    let mut state = TrainState::new(spec, cfg)?;
    let mut log = TrainLog {
        adam: state.optimizer.settings,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        epochs: Vec::new(),
        best_epoch: 0,
        best_valid_recall: f64::NEG_INFINITY,
    };
    let mut best_params = state.model.params().clone();
    let mut stale = 0;
    let start = Instant::now();
    for epoch in 1..=opts.max_epochs {
        state.epoch = epoch;
        let train_loss = state.run_epoch(&split.train, cfg.batch_size)?;
        let report = metrics::evaluate(&state.model, valid, &[opts.select_k], MrrMode::PerItem)?;
        let valid_recall = report.rows[0].recall;
        log::info!("epoch {epoch}: train_loss={train_loss:.5} valid_recall@{}={valid_recall:.4}", opts.select_k);
        log.epochs.push(EpochRecord { epoch, train_loss, valid_recall, wall_seconds: start.elapsed().as_secs_f64() });
        if valid_recall > state.best_valid_recall {
            state.best_valid_recall = valid_recall;
            log.best_epoch = epoch;
            log.best_valid_recall = valid_recall;
            best_params = state.model.params().clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= opts.patience {
                break;
            }
        }
    }
    let mut model = AttackModel::from_parts(state.model.spec().clone(), best_params)?;
    model.params_mut().round_to_f32();
    Ok((model, log))
}

/// Builds the model spec implied by an attack configuration.
pub fn spec_from_config(
    cfg: &AttackConfig,
    encoder: crate::encoders::EncoderKind,
    decoder: crate::decoders::DecoderKind,
    n_items: usize,
) -> ModelSpec {
    ModelSpec {
        encoder,
        decoder,
        n_items,
        m: cfg.m,
        d: cfg.d,
        heads: cfg.heads,
        dropout: cfg.dropout,
        activation: crate::decoders::Activation::Tanh,
        epsilon: cfg.epsilon_for(n_items),
        sequence_smoothing: false,
    }
}

/// Mean of `R` reports that share encoder, decoder and `k` values.
pub fn average_runs(reports: &[MetricsReport]) -> Result<MetricsReport> {
    let first = reports.first().ok_or_else(|| Error::EmptyDataset("no runs to average".into()))?;
    let key = |r: &MetricsReport| (r.encoder.clone(), r.decoder.clone(), r.rows.iter().map(|x| x.k).collect::<Vec<_>>());
    let reference = key(first);
    let mut sums: BTreeMap<usize, (f64, f64, f64, usize)> = BTreeMap::new();
    for r in reports {
        if key(r) != reference {
            return Err(Error::KeyMismatch(format!(
                "run {}/{} with k {:?} does not match {}/{} with k {:?}",
                r.encoder,
                r.decoder,
                key(r).2,
                reference.0,
                reference.1,
                reference.2
            )));
        }
        for row in &r.rows {
            let e = sums.entry(row.k).or_default();
            e.0 += row.recall;
            e.1 += row.ndcg;
            e.2 += row.mrr;
            e.3 += row.n_examples;
        }
    }
    let n = reports.len() as f64;
    let rows = first
        .rows
        .iter()
        .map(|row| {
            let (r, g, m, c) = sums[&row.k];
            MetricRow { k: row.k, recall: r / n, ndcg: g / n, mrr: m / n, n_examples: c / reports.len() }
        })
        .collect();
    Ok(MetricsReport { encoder: first.encoder.clone(), decoder: first.decoder.clone(), rows, per_example: Vec::new() })
}
