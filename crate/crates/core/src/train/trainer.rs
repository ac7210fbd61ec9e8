use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{adamw_step, lr_schedule, AdamState, TrainConfig};
use crate::data::{split_events, LogWedge};
use crate::error::{Error, Result};
use crate::loss::{combined_loss, focal_loss, masked_regression_loss, update_balancer, BalancerState};
use crate::metrics::{MetricsAccumulator, MetricsReport};
use crate::model::{Bcae, LayerGraph, ModelSpec, Tape};
use crate::parallel::{map_ordered, thread_count};
use crate::tensor::{activation_backward, Precision, Tensor};

/// Column order of [`EpochLog::csv_row`].
pub const EPOCH_CSV_HEADER: &str = "epoch,lr,c_t,rho_s,rho_r,mae,precision,recall";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    /// 0-based epoch index.
    pub epoch: usize,
    pub lr: f64,
    /// Segmentation coefficient used during this epoch.
    pub c_t: f64,
    /// Mean segmentation loss over the epoch's batches.
    pub rho_s: f64,
    /// Mean regression loss over the epoch's batches.
    pub rho_r: f64,
    pub mae: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    /// The balancer kept `c_t` because `rho_s` was zero.
    pub balancer_held: bool,
}

impl EpochLog {
    pub fn combined_loss(&self) -> f64 {
        combined_loss(self.rho_s, self.rho_r, self.c_t)
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_owned(), |x| x.to_string());
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.c_t,
            self.rho_s,
            self.rho_r,
            opt(self.mae),
            opt(self.precision),
            opt(self.recall)
        )
    }
}

/// Padded training wedges plus the held-out evaluation slice.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub train: Vec<LogWedge>,
    pub holdout: Vec<LogWedge>,
}

fn padded(w: LogWedge) -> Result<LogWedge> {
    if w.is_padded() {
        Ok(w)
    } else {
        w.pad_horizontal()
    }
}

impl TrainingSet {
    /// Hold out `round(n * fraction)` wedges chosen by `seed`.
    pub fn new(wedges: Vec<LogWedge>, holdout_fraction: f64, seed: u64) -> Result<Self> {
        if wedges.is_empty() {
            return Err(Error::config("training set is empty"));
        }
        let wedges = wedges.into_iter().map(padded).collect::<Result<Vec<_>>>()?;
        let n = wedges.len();
        let n_holdout = (n as f64 * holdout_fraction).round() as usize;
        let (holdout, train) = split_events(wedges, n_holdout as f64 / n as f64, seed)?;
        if train.is_empty() {
            return Err(Error::config("holdout fraction leaves no training wedges"));
        }
        Ok(Self { train, holdout })
    }
}

/// Per-wedge and pooled metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub per_wedge: Vec<MetricsReport>,
    pub aggregate: MetricsReport,
}

/// Encode, decode and score padded wedges against their clipped originals.
pub fn evaluate(model: &Bcae, wedges: &[LogWedge], precision: Precision, threshold: f32) -> Result<Evaluation> {
    let encoder = model.encoder.cast(precision);
    let results = map_ordered(wedges, thread_count(), |w| -> Result<MetricsAccumulator> {
        let code = model.encode_with(&encoder, w, precision)?;
        let out = model.decode_with_threshold(&code, threshold)?;
        let target = w.clip_horizontal();
        let mut acc = MetricsAccumulator::new();
        acc.add(out.reconstruction.values(), &out.seg, target.values(), threshold)?;
        Ok(acc)
    });
    let mut total = MetricsAccumulator::new();
    let mut per_wedge = Vec::with_capacity(wedges.len());
    for acc in results {
        let acc = acc?;
        per_wedge.push(acc.report());
        total.merge(&acc);
    }
    Ok(Evaluation {
        per_wedge,
        aggregate: total.report(),
    })
}

/// Losses and parameter gradients of one batch, averaged over its wedges.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub seg_loss: f64,
    pub reg_loss: f64,
    /// One flat gradient per parameter, encoder first, then the
    /// segmentation and regression decoders.
    pub grads: Vec<Vec<f32>>,
}

/// Model, optimiser and balancer state between epochs. This is exactly what
/// a checkpoint stores.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Bcae,
    pub config: TrainConfig,
    pub adam: AdamState,
    pub balancer: BalancerState,
    /// Completed epochs.
    pub epoch: usize,
}

fn diagnose(graph: &LayerGraph, tape: &Tape, name: &str) -> Option<String> {
    graph.first_non_finite(tape).map(|layer| format!("{name} {layer}"))
}

impl TrainState {
    pub fn new(spec: ModelSpec, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if (config.loss.threshold - spec.seg_threshold as f64).abs() > 1e-6 {
            return Err(Error::config(format!(
                "loss threshold {} differs from the model threshold {}",
                config.loss.threshold, spec.seg_threshold
            )));
        }
        let model = Bcae::new(spec, config.seed)?;
        let adam = AdamState::zeros(model.graphs().iter().flat_map(|g| g.params.iter().map(|p| p.tensor.len())));
        let balancer = BalancerState::new(config.loss.balancer_c0);
        Ok(Self {
            model,
            config,
            adam,
            balancer,
            epoch: 0,
        })
    }

    fn sample(&self, wedge: &LogWedge, c: f64) -> Result<BatchGradients> {
        let model = &self.model;
        let threshold = self.config.loss.threshold;
        let x = model.input_tensor(wedge)?;
        let enc = model.encoder.forward_train(&x)?;
        let z = enc.output();
        let seg_tape = model.seg_decoder.forward_train(z)?;
        let reg_tape = model.reg_decoder.forward_train(z)?;
        let seg = seg_tape.output();
        let raw = reg_tape.output();
        let transform = model.regression_transform();
        let reg = crate::tensor::activation_forward(raw, transform);

        let target = wedge.values();
        let labels: Vec<f32> = target.iter().map(|&v| (v > 0.0) as u8 as f32).collect();
        let seg_values = seg.values();
        let ls = focal_loss(&seg_values, &labels, self.config.loss.gamma)?;
        let lr = masked_regression_loss(&reg.values(), target, &seg_values, threshold)?;
        if !ls.value.is_finite() || !lr.value.is_finite() {
            let op = diagnose(&model.encoder, &enc, "encoder")
                .or_else(|| diagnose(&model.seg_decoder, &seg_tape, "seg"))
                .or_else(|| diagnose(&model.reg_decoder, &reg_tape, "reg"))
                .or_else(|| (!reg.all_finite()).then(|| "regression transform".to_owned()))
                .unwrap_or_else(|| if ls.value.is_finite() { "masked_regression_loss" } else { "focal_loss" }.to_owned());
            return Err(Error::NonFinite { op });
        }

        let shape = seg.shape().to_vec();
        let g_seg = Tensor::from_vec(shape.clone(), ls.grad.iter().map(|&g| (g as f64 * c) as f32).collect())?;
        let g_reg = activation_backward(raw, &reg, &Tensor::from_vec(shape, lr.grad)?, transform)?;
        let bs = model.seg_decoder.backward(&seg_tape, &g_seg, true)?;
        let br = model.reg_decoder.backward(&reg_tape, &g_reg, true)?;
        let mut gz = bs.input.expect("requested");
        gz.add_assign(&br.input.expect("requested"))?;
        let be = model.encoder.backward(&enc, &gz, false)?;
        let grads = be
            .params
            .into_iter()
            .chain(bs.params)
            .chain(br.params)
            .map(|t| t.to_vec())
            .collect();
        Ok(BatchGradients {
            seg_loss: ls.value,
            reg_loss: lr.value,
            grads,
        })
    }

    /// Mean losses and gradients of `c * L_seg + L_reg` over `batch`.
    /// Per-wedge results are reduced in batch order, so the sum does not
    /// depend on the thread count.
    pub fn batch_gradients(&self, batch: &[LogWedge], c: f64) -> Result<BatchGradients> {
        if batch.is_empty() {
            return Err(Error::config("empty batch"));
        }
        let mut parts = map_ordered(batch, thread_count(), |w| self.sample(w, c)).into_iter();
        let mut acc = parts.next().expect("non-empty batch")?;
        for part in parts {
            let part = part?;
            acc.seg_loss += part.seg_loss;
            acc.reg_loss += part.reg_loss;
            for (a, g) in acc.grads.iter_mut().zip(&part.grads) {
                a.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        let n = batch.len() as f64;
        acc.seg_loss /= n;
        acc.reg_loss /= n;
        let scale = (1.0 / n) as f32;
        for g in &mut acc.grads {
            g.iter_mut().for_each(|x| *x *= scale);
        }
        if acc.grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { op: "backward pass".into() });
        }
        Ok(acc)
    }

    /// One optimiser step on `grads` at learning rate `lr`.
    pub fn apply_gradients(&mut self, grads: &[Vec<f32>], lr: f64) {
        self.adam.step += 1;
        let hyper = self.config.adam(lr);
        let step = self.adam.step;
        let params = self.model.graphs_mut().into_iter().flat_map(|g| g.params.iter_mut());
        for (((p, g), m), v) in params.zip(grads).zip(&mut self.adam.m).zip(&mut self.adam.v) {
            let data = p.tensor.as_f32_mut().expect("training runs in full precision");
            adamw_step(data, g, m, v, step, &hyper);
        }
    }

    /// Forward, backward and update on one batch; returns `(L_seg, L_reg)`.
    pub fn train_step(&mut self, batch: &[LogWedge], lr: f64) -> Result<(f64, f64)> {
        let g = self.batch_gradients(batch, self.balancer.c)?;
        self.apply_gradients(&g.grads, lr);
        Ok((g.seg_loss, g.reg_loss))
    }

    /// Permutation of the training set for `epoch`, derived from the seed
    /// and the epoch alone so a resumed run draws the same order.
    fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    pub fn run_epoch(&mut self, data: &TrainingSet) -> Result<EpochLog> {
        let epoch = self.epoch;
        let lr = lr_schedule(epoch, &self.config);
        let c_t = self.balancer.c;
        let order = self.epoch_order(epoch, data.train.len());
        let (mut seg_sum, mut reg_sum, mut batches) = (0.0, 0.0, 0usize);
        let mut batch = Vec::with_capacity(self.config.batch_size);
        for idx in order.chunks(self.config.batch_size) {
            batch.clear();
            batch.extend(idx.iter().map(|&i| data.train[i].clone()));
            let (s, r) = self.train_step(&batch, lr)?;
            seg_sum += s;
            reg_sum += r;
            batches += 1;
        }
        let rho_s = seg_sum / batches as f64;
        let rho_r = reg_sum / batches as f64;
        let (mae, precision, recall) = if data.holdout.is_empty() {
            (None, None, None)
        } else {
            let eval = evaluate(&self.model, &data.holdout, Precision::Full32, self.model.spec.seg_threshold)?;
            (Some(eval.aggregate.mae), eval.aggregate.precision, eval.aggregate.recall)
        };
        let update = update_balancer(self.balancer, rho_s, rho_r);
        self.balancer = update.state;
        self.epoch += 1;
        Ok(EpochLog {
            epoch,
            lr,
            c_t,
            rho_s,
            rho_r,
            mae,
            precision,
            recall,
            balancer_held: update.held,
        })
    }

    /// Run epochs until `config.epochs` have completed.
    pub fn train(&mut self, data: &TrainingSet, mut on_epoch: impl FnMut(&EpochLog)) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::new();
        while self.epoch < self.config.epochs {
            let log = self.run_epoch(data)?;
            on_epoch(&log);
            logs.push(log);
        }
        Ok(logs)
    }
}
