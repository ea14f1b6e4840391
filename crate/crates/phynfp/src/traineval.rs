//! Training and evaluation harness.
//!
//! Data flows: z-score normalization fit on the chronological training
//! range, sliding windows of W observations predicting the flux volume n
//! steps ahead, full-batch (or mini-batch) Adam on MSE, and the evaluation
//! battery: MSE, direction sensitivity DS = reverse loss - forward loss,
//! relative DS between models, per-node perturbation responses, and the
//! temporal-gradient smoothing diagnostic.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffops::DiffStructure;
use crate::error::{Error, Result};
use crate::graph::{NodeSeries, Targets};
use crate::models::{GraphContext, Model};
use crate::tensorad::{AdamState, Tape, Tensor, Var};

/// Per-variable standard-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Variables whose training variance was zero (std forced to 1).
    pub zero_variance: Vec<usize>,
}

impl Normalizer {
    fn from_columns(columns: Vec<Vec<f64>>) -> Self {
        let mut mean = Vec::new();
        let mut std = Vec::new();
        let mut zero_variance = Vec::new();
        for (k, col) in columns.iter().enumerate() {
            let n = col.len() as f64;
            let m = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            let s = var.sqrt();
            mean.push(m);
            if s > 0.0 {
                std.push(s);
            } else {
                std.push(1.0);
                zero_variance.push(k);
            }
        }
        Self {
            mean,
            std,
            zero_variance,
        }
    }

    /// Fit per-variable statistics over time range `[t0, t1)` of a series.
    pub fn fit_series(series: &NodeSeries, t0: usize, t1: usize) -> Self {
        let p = series.num_vars();
        let mut columns = vec![Vec::new(); p];
        for t in t0..t1 {
            for i in 0..series.num_nodes() {
                for (v, col) in columns.iter_mut().enumerate() {
                    col.push(series.get(t, i, v));
                }
            }
        }
        Self::from_columns(columns)
    }

    /// Fit single-variable statistics over a target range.
    pub fn fit_targets(targets: &Targets, t0: usize, t1: usize) -> Self {
        let mut col = Vec::new();
        for t in t0..t1 {
            for i in 0..targets.num_nodes() {
                col.push(targets.get(t, i));
            }
        }
        Self::from_columns(vec![col])
    }

    pub fn apply(&self, var: usize, x: f64) -> f64 {
        (x - self.mean[var]) / self.std[var]
    }

    pub fn invert(&self, var: usize, x: f64) -> f64 {
        x * self.std[var] + self.mean[var]
    }

    pub fn apply_series(&self, series: &NodeSeries) -> NodeSeries {
        let mut out = series.clone();
        let p = series.num_vars();
        for (idx, v) in out.values_mut().iter_mut().enumerate() {
            *v = (*v - self.mean[idx % p]) / self.std[idx % p];
        }
        out
    }

    pub fn apply_targets(&self, targets: &Targets) -> Targets {
        let mut out = targets.clone();
        for v in out.values_mut() {
            *v = (*v - self.mean[0]) / self.std[0];
        }
        out
    }
}

/// Chronological, non-overlapping time ranges (half-open).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: (usize, usize),
    pub val: (usize, usize),
    pub test: (usize, usize),
}

impl Split {
    /// 70/15/15 chronological split of `[0, t_total)`.
    pub fn chronological(t_total: usize) -> Self {
        let train_end = (t_total as f64 * 0.7).floor() as usize;
        let val_end = (t_total as f64 * 0.85).floor() as usize;
        Self {
            train: (0, train_end),
            val: (train_end, val_end),
            test: (val_end, t_total),
        }
    }

    /// A single range holding every sample; used by small tests.
    pub fn whole(t_total: usize) -> Self {
        Self {
            train: (0, t_total),
            val: (t_total, t_total),
            test: (t_total, t_total),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [self.train, self.val, self.test];
        for (s, e) in ranges {
            if s > e {
                return Err(Error::Value(format!("split range ({s}, {e}) is reversed")));
            }
        }
        if self.train.1 > self.val.0 || self.val.1 > self.test.0 {
            return Err(Error::Value("split ranges overlap or are out of order".into()));
        }
        Ok(())
    }
}

/// One supervised sample: a flattened window and the per-node target
/// `n` steps after the window's last observation.
#[derive(Debug, Clone)]
pub struct Sample {
    /// `[num_nodes, W*p]`, time-major within each row.
    pub window: Tensor,
    pub target: Vec<f64>,
    /// Time index of the last observation in the window.
    pub t_end: usize,
}

/// Samples grouped by split.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub num_nodes: usize,
    pub window: usize,
    pub horizon: usize,
}

/// Cut sliding windows, keeping each sample (window plus target) entirely
/// inside one split range.
pub fn make_windows(
    series: &NodeSeries,
    targets: &Targets,
    window: usize,
    horizon: usize,
    split: &Split,
) -> Result<SampleSet> {
    if series.steps() != targets.steps() || series.num_nodes() != targets.num_nodes() {
        return Err(Error::Shape(format!(
            "series ({}, {}) vs targets ({}, {})",
            series.steps(),
            series.num_nodes(),
            targets.steps(),
            targets.num_nodes()
        )));
    }
    if window == 0 || horizon == 0 {
        return Err(Error::Value("window and horizon must be at least 1".into()));
    }
    if series.steps() < window + horizon {
        return Err(Error::Value(format!(
            "{} steps cannot fit a window of {window} plus horizon {horizon}",
            series.steps()
        )));
    }
    split.validate()?;
    let n = series.num_nodes();
    let p = series.num_vars();
    let cols = window * p;

    let cut = |range: (usize, usize)| -> Vec<Sample> {
        let (s, e) = range;
        let mut out = Vec::new();
        if e < s + window + horizon {
            return out;
        }
        for t_end in s + window - 1..e.saturating_sub(horizon) {
            let mut data = vec![0.0; n * cols];
            for i in 0..n {
                for w in 0..window {
                    let t = t_end + 1 - window + w;
                    for v in 0..p {
                        data[i * cols + w * p + v] = series.get(t, i, v);
                    }
                }
            }
            let target: Vec<f64> = (0..n).map(|i| targets.get(t_end + horizon, i)).collect();
            out.push(Sample {
                window: Tensor::matrix(n, cols, data).expect("window tensor"),
                target,
                t_end,
            });
        }
        out
    };

    Ok(SampleSet {
        train: cut(split.train),
        val: cut(split.val),
        test: cut(split.test),
        num_nodes: n,
        window,
        horizon,
    })
}

/// Normalized dataset ready for training.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: SampleSet,
    pub normalizer_x: Normalizer,
    pub normalizer_y: Normalizer,
    pub split: Split,
}

/// Fit normalizers on the training range, z-score everything, and window.
pub fn prepare_dataset(
    series: &NodeSeries,
    targets: &Targets,
    window: usize,
    horizon: usize,
    split: Split,
) -> Result<Dataset> {
    split.validate()?;
    let (t0, t1) = split.train;
    if t1 <= t0 {
        return Err(Error::Value("empty training range".into()));
    }
    let normalizer_x = Normalizer::fit_series(series, t0, t1);
    let normalizer_y = Normalizer::fit_targets(targets, t0, t1);
    let series_n = normalizer_x.apply_series(series);
    let targets_n = normalizer_y.apply_targets(targets);
    let samples = make_windows(&series_n, &targets_n, window, horizon, &split)?;
    Ok(Dataset {
        samples,
        normalizer_x,
        normalizer_y,
        split,
    })
}

/// Optimization settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Samples per optimizer step; `None` runs full batches.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 500,
            lr: 0.01,
            patience: 20,
            batch_size: None,
            seed: 0,
        }
    }
}

/// Loss and step-size trace of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Learned step size per epoch; empty for variants without one.
    pub delta_t: Vec<f64>,
    /// Wall-clock seconds; kept out of serialized reports so repeated runs
    /// produce identical bytes.
    #[serde(skip)]
    pub wall_seconds: f64,
}

impl TrainHistory {
    pub fn epochs(&self) -> usize {
        self.train_loss.len()
    }
}

fn batch_loss<'t>(
    tape: &'t Tape,
    model: &Model,
    bound: &crate::models::BoundParams<'t>,
    ctx: &GraphContext,
    samples: &[&Sample],
) -> Result<Var<'t>> {
    let mut total: Option<Var<'t>> = None;
    for sample in samples {
        let (_, y) = model.forward_on_tape(tape, bound, ctx, &sample.window)?;
        let target = tape.constant(Tensor::matrix(
            sample.target.len(),
            1,
            sample.target.clone(),
        )?);
        let loss = tape.mse(y, target)?;
        total = Some(match total {
            None => loss,
            Some(acc) => acc.add(loss)?,
        });
    }
    let total = total.ok_or_else(|| Error::Value("empty batch".into()))?;
    total.scale_const(1.0 / samples.len() as f64)
}

/// Adam on MSE with early stopping; deterministic for a fixed seed.
pub fn train(
    model: &mut Model,
    ctx: &GraphContext,
    data: &SampleSet,
    opts: &TrainOptions,
) -> Result<TrainHistory> {
    let started = Instant::now();
    let mut history = TrainHistory {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        delta_t: Vec::new(),
        wall_seconds: 0.0,
    };
    if opts.epochs == 0 {
        return Ok(history);
    }
    if data.train.is_empty() {
        return Err(Error::Value("no training samples".into()));
    }
    let plain: Vec<Tensor> = model.params().iter().map(|(_, t)| t.clone()).collect();
    let mut adam = AdamState::new(&plain, opts.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best_val = f64::INFINITY;
    let mut stale = 0usize;

    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        let batch = opts.batch_size.unwrap_or(data.train.len()).max(1);
        if batch < data.train.len() {
            order.shuffle(&mut rng);
        }

        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(batch) {
            let refs: Vec<&Sample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let tape = Tape::new();
            let bound = model.bind(&tape, true);
            let loss = match batch_loss(&tape, model, &bound, ctx, &refs) {
                Ok(l) => l,
                Err(Error::Value(_)) => return Err(Error::Diverged { epoch }),
                Err(e) => return Err(e),
            };
            let loss_value = loss.value().item()?;
            if !loss_value.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            epoch_loss += loss_value * refs.len() as f64;
            seen += refs.len();

            let grads = tape.backward(loss)?;
            let grad_tensors: Vec<Tensor> =
                bound.vars().iter().map(|(_, v)| grads.get(*v)).collect();
            let mut tensors: Vec<Tensor> =
                model.params().iter().map(|(_, t)| t.clone()).collect();
            adam.step(&mut tensors, &grad_tensors)?;
            model.set_params(tensors)?;
        }
        history.train_loss.push(epoch_loss / seen as f64);

        let val = if data.val.is_empty() {
            f64::NAN
        } else {
            match evaluate_mse(model, ctx, &data.val) {
                Ok(v) if v.is_finite() => v,
                Ok(_) | Err(Error::Value(_)) => return Err(Error::Diverged { epoch }),
                Err(e) => return Err(e),
            }
        };
        history.val_loss.push(val);
        if let Some(dt) = model.delta_t() {
            history.delta_t.push(dt);
        }

        if !data.val.is_empty() {
            if val < best_val - 1e-12 {
                best_val = val;
                stale = 0;
            } else {
                stale += 1;
                if stale >= opts.patience {
                    break;
                }
            }
        }
    }
    history.wall_seconds = started.elapsed().as_secs_f64();
    Ok(history)
}

/// Mean over samples of the per-node MSE, in normalized units.
pub fn evaluate_mse(model: &Model, ctx: &GraphContext, samples: &[Sample]) -> Result<f64> {
    predictions_mse(samples, |s| model.predict(ctx, &s.window))
}

/// MSE of arbitrary per-sample predictions; the zero-predictor baseline and
/// unit tests use this directly.
pub fn predictions_mse(
    samples: &[Sample],
    mut predict: impl FnMut(&Sample) -> Result<Vec<f64>>,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Value("no samples to evaluate".into()));
    }
    let mut total = 0.0;
    for sample in samples {
        let pred = predict(sample)?;
        if pred.len() != sample.target.len() {
            return Err(Error::Shape(format!(
                "{} predictions for {} nodes",
                pred.len(),
                sample.target.len()
            )));
        }
        let n = pred.len() as f64;
        total += pred
            .iter()
            .zip(&sample.target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
    }
    Ok(total / samples.len() as f64)
}

/// `DS = reverse loss - forward loss`.
pub fn direction_sensitivity(loss_forward: f64, loss_reverse: f64) -> f64 {
    loss_reverse - loss_forward
}

/// `RDS = (DS_other - DS_ref) / DS_ref`.
pub fn relative_ds(ds_ref: f64, ds_other: f64) -> Result<f64> {
    if ds_ref == 0.0 {
        return Err(Error::Value(
            "relative direction sensitivity undefined for zero reference".into(),
        ));
    }
    Ok((ds_other - ds_ref) / ds_ref)
}

/// Direction-sensitivity report for one model pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DSReport {
    pub loss_forward: f64,
    pub loss_reverse: f64,
    pub ds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rds: Option<f64>,
}

impl DSReport {
    pub fn new(loss_forward: f64, loss_reverse: f64, reference_ds: Option<f64>) -> Result<Self> {
        let ds = direction_sensitivity(loss_forward, loss_reverse);
        let rds = match reference_ds {
            Some(r) => Some(relative_ds(r, ds)?),
            None => None,
        };
        Ok(Self {
            loss_forward,
            loss_reverse,
            ds,
            rds,
        })
    }
}

/// Mean and standard deviation of one node's perturbation response.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NodeResponse {
    pub mean: f64,
    pub std: f64,
}

/// Add `delta` to the flux variable (variable 0) of `node` at the last
/// window step of every sample and report the per-node prediction change.
pub fn perturbation_response(
    model: &Model,
    ctx: &GraphContext,
    samples: &[Sample],
    node: usize,
    delta: f64,
) -> Result<Vec<NodeResponse>> {
    if samples.is_empty() {
        return Err(Error::Value("no samples to perturb".into()));
    }
    if !delta.is_finite() {
        return Err(Error::Value(format!("perturbation delta {delta}")));
    }
    let n = samples[0].target.len();
    if node >= n {
        return Err(Error::Index {
            what: "node",
            index: node,
            size: n,
        });
    }
    let cols = samples[0].window.shape()[1];
    let p = cols / model.cfg().window;
    let perturb_col = (model.cfg().window - 1) * p;

    let mut sums = vec![0.0; n];
    let mut sq_sums = vec![0.0; n];
    for sample in samples {
        let clean = model.predict(ctx, &sample.window)?;
        let mut perturbed = sample.window.clone();
        perturbed.data_mut()[node * cols + perturb_col] += delta;
        let noisy = model.predict(ctx, &perturbed)?;
        for i in 0..n {
            let response = noisy[i] - clean[i];
            sums[i] += response;
            sq_sums[i] += response * response;
        }
    }
    let count = samples.len() as f64;
    Ok((0..n)
        .map(|i| {
            let mean = sums[i] / count;
            let var = (sq_sums[i] / count - mean * mean).max(0.0);
            NodeResponse {
                mean,
                std: var.sqrt(),
            }
        })
        .collect())
}

/// Nodes whose value after `hops` layer applications can depend on `start`,
/// per the operator's sparsity pattern (headwater rows couple to their
/// downstream neighbors, so this is not plain edge reachability).
pub fn reachable_within(structure: &DiffStructure, start: usize, hops: usize) -> Vec<bool> {
    let n = structure.num_nodes();
    // dependents[j] = rows whose stencil references column j
    let mut dependents = vec![Vec::new(); n];
    for (i, row) in structure.rows().iter().enumerate() {
        for &(j, _) in &row.entries {
            dependents[j].push(i);
        }
    }
    let mut reach = vec![false; n];
    reach[start] = true;
    let mut frontier = vec![start];
    for _ in 0..hops {
        let mut next = Vec::new();
        for &j in &frontier {
            for &i in &dependents[j] {
                if !reach[i] {
                    reach[i] = true;
                    next.push(i);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    reach
}

/// Per-node temporal gradient of one variable: population variance of the
/// node's series over time.
pub fn temporal_gradient_series(series: &NodeSeries, var: usize) -> Result<Vec<f64>> {
    if series.steps() < 2 {
        return Err(Error::Value(
            "temporal gradient needs at least 2 time steps".into(),
        ));
    }
    let t = series.steps() as f64;
    Ok((0..series.num_nodes())
        .map(|i| {
            let mean: f64 = (0..series.steps()).map(|s| series.get(s, i, var)).sum::<f64>() / t;
            (0..series.steps())
                .map(|s| {
                    let d = series.get(s, i, var) - mean;
                    d * d
                })
                .sum::<f64>()
                / t
        })
        .collect())
}

/// The same statistic across a layer embedding's channels.
pub fn temporal_gradient_embedding(embedding: &Tensor) -> Result<Vec<f64>> {
    let shape = embedding.shape();
    let [n, d] = shape else {
        return Err(Error::Shape(format!("embedding of shape {shape:?}")));
    };
    let (n, d) = (*n, *d);
    if d < 2 {
        return Err(Error::Value(
            "temporal gradient needs at least 2 channels".into(),
        ));
    }
    Ok((0..n)
        .map(|i| {
            let row = &embedding.data()[i * d..(i + 1) * d];
            let mean: f64 = row.iter().sum::<f64>() / d as f64;
            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64
        })
        .collect())
}

/// Population variance across nodes; the cross-node spread of the
/// temporal-gradient statistic.
pub fn cross_node_spread(stats: &[f64]) -> f64 {
    let n = stats.len() as f64;
    let mean: f64 = stats.iter().sum::<f64>() / n;
    stats.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelConfig, Variant};

    fn toy_series(t: usize, n: usize, p: usize, f: impl Fn(usize, usize, usize) -> f64) -> NodeSeries {
        let mut values = Vec::with_capacity(t * n * p);
        for step in 0..t {
            for node in 0..n {
                for var in 0..p {
                    values.push(f(step, node, var));
                }
            }
        }
        NodeSeries::new(t, n, p, values).unwrap()
    }

    fn toy_targets(t: usize, n: usize, f: impl Fn(usize, usize) -> f64) -> Targets {
        let mut values = Vec::with_capacity(t * n);
        for step in 0..t {
            for node in 0..n {
                values.push(f(step, node));
            }
        }
        Targets::new(t, n, values).unwrap()
    }

    #[test]
    fn normalizer_round_trip_and_train_stats() {
        let series = toy_series(40, 3, 2, |t, n, v| {
            (t as f64 * 0.3 + n as f64).sin() + v as f64 * 2.0
        });
        let norm = Normalizer::fit_series(&series, 0, 28);
        let scored = norm.apply_series(&series);
        for t in 0..40 {
            for i in 0..3 {
                for v in 0..2 {
                    let back = norm.invert(v, scored.get(t, i, v));
                    assert!((back - series.get(t, i, v)).abs() < 1e-12);
                }
            }
        }
        let refit = Normalizer::fit_series(&scored, 0, 28);
        for v in 0..2 {
            assert!(refit.mean[v].abs() < 1e-10);
            assert!((refit.std[v] - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_variance_variable_gets_unit_std() {
        let series = toy_series(10, 2, 2, |t, n, v| {
            if v == 0 {
                (t + n) as f64
            } else {
                5.0
            }
        });
        let norm = Normalizer::fit_series(&series, 0, 10);
        assert_eq!(norm.zero_variance, vec![1]);
        assert_eq!(norm.std[1], 1.0);
    }

    #[test]
    fn window_counts() {
        let series = toy_series(30, 2, 1, |t, n, _| (t + n) as f64);
        let targets = toy_targets(30, 2, |t, n| (t * n) as f64);
        let set = make_windows(&series, &targets, 24, 6, &Split::whole(30)).unwrap();
        assert_eq!(set.train.len(), 1);

        let short = toy_series(29, 2, 1, |t, n, _| (t + n) as f64);
        let short_t = toy_targets(29, 2, |_, _| 0.0);
        assert!(matches!(
            make_windows(&short, &short_t, 24, 6, &Split::whole(29)),
            Err(Error::Value(_))
        ));

        let series = toy_series(100, 2, 1, |t, n, _| (t + n) as f64);
        let targets = toy_targets(100, 2, |t, n| (t * n) as f64);
        let set = make_windows(&series, &targets, 24, 6, &Split::whole(100)).unwrap();
        assert_eq!(set.train.len(), 71); // T - W - n + 1
    }

    #[test]
    fn windows_never_straddle_splits() {
        let series = toy_series(200, 2, 1, |t, _, _| t as f64);
        let targets = toy_targets(200, 2, |t, _| t as f64);
        let split = Split::chronological(200);
        let set = make_windows(&series, &targets, 24, 6, &split).unwrap();
        assert!(!set.train.is_empty() && !set.test.is_empty());
        let max_train_target = set.train.iter().map(|s| s.t_end + 6).max().unwrap();
        let min_test_window_start = set.test.iter().map(|s| s.t_end + 1 - 24).min().unwrap();
        assert!(max_train_target < min_test_window_start);
        for s in &set.train {
            assert!(s.t_end + 6 < split.train.1);
        }
        for s in &set.test {
            assert!(s.t_end + 1 - 24 >= split.test.0);
        }
    }

    #[test]
    fn table_one_river_rows_reproduce_exactly() {
        // (forward, reverse, printed DS, printed RDS %)
        let rows: [(f64, f64, f64, Option<f64>); 9] = [
            (0.0801, 0.0906, 0.0105, None),
            (0.0898, 0.0961, 0.0063, Some(-40.0)),
            (0.1101, 0.1132, 0.0031, Some(-70.5)),
            (0.1126, 0.1082, -0.0044, Some(-141.9)),
            (0.1170, 0.1182, 0.0012, Some(-88.6)),
            (0.1224, 0.1149, -0.0075, Some(-171.4)),
            (0.1233, 0.1265, 0.0032, Some(-69.5)),
            (0.1247, 0.1265, 0.0018, Some(-82.9)),
            (0.1365, 0.1357, -0.0008, Some(-107.6)),
        ];
        let ds_ref = direction_sensitivity(rows[0].0, rows[0].1);
        for (f, r, printed_ds, printed_rds) in rows {
            let ds = direction_sensitivity(f, r);
            assert!((ds - printed_ds).abs() < 5e-5, "DS {ds} vs {printed_ds}");
            if let Some(pct) = printed_rds {
                let rds = relative_ds(ds_ref, ds).unwrap() * 100.0;
                assert!((rds - pct).abs() < 0.05, "RDS {rds} vs {pct}");
            }
        }
        assert_eq!(direction_sensitivity(0.5, 0.5), 0.0);
        assert_eq!(relative_ds(0.01, 0.01).unwrap(), 0.0);
        assert!(matches!(relative_ds(0.0, 0.1), Err(Error::Value(_))));
    }

    #[test]
    fn mse_reference_cases() {
        let samples = vec![Sample {
            window: Tensor::matrix(2, 1, vec![0.0, 0.0]).unwrap(),
            target: vec![1.0, -1.0],
            t_end: 0,
        }];
        let perfect = predictions_mse(&samples, |s| Ok(s.target.clone())).unwrap();
        assert_eq!(perfect, 0.0);
        let zero = predictions_mse(&samples, |s| Ok(vec![0.0; s.target.len()])).unwrap();
        assert_eq!(zero, 1.0);
        assert!(matches!(
            predictions_mse(&[], |_| Ok(vec![])),
            Err(Error::Value(_))
        ));
    }

    #[test]
    fn temporal_gradient_reference_cases() {
        let series = toy_series(5, 3, 1, |_, _, _| 2.5);
        let grad = temporal_gradient_series(&series, 0).unwrap();
        assert!(grad.iter().all(|&v| v == 0.0));

        let series = toy_series(2, 1, 1, |t, _, _| (t * 2) as f64);
        let grad = temporal_gradient_series(&series, 0).unwrap();
        assert!((grad[0] - 1.0).abs() < 1e-15);

        let single = toy_series(1, 1, 1, |_, _, _| 1.0);
        assert!(temporal_gradient_series(&single, 0).is_err());
    }

    #[test]
    fn reachability_follows_operator_support() {
        // confluence tree: h0 -> m, h1 -> m, m -> out
        let g = crate::graph::DirectedGraph::from_parts(
            &["h0".into(), "h1".into(), "m".into(), "out".into()],
            &[
                ("h0".into(), "m".into()),
                ("h1".into(), "m".into()),
                ("m".into(), "out".into()),
            ],
            &[vec![1.0], vec![1.0], vec![1.0]],
        )
        .unwrap();
        let s = DiffStructure::from_graph(&g);
        let h0 = g.node_index("h0").unwrap();
        let h1 = g.node_index("h1").unwrap();
        let m = g.node_index("m").unwrap();
        let out = g.node_index("out").unwrap();

        let r1 = reachable_within(&s, h0, 1);
        assert!(r1[h0] && r1[m]);
        assert!(!r1[h1] && !r1[out]);

        // the sibling headwater's boundary row reads the confluence node,
        // so two hops reach it
        let r2 = reachable_within(&s, h0, 2);
        assert!(r2[h1] && r2[out]);
    }

    fn tiny_training_setup(
        variant: Variant,
        seed: u64,
    ) -> (Model, GraphContext, SampleSet) {
        let g = crate::graph::DirectedGraph::from_parts(
            &["a".into(), "b".into(), "c".into()],
            &[("a".into(), "b".into()), ("b".into(), "c".into())],
            &[vec![1.0], vec![1.2]],
        )
        .unwrap();
        // target: shifted copy of the input signal, linear in the window
        let series = toy_series(160, 3, 1, |t, n, _| {
            ((t as f64) * 0.25 + n as f64 * 0.8).sin()
        });
        let targets = toy_targets(160, 3, |t, n| ((t as f64) * 0.25 + n as f64 * 0.8).sin());
        let split = Split::chronological(160);
        let data = prepare_dataset(&series, &targets, 8, 2, split).unwrap();
        let cfg = ModelConfig {
            variant,
            layers: 2,
            hidden: 8,
            window: 8,
            horizon: 2,
            seed,
            input_vars: 1,
            edge_width: 1,
        };
        let model = Model::new(cfg).unwrap();
        let ctx = GraphContext::new(&g);
        (model, ctx, data.samples)
    }

    #[test]
    fn zero_epochs_changes_nothing() {
        let (mut model, ctx, data) = tiny_training_setup(Variant::Gcn, 3);
        let before: Vec<Tensor> = model.params().iter().map(|(_, t)| t.clone()).collect();
        let history = train(
            &mut model,
            &ctx,
            &data,
            &TrainOptions {
                epochs: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(history.epochs(), 0);
        for ((_, after), before) in model.params().iter().zip(before) {
            assert_eq!(after, &before);
        }
    }

    #[test]
    fn gcn_fits_linear_synthetic_benchmark() {
        let (mut model, ctx, data) = tiny_training_setup(Variant::Gcn, 3);
        let opts = TrainOptions {
            epochs: 200,
            lr: 0.02,
            patience: 200,
            batch_size: None,
            seed: 3,
        };
        train(&mut model, &ctx, &data, &opts).unwrap();
        let train_mse = evaluate_mse(&model, &ctx, &data.train).unwrap();
        // targets are z-scored, so variance is about 1
        assert!(train_mse < 0.1, "train mse {train_mse}");
    }

    #[test]
    fn river_training_descends() {
        let (mut model, ctx, data) = tiny_training_setup(Variant::River, 5);
        let initial = evaluate_mse(&model, &ctx, &data.val).unwrap();
        let opts = TrainOptions {
            epochs: 60,
            lr: 0.02,
            patience: 60,
            batch_size: None,
            seed: 5,
        };
        let history = train(&mut model, &ctx, &data, &opts).unwrap();
        let final_val = *history.val_loss.last().unwrap();
        assert!(
            final_val < initial,
            "val loss did not descend: {initial} -> {final_val}"
        );
        assert_eq!(history.delta_t.len(), history.epochs());
    }

    #[test]
    fn training_is_deterministic() {
        let opts = TrainOptions {
            epochs: 12,
            lr: 0.02,
            patience: 12,
            batch_size: Some(16),
            seed: 7,
        };
        let (mut m1, ctx, data) = tiny_training_setup(Variant::River, 11);
        let h1 = train(&mut m1, &ctx, &data, &opts).unwrap();
        let (mut m2, _, _) = tiny_training_setup(Variant::River, 11);
        let h2 = train(&mut m2, &ctx, &data, &opts).unwrap();
        assert_eq!(h1.train_loss, h2.train_loss);
        assert_eq!(h1.delta_t, h2.delta_t);
        for ((_, t1), (_, t2)) in m1.params().iter().zip(m2.params()) {
            assert_eq!(t1, t2);
        }
    }

    #[test]
    fn divergence_reports_epoch() {
        let (mut model, ctx, data) = tiny_training_setup(Variant::River, 2);
        let opts = TrainOptions {
            epochs: 50,
            lr: 1e200,
            patience: 50,
            batch_size: None,
            seed: 2,
        };
        match train(&mut model, &ctx, &data, &opts) {
            Err(Error::Diverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn perturbation_zero_delta_is_silent() {
        let (model, ctx, data) = tiny_training_setup(Variant::River, 4);
        let responses = perturbation_response(&model, &ctx, &data.test, 0, 0.0).unwrap();
        for r in responses {
            assert_eq!(r.mean, 0.0);
            assert_eq!(r.std, 0.0);
        }
    }
}
