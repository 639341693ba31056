use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::Value;

use crate::data::{few_shot_sample, random_offset, Dataset, Split, VideoClip};
use crate::diffcore::{Graph, Real, RegressionKind};
use crate::error::{Error, Result};
use crate::mfl::AggregatorKind;

use super::config::{OptimizerKind, Precision, TrainConfig};
use super::metrics::{mae_rmse, MetricsRow};
use super::model::Model;
use super::optim::{adam_step, radam_step, AdamHyper, MomentState};

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub val_mae: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// Parameters from the epoch with the lowest validation MAE, or the
    /// final ones when there is no validation split.
    pub model: Model<T>,
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
}

fn clip_grads<T: Real>(grads: &mut [Vec<T>], max_norm: f64) {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.f64() * g.f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::c(max_norm / norm);
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
}

/// Mini-batch training with per-epoch cosine learning-rate decay.
pub fn train<T: Real>(cfg: &TrainConfig, train_clips: &[&VideoClip], val_clips: &[&VideoClip]) -> Result<TrainOutcome<T>> {
    if train_clips.is_empty() {
        return Err(Error::Validation("empty training subset".into()));
    }
    let mut model = Model::<T>::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let hyper = AdamHyper {
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps,
    };
    let mut state = MomentState::new(model.store.tensors_mut());
    let mut best: Option<(f64, usize, crate::params::ParamStore<T>)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_clips.len()).collect();
    let scale = |n: usize| T::c(1.0 / n as f64);

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate * cfg.lr_multiplier(epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut g = Graph::<T>::new();
            let bound = model.store.bind(&mut g);
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let clip = train_clips[i];
                let frames = model.sample(clip, random_offset(&mut rng, clip.frames))?;
                let pred = model.forward(&mut g, &bound, &frames)?;
                losses.push(model.loss(&mut g, &pred, clip.ef)?);
            }
            let stacked = g.stack_rows(&losses)?;
            let total = g.sum(stacked);
            let mean = g.scale(total, scale(batch.len()));
            let loss = g.value(mean).item().f64();
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss at epoch {epoch}, step {step}")));
            }
            epoch_loss += loss * batch.len() as f64;
            let mut grads_by_var = g.backward(mean)?;
            let mut grads: Vec<Vec<T>> = bound
                .vars()
                .iter()
                .zip(model.store.iter())
                .map(|(&v, (_, t))| grads_by_var.take(v).unwrap_or_else(|| vec![T::zero(); t.len()]))
                .collect();
            if let Some((name, _)) = model
                .store
                .iter()
                .zip(&grads)
                .find(|(_, gr)| gr.iter().any(|x| !x.is_finite()))
                .map(|((n, _), gr)| (n, gr))
            {
                return Err(Error::Numerical(format!(
                    "non-finite gradient for `{name}` at epoch {epoch}, step {step}"
                )));
            }
            if cfg.weight_decay > 0.0 {
                let wd = T::c(cfg.weight_decay);
                for (gr, (_, p)) in grads.iter_mut().zip(model.store.iter()) {
                    gr.iter_mut().zip(p.data()).for_each(|(x, &w)| *x += wd * w);
                }
            }
            if let Some(c) = cfg.grad_clip {
                clip_grads(&mut grads, c);
            }
            let params = model.store.tensors_mut();
            match cfg.optimizer {
                OptimizerKind::Radam => radam_step(params, &grads, &mut state, lr, &hyper)?,
                OptimizerKind::Adam => adam_step(params, &grads, &mut state, lr, &hyper)?,
            }
        }
        let last = epoch + 1 == cfg.epochs;
        let val_mae = if !val_clips.is_empty() && ((epoch + 1) % cfg.val_every == 0 || last) {
            let mae = evaluate(&model, val_clips)?.mae;
            if best.as_ref().map_or(true, |b| mae < b.0) {
                best = Some((mae, epoch, model.store.clone()));
            }
            Some(mae)
        } else {
            None
        };
        history.push(EpochLog {
            epoch,
            learning_rate: lr,
            train_loss: epoch_loss / train_clips.len() as f64,
            val_mae,
        });
    }
    let best_epoch = match best {
        Some((_, e, store)) => {
            model.store = store;
            e
        }
        None => cfg.epochs - 1,
    };
    Ok(TrainOutcome {
        model,
        best_epoch,
        history,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub mae: f64,
    pub rmse: f64,
    /// `(clip id, prediction - label)`, sorted by clip id.
    pub residuals: Vec<(String, f64)>,
}

/// MAE and RMSE over `clips` with offset-0 frame sampling.
pub fn evaluate<T: Real>(model: &Model<T>, clips: &[&VideoClip]) -> Result<Evaluation> {
    let mut residuals = clips
        .iter()
        .map(|c| Ok((c.id.clone(), model.predict(c)? - c.ef)))
        .collect::<Result<Vec<_>>>()?;
    residuals.sort_by(|a, b| a.0.cmp(&b.0));
    let r: Vec<f64> = residuals.iter().map(|x| x.1).collect();
    let (mae, rmse) = mae_rmse(&r)?;
    Ok(Evaluation { mae, rmse, residuals })
}

/// Training clips after the optional few-shot subset.
pub fn training_clips<'a>(cfg: &TrainConfig, ds: &'a Dataset) -> Result<Vec<&'a VideoClip>> {
    match cfg.shots {
        Some(n) => ds.select(&few_shot_sample(&ds.manifest, n, cfg.seed)?),
        None => Ok(ds.clips_in(Split::Train)),
    }
}

/// Result of training one configuration and scoring it on TEST.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub evaluation: Evaluation,
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
    pub wall_seconds: f64,
}

fn run_typed<T: Real>(cfg: &TrainConfig, ds: &Dataset) -> Result<(RunReport, Model<T>)> {
    let start = Instant::now();
    let train_set = training_clips(cfg, ds)?;
    let val = ds.clips_in(Split::Val);
    let test = ds.clips_in(Split::Test);
    if test.is_empty() {
        return Err(Error::Validation("dataset has no TEST clips".into()));
    }
    let out = train::<T>(cfg, &train_set, &val)?;
    let evaluation = evaluate(&out.model, &test)?;
    let report = RunReport {
        evaluation,
        best_epoch: out.best_epoch,
        history: out.history,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((report, out.model))
}

/// Trains at the configured precision and evaluates on TEST; the returned
/// model parameters are widened to 64-bit.
pub fn run(cfg: &TrainConfig, ds: &Dataset) -> Result<(RunReport, Model<f64>)> {
    match cfg.precision {
        Precision::F64 => run_typed::<f64>(cfg, ds),
        Precision::F32 => {
            let (r, m) = run_typed::<f32>(cfg, ds)?;
            let store = m.store.cast::<f64>();
            let mut wide = Model::<f64>::new(&m.cfg)?;
            wide.store = store;
            Ok((r, wide))
        }
    }
}

impl RunReport {
    pub fn metrics_row(&self, setting: &str, cfg: &TrainConfig) -> MetricsRow {
        let wall = if cfg.record_wall_time { self.wall_seconds } else { 0.0 };
        MetricsRow::run(setting, cfg.shots, cfg.seed, self.evaluation.mae, self.evaluation.rmse, wall)
    }
}

/// A named grid point: JSON overrides applied on top of a base config.
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct GridPoint {
    pub setting: String,
    #[serde(default)]
    pub overrides: serde_json::Map<String, Value>,
}

impl GridPoint {
    pub fn new(setting: &str, overrides: Value) -> Self {
        Self {
            setting: setting.into(),
            overrides: match overrides {
                Value::Object(m) => m,
                _ => Default::default(),
            },
        }
    }

    pub fn apply(&self, base: &TrainConfig) -> Result<TrainConfig> {
        let mut v = serde_json::to_value(base)?;
        let obj = v.as_object_mut().expect("config serialises to an object");
        for (k, val) in &self.overrides {
            obj.insert(k.clone(), val.clone());
        }
        let cfg: TrainConfig = serde_json::from_value(v)
            .map_err(|e| Error::Validation(format!("grid point `{}`: {e}", self.setting)))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Built-in ablation axes.
pub fn named_grid(axis: &str) -> Result<Vec<GridPoint>> {
    use serde_json::json;
    let agg = |k: AggregatorKind| json!({ "aggregator": k });
    Ok(match axis {
        "modules" => vec![
            GridPoint::new("base", json!({"aggregator": "mean_pool", "echozoom": false})),
            GridPoint::new("mfl", json!({"aggregator": "mfl", "echozoom": false})),
            GridPoint::new("echozoom", json!({"aggregator": "mean_pool", "echozoom": true})),
            GridPoint::new("full", json!({"aggregator": "mfl", "echozoom": true})),
        ],
        "frames" => [16, 36, 48, 54, 64, 96, 128]
            .into_iter()
            .map(|n| GridPoint::new(&format!("frames_{n}"), json!({ "clip_length": n })))
            .collect(),
        "mfl" => [
            AggregatorKind::Mfl,
            AggregatorKind::MflNoProj,
            AggregatorKind::MflNonlinearProj,
            AggregatorKind::MflGru,
        ]
        .into_iter()
        .map(|k| GridPoint::new(k.as_str(), agg(k)))
        .collect(),
        "loss" => [RegressionKind::Mae, RegressionKind::Mse, RegressionKind::SmoothL1, RegressionKind::Huber]
            .into_iter()
            .map(|k| GridPoint::new(k.as_str(), json!({ "reg_loss": k })))
            .collect(),
        "aggregation" => [
            AggregatorKind::MeanPool,
            AggregatorKind::MultiHead,
            AggregatorKind::MultiHeadGru,
            AggregatorKind::Mfl,
        ]
        .into_iter()
        .map(|k| GridPoint::new(k.as_str(), agg(k)))
        .collect(),
        other => {
            return Err(Error::Validation(format!(
                "unknown ablation axis `{other}` (modules, frames, mfl, loss, aggregation)"
            )))
        }
    })
}

#[derive(Clone, Debug)]
pub struct GridFailure {
    pub setting: String,
    pub seed: u64,
    pub error: String,
    pub exit_code: i32,
}

#[derive(Clone, Debug, Default)]
pub struct AblationOutcome {
    /// One row per (setting, seed) in grid order, then one summary row per setting.
    pub rows: Vec<MetricsRow>,
    /// `(mae, rmse)` per setting, per seed, NaN for failed points.
    pub scores: Vec<(String, Vec<(f64, f64)>)>,
    pub failures: Vec<GridFailure>,
}

impl AblationOutcome {
    pub fn mean_mae(&self, setting: &str) -> Option<f64> {
        let (_, runs) = self.scores.iter().find(|(s, _)| s == setting)?;
        let ok: Vec<f64> = runs.iter().map(|r| r.0).filter(|m| m.is_finite()).collect();
        (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64)
    }
}

/// Trains and evaluates every grid point for every seed. Points run on up
/// to `workers` threads; results are reported in grid order regardless.
/// A failing point is recorded and does not stop the others.
pub fn ablate(base: &TrainConfig, grid: &[GridPoint], seeds: &[u64], ds: &Dataset, workers: usize) -> Result<AblationOutcome> {
    let configs = grid.iter().map(|p| p.apply(base)).collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, u64)> = (0..grid.len()).flat_map(|i| seeds.iter().map(move |&s| (i, s))).collect();
    let results: Mutex<Vec<Option<Result<RunReport>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            scope.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(i, seed)) = jobs.get(j) else { break };
                let cfg = TrainConfig {
                    seed,
                    ..configs[i].clone()
                };
                let r = run(&cfg, ds).map(|(rep, _)| rep);
                results.lock().expect("no poisoned workers")[j] = Some(r);
            });
        }
    });
    let results = results.into_inner().expect("no poisoned workers");
    let mut out = AblationOutcome::default();
    let mut per_setting: Vec<Vec<(f64, f64, f64)>> = vec![Vec::new(); grid.len()];
    for ((i, seed), r) in jobs.into_iter().zip(results) {
        let cfg = TrainConfig {
            seed,
            ..configs[i].clone()
        };
        let setting = &grid[i].setting;
        match r.expect("every job ran") {
            Ok(rep) => {
                let row = rep.metrics_row(setting, &cfg);
                let wall = row.wall_seconds.parse().unwrap_or(0.0);
                per_setting[i].push((rep.evaluation.mae, rep.evaluation.rmse, wall));
                out.rows.push(row);
            }
            Err(e) => {
                per_setting[i].push((f64::NAN, f64::NAN, 0.0));
                out.rows.push(MetricsRow::run(setting, cfg.shots, seed, f64::NAN, f64::NAN, 0.0));
                out.failures.push(GridFailure {
                    setting: setting.clone(),
                    seed,
                    error: e.to_string(),
                    exit_code: e.exit_code(),
                });
            }
        }
    }
    for (i, p) in grid.iter().enumerate() {
        out.rows.push(MetricsRow::summary(&p.setting, configs[i].shots, &per_setting[i]));
        out.scores.push((
            p.setting.clone(),
            per_setting[i].iter().map(|r| (r.0, r.1)).collect(),
        ));
    }
    Ok(out)
}
