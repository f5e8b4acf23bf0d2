//! Stacked LSTM forecaster: reads the first T values of a sample and predicts
//! the remaining S in one shot.

use std::collections::BTreeMap;
use std::path::Path;

use autograd::nn::{dropout, linear, mse};
use autograd::ops::narrow;
use autograd::{Adam, Array, ParamSet, Tensor, VarSet};
use log::debug;
use ndarray::{Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Precision};
use crate::data::{Origin, SequenceSet, SplitTag, WindowSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecasterConfig {
    pub hidden_size: usize,
    pub num_layers: usize,
    /// Applied to the outputs of every layer but the last, in training only.
    pub dropout: f64,
    /// Observation length T.
    pub input_len: usize,
    /// Forecast length S.
    pub horizon: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ForecasterConfig {
    fn default() -> Self {
        ForecasterConfig {
            hidden_size: 64,
            num_layers: 3,
            dropout: 0.2,
            input_len: 60,
            horizon: 30,
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl ForecasterConfig {
    /// Defaults with T and S taken from `window`.
    pub fn for_window(window: &WindowSpec) -> Self {
        ForecasterConfig {
            input_len: window.t,
            horizon: window.s,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(format!("forecaster: {m}")));
        if self.hidden_size == 0 || self.num_layers == 0 || self.input_len == 0 || self.horizon == 0 {
            return fail("hidden_size, num_layers, input_len and horizon must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr {} must be positive", self.lr));
        }
        Ok(())
    }
}

/// Anything that maps observation windows to forecasts.
pub trait Forecast {
    fn input_len(&self) -> usize;
    fn horizon(&self) -> usize;
    /// Forecasts for a (batch, T) block of observations, shape (batch, S).
    fn predict_batch(&self, observations: &Array) -> Result<Array>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastModel {
    pub config: ForecasterConfig,
    pub params: ParamSet,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainedForecaster {
    /// Snapshot with the lowest validation loss (the last one without a
    /// validation set).
    pub model: ForecastModel,
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
    pub history: Vec<ForecastEpoch>,
}

/// Fresh parameters, uniform in `±1/sqrt(hidden)` like common LSTM defaults.
pub fn build_forecaster(cfg: &ForecasterConfig) -> Result<ForecastModel> {
    cfg.validate()?;
    let h = cfg.hidden_size;
    let bound = 1.0 / (h as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamSet::new();
    let mut uniform = |name: String, shape: &[usize], rng: &mut ChaCha8Rng| {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        params.insert(name, Array::from_shape_vec(IxDyn(shape), data).unwrap());
    };
    for l in 0..cfg.num_layers {
        let input = if l == 0 { 1 } else { h };
        uniform(format!("lstm.{l}.w_ih"), &[input, 4 * h], &mut rng);
        uniform(format!("lstm.{l}.w_hh"), &[h, 4 * h], &mut rng);
        uniform(format!("lstm.{l}.bias"), &[4 * h], &mut rng);
    }
    uniform("head.weight".into(), &[h, cfg.horizon], &mut rng);
    uniform("head.bias".into(), &[cfg.horizon], &mut rng);
    Ok(ForecastModel {
        config: cfg.clone(),
        seed: cfg.seed,
        params,
    })
}

/// Forecasts (B, S) for observations (B, T).
pub fn forecaster_forward(
    cfg: &ForecasterConfig,
    vars: &VarSet,
    x: &Tensor,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Tensor> {
    if x.ndim() != 2 || x.shape()[1] != cfg.input_len || x.shape()[0] == 0 {
        return Err(Error::ShapeMismatch {
            expected: format!("(batch >= 1, {})", cfg.input_len),
            got: format!("{:?}", x.shape()),
        });
    }
    let (b, t_len, h) = (x.shape()[0], cfg.input_len, cfg.hidden_size);
    // One tensor per time step: slicing a shared (B, T, ·) tensor would make
    // every step's backward pass touch the whole sequence.
    let mut steps: Vec<Tensor> = (0..t_len).map(|t| narrow(x, 1, t, 1)).collect();
    let mut last = None;
    for l in 0..cfg.num_layers {
        let w_ih = vars.get(&format!("lstm.{l}.w_ih"));
        let bias = vars.get(&format!("lstm.{l}.bias"));
        let w_hh = vars.get(&format!("lstm.{l}.w_hh"));
        let mut hidden = Tensor::zeros(&[b, h]);
        let mut cell = Tensor::zeros(&[b, h]);
        let mut outputs = Vec::with_capacity(t_len);
        for step in &steps {
            let gates = linear(step, w_ih, Some(bias)) + hidden.matmul(w_hh);
            let i = narrow(&gates, 1, 0, h).sigmoid();
            let f = narrow(&gates, 1, h, h).sigmoid();
            let g = narrow(&gates, 1, 2 * h, h).tanh();
            let o = narrow(&gates, 1, 3 * h, h).sigmoid();
            cell = &f * &cell + &i * &g;
            hidden = &o * &cell.tanh();
            outputs.push(hidden.clone());
        }
        last = Some(hidden);
        if l + 1 < cfg.num_layers {
            steps = match rng.as_deref_mut() {
                Some(r) => outputs.iter().map(|s| dropout(s, cfg.dropout, r)).collect(),
                None => outputs,
            };
        }
    }
    let top = last.expect("at least one layer");
    Ok(linear(&top, vars.get("head.weight"), Some(vars.get("head.bias"))))
}

impl ForecastModel {
    /// S forecasts for one observation window of length T.
    pub fn predict(&self, observation: &[f64]) -> Result<Vec<f64>> {
        let obs = Array::from_shape_vec(IxDyn(&[1, observation.len()]), observation.to_vec()).unwrap();
        Ok(self.predict_batch(&obs)?.iter().copied().collect())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("format".into(), "tsaug-forecaster".into());
        meta.insert("config".into(), serde_json::to_string(&self.config)?);
        meta.insert("seed".into(), self.seed.to_string());
        checkpoint::write_archive(&dir.join(ARCHIVE), &self.params, &meta, Precision::F32)
    }

    /// Loads a model saved with [`ForecastModel::save`]; `path` may be the
    /// directory or the archive file.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(ARCHIVE) } else { path.to_path_buf() };
        let (params, meta) = checkpoint::read_archive(&file)?;
        let config: ForecasterConfig = serde_json::from_str(checkpoint::meta_get(&meta, "config", &file)?)?;
        let mut model = build_forecaster(&config)?;
        checkpoint::check_layout(&model.params, &params, "forecaster")?;
        model.params = params;
        model.seed = checkpoint::meta_get(&meta, "seed", &file)?
            .parse()
            .map_err(|e| Error::Checkpoint(format!("seed: {e}")))?;
        Ok(model)
    }
}

const ARCHIVE: &str = "model.safetensors";

impl Forecast for ForecastModel {
    fn input_len(&self) -> usize {
        self.config.input_len
    }

    fn horizon(&self) -> usize {
        self.config.horizon
    }

    fn predict_batch(&self, observations: &Array) -> Result<Array> {
        if observations.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("observation window".into()));
        }
        let _g = autograd::no_grad();
        let out = forecaster_forward(
            &self.config,
            &self.params.constants(),
            &Tensor::constant(observations.clone()),
            None,
        )?;
        Ok(out.value().clone())
    }
}

/// Observation (N, T) and target (N, S) blocks of a set.
fn split_columns(set: &SequenceSet) -> (Array, Array) {
    let w = &set.window;
    let n = set.len();
    let obs: Vec<f64> = set.samples.iter().flat_map(|s| s.observation(w).iter().copied()).collect();
    let tgt: Vec<f64> = set.samples.iter().flat_map(|s| s.target(w).iter().copied()).collect();
    (
        Array::from_shape_vec(IxDyn(&[n, w.t]), obs).unwrap(),
        Array::from_shape_vec(IxDyn(&[n, w.s]), tgt).unwrap(),
    )
}

fn check_window(set: &SequenceSet, cfg: &ForecasterConfig) -> Result<()> {
    if set.window.t != cfg.input_len {
        return Err(Error::WindowMismatch {
            expected: cfg.input_len,
            got: set.window.t,
        });
    }
    if set.window.s != cfg.horizon {
        return Err(Error::WindowMismatch {
            expected: cfg.horizon,
            got: set.window.s,
        });
    }
    set.validate()
}

/// Mean squared error of `model` on observation/target blocks, in chunks.
fn block_mse(model: &dyn Forecast, obs: &Array, tgt: &Array) -> Result<f64> {
    const CHUNK: usize = 512;
    let n = obs.shape()[0];
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let pred = model.predict_batch(&obs.slice_axis(Axis(0), (start..end).into()).to_owned())?;
        let truth = tgt.slice_axis(Axis(0), (start..end).into());
        if pred.shape() != truth.shape() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", truth.shape()),
                got: format!("{:?}", pred.shape()),
            });
        }
        total += pred.iter().zip(truth.iter()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>();
        start = end;
    }
    Ok(total / (n * tgt.shape()[1]) as f64)
}

/// Minimizes forecast MSE on `train`, keeping the snapshot with the lowest
/// loss on `val`.
pub fn train_forecaster(train: &SequenceSet, val: &SequenceSet, cfg: &ForecasterConfig) -> Result<TrainedForecaster> {
    cfg.validate()?;
    if train.split == SplitTag::Test || val.split == SplitTag::Test {
        return Err(Error::TestLeak);
    }
    if train.is_empty() {
        return Err(Error::EmptySet);
    }
    check_window(train, cfg)?;
    if !val.is_empty() {
        check_window(val, cfg)?;
    }
    let (x, y) = split_columns(train);
    let (vx, vy) = split_columns(val);
    let mut model = build_forecaster(cfg)?;
    let mut opt = Adam::new(&model.params, cfg.lr, (0.9, 0.999));
    // the data-order and dropout stream is separate from the initialization stream
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5851_F42D_4C95_7F2D);
    let n = train.len();
    let mut history = Vec::with_capacity(cfg.epochs);
    let initial_val = if val.is_empty() { None } else { Some(block_mse(&model, &vx, &vy)?) };
    let mut best = (model.clone(), 0usize, initial_val);

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut weight) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let _on = autograd::enable_grad();
            let xb = Tensor::constant(x.select(Axis(0), chunk));
            let yb = Tensor::constant(y.select(Axis(0), chunk));
            let vars = model.params.vars();
            let pred = forecaster_forward(cfg, &vars, &xb, Some(&mut rng))?;
            let loss = mse(&pred, &yb);
            let value = loss.item();
            let grads = vars.grads(&loss);
            if !value.is_finite() || !grads.all_finite() {
                return Err(Error::NonFiniteLoss {
                    what: "forecaster loss".into(),
                    epoch,
                    batch: bi,
                    last_checkpoint: None,
                });
            }
            opt.update(&mut model.params, &grads);
            loss_sum += value * chunk.len() as f64;
            weight += chunk.len();
        }
        let val_loss = if val.is_empty() { None } else { Some(block_mse(&model, &vx, &vy)?) };
        let train_loss = loss_sum / weight as f64;
        debug!("forecaster epoch {epoch}: train {train_loss:.6} val {val_loss:?}");
        history.push(ForecastEpoch {
            epoch,
            train_loss,
            val_loss,
        });
        let improved = match (val_loss, best.2) {
            (Some(v), Some(b)) => v < b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            best = (model.clone(), epoch, val_loss);
        }
    }
    Ok(TrainedForecaster {
        model: best.0,
        best_epoch: best.1,
        best_val_loss: best.2,
        history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mse: f64,
    pub n_samples: usize,
    pub split: SplitTag,
}

/// Test-set MSE in normalized space over every sample and horizon step.
/// Only the first T values of each sample are shown to the model.
pub fn evaluate_mse(model: &dyn Forecast, test: &SequenceSet) -> Result<EvalResult> {
    if test.is_empty() {
        return Err(Error::EmptySet);
    }
    if test.split != SplitTag::Test {
        return Err(Error::NotATestSet(test.split.as_str().to_string()));
    }
    if test.count_origin(Origin::Synthetic) > 0 {
        return Err(Error::SyntheticInTestSet);
    }
    if test.window.t != model.input_len() || test.window.s != model.horizon() {
        return Err(Error::WindowMismatch {
            expected: model.input_len() + model.horizon(),
            got: test.window.k,
        });
    }
    test.validate()?;
    let (obs, tgt) = split_columns(test);
    let mse = block_mse(model, &obs, &tgt)?;
    if !mse.is_finite() {
        return Err(Error::NonFiniteInput("forecast".into()));
    }
    Ok(EvalResult {
        mse,
        n_samples: test.len(),
        split: test.split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SequenceSample;

    /// Predicts the true tail plus a fixed offset by looking it up.
    struct Oracle {
        set: SequenceSet,
        offset: f64,
    }

    impl Forecast for Oracle {
        fn input_len(&self) -> usize {
            self.set.window.t
        }
        fn horizon(&self) -> usize {
            self.set.window.s
        }
        fn predict_batch(&self, obs: &Array) -> Result<Array> {
            let w = &self.set.window;
            let mut out = Array::zeros(IxDyn(&[obs.shape()[0], w.s]));
            for (r, row) in obs.outer_iter().enumerate() {
                let s = self
                    .set
                    .samples
                    .iter()
                    .find(|s| s.observation(w).iter().zip(row.iter()).all(|(a, b)| a == b))
                    .expect("observation seen");
                for (j, v) in s.target(w).iter().enumerate() {
                    out[[r, j]] = v + self.offset;
                }
            }
            Ok(out)
        }
    }

    fn set(split: SplitTag) -> SequenceSet {
        let w = WindowSpec::new(3, 2, 1).unwrap();
        let samples = vec![
            SequenceSample::real(vec![0.0, 0.5, 1.0, 1.5, 2.0]),
            SequenceSample::real(vec![1.0, 0.0, 0.5, 0.25, -1.0]),
        ];
        SequenceSet::new(samples, w, split).unwrap()
    }

    fn small_cfg() -> ForecasterConfig {
        ForecasterConfig {
            hidden_size: 8,
            num_layers: 2,
            input_len: 3,
            horizon: 2,
            epochs: 3,
            batch_size: 2,
            seed: 4,
            ..Default::default()
        }
    }

    #[test]
    fn oracle_mse_cases() {
        let test = set(SplitTag::Test);
        let exact = Oracle { set: test.clone(), offset: 0.0 };
        assert_eq!(evaluate_mse(&exact, &test).unwrap().mse, 0.0);
        let shifted = Oracle { set: test.clone(), offset: 0.1 };
        let r = evaluate_mse(&shifted, &test).unwrap();
        assert!((r.mse - 0.01).abs() < 1e-12);
        assert_eq!(r.n_samples, 2);
    }

    /// Hand-written predictions on two samples against a hand-computed mean.
    struct Fixed;
    impl Forecast for Fixed {
        fn input_len(&self) -> usize {
            3
        }
        fn horizon(&self) -> usize {
            2
        }
        fn predict_batch(&self, obs: &Array) -> Result<Array> {
            assert_eq!(obs.shape()[0], 2);
            Ok(Array::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, 2.0, 0.0, 0.0]).unwrap())
        }
    }

    #[test]
    fn two_sample_hand_computed_mse() {
        // errors: (1-1.5, 2-2) and (0-0.25, 0+1): (0.25 + 0 + 0.0625 + 1) / 4
        let r = evaluate_mse(&Fixed, &set(SplitTag::Test)).unwrap();
        assert!((r.mse - 1.3125 / 4.0).abs() < 1e-15);
    }

    #[test]
    fn evaluation_guards() {
        let exact = Oracle { set: set(SplitTag::Test), offset: 0.0 };
        assert!(matches!(evaluate_mse(&exact, &set(SplitTag::Train)), Err(Error::NotATestSet(_))));
        let mut synth = set(SplitTag::Test);
        synth.samples[0].origin = Origin::Synthetic;
        assert!(matches!(evaluate_mse(&exact, &synth), Err(Error::SyntheticInTestSet)));
        let empty = SequenceSet::new(vec![], set(SplitTag::Test).window, SplitTag::Test).unwrap();
        assert!(matches!(evaluate_mse(&exact, &empty), Err(Error::EmptySet)));
    }

    #[test]
    fn predict_shapes() {
        let m = build_forecaster(&ForecasterConfig::default()).unwrap();
        assert_eq!(m.predict(&[0.5; 60]).unwrap().len(), 30);
        assert!(matches!(m.predict(&[0.5; 59]), Err(Error::ShapeMismatch { .. })));
        let cfg = ForecasterConfig::for_window(&WindowSpec::new(80, 40, 1).unwrap());
        let m = build_forecaster(&cfg).unwrap();
        let p = m.predict(&[0.1; 80]).unwrap();
        assert_eq!(p.len(), 40);
        let obs = Array::from_elem(IxDyn(&[2, 80]), 0.3);
        let both = m.predict_batch(&obs).unwrap();
        assert_eq!(both.index_axis(Axis(0), 0), both.index_axis(Axis(0), 1));
        assert!(m.predict(&[f64::NAN; 80]).is_err());
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let mut cfg = small_cfg();
        cfg.epochs = 0;
        let out = train_forecaster(&set(SplitTag::Train), &set(SplitTag::Validation), &cfg).unwrap();
        assert_eq!(out.model, build_forecaster(&cfg).unwrap());
        assert!(out.history.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_snapshot_is_best() {
        let cfg = small_cfg();
        let a = train_forecaster(&set(SplitTag::Train), &set(SplitTag::Validation), &cfg).unwrap();
        let b = train_forecaster(&set(SplitTag::Train), &set(SplitTag::Validation), &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
        let best = a.best_val_loss.unwrap();
        assert!(a.history.iter().all(|e| best <= e.val_loss.unwrap()));
    }

    #[test]
    fn window_and_leak_guards() {
        let mut cfg = small_cfg();
        cfg.input_len = 4;
        cfg.horizon = 1;
        assert!(matches!(
            train_forecaster(&set(SplitTag::Train), &set(SplitTag::Validation), &cfg),
            Err(Error::WindowMismatch { .. })
        ));
        assert!(matches!(
            train_forecaster(&set(SplitTag::Test), &set(SplitTag::Validation), &small_cfg()),
            Err(Error::TestLeak)
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_forecaster(&small_cfg()).unwrap();
        m.save(dir.path()).unwrap();
        let back = ForecastModel::load(dir.path()).unwrap();
        assert_eq!(back.config, m.config);
        let p = m.predict(&[0.1, 0.2, 0.3]).unwrap();
        let q = back.predict(&[0.1, 0.2, 0.3]).unwrap();
        assert!(p.iter().zip(&q).all(|(a, b)| (a - b).abs() < 1e-5));
    }
}
