//! Mini-batch training with gradient clipping and SGD or Adam.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::data::{batch_iter, EncodedPair};
use crate::error::{Error, Result};
use crate::math::{ParamSet, Tensor};
use crate::metrics::{corpus_nll, perplexity_from};
use crate::model::TranslationModel;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Optimizer {
    Sgd,
    #[default]
    Adam,
}

impl Optimizer {
    pub fn code(self) -> u8 {
        match self {
            Optimizer::Sgd => 0,
            Optimizer::Adam => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Optimizer::Sgd),
            1 => Some(Optimizer::Adam),
            _ => None,
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam => "adam",
        })
    }
}

impl FromStr for Optimizer {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            other => Err(format!("unknown optimizer {other:?} (expected sgd or adam)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    /// Full passes over the training set.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Write `last.ckpt` every this many epochs.
    pub checkpoint_every: usize,
    pub optimizer: Optimizer,
    /// Stop after this many optimizer steps in total, even mid-epoch.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.001,
            clip_norm: 5.0,
            seed: 1,
            checkpoint_every: 1,
            optimizer: Optimizer::Adam,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(Error::Contract(
                "batch size and checkpoint interval must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Contract("learning rate must be positive".into()));
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::Contract("clip norm must be positive".into()));
        }
        Ok(())
    }
}

/// Everything besides the parameters needed to continue a run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Optimizer steps taken.
    pub step: u64,
    /// Current epoch, counted from 0.
    pub epoch: usize,
    /// Batches of the current epoch already consumed.
    pub batch_in_epoch: usize,
    /// Summed loss and token count of the current epoch so far.
    pub epoch_loss: f64,
    pub epoch_tokens: usize,
    pub best_perplexity: f64,
    /// Adam first and second moments, parallel to the parameters; empty
    /// until the first Adam step.
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
}

impl Default for TrainState {
    fn default() -> Self {
        TrainState {
            step: 0,
            epoch: 0,
            batch_in_epoch: 0,
            epoch_loss: 0.0,
            epoch_tokens: 0,
            best_perplexity: f64::INFINITY,
            adam_m: Vec::new(),
            adam_v: Vec::new(),
        }
    }
}

pub fn global_grad_norm<P: ParamSet + ?Sized>(params: &P) -> f64 {
    params.params().iter().map(|p| p.grad.sum_squares()).sum::<f64>().sqrt()
}

/// Rescales all gradients so their global L2 norm is at most `clip_norm`.
/// Returns the factor applied (1 when no clipping happened).
pub fn clip_gradients<P: ParamSet + ?Sized>(params: &mut P, clip_norm: f64) -> f64 {
    let norm = global_grad_norm(params);
    if norm <= clip_norm {
        return 1.0;
    }
    let scale = clip_norm / norm;
    for p in params.params_mut() {
        p.grad.scale(scale);
    }
    scale
}

/// Applies one update from the accumulated gradients, then zeroes them.
pub fn optimizer_step<P: ParamSet + ?Sized>(params: &mut P, state: &mut TrainState, optimizer: Optimizer, lr: f64) {
    state.step += 1;
    match optimizer {
        Optimizer::Sgd => {
            for p in params.params_mut() {
                for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                    *v -= lr * g;
                }
            }
        }
        Optimizer::Adam => {
            if state.adam_m.is_empty() {
                state.adam_m = params.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
                state.adam_v = state.adam_m.clone();
            }
            let t = state.step as i32;
            let c1 = 1.0 - ADAM_BETA1.powi(t);
            let c2 = 1.0 - ADAM_BETA2.powi(t);
            for ((p, m), v) in params
                .params_mut()
                .into_iter()
                .zip(&mut state.adam_m)
                .zip(&mut state.adam_v)
            {
                let values = p.value.data_mut();
                let grads = p.grad.data();
                for (((x, &g), m), v) in values.iter_mut().zip(grads).zip(m.data_mut()).zip(v.data_mut()) {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    *x -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPSILON);
                }
            }
        }
    }
    params.zero_grads();
}

/// Shuffle seed of one epoch.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Summary of one finished epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Token-weighted mean training loss.
    pub loss: f64,
    /// NaN without a validation set.
    pub val_ppl: f64,
    pub seconds: f64,
    /// Whether this epoch set a new best perplexity.
    pub improved: bool,
}

impl EpochLog {
    pub fn to_line(&self) -> String {
        format!(
            "epoch={} loss={:.6} val_ppl={:.6} seconds={:.3}",
            self.epoch, self.loss, self.val_ppl, self.seconds
        )
    }
}

/// Callbacks from the training loop, used to write logs and checkpoints.
pub trait TrainObserver {
    fn epoch_end(
        &mut self,
        _log: &EpochLog,
        _model: &TranslationModel,
        _state: &TrainState,
        _config: &TrainConfig,
    ) -> Result<()> {
        Ok(())
    }

    /// Called once when the loop returns, whether or not an epoch just ended.
    fn finished(&mut self, _model: &TranslationModel, _state: &TrainState, _config: &TrainConfig) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Trains `model` from `state` until `config.epochs` epochs or
/// `config.max_steps` steps are done.
///
/// Best-model selection uses validation perplexity, or training perplexity
/// when `val` is empty.
pub fn train(
    model: &mut TranslationModel,
    state: &mut TrainState,
    data: &[EncodedPair],
    val: &[EncodedPair],
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    if data.is_empty() && config.epochs > state.epoch {
        return Err(Error::Contract("training corpus is empty".into()));
    }
    let mut logs = Vec::new();
    let mut clock = Instant::now();
    let steps_left = |s: &TrainState| config.max_steps.is_none_or(|m| s.step < m);
    model.zero_grads();

    while state.epoch < config.epochs && steps_left(state) {
        let batches = batch_iter(data, config.batch_size, epoch_seed(config.seed, state.epoch));
        for (index, batch) in batches.enumerate().skip(state.batch_in_epoch) {
            if !steps_left(state) {
                break;
            }
            let stats = model.forward_backward(&batch)?;
            if !stats.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    loss: stats.mean(),
                    batch: index,
                    epoch: state.epoch + 1,
                });
            }
            clip_gradients(model, config.clip_norm);
            optimizer_step(model, state, config.optimizer, config.learning_rate);
            state.epoch_loss += stats.total;
            state.epoch_tokens += stats.tokens;
            state.batch_in_epoch = index + 1;
        }
        let total_batches = data.len().div_ceil(config.batch_size);
        if state.batch_in_epoch < total_batches {
            break;
        }

        let loss = state.epoch_loss / state.epoch_tokens as f64;
        let val_ppl = if val.is_empty() {
            f64::NAN
        } else {
            perplexity_from(&corpus_nll(model, val, config.batch_size)?)?
        };
        let selection = if val.is_empty() { loss.exp() } else { val_ppl };
        let improved = selection < state.best_perplexity;
        if improved {
            state.best_perplexity = selection;
        }
        state.epoch += 1;
        state.batch_in_epoch = 0;
        state.epoch_loss = 0.0;
        state.epoch_tokens = 0;
        let log = EpochLog {
            epoch: state.epoch,
            loss,
            val_ppl,
            seconds: clock.elapsed().as_secs_f64(),
            improved,
        };
        observer.epoch_end(&log, model, state, config)?;
        logs.push(log);
        clock = Instant::now();
    }
    observer.finished(model, state, config)?;
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Parameter;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn param(values: &[f64], grads: &[f64]) -> Parameter {
        let mut p = Parameter::new("p", Tensor::vector(values.to_vec()).unwrap());
        p.grad.data_mut().copy_from_slice(grads);
        p
    }

    #[test]
    fn clip_leaves_small_gradients_alone() {
        let mut p = vec![param(&[0.0, 0.0], &[0.3, 0.4])];
        assert_eq!(clip_gradients(&mut p, 1.0), 1.0);
        assert_eq!(p[0].grad.data(), &[0.3, 0.4]);
    }

    #[test]
    fn clip_scales_to_norm() {
        let mut p = vec![param(&[0.0, 0.0], &[3.0, 4.0])];
        assert_eq!(clip_gradients(&mut p, 1.0), 0.2);
        let g = p[0].grad.data();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_step() {
        let mut p = param(&[1.0], &[2.0]);
        let mut st = TrainState::default();
        optimizer_step(&mut p, &mut st, Optimizer::Sgd, 0.1);
        assert!((p.value.data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(p.grad.data(), &[0.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        for g in [-3.0, 0.01, 250.0] {
            let mut p = param(&[1.0], &[g]);
            let mut st = TrainState::default();
            optimizer_step(&mut p, &mut st, Optimizer::Adam, 0.01);
            let delta = p.value.data()[0] - 1.0;
            assert!((delta.abs() - 0.01).abs() < 1e-6, "{delta}");
            assert_eq!(delta.signum(), -g.signum());
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = param(&[1.0], &[0.0]);
        let mut st = TrainState::default();
        for _ in 0..100 {
            let x = p.value.data()[0];
            p.grad.data_mut()[0] = 2.0 * x;
            optimizer_step(&mut p, &mut st, Optimizer::Adam, 0.1);
        }
        assert!(p.value.data()[0].abs() < 0.05, "{}", p.value.data()[0]);
    }

    #[test]
    fn optimizer_names_round_trip() {
        for o in [Optimizer::Sgd, Optimizer::Adam] {
            assert_eq!(o.to_string().parse::<Optimizer>().unwrap(), o);
            assert_eq!(Optimizer::from_code(o.code()), Some(o));
        }
        assert!("rmsprop".parse::<Optimizer>().is_err());
    }

    fn toy() -> (TranslationModel, Vec<EncodedPair>) {
        let cfg = ModelConfig {
            embed_dim: 6,
            hidden: 6,
            ..ModelConfig::new(8, 8)
        };
        let data = (0..10)
            .map(|i| EncodedPair::new(vec![4 + i % 4, 4 + (i + 1) % 4], vec![4 + (i + 2) % 4]))
            .collect();
        (TranslationModel::new(cfg, 3).unwrap(), data)
    }

    #[test]
    fn zero_epochs_leave_params_unchanged() {
        let (mut m, data) = toy();
        let before = m.clone();
        let config = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let logs = train(&mut m, &mut TrainState::default(), &data, &[], &config, &mut ()).unwrap();
        assert!(logs.is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn identical_runs_have_identical_losses() {
        let config = TrainConfig {
            epochs: 3,
            batch_size: 4,
            learning_rate: 0.01,
            ..TrainConfig::default()
        };
        let run = || {
            let (mut m, data) = toy();
            let logs = train(&mut m, &mut TrainState::default(), &data, &data[..3], &config, &mut ()).unwrap();
            (
                m,
                logs.iter()
                    .map(|l| (l.loss.to_bits(), l.val_ppl.to_bits()))
                    .collect::<Vec<_>>(),
            )
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(la, lb);
        assert_eq!(a, b);
        assert!(la.len() == 3);
    }

    #[test]
    fn interrupted_run_resumes_exactly() {
        let config = TrainConfig {
            epochs: 3,
            batch_size: 3,
            learning_rate: 0.01,
            ..TrainConfig::default()
        };
        let (mut full, data) = toy();
        let full_logs = train(&mut full, &mut TrainState::default(), &data, &[], &config, &mut ()).unwrap();

        let (mut part, _) = toy();
        let mut state = TrainState::default();
        let first = TrainConfig {
            max_steps: Some(5),
            ..config
        };
        let logs_a = train(&mut part, &mut state, &data, &[], &first, &mut ()).unwrap();
        assert_eq!((state.step, state.epoch, state.batch_in_epoch), (5, 1, 1));
        let logs_b = train(&mut part, &mut state, &data, &[], &config, &mut ()).unwrap();
        let losses = |ls: &[EpochLog]| ls.iter().map(|l| l.loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(losses(&full_logs), [losses(&logs_a), losses(&logs_b)].concat());
        assert_eq!(part, full);
    }

    #[test]
    fn clipped_norm_never_exceeds_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let mut ps: Vec<Parameter> = (0..3)
                .map(|_| {
                    let n = rng.gen_range(1..6);
                    let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-50.0..50.0)).collect();
                    param(&vec![0.0; n], &g)
                })
                .collect();
            let clip = rng.gen_range(0.1..20.0);
            clip_gradients(&mut ps, clip);
            let oracle: f64 = ps.iter().flat_map(|p| p.grad.data()).map(|g| g * g).sum::<f64>().sqrt();
            assert!(oracle <= clip + 1e-9);
        }
    }

    #[test]
    fn non_finite_loss_names_the_batch() {
        let (mut m, data) = toy();
        m.params.b_out.value.data_mut()[5] = f64::INFINITY;
        let config = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let err = train(&mut m, &mut TrainState::default(), &data, &[], &config, &mut ()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { batch: 0, epoch: 1, .. }), "{err}");
    }

    #[test]
    fn log_line_format() {
        let l = EpochLog {
            epoch: 2,
            loss: 1.5,
            val_ppl: f64::NAN,
            seconds: 0.25,
            improved: false,
        };
        assert_eq!(l.to_line(), "epoch=2 loss=1.500000 val_ppl=NaN seconds=0.250");
    }
}
