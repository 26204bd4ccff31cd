//! Adam with decoupled weight decay, the training loop, configs and
//! checkpoints.

use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::ccnf::{StableCcnfParams, DEFAULT_RATE_RATIO};
use crate::data::{generate, read_points_csv, DatasetName, Rng};
use crate::diffkit::DenseNet;
use crate::error::{check_dim, Error, Result};
use crate::loss::{
    auto_cfm_loss, auto_cfm_loss_unnormalized, cfm_ot_loss, EmpiricalTarget, LossBatchSpec,
    LossKind,
};
use crate::model::{FieldNet, Model, ModelKind, PotentialNet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub hidden_layers: usize,
    pub hidden_width: usize,
    /// Baseline only: append `t` to the field network input.
    #[serde(default = "default_true")]
    pub time_input: bool,
}

fn default_true() -> bool {
    true
}

/// Training data: a generated synthetic set, or a `z1,z2,...` CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    #[serde(default = "default_dataset")]
    pub name: DatasetName,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    /// Overrides generation when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

fn default_dataset() -> DatasetName {
    DatasetName::Moons
}

fn default_n() -> usize {
    20_000
}

fn default_noise() -> f64 {
    0.05
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            name: default_dataset(),
            n: default_n(),
            noise_std: default_noise(),
            path: None,
        }
    }
}

impl DataSpec {
    pub fn load(&self, seed: u64) -> Result<EmpiricalTarget> {
        let points = match &self.path {
            Some(p) => read_points_csv(p)?,
            None => generate(self.name, self.n, self.noise_std, seed)?.to_vectors(),
        };
        EmpiricalTarget::new(points)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub loss: LossBatchSpec,
    /// Required for the pseudo-time losses, ignored by the baseline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ccnf: Option<StableCcnfParams>,
    pub net: NetSpec,
    pub log_every: usize,
    #[serde(default)]
    pub data: DataSpec,
    /// Batch reductions are always performed in a fixed order, so runs are
    /// reproducible regardless; the flag is kept for the record.
    #[serde(default = "default_true")]
    pub deterministic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Desk,
    Paper,
}

impl std::str::FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            _ => Err(Error::config("scale", format!("unknown scale `{s}`"))),
        }
    }
}

impl TrainConfig {
    /// Desk scale: 4×64 net, batch 512, 3000 iterations, 20000 points.
    pub fn desk(kind: ModelKind) -> Self {
        let loss_kind = match kind {
            ModelKind::Potential => LossKind::AutoUnnormalized,
            ModelKind::Field => LossKind::CfmOt,
        };
        Self {
            iterations: 3000,
            batch_size: 512,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            loss: LossBatchSpec::new(512, loss_kind),
            ccnf: match kind {
                ModelKind::Potential => Some(StableCcnfParams::standard(2, DEFAULT_RATE_RATIO)),
                ModelKind::Field => None,
            },
            net: NetSpec {
                hidden_layers: 4,
                hidden_width: 64,
                time_input: true,
            },
            log_every: 100,
            data: DataSpec::default(),
            deterministic: true,
        }
    }

    /// 4×500 net, batch 10000, 20000 iterations, learning rate 1e-3.
    pub fn paper(kind: ModelKind) -> Self {
        let mut c = Self::desk(kind);
        c.iterations = 20_000;
        c.batch_size = 10_000;
        c.loss.batch_size = 10_000;
        c.net.hidden_width = 500;
        c.data.n = 100_000;
        c.log_every = 500;
        c
    }

    pub fn preset(scale: Scale, kind: ModelKind) -> Self {
        match scale {
            Scale::Desk => Self::desk(kind),
            Scale::Paper => Self::paper(kind),
        }
    }

    pub fn model_kind(&self) -> ModelKind {
        match self.loss.loss_kind {
            LossKind::CfmOt => ModelKind::Field,
            LossKind::Auto | LossKind::AutoUnnormalized => ModelKind::Potential,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be finite and > 0"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be finite and >= 0"));
        }
        for (field, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(field, format!("must lie in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("adam_eps", "must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.loss.batch_size != self.batch_size {
            return Err(Error::config(
                "loss.batch_size",
                format!("{} does not match batch_size {}", self.loss.batch_size, self.batch_size),
            ));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every", "must be at least 1"));
        }
        if self.net.hidden_layers == 0 {
            return Err(Error::config("net.hidden_layers", "must be at least 1"));
        }
        if self.net.hidden_width == 0 {
            return Err(Error::config("net.hidden_width", "must be at least 1"));
        }
        if self.data.path.is_none() && self.data.n == 0 {
            return Err(Error::config("data.n", "dataset must contain at least one point"));
        }
        match (self.model_kind(), &self.ccnf) {
            (ModelKind::Potential, None) => {
                return Err(Error::config("ccnf", "pseudo-time losses need ccnf parameters"))
            }
            (ModelKind::Potential, Some(p)) => {
                p.validate().map_err(|e| match e {
                    Error::Config { field, message } => Error::Config {
                        field: format!("ccnf.{field}"),
                        message,
                    },
                    other => other,
                })?;
                self.loss.validate(Some((p.tau1 - p.tau0).abs()))?;
            }
            (ModelKind::Field, _) => self.loss.validate(None)?,
        }
        Ok(())
    }

    /// Parses and validates a JSON config; parse errors carry a byte offset.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::from_json(e, text))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Minibatch stream, separate from the initialization stream.
    pub fn batch_rng(&self) -> Rng {
        Rng::stream(self.seed, 2)
    }

    /// Fresh model for this config.
    pub fn init_model(&self, d: usize) -> Result<Model> {
        let mut rng = Rng::stream(self.seed, 1);
        Ok(match self.model_kind() {
            ModelKind::Potential => {
                Model::Potential(PotentialNet::init(d, self.net.hidden_layers, self.net.hidden_width, &mut rng)?)
            }
            ModelKind::Field => Model::Field(FieldNet::init(
                d,
                self.net.hidden_layers,
                self.net.hidden_width,
                self.net.time_input,
                &mut rng,
            )?),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One Adam step with decoupled weight decay:
/// `θ ← θ - lr·m̂/(√v̂ + ε) - lr·wd·θ`.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    check_dim(params.len(), grads.len())?;
    check_dim(params.len(), state.m.len())?;
    check_dim(params.len(), state.v.len())?;
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::numeric(
            "adam_step",
            format!("gradient coordinate {i} is {} at step {}", grads[i], state.step + 1),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps) + cfg.learning_rate * cfg.weight_decay * *p;
    }
    Ok(())
}

/// Per-iteration training loss.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossHistory {
    pub losses: Vec<f64>,
}

impl LossHistory {
    /// Trailing moving average with the given window.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        let w = window.max(1);
        let mut out = Vec::with_capacity(self.losses.len());
        let mut acc = 0.0;
        for (i, l) in self.losses.iter().enumerate() {
            acc += l;
            if i >= w {
                acc -= self.losses[i - w];
            }
            out.push(acc / (i + 1).min(w) as f64);
        }
        out
    }

    /// Mean of the first `window` losses.
    pub fn head_mean(&self, window: usize) -> f64 {
        let k = window.min(self.losses.len()).max(1);
        self.losses[..k.min(self.losses.len())].iter().sum::<f64>() / k as f64
    }

    /// Mean of the last `window` losses.
    pub fn tail_mean(&self, window: usize) -> f64 {
        let k = window.min(self.losses.len()).max(1);
        self.losses[self.losses.len().saturating_sub(k)..].iter().sum::<f64>() / k as f64
    }

    /// CSV `step,loss`, steps counted from 1.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("{},{l}\n", i + 1));
        }
        s
    }
}

/// Training stopped by a fault. `model` holds the last parameters that
/// produced a finite loss and gradient.
#[derive(Debug)]
pub struct TrainAbort {
    pub error: Error,
    pub model: Model,
    pub history: LossHistory,
}

impl std::fmt::Display for TrainAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "training aborted after {} steps: {}", self.history.losses.len(), self.error)
    }
}

impl std::error::Error for TrainAbort {}

/// Minimizes `objective(θ) -> (loss, ∇loss)` with Adam.
///
/// On a fault, returns the error together with the last good parameters.
pub fn train_params<F>(
    params: &mut Vec<f64>,
    iterations: usize,
    adam: &AdamConfig,
    log_every: usize,
    mut objective: F,
) -> std::result::Result<LossHistory, (Error, LossHistory)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut state = AdamState::new(params.len());
    let mut history = LossHistory {
        losses: Vec::with_capacity(iterations),
    };
    for step in 0..iterations {
        let (value, grad) = match objective(params) {
            Ok(r) => r,
            Err(e) => return Err((e, history)),
        };
        if !value.is_finite() {
            return Err((Error::numeric("train", format!("loss is {value} at step {}", step + 1)), history));
        }
        let mut next = params.clone();
        if let Err(e) = adam_step(&mut next, &grad, &mut state, adam) {
            return Err((e, history));
        }
        if let Some(i) = next.iter().position(|p| !p.is_finite()) {
            return Err((
                Error::numeric("train", format!("parameter {i} became non-finite at step {}", step + 1)),
                history,
            ));
        }
        *params = next;
        history.losses.push(value);
        if log_every > 0 && ((step + 1) % log_every == 0 || step + 1 == iterations) {
            info!("step {:>6}  loss {value:.6e}", step + 1);
        }
    }
    Ok(history)
}

/// Runs `cfg.iterations` steps of loss evaluation and Adam on `model`.
pub fn train(
    model: Model,
    data: &EmpiricalTarget,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> std::result::Result<(Model, LossHistory), TrainAbort> {
    let abort = |error, model, history| TrainAbort { error, model, history };
    if let Err(e) = cfg.validate() {
        return Err(abort(e, model, LossHistory::default()));
    }
    if model.kind() != cfg.model_kind() {
        return Err(abort(
            Error::config("loss.loss_kind", "loss does not match the model kind"),
            model,
            LossHistory::default(),
        ));
    }
    if let Err(e) = check_dim(model.dim(), data.dim()) {
        return Err(abort(e, model, LossHistory::default()));
    }

    let mut work = model.clone();
    let mut params = model.net().params();
    let adam = cfg.adam();
    let result = train_params(&mut params, cfg.iterations, &adam, cfg.log_every, |theta| {
        work.net_mut().set_params(theta)?;
        let eval = match (&work, cfg.loss.loss_kind) {
            (Model::Potential(m), LossKind::AutoUnnormalized) => {
                auto_cfm_loss_unnormalized(m, cfg.ccnf.as_ref().expect("validated"), data, &cfg.loss, rng)?
            }
            (Model::Potential(m), LossKind::Auto) => {
                auto_cfm_loss(m, cfg.ccnf.as_ref().expect("validated"), data, &cfg.loss, rng)?
            }
            (Model::Field(m), LossKind::CfmOt) => cfm_ot_loss(m, data, &cfg.loss, rng)?,
            _ => unreachable!("model kind checked above"),
        };
        Ok((eval.value, eval.grad))
    });
    let mut out = model;
    match result {
        Ok(history) => {
            out.net_mut().set_params(&params).map_err(|e| abort(e, out.clone(), history.clone()))?;
            Ok((out, history))
        }
        Err((error, history)) => {
            // `params` still holds the last accepted update.
            let _ = out.net_mut().set_params(&params);
            Err(abort(error, out, history))
        }
    }
}

/// Serialized model plus the config it was trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub d: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_input: Option<bool>,
    #[serde(flatten)]
    pub net: DenseNet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<TrainConfig>,
}

impl Checkpoint {
    pub fn new(model: &Model, config: Option<&TrainConfig>) -> Self {
        Self {
            kind: model.kind(),
            d: model.dim(),
            time_input: match model {
                Model::Field(f) => Some(f.time_input),
                Model::Potential(_) => None,
            },
            net: model.net().clone(),
            config: config.cloned(),
        }
    }

    pub fn model(&self) -> Result<Model> {
        let m = match self.kind {
            ModelKind::Potential => Model::Potential(PotentialNet::new(self.net.clone())?),
            ModelKind::Field => Model::Field(FieldNet::new(self.net.clone(), self.time_input.unwrap_or(true))?),
        };
        check_dim(self.d, m.dim())?;
        Ok(m)
    }

    /// Pseudo-time parameters for a stable checkpoint: the training config's,
    /// else the defaults.
    pub fn ccnf(&self) -> StableCcnfParams {
        self.config
            .as_ref()
            .and_then(|c| c.ccnf.clone())
            .unwrap_or_else(|| StableCcnfParams::standard(self.d, DEFAULT_RATE_RATIO))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(text).map_err(|e| Error::from_json(e, text))?;
        ck.model()?;
        Ok(ck)
    }
}

pub fn save_checkpoint(model: &Model, cfg: Option<&TrainConfig>, path: &Path) -> Result<()> {
    let text = serde_json::to_string(&Checkpoint::new(model, cfg)).expect("checkpoint serializes");
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_json(&std::fs::read_to_string(path)?)
}
