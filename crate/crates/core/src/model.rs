//! Network parameterizations.
//!
//! [`PotentialNet`] is the stable model: a scalar `H_θ(z, τ) > 0` whose
//! negative input gradient is the vector field, so `∇H·v = -‖∇H‖² ≤ 0` holds
//! by construction. [`FieldNet`] is the unconstrained baseline that outputs
//! a velocity directly.

use serde::{Deserialize, Serialize};

use crate::data::Rng;
use crate::diffkit::{Activation, Dense, DenseNet};
use crate::error::{check_dim, Error, Result};

fn concat(z: &[f64], last: f64) -> Vec<f64> {
    let mut x = Vec::with_capacity(z.len() + 1);
    x.extend_from_slice(z);
    x.push(last);
    x
}

fn hidden_dims(input: usize, hidden_layers: usize, hidden_width: usize, output: usize) -> Result<Vec<usize>> {
    if hidden_layers == 0 {
        return Err(Error::config("hidden_layers", "must be at least 1"));
    }
    if hidden_width == 0 {
        return Err(Error::config("hidden_width", "must be at least 1"));
    }
    let mut dims = vec![input];
    dims.extend(std::iter::repeat_n(hidden_width, hidden_layers));
    dims.push(output);
    Ok(dims)
}

/// Scalar potential over `(z, τ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialNet {
    pub net: DenseNet,
}

impl PotentialNet {
    pub fn new(net: DenseNet) -> Result<Self> {
        if net.output_dim() != 1 {
            return Err(Error::ContractViolation(format!(
                "potential network must have scalar output, got {}",
                net.output_dim()
            )));
        }
        if net.input_dim() < 2 {
            return Err(Error::ContractViolation(
                "potential network needs at least one data coordinate plus pseudo-time".into(),
            ));
        }
        Ok(Self { net })
    }

    /// Softplus stack with a softplus output, so `H_θ > 0`.
    pub fn init(d: usize, hidden_layers: usize, hidden_width: usize, rng: &mut Rng) -> Result<Self> {
        let dims = hidden_dims(d + 1, hidden_layers, hidden_width, 1)?;
        Self::new(DenseNet::init(&dims, Activation::Softplus, Activation::Softplus, rng)?)
    }

    /// Exact quadratic `½ (λ_z ‖z - c_z‖² + λ_τ (τ - c_τ)²)` built from a
    /// half-square hidden layer. Its field is the conditional field toward
    /// `center`. Non-negative rather than strictly positive: it vanishes at
    /// the center.
    pub fn quadratic(center_z: &[f64], center_tau: f64, lambda_z: f64, lambda_tau: f64) -> Result<Self> {
        let d = center_z.len();
        let n = d + 1;
        let scales: Vec<f64> = std::iter::repeat_n(lambda_z.sqrt(), d)
            .chain(std::iter::once(lambda_tau.sqrt()))
            .collect();
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            w[i * n + i] = scales[i];
        }
        let b: Vec<f64> = center_z
            .iter()
            .chain(std::iter::once(&center_tau))
            .zip(&scales)
            .map(|(c, s)| -s * c)
            .collect();
        let hidden = Dense::new(n, n, w, b)?;
        let out = Dense::new(n, 1, vec![1.0; n], vec![0.0])?;
        Self::new(DenseNet::from_layers(
            vec![hidden, out],
            Activation::HalfSquare,
            Activation::Identity,
        )?)
    }

    /// Data dimension `d`.
    pub fn dim(&self) -> usize {
        self.net.input_dim() - 1
    }

    pub fn potential(&self, z: &[f64], tau: f64) -> Result<f64> {
        check_dim(self.dim(), z.len())?;
        Ok(self.net.forward(&concat(z, tau))?[0])
    }

    /// `∇_{(z,τ)} H_θ`
    pub fn potential_grad(&self, z: &[f64], tau: f64) -> Result<Vec<f64>> {
        check_dim(self.dim(), z.len())?;
        self.net.input_grad(&concat(z, tau))
    }

    /// `v_θ = -∇H_θ`, length `d + 1`.
    pub fn grad_field(&self, z: &[f64], tau: f64) -> Result<Vec<f64>> {
        Ok(self.potential_grad(z, tau)?.into_iter().map(|g| -g).collect())
    }

    /// Field on a flat `[z..., τ]` state.
    pub fn grad_field_flat(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim() + 1, x.len())?;
        Ok(self.net.input_grad(x)?.into_iter().map(|g| -g).collect())
    }
}

/// Free velocity network for the baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldNet {
    pub net: DenseNet,
    /// Whether `t` is appended to the input.
    pub time_input: bool,
}

impl FieldNet {
    pub fn new(net: DenseNet, time_input: bool) -> Result<Self> {
        let d = net.output_dim();
        check_dim(d + usize::from(time_input), net.input_dim())?;
        Ok(Self { net, time_input })
    }

    pub fn init(
        d: usize,
        hidden_layers: usize,
        hidden_width: usize,
        time_input: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let dims = hidden_dims(d + usize::from(time_input), hidden_layers, hidden_width, d)?;
        Self::new(
            DenseNet::init(&dims, Activation::Softplus, Activation::Identity, rng)?,
            time_input,
        )
    }

    pub fn dim(&self) -> usize {
        self.net.output_dim()
    }

    /// Network input for `(z, t)`.
    pub fn input(&self, z: &[f64], t: f64) -> Result<Vec<f64>> {
        check_dim(self.dim(), z.len())?;
        Ok(if self.time_input { concat(z, t) } else { z.to_vec() })
    }

    pub fn baseline_field(&self, z: &[f64], t: f64) -> Result<Vec<f64>> {
        self.net.forward(&self.input(z, t)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Potential,
    Field,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "potential" | "stable" => Ok(ModelKind::Potential),
            "field" | "ot" => Ok(ModelKind::Field),
            _ => Err(Error::config("kind", format!("unknown model kind `{s}`"))),
        }
    }
}

/// Either parameterization.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Potential(PotentialNet),
    Field(FieldNet),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Potential(_) => ModelKind::Potential,
            Model::Field(_) => ModelKind::Field,
        }
    }

    pub fn net(&self) -> &DenseNet {
        match self {
            Model::Potential(m) => &m.net,
            Model::Field(m) => &m.net,
        }
    }

    pub fn net_mut(&mut self) -> &mut DenseNet {
        match self {
            Model::Potential(m) => &mut m.net,
            Model::Field(m) => &mut m.net,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Model::Potential(m) => m.dim(),
            Model::Field(m) => m.dim(),
        }
    }
}

/// Seeded initialization. The baseline appends time to its input.
pub fn init(seed: u64, d: usize, hidden_layers: usize, hidden_width: usize, kind: ModelKind) -> Result<Model> {
    if d == 0 {
        return Err(Error::config("d", "data dimension must be at least 1"));
    }
    let mut rng = Rng::new(seed);
    Ok(match kind {
        ModelKind::Potential => Model::Potential(PotentialNet::init(d, hidden_layers, hidden_width, &mut rng)?),
        ModelKind::Field => Model::Field(FieldNet::init(d, hidden_layers, hidden_width, true, &mut rng)?),
    })
}
