use crate::error::{Error, Result};
use crate::model::{ModelDelta, ModelParams};
use crate::privacy::RdpAccountant;

/// Server optimizer: SGD on the pseudo-gradient with optional heavy-ball momentum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServerOptimizer {
    pub lr: f64,
    pub momentum: f64,
}

/// Everything the orchestration loop owns between rounds.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub round: usize,
    pub theta: ModelParams,
    /// Shadow average, kept in double precision over every tensor.
    ema: Vec<Vec<f64>>,
    pub gamma: f64,
    pub optimizer: ServerOptimizer,
    velocity: Option<ModelDelta>,
    pub accountant: Option<RdpAccountant>,
}

fn tensor_values(p: &ModelParams) -> Vec<Vec<f64>> {
    p.tensors()
        .into_iter()
        .map(|(_, _, s)| s.iter().map(|&x| x as f64).collect())
        .collect()
}

impl ServerState {
    pub fn new(
        theta: ModelParams,
        gamma: f64,
        optimizer: ServerOptimizer,
        accountant: Option<RdpAccountant>,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::config("ema_gamma", "must lie in [0, 1]"));
        }
        if !(optimizer.lr.is_finite() && optimizer.lr >= 0.0) {
            return Err(Error::config("server_lr", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&optimizer.momentum) {
            return Err(Error::config("server_momentum", "must lie in [0, 1)"));
        }
        let ema = tensor_values(&theta);
        Ok(Self {
            round: 0,
            theta,
            ema,
            gamma,
            optimizer,
            velocity: None,
            accountant,
        })
    }

    /// Overwrite the shadow average.
    pub fn set_ema(&mut self, phi: &ModelParams) -> Result<()> {
        if phi.config != self.theta.config {
            return Err(Error::Shape("EMA model has a different configuration".into()));
        }
        self.ema = tensor_values(phi);
        Ok(())
    }

    /// The shadow average rounded to a model.
    pub fn ema_params(&self) -> ModelParams {
        let mut phi = self.theta.clone();
        let map = self
            .theta
            .tensors()
            .into_iter()
            .zip(&self.ema)
            .map(|((name, _, _), v)| (name, v.iter().map(|&x| x as f32).collect()))
            .collect();
        phi.load_tensors(&map).expect("same layout as theta");
        phi
    }

    /// Current privacy spend, or infinity without noise.
    pub fn epsilon(&self) -> f64 {
        self.accountant.as_ref().map_or(f64::INFINITY, RdpAccountant::epsilon)
    }
}

/// `v ← μ v + Δ`, `θ ← θ + lr · v`. With zero momentum this is `θ + lr · Δ`.
pub fn server_step(state: &mut ServerState, pseudo_gradient: &ModelDelta) -> Result<()> {
    if pseudo_gradient.rows.iter().chain(&pseudo_gradient.dense).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("pseudo-gradient".into()));
    }
    let ServerOptimizer { lr, momentum } = state.optimizer;
    let step = if momentum > 0.0 {
        let v = state
            .velocity
            .get_or_insert_with(|| ModelDelta::zeros(pseudo_gradient.rows.nrows(), pseudo_gradient.rows.ncols(), pseudo_gradient.dense.len()));
        if v.rows.dim() != pseudo_gradient.rows.dim() || v.dense.len() != pseudo_gradient.dense.len() {
            return Err(Error::Shape("pseudo-gradient does not match optimizer state".into()));
        }
        v.rows.zip_mut_with(&pseudo_gradient.rows, |a, &g| *a = momentum * *a + g);
        v.dense.iter_mut().zip(&pseudo_gradient.dense).for_each(|(a, g)| *a = momentum * *a + g);
        &*v
    } else {
        pseudo_gradient
    };
    if lr != 0.0 {
        state.theta.apply_delta(step, lr)?;
    }
    state.round += 1;
    Ok(())
}

/// `φ ← γ φ + (1 - γ) θ` over every tensor.
pub fn ema_update(state: &mut ServerState) {
    let g = state.gamma;
    for (shadow, (_, _, values)) in state.ema.iter_mut().zip(state.theta.tensors()) {
        for (s, &x) in shadow.iter_mut().zip(values) {
            *s = g * *s + (1.0 - g) * x as f64;
        }
    }
}
