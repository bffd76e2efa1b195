//! Gradients, Adam and the training loops.
//!
//! Gradients are derived by hand from [`crate::sae::surrogate_loss`]; the unit
//! tests and the acceptance suite check them against central differences of
//! that function for every activation and loss variant.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature_model::{sample_batch, FeatureBasis, FeatureModelError, FiringModel};
use crate::io::csv::Table;
use crate::linalg;
use crate::sae::{
    self, apply_activation, aux_activations, penalty_weights, Activation, AuxInputs, Levels, LossBreakdown,
    LossOptions, SaeError, SaeParams, SparsityPenalty,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Sae(#[from] SaeError),
    #[error(transparent)]
    Features(#[from] FeatureModelError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("activation stream exhausted: needed {needed} more samples, only {available} left")]
    StreamExhausted { needed: u64, available: u64 },
    #[error("batch source has dimension {source_dims}, SAE expects {sae_dims}")]
    SourceDims { source_dims: usize, sae_dims: usize },
    #[error("batch source failed: {0}")]
    Source(String),
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Adam step size; `None` picks 3e-4 for TopK/BatchTopK and 7e-5 for L1 SAEs.
    pub lr: Option<f64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub total_samples: u64,
    pub l1_coeff: f64,
    /// Linear L1 warm-up length in steps (0 disables warm-up).
    pub l1_warmup_steps: u64,
    /// Linear decay of the step size to zero over the last steps of a training call (0 disables decay).
    pub lr_decay_steps: u64,
    /// Floor for the re-warm-up after extending an SAE; defaults to `l1_coeff`.
    pub l1_floor: Option<f64>,
    pub aux_coeff: f64,
    /// Dead latents used per sample by the aux loss; `None` means 2k or 32.
    pub aux_k: Option<usize>,
    /// Samples without firing after which a latent counts as dead.
    pub dead_window: u64,
    pub penalty: SparsityPenalty,
    /// Log a row every this many steps (the final step is always logged).
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: None,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 256,
            total_samples: 2_000_000,
            l1_coeff: 0.0,
            l1_warmup_steps: 0,
            lr_decay_steps: 0,
            l1_floor: None,
            aux_coeff: 1.0 / 32.0,
            aux_k: None,
            dead_window: 1_000_000,
            penalty: SparsityPenalty::NormWeightedL1,
            log_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn learning_rate(&self, activation: Activation) -> f64 {
        self.lr.unwrap_or(if activation.is_topk_family() { 3e-4 } else { 7e-5 })
    }

    pub fn aux_k(&self, activation: Activation) -> usize {
        self.aux_k.unwrap_or(match activation.k() {
            Some(k) => 2 * k,
            None => 32,
        })
    }

    pub fn l1_floor(&self) -> f64 {
        self.l1_floor.unwrap_or(self.l1_coeff)
    }

    pub fn steps_for(&self, samples: u64) -> u64 {
        samples.div_ceil(self.batch_size as u64)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.total_samples == 0 {
            return bad("total_samples must be positive".into());
        }
        if let Some(lr) = self.lr {
            if !(lr >= 0.0) {
                return bad(format!("lr {lr} must be >= 0"));
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        if !(self.l1_coeff >= 0.0) || !(self.aux_coeff >= 0.0) {
            return bad("l1_coeff and aux_coeff must be >= 0".into());
        }
        if self.l1_warmup_steps > self.steps_for(self.total_samples) {
            return bad(format!(
                "l1_warmup_steps {} exceeds the {} training steps",
                self.l1_warmup_steps,
                self.steps_for(self.total_samples)
            ));
        }
        if self.lr_decay_steps > self.steps_for(self.total_samples) {
            return bad(format!(
                "lr_decay_steps {} exceeds the {} training steps",
                self.lr_decay_steps,
                self.steps_for(self.total_samples)
            ));
        }
        let floor = self.l1_floor();
        if !(floor >= 0.0) || floor > self.l1_coeff {
            return bad(format!("l1_floor {floor} must lie in [0, l1_coeff = {}]", self.l1_coeff));
        }
        if self.log_every == 0 {
            return bad("log_every must be positive".into());
        }
        Ok(())
    }
}

/// Per-tensor values shaped like [`SaeParams`]: used for gradients and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensors {
    /// `None` for tied SAEs; their encoder gradient is folded into `w_dec`.
    pub w_enc: Option<Array2<f64>>,
    pub b_enc: Array1<f64>,
    pub w_dec: Array2<f64>,
    pub b_dec: Array1<f64>,
}

pub type Gradients = ParamTensors;

impl ParamTensors {
    pub fn zeros_like(params: &SaeParams) -> Self {
        let (l, d) = (params.width(), params.dims());
        Self {
            w_enc: (!params.is_tied()).then(|| Array2::zeros((l, d))),
            b_enc: Array1::zeros(l),
            w_dec: Array2::zeros((l, d)),
            b_dec: Array1::zeros(d),
        }
    }

    /// Appends zero rows for `n_new` additional latents.
    pub fn extend(&self, n_new: usize) -> Self {
        let grow = |m: &Array2<f64>| {
            let (l, d) = m.dim();
            let mut out = Array2::zeros((l + n_new, d));
            out.slice_mut(s![..l, ..]).assign(m);
            out
        };
        let mut b_enc = Array1::zeros(self.b_enc.len() + n_new);
        b_enc.slice_mut(s![..self.b_enc.len()]).assign(&self.b_enc);
        Self { w_enc: self.w_enc.as_ref().map(grow), b_enc, w_dec: grow(&self.w_dec), b_dec: self.b_dec.clone() }
    }

    /// Tensors in checkpoint order (encoder, encoder bias, decoder, decoder bias).
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(4);
        if let Some(w) = &self.w_enc {
            out.push(w.as_slice().expect("standard layout"));
        }
        out.push(self.b_enc.as_slice().expect("standard layout"));
        out.push(self.w_dec.as_slice().expect("standard layout"));
        out.push(self.b_dec.as_slice().expect("standard layout"));
        out
    }

    /// Euclidean norm over all tensors.
    pub fn norm(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Gradients plus the loss and latent activations of the same forward pass.
#[derive(Debug, Clone)]
pub struct GradientOutput {
    pub grads: Gradients,
    pub loss: LossBreakdown,
    pub z: Array2<f64>,
}

/// Analytic gradient of the training loss with respect to every parameter.
pub fn compute_gradients(
    params: &SaeParams,
    x: ArrayView2<f64>,
    opts: &LossOptions,
) -> Result<GradientOutput, SaeError> {
    opts.validate(params.width())?;
    let b = x.nrows();
    let inv_b = if b == 0 { 0.0 } else { 1.0 / b as f64 };
    let levels = Levels::of(params);
    let w_enc = params.w_enc();
    let w_dec = &params.w_dec;
    let centered = &x - &params.b_dec;
    let pre = centered.dot(&w_enc.t()) + &params.b_enc;
    let z = apply_activation(&pre, params.activation);
    let topk = params.activation.is_topk_family();
    let l1 = if topk { 0.0 } else { opts.l1_coeff };
    let weights = penalty_weights(params, opts.penalty);

    // Cumulative reconstructions and residuals per level.
    let n_levels = levels.groups.len();
    let mut residuals = Vec::with_capacity(n_levels);
    let mut mse = Vec::with_capacity(n_levels);
    let mut sparsity = Vec::with_capacity(n_levels);
    let mut recon = Array2::zeros(x.raw_dim());
    recon += &params.b_dec;
    let mut prefix_sparsity = 0.0;
    for &(start, end, _) in &levels.groups {
        let zg = z.slice(s![.., start..end]);
        recon += &zg.dot(&w_dec.slice(s![start..end, ..]));
        prefix_sparsity += zg.dot(&weights.slice(s![start..end])).sum();
        let r = &recon - &x;
        mse.push((&r * &r).sum() * inv_b);
        sparsity.push(if topk { 0.0 } else { prefix_sparsity * inv_b });
        residuals.push(r);
    }

    // Upstream residual seen by each level's latents and its total weight.
    let mut upstream: Vec<Array2<f64>> = Vec::with_capacity(n_levels);
    let mut level_weight = vec![0.0; n_levels];
    if levels.detached {
        for (k, r) in residuals.iter().enumerate() {
            let beta = levels.groups[k].2;
            upstream.push(r * beta);
            level_weight[k] = beta;
        }
    } else {
        let mut acc = Array2::<f64>::zeros(x.raw_dim());
        let mut wacc = 0.0;
        let mut rev = Vec::with_capacity(n_levels);
        for k in (0..n_levels).rev() {
            let beta = levels.groups[k].2;
            acc.scaled_add(beta, &residuals[k]);
            wacc += beta;
            rev.push(acc.clone());
            level_weight[k] = wacc;
        }
        rev.reverse();
        upstream = rev;
    }

    let (l, d) = (params.width(), params.dims());
    let mut dz = Array2::<f64>::zeros((b, l));
    let mut dw_dec = Array2::<f64>::zeros((l, d));
    let col_sums = z.sum_axis(Axis(0));
    for (k, &(start, end, _)) in levels.groups.iter().enumerate() {
        let g = &upstream[k];
        let wg = w_dec.slice(s![start..end, ..]);
        let mut dzg = g.dot(&wg.t()) * (2.0 * inv_b);
        if l1 > 0.0 {
            let scale = l1 * level_weight[k] * inv_b;
            dzg += &(weights.slice(s![start..end]).to_owned() * scale);
        }
        dz.slice_mut(s![.., start..end]).assign(&dzg);
        let zg = z.slice(s![.., start..end]);
        let mut dwg = zg.t().dot(g) * (2.0 * inv_b);
        if l1 > 0.0 && opts.penalty == SparsityPenalty::NormWeightedL1 {
            for (j, i) in (start..end).enumerate() {
                let n = weights[i];
                if n > 0.0 {
                    let c = l1 * level_weight[k] * inv_b * col_sums[i] / n;
                    dwg.row_mut(j).scaled_add(c, &w_dec.row(i));
                }
            }
        }
        dw_dec.slice_mut(s![start..end, ..]).assign(&dwg);
    }
    let mut db_dec = upstream[0].sum_axis(Axis(0)) * (2.0 * inv_b);

    // Only selected (nonzero) activations pass gradient back to the encoder.
    let mut dpre = dz;
    Zip::from(&mut dpre).and(&z).for_each(|g, &zv| {
        if zv == 0.0 {
            *g = 0.0;
        }
    });

    let mut aux_value = 0.0;
    if opts.aux_active() {
        let AuxInputs { dead, k_aux } = opts.aux.as_ref().unwrap();
        let z_aux = aux_activations(params, x, dead, *k_aux)?;
        // residual x - xhat is a constant here
        let q = z_aux.dot(w_dec) + &residuals[n_levels - 1];
        aux_value = (&q * &q).sum() * inv_b;
        let scale = 2.0 * opts.aux_coeff * inv_b;
        let mut dz_aux = q.dot(&w_dec.t()) * scale;
        Zip::from(&mut dz_aux).and(&z_aux).for_each(|g, &zv| {
            if zv == 0.0 {
                *g = 0.0;
            }
        });
        dpre += &dz_aux;
        dw_dec += &(z_aux.t().dot(&q) * scale);
    }

    let dw_enc = dpre.t().dot(&centered);
    let db_enc = dpre.sum_axis(Axis(0));
    db_dec -= &db_enc.dot(w_enc);

    let grads = if params.is_tied() {
        Gradients { w_enc: None, b_enc: db_enc, w_dec: dw_dec + &dw_enc, b_dec: db_dec }
    } else {
        Gradients { w_enc: Some(dw_enc), b_enc: db_enc, w_dec: dw_dec, b_dec: db_dec }
    };

    let betas: Vec<f64> = levels.groups.iter().map(|g| g.2).collect();
    let l0 = z.iter().filter(|&&v| v != 0.0).count() as f64 * inv_b;
    let mut loss = LossBreakdown {
        total: 0.0,
        mse,
        sparsity,
        betas,
        aux: aux_value,
        l1_coeff: opts.l1_coeff,
        aux_coeff: opts.aux_coeff,
        l0,
    };
    loss.total = loss.recompose();
    Ok(GradientOutput { grads, loss, z })
}

/// Adam step size and moment decay rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn from_train(cfg: &TrainConfig, activation: Activation) -> Self {
        Self { lr: cfg.learning_rate(activation), beta1: cfg.adam_beta1, beta2: cfg.adam_beta2, eps: cfg.adam_eps }
    }
}

/// Adam first and second moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: ParamTensors,
    pub v: ParamTensors,
}

impl AdamState {
    pub fn new(params: &SaeParams) -> Self {
        Self { step: 0, m: ParamTensors::zeros_like(params), v: ParamTensors::zeros_like(params) }
    }

    pub fn extend(&self, n_new: usize) -> Self {
        Self { step: self.step, m: self.m.extend(n_new), v: self.v.extend(n_new) }
    }

    pub fn update(&mut self, params: &mut SaeParams, grads: &Gradients, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let upd = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                p[i] -= cfg.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.eps);
            }
        };
        if let (Some(p), Some(g), Some(m), Some(v)) =
            (params.untied_encoder_mut(), grads.w_enc.as_ref(), self.m.w_enc.as_mut(), self.v.w_enc.as_mut())
        {
            upd(slice_mut(p), slice(g), slice_mut(m), slice_mut(v));
        }
        upd(
            params.b_enc.as_slice_mut().unwrap(),
            grads.b_enc.as_slice().unwrap(),
            self.m.b_enc.as_slice_mut().unwrap(),
            self.v.b_enc.as_slice_mut().unwrap(),
        );
        upd(slice_mut(&mut params.w_dec), slice(&grads.w_dec), slice_mut(&mut self.m.w_dec), slice_mut(&mut self.v.w_dec));
        upd(
            params.b_dec.as_slice_mut().unwrap(),
            grads.b_dec.as_slice().unwrap(),
            self.m.b_dec.as_slice_mut().unwrap(),
            self.v.b_dec.as_slice_mut().unwrap(),
        );
    }
}

fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn slice_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

/// L1 coefficient as a function of the step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum L1Schedule {
    Constant(f64),
    /// `target * min(1, (t + 1) / steps)`.
    Warmup { target: f64, steps: u64 },
    /// Warm-up counted from `start`, never below `floor`.
    Rewarm { target: f64, floor: f64, steps: u64, start: u64 },
}

impl L1Schedule {
    pub fn at(&self, step: u64) -> f64 {
        let ramp = |target: f64, t: u64, steps: u64| {
            if steps == 0 {
                target
            } else {
                target * ((t + 1) as f64 / steps as f64).min(1.0)
            }
        };
        match *self {
            L1Schedule::Constant(v) => v,
            L1Schedule::Warmup { target, steps } => ramp(target, step, steps),
            L1Schedule::Rewarm { target, floor, steps, start } => {
                ramp(target, step.saturating_sub(start), steps).max(floor)
            }
        }
    }
}

/// Source of training batches.
pub trait BatchSource {
    fn dims(&self) -> usize;
    fn next_batch(&mut self, rows: usize) -> Result<Array2<f64>, TrainError>;
}

/// Batches drawn from a toy model.
#[derive(Debug, Clone)]
pub struct SyntheticSource {
    pub basis: FeatureBasis,
    pub firing: FiringModel,
    pub rng: ChaCha8Rng,
}

impl SyntheticSource {
    pub fn new(basis: FeatureBasis, firing: FiringModel, rng: ChaCha8Rng) -> Result<Self, TrainError> {
        if basis.count() != firing.len() {
            return Err(FeatureModelError::CountMismatch { model: firing.len(), basis: basis.count() }.into());
        }
        Ok(Self { basis, firing, rng })
    }
}

impl BatchSource for SyntheticSource {
    fn dims(&self) -> usize {
        self.basis.dims()
    }

    fn next_batch(&mut self, rows: usize) -> Result<Array2<f64>, TrainError> {
        Ok(sample_batch(&self.basis, &self.firing, rows, &mut self.rng)?.x)
    }
}

/// One logged training step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    pub step: u64,
    pub total: f64,
    pub mse: f64,
    pub sparsity: f64,
    pub aux: f64,
    pub l0: f64,
    pub l1_coeff: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn table(&self) -> Table {
        let mut t = Table::new(&["step", "total", "mse", "sparsity", "aux", "l0", "l1_coeff"]);
        for r in &self.rows {
            t.push(crate::csv_row![r.step, r.total, r.mse, r.sparsity, r.aux, r.l0, r.l1_coeff]);
        }
        t
    }
}

/// Everything needed to keep training an SAE.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub params: SaeParams,
    pub adam: AdamState,
    pub step: u64,
    pub samples_seen: u64,
    /// Samples since each latent last fired.
    pub since_fired: Vec<u64>,
}

impl TrainerState {
    pub fn new(params: SaeParams) -> Self {
        let adam = AdamState::new(&params);
        let since_fired = vec![0; params.width()];
        Self { params, adam, step: 0, samples_seen: 0, since_fired }
    }

    pub fn dead_mask(&self, window: u64) -> Vec<bool> {
        self.since_fired.iter().map(|&s| s >= window).collect()
    }

    /// Extends the SAE by `n_new` latents; their moments and counters start at zero.
    pub fn extended(&self, n_new: usize, init_norm: f64, seed: u64) -> Self {
        let mut since_fired = self.since_fired.clone();
        since_fired.extend(std::iter::repeat_n(0, n_new));
        Self {
            params: sae::extend_sae(&self.params, n_new, init_norm, seed),
            adam: self.adam.extend(n_new),
            step: self.step,
            samples_seen: self.samples_seen,
            since_fired,
        }
    }

    /// One Adam step on `x` with L1 coefficient `l1`.
    pub fn step(&mut self, x: ArrayView2<f64>, cfg: &TrainConfig, l1: f64) -> Result<LossBreakdown, TrainError> {
        self.step_scaled(x, cfg, l1, 1.0)
    }

    /// One Adam step with the configured step size multiplied by `lr_scale`.
    pub fn step_scaled(
        &mut self,
        x: ArrayView2<f64>,
        cfg: &TrainConfig,
        l1: f64,
        lr_scale: f64,
    ) -> Result<LossBreakdown, TrainError> {
        let activation = self.params.activation;
        let aux = (cfg.aux_coeff > 0.0).then(|| AuxInputs {
            dead: self.dead_mask(cfg.dead_window),
            k_aux: cfg.aux_k(activation),
        });
        let opts = LossOptions { l1_coeff: l1, aux_coeff: cfg.aux_coeff, penalty: cfg.penalty, aux };
        let out = compute_gradients(&self.params, x, &opts)?;
        let mut adam = AdamConfig::from_train(cfg, activation);
        adam.lr *= lr_scale;
        self.adam.update(&mut self.params, &out.grads, &adam);
        if cfg.penalty == SparsityPenalty::PlainL1 {
            self.params.normalize_decoder();
        }
        let rows = x.nrows() as u64;
        for (i, col) in out.z.axis_iter(Axis(1)).enumerate() {
            if col.iter().any(|&v| v != 0.0) {
                self.since_fired[i] = 0;
            } else {
                self.since_fired[i] = self.since_fired[i].saturating_add(rows);
            }
        }
        self.step += 1;
        self.samples_seen += rows;
        Ok(out.loss)
    }
}

fn log_row(step: u64, loss: &LossBreakdown, l1: f64) -> LogRow {
    LogRow {
        step,
        total: loss.total,
        mse: loss.outer_mse(),
        sparsity: loss.outer_sparsity(),
        aux: loss.aux,
        l0: loss.l0,
        l1_coeff: l1,
    }
}

/// Batch sizes that consume exactly `samples` samples.
fn batch_plan(samples: u64, batch: usize) -> impl Iterator<Item = usize> {
    let b = batch as u64;
    let full = samples / b;
    let rest = (samples % b) as usize;
    (0..full).map(move |_| batch).chain((rest > 0).then_some(rest))
}

/// Step-size multiplier for step `i` of `steps` with a linear decay over the last `decay` steps.
pub fn lr_decay_scale(i: u64, steps: u64, decay: u64) -> f64 {
    if decay == 0 {
        return 1.0;
    }
    let left = steps.saturating_sub(i) as f64;
    (left / decay as f64).min(1.0)
}

/// Trains `state` for `samples` more samples drawn from `source`, decaying the step size over the
/// last `cfg.lr_decay_steps` steps of this call.
pub fn train_for(
    state: &mut TrainerState,
    source: &mut dyn BatchSource,
    cfg: &TrainConfig,
    samples: u64,
    schedule: L1Schedule,
    log: &mut TrainingLog,
) -> Result<(), TrainError> {
    if source.dims() != state.params.dims() {
        return Err(TrainError::SourceDims { source_dims: source.dims(), sae_dims: state.params.dims() });
    }
    let steps = cfg.steps_for(samples);
    for (i, rows) in batch_plan(samples, cfg.batch_size).enumerate() {
        let x = source.next_batch(rows)?;
        let l1 = schedule.at(state.step);
        let loss = state.step_scaled(x.view(), cfg, l1, lr_decay_scale(i as u64, steps, cfg.lr_decay_steps))?;
        if (i as u64 + 1) % cfg.log_every == 0 || i as u64 + 1 == steps {
            log.rows.push(log_row(state.step, &loss, l1));
        }
    }
    Ok(())
}

/// Trains a fresh SAE over the configured sample budget with linear L1 warm-up.
pub fn train(
    source: &mut dyn BatchSource,
    cfg: &TrainConfig,
    params: SaeParams,
) -> Result<(TrainerState, TrainingLog), TrainError> {
    cfg.validate()?;
    let mut state = TrainerState::new(params);
    let mut log = TrainingLog::default();
    let schedule = L1Schedule::Warmup { target: cfg.l1_coeff, steps: cfg.l1_warmup_steps };
    train_for(&mut state, source, cfg, cfg.total_samples, schedule, &mut log)?;
    Ok((state, log))
}

/// Result of [`continue_train_pair`].
#[derive(Debug, Clone)]
pub struct PairOutcome {
    /// The original SAE, trained further.
    pub base: TrainerState,
    /// The extended SAE, trained on the same batches.
    pub extended: TrainerState,
    pub base_log: TrainingLog,
    pub extended_log: TrainingLog,
}

/// Extends `state0` by `n_new` latents and continues training both the
/// original and the extended SAE on one shared batch sequence.
///
/// For L1 SAEs whose coefficient exceeds `cfg.l1_floor()`, the coefficient is
/// re-warmed from the floor over `cfg.l1_warmup_steps`; otherwise it stays put.
/// With `budget == 0` the extended state is returned untrained.
pub fn continue_train_pair(
    state0: &TrainerState,
    n_new: usize,
    init_norm: f64,
    extend_seed: u64,
    cfg: &TrainConfig,
    budget: u64,
    source: &mut dyn BatchSource,
) -> Result<PairOutcome, TrainError> {
    if cfg.batch_size == 0 {
        return Err(TrainError::Config("batch_size must be positive".into()));
    }
    if source.dims() != state0.params.dims() {
        return Err(TrainError::SourceDims { source_dims: source.dims(), sae_dims: state0.params.dims() });
    }
    let mut base = state0.clone();
    let mut extended = state0.extended(n_new, init_norm, extend_seed);
    let mut base_log = TrainingLog::default();
    let mut extended_log = TrainingLog::default();
    let floor = cfg.l1_floor();
    let schedule = if !state0.params.activation.is_topk_family() && cfg.l1_coeff > floor {
        L1Schedule::Rewarm { target: cfg.l1_coeff, floor, steps: cfg.l1_warmup_steps, start: state0.step }
    } else {
        L1Schedule::Constant(cfg.l1_coeff)
    };
    let steps = cfg.steps_for(budget);
    for (i, rows) in batch_plan(budget, cfg.batch_size).enumerate() {
        let x = source.next_batch(rows)?;
        let l1 = schedule.at(base.step);
        let l0 = base.step(x.view(), cfg, l1)?;
        let l1e = extended.step(x.view(), cfg, l1)?;
        if (i as u64 + 1) % cfg.log_every == 0 || i as u64 + 1 == steps {
            base_log.rows.push(log_row(base.step, &l0, l1));
            extended_log.rows.push(log_row(extended.step, &l1e, l1));
        }
    }
    Ok(PairOutcome { base, extended, base_log, extended_log })
}

/// Sets latent `i`'s encoder and decoder to the `i`-th given unit direction.
pub fn init_to_features(params: &mut SaeParams, directions: ArrayView2<f64>) {
    for (i, dir) in directions.outer_iter().enumerate().take(params.width()) {
        let unit = &dir / linalg::norm(dir).max(f64::MIN_POSITIVE);
        params.set_latent_direction(i, unit.view());
    }
}
