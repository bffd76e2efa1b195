//! Sparse autoencoder parameters, forward pass and losses.
//!
//! Shapes follow a row convention throughout: a batch `X` is `B x D`, the
//! encoder and decoder are both `L x D` (row `i` belongs to latent `i`), so
//!
//! ```text
//! Z    = sigma((X - b_dec) W_enc^T + b_enc)      B x L
//! Xhat = Z W_dec + b_dec                         B x D
//! ```
//!
//! A tied SAE stores a single `L x D` matrix that serves as both encoder and
//! decoder; the biases stay separate.
//!
//! Matryoshka SAEs reconstruct from nested latent prefixes `m_1 < ... < m_n = L`
//! and weight each level's loss by `beta_k`. In detached mode, a level only
//! trains its own suffix of latents: the reconstruction of the inner prefix is
//! treated as a constant by every outer level.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::rng::{stream_rng, STREAM_EXTEND, STREAM_INIT};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SaeError {
    #[error("invalid SAE dimensions: {0}")]
    Dims(String),
    #[error("batch has {got} columns, SAE input dimension is {want}")]
    InputDims { got: usize, want: usize },
    #[error("k = {k} must satisfy 1 <= k <= {width}")]
    BadK { k: usize, width: usize },
    #[error("invalid matryoshka spec: {0}")]
    Matryoshka(String),
    #[error("coefficient {name} = {value} must be non-negative")]
    NegativeCoefficient { name: &'static str, value: f64 },
    #[error("aux dead mask has {got} entries, SAE has {want} latents")]
    DeadMask { got: usize, want: usize },
}

/// Latent nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Activation {
    Relu,
    /// Keep the `k` largest post-ReLU activations of each sample.
    TopK { k: usize },
    /// Keep the `B * k` largest post-ReLU activations of the whole batch.
    BatchTopK { k: usize },
}

impl Activation {
    pub fn k(&self) -> Option<usize> {
        match *self {
            Activation::Relu => None,
            Activation::TopK { k } | Activation::BatchTopK { k } => Some(k),
        }
    }

    pub fn is_topk_family(&self) -> bool {
        !matches!(self, Activation::Relu)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::TopK { .. } => "topk",
            Activation::BatchTopK { .. } => "batch_topk",
        }
    }
}

/// How the sparsity term weights latent activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsityPenalty {
    /// `sum_i z_i * ||W_dec,i||`; invariant to rescaling a latent.
    #[default]
    NormWeightedL1,
    /// `sum_i z_i`; the trainer renormalises decoder rows after each step.
    PlainL1,
}

/// Nested prefix structure with per-level loss weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatryoshkaSpec {
    pub prefixes: Vec<usize>,
    pub betas: Vec<f64>,
    #[serde(default)]
    pub detached_inner: bool,
}

impl MatryoshkaSpec {
    pub fn new(prefixes: Vec<usize>, betas: Vec<f64>, detached_inner: bool) -> Self {
        Self { prefixes, betas, detached_inner }
    }

    pub fn validate(&self, width: usize) -> Result<(), SaeError> {
        if self.prefixes.is_empty() {
            return Err(SaeError::Matryoshka("no prefixes".into()));
        }
        if self.prefixes.len() != self.betas.len() {
            return Err(SaeError::Matryoshka(format!(
                "{} prefixes but {} betas",
                self.prefixes.len(),
                self.betas.len()
            )));
        }
        if self.prefixes[0] == 0 || self.prefixes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SaeError::Matryoshka("prefixes must be strictly increasing and positive".into()));
        }
        if *self.prefixes.last().unwrap() != width {
            return Err(SaeError::Matryoshka(format!(
                "last prefix {} must equal the SAE width {width}",
                self.prefixes.last().unwrap()
            )));
        }
        if let Some(b) = self.betas.iter().find(|b| !(**b >= 0.0)) {
            return Err(SaeError::Matryoshka(format!("beta {b} must be >= 0")));
        }
        Ok(())
    }
}

/// Level layout used by the loss and gradient code: `(start, end, beta)` per level.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Levels {
    pub groups: Vec<(usize, usize, f64)>,
    pub detached: bool,
}

impl Levels {
    pub fn of(params: &SaeParams) -> Self {
        match &params.matryoshka {
            None => Levels { groups: vec![(0, params.width(), 1.0)], detached: false },
            Some(m) => {
                let mut start = 0;
                let groups = m
                    .prefixes
                    .iter()
                    .zip(&m.betas)
                    .map(|(&end, &beta)| {
                        let g = (start, end, beta);
                        start = end;
                        g
                    })
                    .collect();
                Levels { groups, detached: m.detached_inner }
            }
        }
    }
}

/// SAE weights and structure.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams {
    /// `None` for tied SAEs, whose encoder is `w_dec`.
    w_enc: Option<Array2<f64>>,
    pub b_enc: Array1<f64>,
    pub w_dec: Array2<f64>,
    pub b_dec: Array1<f64>,
    pub activation: Activation,
    pub matryoshka: Option<MatryoshkaSpec>,
}

impl SaeParams {
    /// Assembles parameters from raw tensors, checking every shape.
    pub fn from_parts(
        w_enc: Option<Array2<f64>>,
        b_enc: Array1<f64>,
        w_dec: Array2<f64>,
        b_dec: Array1<f64>,
        activation: Activation,
        matryoshka: Option<MatryoshkaSpec>,
    ) -> Result<Self, SaeError> {
        let (l, d) = w_dec.dim();
        if l == 0 || d == 0 {
            return Err(SaeError::Dims(format!("decoder is {l}x{d}")));
        }
        if let Some(we) = &w_enc {
            if we.dim() != (l, d) {
                return Err(SaeError::Dims(format!("encoder {:?} vs decoder {:?}", we.dim(), (l, d))));
            }
        }
        if b_enc.len() != l || b_dec.len() != d {
            return Err(SaeError::Dims(format!(
                "b_enc has {} entries (want {l}), b_dec has {} (want {d})",
                b_enc.len(),
                b_dec.len()
            )));
        }
        if let Some(k) = activation.k() {
            if k == 0 || k > l {
                return Err(SaeError::BadK { k, width: l });
            }
        }
        if let Some(m) = &matryoshka {
            m.validate(l)?;
        }
        Ok(Self { w_enc, b_enc, w_dec, b_dec, activation, matryoshka })
    }

    pub fn width(&self) -> usize {
        self.w_dec.nrows()
    }

    pub fn dims(&self) -> usize {
        self.w_dec.ncols()
    }

    pub fn is_tied(&self) -> bool {
        self.w_enc.is_none()
    }

    /// Encoder rows (`L x D`). For tied SAEs this is the decoder storage itself.
    pub fn w_enc(&self) -> &Array2<f64> {
        self.w_enc.as_ref().unwrap_or(&self.w_dec)
    }

    /// Mutable encoder. Writing through this on a tied SAE moves the decoder too.
    pub fn w_enc_mut(&mut self) -> &mut Array2<f64> {
        match self.w_enc.as_mut() {
            Some(w) => w,
            None => &mut self.w_dec,
        }
    }

    pub(crate) fn untied_encoder_mut(&mut self) -> Option<&mut Array2<f64>> {
        self.w_enc.as_mut()
    }

    /// Sets encoder and decoder row `i` to `direction`, leaving biases alone.
    pub fn set_latent_direction(&mut self, i: usize, direction: ndarray::ArrayView1<f64>) {
        self.w_dec.row_mut(i).assign(&direction);
        if let Some(we) = self.w_enc.as_mut() {
            we.row_mut(i).assign(&direction);
        }
    }

    /// Divides every nonzero decoder row by its norm.
    pub fn normalize_decoder(&mut self) {
        for mut row in self.w_dec.axis_iter_mut(Axis(0)) {
            let n = linalg::norm(row.view());
            if n > 0.0 {
                row /= n;
            }
        }
    }

    /// Pre-activations `(X - b_dec) W_enc^T + b_enc`.
    pub fn pre_activations(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, SaeError> {
        if x.ncols() != self.dims() {
            return Err(SaeError::InputDims { got: x.ncols(), want: self.dims() });
        }
        let centered = &x - &self.b_dec;
        Ok(centered.dot(&self.w_enc().t()) + &self.b_enc)
    }

    /// Latent activations for a batch.
    pub fn encode(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, SaeError> {
        let pre = self.pre_activations(x)?;
        Ok(apply_activation(&pre, self.activation))
    }

    /// Reconstruction `Z W_dec + b_dec`.
    pub fn decode(&self, z: ArrayView2<f64>) -> Array2<f64> {
        z.dot(&self.w_dec) + &self.b_dec
    }

    /// `(Z, Xhat)` for a batch.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>), SaeError> {
        let z = self.encode(x)?;
        let xhat = self.decode(z.view());
        Ok((z, xhat))
    }
}

/// Fresh SAE with encoder == decoder, rows of norm `init_norm` in random directions.
pub fn init_sae(
    dims: usize,
    width: usize,
    activation: Activation,
    tied: bool,
    matryoshka: Option<MatryoshkaSpec>,
    init_norm: f64,
    seed: u64,
) -> Result<SaeParams, SaeError> {
    if dims == 0 || width == 0 {
        return Err(SaeError::Dims(format!("D = {dims}, L = {width}")));
    }
    if !(init_norm >= 0.0) {
        return Err(SaeError::Dims(format!("init norm {init_norm} must be >= 0")));
    }
    let mut rng = stream_rng(seed, STREAM_INIT);
    let w = random_rows(&mut rng, width, dims, init_norm);
    let w_enc = if tied { None } else { Some(w.clone()) };
    SaeParams::from_parts(
        w_enc,
        Array1::zeros(width),
        w,
        Array1::zeros(dims),
        activation,
        matryoshka,
    )
}

fn random_rows(rng: &mut rand_chacha::ChaCha8Rng, rows: usize, dims: usize, row_norm: f64) -> Array2<f64> {
    let mut w = Array2::from_shape_simple_fn((rows, dims), || rng.sample::<f64, _>(StandardNormal));
    for mut row in w.axis_iter_mut(Axis(0)) {
        let n = linalg::norm(row.view());
        if row_norm == 0.0 || n == 0.0 {
            row.fill(0.0);
        } else {
            row *= row_norm / n;
        }
    }
    w
}

/// Appends `n_new` latents with encoder row == decoder row of norm `init_norm`.
///
/// Existing latents are copied bit for bit. For matryoshka SAEs the outermost
/// prefix grows to the new width.
pub fn extend_sae(params: &SaeParams, n_new: usize, init_norm: f64, seed: u64) -> SaeParams {
    if n_new == 0 {
        return params.clone();
    }
    let (l, d) = (params.width(), params.dims());
    let mut rng = stream_rng(seed, STREAM_EXTEND);
    let fresh = random_rows(&mut rng, n_new, d, init_norm);
    let grow = |old: &Array2<f64>| {
        let mut w = Array2::zeros((l + n_new, d));
        w.slice_mut(s![..l, ..]).assign(old);
        w.slice_mut(s![l.., ..]).assign(&fresh);
        w
    };
    let mut b_enc = Array1::zeros(l + n_new);
    b_enc.slice_mut(s![..l]).assign(&params.b_enc);
    let matryoshka = params.matryoshka.clone().map(|mut m| {
        if let Some(last) = m.prefixes.last_mut() {
            *last = l + n_new;
        }
        m
    });
    SaeParams {
        w_enc: params.w_enc.as_ref().map(grow),
        b_enc,
        w_dec: grow(&params.w_dec),
        b_dec: params.b_dec.clone(),
        activation: params.activation,
        matryoshka,
    }
}

/// Orders `(value, latent)` pairs: larger value first, lower latent index on ties.
#[inline]
fn selection_order(a: (f64, usize), b: (f64, usize)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Applies ReLU and, for the TopK family, the selection rule.
pub fn apply_activation(pre: &Array2<f64>, activation: Activation) -> Array2<f64> {
    let mut z = pre.mapv(|v| if v > 0.0 { v } else { 0.0 });
    match activation {
        Activation::Relu => {}
        Activation::TopK { k } => {
            let l = z.ncols();
            if k < l {
                let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(l);
                for mut row in z.axis_iter_mut(Axis(0)) {
                    scratch.clear();
                    scratch.extend(row.iter().copied().zip(0..l));
                    scratch.select_nth_unstable_by(k - 1, |a, b| selection_order(*a, *b));
                    let cut = scratch[k - 1];
                    for (i, v) in row.iter_mut().enumerate() {
                        if selection_order((*v, i), cut) == std::cmp::Ordering::Greater {
                            *v = 0.0;
                        }
                    }
                }
            }
        }
        Activation::BatchTopK { k } => {
            let (b, l) = z.dim();
            let keep = b * k;
            if keep < b * l {
                // ties: lower latent index first, then lower row
                let mut all: Vec<(f64, usize)> = Vec::with_capacity(b * l);
                for r in 0..b {
                    for i in 0..l {
                        all.push((z[[r, i]], i * b + r));
                    }
                }
                all.select_nth_unstable_by(keep - 1, |a, c| selection_order(*a, *c));
                let cut = all[keep - 1];
                for r in 0..b {
                    for i in 0..l {
                        if selection_order((z[[r, i]], i * b + r), cut) == std::cmp::Ordering::Greater {
                            z[[r, i]] = 0.0;
                        }
                    }
                }
            }
        }
    }
    z
}

/// Dead-latent auxiliary reconstruction settings for one loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxInputs {
    /// `true` for latents that count as dead.
    pub dead: Vec<bool>,
    /// Number of dead latents each sample may use to model the residual.
    pub k_aux: usize,
}

/// Coefficients and options shared by the loss and its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOptions {
    pub l1_coeff: f64,
    pub aux_coeff: f64,
    pub penalty: SparsityPenalty,
    pub aux: Option<AuxInputs>,
}

impl LossOptions {
    pub fn new(l1_coeff: f64) -> Self {
        Self { l1_coeff, aux_coeff: 0.0, penalty: SparsityPenalty::default(), aux: None }
    }

    pub(crate) fn validate(&self, width: usize) -> Result<(), SaeError> {
        if !(self.l1_coeff >= 0.0) {
            return Err(SaeError::NegativeCoefficient { name: "l1_coeff", value: self.l1_coeff });
        }
        if !(self.aux_coeff >= 0.0) {
            return Err(SaeError::NegativeCoefficient { name: "aux_coeff", value: self.aux_coeff });
        }
        if let Some(aux) = &self.aux {
            if aux.dead.len() != width {
                return Err(SaeError::DeadMask { got: aux.dead.len(), want: width });
            }
        }
        Ok(())
    }

    /// True when the aux term can contribute (coefficient, k and a dead latent).
    pub(crate) fn aux_active(&self) -> bool {
        self.aux_coeff > 0.0
            && self.aux.as_ref().is_some_and(|a| a.k_aux > 0 && a.dead.iter().any(|&d| d))
    }
}

/// Loss value split into its parts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Reconstruction error per matryoshka level (one entry without matryoshka).
    pub mse: Vec<f64>,
    /// Sparsity term per level, before multiplying by the L1 coefficient.
    pub sparsity: Vec<f64>,
    pub betas: Vec<f64>,
    pub aux: f64,
    pub l1_coeff: f64,
    pub aux_coeff: f64,
    /// Mean number of nonzero latents per sample.
    pub l0: f64,
}

impl LossBreakdown {
    /// `sum_k beta_k (mse_k + l1 * sparsity_k) + aux_coeff * aux`.
    pub fn recompose(&self) -> f64 {
        let levels: f64 = self
            .betas
            .iter()
            .zip(self.mse.iter().zip(&self.sparsity))
            .map(|(b, (m, s))| b * (m + self.l1_coeff * s))
            .sum();
        levels + self.aux_coeff * self.aux
    }

    /// Reconstruction error of the full SAE (outermost level).
    pub fn outer_mse(&self) -> f64 {
        *self.mse.last().unwrap_or(&0.0)
    }

    /// Sparsity of the full SAE (outermost level).
    pub fn outer_sparsity(&self) -> f64 {
        *self.sparsity.last().unwrap_or(&0.0)
    }
}

/// Loss of `params` on batch `x`.
pub fn compute_loss(params: &SaeParams, x: ArrayView2<f64>, opts: &LossOptions) -> Result<LossBreakdown, SaeError> {
    surrogate_loss(params, params, x, opts)
}

/// Loss where every stop-gradient path reads `frozen` instead of `live`.
///
/// Two quantities are treated as constants during training: in detached
/// matryoshka mode, the inner-prefix reconstruction seen by each outer level;
/// and the residual `x - xhat` that dead latents try to model in the aux term.
/// With `frozen == live` this is exactly [`compute_loss`], and its gradient
/// with respect to `live` is what the trainer descends.
pub fn surrogate_loss(
    live: &SaeParams,
    frozen: &SaeParams,
    x: ArrayView2<f64>,
    opts: &LossOptions,
) -> Result<LossBreakdown, SaeError> {
    opts.validate(live.width())?;
    let b = x.nrows();
    let inv_b = if b == 0 { 0.0 } else { 1.0 / b as f64 };
    let levels = Levels::of(live);
    let z = live.encode(x)?;
    let weights = penalty_weights(live, opts.penalty);

    let frozen_levels = if levels.detached || opts.aux_active() {
        Some(level_reconstructions(frozen, &frozen.encode(x)?, &levels, opts.penalty))
    } else {
        None
    };

    let mut mse = Vec::with_capacity(levels.groups.len());
    let mut sparsity = Vec::with_capacity(levels.groups.len());
    let mut recon = Array2::zeros(x.raw_dim());
    recon += &live.b_dec;
    let mut prefix_sparsity = Array1::<f64>::zeros(b);
    for (k, &(start, end, _)) in levels.groups.iter().enumerate() {
        let zg = z.slice(s![.., start..end]);
        let group_recon = zg.dot(&live.w_dec.slice(s![start..end, ..]));
        let group_sparsity = zg.dot(&weights.slice(s![start..end]));
        if levels.detached && k > 0 {
            let (frozen_recon, frozen_sparsity) = &frozen_levels.as_ref().unwrap()[k - 1];
            recon = frozen_recon + &group_recon;
            prefix_sparsity = frozen_sparsity + &group_sparsity;
        } else {
            recon += &group_recon;
            prefix_sparsity += &group_sparsity;
        }
        let err = &x - &recon;
        mse.push((&err * &err).sum() * inv_b);
        sparsity.push(prefix_sparsity.sum() * inv_b);
    }

    let aux = if opts.aux_active() {
        let aux_in = opts.aux.as_ref().unwrap();
        let (frozen_recon, _) = frozen_levels.as_ref().unwrap().last().unwrap();
        let residual = &x - frozen_recon;
        let z_aux = aux_activations(live, x, &aux_in.dead, aux_in.k_aux)?;
        let err = residual - z_aux.dot(&live.w_dec);
        (&err * &err).sum() * inv_b
    } else {
        0.0
    };

    let betas: Vec<f64> = levels.groups.iter().map(|g| g.2).collect();
    let l0 = z.iter().filter(|&&v| v != 0.0).count() as f64 * inv_b;
    let sparsity = if live.activation.is_topk_family() { vec![0.0; sparsity.len()] } else { sparsity };
    let mut out = LossBreakdown {
        total: 0.0,
        mse,
        sparsity,
        betas,
        aux,
        l1_coeff: opts.l1_coeff,
        aux_coeff: opts.aux_coeff,
        l0,
    };
    out.total = out.recompose();
    Ok(out)
}

/// Per-latent sparsity weight: decoder norm or 1.
pub(crate) fn penalty_weights(params: &SaeParams, penalty: SparsityPenalty) -> Array1<f64> {
    match penalty {
        SparsityPenalty::NormWeightedL1 => Array1::from(linalg::row_norms(params.w_dec.view())),
        SparsityPenalty::PlainL1 => Array1::ones(params.width()),
    }
}

/// Cumulative reconstruction and per-sample sparsity after each level,
/// without any detaching.
pub(crate) fn level_reconstructions(
    params: &SaeParams,
    z: &Array2<f64>,
    levels: &Levels,
    penalty: SparsityPenalty,
) -> Vec<(Array2<f64>, Array1<f64>)> {
    let weights = penalty_weights(params, penalty);
    let mut out = Vec::with_capacity(levels.groups.len());
    let mut recon = Array2::zeros((z.nrows(), params.dims()));
    recon += &params.b_dec;
    let mut sp = Array1::zeros(z.nrows());
    for &(start, end, _) in &levels.groups {
        let zg = z.slice(s![.., start..end]);
        recon += &zg.dot(&params.w_dec.slice(s![start..end, ..]));
        sp = sp + zg.dot(&weights.slice(s![start..end]));
        out.push((recon.clone(), sp.clone()));
    }
    out
}

/// Post-ReLU activations of dead latents, keeping each sample's top `k_aux`.
pub(crate) fn aux_activations(
    params: &SaeParams,
    x: ArrayView2<f64>,
    dead: &[bool],
    k_aux: usize,
) -> Result<Array2<f64>, SaeError> {
    let pre = params.pre_activations(x)?;
    let mut z = pre.mapv(|v| if v > 0.0 { v } else { 0.0 });
    for (i, &d) in dead.iter().enumerate() {
        if !d {
            z.column_mut(i).fill(0.0);
        }
    }
    let n_dead = dead.iter().filter(|&&d| d).count();
    if k_aux < n_dead {
        z = apply_activation(&z, Activation::TopK { k: k_aux });
    }
    Ok(z)
}
