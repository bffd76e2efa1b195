//! Independent reference implementations used by the integration tests and
//! the acceptance harness. Everything here is written with plain loops over
//! the public parameter tensors and shares no code with the library's loss or
//! gradient paths.

#![allow(dead_code)]

use hedgelab::sae::{init_sae, AuxInputs};
use hedgelab::trainer::Gradients;
use hedgelab::{Activation, LossOptions, MatryoshkaSpec, SaeParams, SparsityPenalty};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Pre-activations `(x - b_dec) . w_enc_i + b_enc_i`, one row per sample.
pub fn pre_activations(p: &SaeParams, x: &Array2<f64>) -> Vec<Vec<f64>> {
    let we = p.w_enc();
    let (l, d) = (p.width(), p.dims());
    (0..x.nrows())
        .map(|r| {
            (0..l)
                .map(|i| {
                    let mut acc = p.b_enc[i];
                    for j in 0..d {
                        acc += (x[[r, j]] - p.b_dec[j]) * we[[i, j]];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// Indices ordered by descending value, lower index first on ties.
fn ranked(values: &[(f64, usize)]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].0.partial_cmp(&values[a].0).unwrap().then(values[a].1.cmp(&values[b].1)));
    idx
}

fn topk_rows(z: &mut [Vec<f64>], k: usize) {
    for row in z.iter_mut() {
        let vals: Vec<(f64, usize)> = row.iter().copied().zip(0..).collect();
        for &i in ranked(&vals).iter().skip(k) {
            row[i] = 0.0;
        }
    }
}

/// Latent activations following the activation's selection rule.
pub fn encode(p: &SaeParams, x: &Array2<f64>) -> Vec<Vec<f64>> {
    let mut z: Vec<Vec<f64>> =
        pre_activations(p, x).into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect();
    match p.activation {
        Activation::Relu => {}
        Activation::TopK { k } => topk_rows(&mut z, k),
        Activation::BatchTopK { k } => {
            let b = z.len();
            let l = p.width();
            let mut flat = Vec::with_capacity(b * l);
            for (r, row) in z.iter().enumerate() {
                for (i, &v) in row.iter().enumerate() {
                    flat.push((v, i * b + r));
                }
            }
            for &n in ranked(&flat).iter().skip(b * k) {
                let (i, r) = (flat[n].1 / b, flat[n].1 % b);
                z[r][i] = 0.0;
            }
        }
    }
    z
}

fn row_norm(w: &Array2<f64>, i: usize) -> f64 {
    w.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn weight(p: &SaeParams, penalty: SparsityPenalty, i: usize) -> f64 {
    match penalty {
        SparsityPenalty::NormWeightedL1 => row_norm(&p.w_dec, i),
        SparsityPenalty::PlainL1 => 1.0,
    }
}

fn levels(p: &SaeParams) -> (Vec<(usize, usize, f64)>, bool) {
    match &p.matryoshka {
        None => (vec![(0, p.width(), 1.0)], false),
        Some(m) => {
            let mut out = Vec::new();
            let mut start = 0;
            for (&end, &beta) in m.prefixes.iter().zip(&m.betas) {
                out.push((start, end, beta));
                start = end;
            }
            (out, m.detached_inner)
        }
    }
}

/// Cumulative per-sample reconstruction and sparsity after each level.
fn cumulative(p: &SaeParams, z: &[Vec<f64>], penalty: SparsityPenalty) -> Vec<(Vec<Vec<f64>>, Vec<f64>)> {
    let (groups, _) = levels(p);
    let d = p.dims();
    let mut recon: Vec<Vec<f64>> = z.iter().map(|_| p.b_dec.to_vec()).collect();
    let mut sp = vec![0.0; z.len()];
    let mut out = Vec::new();
    for (start, end, _) in groups {
        for (r, zr) in z.iter().enumerate() {
            for i in start..end {
                for j in 0..d {
                    recon[r][j] += zr[i] * p.w_dec[[i, j]];
                }
                sp[r] += zr[i] * weight(p, penalty, i);
            }
        }
        out.push((recon.clone(), sp.clone()));
    }
    out
}

fn aux_active(opts: &LossOptions) -> bool {
    opts.aux_coeff > 0.0 && opts.aux.as_ref().is_some_and(|a| a.k_aux > 0 && a.dead.iter().any(|&d| d))
}

/// Reference loss with every stop-gradient input read from `frozen`.
pub fn oracle_loss(live: &SaeParams, frozen: &SaeParams, x: &Array2<f64>, opts: &LossOptions) -> f64 {
    let (b, d) = x.dim();
    let topk = live.activation.k().is_some();
    let (groups, detached) = levels(live);
    let z = encode(live, x);
    let frozen_cum = cumulative(frozen, &encode(frozen, x), opts.penalty);
    let mut total = 0.0;
    let mut recon: Vec<Vec<f64>> = (0..b).map(|_| live.b_dec.to_vec()).collect();
    let mut sp = vec![0.0; b];
    for (k, &(start, end, beta)) in groups.iter().enumerate() {
        if detached && k > 0 {
            recon = frozen_cum[k - 1].0.clone();
            sp = frozen_cum[k - 1].1.clone();
        }
        for r in 0..b {
            for i in start..end {
                for j in 0..d {
                    recon[r][j] += z[r][i] * live.w_dec[[i, j]];
                }
                sp[r] += z[r][i] * weight(live, opts.penalty, i);
            }
        }
        let mut mse = 0.0;
        for r in 0..b {
            for j in 0..d {
                let e = x[[r, j]] - recon[r][j];
                mse += e * e;
            }
        }
        let sparsity = if topk { 0.0 } else { sp.iter().sum::<f64>() };
        total += beta * (mse + opts.l1_coeff * sparsity) / b as f64;
    }
    if aux_active(opts) {
        let aux = opts.aux.as_ref().unwrap();
        let final_recon = &frozen_cum.last().unwrap().0;
        let mut za: Vec<Vec<f64>> = pre_activations(live, x)
            .into_iter()
            .map(|row| row.iter().enumerate().map(|(i, v)| if aux.dead[i] { v.max(0.0) } else { 0.0 }).collect())
            .collect();
        topk_rows(&mut za, aux.k_aux);
        let mut acc = 0.0;
        for r in 0..b {
            for j in 0..d {
                let mut e = x[[r, j]] - final_recon[r][j];
                for i in 0..live.width() {
                    e -= za[r][i] * live.w_dec[[i, j]];
                }
                acc += e * e;
            }
        }
        total += opts.aux_coeff * acc / b as f64;
    }
    total
}

fn tensor_mut(p: &mut SaeParams, t: usize) -> &mut [f64] {
    match t {
        0 => p.w_enc_mut().as_slice_mut().unwrap(),
        1 => p.b_enc.as_slice_mut().unwrap(),
        2 => p.w_dec.as_slice_mut().unwrap(),
        _ => p.b_dec.as_slice_mut().unwrap(),
    }
}

/// Central-difference gradient of [`oracle_loss`], flattened in the order of
/// `Gradients::tensors` (the encoder is skipped for tied SAEs).
pub fn fd_gradient(p: &SaeParams, x: &Array2<f64>, opts: &LossOptions, h: f64) -> Vec<f64> {
    let first = if p.is_tied() { 1 } else { 0 };
    let mut out = Vec::new();
    for t in first..4 {
        let n = tensor_mut(&mut p.clone(), t).len();
        for idx in 0..n {
            let mut plus = p.clone();
            let mut minus = p.clone();
            tensor_mut(&mut plus, t)[idx] += h;
            tensor_mut(&mut minus, t)[idx] -= h;
            out.push((oracle_loss(&plus, p, x, opts) - oracle_loss(&minus, p, x, opts)) / (2.0 * h));
        }
    }
    out
}

pub fn flatten(g: &Gradients) -> Vec<f64> {
    g.tensors().iter().flat_map(|t| t.iter().copied()).collect()
}

/// `||a - b|| / max(||a||, ||b||)`.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    n(&diff) / n(a).max(n(b)).max(1e-12)
}

/// Smallest gap between any pre-activation and zero or between two
/// pre-activations competing in one selection; finite differences are only
/// meaningful when this is well above the step size.
pub fn selection_margin(p: &SaeParams, x: &Array2<f64>, opts: &LossOptions) -> f64 {
    let pre = pre_activations(p, x);
    let mut margin = f64::INFINITY;
    for row in &pre {
        for v in row {
            margin = margin.min(v.abs());
        }
    }
    let gaps = |vals: &mut Vec<f64>| {
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        vals.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
    };
    match p.activation {
        Activation::Relu => {}
        Activation::TopK { .. } => {
            for row in &pre {
                margin = margin.min(gaps(&mut row.clone()));
            }
        }
        Activation::BatchTopK { .. } => {
            margin = margin.min(gaps(&mut pre.iter().flatten().copied().collect()));
        }
    }
    if aux_active(opts) {
        let dead = &opts.aux.as_ref().unwrap().dead;
        for row in &pre {
            let mut v: Vec<f64> = row.iter().zip(dead).filter(|(_, &d)| d).map(|(v, _)| *v).collect();
            margin = margin.min(gaps(&mut v));
        }
    }
    margin
}

/// Loss variants exercised by the gradient oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    ReluL1,
    PlainL1,
    Tied,
    TopK,
    BatchTopK,
    Matryoshka,
    Balance,
    Detached,
    Aux,
}

impl Mode {
    pub const ALL: [Mode; 9] = [
        Mode::ReluL1,
        Mode::PlainL1,
        Mode::Tied,
        Mode::TopK,
        Mode::BatchTopK,
        Mode::Matryoshka,
        Mode::Balance,
        Mode::Detached,
        Mode::Aux,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::ReluL1 => "relu_l1",
            Mode::PlainL1 => "plain_l1",
            Mode::Tied => "tied",
            Mode::TopK => "topk",
            Mode::BatchTopK => "batch_topk",
            Mode::Matryoshka => "matryoshka",
            Mode::Balance => "balance_matryoshka",
            Mode::Detached => "detached",
            Mode::Aux => "aux_k",
        }
    }
}

fn random_prefixes(rng: &mut ChaCha8Rng, l: usize) -> Vec<usize> {
    let inner = rng.random_range(1..l);
    if inner + 1 < l && rng.random_bool(0.5) {
        let mid = rng.random_range(inner + 1..l);
        vec![inner, mid, l]
    } else {
        vec![inner, l]
    }
}

/// A random instance with `D <= 8`, `L <= 6` for `mode`.
pub fn random_instance(mode: Mode, seed: u64) -> (SaeParams, Array2<f64>, LossOptions) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(3..=8);
    let l = rng.random_range(2..=6);
    let b = rng.random_range(3..=6);
    let activation = match mode {
        Mode::TopK | Mode::Aux => Activation::TopK { k: rng.random_range(1..l) },
        Mode::BatchTopK => Activation::BatchTopK { k: rng.random_range(1..l) },
        _ => Activation::Relu,
    };
    let matryoshka = match mode {
        Mode::Matryoshka => {
            let pre = random_prefixes(&mut rng, l);
            Some(MatryoshkaSpec::new(pre.clone(), vec![1.0; pre.len()], false))
        }
        Mode::Balance => {
            let pre = random_prefixes(&mut rng, l);
            let betas = (0..pre.len()).map(|_| rng.random_range(0.05..1.0)).collect();
            Some(MatryoshkaSpec::new(pre, betas, false))
        }
        Mode::Detached => {
            let pre = random_prefixes(&mut rng, l);
            Some(MatryoshkaSpec::new(pre.clone(), vec![1.0; pre.len()], true))
        }
        _ => None,
    };
    let tied = mode == Mode::Tied;
    let mut p = init_sae(d, l, activation, tied, matryoshka, 1.0, seed).unwrap();
    if !tied {
        for v in p.w_enc_mut().iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    for v in p.w_dec.iter_mut() {
        *v *= rng.random_range(0.5..1.5);
    }
    for v in p.b_enc.iter_mut() {
        *v = rng.random_range(-0.2..0.3);
    }
    for v in p.b_dec.iter_mut() {
        *v = rng.random_range(-0.2..0.2);
    }
    let x = Array2::from_shape_simple_fn((b, d), || rng.random_range(-1.0..1.5));
    let mut opts = LossOptions::new(rng.random_range(0.05..0.5));
    if mode == Mode::PlainL1 {
        opts.penalty = SparsityPenalty::PlainL1;
    }
    if mode == Mode::Aux {
        let mut dead: Vec<bool> = (0..l).map(|_| rng.random_bool(0.5)).collect();
        dead[l - 1] = true;
        let n_dead = dead.iter().filter(|&&v| v).count();
        opts.aux_coeff = rng.random_range(0.1..1.0);
        opts.aux = Some(AuxInputs { dead, k_aux: rng.random_range(1..=n_dead) });
    }
    (p, x, opts)
}
