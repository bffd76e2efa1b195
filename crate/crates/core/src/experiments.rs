//! Config-driven experiment runner.
//!
//! Each seed runs independently (in parallel); its artifacts go under
//! `seed_<s>/`. After all seeds finish, the driver writes `metrics.csv`
//! (long form), `aggregate.csv` (mean and sample std per variant and metric)
//! and `manifest.json`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::{
    self, alignment, hedging_degree, loss_curve, AlignmentReport, ClassifyThresholds, HedgingDegreeReport,
};
use crate::config::{config_hash, ConfigError, ExperimentConfig, ExperimentKind, FeaturesSection, SaeSection};
use crate::feature_model::{FeatureBasis, FiringRule};
use crate::io::checkpoint::{write_checkpoint, Checkpoint};
use crate::io::csv::{fmt_float, Table};
use crate::io::stream::StreamReader;
use crate::rng::{stream_rng, STREAM_CONTINUE, STREAM_DATA};
use crate::sae::{init_sae, MatryoshkaSpec, SaeParams};
use crate::trainer::{
    continue_train_pair, init_to_features, train, BatchSource, SyntheticSource, TrainConfig, TrainError, TrainerState,
    TrainingLog,
};

/// One scalar result.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metric {
    pub seed: Option<u64>,
    pub variant: String,
    pub metric: String,
    pub value: f64,
}

/// Files and metrics produced by one unit of work.
#[derive(Debug, Default)]
pub struct Outputs {
    pub tables: Vec<(PathBuf, Table)>,
    pub blobs: Vec<(PathBuf, Vec<u8>)>,
    pub metrics: Vec<Metric>,
}

impl Outputs {
    fn metric(&mut self, seed: Option<u64>, variant: &str, metric: impl Into<String>, value: f64) {
        self.metrics.push(Metric { seed, variant: variant.to_string(), metric: metric.into(), value });
    }

    fn extend(&mut self, other: Outputs) {
        self.tables.extend(other.tables);
        self.blobs.extend(other.blobs);
        self.metrics.extend(other.metrics);
    }

    fn write(&self, root: &Path) -> std::io::Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        for (rel, t) in &self.tables {
            let path = root.join(rel);
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            t.write(&path)?;
            written.push(rel.clone());
        }
        for (rel, bytes) in &self.blobs {
            let path = root.join(rel);
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(&path, bytes)?;
            written.push(rel.clone());
        }
        Ok(written)
    }
}

/// A toy SAE after training, with its alignment against the true features.
#[derive(Debug, Clone)]
pub struct ToyRun {
    pub basis: FeatureBasis,
    pub state: TrainerState,
    pub log: TrainingLog,
    pub report: AlignmentReport,
}

/// Builds a fresh SAE of `width` latents from the config section.
pub fn build_sae(
    sae: &SaeSection,
    width: usize,
    dims: usize,
    matryoshka: Option<MatryoshkaSpec>,
    basis: Option<&FeatureBasis>,
    seed: u64,
) -> Result<SaeParams, TrainError> {
    let mut params = init_sae(dims, width, sae.activation, sae.tied, matryoshka, sae.init_norm, seed)?;
    if let (Some(init), Some(basis)) = (&sae.init_to_features, basis) {
        let dirs = ndarray::stack(ndarray::Axis(0), &init.iter().map(|&j| basis.feature(j)).collect::<Vec<_>>())
            .expect("feature rows share a length");
        init_to_features(&mut params, dirs.view());
        params.b_enc.fill(0.0);
        params.b_dec.fill(0.0);
    }
    Ok(params)
}

/// Matryoshka spec for `width`, with the last prefix set to the width.
pub fn matryoshka_for(sae: &SaeSection, width: usize) -> Option<MatryoshkaSpec> {
    sae.matryoshka.as_ref().map(|m| {
        let mut m = m.clone();
        if let Some(last) = m.prefixes.last_mut() {
            *last = width;
        }
        m
    })
}

/// Trains one toy SAE with the standard seed streams.
pub fn train_toy(
    features: &FeaturesSection,
    sae: &SaeSection,
    width: usize,
    matryoshka: Option<MatryoshkaSpec>,
    train_cfg: &TrainConfig,
    thresholds: ClassifyThresholds,
    seed: u64,
) -> Result<ToyRun, TrainError> {
    let basis = features.basis(seed).map_err(|e| TrainError::Config(e.to_string()))?;
    let firing = features.firing().map_err(|e| TrainError::Config(e.to_string()))?;
    let params = build_sae(sae, width, features.dims, matryoshka, Some(&basis), seed)?;
    let mut source = SyntheticSource::new(basis.clone(), firing, stream_rng(seed, STREAM_DATA))?;
    let (state, log) = train(&mut source, train_cfg, params)?;
    let mut report = alignment(&state.params, &basis).map_err(|e| TrainError::Config(e.to_string()))?;
    report.labels = analysis::classify(&report, thresholds);
    Ok(ToyRun { basis, state, log, report })
}

/// Base and extended SAE after continued training, with their hedging degree.
#[derive(Debug, Clone)]
pub struct HedgingRun {
    pub base: TrainerState,
    pub extended: TrainerState,
    pub report: HedgingDegreeReport,
}

/// Trains a base SAE on `source`, then extends it and continues both on
/// `continue_source`, and measures the hedging degree of the pair.
#[allow(clippy::too_many_arguments)]
pub fn hedging_experiment(
    params: SaeParams,
    source: &mut dyn BatchSource,
    continue_source: &mut dyn BatchSource,
    train_cfg: &TrainConfig,
    n_new: usize,
    continue_samples: u64,
    extend_init_norm: f64,
    random_draws: usize,
    seed: u64,
) -> Result<HedgingRun, TrainError> {
    let (state0, _) = train(source, train_cfg, params)?;
    let pair = continue_train_pair(&state0, n_new, extend_init_norm, seed, train_cfg, continue_samples, continue_source)?;
    let report = hedging_degree(&pair.base.params, &pair.extended.params, n_new, seed, random_draws)
        .map_err(|e| TrainError::Config(e.to_string()))?;
    Ok(HedgingRun { base: pair.base, extended: pair.extended, report })
}

/// Metric prefix naming the inner loss weight of a balance variant.
pub fn beta_variant(beta: Option<f64>) -> String {
    match beta {
        Some(b) => format!("beta_{}", fmt_float(b)),
        None => "detached".into(),
    }
}

/// Inner levels get weight `beta^(depth)` (one inner level: just `beta`);
/// `None` means all weights 1 with detached inner levels.
pub fn balance_spec(base: &MatryoshkaSpec, beta: Option<f64>) -> MatryoshkaSpec {
    let n = base.prefixes.len();
    match beta {
        Some(b) => {
            MatryoshkaSpec::new(base.prefixes.clone(), (0..n).map(|m| b.powi((n - 1 - m) as i32)).collect(), false)
        }
        None => MatryoshkaSpec::new(base.prefixes.clone(), vec![1.0; n], true),
    }
}

/// Balance metrics of a trained toy: the parent latent's encoder components
/// on child features, and off-target maxima over every latent.
pub fn balance_metrics(report: &AlignmentReport, rules: &[FiringRule], parent: usize) -> Vec<(String, f64)> {
    let children: Vec<usize> = rules
        .iter()
        .enumerate()
        .filter(|(_, r)| matches!(r, FiringRule::Conditional { parent: p, .. } if *p == parent))
        .map(|(j, _)| j)
        .collect();
    let mut out = vec![
        ("max_off_target".to_string(), report.max_off_target()),
        ("max_off_target_decoder".to_string(), report.max_off_target_decoder()),
    ];
    if let Some(pl) = report.latent_for(parent) {
        let enc: Vec<f64> = children.iter().map(|&c| report.encoder_cos[[pl, c]]).collect();
        let dec: Vec<f64> = children.iter().map(|&c| report.decoder_cos[[pl, c]]).collect();
        out.push(("parent_enc_child_min".into(), enc.iter().copied().fold(f64::INFINITY, f64::min)));
        out.push(("parent_enc_child_max".into(), enc.iter().copied().fold(f64::NEG_INFINITY, f64::max)));
        out.push(("parent_dec_child_max_abs".into(), dec.iter().fold(0.0, |a, v| a.max(v.abs()))));
    }
    out
}

fn toy_metrics(out: &mut Outputs, seed: u64, variant: &str, run: &ToyRun) {
    let r = &run.report;
    let s = Some(seed);
    out.metric(s, variant, "min_matched_decoder_cos", r.min_matched_decoder_cos());
    out.metric(s, variant, "max_off_target", r.max_off_target());
    out.metric(s, variant, "max_off_target_decoder", r.max_off_target_decoder());
    out.metric(s, variant, "bias_norm", r.bias_norm);
    if let Some(last) = run.log.rows.last() {
        out.metric(s, variant, "final_mse", last.mse);
        out.metric(s, variant, "final_l0", last.l0);
    }
    let n = r.decoder_cos.ncols();
    for j in 0..n {
        out.metric(s, variant, format!("bias_proj_f{j}"), r.bias_projection[j]);
        let cos = if r.bias_norm > 0.0 { r.bias_projection[j] / r.bias_norm } else { 0.0 };
        out.metric(s, variant, format!("bias_cos_f{j}"), cos);
    }
    if n <= 8 {
        for i in 0..r.width() {
            let name = match r.matching[i] {
                Some(m) => format!("f{m}"),
                None => format!("l{i}"),
            };
            for j in 0..n {
                out.metric(s, variant, format!("enc_{name}_f{j}"), r.encoder_cos[[i, j]]);
                out.metric(s, variant, format!("dec_{name}_f{j}"), r.decoder_cos[[i, j]]);
            }
        }
    }
}

fn toy_artifacts(out: &mut Outputs, dir: &Path, variant: &str, run: &ToyRun, train_cfg: &TrainConfig, seed: u64) {
    out.tables.push((dir.join(format!("{variant}_alignment.csv")), run.report.cosine_table()));
    out.tables.push((dir.join(format!("{variant}_bias.csv")), run.report.bias_table()));
    out.tables.push((dir.join(format!("{variant}_log.csv")), run.log.table()));
    let ckpt = Checkpoint::from_state(&run.state, train_cfg.l1_coeff, seed, false);
    out.blobs.push((dir.join(format!("{variant}.saec")), write_checkpoint(&ckpt)));
}

fn seed_dir(seed: u64) -> PathBuf {
    PathBuf::from(format!("seed_{seed}"))
}

fn toy_seed(cfg: &ExperimentConfig, seed: u64) -> Result<Outputs, TrainError> {
    let (f, sae, tc) = (cfg.features.as_ref().unwrap(), cfg.sae.as_ref().unwrap(), cfg.train.as_ref().unwrap());
    let mut out = Outputs::default();
    for &w in &sae.widths {
        let run = train_toy(f, sae, w, matryoshka_for(sae, w), tc, cfg.thresholds(), seed)?;
        let variant = format!("w{w}");
        toy_metrics(&mut out, seed, &variant, &run);
        toy_artifacts(&mut out, &seed_dir(seed), &variant, &run, tc, seed);
    }
    Ok(out)
}

fn balance_seed(cfg: &ExperimentConfig, seed: u64) -> Result<Outputs, TrainError> {
    let (f, sae, tc) = (cfg.features.as_ref().unwrap(), cfg.sae.as_ref().unwrap(), cfg.train.as_ref().unwrap());
    let bal = cfg.balance.as_ref().unwrap();
    let mut variants: Vec<Option<f64>> = bal.betas.iter().copied().map(Some).collect();
    if bal.include_detached {
        variants.push(None);
    }
    let mut out = Outputs::default();
    for &w in &sae.widths {
        let base = matryoshka_for(sae, w).expect("validated");
        for &beta in &variants {
            let spec = balance_spec(&base, beta);
            let run = train_toy(f, sae, w, Some(spec), tc, cfg.thresholds(), seed)?;
            let variant = if sae.widths.len() > 1 {
                format!("w{w}_{}", beta_variant(beta))
            } else {
                beta_variant(beta)
            };
            toy_metrics(&mut out, seed, &variant, &run);
            for (name, v) in balance_metrics(&run.report, &f.rules, bal.parent) {
                out.metric(Some(seed), &variant, name, v);
            }
            toy_artifacts(&mut out, &seed_dir(seed), &variant, &run, tc, seed);
        }
    }
    Ok(out)
}

fn hedging_seed(cfg: &ExperimentConfig, seed: u64) -> Result<Outputs, TrainError> {
    let (sae, tc, h) = (cfg.sae.as_ref().unwrap(), cfg.train.as_ref().unwrap(), cfg.hedging.as_ref().unwrap());
    let mut out = Outputs::default();
    for &w in &sae.widths {
        let variant = format!("w{w}");
        let run = match (&cfg.features, &h.stream) {
            (Some(f), _) => {
                let basis = f.basis(seed).map_err(|e| TrainError::Config(e.to_string()))?;
                let firing = f.firing().map_err(|e| TrainError::Config(e.to_string()))?;
                let params = build_sae(sae, w, f.dims, matryoshka_for(sae, w), Some(&basis), seed)?;
                let mut src = SyntheticSource::new(basis.clone(), firing.clone(), stream_rng(seed, STREAM_DATA))?;
                let mut cont = SyntheticSource::new(basis, firing, stream_rng(seed, STREAM_CONTINUE))?;
                hedging_experiment(
                    params,
                    &mut src,
                    &mut cont,
                    tc,
                    h.n_new,
                    h.continue_samples,
                    h.extend_init_norm,
                    h.random_draws,
                    seed,
                )?
            }
            (None, Some(path)) => {
                let mut reader = StreamReader::open(path).map_err(|e| TrainError::Source(e.to_string()))?;
                let params = build_sae(sae, w, reader.dims(), matryoshka_for(sae, w), None, seed)?;
                let (state0, _) = train(&mut reader, tc, params)?;
                let pair = continue_train_pair(
                    &state0,
                    h.n_new,
                    h.extend_init_norm,
                    seed,
                    tc,
                    h.continue_samples,
                    &mut reader,
                )?;
                let report = hedging_degree(&pair.base.params, &pair.extended.params, h.n_new, seed, h.random_draws)
                    .map_err(|e| TrainError::Config(e.to_string()))?;
                HedgingRun { base: pair.base, extended: pair.extended, report }
            }
            (None, None) => unreachable!("validated"),
        };
        let s = Some(seed);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        out.metric(s, &variant, "h", run.report.h);
        out.metric(s, &variant, "mean_new_projection", mean(&run.report.new_projection));
        out.metric(s, &variant, "mean_random_projection", mean(&run.report.random_projection));
        let dir = seed_dir(seed);
        out.tables.push((dir.join(format!("{variant}_hedging.csv")), run.report.table()));
        for (tag, st) in [("base", &run.base), ("extended", &run.extended)] {
            let ckpt = Checkpoint::from_state(st, tc.l1_coeff, seed, false);
            out.blobs.push((dir.join(format!("{variant}_{tag}.saec")), write_checkpoint(&ckpt)));
        }
    }
    Ok(out)
}

fn sweep_outputs(cfg: &ExperimentConfig) -> Result<Outputs, TrainError> {
    let sweep = cfg.sweep.as_ref().unwrap();
    let rows = analysis::hedging_vs_correlation_sweep(sweep, &cfg.seeds)?;
    let mut out = Outputs::default();
    for r in &rows {
        out.metric(Some(r.seed), &format!("rho_{}", fmt_float(r.rho)), "cos_l_f2", r.cos_l_f2);
    }
    let medians = analysis::sweep::medians_by_rho(&rows);
    let mut mt = Table::new(&["rho", "median_cos_l_f2"]);
    for (rho, m) in &medians {
        mt.push(crate::csv_row![*rho, *m]);
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = medians.iter().copied().unzip();
    out.metric(None, "all", "spearman_median", analysis::spearman(&xs, &ys));
    out.tables.push(("sweep.csv".into(), analysis::sweep::sweep_table(&rows)));
    out.tables.push(("medians.csv".into(), mt));
    Ok(out)
}

fn loss_curve_outputs(cfg: &ExperimentConfig) -> Result<Outputs, TrainError> {
    let lc = cfg.loss_curve.as_ref().unwrap();
    let grid = loss_curve::unit_grid(lc.grid_steps);
    let mut out = Outputs::default();
    let mut argmins = Table::new(&["p_alone", "p_both", "l1_coeff", "alpha_star", "loss_star"]);
    for &[pa, pb] in &lc.cases {
        for &l1 in &lc.l1_coeffs {
            let curve = loss_curve::loss_curve(pa, pb, l1, &grid).map_err(|e| TrainError::Config(e.to_string()))?;
            let best = loss_curve::argmin(&curve).expect("non-empty grid");
            let variant = format!("pa{}_pb{}_l1{}", fmt_float(pa), fmt_float(pb), fmt_float(l1));
            out.tables.push((format!("curve_{variant}.csv").into(), loss_curve::curve_table(&curve)));
            argmins.push(crate::csv_row![pa, pb, l1, best.alpha, best.total]);
            out.metric(None, &variant, "alpha_star", best.alpha);
            out.metric(None, &variant, "loss_star", best.total);
        }
    }
    out.tables.push(("argmin.csv".into(), argmins));
    Ok(out)
}

/// Mean and sample standard deviation of every `(variant, metric)` pair, in
/// first-appearance order.
pub fn aggregate(metrics: &[Metric]) -> Table {
    let mut keys: Vec<(String, String)> = Vec::new();
    for m in metrics {
        let k = (m.variant.clone(), m.metric.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let mut t = Table::new(&["variant", "metric", "mean", "std", "n"]);
    for (variant, metric) in keys {
        let v: Vec<f64> =
            metrics.iter().filter(|m| m.variant == variant && m.metric == metric).map(|m| m.value).collect();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
        t.push(crate::csv_row![variant, metric, mean, std, v.len()]);
    }
    t
}

pub fn metrics_table(metrics: &[Metric]) -> Table {
    let mut t = Table::new(&["seed", "variant", "metric", "value"]);
    for m in metrics {
        t.push(crate::csv_row![m.seed, m.variant.clone(), m.metric.clone(), m.value]);
    }
    t
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub name: String,
    pub kind: &'static str,
    pub config_sha256: String,
    pub seeds: Vec<u64>,
    pub version: &'static str,
    pub wall_time_seconds: f64,
    pub complete: bool,
    pub errors: Vec<String>,
    pub artifacts: Vec<PathBuf>,
}

/// Result of [`run`]: exit status and the manifest written (if any).
#[derive(Debug)]
pub struct RunOutcome {
    pub status: i32,
    pub manifest: Option<Manifest>,
    pub metrics: Vec<Metric>,
    pub error: Option<String>,
}

/// Runs every seed of `cfg`, writing artifacts under `out`.
///
/// Status 0 on success, 2 if the config is invalid (nothing is written), 1 on
/// a runtime failure (finished seeds are still written and the manifest is
/// marked incomplete).
pub fn run(cfg: &ExperimentConfig, config_text: &str, out: &Path) -> RunOutcome {
    if let Err(e) = cfg.validate() {
        return RunOutcome { status: 2, manifest: None, metrics: Vec::new(), error: Some(e.to_string()) };
    }
    let start = Instant::now();
    info!("running {} ({} seeds) into {}", cfg.name(), cfg.seeds.len(), out.display());
    let results: Vec<Result<Outputs, String>> = match cfg.kind {
        ExperimentKind::ToyFigure | ExperimentKind::SingleLatent | ExperimentKind::FullWidthControl => {
            per_seed(cfg, toy_seed)
        }
        ExperimentKind::BalanceToy | ExperimentKind::UnbalanceableToy | ExperimentKind::BalanceSweep => {
            per_seed(cfg, balance_seed)
        }
        ExperimentKind::HedgingDegree => per_seed(cfg, hedging_seed),
        ExperimentKind::CorrelationSweep => vec![sweep_outputs(cfg).map_err(|e| e.to_string())],
        ExperimentKind::LossCurve => vec![loss_curve_outputs(cfg).map_err(|e| e.to_string())],
    };
    let mut merged = Outputs::default();
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(o) => merged.extend(o),
            Err(e) => errors.push(e),
        }
    }
    merged.tables.push(("metrics.csv".into(), metrics_table(&merged.metrics)));
    merged.tables.push(("aggregate.csv".into(), aggregate(&merged.metrics)));
    let mut artifacts = match std::fs::create_dir_all(out).and_then(|_| merged.write(out)) {
        Ok(a) => a,
        Err(e) => {
            errors.push(format!("writing outputs: {e}"));
            Vec::new()
        }
    };
    artifacts.push("manifest.json".into());
    let manifest = Manifest {
        name: cfg.name(),
        kind: cfg.kind.name(),
        config_sha256: config_hash(config_text),
        seeds: cfg.seeds.clone(),
        version: env!("CARGO_PKG_VERSION"),
        wall_time_seconds: start.elapsed().as_secs_f64(),
        complete: errors.is_empty(),
        errors: errors.clone(),
        artifacts,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    if let Err(e) = std::fs::write(out.join("manifest.json"), json) {
        errors.push(format!("writing manifest: {e}"));
    }
    let status = if errors.is_empty() { 0 } else { 1 };
    RunOutcome { status, manifest: Some(manifest), metrics: merged.metrics, error: errors.first().cloned() }
}

fn per_seed(
    cfg: &ExperimentConfig,
    f: fn(&ExperimentConfig, u64) -> Result<Outputs, TrainError>,
) -> Vec<Result<Outputs, String>> {
    cfg.seeds.par_iter().map(|&s| f(cfg, s).map_err(|e| format!("seed {s}: {e}"))).collect()
}

/// Loads a config file and runs it; `out` overrides the config's `out_dir`.
pub fn run_file(path: &Path, out: Option<&Path>, seeds: Option<Vec<u64>>) -> RunOutcome {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            let err = ConfigError::Read { path: path.to_path_buf(), source: e };
            return RunOutcome { status: 2, manifest: None, metrics: Vec::new(), error: Some(err.to_string()) };
        }
    };
    let mut cfg = match ExperimentConfig::from_toml_str(&text) {
        Ok(c) => c,
        Err(e) => return RunOutcome { status: 2, manifest: None, metrics: Vec::new(), error: Some(e.to_string()) },
    };
    if let Some(s) = seeds {
        cfg.seeds = s;
    }
    let out_dir = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(cfg.name()));
    run(&cfg, &text, &out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_uses_sample_std() {
        let m = |seed, v| Metric { seed: Some(seed), variant: "a".into(), metric: "x".into(), value: v };
        let t = aggregate(&[m(0, 1.0), m(1, 3.0)]);
        assert_eq!(t.rows[0], vec!["a", "x", "2", "1.41421356", "2"]);
    }

    #[test]
    fn balance_specs() {
        let base = MatryoshkaSpec::new(vec![1, 4], vec![1.0, 1.0], false);
        assert_eq!(balance_spec(&base, Some(0.25)).betas, vec![0.25, 1.0]);
        let d = balance_spec(&base, None);
        assert!(d.detached_inner);
        assert_eq!(beta_variant(Some(0.25)), "beta_0.25");
    }

    #[test]
    fn invalid_config_exits_with_two() {
        let cfg = ExperimentConfig::from_toml_str("kind = \"toy_figure\"").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let r = run(&cfg, "", dir.path());
        assert_eq!(r.status, 2);
        assert!(!dir.path().join("manifest.json").exists());
    }
}
