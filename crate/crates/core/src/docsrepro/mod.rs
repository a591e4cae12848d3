//! Scripted acceptance experiments. Each named [`ExperimentSpec`] runs one
//! check end to end and yields a machine-readable [`Report`].

pub mod checks;
pub mod oracles;
pub mod plot;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::clip::{ClipTriplet, Label};
use crate::error::{Error, Result};
use crate::pipeline::{
    evaluate, finetune, perturb, pretrain, MetricsReport, ModelConfig, ModelParams, PerturbKind, TrainConfig, TrainHistory,
};
use crate::synthcorpus::{generate_corpus, generate_in_memory, load_corpus, sha256_hex, GenConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cmp {
    Lt,
    Le,
    Ge,
    Gt,
}

impl Cmp {
    fn symbol(self) -> &'static str {
        match self {
            Cmp::Lt => "<",
            Cmp::Le => "<=",
            Cmp::Ge => ">=",
            Cmp::Gt => ">",
        }
    }
}

/// `metric cmp value`, relaxed by `tolerance` toward passing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expectation {
    pub metric: String,
    pub cmp: Cmp,
    pub value: f64,
    pub tolerance: f64,
}

impl Expectation {
    pub fn new(metric: impl Into<String>, cmp: Cmp, value: f64, tolerance: f64) -> Self {
        Self {
            metric: metric.into(),
            cmp,
            value,
            tolerance,
        }
    }

    pub fn holds(&self, measured: f64) -> bool {
        let (v, t) = (self.value, self.tolerance);
        match self.cmp {
            Cmp::Lt => measured < v + t,
            Cmp::Le => measured <= v + t,
            Cmp::Ge => measured >= v - t,
            Cmp::Gt => measured > v - t,
        }
    }
}

/// Corpora, model and schedules of a gen → pretrain → finetune → eval run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndToEnd {
    pub pretrain_corpus: GenConfig,
    pub finetune_corpus: GenConfig,
    pub test_corpus: GenConfig,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
}

impl EndToEnd {
    /// Desk defaults with `n_pretrain` real pretraining clips, 400/400
    /// finetuning clips and a 100/100 test set, seed 7.
    pub fn desk(n_pretrain: usize) -> Self {
        let corpus = |prefix: &str, n_real, n_fake| GenConfig {
            n_real,
            n_fake,
            seed: 7,
            id_prefix: prefix.into(),
            ..GenConfig::default()
        };
        Self {
            pretrain_corpus: corpus("pre", n_pretrain, 0),
            finetune_corpus: corpus("ft", 400, 400),
            test_corpus: corpus("test", 100, 100),
            model: ModelConfig::default(),
            pretrain: TrainConfig::default(),
            // every usable segment of a clip, as at evaluation
            finetune: TrainConfig {
                segments_per_clip: 4,
                ..TrainConfig::default()
            },
        }
    }

    /// A few-second version used for determinism and persistence checks.
    pub fn micro() -> Self {
        let corpus = |prefix: &str, n_real, n_fake| GenConfig {
            n_real,
            n_fake,
            seed: 11,
            id_prefix: prefix.into(),
            ..GenConfig::default()
        };
        let train = TrainConfig {
            epochs: 2,
            batch: 8,
            probe_clips: 8,
            ..TrainConfig::default()
        };
        Self {
            pretrain_corpus: corpus("pre", 16, 0),
            finetune_corpus: corpus("ft", 8, 8),
            test_corpus: corpus("test", 6, 6),
            model: checks::micro_model(),
            pretrain: train.clone(),
            finetune: train,
        }
    }

    pub fn corpus_digest(&self) -> String {
        let s = format!(
            "{}\n{}\n{}",
            self.pretrain_corpus.digest(),
            self.finetune_corpus.digest(),
            self.test_corpus.digest()
        );
        sha256_hex(s.as_bytes())
    }

    pub fn train_digest(&self) -> String {
        let s = format!("{}\n{}\n{}", self.model.digest(), self.pretrain.digest(), self.finetune.digest());
        sha256_hex(s.as_bytes())
    }

    fn key(&self) -> String {
        sha256_hex(format!("{}{}", self.corpus_digest(), self.train_digest()).as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExperimentKind {
    LossOracles { instances: usize, seed: u64 },
    HandValues,
    GradientChecks { seed: u64 },
    Structural { seed: u64 },
    EndToEnd(EndToEnd),
    /// Perturbs the test split of the referenced end-to-end run.
    Robustness { run: EndToEnd },
    Determinism { run: EndToEnd },
    ScaleStudy { sizes: Vec<usize>, run: EndToEnd },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    /// Acceptance criterion this spec executes, if any.
    pub criterion: Option<u8>,
    pub corpus_digest: String,
    pub train_digest: String,
    pub expected: Vec<Expectation>,
    pub max_runtime_s: f64,
    pub kind: ExperimentKind,
}

impl ExperimentSpec {
    fn new(name: &str, criterion: Option<u8>, max_runtime_s: f64, kind: ExperimentKind, expected: Vec<Expectation>) -> Self {
        let (corpus_digest, train_digest) = match &kind {
            ExperimentKind::EndToEnd(r)
            | ExperimentKind::Robustness { run: r }
            | ExperimentKind::Determinism { run: r }
            | ExperimentKind::ScaleStudy { run: r, .. } => (r.corpus_digest(), r.train_digest()),
            _ => (String::new(), String::new()),
        };
        Self {
            name: name.into(),
            criterion,
            corpus_digest,
            train_digest,
            expected,
            max_runtime_s,
            kind,
        }
    }
}

pub const ORACLE_METRICS: [&str; 6] = ["ec_loss", "infonce_loss", "correlation_matrix", "cgra_loss", "ce_loss", "auc"];
pub const GRADIENT_MODULES: [&str; 13] = [
    "lfa_apply_line",
    "lfa_apply_grid",
    "window_attention",
    "window_attention_shifted",
    "encoder",
    "projection_heads",
    "cafm",
    "ec_loss_literal",
    "ec_loss_dedup",
    "infonce_loss",
    "cgra_loss",
    "ce_loss",
    "pretrain_loss_micro_batch",
];
pub const STRUCTURAL_CHECKS: [&str; 5] = [
    "encoder_zero_weight_identity",
    "cafm_zero_weight_identity_and_tanh_bounds",
    "filter_idempotence",
    "contrastive_scale_invariance",
    "correlation_in_unit_interval",
];

/// Level-1 AUC loss allowed for every perturbation kind.
pub const MAX_LEVEL1_DROP: f64 = 0.10;

/// One spec per acceptance criterion, followed by the scale study.
pub fn registry() -> Vec<ExperimentSpec> {
    let mut oracle: Vec<Expectation> = ORACLE_METRICS
        .iter()
        .map(|&m| Expectation::new(m, Cmp::Le, 0.0, if m == "auc" { 1e-12 } else { 1e-10 }))
        .collect();
    oracle.push(Expectation::new("instances", Cmp::Ge, 100.0, 0.0));
    oracle.push(Expectation::new("auc_definedness", Cmp::Le, 0.0, 0.0));

    let hand = vec![
        Expectation::new("ec_n2_orthonormal", Cmp::Le, 0.0, 1e-9),
        Expectation::new("cgra_negative_identity", Cmp::Le, 0.0, 1e-9),
    ];
    let grads = GRADIENT_MODULES.iter().map(|m| Expectation::new(*m, Cmp::Lt, 1e-4, 0.0)).collect();
    let structural = STRUCTURAL_CHECKS.iter().map(|m| Expectation::new(*m, Cmp::Le, 0.0, 1e-12)).collect();

    let desk = EndToEnd::desk(2000);
    let e2e = vec![
        Expectation::new("auc", Cmp::Ge, 0.90, 0.0),
        Expectation::new("pretrain_loss_ratio", Cmp::Le, 0.5, 0.0),
    ];
    let mut robust: Vec<Expectation> = PerturbKind::ALL
        .iter()
        .map(|k| Expectation::new(format!("drop_l1.{}", k.name()), Cmp::Lt, MAX_LEVEL1_DROP, 0.0))
        .collect();
    for k in [PerturbKind::Noise, PerturbKind::Blur] {
        robust.push(Expectation::new(format!("drop_l5_minus_l1.{}", k.name()), Cmp::Ge, 0.0, 0.0));
    }
    let det = ["rerun_identical", "roundtrip_bitwise", "loaded_metrics_identical", "cross_process_identical"]
        .iter()
        .map(|m| Expectation::new(*m, Cmp::Ge, 1.0, 0.0))
        .collect();

    vec![
        ExperimentSpec::new(
            "loss_oracles",
            Some(1),
            60.0,
            ExperimentKind::LossOracles { instances: 200, seed: 1 },
            oracle,
        ),
        ExperimentSpec::new("hand_values", Some(2), 60.0, ExperimentKind::HandValues, hand),
        ExperimentSpec::new("gradient_checks", Some(3), 300.0, ExperimentKind::GradientChecks { seed: 3 }, grads),
        ExperimentSpec::new("structural_identities", Some(4), 60.0, ExperimentKind::Structural { seed: 4 }, structural),
        ExperimentSpec::new("synthetic_end_to_end", Some(5), 1800.0, ExperimentKind::EndToEnd(desk.clone()), e2e),
        ExperimentSpec::new("robustness_smoke", Some(6), 600.0, ExperimentKind::Robustness { run: desk.clone() }, robust),
        ExperimentSpec::new(
            "determinism_persistence",
            Some(7),
            300.0,
            ExperimentKind::Determinism { run: EndToEnd::micro() },
            det,
        ),
        ExperimentSpec::new(
            "scale_study",
            None,
            7200.0,
            ExperimentKind::ScaleStudy {
                sizes: vec![250, 1000, 2000],
                run: desk,
            },
            Vec::new(),
        ),
    ]
}

pub fn find(name: &str) -> Result<ExperimentSpec> {
    registry().into_iter().find(|s| s.name == name).ok_or_else(|| {
        let names: Vec<String> = registry().into_iter().map(|s| s.name).collect();
        Error::Usage(format!("unknown experiment `{name}`; known: {}", names.join(", ")))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub spec: String,
    pub measured: BTreeMap<String, f64>,
    /// `"<cmp> <value>"` per metric.
    pub expected: BTreeMap<String, String>,
    pub tolerance: BTreeMap<String, f64>,
    pub pass: bool,
    pub wall_seconds: f64,
    /// Seconds per phase.
    pub timings: BTreeMap<String, f64>,
    pub failures: Vec<String>,
    pub warnings: Vec<String>,
    /// Experiment-specific extras such as loss histories.
    pub details: serde_json::Value,
}

impl Report {
    /// Digest of everything except timing, so repeated runs compare equal.
    pub fn digest(&self) -> String {
        let stable = serde_json::json!({
            "spec": self.spec,
            "measured": self.measured,
            "expected": self.expected,
            "pass": self.pass,
            "details": self.details,
        });
        sha256_hex(stable.to_string().as_bytes())
    }
}

/// Output of an end-to-end run, kept so later experiments can reuse it.
#[derive(Debug, Clone)]
pub struct Trained {
    pub key: String,
    pub params: ModelParams,
    pub test: Vec<ClipTriplet>,
    pub metrics: MetricsReport,
    pub pretrain: TrainHistory,
    pub finetune: TrainHistory,
    pub timings: BTreeMap<String, f64>,
}

#[derive(Debug, Default)]
pub struct RunContext {
    /// The command-line binary, for the cross-process persistence check.
    pub exe: Option<PathBuf>,
    /// Scratch space; a temporary directory when unset.
    pub work_dir: Option<PathBuf>,
    pub trained: Option<Trained>,
}

struct Measure {
    measured: BTreeMap<String, f64>,
    timings: BTreeMap<String, f64>,
    warnings: Vec<String>,
    details: serde_json::Value,
}

impl Measure {
    fn new() -> Self {
        Self {
            measured: BTreeMap::new(),
            timings: BTreeMap::new(),
            warnings: Vec::new(),
            details: serde_json::Value::Null,
        }
    }

    fn set(&mut self, k: impl Into<String>, v: f64) {
        self.measured.insert(k.into(), v);
    }

    fn timed<T>(&mut self, phase: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f();
        *self.timings.entry(phase.into()).or_default() += t.elapsed().as_secs_f64();
        out
    }
}

pub fn run_experiment(spec: &ExperimentSpec, ctx: &mut RunContext) -> Result<Report> {
    let start = Instant::now();
    let mut m = Measure::new();
    // time spent rebuilding a model another experiment would normally provide
    let mut unbudgeted = 0.0;
    match &spec.kind {
        ExperimentKind::LossOracles { instances, seed } => {
            for (k, v) in m.timed("oracles", || checks::oracle_suite(*instances, *seed))? {
                m.set(k, v);
            }
            m.set("instances", *instances as f64);
        }
        ExperimentKind::HandValues => {
            for (k, v) in checks::hand_values()? {
                m.set(k, v);
            }
        }
        ExperimentKind::GradientChecks { seed } => {
            let reports = m.timed("gradient_checks", || checks::gradient_suite(*seed))?;
            for (k, r) in &reports {
                m.set(k.clone(), r.max_rel_error);
                if r.checked == 0 {
                    m.warnings.push(format!("{k}: every sampled entry had zero gradient"));
                }
            }
            m.details = serde_json::to_value(reports.into_iter().collect::<BTreeMap<_, _>>()).expect("reports serialize");
        }
        ExperimentKind::Structural { seed } => {
            for (k, v) in m.timed("structural", || checks::structural_suite(*seed))? {
                m.set(k, v);
            }
        }
        ExperimentKind::EndToEnd(run) => {
            let t = train_cached(ctx, run)?;
            m.timings.extend(t.timings.clone());
            record_end_to_end(&mut m, t);
        }
        ExperimentKind::Robustness { run } => {
            let before = Instant::now();
            let reused = ctx.trained.as_ref().is_some_and(|t| t.key == run.key());
            let t = train_cached(ctx, run)?;
            if !reused {
                unbudgeted = before.elapsed().as_secs_f64();
                m.timings.insert("train (not budgeted)".into(), unbudgeted);
            }
            robustness(&mut m, t)?;
        }
        ExperimentKind::Determinism { run } => determinism(&mut m, run, ctx)?,
        ExperimentKind::ScaleStudy { sizes, run } => {
            let mut points = Vec::new();
            for &n in sizes {
                let mut r = run.clone();
                r.pretrain_corpus.n_real = n;
                let t = train(&r)?;
                let auc = t.metrics.auc.unwrap_or(f64::NAN);
                m.set(format!("auc.{n}"), auc);
                for (k, v) in &t.timings {
                    m.timings.insert(format!("{n}.{k}"), *v);
                }
                points.push((n, auc));
            }
            if points.windows(2).any(|w| !(w[1].1 >= w[0].1)) {
                m.warnings.push(format!("AUC is not monotone in pretraining size: {points:?}"));
            }
            m.details = serde_json::json!({ "auc_vs_scale": points });
        }
    }
    Ok(finish(spec, m, start.elapsed().as_secs_f64(), unbudgeted))
}

fn finish(spec: &ExperimentSpec, m: Measure, wall_seconds: f64, unbudgeted: f64) -> Report {
    let mut failures = Vec::new();
    let mut expected = BTreeMap::new();
    let mut tolerance = BTreeMap::new();
    for e in &spec.expected {
        expected.insert(e.metric.clone(), format!("{} {}", e.cmp.symbol(), e.value));
        tolerance.insert(e.metric.clone(), e.tolerance);
        match m.measured.get(&e.metric) {
            Some(&v) if e.holds(v) => {}
            Some(&v) => failures.push(format!("{} = {v} is not {} {}", e.metric, e.cmp.symbol(), e.value)),
            None => failures.push(format!("{} was not measured", e.metric)),
        }
    }
    let budgeted = wall_seconds - unbudgeted;
    if budgeted > spec.max_runtime_s {
        let breakdown: Vec<String> = m.timings.iter().map(|(k, v)| format!("{k} {v:.1}s")).collect();
        failures.push(format!(
            "runtime {budgeted:.1}s exceeds budget {:.0}s ({})",
            spec.max_runtime_s,
            breakdown.join(", ")
        ));
    }
    Report {
        spec: spec.name.clone(),
        measured: m.measured,
        expected,
        tolerance,
        pass: failures.is_empty(),
        wall_seconds,
        timings: m.timings,
        failures,
        warnings: m.warnings,
        details: m.details,
    }
}

fn corpus(config: &GenConfig) -> Result<Vec<ClipTriplet>> {
    Ok(generate_in_memory(config)?.1)
}

/// Runs gen → pretrain → finetune → eval.
pub fn train(run: &EndToEnd) -> Result<Trained> {
    let mut m = Measure::new();
    let (pre, ft, test) = m.timed("gen", || {
        Ok((corpus(&run.pretrain_corpus)?, corpus(&run.finetune_corpus)?, corpus(&run.test_corpus)?))
    })?;
    let mut params = ModelParams::init(run.model.clone())?;
    log::info!("pretraining on {} clips", pre.len());
    let pretrain = m.timed("pretrain", || pretrain(&mut params, &pre, &run.pretrain))?;
    log::info!("finetuning on {} clips", ft.len());
    let finetune = m.timed("finetune", || finetune(&mut params, &ft, &run.finetune))?;
    let metrics = m.timed("eval", || evaluate(&params, &test))?;
    log::info!("held-out AUC {:?}", metrics.auc);
    Ok(Trained {
        key: run.key(),
        params,
        test,
        metrics,
        pretrain,
        finetune,
        timings: m.timings,
    })
}

fn train_cached<'a>(ctx: &'a mut RunContext, run: &EndToEnd) -> Result<&'a Trained> {
    if ctx.trained.as_ref().is_none_or(|t| t.key != run.key()) {
        ctx.trained = Some(train(run)?);
    }
    Ok(ctx.trained.as_ref().expect("just trained"))
}

fn record_end_to_end(m: &mut Measure, t: &Trained) {
    m.set("auc", t.metrics.auc.unwrap_or(f64::NAN));
    m.set("acc", t.metrics.acc);
    m.set("pretrain_loss_ratio", t.pretrain.probe_ratio().unwrap_or(f64::NAN));
    if let Some(p) = t.pretrain.probe.first() {
        m.set("pretrain_loss_initial", *p);
    }
    if let Some(p) = t.pretrain.probe.last() {
        m.set("pretrain_loss_final", *p);
    }
    m.details = serde_json::json!({
        "pretrain": t.pretrain,
        "finetune": t.finetune,
        "metrics_digest": t.metrics.digest(),
    });
}

/// AUC of `t`'s model on its perturbed test split.
pub fn perturbed_auc(t: &Trained, kind: PerturbKind, level: u8) -> Result<f64> {
    let clips = t.test.iter().map(|c| perturb(c, kind, level)).collect::<Result<Vec<_>>>()?;
    let r = evaluate(&t.params, &clips)?;
    r.auc.ok_or_else(|| Error::EmptyInput("test split holds a single label".into()))
}

fn robustness(m: &mut Measure, t: &Trained) -> Result<()> {
    let clean = t.metrics.auc.ok_or_else(|| Error::EmptyInput("test split holds a single label".into()))?;
    m.set("auc.clean", clean);
    for kind in PerturbKind::ALL {
        let levels: &[u8] = if matches!(kind, PerturbKind::Noise | PerturbKind::Blur) { &[1, 5] } else { &[1] };
        let mut drops = Vec::new();
        for &level in levels {
            let auc = m.timed(&format!("perturb.{}", kind.name()), || perturbed_auc(t, kind, level))?;
            m.set(format!("auc.{}.l{level}", kind.name()), auc);
            drops.push(clean - auc);
        }
        m.set(format!("drop_l1.{}", kind.name()), drops[0]);
        if drops.len() == 2 {
            m.set(format!("drop_l5_minus_l1.{}", kind.name()), drops[1] - drops[0]);
        }
    }
    Ok(())
}

fn scratch(ctx: &RunContext) -> Result<(PathBuf, Option<tempfile::TempDir>)> {
    match &ctx.work_dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            Ok((d.clone(), None))
        }
        None => {
            let t = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
            Ok((t.path().to_path_buf(), Some(t)))
        }
    }
}

fn determinism(m: &mut Measure, run: &EndToEnd, ctx: &RunContext) -> Result<()> {
    let a = m.timed("run_a", || train(run))?;
    let b = m.timed("run_b", || train(run))?;
    let same = a.metrics == b.metrics
        && a.pretrain == b.pretrain
        && a.finetune == b.finetune
        && a.params.to_bytes() == b.params.to_bytes();
    m.set("rerun_identical", same as u8 as f64);

    let bytes = a.params.to_bytes();
    let loaded = ModelParams::from_bytes(&bytes)?;
    m.set("roundtrip_bitwise", (loaded.to_bytes() == bytes) as u8 as f64);
    let again = evaluate(&loaded, &a.test)?;
    m.set("loaded_metrics_identical", (again == a.metrics) as u8 as f64);

    let (dir, _guard) = scratch(ctx)?;
    match &ctx.exe {
        Some(exe) => {
            let same = m.timed("cross_process", || cross_process(exe, &dir, run, &a.params))?;
            m.set("cross_process_identical", same as u8 as f64);
        }
        None => m.warnings.push("no executable given; cross-process check skipped".into()),
    }
    m.details = serde_json::json!({ "metrics_digest": a.metrics.digest() });
    Ok(())
}

/// Writes the checkpoint and test corpus to disk, evaluates them here and in
/// a child process, and compares the two reports.
fn cross_process(exe: &Path, dir: &Path, run: &EndToEnd, params: &ModelParams) -> Result<bool> {
    let model = dir.join("model.avfp");
    let corpus_dir = dir.join("test_corpus");
    let out = dir.join("metrics.json");
    params.save(&model)?;
    generate_corpus(&run.test_corpus, &corpus_dir)?;
    let reloaded = ModelParams::load(&model)?;
    let (_, clips) = load_corpus(&corpus_dir, None)?;
    let here = evaluate(&reloaded, &clips)?;
    let status = Command::new(exe)
        .arg("eval")
        .arg("--model")
        .arg(&model)
        .arg("--corpus")
        .arg(&corpus_dir)
        .arg("--out")
        .arg(&out)
        .status()
        .map_err(|e| Error::io(exe, e))?;
    if !status.success() {
        return Err(Error::Subprocess(format!("{} eval exited with {status}", exe.display())));
    }
    let text = std::fs::read_to_string(&out).map_err(|e| Error::io(&out, e))?;
    let there: MetricsReport = serde_json::from_str(&text).map_err(|e| Error::Decode(format!("{}: {e}", out.display())))?;
    Ok(there == here && there.digest() == here.digest())
}

/// Mean predicted fake probability per label, for quick inspection.
pub fn label_means(r: &MetricsReport) -> (Option<f64>, Option<f64>) {
    (r.mean_probability(Label::Real), r.mean_probability(Label::Fake))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_criterion_has_exactly_one_spec() {
        let reg = registry();
        for c in 1..=7u8 {
            assert_eq!(reg.iter().filter(|s| s.criterion == Some(c)).count(), 1, "criterion {c}");
        }
        let mut names: Vec<&str> = reg.iter().map(|s| s.name.as_str()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), reg.len());
    }

    #[test]
    fn expectation_tolerance_relaxes_toward_pass() {
        assert!(Expectation::new("x", Cmp::Le, 0.0, 1e-10).holds(5e-11));
        assert!(!Expectation::new("x", Cmp::Le, 0.0, 1e-10).holds(2e-10));
        assert!(Expectation::new("x", Cmp::Ge, 0.9, 0.0).holds(0.9));
        assert!(!Expectation::new("x", Cmp::Lt, 0.1, 0.0).holds(0.1));
        assert!(!Expectation::new("x", Cmp::Ge, 0.9, 0.0).holds(f64::NAN));
    }

    #[test]
    fn missing_metric_and_overrun_fail() {
        let spec = ExperimentSpec::new("t", None, 1.0, ExperimentKind::HandValues, vec![Expectation::new("x", Cmp::Ge, 0.5, 0.0)]);
        let mut m = Measure::new();
        m.timings.insert("phase".into(), 3.0);
        let r = finish(&spec, m, 3.0, 0.0);
        assert!(!r.pass);
        assert_eq!(r.failures.len(), 2);
        assert!(r.failures[1].contains("phase 3.0s"));
    }

    #[test]
    fn random_scores_clear_a_chance_threshold() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let scores: Vec<f64> = (0..400).map(|_| rng.random()).collect();
        let pos: Vec<bool> = (0..400).map(|i| i % 2 == 0).collect();
        let spec = ExperimentSpec::new("chance", None, 10.0, ExperimentKind::HandValues, vec![Expectation::new("auc", Cmp::Ge, 0.5, 0.1)]);
        let mut m = Measure::new();
        m.set("auc", crate::pipeline::auc(&scores, &pos).unwrap());
        assert!(finish(&spec, m, 0.0, 0.0).pass);
    }

    #[test]
    fn hand_values_pass() {
        let spec = find("hand_values").unwrap();
        let r = run_experiment(&spec, &mut RunContext::default()).unwrap();
        assert!(r.pass, "{:?}", r.failures);
        let again = run_experiment(&spec, &mut RunContext::default()).unwrap();
        assert_eq!(r.digest(), again.digest());
    }
}
