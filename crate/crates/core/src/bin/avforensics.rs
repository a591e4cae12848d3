use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Map, Value};

use avforensics::docsrepro::{self, plot, Report, RunContext};
use avforensics::pipeline::{
    evaluate, finetune, grad_check_pretrain, perturb, pretrain, ModelConfig, ModelParams, PerturbKind, TrainConfig,
    TrainHistory, LEVELS,
};
use avforensics::synthcorpus::{generate_corpus, load_corpus, GenConfig, Split};
use avforensics::{Error, Result};

#[derive(Parser)]
#[command(name = "avforensics", version, about = "Lip-sync deepfake detection on non-critical phoneme/viseme segments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// JSON file with optional `gen`, `model` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one field, e.g. `train.epochs=3` or `gen.n_real=100`.
    #[arg(long = "set", value_name = "SECTION.FIELD=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct CorpusArgs {
    /// Corpus root holding manifest.json.
    #[arg(long)]
    corpus: PathBuf,
    /// Restrict to one split of the manifest.
    #[arg(long, value_parser = parse_split)]
    split: Option<Split>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_real: Option<usize>,
        #[arg(long)]
        n_fake: Option<usize>,
    },
    /// Contrastive pretraining on real clips.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: CorpusArgs,
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        model_out: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Supervised finetuning on labeled clips.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: CorpusArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        model_out: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Video-level AUC and accuracy.
    Eval {
        #[command(flatten)]
        data: CorpusArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// AUC under each perturbation kind and level.
    PerturbEval {
        #[command(flatten)]
        data: CorpusArgs,
        #[arg(long)]
        model: PathBuf,
        /// Kinds to run; all when omitted.
        #[arg(long, value_delimiter = ',')]
        kinds: Vec<PerturbKind>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the pretraining loss on two clips, or of
    /// every module when no corpus is given.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        per_tensor: usize,
        #[arg(long, default_value_t = 1e-3)]
        step: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run named acceptance experiments (`all` for every criterion).
    Experiment {
        names: Vec<String>,
        /// Directory for one `<name>.json` report per experiment.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        work_dir: Option<PathBuf>,
        /// Print the registry instead of running.
        #[arg(long)]
        list: bool,
    },
    /// Render an SVG from a report or training history.
    Plot {
        /// Experiment report or pretrain output JSON.
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    serde_json::from_value(Value::String(s.into())).map_err(|_| format!("unknown split `{s}` (train, val, test)"))
}

/// Overlays `patch` on `base`, rejecting keys `base` does not have.
fn merge(base: &mut Value, patch: &Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let here = format!("{path}{k}");
                let slot = b.get_mut(k).ok_or_else(|| Error::Config(format!("unknown config field `{here}`")))?;
                if slot.is_object() && v.is_object() {
                    merge(slot, v, &format!("{here}."))?;
                } else {
                    *slot = v.clone();
                }
            }
            Ok(())
        }
        (b, p) => {
            *b = p.clone();
            Ok(())
        }
    }
}

impl ConfigArgs {
    fn resolve(&self) -> Result<Value> {
        let mut cfg = json!({
            "gen": GenConfig::default(),
            "model": ModelConfig::default(),
            "train": TrainConfig::default(),
        });
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let file: Value =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut cfg, &file, "")?;
        }
        for s in &self.set {
            let (key, raw) = s.split_once('=').ok_or_else(|| Error::Usage(format!("`{s}` is not KEY=VALUE")))?;
            let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
            let mut patch = v;
            for part in key.rsplit('.') {
                let mut m = Map::new();
                m.insert(part.into(), patch);
                patch = Value::Object(m);
            }
            merge(&mut cfg, &patch, "")?;
        }
        let mut quick = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                cfg["train"][k] = v;
            }
        };
        quick("epochs", self.epochs.map(Value::from));
        quick("batch", self.batch.map(Value::from));
        quick("seed", self.seed.map(Value::from));
        if let Some(seed) = self.seed {
            cfg["gen"]["seed"] = seed.into();
        }
        Ok(cfg)
    }

    fn section<T: DeserializeOwned>(&self, name: &str) -> Result<T> {
        let cfg = self.resolve()?;
        serde_json::from_value(cfg[name].clone()).map_err(|e| Error::Config(format!("{name}: {e}")))
    }
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => std::fs::write(p, text + "\n").map_err(|e| Error::io(p, e)),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Gen { cfg, out, n_real, n_fake } => {
            let mut gen: GenConfig = cfg.section("gen")?;
            gen.n_real = n_real.unwrap_or(gen.n_real);
            gen.n_fake = n_fake.unwrap_or(gen.n_fake);
            let m = generate_corpus(&gen, &out)?;
            emit(
                &json!({"root": out, "clips": m.clips.len(), "config_digest": m.config_digest, "manifest_digest": m.digest()}),
                None,
            )
        }
        Cmd::Pretrain {
            cfg,
            data,
            init,
            model_out,
            out,
        } => {
            let train: TrainConfig = cfg.section("train")?;
            let mut params = match init {
                Some(p) => ModelParams::load(&p)?,
                None => ModelParams::init(cfg.section("model")?)?,
            };
            let (_, clips) = load_corpus(&data.corpus, data.split)?;
            let h = pretrain(&mut params, &clips, &train)?;
            params.save(&model_out)?;
            emit(&h, out.as_deref())
        }
        Cmd::Finetune {
            cfg,
            data,
            model,
            model_out,
            out,
        } => {
            let train: TrainConfig = cfg.section("train")?;
            let mut params = ModelParams::load(&model)?;
            let (_, clips) = load_corpus(&data.corpus, data.split)?;
            let h = finetune(&mut params, &clips, &train)?;
            params.save(&model_out)?;
            emit(&h, out.as_deref())
        }
        Cmd::Eval { data, model, out } => {
            let params = ModelParams::load(&model)?;
            let (_, clips) = load_corpus(&data.corpus, data.split)?;
            emit(&evaluate(&params, &clips)?, out.as_deref())
        }
        Cmd::PerturbEval {
            data,
            model,
            kinds,
            out,
        } => {
            let params = ModelParams::load(&model)?;
            let (_, clips) = load_corpus(&data.corpus, data.split)?;
            let kinds = if kinds.is_empty() { PerturbKind::ALL.to_vec() } else { kinds };
            let clean = evaluate(&params, &clips)?;
            let mut table = Map::new();
            for kind in kinds {
                let mut row = Vec::new();
                for level in LEVELS {
                    let p = clips.iter().map(|c| perturb(c, kind, level)).collect::<Result<Vec<_>>>()?;
                    let r = evaluate(&params, &p)?;
                    row.push(json!({"level": level, "auc": r.auc, "acc": r.acc}));
                }
                table.insert(kind.name().into(), Value::Array(row));
            }
            emit(&json!({"clean": {"auc": clean.auc, "acc": clean.acc}, "perturbed": table}), out.as_deref())
        }
        Cmd::Gradcheck {
            cfg,
            corpus,
            model,
            per_tensor,
            step,
            out,
        } => match corpus {
            Some(root) => {
                let params = match model {
                    Some(p) => ModelParams::load(&p)?,
                    None => ModelParams::init(cfg.section("model")?)?,
                };
                let (_, clips) = load_corpus(&root, None)?;
                let seed = cfg.section::<TrainConfig>("train")?.seed;
                emit(&grad_check_pretrain(&params, &clips, per_tensor, step, seed)?, out.as_deref())
            }
            None => {
                let seed = cfg.section::<TrainConfig>("train")?.seed;
                let r: std::collections::BTreeMap<_, _> = docsrepro::checks::gradient_suite(seed)?.into_iter().collect();
                emit(&r, out.as_deref())
            }
        },
        Cmd::Experiment {
            names,
            out_dir,
            work_dir,
            list,
        } => {
            if list {
                return emit(&docsrepro::registry(), None);
            }
            let specs = if names.is_empty() || names.iter().any(|n| n == "all") {
                docsrepro::registry().into_iter().filter(|s| s.criterion.is_some()).collect()
            } else {
                names.iter().map(|n| docsrepro::find(n)).collect::<Result<Vec<_>>>()?
            };
            let mut ctx = RunContext {
                exe: std::env::current_exe().ok(),
                work_dir,
                trained: None,
            };
            if let Some(d) = &out_dir {
                std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            }
            for spec in &specs {
                let r = docsrepro::run_experiment(spec, &mut ctx)?;
                eprintln!("{} {} ({:.1}s)", if r.pass { "PASS" } else { "FAIL" }, r.spec, r.wall_seconds);
                for f in &r.failures {
                    eprintln!("  {f}");
                }
                let path = out_dir.as_ref().map(|d| d.join(format!("{}.json", r.spec)));
                emit(&r, path.as_deref())?;
            }
            Ok(())
        }
        Cmd::Plot { input, out } => {
            let text = std::fs::read_to_string(&input).map_err(|e| Error::io(&input, e))?;
            let v: Value = serde_json::from_str(&text)?;
            let svg = if let Ok(r) = serde_json::from_value::<Report>(v.clone()) {
                if let Some(points) = r.details.get("auc_vs_scale") {
                    let points: Vec<(usize, f64)> = serde_json::from_value(points.clone())?;
                    plot::auc_vs_scale(&points)
                } else if let Some(h) = r.details.get("pretrain") {
                    plot::loss_curve(&serde_json::from_value::<TrainHistory>(h.clone())?)
                } else {
                    return Err(Error::Usage(format!("report `{}` has nothing to plot", r.spec)));
                }
            } else if let Ok(h) = serde_json::from_value::<TrainHistory>(v) {
                plot::loss_curve(&h)
            } else {
                return Err(Error::Usage(format!("{}: neither a report nor a training history", input.display())));
            };
            std::fs::write(&out, svg).map_err(|e| Error::io(&out, e))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
