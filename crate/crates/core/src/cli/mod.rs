//! Command-line harness: data generation, training over seeds × splits,
//! evaluation, reports and storage arithmetic.
//!
//! Exit codes: 0 on success, 2 for configuration or input problems, 1 for
//! internal failures.

pub mod checkpoint;
pub mod config;
pub mod report;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::data::{self, Corpus, Vocab};
use crate::encoder::count_params;
use crate::error::{config_err, Error, Result};
use crate::par;
use crate::selftrain::{run, Mode, NoObserver, TaskData};
pub use config::{DataSpecFile, ExperimentConfig, OUTPUT_ROOT_ENV};
use report::{MetricsLine, METRICS_FILE, METRICS_VERSION};

#[derive(Debug, Parser)]
#[command(name = "lst", version, about = "Prompted self-training with adapters on a frozen toy encoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus, its vocabulary and split manifests.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Defaults to `<output root>/data`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write split manifests for a generated corpus.
    Split {
        /// Directory holding `corpus.tsv` and `vocab.txt`.
        #[arg(long)]
        data: PathBuf,
        /// TOML few-shot spec (`shots`, `n_splits`, `seed`); defaults apply when absent.
        #[arg(long)]
        few_shot: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every (K, split, seed) of a config and write checkpoints and metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's mode.
        #[arg(long)]
        mode: Option<String>,
        /// Overrides the output root.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Test accuracy of a saved checkpoint.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Aggregate metrics files into mean and std per (mode, K).
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Storage of full fine-tuning against one shared model plus per-task tunables.
    StorageReport {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model_params: Option<u64>,
        #[arg(long)]
        tunable_params: Option<u64>,
        #[arg(long, default_value_t = 100)]
        tasks: u64,
    },
}

/// Parses `args` and runs the command. Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                2
            } else {
                1
            }
        }
    }
}

fn default_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("lst-out"), PathBuf::from)
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { spec, seed, out } => {
            let spec = DataSpecFile::load(&spec)?;
            let out = out.unwrap_or_else(|| default_root().join("data"));
            gen_data(&spec, seed, &out)
        }
        Command::Split { data, few_shot, out } => {
            let fs = match few_shot {
                Some(p) => {
                    let text = std::fs::read_to_string(&p)
                        .map_err(|e| config_err!("cannot read {}: {e}", p.display()))?;
                    toml::from_str(&text).map_err(|e| config_err!("{e}"))?
                }
                None => data::FewShotSpec::default(),
            };
            let corpus = load_corpus(&data)?;
            write_manifests(&corpus, &fs, out.as_deref().unwrap_or(&data))
        }
        Command::Train { config, mode, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(m) = mode {
                cfg.mode = m.parse()?;
                cfg.validate()?;
            }
            let root = out.unwrap_or_else(|| cfg.output_root());
            let summary = train(&cfg, &root)?;
            println!("{summary}");
            Ok(())
        }
        Command::Eval { config, checkpoint } => {
            let cfg = ExperimentConfig::load(&config)?;
            let enc = cfg.build_encoder()?;
            let corpus = cfg.build_corpus()?;
            let (tunable, _) = checkpoint::load(&checkpoint, &enc)?;
            let model = cfg.build_model(&enc, &corpus.vocab)?;
            if tunable.head.shape()[1] != model.n_labels() {
                return Err(Error::Load("checkpoint label count does not match the config".into()));
            }
            let tpl = cfg.template(&corpus.vocab)?;
            let test = corpus
                .test_indices()
                .map(|i| {
                    Ok(crate::prompting::Labeled {
                        instance: crate::prompting::apply_template(&tpl, &corpus.records[i].tokens, None, cfg.encoder.max_len)?,
                        label: corpus.records[i].gold,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let acc = model.accuracy(&tunable, &test)?;
            println!("{}", serde_json::json!({ "accuracy": acc, "n": test.len() }));
            Ok(())
        }
        Command::Report { runs, json } => {
            let mut lines = Vec::new();
            for p in report::find_metrics(&runs)? {
                lines.extend(report::parse_metrics(&std::fs::read_to_string(&p)?)?);
            }
            let r = report::aggregate(&lines)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&r).expect("report serialises"));
            } else {
                print!("{}", report::render(&r));
            }
            Ok(())
        }
        Command::StorageReport {
            config,
            model_params,
            tunable_params,
            tasks,
        } => {
            if tasks == 0 {
                return Err(config_err!("--tasks must be at least 1"));
            }
            print!("{}", storage_report(config.as_deref(), model_params, tunable_params, tasks)?);
            Ok(())
        }
    }
}

pub fn gen_data(spec: &DataSpecFile, seed: u64, out: &Path) -> Result<()> {
    let corpus = data::generate(&spec.task, seed)?;
    config::create_dir(out)?;
    data::write_file(&out.join("vocab.txt"), &corpus.vocab.to_file_string())?;
    data::write_file(&out.join("corpus.tsv"), &corpus.to_file_string()?)?;
    write_manifests(&corpus, &spec.few_shot, out)
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let read = |name: &str| {
        std::fs::read_to_string(dir.join(name))
            .map_err(|e| Error::Load(format!("cannot read {}: {e}", dir.join(name).display())))
    };
    let vocab = Vocab::from_file_str(&read("vocab.txt")?)?;
    Corpus::from_file_str(&read("corpus.tsv")?, vocab)
}

fn write_manifests(corpus: &Corpus, fs: &data::FewShotSpec, out: &Path) -> Result<()> {
    config::create_dir(out)?;
    for id in 1..=fs.n_splits {
        let s = data::split(corpus, fs, id)?;
        data::write_file(
            &out.join(format!("manifest-split{id}.tsv")),
            &data::manifest_string(&s, &fs.shots),
        )?;
    }
    Ok(())
}

/// Directory of one run below the output root.
pub fn run_dir(root: &Path, mode: Mode, k: usize, split: usize, seed: u64) -> PathBuf {
    root.join("runs")
        .join(mode.name())
        .join(format!("k{k}"))
        .join(format!("split{split}-seed{seed}"))
}

/// Runs every (K, split, seed) of `cfg`, possibly in parallel, and writes
/// one metrics file and one checkpoint per run. Returns a text report.
pub fn train(cfg: &ExperimentConfig, root: &Path) -> Result<String> {
    cfg.validate()?;
    let enc = cfg.build_encoder()?;
    let corpus = cfg.build_corpus()?;
    let tpl = cfg.template(&corpus.vocab)?;
    let model = cfg.build_model(&enc, &corpus.vocab)?;
    let splits = (1..=cfg.few_shot.n_splits)
        .map(|id| data::split(&corpus, &cfg.few_shot, id))
        .collect::<Result<Vec<_>>>()?;

    let mode_dir = root.join("runs").join(cfg.mode.name());
    config::create_dir(&mode_dir)?;
    data::write_file(&mode_dir.join("config.toml"), &cfg.to_toml())?;

    let mut jobs = Vec::new();
    for &k in &cfg.shots {
        for s in &splits {
            for &seed in &cfg.seeds {
                jobs.push((k, s, seed));
            }
        }
    }
    let started = Instant::now();
    let results = par::try_map(&jobs, |&(k, s, seed)| -> Result<Vec<MetricsLine>> {
        let data = TaskData::from_split(&corpus, s, k, &tpl, cfg.encoder.max_len)?;
        let tc = cfg.train_config(seed);
        let out = run(&tc, &cfg.adapter, &model, &data, &mut NoObserver)?;
        let lines: Vec<MetricsLine> = out
            .records
            .into_iter()
            .map(|record| MetricsLine {
                format_version: METRICS_VERSION,
                mode: cfg.mode,
                k,
                split: s.id,
                seed,
                record,
            })
            .collect();
        let dir = run_dir(root, cfg.mode, k, s.id, seed);
        config::create_dir(&dir)?;
        data::write_file(&dir.join(METRICS_FILE), &report::metrics_text(&lines))?;
        checkpoint::save(&dir.join("adapter.ckpt"), &out.teacher, &cfg.adapter, &enc)?;
        eprintln!(
            "{} K={k} split={} seed={seed}: acc {:.3}",
            cfg.mode.name(),
            s.id,
            lines.last().map_or(f64::NAN, |l| l.record.eval_accuracy)
        );
        Ok(lines)
    })?;
    eprintln!("{} runs in {:.1}s", jobs.len(), started.elapsed().as_secs_f64());
    let all: Vec<MetricsLine> = results.into_iter().flatten().collect();
    Ok(report::render(&report::aggregate(&all)?))
}

pub fn storage_report(
    config: Option<&Path>,
    model_params: Option<u64>,
    tunable_params: Option<u64>,
    tasks: u64,
) -> Result<String> {
    let mut s = String::new();
    let mut line = |label: &str, c: &report::StorageCosts| {
        s.push_str(&format!(
            "{label}: model {} params, tunable {} params, {} tasks\n  full fine-tuning {} bytes, shared model + tunables {} bytes, ratio {:.2}x\n",
            c.model_params, c.tunable_params, c.tasks, c.full_bytes, c.lite_bytes, c.ratio
        ));
    };
    match (model_params, tunable_params) {
        (Some(m), Some(a)) => line("given", &report::storage_costs(m, a, tasks)),
        (None, None) => {}
        _ => return Err(config_err!("--model-params and --tunable-params go together")),
    }
    let cfg = match config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let enc = cfg.build_encoder()?;
    let corpus = cfg.build_corpus()?;
    let model = cfg.build_model(&enc, &corpus.vocab)?;
    let tunable = model.init_tunable(&cfg.adapter, 0)?;
    let counts = count_params(&enc, &tunable.adapters);
    let full = (counts.encoder + counts.head) as u64;
    line("config", &report::storage_costs(full, tunable.param_count() as u64, tasks));
    let ckpt = checkpoint::to_bytes(&tunable, &cfg.adapter, &enc).len() as f64;
    s.push_str(&format!(
        "checkpoint {} bytes vs full parameters {} bytes: ratio {:.4}\n",
        ckpt,
        8 * full,
        ckpt / (8 * full) as f64
    ));
    Ok(s)
}
