use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tooluq::config::init_logging;
use tooluq::datagen::{
    generate_qa_dataset, generate_rag_dataset, paraphrase_questions, DatasetKind, QaGenConfig, RagGenConfig,
};
use tooluq::eval::{
    auroc_rows, emit_report, read_report, render_text_table, toycheck, Experiment, ExperimentConfig, ReportFormat,
    ResultTable,
};
use tooluq::generators::{HttpGenerator, HttpGeneratorConfig};
use tooluq::io::{read_jsonl, write_jsonl};
use tooluq::pipeline::EpisodeRecord;
use tooluq::{Error, Result};

#[derive(Parser)]
#[command(name = "tooluq", version, about = "Uncertainty metrics for tool-calling and retrieval pipelines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    Iris,
    Diabetes,
    Rag,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic QA dataset or a retrieval corpus.
    GenData {
        #[arg(long, value_enum, default_value = "iris")]
        kind: DataKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 150)]
        n_questions: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Delimited source table (features then class column).
        #[arg(long)]
        source: Option<PathBuf>,
        /// Question template file replacing the bundled pool.
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        components: usize,
        #[arg(long, default_value_t = 1)]
        decimals: u32,
        /// Retrieval questions JSONL (rag kind).
        #[arg(long)]
        questions: Option<PathBuf>,
        /// Distractor passages JSONL (rag kind).
        #[arg(long)]
        passages: Option<PathBuf>,
        #[arg(long, default_value_t = 300)]
        distractors: usize,
        #[arg(long, default_value_t = 0.5)]
        gold_fraction: f64,
        /// TOML file with an HTTP generator section used to paraphrase questions.
        #[arg(long)]
        paraphrase_config: Option<PathBuf>,
    },
    /// Run the full protocol from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the master seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Recompute per-question metrics and AUROC from an episode log.
    Metrics {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        episodes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute AUROC tables from JSONL reports.
    Eval {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Combined CSV with one row per report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the brute-force identity suites on toy systems.
    Toycheck {
        #[arg(long, default_value_t = 50)]
        systems: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn write_reports(table: &ResultTable, dir: &Path) -> Result<()> {
    for f in [ReportFormat::Csv, ReportFormat::Jsonl, ReportFormat::Text] {
        emit_report(table, f, dir.join(format!("report.{}", f.extension())))?;
    }
    print!("{}", render_text_table(table));
    Ok(())
}

fn gen_data(cmd: Command) -> Result<()> {
    let Command::GenData {
        kind,
        out,
        n_questions,
        seed,
        source,
        templates,
        components,
        decimals,
        questions,
        passages,
        distractors,
        gold_fraction,
        paraphrase_config,
    } = cmd
    else {
        unreachable!()
    };
    let path_str = |p: Option<PathBuf>| p.map(|p| p.to_string_lossy().into_owned());
    match kind {
        DataKind::Rag => {
            let ds = generate_rag_dataset(&RagGenConfig {
                questions_path: path_str(questions),
                passages_path: path_str(passages),
                n_questions,
                n_distractors: distractors,
                gold_fraction,
                seed,
            })?;
            ds.save(&out)?;
            log::info!("wrote {} questions and {} documents to {}", ds.items.len(), ds.corpus.len(), out.display());
        }
        DataKind::Iris | DataKind::Diabetes => {
            let mut ds = generate_qa_dataset(&QaGenConfig {
                kind: if matches!(kind, DataKind::Iris) { DatasetKind::Iris } else { DatasetKind::Diabetes },
                source_path: path_str(source),
                templates_path: path_str(templates),
                n_questions,
                n_components: components,
                decimals,
                seed,
            })?;
            if let Some(p) = paraphrase_config {
                let text = fs::read_to_string(&p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                let cfg: HttpGeneratorConfig =
                    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                paraphrase_questions(&mut ds.items, &HttpGenerator::new(&cfg)?, decimals, seed)?;
            }
            ds.save(&out)?;
            log::info!("wrote {} questions to {}", ds.items.len(), out.display());
        }
    }
    Ok(())
}

fn run(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml_string()?)?;
    let output = Experiment::prepare(&cfg)?.run()?;
    write_jsonl(out.join("episodes.jsonl"), &output.episodes)?;
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&output.manifest)? + "\n")?;
    write_reports(&output.table, out)?;
    output.table.ensure_defined()
}

fn metrics(config: &Path, episodes: &Path, out: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let records: Vec<EpisodeRecord> = read_jsonl(episodes)?;
    let table = Experiment::prepare(&cfg)?.evaluate(&records)?;
    fs::create_dir_all(out)?;
    write_reports(&table, out)?;
    table.ensure_defined()
}

fn eval(reports: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let mut combined = Vec::new();
    let mut any_defined = false;
    for path in reports {
        let mut table = read_report(path)?;
        table.rows = auroc_rows(&table.questions, table.mode, &table.generator)?;
        any_defined |= table.rows.iter().any(|r| r.auroc.is_some());
        print!("{}", render_text_table(&table));
        combined.push(table);
    }
    if let Some(out) = out {
        let mut w = csv::Writer::from_path(out)?;
        let metrics = combined[0].metrics();
        let mut header = vec!["generator".to_string()];
        header.extend(metrics.iter().map(|m| m.column_name().to_string()));
        header.push("config_hash".into());
        w.write_record(&header)?;
        for t in &combined {
            let mut row = vec![t.generator.clone()];
            row.extend(metrics.iter().map(|m| t.auroc(*m).map_or_else(|| "NA".into(), |a| a.to_string())));
            row.push(t.config_hash.clone());
            w.write_record(&row)?;
        }
        w.flush()?;
    }
    if any_defined {
        Ok(())
    } else {
        Err(Error::UndefinedAuroc("correct or incorrect"))
    }
}

fn toy(systems: u64, seed: u64) -> Result<()> {
    let lines = toycheck(systems, seed)?;
    for l in &lines {
        println!(
            "{:<24} {} systems  max error {:.3e}  tolerance {:.0e}  {}",
            l.name,
            l.systems,
            l.max_error,
            l.tolerance,
            if l.passed { "PASS" } else { "FAIL" }
        );
    }
    if lines.iter().all(|l| l.passed) {
        Ok(())
    } else {
        Err(Error::InvalidArgument("toy identity check failed".into()))
    }
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    let result = match cli.command {
        cmd @ Command::GenData { .. } => gen_data(cmd),
        Command::Run { config, out, seed } => run(&config, &out, seed),
        Command::Metrics { config, episodes, out } => metrics(&config, &episodes, &out),
        Command::Eval { reports, out } => eval(&reports, out.as_deref()),
        Command::Toycheck { systems, seed } => toy(systems, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
