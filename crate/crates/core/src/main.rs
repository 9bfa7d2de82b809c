use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gzsl::combiner::{Combination, SmoothingConfig};
use gzsl::error::{Error, Result};
use gzsl::eval::{ausuc, ood_report, seen_unseen_curve};
use gzsl::experts::{as_probabilities, train_seen_expert, train_zs_expert};
use gzsl::gate::GateModel;
use gzsl::harness::config::linspace;
use gzsl::harness::tune::{fit_gate, gate_feature_config};
use gzsl::harness::{
    ablate, build_splits, generate_synthetic, prepare, tune_combiner, tune_gate_config, Config, Dataset, EvalData,
    GateSpec, Splits, Variant,
};
use gzsl::io::{self, ClassSplit, MetricsSummary};
use gzsl::score::{ClassId, Vocabulary};

#[derive(Parser)]
#[command(name = "gzsl", version, about = "Gated seen/zero-shot expert mixture for generalized zero-shot classification")]
struct Cli {
    /// JSON run configuration (missing fields take defaults).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed (splits and synthetic data).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Directory with features.csv (or features.bin), descriptions.csv and classes.json.
    /// Without it the synthetic benchmark from the config is used.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Pre-built splits; built from the seed when absent.
    #[arg(long)]
    splits: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    /// Trained on train ∩ (S \ H); zero-shot domain H.
    Gating,
    /// Trained on train; zero-shot domain U_val; scores GZSL-Val.
    Validation,
    /// Trained on train ∪ seen-val; zero-shot domain U_test; scores test.
    Union,
}

#[derive(Clone, Copy, ValueEnum)]
enum Domain {
    Seen,
    Unseen,
}

#[derive(Clone, Copy, ValueEnum)]
enum SmoothingArg {
    None,
    Adaptive,
    Constant,
}

#[derive(Clone, Copy, ValueEnum)]
enum CombinationArg {
    Soft,
    Hard,
}

#[derive(Args, Clone)]
struct CombineArgs {
    #[arg(long, value_enum, default_value = "adaptive")]
    smoothing: SmoothingArg,
    /// Weight for `--smoothing constant`.
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    #[arg(long, value_enum, default_value = "soft")]
    combination: CombinationArg,
}

impl CombineArgs {
    fn smoothing(&self) -> Result<SmoothingConfig> {
        match self.smoothing {
            SmoothingArg::None => Ok(SmoothingConfig::none()),
            SmoothingArg::Adaptive => Ok(SmoothingConfig::adaptive()),
            SmoothingArg::Constant => SmoothingConfig::constant(self.lambda),
        }
    }

    fn combination(&self) -> Combination {
        match self.combination {
            CombinationArg::Soft => Combination::Soft,
            CombinationArg::Hard => Combination::Hard,
        }
    }
}

#[derive(Args, Clone)]
struct ScoreArgs {
    /// Seen-expert scores (`sample_id,<class_id>...` with a `{kind}` sidecar).
    #[arg(long)]
    seen_scores: PathBuf,
    /// Zero-shot expert scores over the unseen classes.
    #[arg(long)]
    zs_scores: PathBuf,
    /// `sample_id,label` ground truth.
    #[arg(long)]
    labels: PathBuf,
    /// Trained gate (`{w, b, gamma, beta, k_seen, k_unseen, temperature}`).
    #[arg(long)]
    gate: PathBuf,
    /// Optional `{seen, unseen}` class lists to check and align the score files against.
    #[arg(long)]
    classes: Option<PathBuf>,
    #[command(flatten)]
    combine: CombineArgs,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic benchmark as features.csv, descriptions.csv, classes.json.
    GenSynth,
    /// Build class/sample splits; writes splits.json plus per-set labels and class lists.
    Split(DataArgs),
    /// Train a seen-class expert for one stage and score that stage's evaluation set.
    TrainSeen {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value = "union")]
        stage: Stage,
    },
    /// Train the zero-shot expert for one stage and score that stage's evaluation set.
    TrainZs {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value = "union")]
        stage: Stage,
    },
    /// Validate an external score file and re-align it to a class list.
    IngestScores {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        classes: PathBuf,
        #[arg(long, value_enum)]
        domain: Domain,
    },
    /// Fit the confidence-based gate at one (T, K).
    TrainGate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 3.0)]
        temperature: f64,
        #[arg(long, default_value_t = 3)]
        k: usize,
        /// Drop the zero-shot block from the gate features.
        #[arg(long)]
        no_zs: bool,
    },
    /// Search (T, K) by Gating-Val AUC; writes gate.json and gate_table.csv.
    TuneGate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        no_zs: bool,
    },
    /// Search (β, γ) by GZSL-Val Acc_H for a fitted gate; writes a calibrated gate.json.
    TuneCombiner {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        gate: PathBuf,
        #[command(flatten)]
        combine: CombineArgs,
    },
    /// Metrics and predictions from score files, labels and a gate.
    Eval(ScoreArgs),
    /// Seen–unseen curve (β sweep) from score files, labels and a gate.
    Curve(ScoreArgs),
    /// Run ablation variants end to end.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        /// Comma-separated variant names; default all.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Summarize an ablation output directory as a Markdown table.
    Report {
        /// Directory written by `ablate` (defaults to --out).
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<Config> {
    let cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let cfg = match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn first_existing(dir: &Path, names: &[&str]) -> PathBuf {
    names
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.exists())
        .unwrap_or_else(|| dir.join(names[0]))
}

fn load_dataset(args: &DataArgs, cfg: &Config) -> Result<Dataset> {
    match &args.data {
        None => Ok(generate_synthetic(&cfg.synthetic)?.into()),
        Some(dir) => {
            let classes: ClassSplit = io::read_json(&dir.join("classes.json"))?;
            Ok(Dataset {
                features: io::read_features(&first_existing(dir, &["features.csv", "features.bin"]))?,
                descriptions: io::read_descriptions(&dir.join("descriptions.csv"))?,
                seen: Vocabulary::new(classes.seen)?,
                unseen: Vocabulary::new(classes.unseen)?,
            })
        }
    }
}

fn load_splits(args: &DataArgs, dataset: &Dataset, cfg: &Config) -> Result<Splits> {
    match &args.splits {
        Some(p) => {
            let s: Splits = io::read_json(p)?;
            s.validate(dataset.features.labels())?;
            Ok(s)
        }
        None => build_splits(dataset.features.labels(), &dataset.seen, &dataset.unseen, &cfg.splits, cfg.seed),
    }
}

fn labels_of(dataset: &Dataset, indices: &[usize]) -> Vec<(String, ClassId)> {
    indices
        .iter()
        .map(|&i| (dataset.features.sample_ids()[i].clone(), dataset.features.label(i).expect("labeled")))
        .collect()
}

/// Training rows, seen classes, zero-shot domain and scored rows for a stage.
fn stage_plan(stage: Stage, dataset: &Dataset, splits: &Splits) -> Result<(Vec<usize>, Vocabulary, Vocabulary, Vec<usize>, &'static str)> {
    let labels = dataset.features.labels();
    Ok(match stage {
        Stage::Gating => {
            let kept = splits.kept_seen()?;
            let train = splits.restrict_to_classes(&splits.train, labels, &kept);
            (train, kept, splits.held_out.clone(), splits.gating_train.clone(), "gating")
        }
        Stage::Validation => (
            splits.train.clone(),
            splits.seen.clone(),
            splits.unseen_val.clone(),
            splits.gzsl_val(),
            "val",
        ),
        Stage::Union => (
            splits.union_train(),
            splits.seen.clone(),
            splits.unseen_test.clone(),
            splits.test.clone(),
            "test",
        ),
    })
}

fn load_eval(args: &ScoreArgs) -> Result<(EvalData, GateModel)> {
    let (seen, zs) = match &args.classes {
        Some(p) => {
            let classes: ClassSplit = io::read_json(p)?;
            (
                io::ingest_external_scores(&args.seen_scores, &Vocabulary::new(classes.seen)?)?,
                io::ingest_external_scores(&args.zs_scores, &Vocabulary::new(classes.unseen)?)?,
            )
        }
        None => (io::read_scores(&args.seen_scores)?, io::read_scores(&args.zs_scores)?),
    };
    let labels = io::read_labels(&args.labels)?;
    let text = std::fs::read_to_string(&args.gate).map_err(|e| Error::io(&args.gate, e))?;
    let gate = GateModel::from_json(&text)?;
    Ok((EvalData::with_labels(seen, zs, &labels)?, gate))
}

fn sweep(data: &EvalData, gate: &GateModel, combine: &CombineArgs, n: usize) -> Result<Vec<gzsl::eval::CurvePoint>> {
    let raw = data.raw_scores(&GateSpec::ConfidenceBased { model: gate.clone() })?;
    let smoothing = combine.smoothing()?;
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let margin = 20.0 / gate.gamma;
    seen_unseen_curve(
        |beta| {
            let r = data.report_predictions(&data.predict(&raw, gate.gamma, beta, &smoothing, combine.combination())?)?;
            Ok((r.acc_ts, r.acc_tr))
        },
        &linspace(lo - margin, hi + margin, n),
    )
}

fn write_gate(path: &Path, gate: &GateModel) -> Result<()> {
    io::write_json(path, gate)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = &cli.out;
    match &cli.command {
        Command::GenSynth => {
            let data = generate_synthetic(&cfg.synthetic)?;
            io::write_features(&out.join("features.csv"), &data.features)?;
            io::write_descriptions(&out.join("descriptions.csv"), &data.descriptions)?;
            io::write_json(
                &out.join("classes.json"),
                &ClassSplit {
                    seen: data.seen.as_slice().to_vec(),
                    unseen: data.unseen.as_slice().to_vec(),
                },
            )?;
            println!(
                "wrote {} samples; nearest-description unseen top-1 {:.4}",
                data.features.n_samples(),
                data.nearest_description_accuracy()?
            );
        }
        Command::Split(args) => {
            let dataset = load_dataset(args, &cfg)?;
            let splits = load_splits(args, &dataset, &cfg)?;
            io::write_json(&out.join("splits.json"), &splits)?;
            io::write_labels(&out.join("labels_val.csv"), &labels_of(&dataset, &splits.gzsl_val()))?;
            io::write_labels(&out.join("labels_test.csv"), &labels_of(&dataset, &splits.test))?;
            for (name, unseen) in [("classes_val.json", &splits.unseen_val), ("classes_test.json", &splits.unseen_test)] {
                let classes = ClassSplit {
                    seen: splits.seen.as_slice().to_vec(),
                    unseen: unseen.as_slice().to_vec(),
                };
                io::write_json(&out.join(name), &classes)?;
            }
            println!(
                "|S|={} |H|={} |U_val|={} |U_test|={}; train {} seen-val {} unseen-val {} test {}",
                splits.seen.len(),
                splits.held_out.len(),
                splits.unseen_val.len(),
                splits.unseen_test.len(),
                splits.train.len(),
                splits.seen_val.len(),
                splits.unseen_val_samples.len(),
                splits.test.len()
            );
        }
        Command::TrainSeen { data, stage } => {
            let dataset = load_dataset(data, &cfg)?;
            let splits = load_splits(data, &dataset, &cfg)?;
            let (train, classes, _, scored, set) = stage_plan(*stage, &dataset, &splits)?;
            let expert = train_seen_expert(&dataset.features.select(&train), &classes, &cfg.seen_expert)?;
            io::write_json(&out.join(format!("seen_expert_{set}.json")), &expert)?;
            let table = expert.predict_table(&dataset.features.select(&scored), gzsl::score::Temperature::ONE)?;
            io::write_scores(&out.join(format!("seen_scores_{set}.csv")), &table)?;
            println!("trained on {} samples; scored {} {set} samples", train.len(), scored.len());
        }
        Command::TrainZs { data, stage } => {
            let dataset = load_dataset(data, &cfg)?;
            let splits = load_splits(data, &dataset, &cfg)?;
            let (train, classes, domain, scored, set) = stage_plan(*stage, &dataset, &splits)?;
            let expert = train_zs_expert(&dataset.features.select(&train), &classes, &dataset.descriptions, &cfg.zs_expert)?;
            io::write_json(&out.join(format!("zs_expert_{set}.json")), &expert)?;
            let table = expert
                .bind(&domain, &dataset.descriptions)?
                .predict_table(&dataset.features.select(&scored))?;
            io::write_scores(&out.join(format!("zs_scores_{set}.csv")), &table)?;
            println!("trained on {} samples; scored {} {set} samples", train.len(), scored.len());
        }
        Command::IngestScores { scores, classes, domain } => {
            let classes: ClassSplit = io::read_json(classes)?;
            let expected = Vocabulary::new(match domain {
                Domain::Seen => classes.seen,
                Domain::Unseen => classes.unseen,
            })?;
            let table = as_probabilities(&io::ingest_external_scores(scores, &expected)?)?;
            let name = scores.file_name().map(PathBuf::from).unwrap_or_else(|| "scores.csv".into());
            io::write_scores(&out.join(name), &table)?;
            println!("ingested {} samples × {} classes", table.n_samples(), table.n_classes());
        }
        Command::TrainGate {
            data,
            temperature,
            k,
            no_zs,
        } => {
            let dataset = load_dataset(data, &cfg)?;
            let splits = load_splits(data, &dataset, &cfg)?;
            let prepared = prepare(&dataset, &splits, &cfg)?;
            let model = fit_gate(&prepared.gate_train, &gate_feature_config(*temperature, *k, !no_zs)?, &cfg.gate)?;
            write_gate(&out.join("gate.json"), &model)?;
            let ood = ood_report(&gzsl::harness::tune::gate_scores(&model, &prepared.gating_val)?, &prepared.gating_val.is_seen)?;
            println!("Gating-Val AUC {:.4}, FPR@95%TPR {:.4}", ood.auc, ood.fpr_at_95_tpr);
        }
        Command::TuneGate { data, no_zs } => {
            let dataset = load_dataset(data, &cfg)?;
            let splits = load_splits(data, &dataset, &cfg)?;
            let prepared = prepare(&dataset, &splits, &cfg)?;
            let t = tune_gate_config(
                &prepared.gate_train,
                &prepared.gating_val,
                &cfg.grid.temperature,
                &cfg.grid.k,
                !no_zs,
                &cfg.gate,
            )?;
            let rows: Vec<Vec<f64>> = t.table.iter().map(|c| vec![c.temperature, c.k as f64, c.auc]).collect();
            io::write_table(&out.join("gate_table.csv"), &["temperature", "k", "auc"], &rows)?;
            write_gate(&out.join("gate.json"), &t.model)?;
            println!("selected T={} K={} (Gating-Val AUC {:.4})", t.temperature, t.k, t.auc);
        }
        Command::TuneCombiner { data, gate, combine } => {
            let dataset = load_dataset(data, &cfg)?;
            let splits = load_splits(data, &dataset, &cfg)?;
            let prepared = prepare(&dataset, &splits, &cfg)?;
            let model: GateModel = GateModel::from_json(
                &std::fs::read_to_string(gate).map_err(|e| Error::io(gate, e))?,
            )?;
            let val = &prepared.val;
            let raw = val.raw_scores(&GateSpec::ConfidenceBased { model: model.clone() })?;
            let smoothing = combine.smoothing()?;
            let t = tune_combiner(&cfg.grid.beta, &cfg.grid.gamma, cfg.grid.fine_factor, |b, g| {
                Ok(val.report_predictions(&val.predict(&raw, g, b, &smoothing, combine.combination())?)?.acc_h)
            })?;
            let rows: Vec<Vec<f64>> = t.candidates.iter().map(|c| vec![c.beta, c.gamma, c.score]).collect();
            io::write_table(&out.join("candidates.csv"), &["beta", "gamma", "acc_h"], &rows)?;
            write_gate(&out.join("gate.json"), &model.with_calibration(t.gamma, t.beta)?)?;
            println!("selected beta={} gamma={} (GZSL-Val Acc_H {:.4})", t.beta, t.gamma, t.score);
        }
        Command::Eval(args) => {
            let (data, gate) = load_eval(args)?;
            let raw = data.raw_scores(&GateSpec::ConfidenceBased { model: gate.clone() })?;
            let predictions = data.predict(&raw, gate.gamma, gate.beta, &args.combine.smoothing()?, args.combine.combination())?;
            let report = data.report_predictions(&predictions)?;
            let curve = sweep(&data, &gate, &args.combine, cfg.curve_points)?;
            let ood = ood_report(&raw, &data.is_seen()).ok();
            let summary = MetricsSummary {
                acc_tr: report.acc_tr,
                acc_ts: report.acc_ts,
                acc_h: report.acc_h,
                ausuc: Some(ausuc(&curve)?),
                ood_auc: ood.as_ref().map(|o| o.auc),
                fpr_at_95_tpr: ood.as_ref().map(|o| o.fpr_at_95_tpr),
            };
            io::write_json(&out.join("metrics.json"), &summary)?;
            io::write_predictions(&out.join("predictions.csv"), &data.sample_ids, &predictions)?;
            println!(
                "Acc_tr {:.4}  Acc_ts {:.4}  Acc_H {:.4}  AUSUC {:.4}",
                summary.acc_tr,
                summary.acc_ts,
                summary.acc_h,
                summary.ausuc.unwrap()
            );
        }
        Command::Curve(args) => {
            let (data, gate) = load_eval(args)?;
            let curve = sweep(&data, &gate, &args.combine, cfg.curve_points)?;
            io::write_curve(&out.join("curve.csv"), &curve)?;
            println!("AUSUC {:.4} over {} points", ausuc(&curve)?, curve.len());
        }
        Command::Ablate { data, variants } => {
            let names: Vec<String> = if variants.is_empty() { cfg.variants.clone() } else { variants.clone() };
            let list = names.iter().map(|n| n.parse::<Variant>()).collect::<Result<Vec<_>>>()?;
            let dataset = load_dataset(data, &cfg)?;
            let splits = load_splits(data, &dataset, &cfg)?;
            let prepared = prepare(&dataset, &splits, &cfg)?;
            let results = ablate(&prepared, &cfg, &list)?;
            let mut summary = std::collections::BTreeMap::new();
            println!("{:<20} {:>8} {:>8} {:>8} {:>8} {:>8}", "variant", "Acc_tr", "Acc_ts", "Acc_H", "AUSUC", "AUC");
            for r in &results {
                r.write(&out.join(r.variant.name()))?;
                let s = r.summary();
                println!(
                    "{:<20} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8}",
                    r.variant.name(),
                    s.acc_tr,
                    s.acc_ts,
                    s.acc_h,
                    r.ausuc,
                    s.ood_auc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into())
                );
                summary.insert(r.variant.name().to_owned(), s);
            }
            io::write_json(&out.join("summary.json"), &summary)?;
            io::write_json(&out.join("splits.json"), &splits)?;
        }
        Command::Report { dir } => {
            let dir = dir.as_ref().unwrap_or(out);
            let summary: std::collections::BTreeMap<String, MetricsSummary> = io::read_json(&dir.join("summary.json"))?;
            let fmt = |v: Option<f64>| v.map(|x| format!("{:.1}", 100.0 * x)).unwrap_or_else(|| "–".into());
            let mut text = String::from("| variant | Acc_tr | Acc_ts | Acc_H | AUSUC | OOD AUC | FPR@95%TPR |\n|---|---|---|---|---|---|---|\n");
            // Keep the canonical variant order rather than alphabetical.
            for v in Variant::ALL {
                if let Some(s) = summary.get(v.name()) {
                    text.push_str(&format!(
                        "| {} | {} | {} | {} | {} | {} | {} |\n",
                        v.name(),
                        fmt(Some(s.acc_tr)),
                        fmt(Some(s.acc_ts)),
                        fmt(Some(s.acc_h)),
                        fmt(s.ausuc),
                        fmt(s.ood_auc),
                        fmt(s.fpr_at_95_tpr)
                    ));
                }
            }
            std::fs::write(dir.join("report.md"), &text).map_err(|e| Error::io(dir.join("report.md"), e))?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
