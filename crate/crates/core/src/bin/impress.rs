use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use impress::config::PipelineConfig;
use impress::evalharness::layers::{emit_layer_comparison, impression_gap_votes, write_layer_csv};
use impress::evalharness::pipeline::{
    load_scoring_inputs, run_benchmark, stage_calibrate, stage_invert, stage_score, stage_train, EvalSets,
};
use impress::evalharness::{run_ablation, MetricsReport, RunPaths};
use impress::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "impress", version, about = "Data-free OOD detection from model impressions")]
struct Cli {
    /// TOML configuration file; defaults are used for missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the top-level `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parent of the run directories.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// `section.key=value` override; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand, Debug)]
enum Verb {
    /// Generate data and train the classifier.
    Train,
    /// Synthesize impressions and record inversion trajectories.
    Invert,
    /// Build the calibration artifact from the impressions.
    Calibrate,
    /// Score sets (`id` or OOD set names) with in/out decisions.
    Score {
        #[arg(long, value_delimiter = ',')]
        ood: Vec<String>,
    },
    /// Benchmark all methods on the OOD sets.
    Eval {
        #[arg(long, value_delimiter = ',')]
        ood: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        method: Vec<String>,
    },
    /// Run ablation modes.
    Ablate {
        #[arg(long, value_delimiter = ',')]
        mode: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        ood: Vec<String>,
    },
    /// Per-layer activation means for ID, OOD, impressions and BN statistics.
    CompareLayers {
        #[arg(long, value_delimiter = ',')]
        ood: Vec<String>,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let base = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    match &cli.verb {
        Verb::Eval { ood, method } => {
            push_list(&mut overrides, "eval.ood_sets", ood);
            push_list(&mut overrides, "eval.methods", method);
        }
        Verb::Ablate { mode, ood } => {
            push_list(&mut overrides, "eval.ablation_modes", mode);
            push_list(&mut overrides, "eval.ood_sets", ood);
        }
        Verb::CompareLayers { ood } => push_list(&mut overrides, "eval.ood_sets", ood),
        _ => {}
    }
    base.with_overrides(&overrides)
}

fn push_list(overrides: &mut Vec<String>, key: &str, values: &[String]) {
    if !values.is_empty() {
        overrides.push(format!("{key}={}", values.join(",")));
    }
}

fn print_report(r: &MetricsReport) {
    println!("{:<20} {:<16} {:>8} {:>8} {:>8} {:>8}", "method", "ood_set", "TNR95", "AUROC", "DetAcc", "AUPRin");
    for c in &r.cells {
        println!(
            "{:<20} {:<16} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            c.method, c.ood_set, c.tnr_at_tpr95, c.auroc, c.detection_acc, c.aupr_in
        );
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let paths = RunPaths::for_config(&cfg, &cli.out);
    println!("run directory: {}", paths.root().display());
    match &cli.verb {
        Verb::Train => {
            let ck = stage_train(&cfg, &paths)?;
            println!(
                "trained: final loss {:.4}, test accuracy {:.4}",
                ck.meta.final_train_loss,
                ck.meta.test_accuracy.unwrap_or(f64::NAN)
            );
        }
        Verb::Invert => {
            let synth = stage_invert(&cfg, &paths)?;
            for cs in &synth.classes {
                println!("class {}: {} impressions, MSP agreement {:.3}", cs.class, cs.images.len(), cs.msp_agreement);
            }
        }
        Verb::Calibrate => {
            let artifact = stage_calibrate(&paths)?;
            for (c, cal) in artifact.classes.iter().enumerate() {
                println!("class {c}: alpha {:?}", cal.alpha);
            }
        }
        Verb::Score { ood } => {
            let sets = if ood.is_empty() {
                std::iter::once("id".to_string()).chain(cfg.eval.ood_sets.iter().cloned()).collect()
            } else {
                ood.clone()
            };
            for p in stage_score(&cfg, &paths, &sets)? {
                println!("wrote {}", p.display());
            }
        }
        Verb::Eval { .. } => print_report(&run_benchmark(&cfg, &paths)?),
        Verb::Ablate { mode, .. } => {
            let modes = cfg.ablation_modes()?;
            let name = if mode.is_empty() {
                "ablation".to_string()
            } else {
                format!("ablation-{}", modes.iter().map(|m| m.name()).collect::<Vec<_>>().join("+"))
            };
            print_report(&run_ablation(&cfg, &paths, &modes, &name)?);
        }
        Verb::CompareLayers { .. } => {
            let (ck, artifact) = load_scoring_inputs(&paths)?;
            let sets = EvalSets::from_config(&cfg)?;
            let ood: Vec<(&str, _)> = sets.ood.iter().map(|(k, b)| (k.name(), b)).collect();
            let rows = emit_layer_comparison(&ck, &artifact, &sets.id, &ood)?;
            write_layer_csv(&paths.layer_csv(), &rows)?;
            let (votes, total) = impression_gap_votes(&rows);
            println!("wrote {}", paths.layer_csv().display());
            println!("impression closer to ID than BN running mean: {votes}/{total} (class, layer) pairs");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::MissingArtifact { stage, .. } = &e {
                eprintln!("hint: run `impress {stage}` with the same configuration first");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
