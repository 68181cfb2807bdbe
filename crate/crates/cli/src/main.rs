use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mtkd::ablation;
use mtkd::checkpoint::CheckpointError;
use mtkd::config::{KdVariant, Stage, TrainConfig};
use mtkd::export;
use mtkd::model::Model;
use mtkd::mole::mole_param_count;
use mtkd::verify;
use mtkd::{train, Error};

const EXIT_CONFIG: u8 = 3;
const EXIT_NUMERIC: u8 = 4;
const EXIT_IO: u8 = 5;

#[derive(Parser)]
#[command(name = "distill", version, about = "Multi-teacher encoder distillation on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the student (or resume) and print the final losses.
    Distill(DistillArgs),
    /// Print parameter counts per group and the MoLE share.
    InspectParams(ConfigArg),
    /// Write [CLS] attention maps of the CLIP stand-in and the student.
    ExportAttention(ExportArgs),
    /// Run the cumulative variant ladder and write a comparison CSV.
    Ablate(AblateArgs),
    /// Run the built-in oracle suite.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct ConfigArg {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct DistillArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    stage: Stage,
    /// Checkpoint to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Write `trace.csv` and `checkpoint.mvkd` here instead of the
    /// configured paths.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Configuration the checkpoint was trained with; defaults apply when
    /// omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    image_seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated variants; the whole ladder when omitted.
    #[arg(long, value_delimiter = ',')]
    matrix: Vec<KdVariant>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    config: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Checkpoint(CheckpointError::FingerprintMismatch { .. }) => EXIT_CONFIG,
        Error::Numerics(_) | Error::NonFinite { .. } | Error::Contract(_) => EXIT_NUMERIC,
        Error::Io { .. } | Error::Checkpoint(_) => EXIT_IO,
    }
}

fn load_config(path: Option<&Path>) -> mtkd::Result<TrainConfig> {
    path.map_or_else(|| Ok(TrainConfig::default()), TrainConfig::from_file)
}

fn distill(a: DistillArgs) -> mtkd::Result<()> {
    let mut cfg = TrainConfig::from_file(&a.config)?;
    cfg.stage = a.stage;
    if let Some(dir) = &a.out {
        cfg.trace_path = Some(dir.join("trace.csv"));
        cfg.checkpoint_path = Some(dir.join("checkpoint.mvkd"));
    }
    let s = train::run(&cfg, a.resume.as_deref())?;
    let e = &s.final_eval;
    println!("step={} accuracy={:.4}", s.final_step, e.accuracy);
    println!("L_text={:.6} L_kd={:.6} L_total={:.6}", e.l_text, e.l_kd, e.l_total);
    Ok(())
}

fn inspect_params(a: ConfigArg) -> mtkd::Result<()> {
    let cfg = TrainConfig::from_file(&a.config)?;
    let model = Model::init(&cfg)?;
    let groups = model.params.group_counts();
    for (g, n) in groups {
        println!("{:<10}{n:>12}", g.as_str());
    }
    println!("{:<10}{:>12}", "total", model.params.param_count());
    let (student, mole) = (groups[0].1, groups[1].1);
    let closed = mole_param_count(&cfg.student, &cfg.mole);
    if closed.mole_params != mole || closed.total_student_params != student + mole {
        return Err(Error::Contract(format!(
            "closed-form count {} / {} disagrees with enumeration {mole} / {}",
            closed.mole_params,
            closed.total_student_params,
            student + mole
        )));
    }
    println!("mole_ratio={:.4}", mole as f64 / (student + mole) as f64);
    Ok(())
}

fn export_attention(a: ExportArgs) -> mtkd::Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    for p in export::export_attention(&cfg, &a.checkpoint, a.image_seed, &a.out)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> mtkd::Result<()> {
    let cfg = TrainConfig::from_file(&a.config)?;
    let variants = if a.matrix.is_empty() { KdVariant::LADDER.to_vec() } else { a.matrix };
    let rows = ablation::run_ladder(&cfg, &variants)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let path = a.out.join("ablation.csv");
    let csv = ablation::ladder_csv(&rows);
    std::fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;
    print!("{csv}");
    Ok(())
}

fn run_verify(a: VerifyArgs) -> mtkd::Result<bool> {
    let cfg = load_config(a.config.as_deref())?;
    let checks = verify::run_all(&cfg);
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    for c in &checks {
        let tag = if c.passed { "PASS" } else { "FAIL" };
        println!("{tag}  {:<width$}  {}", c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed", checks.len());
    Ok(failed == 0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Distill(a) => distill(a).map(|_| true),
        Command::InspectParams(a) => inspect_params(a).map(|_| true),
        Command::ExportAttention(a) => export_attention(a).map(|_| true),
        Command::Ablate(a) => ablate(a).map(|_| true),
        Command::Verify(a) => run_verify(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_NUMERIC),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
