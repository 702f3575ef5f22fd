use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use comad::checkpoint::{params_checksum, Checkpoint};
use comad::config::{Config, TeacherInit};
use comad::inspect::inspect_gating;
use comad::probe::linear_probe;
use comad::teachers::{build_teachers, random_teacher, teacher_checkpoint, teacher_path, toy_pretrain};
use comad::train::{student_from_checkpoint, Distiller};
use comad::verify::{run_verification, Fault};
use comad::{Error, Result};

#[derive(Parser)]
#[command(name = "comad", version, about = "Multi-teacher masked distillation for small vision transformers")]
struct Cli {
    /// TOML config; the built-in desk config when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides train.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Where artifacts are written.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitMode {
    Random,
    ToyPretrain,
}

#[derive(Subcommand)]
enum Command {
    /// Write one checkpoint per teacher into the output directory.
    InitTeachers {
        #[arg(long, value_enum, default_value = "random")]
        mode: InitMode,
    },
    /// Train the student; metrics go to metrics.jsonl, weights to student.ckpt.
    Distill {
        /// Directory of teacher checkpoints; overrides teachers.dir.
        #[arg(long)]
        teachers: Option<PathBuf>,
        /// Continue from a student checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed steps instead of the full schedule.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Run the f64 property and gradient suite.
    Verify {
        #[arg(long, value_parser = ["none", "flip-kl-sign"], default_value = "none")]
        fault: String,
    },
    /// Per-teacher gating statistics of a trained student, as JSON lines.
    InspectGating {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        teachers: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        batches: usize,
    },
    /// Linear-probe accuracy of a student's class-token features.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))
}

fn init_teachers(cfg: &Config, out: &Path, mode: InitMode) -> Result<()> {
    create_dir(out)?;
    let data = cfg.training_data()?;
    for id in 0..cfg.teachers.count {
        let mut t = random_teacher::<f32>(cfg, id)?;
        let mut steps = 0;
        if let InitMode::ToyPretrain = mode {
            let r = toy_pretrain(&mut t, cfg, id, &data)?;
            println!(
                "teacher {id}: reconstruction loss {:.5} -> {:.5} ({:.1}% lower)",
                r.initial_loss,
                r.final_loss,
                100.0 * r.reduction()
            );
            steps = r.steps as u64;
        }
        let ckpt = teacher_checkpoint(&t, cfg, steps);
        let path = teacher_path(out, id);
        ckpt.save(&path)?;
        println!("teacher {id}: {} sha256 {}", path.display(), params_checksum(&ckpt.tensors));
    }
    Ok(())
}

fn distill(mut cfg: Config, out: &Path, teachers: Option<PathBuf>, resume: Option<PathBuf>, steps: Option<u64>) -> Result<()> {
    create_dir(out)?;
    if teachers.is_some() {
        cfg.teachers.dir = teachers;
    }
    let data = cfg.training_data()?;
    let cfg = cfg.with_dataset_len(data.len());
    if cfg.teachers.dir.is_none() && cfg.teachers.init == TeacherInit::ToyPretrain {
        println!("pretraining {} teachers in process", cfg.teachers.count);
    }
    let mut d = Distiller::<f32>::new(cfg.clone(), build_teachers(&cfg, &data)?)?;
    if let Some(path) = &resume {
        d.restore(&Checkpoint::load(path)?)?;
        println!("resumed at step {}", d.step);
    }
    let total = d.total_steps() as u64;
    let until = steps.unwrap_or(total).min(total);
    let metrics_path = out.join("metrics.jsonl");
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&metrics_path)?;
    let mut metrics = BufWriter::new(file);
    let every = cfg.train.checkpoint_every as u64;
    let report_every = (total / 20).max(1);
    while d.step < until {
        let m = d.train_step(&data)?;
        writeln!(metrics, "{}", m.to_json_line())?;
        if m.step % report_every == 0 || d.step == until {
            println!(
                "step {:>5}/{total}  lr {:.3e}  token {:.6}  spatial {:.6}  total {:.6}",
                m.step, m.lr, m.l_token, m.l_spatial, m.total
            );
        }
        if every > 0 && d.step % every == 0 && d.step < until {
            d.to_checkpoint().save(&out.join(format!("student_step{}.ckpt", d.step)))?;
        }
    }
    metrics.flush()?;
    let ckpt_path = out.join("student.ckpt");
    d.to_checkpoint().save(&ckpt_path)?;
    println!("wrote {} and {}", metrics_path.display(), ckpt_path.display());
    Ok(())
}

fn verify(cfg: &Config, fault: &str) -> Result<bool> {
    let report = run_verification(cfg, fault.parse::<Fault>()?)?;
    for c in &report.checks {
        println!("{} {:<36} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if let Some(e) = report.max_grad_rel_err() {
        println!("max gradient rel. err {e:.3e}");
    }
    let failed = report.checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed", report.checks.len());
    Ok(report.passed())
}

fn inspect(mut cfg: Config, out: &Path, checkpoint: &Path, teachers: Option<PathBuf>, batches: usize) -> Result<()> {
    create_dir(out)?;
    if teachers.is_some() {
        cfg.teachers.dir = teachers;
    }
    let data = cfg.training_data()?;
    let cfg = cfg.with_dataset_len(data.len());
    let mut d = Distiller::<f32>::new(cfg.clone(), build_teachers(&cfg, &data)?)?;
    d.restore(&Checkpoint::load(checkpoint)?)?;
    let stats = inspect_gating(&d, &data, batches)?;
    let path = out.join("gating.jsonl");
    let mut w = BufWriter::new(File::create(&path)?);
    for s in &stats {
        writeln!(w, "{}", s.to_json_line())?;
        println!(
            "teacher {}: mean {:.4}  std {:.4}  min {:.4}  max {:.4}  over {} tokens",
            s.teacher, s.mean, s.std, s.min, s.max, s.count
        );
    }
    w.flush()?;
    println!("wrote {}", path.display());
    Ok(())
}

fn probe(cfg: &Config, out: &Path, checkpoint: &Path) -> Result<()> {
    create_dir(out)?;
    let student = student_from_checkpoint(&Checkpoint::<f32>::load(checkpoint)?, cfg)?;
    let data = cfg.probe_data()?;
    let r = linear_probe(&student, &data, &cfg.probe)?;
    println!(
        "linear probe: train {:.4}  test {:.4}  ({} classes, {} train / {} test)",
        r.train_accuracy, r.test_accuracy, r.class_count, r.train_size, r.test_size
    );
    let path = out.join("probe.json");
    fs::write(&path, serde_json::to_string_pretty(&r).expect("report serializes"))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = load_config(&cli)?;
    let out = cli.out_dir.as_path();
    match cli.command {
        Command::InitTeachers { mode } => init_teachers(&cfg, out, mode)?,
        Command::Distill { teachers, resume, steps } => distill(cfg, out, teachers, resume, steps)?,
        Command::Verify { ref fault } => return verify(&cfg, fault),
        Command::InspectGating {
            ref checkpoint,
            teachers,
            batches,
        } => inspect(cfg, out, checkpoint, teachers, batches)?,
        Command::Probe { ref checkpoint } => probe(&cfg, out, checkpoint)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
