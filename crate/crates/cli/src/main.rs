use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use clap::{Parser, Subcommand};
use featbridge::config::Config;
use featbridge::dataset::write_atomic;
use featbridge::{pipeline, Error, Result};

#[derive(Parser)]
#[command(name = "featbridge", about = "Feature-conditioned sim-to-real video translation")]
struct Cli {
    /// Configuration file (`[section]` / `key = value`).
    #[arg(short, long)]
    config: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the toy paired dataset.
    Gen,
    /// Fit and save the PCA basis.
    FitPca,
    /// Pretrain the denoiser, then train aligner and control branch.
    Train {
        /// Continue from a checkpoint instead of starting over.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Translate every sim clip in the dataset.
    Infer {
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Chunked generation with latent carry-over.
        #[arg(long)]
        long: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score generated clips against a reference dataset.
    Eval {
        #[arg(long)]
        gen_dir: PathBuf,
        #[arg(long)]
        ref_dir: Option<PathBuf>,
    },
    /// Print every intermediate tensor shape for the config.
    Shapes,
}

fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}

fn write_run_txt(dir: &Path, cfg: &Config, command: &str, extra: &[(&str, String)]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut s = String::new();
    let _ = writeln!(s, "# command = {command}");
    let _ = writeln!(s, "# git = {}", git_describe());
    for (k, v) in extra {
        let _ = writeln!(s, "# {k} = {v}");
    }
    s.push_str(&cfg.to_text());
    write_atomic(&dir.join("run.txt"), s.as_bytes())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = Config::read(&cli.config)?;
    let root = cfg.root();
    match cli.cmd {
        Cmd::Gen => {
            let m = pipeline::gen(&cfg)?;
            write_run_txt(&root, &cfg, "gen", &[("data.seed", cfg.data.seed.to_string())])?;
            println!("wrote {} clips to {}", m.len(), root.display());
        }
        Cmd::FitPca => {
            let b = pipeline::fit_pca(&cfg)?;
            write_run_txt(&root, &cfg, "fit-pca", &[("pca.seed", cfg.pca.seed.to_string())])?;
            println!(
                "basis {} (k_m = {}, C = {}) -> {}",
                featbridge::pca::basis_hash(&b),
                b.k_max(),
                b.dim(),
                cfg.basis_path().display()
            );
        }
        Cmd::Train { resume } => {
            let dir = pipeline::train_dir(&cfg);
            let seeds = [("train.seed", cfg.train.seed.to_string())];
            write_run_txt(&dir, &cfg, "train", &seeds)?;
            let meta = vec![("git".to_string(), git_describe())];
            let path = pipeline::train(&cfg, resume.as_deref(), &meta)?;
            println!("final checkpoint {}", path.display());
        }
        Cmd::Infer { k, seed, long, out } => {
            let k = k.unwrap_or(cfg.infer.k);
            let seed = seed.unwrap_or(cfg.infer.seed);
            let out = out.unwrap_or_else(|| cfg.resolve(&cfg.infer.out));
            if k == 0 || k > cfg.pca.k_max {
                return Err(Error::config(format!(
                    "--k {k} is outside the valid range [1, {}]",
                    cfg.pca.k_max
                )));
            }
            write_run_txt(
                &out,
                &cfg,
                "infer",
                &[("k", k.to_string()), ("seed", seed.to_string()), ("long", long.to_string())],
            )?;
            let m = pipeline::infer(&cfg, k, seed, long, &out)?;
            println!("translated {} clips to {}", m.len(), out.display());
        }
        Cmd::Eval { gen_dir, ref_dir } => {
            let ref_dir = ref_dir.unwrap_or_else(|| root.clone());
            write_run_txt(
                &gen_dir,
                &cfg,
                "eval",
                &[("ref_dir", ref_dir.display().to_string()), ("eval.seed", cfg.eval.seed.to_string())],
            )?;
            let report = pipeline::eval(&cfg, &gen_dir, &ref_dir)?;
            let text = report.to_text();
            write_atomic(&gen_dir.join("eval.txt"), text.as_bytes())?;
            print!("{text}");
        }
        Cmd::Shapes => {
            let report = pipeline::shapes(&cfg)?;
            write_run_txt(&root, &cfg, "shapes", &[])?;
            print!("{}", report.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            log::debug!("{e:?}");
            eprintln!("error: {msg}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
