use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use wavepaint::MaskKind;
use wavepaint_cli::commands;
use wavepaint_cli::server::{self, ServeOptions, DEFAULT_MAX_BODY_BYTES};

/// Image inpainting with wavelet token mixing.
#[derive(Parser)]
#[command(name = "wavepaint", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from a TOML experiment file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Inpaint one image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Grayscale PNG, 255 = known, 0 = hole.
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a directory of images under generated masks.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, value_parser = parse_kind)]
        mask_kind: MaskKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// TSV report path; printed to stdout when absent.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Convolutional feature weights for the perceptual metrics.
        #[arg(long)]
        feature_weights: Option<PathBuf>,
    },
    /// Write a random free-form mask.
    Genmask {
        #[arg(long, value_parser = parse_kind)]
        kind: MaskKind,
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the HTTP inference API.
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        #[arg(long)]
        static_dir: Option<PathBuf>,
        /// Forward passes allowed at once.
        #[arg(long, default_value_t = 2)]
        workers: usize,
        #[arg(long, default_value_t = DEFAULT_MAX_BODY_BYTES)]
        max_body_bytes: usize,
    },
}

fn parse_kind(s: &str) -> Result<MaskKind, String> {
    s.parse().map_err(|e: wavepaint::Error| e.to_string())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Train { config } => {
            let r = commands::train(&config)?;
            if let Some(last) = r.history.last() {
                println!("epoch {} [{}] loss {:.6}", last.epoch, last.optimizer, last.loss);
            }
            if r.skipped_files > 0 {
                println!("skipped {} unreadable files", r.skipped_files);
            }
            println!("metrics: {}", r.metrics_log.display());
        }
        Cmd::Infer { ckpt, image, mask, out } => {
            commands::infer(&ckpt, &image, &mask, &out)?;
            println!("wrote {}", out.display());
        }
        Cmd::Eval { ckpt, dir, mask_kind, seed, report, feature_weights } => {
            let inp = commands::load_inpainter(&ckpt)?;
            let r = commands::evaluate(&inp, &dir, mask_kind, seed, feature_weights.as_deref())?;
            let tsv = r.to_tsv();
            match report {
                Some(p) => {
                    std::fs::write(&p, tsv)?;
                    println!(
                        "{} images: l1 {:.5} l2 {:.5} lpips {:.5} fid {:.5}",
                        r.rows.len(),
                        r.mean_l1(),
                        r.mean_l2(),
                        r.mean_lpips(),
                        r.fid.value
                    );
                }
                None => print!("{tsv}"),
            }
        }
        Cmd::Genmask { kind, height, width, seed, out } => {
            let g = commands::genmask(kind, height, width, seed, &out)?;
            println!("coverage {:.4} after {} attempts", g.coverage, g.attempts);
        }
        Cmd::Serve { ckpt, port, host, static_dir, workers, max_body_bytes } => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(server::serve(ServeOptions {
                checkpoint: ckpt,
                addr: SocketAddr::new(host, port),
                static_dir,
                workers,
                max_body_bytes,
            }))?;
        }
    }
    Ok(())
}

/// 3 for a missing input file, 4 for a bad config, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        let io = match cause.downcast_ref::<wavepaint::Error>() {
            Some(wavepaint::Error::Config(_)) => return 4,
            Some(wavepaint::Error::Io(e)) => Some(e),
            _ => cause.downcast_ref::<std::io::Error>(),
        };
        if io.is_some_and(|e| e.kind() == std::io::ErrorKind::NotFound) {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("WAVEPAINT_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
