//! `matchavg` command line: corpus synthesis, training, denoising,
//! evaluation, ablation and score-map dumps.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use matchavg::harness::ablate::{ablate_window, ablation_table, score_maps, ScoreAggregate};
use matchavg::harness::config::{Settings, SigmaMode, Stage};
use matchavg::harness::corpus::{synth_corpus, write_corpus, Corpus};
use matchavg::harness::metrics::{evaluate_named, psnr};
use matchavg::harness::pipeline::{load_matcher, load_refiner, read_image_dir};
use matchavg::harness::train::{denoise_image, noisy_set, refine_samples, train_matcher, train_refiner};
use matchavg::imgio::{add_noise, read_image, write_image, NoiseModel, PatchRef};
use matchavg::Error;

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_MISSING: u8 = 3;
const EXIT_CONFIG: u8 = 4;
const EXIT_CHECKPOINT: u8 = 5;

#[derive(Parser)]
#[command(name = "matchavg", version, about = "Sub-band match-and-average image denoising")]
struct Cli {
    /// `key = value` settings file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct NoiseArgs {
    /// Fixed noise level.
    #[arg(long, conflicts_with = "blind")]
    sigma: Option<f64>,

    /// Blind mode: noise level drawn uniformly from [0, 55].
    #[arg(long)]
    blind: bool,

    /// Search window radius.
    #[arg(long)]
    window: Option<usize>,

    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic train/val corpus as PNG files.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        kind: Option<String>,
    },
    /// Pre-train and fine-tune the matcher.
    TrainMatch {
        #[arg(long)]
        out: PathBuf,
        /// Corpus directory with `train/` and `val/`; synthesized when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Skip pre-training (random-init fine-tuning).
        #[arg(long)]
        no_pretrain: bool,
        #[command(flatten)]
        noise: NoiseArgs,
    },
    /// Train the refiner on stage-1 outputs of a frozen matcher.
    TrainRefine {
        #[arg(long)]
        matcher: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        noise: NoiseArgs,
    },
    /// Denoise one image.
    Denoise {
        #[arg(long)]
        matcher: PathBuf,
        #[arg(long)]
        refiner: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// `match` or `full`.
        #[arg(long)]
        stage: Option<String>,
        /// Clean reference; prints a PSNR line.
        #[arg(long)]
        clean: Option<PathBuf>,
        /// Treat the input as clean and add noise at `--sigma` first.
        #[arg(long)]
        add_noise: bool,
        #[command(flatten)]
        noise: NoiseArgs,
    },
    /// Metrics of a denoised directory against a clean one.
    Eval {
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        denoised: PathBuf,
        #[arg(long)]
        noisy: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Stage-1 PSNR and runtime per window radius.
    Ablate {
        #[arg(long)]
        matcher: PathBuf,
        /// Directory of clean validation images; synthesized when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "7,11,15")]
        radii: Vec<usize>,
        #[command(flatten)]
        noise: NoiseArgs,
    },
    /// Score maps around one reference patch, one PNG per aggregate.
    DumpScores {
        #[arg(long)]
        matcher: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        row: usize,
        #[arg(long)]
        col: usize,
        #[arg(long, value_delimiter = ',', default_value = "all")]
        aggregate: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        noise: NoiseArgs,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING,
        Error::Config { .. } => EXIT_CONFIG,
        Error::Checkpoint(_) => EXIT_CHECKPOINT,
        _ => EXIT_RUNTIME,
    }
}

fn settings(cli: &Cli, noise: Option<&NoiseArgs>) -> CliResult<Settings> {
    let mut s = match &cli.config {
        Some(p) => Settings::from_file(p)?,
        None => Settings::default(),
    };
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        s.set(k.trim(), v).map_err(|m| Failure::Usage(format!("--set {kv}: {m}")))?;
    }
    if let Some(n) = noise {
        if let Some(sigma) = n.sigma {
            s.denoise.sigma_mode = SigmaMode::Fixed(sigma);
        }
        if n.blind {
            s.denoise.sigma_mode = SigmaMode::blind();
        }
        if let Some(w) = n.window {
            s.denoise.window_radius = w;
        }
        if let Some(seed) = n.seed {
            s.denoise.seed = seed;
        }
    }
    s.validate()?;
    Ok(s)
}

fn load_corpus(data: Option<&Path>, s: &Settings) -> CliResult<Corpus> {
    match data {
        Some(dir) => {
            let train = read_image_dir(&dir.join("train"))?.1;
            let val_dir = dir.join("val");
            let val = if val_dir.is_dir() { read_image_dir(&val_dir)?.1 } else { Vec::new() };
            Ok(Corpus { train, val })
        }
        None => Ok(synth_corpus(&s.corpus)?),
    }
}

fn fixed_sigma(s: &Settings) -> f64 {
    match s.denoise.sigma_mode {
        SigmaMode::Fixed(v) => v,
        SigmaMode::Blind { low, high } => 0.5 * (low + high),
    }
}

fn meta(pairs: &[(&str, String)]) -> Vec<(String, String)> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Synth { out, count, size, kind } => {
            let mut s = settings(cli, None)?;
            if let Some(c) = count {
                s.corpus.count = *c;
            }
            if let Some(z) = size {
                s.corpus.size = *z;
            }
            if let Some(k) = kind {
                s.corpus.kind = k.parse().map_err(Failure::Usage)?;
            }
            let corpus = synth_corpus(&s.corpus)?;
            write_corpus(&corpus, out)?;
            println!("wrote {} train and {} val images to {}", corpus.train.len(), corpus.val.len(), out.display());
        }
        Command::TrainMatch {
            out,
            data,
            no_pretrain,
            noise,
        } => {
            let s = settings(cli, Some(noise))?;
            let corpus = load_corpus(data.as_deref(), &s)?;
            let start = Instant::now();
            let run = train_matcher(&corpus.train, &corpus.val, &s, !no_pretrain)?;
            let last = |h: &[f64]| h.last().map(|v| format!("{v:.6}")).unwrap_or_else(|| "none".into());
            let ckpt = run.matcher.to_checkpoint(
                meta(&[
                    ("sigma_mode", s.denoise.sigma_mode.to_string()),
                    ("seed", s.denoise.seed.to_string()),
                    ("pretrain_steps", if *no_pretrain { 0 } else { s.schedule.pretrain_steps }.to_string()),
                    ("finetune_steps", s.schedule.finetune_steps.to_string()),
                    ("train_radius", s.schedule.train_radius.to_string()),
                    ("final_loss", last(&run.finetune.losses)),
                ]),
                true,
            );
            ckpt.save(out)?;
            println!(
                "trained matcher in {:.1}s: pretrain loss {}, finetune loss {}; saved {}",
                start.elapsed().as_secs_f64(),
                last(&run.pretrain.losses),
                last(&run.finetune.losses),
                out.display()
            );
        }
        Command::TrainRefine {
            matcher,
            out,
            data,
            noise,
        } => {
            let s = settings(cli, Some(noise))?;
            let m = load_matcher(matcher)?;
            let corpus = load_corpus(data.as_deref(), &s)?;
            let start = Instant::now();
            let samples = refine_samples(&m, &corpus.train, &s)?;
            let (refiner, hist) = train_refiner(&samples, &s)?;
            let final_loss = hist.losses.last().copied().unwrap_or(f64::NAN);
            refiner
                .to_checkpoint(
                    m.params.digest(),
                    meta(&[
                        ("sigma_mode", s.denoise.sigma_mode.to_string()),
                        ("window_radius", s.denoise.window_radius.to_string()),
                        ("refine_steps", s.schedule.refine_steps.to_string()),
                        ("final_loss", format!("{final_loss:.6}")),
                    ]),
                    true,
                )
                .save(out)?;
            println!(
                "trained refiner in {:.1}s: loss {final_loss:.6}; saved {}",
                start.elapsed().as_secs_f64(),
                out.display()
            );
        }
        Command::Denoise {
            matcher,
            refiner,
            input,
            output,
            stage,
            clean,
            add_noise: synthesize,
            noise,
        } => {
            let s = settings(cli, Some(noise))?;
            let stage = match stage {
                Some(v) => v.parse::<Stage>().map_err(Failure::Usage)?,
                None => s.denoise.stage,
            };
            let m = load_matcher(matcher)?;
            let r = match (stage, refiner) {
                (Stage::Full, Some(p)) => Some(load_refiner(p, &m)?),
                (Stage::Full, None) => {
                    return Err(Failure::Usage("--stage full needs --refiner (or use --stage match)".into()))
                }
                (Stage::MatchOnly, _) => None,
            };
            let mut image = read_image(input)?;
            let mut reference = clean.as_ref().map(read_image).transpose()?;
            if *synthesize {
                let noisy = add_noise(&image, NoiseModel::new(fixed_sigma(&s), s.denoise.seed));
                reference.get_or_insert(image);
                image = noisy;
            }
            let (s1, full) = denoise_image(&image, &m, r.as_ref(), stage, s.denoise.window_radius)?;
            let result = full.unwrap_or(s1);
            write_image(&result, output)?;
            if let Some(c) = reference {
                println!(
                    "psnr {:.4} dB (noisy {:.4} dB) -> {}",
                    psnr(&c, &result)?,
                    psnr(&c, &image)?,
                    output.display()
                );
            }
        }
        Command::Eval {
            clean,
            denoised,
            noisy,
            csv,
        } => {
            let (names, clean_imgs) = read_image_dir(clean)?;
            let (dnames, den) = read_image_dir(denoised)?;
            if names != dnames {
                return Err(Failure::Lib(Error::Contract(format!(
                    "{} and {} hold different file names",
                    clean.display(),
                    denoised.display()
                ))));
            }
            let noisy_imgs = match noisy {
                Some(d) => read_image_dir(d)?.1,
                None => den.clone(),
            };
            let report = evaluate_named(&names, &clean_imgs, &noisy_imgs, &den)?;
            print!("{}", report.to_table());
            if let Some(p) = csv {
                std::fs::write(p, report.to_csv()).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
            }
        }
        Command::Ablate {
            matcher,
            data,
            radii,
            noise,
        } => {
            let s = settings(cli, Some(noise))?;
            if radii.is_empty() || radii.contains(&0) {
                return Err(Failure::Usage("--radii needs positive radii".into()));
            }
            let m = load_matcher(matcher)?;
            let clean = match data {
                Some(d) => read_image_dir(d)?.1,
                None => synth_corpus(&s.corpus)?.val,
            };
            let noisy = noisy_set(&clean, fixed_sigma(&s), s.denoise.seed);
            print!("{}", ablation_table(&ablate_window(&m, &clean, &noisy, radii)?));
        }
        Command::DumpScores {
            matcher,
            input,
            row,
            col,
            aggregate,
            out,
            noise,
        } => {
            let s = settings(cli, Some(noise))?;
            let aggs = aggregate
                .iter()
                .map(|a| a.parse::<ScoreAggregate>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(Failure::Usage)?;
            let m = load_matcher(matcher)?;
            let image = read_image(input)?;
            let maps = score_maps(&m, &image, PatchRef::patch(*row, *col), s.denoise.window_radius, &aggs)?;
            std::fs::create_dir_all(out).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
            for (a, map) in aggs.iter().zip(&maps) {
                let p = out.join(format!("scores_{a}.png"));
                write_image(map, &p)?;
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_RUNTIME)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
