mod config;
mod report;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use xdomain_core::data::{export_domains, load_domains, load_png, pda_filter, synth_domains, DomainDataset, Style, SynthSpec};
use xdomain_core::engine::{
    ablation_sweep, cam_map, evaluate_classifier, evaluate_pretext, read_metrics, read_sweep, train, write_metrics,
    write_sweep, SweepParam,
};
use xdomain_core::model::{load_checkpoint, save_checkpoint};
use xdomain_core::permutations::{generate_permutation_set, load_set, save_set};
use xdomain_core::seeding;
use xdomain_core::transforms::{PretextTask, TaskKind};
use xdomain_core::{Error, Result};

use config::{load_config, RunConfig, CONFIG_KEYS};

#[derive(Parser)]
#[command(name = "xdomain", version, about = "Jigsaw and rotation self-supervision for cross-domain image classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Greedy maximal-Hamming permutation set, one permutation per line.
    GenPerms {
        #[arg(long)]
        tiles: usize,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthetic multi-style glyph domains written as PNG files plus a manifest.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 500)]
        per_domain: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Comma-separated subset of plain, inverted, colored, textured, sketch.
        #[arg(long, default_value = "plain,inverted,colored,textured,sketch")]
        styles: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model; writes model.ckpt, metrics.csv, config.toml and
    /// permutations.txt (when jigsaw is active) into --out.
    #[command(after_help = CONFIG_KEYS)]
    Train {
        #[arg(long)]
        config: PathBuf,
        /// `section.key=value`, same effect as editing the file.
        #[arg(long = "override")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Object accuracy on a labeled domain, or pretext accuracy with --pretext.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        domain: String,
        #[arg(long)]
        pretext: Option<TaskKind>,
        /// Permutation file of the checkpoint (needed for jigsaw).
        #[arg(long)]
        perms: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the result line to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One-parameter ablation over values and seeds; writes a sweep table.
    #[command(after_help = CONFIG_KEYS)]
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "override")]
        overrides: Vec<String>,
        /// alpha, beta, permutations, grid_n or alpha_t.
        #[arg(long)]
        param: SweepParam,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        /// Comma-separated seeds.
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Class activation heatmap of one image as a grayscale PNG.
    Cam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        class: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Markdown summary plus accuracy plots for metrics and sweep files.
    Report {
        #[arg(long)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        sweep: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Machine-readable failure class and exit code.
fn classify(e: &Error) -> (&'static str, u8) {
    match e {
        Error::Config(_) => ("config", 3),
        Error::Io(_) => ("io", 4),
        Error::ScenarioMismatch(_) => ("scenario", 5),
        Error::InvalidArgument(_) | Error::Infeasible(_) | Error::Stratification(_) => ("invalid", 6),
        Error::UnsupportedArchitecture(_) => ("unsupported", 6),
        Error::Format { .. } | Error::Image(_) => ("format", 7),
        Error::Checkpoint(_) => ("checkpoint", 8),
        Error::NonFinite { .. } => ("non_finite", 9),
    }
}

fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> Result<Vec<T>> {
    raw.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse().map_err(|_| Error::InvalidArgument(format!("bad {what} `{s}`"))))
        .collect()
}

fn find_domain<'a>(domains: &'a [DomainDataset], name: &str) -> Result<&'a DomainDataset> {
    domains
        .iter()
        .find(|d| d.domain() == Some(name))
        .ok_or_else(|| Error::Config(format!("no domain `{name}` in the dataset")))
}

struct RunData {
    sources: Vec<DomainDataset>,
    target: Option<DomainDataset>,
    eval: Option<DomainDataset>,
}

fn load_run_data(cfg: &RunConfig) -> Result<RunData> {
    let domains = load_domains(&cfg.data.dir, None)?;
    let sources = cfg.data.sources.iter().map(|n| find_domain(&domains, n).cloned()).collect::<Result<Vec<_>>>()?;
    let keep: Option<BTreeSet<usize>> = cfg.data.target_classes.as_ref().map(|c| c.iter().copied().collect());
    let restrict = |d: &DomainDataset| match &keep {
        Some(k) => pda_filter(d, k),
        None => Ok(d.clone()),
    };
    let target = if cfg.data.target.is_empty() {
        None
    } else {
        let parts = cfg.data.target.iter().map(|n| restrict(find_domain(&domains, n)?)).collect::<Result<Vec<_>>>()?;
        Some(DomainDataset::pooled(&parts.iter().collect::<Vec<_>>())?.unlabeled())
    };
    let eval = cfg.data.eval.as_ref().map(|n| restrict(find_domain(&domains, n)?)).transpose()?;
    Ok(RunData { sources, target, eval })
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenPerms { tiles, count, seed, out } => {
            let set = generate_permutation_set(tiles, count, seed)?;
            save_set(&set, &out)?;
            println!("wrote {} permutations over {tiles} tiles to {}", set.len(), out.display());
        }
        Command::SynthData { out, classes, per_domain, size, styles, seed } => {
            let styles: Vec<Style> = parse_list(&styles, "style")?;
            let spec = SynthSpec { num_classes: classes, per_domain_count: per_domain, image_size: size, styles };
            let domains = synth_domains(&spec, seed)?;
            export_domains(&out, &domains)?;
            println!("wrote {} domains of {per_domain} images to {}", domains.len(), out.display());
        }
        Command::Train { config, overrides, out } => {
            let cfg = load_config(&config, &overrides)?;
            let data = load_run_data(&cfg)?;
            let tc = cfg.train_config();
            let outcome = train(&tc, &data.sources, data.target.as_ref(), data.eval.as_ref())?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("config.toml"), cfg.to_canonical())?;
            save_checkpoint(&outcome.checkpoint, out.join("model.ckpt"))?;
            write_metrics(&outcome.history, out.join("metrics.csv"))?;
            if let Some(p) = &outcome.permutations {
                save_set(p, out.join("permutations.txt"))?;
            }
            let last = outcome.history.last().expect("at least one epoch");
            println!(
                "config_hash={} epochs={} val_acc={} target_acc={}",
                outcome.checkpoint.config_hash,
                last.epoch,
                last.val_acc,
                last.target_acc.map_or("-".into(), |a| a.to_string())
            );
        }
        Command::Eval { checkpoint, data, domain, pretext, perms, seed, out } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let domains = load_domains(&data, Some(ckpt.model.spec.num_classes))?;
            let ds = find_domain(&domains, &domain)?;
            let line = match pretext {
                None => format!("accuracy={} config_hash={}", evaluate_classifier(&ckpt.model, ds)?, ckpt.config_hash),
                Some(kind) => {
                    let task = match kind {
                        TaskKind::Rotation => PretextTask::Rotation,
                        TaskKind::Jigsaw => {
                            let path = perms.ok_or_else(|| Error::InvalidArgument("jigsaw evaluation needs --perms".into()))?;
                            let set = load_set(path)?;
                            let grid = (set.n_tiles() as f64).sqrt().round() as usize;
                            PretextTask::jigsaw(grid, Arc::new(set))?
                        }
                    };
                    let mut rng = seeding::stream(seed, &[seeding::tag("cli-eval-pretext")]);
                    format!(
                        "pretext={kind} accuracy={} config_hash={}",
                        evaluate_pretext(&ckpt.model, ds, &task, &mut rng)?,
                        ckpt.config_hash
                    )
                }
            };
            println!("{line}");
            if let Some(out) = out {
                fs::write(out, format!("{line}\n"))?;
            }
        }
        Command::Sweep { config, overrides, param, values, seeds, out } => {
            let cfg = load_config(&config, &overrides)?;
            let data = load_run_data(&cfg)?;
            let values: Vec<f64> = parse_list(&values, "value")?;
            let seeds: Vec<u64> = parse_list(&seeds, "seed")?;
            let rows = ablation_sweep(
                param,
                &values,
                &cfg.train_config(),
                &seeds,
                &data.sources,
                data.target.as_ref(),
                data.eval.as_ref(),
            )?;
            write_sweep(param, &rows, &out)?;
            for r in &rows {
                println!("{param}={} mean_acc={} std_acc={}", r.value, r.mean, r.std);
            }
        }
        Command::Cam { checkpoint, image, class, out } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let img = load_png(&image)?;
            let heat = cam_map(&ckpt.model, &img, class)?;
            let (h, w) = heat.dim();
            let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
                image::Luma([(heat[[y as usize, x as usize]] * 255.0).round() as u8])
            });
            buf.save(&out).map_err(Error::from)?;
            println!("wrote {h}x{w} heatmap to {}", out.display());
        }
        Command::Report { metrics, sweep, out } => {
            if metrics.is_empty() && sweep.is_empty() {
                return Err(Error::InvalidArgument("report needs at least one --metrics or --sweep file".into()));
            }
            fs::create_dir_all(&out)?;
            let mut summary = String::from("# Report\n\n");
            for (i, path) in metrics.iter().enumerate() {
                let records = read_metrics(path)?;
                report::metrics_report(&plot_name("metrics", i, path), &records, &out, &mut summary)?;
            }
            for (i, path) in sweep.iter().enumerate() {
                let (param, rows) = read_sweep(path)?;
                report::sweep_report(&plot_name("sweep", i, path), param, &rows, &out, &mut summary)?;
            }
            fs::write(out.join("summary.md"), summary)?;
            println!("wrote report to {}", out.display());
        }
    }
    Ok(())
}

fn plot_name(kind: &str, i: usize, path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or(kind);
    format!("{kind}{i}_{stem}")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = classify(&e);
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: kind={kind} code={code} msg={msg}");
            ExitCode::from(code)
        }
    }
}
