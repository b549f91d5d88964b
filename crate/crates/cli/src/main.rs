use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{ArgAction, Args, Parser, Subcommand};

use urbanssl::bench::{
    choose_classes, load_dataset, load_encoder, probe_classes, read_report_csv, render_markdown, run_experiment,
    synthetic_cities, ExperimentConfig, ExperimentKind, ExperimentReport, ReportRow, Workflow,
};
use urbanssl::geo::load_cities;
use urbanssl::tiles::{build_manifest_with, render_synthetic_tile, Domain, ManifestOptions, StyleSpec};

#[derive(Parser)]
#[command(name = "urbanssl", version, about = "Self-supervised pretraining and probing on city tiles")]
struct Cli {
    /// Never contact the static-map service; tiles are rendered or read from the cache.
    #[arg(long, global = true, default_value_t = true, action = ArgAction::Set)]
    offline: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample tile locations and write a dataset manifest.
    Manifest(ManifestArgs),
    /// Pretrain one workflow and write a checkpoint plus its loss curve.
    Pretrain(PretrainArgs),
    /// Fit a linear probe on a frozen checkpoint.
    Probe(ProbeArgs),
    /// Run a full experiment from a config file.
    Experiment(ExperimentArgs),
    /// Collect report CSVs under a results directory into one table.
    Report(ReportArgs),
}

#[derive(Args)]
struct ManifestArgs {
    /// City list CSV (name,country,latitude,longitude,population).
    #[arg(long, conflicts_with = "synthetic")]
    cities_file: Option<PathBuf>,
    /// Use this many generated cities instead of a city list.
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 0.8)]
    split: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    tile_px: u32,
    #[arg(long)]
    out: PathBuf,
    /// Also populate this tile cache.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

/// Dataset and budget knobs shared by `pretrain` and `probe`.
#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "satellite")]
    domain: Domain,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    cities: Option<usize>,
    #[arg(long)]
    pretrain_cities: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    tile_px: Option<u32>,
}

impl DataArgs {
    fn config(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => ExperimentConfig::desk(ExperimentKind::Generalizability),
        };
        cfg.domain = self.domain;
        cfg.seeds = vec![self.seed];
        if let Some(n) = self.cities {
            cfg.data.cities = n;
            cfg.pretrain.cities = cfg.pretrain.cities.min(n);
        }
        if let Some(n) = self.pretrain_cities {
            cfg.pretrain.cities = n;
        }
        if let Some(n) = self.samples {
            cfg.data.samples_per_city = n;
        }
        if let Some(px) = self.tile_px {
            cfg.data.tile_px = px;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    workflow: Workflow,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    queue_size: Option<usize>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "results/pretrain")]
    out: PathBuf,
}

#[derive(Args)]
struct ProbeArgs {
    /// Checkpoint written by `pretrain`; omit to probe a random initialization.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Probe only the pretraining cities instead of all of them.
    #[arg(long)]
    seen_only: bool,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "results/probe")]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, default_value = "results")]
    results: PathBuf,
    /// Write the markdown table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn manifest(args: ManifestArgs, offline: bool) -> anyhow::Result<()> {
    let cities = match (&args.cities_file, args.synthetic) {
        (Some(p), _) => load_cities(p)?,
        (None, Some(n)) => synthetic_cities(n, args.seed),
        (None, None) => bail!("pass --cities-file or --synthetic"),
    };
    let opts = ManifestOptions {
        samples_per_city: args.samples,
        split_ratio: args.split,
        seed: args.seed,
        size_px: args.tile_px,
        ..Default::default()
    };
    let manifest = build_manifest_with(&cities, &opts)?;
    manifest.save(&args.out)?;
    if let Some(cache) = &args.cache_dir {
        if offline {
            let style = StyleSpec::default();
            for r in &manifest.records {
                let path = cache.join(&r.cache_path);
                if path.exists() {
                    continue;
                }
                let city = manifest.city(&r.city_name).ok_or_else(|| anyhow!("unknown city {}", r.city_name))?;
                let img = render_synthetic_tile(city, &r.point, r.domain, &style, r.size_px as usize, manifest.seed);
                std::fs::create_dir_all(path.parent().expect("cache paths have a parent"))?;
                std::fs::write(&path, img.to_png_bytes()?)?;
            }
        } else {
            fetch_all(&manifest, cache)?;
        }
    }
    eprintln!("wrote {} records for {} cities to {}", manifest.records.len(), manifest.cities.len(), args.out.display());
    Ok(())
}

#[cfg(feature = "online")]
fn fetch_all(manifest: &urbanssl::tiles::DatasetManifest, cache: &Path) -> anyhow::Result<()> {
    use std::time::Duration;
    use urbanssl::tiles::{TileFetcher, TileSource, UreqTransport, API_KEY_ENV};
    let api_key = std::env::var(API_KEY_ENV).with_context(|| format!("{API_KEY_ENV} is not set"))?;
    let fetcher = TileFetcher::new(Box::new(UreqTransport::new(Duration::from_secs(30))), 10.0);
    let source = TileSource::Online { cache_dir: cache.to_path_buf(), fetcher, style: StyleSpec::default(), api_key };
    for r in &manifest.records {
        source.load(manifest, r)?;
    }
    Ok(())
}

#[cfg(not(feature = "online"))]
fn fetch_all(_: &urbanssl::tiles::DatasetManifest, _: &Path) -> anyhow::Result<()> {
    bail!("this build has no network client; rebuild with --features online or keep --offline")
}

fn pretrain(args: PretrainArgs) -> anyhow::Result<()> {
    let mut cfg = args.data.config()?;
    if let Some(s) = args.steps {
        cfg.pretrain.steps = s;
        cfg.pretrain.dino_steps = Some(s);
    }
    if let Some(b) = args.batch_size {
        cfg.pretrain.batch_size = b;
    }
    if let Some(q) = args.queue_size {
        cfg.pretrain.queue_size = q;
    }
    cfg.validate()?;
    let seed = args.data.seed;
    let data = load_dataset(&cfg, cfg.domain, seed)?;
    let subset = choose_classes(data.bank.class_names.len(), cfg.pretrain.cities, seed)?;
    let pre = urbanssl::bench::pretrain(&cfg, args.workflow, &data.bank, &subset, seed, Some(&args.out))?;
    eprintln!(
        "{}: {} steps on {} cities, {} tiles served, {} from held-out cities",
        args.workflow,
        pre.loss.len(),
        subset.len(),
        pre.tiles_served,
        pre.holdout_served
    );
    Ok(())
}

fn probe(args: ProbeArgs) -> anyhow::Result<()> {
    let mut cfg = args.data.config()?;
    if let Some(e) = args.epochs {
        cfg.probe.epochs = e;
    }
    cfg.validate()?;
    let seed = args.data.seed;
    let encoder = match &args.checkpoint {
        Some(p) => load_encoder(p).with_context(|| format!("loading {}", p.display()))?,
        None => {
            let data = load_dataset(&cfg, cfg.domain, seed)?;
            let all: BTreeSet<usize> = (0..data.bank.class_names.len()).collect();
            let pre = urbanssl::bench::pretrain(&cfg, Workflow::RandomInit, &data.bank, &all, seed, None)?;
            pre.encoder
        }
    };
    let data = load_dataset(&cfg, cfg.domain, seed)?;
    let n = data.bank.class_names.len();
    let classes =
        if args.seen_only { choose_classes(n, cfg.pretrain.cities, seed)? } else { (0..n).collect::<BTreeSet<_>>() };
    let outcome = probe_classes(&cfg, &encoder, &data.bank, &classes, seed)?;
    if !outcome.frozen_ok {
        bail!("encoder weights changed during probing");
    }
    outcome.result.save_json(&args.out.join("probe.json"))?;
    let names: Vec<String> = classes.iter().map(|&c| data.bank.class_names[c].clone()).collect();
    outcome.result.write_per_class_csv(&args.out.join("per_class.csv"), &names)?;
    println!("top1 {:.4} on {} cities", outcome.result.top1_accuracy, classes.len());
    Ok(())
}

fn experiment(args: ExperimentArgs) -> anyhow::Result<()> {
    let mut cfg = ExperimentConfig::load(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    }
    if let Some(s) = args.steps {
        cfg.pretrain.steps = s;
    }
    let report = run_experiment(&cfg, Some(&args.out))?;
    print!("{}", render_markdown(&report));
    Ok(())
}

fn collect_reports(dir: &Path, out: &mut Vec<PathBuf>) -> anyhow::Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_reports(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "report.csv") {
            out.push(p);
        }
    }
    Ok(())
}

fn report(args: ReportArgs) -> anyhow::Result<()> {
    if !args.results.is_dir() {
        bail!("{} is not a directory", args.results.display());
    }
    // Experiment-level reports sit directly under <results>/<experiment>/.
    let mut paths = Vec::new();
    collect_reports(&args.results, &mut paths)?;
    let top: Vec<&PathBuf> =
        paths.iter().filter(|p| p.parent().and_then(Path::parent).is_some_and(|g| g == args.results)).collect();
    let chosen: Vec<&PathBuf> = if top.is_empty() { paths.iter().collect() } else { top };
    if chosen.is_empty() {
        bail!("no report.csv found under {}", args.results.display());
    }
    let mut rows: Vec<ReportRow> = Vec::new();
    for p in chosen {
        rows.extend(read_report_csv(p).with_context(|| format!("reading {}", p.display()))?);
    }
    let gap = if rows.iter().map(|r| r.domain).collect::<BTreeSet<_>>().len() == Domain::ALL.len() {
        urbanssl::bench::domain_gap_table(&urbanssl::bench::gap_inputs(&rows)).unwrap_or_default()
    } else {
        Vec::new()
    };
    let md = render_markdown(&ExperimentReport { rows, gap });
    match &args.out {
        Some(p) => std::fs::write(p, md)?,
        None => print!("{md}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Manifest(a) => manifest(a, cli.offline),
        Command::Pretrain(a) => pretrain(a),
        Command::Probe(a) => probe(a),
        Command::Experiment(a) => experiment(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
