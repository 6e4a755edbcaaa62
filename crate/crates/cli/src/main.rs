use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use omrnet::dataset::{ingest_dataset, list_pngs, load_png, save_png, CategoryMap, DatasetManifest, Split};
use omrnet::entropy::Bitstream;
use omrnet::evaluation::{
    ablation_run, bd_rate, block_variants, bpp, component_variants, evaluate_model, rd_plot_svg, records_jsonl, RdCurve,
};
use omrnet::network::OmrNet;
use omrnet::synthetic::text_image;
use omrnet::training::{train_loop, RunDir, TrainConfig};
use omrnet::Tensor32;

#[derive(Parser)]
#[command(name = "omrnet", version, about = "Dual-frequency learned image codec for screen content")]
struct Cli {
    /// Log level when RUST_LOG is not set.
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model into a run directory.
    Train(TrainArgs),
    /// Compress a PNG into an .omr file.
    Encode {
        input: PathBuf,
        #[arg(short, long)]
        checkpoint: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Decode an .omr file to PNG.
    Decode {
        input: PathBuf,
        #[arg(short, long)]
        checkpoint: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Encode and decode every PNG of a directory (or one file) and report
    /// PSNR / bpp as JSON lines.
    Eval {
        #[arg(short, long)]
        checkpoint: PathBuf,
        #[arg(short, long)]
        data: PathBuf,
        /// Write records here instead of stdout; the summary goes next to it.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Bjøntegaard delta rate between two RD curves given as JSON.
    Bdrate {
        anchor: PathBuf,
        test: PathBuf,
        /// Also write an SVG plot of both curves.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Train and compare architecture variants at toy scale.
    Ablate(AblateArgs),
    /// Scan a dataset directory and write a manifest.
    Ingest {
        root: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// JSON file mapping path prefixes to categories.
        #[arg(long)]
        categories: Option<PathBuf>,
        /// Images smaller than this in either dimension are flagged.
        #[arg(long, default_value_t = 256)]
        min_size: u32,
    },
}

#[derive(Args, Clone)]
struct Overrides {
    /// JSON training config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Total latent channels N.
    #[arg(long)]
    channels: Option<usize>,
    /// Total optimisation steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Small model, 64x64 patches, short schedule.
    #[arg(long)]
    desk_scale: bool,
    /// Training images: a directory of PNGs or a manifest JSON. Without it,
    /// synthetic screen-content images are generated.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Number of synthetic images when no data is given.
    #[arg(long, default_value_t = 8)]
    synthetic: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Run directory.
    #[arg(short, long)]
    out: PathBuf,
    /// Reuse a non-empty run directory.
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    o: Overrides,
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Components,
    Blocks,
    All,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
    #[arg(long, value_enum, default_value_t = Suite::All)]
    suite: Suite,
    #[command(flatten)]
    o: Overrides,
}

const DESK_STEPS: usize = 200;

fn build_config(o: &Overrides) -> Result<TrainConfig> {
    let mut cfg = match &o.config {
        Some(p) => TrainConfig::from_json_file(p).with_context(|| format!("reading config {}", p.display()))?,
        None if o.desk_scale => TrainConfig::desk_scale(o.steps.unwrap_or(DESK_STEPS)),
        None => TrainConfig::default(),
    };
    if o.desk_scale && o.config.is_some() {
        let d = TrainConfig::desk_scale(o.steps.unwrap_or(DESK_STEPS));
        cfg.model.n = d.model.n;
        cfg.patch = d.patch;
        cfg.batch_size = d.batch_size;
        cfg.epochs = d.epochs;
        cfg.steps_per_epoch = d.steps_per_epoch;
        cfg.max_steps = d.max_steps;
    }
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(l) = o.lambda {
        cfg.model.lambda = l;
    }
    if let Some(n) = o.channels {
        cfg.model.n = n;
    }
    if let Some(s) = o.steps {
        cfg.max_steps = Some(s);
        if o.desk_scale {
            cfg.steps_per_epoch = Some(s.div_ceil(cfg.epochs));
        }
    }
    cfg.validate().context("invalid training configuration")?;
    Ok(cfg)
}

fn load_training_images(o: &Overrides, cfg: &TrainConfig) -> Result<Vec<Tensor32>> {
    let Some(data) = &o.data else {
        info!("no --data given, generating {} synthetic {}x{} images", o.synthetic, cfg.patch, cfg.patch);
        return Ok((0..o.synthetic as u64).map(|i| text_image(cfg.patch, cfg.patch, cfg.seed.wrapping_add(i))).collect());
    };
    let paths = if data.is_file() {
        DatasetManifest::from_json_file(data)?.paths(Split::Train)
    } else {
        list_pngs(data)?
    };
    if paths.is_empty() {
        bail!("no training images found in {}", data.display());
    }
    paths.iter().map(|p| load_png(p).with_context(|| format!("loading {}", p.display()))).collect()
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    let mut s = serde_json::to_vec_pretty(v)?;
    s.push(b'\n');
    std::fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = build_config(&a.o)?;
    let images = load_training_images(&a.o, &cfg)?;
    let run = RunDir::create(&a.out, a.force)?;
    write_json(&run.root.join("config.json"), &cfg)?;
    let mut model = OmrNet::<f32>::new(cfg.model.clone(), cfg.seed)?;
    info!("training {} parameters on {} images", model.store.num_scalars(), images.len());
    let rep = train_loop(&mut model, &images, &cfg, Some(&run))?;
    if let (Some(first), Some(last)) = (rep.initial_loss(), rep.final_loss(20)) {
        eprintln!("steps {} loss {first:.4} -> {last:.4}", rep.history.len());
    }
    if let Some(p) = rep.final_checkpoint {
        eprintln!("checkpoint {}", p.display());
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<OmrNet<f32>> {
    OmrNet::<f32>::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn cmd_encode(input: &Path, checkpoint: &Path, output: &Path) -> Result<()> {
    let model = load_model(checkpoint)?;
    let image: Tensor32 = load_png(input).with_context(|| format!("reading {}", input.display()))?;
    let (_, _, h, w) = image.dims4()?;
    let bytes = model.compress(&image)?.bitstream.to_bytes();
    std::fs::write(output, &bytes).with_context(|| format!("writing {}", output.display()))?;
    eprintln!("{}x{} -> {} bytes, {:.6} bpp", w, h, bytes.len(), bpp(bytes.len(), w, h));
    Ok(())
}

fn cmd_decode(input: &Path, checkpoint: &Path, output: &Path) -> Result<()> {
    let model = load_model(checkpoint)?;
    let bytes = std::fs::read(input).with_context(|| format!("reading {}", input.display()))?;
    let bs = Bitstream::from_bytes(&bytes).context("corrupt stream")?;
    let dec = model.decompress(&bs)?;
    save_png(&dec.x_hat, output).with_context(|| format!("writing {}", output.display()))?;
    eprintln!("decoded {}x{}", bs.header.width, bs.header.height);
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &Path, output: Option<&Path>) -> Result<()> {
    let (records, summary) = evaluate_model(checkpoint, data)?;
    let lines = records_jsonl(&records)?;
    match output {
        Some(p) => {
            std::fs::write(p, &lines)?;
            write_json(&p.with_extension("summary.json"), &summary)?;
        }
        None => print!("{lines}"),
    }
    eprintln!("{} images, mean {:.4} bpp, {:.3} dB", summary.images, summary.mean_bpp, summary.mean_psnr);
    Ok(())
}

fn cmd_bdrate(anchor: &Path, test: &Path, plot: Option<&Path>) -> Result<()> {
    let a = RdCurve::from_json_file(anchor).with_context(|| format!("reading {}", anchor.display()))?;
    let t = RdCurve::from_json_file(test).with_context(|| format!("reading {}", test.display()))?;
    let d = bd_rate(&a, &t)?;
    println!("BD-rate: {d:.2}%");
    if let Some(p) = plot {
        std::fs::write(p, rd_plot_svg(&[a, t]))?;
    }
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let mut o = a.o.clone();
    if o.config.is_none() {
        o.desk_scale = true;
    }
    let cfg = build_config(&o)?;
    let images = load_training_images(&o, &cfg)?;
    let run = RunDir::create(&a.out, a.force)?;
    write_json(&run.root.join("config.json"), &cfg)?;
    let eval: Vec<(String, Tensor32)> = images.iter().enumerate().map(|(i, im)| (format!("train_{i:03}"), im.clone())).collect();
    let mut suites = Vec::new();
    if matches!(a.suite, Suite::Components | Suite::All) {
        suites.push(("components", "Component ablation", component_variants()));
    }
    if matches!(a.suite, Suite::Blocks | Suite::All) {
        suites.push(("blocks", "Multi-scale residual block comparison", block_variants()));
    }
    for (tag, title, variants) in suites {
        let rep = ablation_run(title, &variants, &cfg, &images, &eval)?;
        let table = rep.to_table();
        print!("{table}");
        std::fs::write(run.reports().join(format!("ablation_{tag}.txt")), &table)?;
        std::fs::write(run.reports().join(format!("ablation_{tag}.jsonl")), records_jsonl(&rep.rows)?)?;
    }
    Ok(())
}

fn cmd_ingest(root: &Path, output: &Path, categories: Option<&Path>, min_size: u32) -> Result<()> {
    let map = categories.map(CategoryMap::from_json_file).transpose()?;
    let m = ingest_dataset(root, map.as_ref(), min_size)?;
    std::fs::write(output, m.to_json()?)?;
    let undersized = m.entries.iter().filter(|e| e.undersized).count();
    eprintln!("{} images ({} undersized) -> {}", m.entries.len(), undersized, output.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Encode { input, checkpoint, output } => cmd_encode(input, checkpoint, output),
        Cmd::Decode { input, checkpoint, output } => cmd_decode(input, checkpoint, output),
        Cmd::Eval { checkpoint, data, output } => cmd_eval(checkpoint, data, output.as_deref()),
        Cmd::Bdrate { anchor, test, plot } => cmd_bdrate(anchor, test, plot.as_deref()),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::Ingest { root, output, categories, min_size } => cmd_ingest(root, output, categories.as_deref(), *min_size),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cli.log)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
