//! `memseg` command-line tool.
//!
//! Every subcommand reads the same TOML run configuration (`--config`),
//! applies flag overrides and writes its artifacts plus the effective
//! configuration under `--out`. Failures print one JSON line on stderr and
//! exit with 1 (runtime) or 2 (usage).

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use memseg::anomaly_sim::simulate;
use memseg::config::RunConfig;
use memseg::data_io::{list_images, load_image, save_gray_png, scan_dataset, DiskImages, ImageSource, Split, TextureMode, TextureSource};
use memseg::encoder::EncoderConfig;
use memseg::eval::{benchmark, evaluate, gen_toyset, image_score, load_test_set, memory_scaling, save_heatmap, synth_category};
use memseg::network::SegModel;
use memseg::training::{train_with, write_loss_csv};
use memseg::{Error, Result};

const CONFIG_FILE: &str = "config.toml";
const CHECKPOINT_FILE: &str = "checkpoint.safetensors";

#[derive(Parser)]
#[command(name = "memseg", version, about = "Memory-guided defect segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand. Flags win over the config file.
#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for all randomness.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    category: Option<String>,
    #[arg(long)]
    image_size: Option<usize>,
    /// Memory pool size.
    #[arg(long)]
    memory_size: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    /// Draw textural noise from this directory instead of procedurally.
    #[arg(long)]
    texture_dir: Option<PathBuf>,
    /// Use a ResNet18 encoder with weights from this safetensors file.
    #[arg(long)]
    resnet18: Option<PathBuf>,
    #[arg(long)]
    no_memory: bool,
    #[arg(long)]
    no_multi_scale: bool,
    #[arg(long)]
    no_spatial_attention: bool,
    #[arg(long)]
    no_coord_attention: bool,
    /// Set any config field by dotted path, e.g. `train.optimizer.lr=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write simulated anomaly image/mask pairs from the training split.
    Simulate(Common),
    /// Train and write a checkpoint and loss trace.
    Train(Common),
    /// Anomaly maps and scores for every image in a directory.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Image and pixel AUROC on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Paint toy shapes onto normal images.
    Toyset {
        #[command(flatten)]
        common: Common,
        /// Directory of normal images (default: the category's test/good).
        #[arg(long)]
        normals: Option<PathBuf>,
    },
    /// Write a synthetic texture category with toy anomalies.
    Synth(Common),
    /// Forward latency and memory scaling.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Benchmark a trained model; otherwise an untrained one is built.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Images to time (default: the category's test split).
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => {
                if !p.is_file() {
                    return Err(Error::InvalidConfig(format!("config file {} not found", p.display())));
                }
                RunConfig::load(p)?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
            c.toyset.seed = s;
            c.synth.family_seed = s;
        }
        if let Some(v) = &self.out {
            c.out = v.clone();
        }
        if let Some(v) = &self.data_root {
            c.data_root = v.clone();
        }
        if let Some(v) = &self.category {
            c.category = v.clone();
        }
        if let Some(v) = self.image_size {
            c.model.image_size = v;
        }
        if let Some(v) = self.memory_size {
            c.model.memory_size = v;
        }
        if let Some(v) = self.iterations {
            c.train.iterations = v;
        }
        if let Some(v) = self.lr {
            c.train.optimizer.lr = v;
        }
        if let Some(v) = self.top_k {
            c.eval.top_k = v;
        }
        if let Some(v) = &self.texture_dir {
            c.texture = TextureMode::Directory { path: v.clone() };
        }
        if let Some(v) = &self.resnet18 {
            c.model.encoder = EncoderConfig::Resnet18 { weights: v.clone() };
        }
        for s in &self.set {
            c.set(s)?;
        }
        let a = &mut c.model.ablation;
        a.memory &= !self.no_memory;
        a.multi_scale &= !self.no_multi_scale;
        a.spatial_attention &= !self.no_spatial_attention;
        a.coord_attention &= !self.no_coord_attention;
        c.validate()?;
        Ok(c)
    }

    fn encoder_override(&self) -> Option<EncoderConfig> {
        self.resnet18.as_ref().map(|w| EncoderConfig::Resnet18 { weights: w.clone() })
    }
}

fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| io_err(&cfg.out, e))?;
    write_text(&cfg.out.join(CONFIG_FILE), &cfg.to_toml())?;
    Ok(cfg.out.clone())
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_owned(),
        source: e,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

/// The configuration as `#` comment lines, for CSV and text artifacts.
fn config_comment(cfg: &RunConfig) -> String {
    cfg.to_toml().lines().map(|l| format!("# {l}\n")).collect()
}

fn prepend(path: &Path, head: &str) -> Result<()> {
    let body = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    write_text(path, &format!("{head}{body}"))
}

fn train_images(cfg: &RunConfig) -> Result<Vec<memseg::data_io::Image>> {
    let index = scan_dataset(&cfg.data_root, &cfg.category, Split::Train)?;
    let src = DiskImages {
        paths: index.items.iter().map(|i| i.image.clone()).collect(),
        size: cfg.model.image_size,
    };
    (0..src.len()).map(|i| src.load(i)).collect()
}

/// Model from a checkpoint with the run's ablation switches applied.
fn load_model(common: &Common, cfg: &RunConfig, path: &Path) -> Result<SegModel> {
    let mut model = SegModel::load(path, common.encoder_override().as_ref())?;
    model.set_ablation(cfg.model.ablation);
    Ok(model)
}

/// Model config of a checkpoint overrides the file config so reports
/// describe the model actually used.
fn adopt_model_config(cfg: &mut RunConfig, model: &SegModel) {
    cfg.model = model.config().clone();
}

fn cmd_simulate(common: &Common) -> Result<()> {
    let cfg = common.resolve()?;
    let out = prepare_out(&cfg)?;
    let train = train_images(&cfg)?;
    if train.is_empty() {
        return Err(Error::NotEnoughItems { needed: 1, got: 0 });
    }
    let tex = TextureSource::from_mode(&cfg.texture, cfg.seed)?;
    let dir = out.join("simulate");
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = format!("{}index,source,kind,delta,mask_pixels\n", config_comment(&cfg));
    for i in 0..cfg.simulate_count {
        let src = i % train.len();
        let s = simulate(&train[src], &cfg.train.sim, &tex, &mut rng)?;
        s.image.save_png(&dir.join(format!("{i:03}.png")))?;
        save_gray_png(s.mask.values(), &dir.join(format!("{i:03}_mask.png")))?;
        log.push_str(&format!("{i},{src},{:?},{},{}\n", s.kind, s.delta, s.mask.count()));
    }
    write_text(&out.join("simulate_log.csv"), &log)
}

fn cmd_train(common: &Common) -> Result<()> {
    let cfg = common.resolve()?;
    let out = prepare_out(&cfg)?;
    let train = train_images(&cfg)?;
    let tex = TextureSource::from_mode(&cfg.texture, cfg.seed)?;
    let mut model = SegModel::build(cfg.model.clone(), &train, cfg.seed)?;
    let run_config = cfg.to_toml();
    let every = cfg.train.checkpoint_every;
    log::info!(
        "training {} iterations, {} trainable parameters, encoder {}",
        cfg.train.iterations,
        model.trainable_count(),
        model.encoder().tag()
    );
    let trace = train_with(&mut model, &train, &tex, &cfg.train, cfg.seed, |m, r| {
        if every > 0 && (r.iteration + 1) % every == 0 {
            m.save(&out.join(format!("checkpoint_{:06}.safetensors", r.iteration + 1)), &run_config)?;
        }
        Ok(())
    })?;
    model.save(&out.join(CHECKPOINT_FILE), &run_config)?;
    let loss = out.join("loss.csv");
    write_loss_csv(&loss, &trace)?;
    prepend(&loss, &config_comment(&cfg))
}

fn cmd_infer(common: &Common, checkpoint: &Path, input: &Path) -> Result<()> {
    let mut cfg = common.resolve()?;
    let model = load_model(common, &cfg, checkpoint)?;
    adopt_model_config(&mut cfg, &model);
    let out = prepare_out(&cfg)?;
    let maps_dir = out.join("maps");
    std::fs::create_dir_all(&maps_dir).map_err(|e| io_err(&maps_dir, e))?;
    let paths = list_images(input)?;
    let mut csv = format!("{}name,score\n", config_comment(&cfg));
    for p in &paths {
        let img = load_image(p, cfg.model.image_size)?;
        let map = model.predict(&img)?;
        let stem = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        save_gray_png(&map.probs, &maps_dir.join(format!("{stem}.png")))?;
        if cfg.eval.heatmaps {
            save_heatmap(&map, &maps_dir.join(format!("{stem}_heat.png")))?;
        }
        csv.push_str(&format!("{stem},{}\n", image_score(&map, cfg.eval.top_k)?));
    }
    write_text(&out.join("scores.csv"), &csv)
}

fn cmd_eval(common: &Common, checkpoint: &Path) -> Result<()> {
    let mut cfg = common.resolve()?;
    let model = load_model(common, &cfg, checkpoint)?;
    adopt_model_config(&mut cfg, &model);
    let out = prepare_out(&cfg)?;
    let index = scan_dataset(&cfg.data_root, &cfg.category, Split::Test)?;
    let samples = load_test_set(&index, cfg.model.image_size)?;
    let mut report = evaluate(&model, &samples, cfg.eval.top_k)?;
    report.header.push(format!("category={} seed={}", cfg.category, cfg.seed));
    report.header.push(format!("checkpoint={}", checkpoint.display()));
    report.write_scores_csv(&out.join("eval_scores.csv"))?;
    write_text(&out.join("eval_summary.txt"), &format!("{}{}", config_comment(&cfg), report.summary()))?;
    let json = serde_json::json!({ "config": cfg, "report": report });
    write_text(&out.join("eval_report.json"), &serde_json::to_string_pretty(&json).expect("json"))?;
    if cfg.eval.heatmaps {
        let dir = out.join("heatmaps");
        std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        for s in &samples {
            let name = s.name.replace('/', "_");
            save_heatmap(&model.predict(&s.image)?, &dir.join(format!("{name}.png")))?;
        }
    }
    print!("{}", report.summary());
    Ok(())
}

fn cmd_toyset(common: &Common, normals: Option<&Path>) -> Result<()> {
    let cfg = common.resolve()?;
    let out = prepare_out(&cfg)?;
    let dir = match normals {
        Some(d) => d.to_owned(),
        None => cfg.data_root.join(&cfg.category).join("test").join("good"),
    };
    if !dir.is_dir() {
        return Err(Error::MissingDirectory(dir));
    }
    let src = DiskImages {
        paths: list_images(&dir)?,
        size: cfg.model.image_size,
    };
    let records = gen_toyset(&src, &cfg.toyset, &out.join("toyset"), &cfg.category)?;
    log::info!("wrote {} toy anomalies", records.len());
    prepend(&out.join("toyset").join(&cfg.category).join("toyset_log.csv"), &config_comment(&cfg))
}

fn cmd_synth(common: &Common) -> Result<()> {
    let cfg = common.resolve()?;
    prepare_out(&cfg)?;
    let cat = synth_category(&cfg.data_root, &cfg.category, &cfg.synth)?;
    println!("{}", cat.display());
    Ok(())
}

fn cmd_bench(common: &Common, checkpoint: Option<&Path>, input: Option<&Path>) -> Result<()> {
    let mut cfg = common.resolve()?;
    if cfg.bench.deterministic {
        // ignore the error if a pool already exists
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    let model = match checkpoint {
        Some(p) => load_model(common, &cfg, p)?,
        None => SegModel::build(cfg.model.clone(), &train_images(&cfg)?, cfg.seed)?,
    };
    adopt_model_config(&mut cfg, &model);
    let out = prepare_out(&cfg)?;
    let size = cfg.model.image_size;
    let paths = match input {
        Some(d) => list_images(d)?,
        None => scan_dataset(&cfg.data_root, &cfg.category, Split::Test)?
            .items
            .into_iter()
            .map(|i| i.image)
            .collect(),
    };
    let images = paths.iter().map(|p| load_image(p, size)).collect::<Result<Vec<_>>>()?;
    let mut report = benchmark(&model, &images, cfg.bench.warmup, cfg.bench.reps)?;
    if !cfg.bench.memory_sizes.is_empty() {
        report.memory_scaling = memory_scaling(model.encoder(), &images[0], &cfg.bench.memory_sizes, 3)?;
    }
    let json = serde_json::json!({ "config": cfg, "report": report });
    write_text(&out.join("bench.json"), &serde_json::to_string_pretty(&json).expect("json"))?;
    let l = &report.latency;
    println!(
        "latency_s mean {:.6} p50 {:.6} p95 {:.6} over {} runs ({} threads)",
        l.mean, l.p50, l.p95, l.samples, report.hardware.threads
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(c) => cmd_simulate(c),
        Command::Train(c) => cmd_train(c),
        Command::Infer {
            common,
            checkpoint,
            input,
        } => cmd_infer(common, checkpoint, input),
        Command::Eval { common, checkpoint } => cmd_eval(common, checkpoint),
        Command::Toyset { common, normals } => cmd_toyset(common, normals.as_deref()),
        Command::Synth(c) => cmd_synth(c),
        Command::Bench {
            common,
            checkpoint,
            input,
        } => cmd_bench(common, checkpoint.as_deref(), input.as_deref()),
    }
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    let line = serde_json::json!({ "error": message, "kind": kind });
    let _ = writeln!(std::io::stderr(), "{line}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            return fail("usage", first, 2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string(), if e.is_usage() { 2 } else { 1 }),
    }
}
