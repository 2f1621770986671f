use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};

use ihf::forest::HoughForest;
use ihf::geometry::DepthImage;
use ihf::harness::{self, cases_from_manifest, cases_from_samples, Config};
use ihf::hocp::PartMode;
use ihf::registration::refine_iteratively;
use ihf::synthbench::{generate_test_set, generate_training_set, make_mesh, DatasetManifest, Mesh, Split};

#[derive(Parser)]
#[command(name = "ihf", version, about = "Depth-only 6D pose registration with an iterative Hough forest")]
struct Cli {
    /// JSON config; defaults are used for anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true)]
    mode: Option<Mode>,
    /// Clutter removal rounds after the initial registration.
    #[arg(long, global = true)]
    iterations: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Fixed,
    Variable,
}

#[derive(Subcommand)]
enum Command {
    /// Render the training grid and a randomized test set.
    GenData,
    /// Train a forest and write it to `<out>/forest.ihf`.
    Train {
        /// Training manifest; rendered from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Register one depth image and write `<out>/trace.json`.
    Register {
        #[arg(long)]
        forest: PathBuf,
        /// Raw depth file with its JSON sidecar.
        #[arg(long)]
        image: PathBuf,
        /// ASCII model mesh; built from the config when omitted.
        #[arg(long)]
        mesh: Option<PathBuf>,
    },
    /// Register every image of a test manifest and write the reports.
    Evaluate {
        #[arg(long)]
        forest: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the built-in oracle checks.
    Selftest,
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(m) = cli.mode {
        cfg.mode = match m {
            Mode::Fixed => PartMode::Fixed,
            Mode::Variable => PartMode::Variable,
        };
    }
    if let Some(k) = cli.iterations {
        cfg.registration.clutter.max_iterations = k;
    }
    cfg.validate().context("invalid config")?;
    Ok(cfg)
}

fn load_forest(path: &Path, cfg: &Config) -> Result<HoughForest> {
    let forest = HoughForest::load(path).with_context(|| format!("reading forest {}", path.display()))?;
    if forest.mode() != cfg.mode {
        warn!("forest was trained in {} mode, which overrides {}", forest.mode(), cfg.mode);
    }
    Ok(forest)
}

fn gen_data(cfg: &Config, out: &Path) -> Result<()> {
    let train = generate_training_set(&cfg.bench, cfg.exec)?;
    DatasetManifest::write(Split::Train, &cfg.bench, &train, &out.join("train"))?;
    let test = generate_test_set(&cfg.bench, cfg.seed, cfg.exec)?;
    DatasetManifest::write(Split::Test, &cfg.bench, &test, &out.join("test"))?;
    make_mesh(&cfg.bench.mesh)?.save(&out.join("model.mesh"))?;
    cfg.save(&out.join("config.json"))?;
    println!("{} training and {} test images in {}", train.len(), test.len(), out.display());
    Ok(())
}

fn train(cfg: &Config, data: Option<&Path>, out: &Path) -> Result<()> {
    let cases = match data {
        Some(p) => cases_from_manifest(p)?.1,
        None => cases_from_samples(&generate_training_set(&cfg.bench, cfg.exec)?),
    };
    info!("training on {} images", cases.len());
    let forest = harness::train(&cases, cfg)?;
    std::fs::create_dir_all(out)?;
    let path = out.join("forest.ihf");
    forest.save(&path)?;
    println!(
        "{} trees, {} nodes, mode {} -> {}",
        forest.trees.len(),
        forest.trees.iter().map(|t| t.node_count()).sum::<usize>(),
        forest.mode(),
        path.display()
    );
    Ok(())
}

fn register(cfg: &Config, forest: &Path, image: &Path, mesh: Option<&Path>, out: &Path) -> Result<()> {
    let forest = load_forest(forest, cfg)?;
    let image = DepthImage::load(image).with_context(|| format!("reading depth image {}", image.display()))?;
    let mesh = match mesh {
        Some(p) => Mesh::load(p)?,
        None => make_mesh(&cfg.bench.mesh)?,
    };
    let trace = refine_iteratively(&image, &forest, &mesh, &cfg.registration, cfg.exec)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("trace.json"), trace.to_json()?)?;
    if let Some(r) = trace.final_pose() {
        let t = r.pose.translation;
        let a = r.pose.rotation.map(f64::to_degrees);
        println!(
            "k={} t=({:.1}, {:.1}, {:.1}) mm r=({:.1}, {:.1}, {:.1}) deg confidence {}",
            r.k, t[0], t[1], t[2], a[0], a[1], a[2], r.confidence
        );
    }
    Ok(())
}

fn evaluate(cfg: &Config, forest: &Path, data: &Path, out: &Path) -> Result<()> {
    let (manifest, cases) = cases_from_manifest(data)?;
    let forest = load_forest(forest, cfg)?;
    let mesh = make_mesh(&manifest.mesh)?;
    let eval = harness::evaluate(&forest, &mesh, &cases, cfg)?;
    for k in 0..eval.rounds() {
        println!(
            "k={k} correct@{:.2} {:.3} mean omega {:.2} mm",
            cfg.z_omega,
            eval.fraction_correct_at(k),
            eval.mean_omega_at(k)
        );
    }
    let report = harness::report(&eval, cfg)?;
    harness::write_report(&report, out)?;
    println!("mean F1 {:.4} over the sweep, reports in {}", report.mean_f1, out.display());
    Ok(())
}

fn selftest() -> Result<()> {
    let checks = ihf::selftest::run();
    let mut failed = 0;
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        failed += usize::from(!c.passed);
    }
    if failed > 0 {
        bail!("{failed} of {} checks failed", checks.len());
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let out = &cli.out;
    match &cli.command {
        Command::GenData => gen_data(&load_config(cli)?, out),
        Command::Train { data } => train(&load_config(cli)?, data.as_deref(), out),
        Command::Register { forest, image, mesh } => register(&load_config(cli)?, forest, image, mesh.as_deref(), out),
        Command::Evaluate { forest, data } => evaluate(&load_config(cli)?, forest, data, out),
        Command::Selftest => selftest(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
