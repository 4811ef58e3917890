use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adapternet::autodiff::gradcheck;
use adapternet::bench::{angle_sweep, top1};
use adapternet::cifar;
use adapternet::colorsim::{Camera, ImageU8, PowerParams};
use adapternet::config::RunConfig;
use adapternet::data::LabeledDataset;
use adapternet::experiment::{self, load_datasets, load_pool, pool_splits, write_output};
use adapternet::models::{AdapterNet, Pipeline};
use adapternet::persist::{write_atomic, ModelFile};
use adapternet::synth;
use adapternet::training::{fine_tune, train_adapter};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "adapternet",
    version,
    about = "Train and evaluate input adapters for frozen image classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioKind {
    Clean,
    ColorRotation,
    Power,
}

#[derive(Args)]
struct ScenarioArgs {
    /// Simulated camera; overrides the configured scenario.
    #[arg(long, value_enum)]
    scenario: Option<ScenarioKind>,
    /// Hue rotation in degrees (color-rotation).
    #[arg(long, default_value_t = 150.0)]
    theta: f64,
    /// Per-channel exponents r,g,b (power).
    #[arg(long, value_delimiter = ',', default_values_t = [0.2, 0.3, 0.4])]
    exponents: Vec<f64>,
}

impl ScenarioArgs {
    fn camera(&self) -> Result<Option<Camera>> {
        Ok(match self.scenario {
            None => None,
            Some(ScenarioKind::Clean) => Some(Camera::Clean),
            Some(ScenarioKind::ColorRotation) => Some(Camera::ColorRotation { theta: self.theta }),
            Some(ScenarioKind::Power) => {
                let [r, g, b] = self.exponents[..] else {
                    bail!("--exponents takes three values")
                };
                PowerParams::new(r, g, b)?;
                Some(Camera::Power {
                    exponents: [r, g, b],
                })
            }
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration as TOML.
    ShowConfig {
        #[command(flatten)]
        common: Common,
    },
    /// Write the procedural stand-in dataset as CIFAR-10 batch files.
    SynthData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train the backbone on clean data.
    TrainBackbone {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply a simulated camera to a PNG directory or a CIFAR-10 batch file.
    Transform {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an adapter in front of the frozen backbone.
    TrainAdapter {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrain the last N weight-bearing backbone layers.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        last: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-1 on the (transformed) test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        adapter: Option<PathBuf>,
    },
    /// Run every configured method on the scenario and write the report.
    Table {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long)]
        backbone: PathBuf,
    },
    /// Top-1 of the frozen backbone across hue rotations.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        backbone: PathBuf,
    },
    /// Run PNG images through a trained adapter.
    ExportAdapted {
        #[arg(long)]
        adapter: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every layer's gradient.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            RunConfig::from_toml(&text).with_context(|| format!("in {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn with_scenario(mut cfg: RunConfig, scenario: &ScenarioArgs) -> Result<RunConfig> {
    if let Some(camera) = scenario.camera()? {
        cfg.scenario = camera;
    }
    Ok(cfg)
}

fn load_model(path: &Path) -> Result<ModelFile> {
    ModelFile::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn read_png(path: &Path) -> Result<ImageU8> {
    let img = image::open(path)
        .with_context(|| format!("reading {}", path.display()))?
        .to_rgb8();
    Ok(ImageU8::new(
        img.height() as usize,
        img.width() as usize,
        img.into_raw(),
    )?)
}

fn write_png(path: &Path, img: &ImageU8) -> Result<()> {
    let buf = image::RgbImage::from_raw(
        img.width() as u32,
        img.height() as u32,
        img.pixels().to_vec(),
    )
    .expect("buffer matches dimensions");
    let mut bytes = Vec::new();
    buf.write_to(&mut Cursor::new(&mut bytes), image::ImageFormat::Png)?;
    write_atomic(path, &bytes).with_context(|| format!("writing {}", path.display()))
}

/// `color_rotation(150)` → `color_rotation_150`.
fn scenario_dir(camera: &Camera) -> String {
    let label: String = camera
        .label()
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect();
    label.trim_end_matches('_').to_string()
}

/// PNG files directly under `dir`, sorted by name.
fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading directory {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")));
    files.sort();
    Ok(files)
}

fn map_png_dir(input: &Path, out: &Path, f: impl Fn(&ImageU8) -> Result<ImageU8>) -> Result<usize> {
    let files = png_files(input)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for file in &files {
        let img = f(&read_png(file)?)?;
        write_png(&out.join(file.file_name().expect("listed file")), &img)?;
    }
    Ok(files.len())
}

fn transformed_splits(cfg: &RunConfig) -> Result<adapternet::data::BenchSplits> {
    let pool = load_pool(cfg)?;
    Ok(pool_splits(&pool, cfg)?.map_images(&cfg.scenario))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::ShowConfig { common } => print!("{}", load_config(&common)?.to_toml()),
        Command::SynthData { common, out } => {
            let mut cfg = load_config(&common)?;
            if let Some(seed) = common.seed {
                cfg.synthetic.seed = seed;
            }
            let (train, test) = synth::generate_records(&cfg.synthetic);
            cifar::write_dir(&out, &train, &test)?;
            println!(
                "wrote {} training and {} held-out records to {}",
                train.len(),
                test.len(),
                out.display()
            );
        }
        Command::TrainBackbone { common, out } => {
            let cfg = load_config(&common)?;
            let data = load_datasets(&cfg)?;
            let (model, log) = experiment::pretrain(&cfg, &data)?;
            model
                .save(&out)
                .with_context(|| format!("saving {}", out.display()))?;
            let log_path = out.with_extension("log.csv");
            write_atomic(&log_path, log.to_csv().as_bytes())?;
            println!(
                "clean top-1 {:.4} (best epoch {}), saved {}",
                model.header.clean_top1.unwrap_or(f64::NAN),
                log.best_epoch,
                out.display()
            );
        }
        Command::Transform {
            common,
            scenario,
            input,
            out,
        } => {
            let cfg = with_scenario(load_config(&common)?, &scenario)?;
            let camera = cfg.scenario;
            if input.is_dir() {
                let n = map_png_dir(&input, &out, |img| Ok(camera.apply(img)))?;
                println!(
                    "{}: {n} images written to {}",
                    camera.label(),
                    out.display()
                );
            } else {
                let bytes =
                    fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
                let records: Vec<(u8, ImageU8)> = cifar::decode(&bytes, &input)?
                    .into_iter()
                    .map(|(l, img)| (l, camera.apply(&img)))
                    .collect();
                write_atomic(&out, &cifar::encode(&records))
                    .with_context(|| format!("writing {}", out.display()))?;
                println!(
                    "{}: {} records written to {}",
                    camera.label(),
                    records.len(),
                    out.display()
                );
            }
        }
        Command::TrainAdapter {
            common,
            scenario,
            backbone,
            out,
        } => {
            let cfg = with_scenario(load_config(&common)?, &scenario)?;
            let (bb, means) = load_model(&backbone)?.backbone()?;
            let splits = transformed_splits(&cfg)?;
            let adapter = AdapterNet::build(cfg.adapter.layers, cfg.adapter.init, cfg.seed)?;
            let pipeline = Pipeline::new(bb, means).with_adapter(adapter);
            let (adapter, log) =
                train_adapter(&pipeline, &splits.train, &splits.val, &cfg.adapter_train())?;
            ModelFile::from_adapter(&adapter, cfg.seed).save(&out)?;
            write_atomic(&out.with_extension("log.csv"), log.to_csv().as_bytes())?;
            println!(
                "best val top-1 {:.4} at epoch {}, saved {}",
                log.best_val_top1,
                log.best_epoch,
                out.display()
            );
        }
        Command::Finetune {
            common,
            scenario,
            backbone,
            last,
            out,
        } => {
            let cfg = with_scenario(load_config(&common)?, &scenario)?;
            let file = load_model(&backbone)?;
            let (bb, means) = file.backbone()?;
            let splits = transformed_splits(&cfg)?;
            let (tuned, log) = fine_tune(
                &bb,
                means,
                last,
                &splits.train,
                &splits.val,
                &cfg.finetune_train(),
            )?;
            ModelFile::from_backbone(&tuned, means, file.header.clean_top1, cfg.seed).save(&out)?;
            write_atomic(&out.with_extension("log.csv"), log.to_csv().as_bytes())?;
            println!(
                "best val top-1 {:.4} at epoch {}, saved {}",
                log.best_val_top1,
                log.best_epoch,
                out.display()
            );
        }
        Command::Evaluate {
            common,
            scenario,
            backbone,
            adapter,
        } => {
            let cfg = with_scenario(load_config(&common)?, &scenario)?;
            let (bb, means) = load_model(&backbone)?.backbone()?;
            let mut pipeline = Pipeline::new(bb, means);
            if let Some(path) = adapter {
                pipeline = pipeline.with_adapter(load_model(&path)?.adapter()?);
            }
            let splits = transformed_splits(&cfg)?;
            println!(
                "{} top-1 {:.4}",
                cfg.scenario.label(),
                top1(&pipeline, &splits.test)?
            );
        }
        Command::Table {
            common,
            scenario,
            backbone,
        } => {
            let cfg = with_scenario(load_config(&common)?, &scenario)?;
            let file = load_model(&backbone)?;
            let pool = load_pool(&cfg)?;
            let out = experiment::table(&cfg, &file, &pool)?;
            let dir = cfg.output.dir.join(scenario_dir(&cfg.scenario));
            write_output(&dir, "report.txt", out.text.as_bytes())?;
            write_output(&dir, "report.csv", out.csv.as_bytes())?;
            for r in &out.results {
                if let Some(log) = &r.log {
                    write_output(
                        &dir,
                        &format!("{}.log.csv", r.method),
                        log.to_csv().as_bytes(),
                    )?;
                }
            }
            print!("{}", out.text);
            eprintln!("wrote {}", dir.join("report.txt").display());
        }
        Command::Sweep { common, backbone } => {
            let cfg = load_config(&common)?;
            let (bb, means) = load_model(&backbone)?.backbone()?;
            let pool: LabeledDataset = load_pool(&cfg)?;
            let splits = pool_splits(&pool, &cfg)?;
            let subset = cfg.sweep.subset_size.min(splits.test.len());
            let result = angle_sweep(
                &Pipeline::new(bb, means),
                &splits.test,
                &cfg.sweep.thetas,
                subset,
            )?;
            let path = write_output(&cfg.output.dir, "sweep.csv", result.to_csv().as_bytes())?;
            print!("{}", result.to_csv());
            eprintln!("wrote {}", path.display());
        }
        Command::ExportAdapted {
            adapter,
            input,
            out,
        } => {
            let adapter = load_model(&adapter)?.adapter()?;
            let n = map_png_dir(&input, &out, |img| {
                Ok(adapter.export_images(std::slice::from_ref(img))?.remove(0))
            })?;
            println!("{n} images written to {}", out.display());
        }
        Command::Gradcheck { instances, seed } => {
            let checks = gradcheck::check_all_layers(instances, seed)?;
            let mut failed = 0;
            for c in &checks {
                println!(
                    "{:<14} {} instances {:>6} entries  max rel err {:.2e}  {}",
                    c.name,
                    c.instances,
                    c.entries,
                    c.max_rel_error,
                    if c.passed() { "ok" } else { "FAIL" }
                );
                failed += usize::from(!c.passed());
            }
            if failed > 0 {
                bail!(
                    "{failed} layer type(s) exceed relative error {}",
                    gradcheck::TOLERANCE
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
