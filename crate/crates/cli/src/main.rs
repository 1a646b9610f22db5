use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use finecontrol::benchio::{
    aggregate, emit_plots, encode_png, evaluate_image, load_png, load_scenes, mask_preview,
    preview_colors, robustness_sweep, run_benchmark_with_sink, save_png, sign_test, write_report,
    BenchError, BenchmarkManifest, Evaluators, ReportFormat, ReportRow, SceneRecord, SweepAxis,
    SweepBase, SweepConfig,
};
use finecontrol::composer::{generate_scene, CompositionMode};
use finecontrol::denoisers::train::Recipe;
use finecontrol::denoisers::{
    checkpoint, DeltaFactory, DenoiserFactory, SharedFactory, TinyDenoiser,
};
use finecontrol::diffusion::NoiseSchedule;
use finecontrol::metrics::{hnd, ToyPoseDetector, ToySimilarityOracle};
use finecontrol::prompting::{validate_scene_json, SceneSpec};
use finecontrol::tensor::Tensor;
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "finecontrol",
    version,
    about = "Instance-level prompt composition for pose-guided sampling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ModelArgs {
    /// Tiny denoiser checkpoint; without one the delta renderer is used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample one scene and write image, masks, trace and metrics.
    Generate {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        mode: Option<CompositionMode>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long = "hard-frac")]
        hard_frac: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Run every manifest scene under each mode and write reports.
    Bench {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "FINECONTROL,X_COMPOSE,H_V2,GLOBAL"
        )]
        modes: Vec<CompositionMode>,
        /// Seeds shared by all modes; defaults to each scene's own seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, default_value = "bench-out")]
        out: PathBuf,
        /// Also write `images/{MODE}/scene_NNNN[_seed_S].png`.
        #[arg(long)]
        save_images: bool,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Vary one scene factor and report and plot the metrics per value.
    Sweep {
        #[arg(long)]
        axis: SweepAxis,
        /// Defaults to the axis' standard values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        #[arg(long, default_value = "20")]
        seeds: u64,
        #[arg(long, default_value = "FINECONTROL")]
        mode: CompositionMode,
        #[arg(long, default_value = "20")]
        steps: usize,
        #[arg(long, default_value = "sweep-out")]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Train the tiny denoiser on synthetic scenes and save a checkpoint.
    TrainToy {
        #[arg(long, default_value = "12")]
        epochs: usize,
        #[arg(long, default_value = "0")]
        seed: u64,
        #[arg(long, default_value = "2048")]
        samples: usize,
        #[arg(long, default_value = "0.002")]
        lr: f64,
        #[arg(long, default_value = "tiny.fcnt")]
        out: PathBuf,
    },
    /// Score generated images (`scene_NNNN.png`) against manifest scenes.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn factory(model: &ModelArgs, schedule: &NoiseSchedule) -> Result<Arc<dyn DenoiserFactory>> {
    Ok(match &model.checkpoint {
        Some(p) => {
            let params = checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            Arc::new(SharedFactory(Arc::new(TinyDenoiser::new(
                params,
                schedule.clone(),
            ))))
        }
        None => Arc::new(DeltaFactory {
            schedule: schedule.clone(),
            ..Default::default()
        }),
    })
}

fn read_scene(path: &Path) -> Result<SceneSpec> {
    let doc: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
    )?;
    validate_scene_json(&doc).map_err(|v| {
        let lines: Vec<String> = v
            .iter()
            .map(|v| format!("  {}: {}", v.pointer, v.message))
            .collect();
        anyhow::anyhow!(
            "{} is not a valid scene:\n{}",
            path.display(),
            lines.join("\n")
        )
    })
}

fn read_manifest(path: &Path) -> Result<(BenchmarkManifest, PathBuf)> {
    let m: BenchmarkManifest = serde_json::from_str(&std::fs::read_to_string(path)?)
        .with_context(|| format!("parsing manifest {}", path.display()))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((m, base))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let schedule = NoiseSchedule::default();
    let oracle = ToySimilarityOracle::default();
    let detector = ToyPoseDetector::default();
    let eval = Evaluators {
        oracle: &oracle,
        detector: &detector,
    };
    match Cli::parse().command {
        Command::Generate {
            scene,
            mode,
            steps,
            tau,
            hard_frac,
            seed,
            out,
            model,
        } => {
            let mut s = read_scene(&scene)?;
            if let Some(m) = mode {
                s.mode = m;
            }
            if let Some(k) = steps {
                s.sampler.steps = k;
            }
            if let Some(t) = tau {
                s.harmony.tau = t;
            }
            if let Some(q) = hard_frac {
                s.harmony.hard_fraction = q;
            }
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let g = generate_scene(&s, factory(&model, &schedule)?.as_ref(), &schedule)?;
            std::fs::create_dir_all(&out)?;
            save_png(&g.image, &out.join("image.png"))?;
            let ids: Vec<&str> = s.instances.iter().map(|i| i.identity.as_str()).collect();
            let masks = mask_preview(g.masks.base(), &preview_colors(&ids, &oracle.palette));
            std::fs::write(out.join("masks.png"), encode_png(&masks)?)?;
            write_json(&out.join("trace.json"), &g.trace)?;
            let (instances, detections) = evaluate_image(&s, &g.image, eval)?;
            let metrics = json!({
                "version": 1,
                "instances": instances,
                "hnd": hnd(s.instances.len(), detections.len()),
                "detections": detections,
            });
            write_json(&out.join("metrics.json"), &metrics)?;
            println!(
                "{} steps ({} hard) in {} mode -> {}",
                g.trace.num_steps,
                g.trace.hard_steps,
                g.trace.mode,
                out.display()
            );
        }
        Command::Bench {
            manifest,
            modes,
            seeds,
            out,
            save_images,
            model,
        } => {
            let (m, base) = read_manifest(&manifest)?;
            let scenes = load_scenes(&m, &base)?;
            std::fs::create_dir_all(&out)?;
            let suffix_seed = seeds.len() > 1;
            let sink = |rec: &SceneRecord, image: &Tensor| -> Result<(), BenchError> {
                if !save_images {
                    return Ok(());
                }
                let dir = out.join("images").join(rec.mode.as_str());
                std::fs::create_dir_all(&dir)?;
                let name = if suffix_seed {
                    format!("scene_{:04}_seed_{}.png", rec.scene, rec.seed)
                } else {
                    format!("scene_{:04}.png", rec.scene)
                };
                save_png(image, &dir.join(name))
            };
            let model = factory(&model, &schedule)?;
            let r = run_benchmark_with_sink(
                &scenes,
                &modes,
                &seeds,
                model.as_ref(),
                &schedule,
                eval,
                &sink,
            )?;
            r.write_jsonl(std::io::BufWriter::new(std::fs::File::create(
                out.join("per_scene.jsonl"),
            )?))?;
            write_report(&r.table(), ReportFormat::Csv, &out.join("report.csv"))?;
            write_report(&r.table(), ReportFormat::Markdown, &out.join("report.md"))?;
            print!("{}", std::fs::read_to_string(out.join("report.md"))?);
            if modes.len() > 1 {
                // Paired sign tests of the first mode against each other one.
                let per = |mode: CompositionMode, f: fn(&SceneRecord) -> f64| -> Vec<f64> {
                    r.records_of(mode).map(f).collect()
                };
                for &other in &modes[1..] {
                    let t = sign_test(
                        &per(modes[0], SceneRecord::mean_diff),
                        &per(other, SceneRecord::mean_diff),
                    );
                    println!(
                        "cio_diff {} vs {}: {} wins, {} losses, {} ties, p = {:.3e}",
                        modes[0], other, t.wins, t.losses, t.ties, t.p_value
                    );
                }
            }
        }
        Command::Sweep {
            axis,
            values,
            seeds,
            mode,
            steps,
            out,
            model,
        } => {
            let config = if values.is_empty() {
                SweepConfig::defaults(axis)
            } else {
                SweepConfig { axis, values }
            };
            let mut base = SweepBase {
                mode,
                ..Default::default()
            };
            base.sampler.steps = steps;
            let seeds: Vec<u64> = (0..seeds).collect();
            let r = robustness_sweep(
                &config,
                &base,
                &seeds,
                factory(&model, &schedule)?.as_ref(),
                &schedule,
                eval,
            )?;
            std::fs::create_dir_all(&out)?;
            write_report(&r.table(), ReportFormat::Csv, &out.join("sweep.csv"))?;
            write_report(&r.table(), ReportFormat::Markdown, &out.join("sweep.md"))?;
            write_json(&out.join("sweep.json"), &r)?;
            let plots = emit_plots(&r, &out)?;
            print!("{}", std::fs::read_to_string(out.join("sweep.md"))?);
            println!("{} plots in {}", plots.len(), out.display());
        }
        Command::TrainToy {
            epochs,
            seed,
            samples,
            lr,
            out,
        } => {
            let mut recipe = Recipe::default();
            recipe.dataset.samples = samples;
            recipe.dataset.seed = seed;
            recipe.train.epochs = epochs;
            recipe.train.learning_rate = lr;
            recipe.train.seed = seed;
            recipe.init_seed = seed;
            let t0 = std::time::Instant::now();
            let (params, report) = recipe.run(&schedule, |e, loss| {
                println!(
                    "epoch {e:>3}  loss {loss:>10.3}  {:>6.1}s",
                    t0.elapsed().as_secs_f64()
                );
            })?;
            checkpoint::save(&params, &out)?;
            println!("{} optimizer steps, saved {}", report.steps, out.display());
        }
        Command::Metrics { pred, gt, out } => {
            let (m, base) = read_manifest(&gt)?;
            let scenes = load_scenes(&m, &base)?;
            let mut records = Vec::with_capacity(scenes.len());
            for (i, s) in scenes.iter().enumerate() {
                let path = pred.join(format!("scene_{i:04}.png"));
                let image =
                    load_png(&path).with_context(|| format!("reading {}", path.display()))?;
                if image.spatial() != (s.canvas.h, s.canvas.w) {
                    bail!(
                        "{} is {:?}, scene {i} is {}x{}",
                        path.display(),
                        image.spatial(),
                        s.canvas.h,
                        s.canvas.w
                    );
                }
                let (instances, detections) = evaluate_image(s, &image, eval)?;
                records.push(SceneRecord {
                    scene: i,
                    seed: s.seed,
                    mode: s.mode,
                    hnd: hnd(s.instances.len(), detections.len()),
                    instances,
                    detections,
                });
            }
            let refs: Vec<&SceneRecord> = records.iter().collect();
            let row = ReportRow {
                label: pred.display().to_string(),
                report: aggregate(&scenes, &refs)?,
            };
            if let Some(out) = out {
                write_report(std::slice::from_ref(&row), ReportFormat::Csv, &out)?;
            }
            println!("{}", serde_json::to_string_pretty(&row)?);
        }
    }
    Ok(())
}
