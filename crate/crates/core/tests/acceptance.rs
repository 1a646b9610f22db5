//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints its own PASS/FAIL line; exits non-zero if any criterion fails.

mod common;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{ap_oracle, blend_oracle, dense_params, random_pose, row_scene, soft_mask_oracle};
use finecontrol::benchio::{
    robustness_sweep, run_benchmark, sign_test, synth_scenes, BenchmarkManifest, BenchmarkResult,
    CountBin, Evaluators, SweepAxis, SweepBase, SweepConfig,
};
use finecontrol::composer::{
    branch_specs, generate, sample_single, CompositionMode, HarmonyParams,
};
use finecontrol::denoisers::checkpoint;
use finecontrol::denoisers::train::{loss_and_gradient, synth_training_set, DatasetConfig, Recipe};
use finecontrol::denoisers::{
    condition_branch, render_figures, DeltaFactory, Palette, SharedFactory, TextEmbedder,
    TinyDenoiser, TinyParams, RENDER_LINE_WIDTH,
};
use finecontrol::diffusion::{NoiseSchedule, SamplerConfig};
use finecontrol::metrics::{
    cio_diff_from_scores, cio_sigma_from_scores, hnd, keypoint_ap, oks, Detection, ToyPoseDetector,
    ToySimilarityOracle,
};
use finecontrol::pose_geometry::{
    build_mask_set, Keypoint, MaskMode, Pose2D, PoseFormat, StandingFigure,
};
use finecontrol::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Tolerances and budgets.
const PARTITION_TOL: f64 = 1e-6;
const DEGENERACY_TOL: f64 = 1e-6;
const BLEND_TOL: f64 = 1e-4;
/// Reproduced target pixels: DDIM's last step divides by sqrt(alpha_bar) = 1
/// after a few roundings, so "exact" is pinned at a few ulps of a unit value.
const TARGET_TOL: f64 = 1e-12;
const SIGMA_FIXTURE_TOL: f64 = 1e-4;
const DIFF_FIXTURE_TOL: f64 = 1e-12;
const OKS_FIXTURE_TOL: f64 = 1e-6;
const AP_ORACLE_TOL: f64 = 1e-9;
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_FLOOR: f64 = 1e-6;
const SIGMA_RATIO: f64 = 1.2;
const SIGN_TEST_ALPHA: f64 = 0.05;
const SEEDS: u64 = 20;
const SCENES: usize = 20;
const TRAIN_BUDGET: Duration = Duration::from_secs(30 * 60);

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let criteria: [(&str, fn(&mut Ctx) -> Outcome); 9] = [
        ("partition of unity", partition_of_unity),
        ("single-instance degeneracy", single_instance_degeneracy),
        ("closed-form composition", closed_form_composition),
        ("identity observance vs global", identity_vs_global),
        ("composition level ablations", composition_ablations),
        ("harmony schedule", harmony_schedule),
        ("metric fixtures", metric_fixtures),
        ("gradient check", gradient_check),
        ("robustness trends", robustness_trends),
    ];
    // Optional criterion numbers on the command line select a subset.
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut ctx = Ctx::default();
    let (mut ran, mut failed) = (0, 0);
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| run(&mut ctx)))
            .unwrap_or_else(|p| Err(format!("panicked: {}", panic_text(&p))));
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {} {tag} [{name}] ({secs:.1}s): {detail}", i + 1);
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn panic_text(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown panic".into())
}

/// The trained model and the paired benchmark, built once and shared.
#[derive(Default)]
struct Ctx {
    model: Option<(Arc<TinyDenoiser>, Option<Duration>)>,
    bench: Option<BenchmarkResult>,
}

impl Ctx {
    /// Loads the cached reference model or trains it. The second field is the
    /// training time when it was trained in this run.
    fn model(&mut self) -> (Arc<TinyDenoiser>, Option<Duration>) {
        if self.model.is_none() {
            self.model = Some(load_or_train());
        }
        self.model.clone().unwrap()
    }

    fn factory(&mut self) -> SharedFactory {
        SharedFactory(self.model().0)
    }

    fn bench(&mut self) -> &BenchmarkResult {
        if self.bench.is_none() {
            let factory = self.factory();
            let scenes = synth_scenes(&bench_manifest()).expect("bench scenes");
            let seeds: Vec<u64> = (0..SEEDS).collect();
            let oracle = ToySimilarityOracle::default();
            let detector = ToyPoseDetector::default();
            let eval = Evaluators {
                oracle: &oracle,
                detector: &detector,
            };
            let run = run_benchmark(
                &scenes,
                &CompositionMode::ALL,
                &seeds,
                &factory,
                &NoiseSchedule::default(),
                eval,
            )
            .expect("benchmark");
            self.bench = Some(run);
        }
        self.bench.as_ref().unwrap()
    }
}

fn load_or_train() -> (Arc<TinyDenoiser>, Option<Duration>) {
    let recipe = Recipe::default();
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR"));
    let ckpt = dir.join("acceptance_tiny.fcnt");
    let stamp = dir.join("acceptance_tiny.recipe.json");
    let want = serde_json::to_string(&recipe).unwrap();
    let schedule = NoiseSchedule::default();
    if std::fs::read_to_string(&stamp).ok().as_deref() == Some(want.as_str()) {
        if let Ok(params) = checkpoint::load(&ckpt) {
            return (Arc::new(TinyDenoiser::new(params, schedule)), None);
        }
    }
    println!(
        "training the reference model ({} scenes, {} epochs)",
        recipe.dataset.samples, recipe.train.epochs
    );
    let start = Instant::now();
    let (params, report) = recipe
        .run(&schedule, |epoch, loss| {
            println!("  epoch {epoch}: loss {loss:.5}")
        })
        .expect("training");
    let took = start.elapsed();
    println!(
        "trained in {:.0}s, final loss {:.5}",
        took.as_secs_f64(),
        report.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    checkpoint::save(&params, &ckpt).expect("save checkpoint");
    std::fs::write(&stamp, want).expect("save recipe stamp");
    (Arc::new(TinyDenoiser::new(params, schedule)), Some(took))
}

/// Two-person scenes on the training canvas with moderate overlap.
fn bench_manifest() -> BenchmarkManifest {
    let mut m = BenchmarkManifest::synthetic(
        vec![CountBin {
            count: 2,
            scenes: SCENES,
        }],
        0,
    );
    m.width = Some(64);
    m.scale = 0.75;
    m.distance = 0.75;
    m
}

fn partition_of_unity(_: &mut Ctx) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let taus = [1e-3, 0.1, 1.0];
    let sizes = [16, 32, 64];
    let mut worst = 0.0f64;
    let mut levels = 0;
    let start = Instant::now();
    for k in 0..1000 {
        let n = rng.gen_range(1..=8);
        let (h, w) = (
            *sizes.choose(&mut rng).unwrap(),
            *sizes.choose(&mut rng).unwrap(),
        );
        let poses: Vec<Pose2D> = (0..n).map(|_| random_pose(&mut rng, h, w)).collect();
        let refs: Vec<&Pose2D> = poses.iter().collect();
        let mode = if k % 2 == 0 {
            MaskMode::Soft
        } else {
            MaskMode::Hard
        };
        let set = build_mask_set(
            &refs,
            h,
            w,
            RENDER_LINE_WIDTH,
            taus[k % 3],
            mode,
            &[(h / 2, w / 2), (h / 4, w / 4)],
        )
        .map_err(|e| e.to_string())?;
        for level in set.levels() {
            levels += 1;
            let (lh, lw) = level.shape();
            for p in 0..lh * lw {
                let sum: f64 = (0..n).map(|i| level.mask(i)[p]).sum();
                worst = worst.max((sum - 1.0).abs());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= PARTITION_TOL && levels == 3000 && secs < 60.0,
        format!("1000 configs, {levels} levels, worst |sum-1| = {worst:.2e}, {secs:.1}s"),
    )
}

fn single_instance_degeneracy(ctx: &mut Ctx) -> Outcome {
    let factory = ctx.factory();
    let schedule = NoiseSchedule::default();
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let id = Palette::default().entries()[seed as usize % 8].0.clone();
        let scene = row_scene(&[id.as_str()], 64, 64, 0.75, 1.0, seed);
        let cfg = scene.sampler_config();
        let specs =
            branch_specs(&scene, CompositionMode::FineControl).map_err(|e| e.to_string())?;
        let cond = condition_branch(&specs[0], &TextEmbedder::default(), 64, 64)
            .map_err(|e| e.to_string())?;
        let plain = sample_single(factory.0.as_ref(), &cond, &cfg, &schedule, 64, 64)
            .map_err(|e| e.to_string())?;
        for mode in CompositionMode::ALL {
            let g = generate(&scene, &factory, &cfg, &scene.harmony, mode, &schedule)
                .map_err(|e| e.to_string())?;
            worst = worst.max(g.image.max_abs_diff(&plain));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= DEGENERACY_TOL && secs < 120.0,
        format!("20 seeds x 4 modes, worst max-abs {worst:.2e}, {secs:.1}s"),
    )
}

fn closed_form_composition(_: &mut Ctx) -> Outcome {
    let factory = DeltaFactory::default();
    let schedule = NoiseSchedule::default();
    let harmony = HarmonyParams::default();
    let cfg = |seed| SamplerConfig {
        num_steps: 20,
        eta: 0.0,
        seed,
        guidance_scale: 1.0,
    };
    let start = Instant::now();
    let (h, w) = (48, 64);
    let mut worst_blend = 0.0f64;
    for (k, ids) in [&["red", "green"][..], &["red", "green", "blue"][..]]
        .into_iter()
        .enumerate()
    {
        let scene = row_scene(ids, h, w, 0.7, 0.5, k as u64);
        let g = generate(
            &scene,
            &factory,
            &cfg(k as u64),
            &harmony,
            CompositionMode::FineControl,
            &schedule,
        )
        .map_err(|e| e.to_string())?;
        let poses: Vec<&Pose2D> = scene.instances.iter().map(|i| &i.pose).collect();
        let masks = soft_mask_oracle(&poses, h, w, RENDER_LINE_WIDTH, harmony.tau);
        let level = finecontrol::pose_geometry::MaskLevel::new(h, w, masks);
        let specs =
            branch_specs(&scene, CompositionMode::FineControl).map_err(|e| e.to_string())?;
        let targets: Vec<Tensor> = specs
            .iter()
            .map(|s| render_figures(&s.figures, &factory.palette, h, w))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        worst_blend = worst_blend.max(g.image.max_abs_diff(&blend_oracle(&level, &targets)));
    }

    // Disjoint instances: the same left figure next to two different neighbors.
    let a = row_scene(&["red", "green"], h, w, 0.7, 1.0, 5);
    let b = row_scene(&["red", "blue"], h, w, 0.7, 1.0, 5);
    let run = |s| {
        generate(
            s,
            &factory,
            &cfg(5),
            &harmony,
            CompositionMode::FineControl,
            &schedule,
        )
        .map_err(|e| e.to_string())
    };
    let (ga, gb) = (run(&a)?, run(&b)?);
    let poses: Vec<&Pose2D> = a.instances.iter().map(|i| &i.pose).collect();
    let hard = build_mask_set(
        &poses,
        h,
        w,
        RENDER_LINE_WIDTH,
        harmony.tau,
        MaskMode::Hard,
        &[],
    )
    .map_err(|e| e.to_string())?;
    let specs = branch_specs(&a, CompositionMode::FineControl).map_err(|e| e.to_string())?;
    let red =
        render_figures(&specs[0].figures, &factory.palette, h, w).map_err(|e| e.to_string())?;
    let (mut region, mut worst_target, mut bit_changes) = (0, 0.0f64, 0);
    for p in 0..h * w {
        if hard.base().mask(0)[p] == 1.0 {
            region += 1;
            for c in 0..3 {
                worst_target = worst_target.max((ga.image.plane(c)[p] - red.plane(c)[p]).abs());
                if ga.image.plane(c)[p].to_bits() != gb.image.plane(c)[p].to_bits() {
                    bit_changes += 1;
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst_blend <= BLEND_TOL
            && region > 0
            && worst_target <= TARGET_TOL
            && bit_changes == 0
            && secs < 60.0,
        format!(
            "blend max-abs {worst_blend:.2e}; disjoint region {region} px, target max-abs \
             {worst_target:.2e}, {bit_changes} bit changes; {secs:.1}s"
        ),
    )
}

fn identity_vs_global(ctx: &mut Ctx) -> Outcome {
    let trained_in = ctx.model().1;
    let bench = ctx.bench();
    let fc = bench.report(CompositionMode::FineControl).unwrap();
    let gl = bench.report(CompositionMode::Global).unwrap();
    let diffs = |mode| -> Vec<f64> { bench.records_of(mode).map(|r| r.mean_diff()).collect() };
    let test = sign_test(
        &diffs(CompositionMode::FineControl),
        &diffs(CompositionMode::Global),
    );
    let budget_ok = trained_in.map_or(true, |d| d <= TRAIN_BUDGET);
    check(
        fc.cio_sigma.mean >= SIGMA_RATIO * gl.cio_sigma.mean
            && fc.cio_diff.mean > gl.cio_diff.mean
            && test.p_value < SIGN_TEST_ALPHA
            && budget_ok,
        format!(
            "sigma FC {:.4} vs GLOBAL {:.4} (ratio {:.2}); diff FC {:.3} vs GLOBAL {:.3}, \
             sign test {}/{}/{} p={:.2e}; training {}",
            fc.cio_sigma.mean,
            gl.cio_sigma.mean,
            fc.cio_sigma.mean / gl.cio_sigma.mean,
            fc.cio_diff.mean,
            gl.cio_diff.mean,
            test.wins,
            test.losses,
            test.ties,
            test.p_value,
            trained_in.map_or("cached".into(), |d| format!("{:.0}s", d.as_secs_f64())),
        ),
    )
}

fn composition_ablations(ctx: &mut Ctx) -> Outcome {
    let bench = ctx.bench();
    let fc = bench.report(CompositionMode::FineControl).unwrap();
    let xc = bench.report(CompositionMode::XCompose).unwrap();
    let hv = bench.report(CompositionMode::HV2).unwrap();
    check(
        fc.cio_sigma.mean > xc.cio_sigma.mean && fc.ap > hv.ap,
        format!(
            "sigma FC {:.6} vs X_COMPOSE {:.6}; AP FC {:.2} vs H_V2 {:.2}",
            fc.cio_sigma.mean, xc.cio_sigma.mean, fc.ap, hv.ap
        ),
    )
}

fn harmony_schedule(_: &mut Ctx) -> Outcome {
    let factory = DeltaFactory::default();
    let scene = row_scene(&["red", "green"], 32, 48, 0.8, 0.75, 2);
    let mut seen = Vec::new();
    let mut ok = true;
    for (steps, want) in [(4, 1), (20, 5), (50, 13)] {
        let cfg = SamplerConfig {
            num_steps: steps,
            eta: 0.0,
            seed: 2,
            guidance_scale: 1.0,
        };
        let g = generate(
            &scene,
            &factory,
            &cfg,
            &HarmonyParams::default(),
            CompositionMode::FineControl,
            &NoiseSchedule::default(),
        )
        .map_err(|e| e.to_string())?;
        let leading = g
            .trace
            .steps
            .iter()
            .take_while(|s| s.mask_mode == MaskMode::Hard)
            .count();
        ok &= leading == want && g.trace.hard_step_count() == want && g.trace.steps.len() == steps;
        seen.push(format!("{steps}->{leading}"));
    }
    check(ok, format!("hard steps {}", seen.join(", ")))
}

fn metric_fixtures(_: &mut Ctx) -> Outcome {
    let sigma = cio_sigma_from_scores(&[24.2, 23.0], 0).map_err(|e| e.to_string())?;
    let diff = cio_diff_from_scores(&[24.2, 23.0, 22.0], 0).map_err(|e| e.to_string())?;

    let k = PoseFormat::Coco17.oks_constants();
    let area = 100.0;
    let d = (2.0 * area * k[0] * k[0]).sqrt();
    let one = |x: f64, y: f64| {
        let mut kps = vec![Keypoint::hidden(); 17];
        kps[0] = Keypoint::visible(x, y);
        Pose2D::new(PoseFormat::Coco17, kps)
            .unwrap()
            .with_out_of_frame(true)
    };
    let o = oks(
        &one(10.0, 10.0),
        &one(10.0 + 0.6 * d, 10.0 + 0.8 * d),
        area,
        &k,
    )
    .map_err(|e| e.to_string())?;

    let gts: Vec<Pose2D> = [40.0, 110.0, 180.0]
        .iter()
        .map(|&cx| StandingFigure::new(cx, 10.0, 120.0).pose())
        .collect();
    let offsets = [0.0, 2.5, 5.0, 9.0];
    let scores = [0.9, 0.6, 0.3];
    let (mut fixtures, mut worst_ap) = (0, 0.0f64);
    for n_gt in 1..=3 {
        let picks = n_gt * offsets.len();
        for n_det in 0..=3usize {
            for code in 0..picks.pow(n_det as u32) {
                let mut c = code;
                let dets: Vec<Detection> = (0..n_det)
                    .map(|j| {
                        let pick = c % picks;
                        c /= picks;
                        let off = offsets[pick % offsets.len()];
                        Detection {
                            pose: gts[pick / offsets.len()]
                                .transformed(|x, y| (x + off, y - 0.5 * off)),
                            score: scores[j],
                        }
                    })
                    .collect();
                let gt = vec![gts[..n_gt].to_vec()];
                let got = keypoint_ap(&gt, &[dets.clone()])
                    .map_err(|e| e.to_string())?
                    .ap;
                worst_ap = worst_ap.max((got - ap_oracle(&gt, &[dets])).abs());
                fixtures += 1;
            }
        }
    }
    let hnd_ok = [(2, 2, 0), (2, 0, 2), (0, 3, 3), (7, 4, 3), (1, 9, 8)]
        .iter()
        .all(|&(g, dt, want)| hnd(g, dt) == want);
    check(
        (sigma - 0.7685).abs() <= SIGMA_FIXTURE_TOL
            && (diff - 1.7).abs() <= DIFF_FIXTURE_TOL
            && (o - (-1.0f64).exp()).abs() <= OKS_FIXTURE_TOL
            && worst_ap <= AP_ORACLE_TOL
            && hnd_ok,
        format!(
            "sigma {sigma:.6}, diff {diff}, oks {o:.8}, AP worst gap {worst_ap:.1e} over \
             {fixtures} fixtures, hnd {}",
            if hnd_ok { "exact" } else { "wrong" }
        ),
    )
}

fn gradient_check(_: &mut Ctx) -> Outcome {
    let params = dense_params(11, 0.3);
    let sched = NoiseSchedule::default();
    let cfg = DatasetConfig {
        height: 16,
        width: 16,
        samples: 1,
        two_figure_fraction: 1.0,
        scale: (0.7, 0.7),
        seed: 11,
        ..Default::default()
    };
    let sample = synth_training_set(&cfg, &Palette::default(), &TextEmbedder::default())
        .map_err(|e| e.to_string())?
        .remove(0);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let loss = |p: &TinyParams, t: usize, eps: &Tensor| {
        loss_and_gradient(
            &TinyDenoiser::new(p.clone(), sched.clone()),
            &sample,
            t,
            eps,
        )
        .unwrap()
        .0
    };
    let h = 1e-5;
    let (mut checked, mut worst) = (0, 0.0f64);
    for _ in 0..3 {
        let t = rng.gen_range(1..sched.horizon());
        let eps = Tensor::randn(3, 16, 16, &mut rng);
        let model = TinyDenoiser::new(params.clone(), sched.clone());
        let (_, grads) = loss_and_gradient(&model, &sample, t, &eps).map_err(|e| e.to_string())?;
        let grads = grads.named();
        assert!(grads.iter().map(|(n, _)| n).eq(names.iter()));
        for _ in 0..12 {
            let which = rng.gen_range(0..names.len());
            let idx = rng.gen_range(0..grads[which].1.data.len());
            let shifted = |d: f64| {
                let mut p = params.clone();
                p.named_mut()
                    .into_iter()
                    .find(|(n, _)| *n == names[which])
                    .unwrap()
                    .1
                    .data[idx] += d;
                loss(&p, t, &eps)
            };
            let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
            let an = grads[which].1.data[idx];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(GRAD_FLOOR);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    check(
        worst < GRAD_REL_TOL && checked >= 30,
        format!("{checked} parameters at 3 timesteps, worst relative error {worst:.2e}"),
    )
}

fn robustness_trends(ctx: &mut Ctx) -> Outcome {
    let factory = ctx.factory();
    let oracle = ToySimilarityOracle::default();
    let detector = ToyPoseDetector::default();
    let eval = Evaluators {
        oracle: &oracle,
        detector: &detector,
    };
    let seeds: Vec<u64> = (0..SEEDS).collect();
    let start = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    for axis in [SweepAxis::PeopleCount, SweepAxis::InterDistance] {
        let sweep = robustness_sweep(
            &SweepConfig::defaults(axis),
            &SweepBase::default(),
            &seeds,
            &factory,
            &NoiseSchedule::default(),
            eval,
        )
        .map_err(|e| e.to_string())?;
        let sig: Vec<f64> = sweep
            .points
            .iter()
            .map(|p| p.report.cio_sigma.mean)
            .collect();
        ok &= sig.windows(2).all(|w| w[1] <= w[0]);
        parts.push(format!(
            "{}: {}",
            axis.as_str(),
            sweep
                .points
                .iter()
                .zip(&sig)
                .map(|(p, s)| format!("{}->{s:.10}", p.value))
                .collect::<Vec<_>>()
                .join(" ")
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        ok && secs < 20.0 * 60.0,
        format!("{}; {secs:.0}s", parts.join("; ")),
    )
}
