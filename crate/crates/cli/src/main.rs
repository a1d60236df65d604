mod config;

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use knolling::controller::{episode_scenes, replay, run_pipeline, EpisodeLog, EpisodeStatus};
use knolling::dataset::{self, GraspSample};
use knolling::gem::{self, GemModel};
use knolling::geometry::Extent2D;
use knolling::knoll::{self, KnollModel, PlanEntry};
use knolling::perception::observe_states;
use knolling::render;
use knolling::scene::{generate_scene, Scene, SceneGenConfig};
use knolling::{checks, exec};

use config::{Overrides, RunConfig};

const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "knolling", version, about = "Tabletop knolling: data, models, planning and episodes")]
struct Cli {
    /// JSON run configuration; omitted keys take their defaults (see `knolling config`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    scenes: Option<usize>,
    /// GEM epochs and epochs of both planner phases.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Planner sampling temperature; 0 decodes mixture modes.
    #[arg(long, global = true, default_value_t = 0.0)]
    temperature: f64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Self-supervised grasp data: JSONL plus manifest.
    GenData,
    /// Train the graspability model.
    TrainGem {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score the held-out split with a model and the confidence baseline.
    EvalGem {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Scorer::Gem)]
        scorer: Scorer,
    },
    /// Confidence threshold sweep on the held-out split.
    SweepBaseline {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the placement planner.
    TrainKnoll,
    /// Plan a tidy layout for up to five objects.
    Plan {
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Object sizes in metres, e.g. "0.05,0.02;0.03,0.03".
        #[arg(long, conflicts_with = "scene")]
        extents: Option<String>,
        /// Scene JSON whose objects are planned.
        #[arg(long)]
        scene: Option<PathBuf>,
    },
    /// Full episodes on generated scenes.
    RunPipeline {
        #[arg(long)]
        gem: Option<PathBuf>,
        #[arg(long)]
        knoll: Option<PathBuf>,
        /// Redraw scenes until each holds a stack.
        #[arg(long)]
        require_stack: bool,
    },
    /// SVG of a scene or of every frame of an episode.
    Render {
        #[arg(long, conflicts_with = "episode")]
        scene: Option<PathBuf>,
        #[arg(long)]
        episode: Option<PathBuf>,
        /// Colour by model predictions instead of the grasp oracle.
        #[arg(long)]
        gem: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every trainable block.
    Gradcheck,
    /// Print the effective configuration.
    Config,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq)]
enum Scorer {
    Gem,
    /// Scores equal to the labels; a fixture for checking the evaluation path.
    Labels,
    Confidence,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Input,
    Validation,
    Internal,
}

struct Failure {
    kind: Kind,
    err: anyhow::Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.err)
    }
}

trait Tag<T> {
    fn input(self) -> Result<T, Failure>;
    fn internal(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Tag<T> for Result<T, E> {
    fn input(self) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            kind: Kind::Input,
            err: e.into(),
        })
    }
    fn internal(self) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            kind: Kind::Internal,
            err: e.into(),
        })
    }
}

fn validation(msg: String) -> Failure {
    Failure {
        kind: Kind::Validation,
        err: anyhow!(msg),
    }
}

type Res = Result<(), Failure>;

struct Ctx {
    cfg: RunConfig,
    digest: String,
    out: PathBuf,
    temperature: f64,
}

impl Ctx {
    fn stamp(&self, body: impl Serialize) -> Result<Value, Failure> {
        let mut v = json!({ "config_digest": self.digest, "seed": self.cfg.seed });
        let body = serde_json::to_value(body).internal()?;
        match body {
            Value::Object(m) => v.as_object_mut().expect("object literal").extend(m),
            other => {
                v["result"] = other;
            }
        }
        Ok(v)
    }

    fn write_json(&self, name: &str, body: impl Serialize) -> Result<PathBuf, Failure> {
        let path = self.out.join(name);
        let v = self.stamp(body)?;
        write_file(&path, format!("{}\n", serde_json::to_string_pretty(&v).internal()?).as_bytes())?;
        Ok(path)
    }

    fn svg(&self, svg: String) -> String {
        let note = format!("<!-- config_digest {} seed {} -->", self.digest, self.cfg.seed);
        match svg.find('\n') {
            Some(i) => format!("{}\n{note}{}", &svg[..i], &svg[i..]),
            None => svg,
        }
    }

    fn samples(&self, data: &Option<PathBuf>) -> Result<Vec<GraspSample>, Failure> {
        let path = data.clone().or_else(|| self.cfg.paths.data.clone()).unwrap_or_else(|| self.out.join("data.jsonl"));
        let samples = dataset::load_jsonl(&path).input()?;
        if samples.is_empty() {
            return Err(Failure {
                kind: Kind::Input,
                err: anyhow!("{} holds no samples", path.display()),
            });
        }
        Ok(samples)
    }

    fn gem(&self, path: &Option<PathBuf>) -> Result<GemModel, Failure> {
        let p = path.clone().or_else(|| self.cfg.paths.gem_weights.clone()).unwrap_or_else(|| self.out.join("gem.json"));
        Ok(GemModel::load(&p).with_context(|| format!("loading {}", p.display())).input()?.0)
    }

    fn knoll(&self, path: &Option<PathBuf>) -> Result<KnollModel, Failure> {
        let p = path.clone().or_else(|| self.cfg.paths.knoll_weights.clone()).unwrap_or_else(|| self.out.join("knoll.json"));
        Ok(KnollModel::load(&p).with_context(|| format!("loading {}", p.display())).input()?.0)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Res {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).internal()?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display())).internal()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("KNOLLING_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.jobs {
        Some(0) => Err(Failure {
            kind: Kind::Input,
            err: anyhow!("--jobs must be positive"),
        }),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .internal()
            .and_then(|pool| pool.install(|| run(&cli))),
        None => run(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(match f.kind {
                Kind::Input => 2,
                Kind::Validation => 3,
                Kind::Internal => 1,
            })
        }
    }
}

fn run(cli: &Cli) -> Res {
    let overrides = Overrides {
        seed: cli.seed,
        scenes: cli.scenes,
        epochs: cli.epochs,
        lr: cli.lr,
    };
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides).input()?;
    if !(cli.temperature >= 0.0 && cli.temperature.is_finite()) {
        return Err(Failure {
            kind: Kind::Input,
            err: anyhow!("--temperature must be a non-negative number"),
        });
    }
    let ctx = Ctx {
        digest: cfg.digest(),
        cfg,
        out: cli.out.clone(),
        temperature: cli.temperature,
    };
    log::debug!("config digest {}", ctx.digest);
    match &cli.command {
        Command::GenData => gen_data(&ctx),
        Command::TrainGem { data } => train_gem(&ctx, data),
        Command::EvalGem { data, weights, scorer } => eval_gem(&ctx, data, weights, *scorer),
        Command::SweepBaseline { data } => sweep_baseline(&ctx, data),
        Command::TrainKnoll => train_knoll(&ctx),
        Command::Plan { weights, extents, scene } => plan(&ctx, weights, extents, scene),
        Command::RunPipeline {
            gem,
            knoll,
            require_stack,
        } => run_episodes(&ctx, gem, knoll, *require_stack),
        Command::Render { scene, episode, gem } => render_cmd(&ctx, scene, episode, gem),
        Command::Gradcheck => gradcheck(&ctx),
        Command::Config => {
            let text = serde_json::to_string_pretty(&ctx.cfg).internal()?;
            // A closed pipe (`| head`) is not an error here.
            let _ = writeln!(std::io::stdout(), "{text}");
            Ok(())
        }
    }
}

fn gen_data(ctx: &Ctx) -> Res {
    let c = &ctx.cfg;
    let (samples, mut manifest) =
        dataset::generate_selfsup(&c.scene, &c.perception, &c.gripper, c.scenes, c.seed).input()?;
    manifest.config_digest = ctx.digest.clone();
    let path = ctx.out.join("data.jsonl");
    std::fs::create_dir_all(&ctx.out).internal()?;
    dataset::save_jsonl(&path, &samples).internal()?;
    dataset::save_manifest(&dataset::manifest_path(&path), &manifest).internal()?;
    println!(
        "{} samples, {} objects from {} scenes -> {}",
        manifest.sample_count,
        manifest.object_count,
        manifest.scene_count,
        path.display()
    );
    Ok(())
}

fn train_gem(ctx: &Ctx, data: &Option<PathBuf>) -> Res {
    let samples = ctx.samples(data)?;
    let (train, val, test) = dataset::split_three(&samples, ctx.cfg.train_ratio);
    log::info!("gem split: {} train, {} validation, {} test samples", train.len(), val.len(), test.len());
    let (model, history) = gem::train(&train, &val, &ctx.cfg.gem).input()?;
    let path = ctx.out.join("gem.json");
    std::fs::create_dir_all(&ctx.out).internal()?;
    model
        .save(&path, ctx.stamp(json!({ "best_epoch": history.best_epoch }))?)
        .internal()?;
    ctx.write_json("gem_history.json", &history)?;
    println!(
        "best epoch {} with validation accuracy {:.4} -> {}",
        history.best_epoch,
        history.best_val_accuracy,
        path.display()
    );
    Ok(())
}

fn eval_gem(ctx: &Ctx, data: &Option<PathBuf>, weights: &Option<PathBuf>, scorer: Scorer) -> Res {
    let samples = ctx.samples(data)?;
    let (_, _, test) = dataset::split_three(&samples, ctx.cfg.train_ratio);
    if test.is_empty() {
        return Err(Failure {
            kind: Kind::Input,
            err: anyhow!("the held-out split is empty; generate more scenes"),
        });
    }
    let sweep = gem::baseline_sweep(&test).internal()?;
    let subject = match scorer {
        Scorer::Gem => {
            let model = ctx.gem(weights)?;
            gem::evaluate("gem", |s| model.predict(&s.states), &test, gem::GEM_THRESHOLD)
        }
        Scorer::Labels => gem::evaluate(
            "labels",
            |s| Ok(s.labels.iter().map(|&l| f64::from(l)).collect()),
            &test,
            gem::GEM_THRESHOLD,
        ),
        Scorer::Confidence => gem::evaluate("confidence", gem::confidence_scores, &test, gem::GEM_THRESHOLD),
    }
    .internal()?;
    let baseline = gem::evaluate("baseline", gem::confidence_scores, &test, sweep.threshold).internal()?;
    let reports = [subject, baseline];
    let table = gem::format_reports(&reports);
    print!("{table}");
    for r in &reports {
        let c = &r.confusion;
        println!(
            "{}: TP {} TN {} FP {} FN {} (FP rate {:.4})",
            r.label, c.tp, c.tn, c.fp, c.fn_, r.false_positive_rate
        );
    }
    write_file(&ctx.out.join("eval.txt"), format!("# config_digest {} seed {}\n{table}", ctx.digest, ctx.cfg.seed).as_bytes())?;
    ctx.write_json("eval.json", json!({ "reports": reports, "baseline_threshold": sweep.threshold }))?;
    Ok(())
}

fn sweep_baseline(ctx: &Ctx, data: &Option<PathBuf>) -> Res {
    let samples = ctx.samples(data)?;
    let (_, _, test) = dataset::split_three(&samples, ctx.cfg.train_ratio);
    let sweep = gem::baseline_sweep(&test).input()?;
    println!("θ* = {:.2}, accuracy {:.5}", sweep.threshold, sweep.accuracy);
    ctx.write_json("sweep.json", &sweep)?;
    Ok(())
}

fn train_knoll(ctx: &Ctx) -> Res {
    let (model, history) = knoll::train(&ctx.cfg.scene, &ctx.cfg.knoll).input()?;
    let path = ctx.out.join("knoll.json");
    std::fs::create_dir_all(&ctx.out).internal()?;
    model.save(&path, ctx.stamp(json!({}))?).internal()?;
    ctx.write_json("knoll_history.json", &history)?;
    let last = history.epochs.last().map_or(f64::NAN, |e| e.nll);
    println!("final NLL {last:.4} -> {}", path.display());
    Ok(())
}

fn parse_extents(text: &str) -> anyhow::Result<Vec<Extent2D>> {
    text.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|pair| {
            let v: Vec<f64> = pair
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .with_context(|| format!("bad extent {pair:?}"))?;
            anyhow::ensure!(v.len() == 2, "extent {pair:?} needs two numbers");
            Ok(Extent2D::new(v[0], v[1])?)
        })
        .collect()
}

fn load_scene(path: &Path) -> anyhow::Result<Scene> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let inner = if v.get("objects").is_some() { v } else { v["scene"].clone() };
    let scene: Scene = serde_json::from_value(inner).with_context(|| format!("{} is not a scene", path.display()))?;
    scene.validate()?;
    Ok(scene)
}

fn load_episode(path: &Path) -> anyhow::Result<EpisodeLog> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let inner = if v.get("entries").is_some() { v } else { v["episode"].clone() };
    serde_json::from_value(inner).with_context(|| format!("{} is not an episode log", path.display()))
}

fn plan(ctx: &Ctx, weights: &Option<PathBuf>, extents: &Option<String>, scene: &Option<PathBuf>) -> Res {
    let (ids, sizes): (Vec<u32>, Vec<Extent2D>) = match (extents, scene) {
        (Some(t), _) => {
            let e = parse_extents(t).input()?;
            ((0..e.len() as u32).collect(), e)
        }
        (None, Some(p)) => {
            let s = load_scene(p).input()?;
            s.objects.iter().map(|o| (o.id, o.rect.extent)).unzip()
        }
        (None, None) => {
            return Err(Failure {
                kind: Kind::Input,
                err: anyhow!("plan needs --extents or --scene"),
            })
        }
    };
    let model = ctx.knoll(weights)?;
    let poses = model.plan(&sizes, ctx.temperature, ctx.cfg.seed).input()?;
    let check = knoll::validate_plan(&poses, &sizes, model.layout.min_gap(), &model.layout.workspace).internal()?;
    let entries: Vec<PlanEntry> = ids
        .iter()
        .zip(&poses)
        .map(|(&id, p)| PlanEntry {
            id,
            x: p.x,
            y: p.y,
            yaw: p.yaw,
        })
        .collect();
    let path = ctx.write_json(
        "plan.json",
        json!({ "temperature": ctx.temperature, "valid": check.valid, "violations": check.violations, "plan": entries }),
    )?;
    println!("{}", serde_json::to_string(&entries).internal()?);
    if !check.valid {
        return Err(validation(format!("plan violates the layout rules; see {}", path.display())));
    }
    Ok(())
}

#[derive(Serialize, Default)]
struct Summary {
    episodes: usize,
    successes: usize,
    success_rate: f64,
    status: BTreeMap<String, usize>,
    mean_sweeps: f64,
    sweep_before_grasp_violations: usize,
    replay_mismatches: usize,
}

fn run_episodes(ctx: &Ctx, gem_path: &Option<PathBuf>, knoll_path: &Option<PathBuf>, require_stack: bool) -> Res {
    let gem_model = ctx.gem(gem_path)?;
    let knoll_model = ctx.knoll(knoll_path)?;
    let scenes = episode_scenes(&ctx.cfg.scene, ctx.cfg.scenes, ctx.cfg.seed, require_stack).input()?;
    let logs = exec::map_indexed(scenes.len(), |i| {
        let seed = knolling::util::derive_seed(ctx.cfg.seed, &[0xEB, i as u64]);
        run_pipeline(&scenes[i], &gem_model, &knoll_model, &ctx.cfg.pipeline, seed)
    });
    let mut summary = Summary {
        episodes: scenes.len(),
        ..Default::default()
    };
    let dir = ctx.out.join("episodes");
    for (i, log) in logs.into_iter().enumerate() {
        let log = log.input()?;
        if log.status == EpisodeStatus::Success {
            summary.successes += 1;
        }
        *summary.status.entry(format!("{:?}", log.status)).or_default() += 1;
        summary.mean_sweeps += log.sweeps() as f64;
        if log.initially_ungraspable() && !matches!((log.first_sweep(), log.first_grasp()), (Some(s), g) if g.is_none_or(|g| s < g)) {
            summary.sweep_before_grasp_violations += 1;
        }
        if replay(&log, &ctx.cfg.gripper).ok().as_ref() != Some(&log.final_scene) {
            summary.replay_mismatches += 1;
        }
        ctx.write_json(&format!("episodes/episode_{i:04}.json"), json!({ "episode": log }))?;
    }
    summary.success_rate = summary.successes as f64 / summary.episodes.max(1) as f64;
    summary.mean_sweeps /= summary.episodes.max(1) as f64;
    ctx.write_json("summary.json", &summary)?;
    println!(
        "{}/{} episodes succeeded ({:.1}%), logs in {}",
        summary.successes,
        summary.episodes,
        100.0 * summary.success_rate,
        dir.display()
    );
    if summary.replay_mismatches > 0 {
        return Err(validation(format!("{} episode logs do not replay", summary.replay_mismatches)));
    }
    Ok(())
}

fn render_cmd(ctx: &Ctx, scene: &Option<PathBuf>, episode: &Option<PathBuf>, gem_path: &Option<PathBuf>) -> Res {
    if let Some(p) = episode {
        let log = load_episode(p).input()?;
        let frames = render::render_episode(&log);
        for (i, f) in frames.iter().enumerate() {
            write_file(&ctx.out.join(format!("frames/frame_{i:04}.svg")), ctx.svg(f.clone()).as_bytes())?;
        }
        println!("{} frames -> {}", frames.len(), ctx.out.join("frames").display());
        return Ok(());
    }
    let scene = match scene {
        Some(p) => load_scene(p).input()?,
        None => generate_scene(&SceneGenConfig {
            seed: ctx.cfg.seed,
            ..ctx.cfg.scene.clone()
        })
        .input()?,
    };
    let notes = match gem_path {
        Some(_) => {
            let model = ctx.gem(gem_path)?;
            let perception = ctx.cfg.perception.with_seed(ctx.cfg.seed);
            let obs = observe_states(&scene, &perception).internal()?;
            let states: Vec<_> = obs.iter().map(|(_, s)| *s).collect();
            let mut preds = vec![0.0; states.len()];
            for group in dataset::partition_indices(&states) {
                let g: Vec<_> = group.iter().map(|&i| states[i]).collect();
                for (&i, p) in group.iter().zip(model.predict(&g).internal()?) {
                    preds[i] = p;
                }
            }
            let list: Vec<_> = obs
                .iter()
                .zip(preds)
                .map(|((id, s), p)| knolling::controller::ObjectPrediction {
                    id: *id,
                    state: *s,
                    p_graspable: p,
                })
                .collect();
            render::from_predictions(&list)
        }
        None => render::from_oracle(&scene, &ctx.cfg.gripper),
    };
    let svg = render::render_scene(&scene, &notes, &format!("scene seed {}", scene.seed));
    let path = ctx.out.join("scene.svg");
    write_file(&path, ctx.svg(svg).as_bytes())?;
    println!("{} objects -> {}", scene.len(), path.display());
    Ok(())
}

fn gradcheck(ctx: &Ctx) -> Res {
    let reports = checks::suite(ctx.cfg.seed);
    let mut worst: f64 = 0.0;
    for r in &reports {
        println!("{:<20} max relative error {:.3e}", r.label, r.max_rel_error);
        worst = worst.max(r.max_rel_error);
    }
    ctx.write_json("gradcheck.json", json!({ "tolerance": GRADCHECK_TOL, "reports": reports }))?;
    if !(worst <= GRADCHECK_TOL) {
        return Err(validation(format!("max relative error {worst:.3e} exceeds {GRADCHECK_TOL:e}")));
    }
    Ok(())
}
