use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use voxclip::eval::{r_precision, Retrieval};
use voxclip::guidance::{open_provider, ImageBatch};
use voxclip::render::{export_turntable, render_white};
use voxclip::train::{resume_from, RunConfig, Trainer, PRESETS};
use voxclip::{CameraConfig, Checkpoint};

/// Text-to-3D voxel radiance field optimization.
#[derive(Parser)]
#[command(name = "voxclip", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize a field for one prompt.
    Generate(GenerateArgs),
    /// Render a turntable of PNG views from a checkpoint.
    Render(RenderArgs),
    /// R-Precision of a set of checkpoints against a prompt list.
    Eval(EvalArgs),
    /// Print a checkpoint header.
    Inspect { checkpoint: PathBuf },
    /// Print a preset as a config file.
    Preset {
        /// One of the built-in preset names; lists them when omitted.
        name: Option<String>,
    },
}

#[derive(Args)]
struct ProviderArg {
    /// `toy` or the base URL of a guidance server.
    #[arg(long, env = "VOXCLIP_PROVIDER")]
    provider: Option<String>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Config file, or the name of a built-in preset.
    #[arg(long, default_value = "224_explicit")]
    config: String,
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a snapshot written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Disable an augmentation stage or gated term (repeatable).
    #[arg(long, value_name = "STAGE")]
    ablate: Vec<String>,
    #[command(flatten)]
    provider: ProviderArg,
    /// Output directory for snapshots, metrics and the final checkpoint.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 30.0)]
    elevation: f64,
    #[arg(long, default_value_t = 8)]
    views: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 224)]
    size: usize,
    /// March step as a fraction of the smallest voxel edge.
    #[arg(long, default_value_t = 0.5)]
    step_scale: f64,
    #[arg(long, default_value = "views")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory searched (one level deep) for `.voxf` checkpoints.
    checkpoints: PathBuf,
    /// One prompt per line; blank lines and `#` comments are skipped.
    #[arg(long)]
    prompts: PathBuf,
    #[command(flatten)]
    provider: ProviderArg,
    /// Retrieval model, independent of the model used for training.
    #[arg(long, default_value = "vit-b-32")]
    model: String,
    #[arg(long, default_value_t = 45.0)]
    elevation: f64,
    /// Views per object; scores are averaged over views.
    #[arg(long, default_value_t = 1)]
    views: usize,
    #[arg(long, default_value_t = 224)]
    size: usize,
    #[arg(long, default_value_t = 0.5)]
    step_scale: f64,
    /// Write the JSON report here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Render(a) => render(a),
        Command::Eval(a) => eval(a),
        Command::Inspect { checkpoint } => inspect(&checkpoint),
        Command::Preset { name } => preset(name.as_deref()),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn load_config(spec: &str) -> Result<RunConfig> {
    if PRESETS.contains(&spec) {
        return Ok(RunConfig::preset(spec)?);
    }
    RunConfig::load(Path::new(spec)).with_context(|| format!("loading config {spec}"))
}

fn generate(a: GenerateArgs) -> Result<()> {
    let mut config = load_config(&a.config)?;
    if let Some(p) = a.prompt {
        config.prompt = p;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(p) = a.provider.provider {
        config.guidance.endpoint = p;
    }
    for stage in &a.ablate {
        config.ablate(stage)?;
    }
    if config.prompt.trim().is_empty() {
        bail!("no prompt given; pass --prompt or set `prompt` in the config");
    }
    config.validate()?;

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    std::fs::write(a.out.join("config.toml"), config.to_toml())?;
    let mut trainer = match &a.resume {
        Some(path) => resume_from(config, path).with_context(|| format!("resuming from {}", path.display()))?,
        None => Trainer::new(config)?,
    };
    log::info!(
        "optimizing {:?} from iteration {} to {}",
        trainer.config().prompt,
        trainer.iteration(),
        trainer.config().schedule.total_iters
    );
    let history = trainer.run(Some(&a.out))?;
    if let Some(last) = history.last() {
        log::info!("done: total {:.5} clip {:.5}", last.total, last.clip);
    }
    println!("{}", a.out.join("final.voxf").display());
    Ok(())
}

fn camera(elevation: f64, size: usize) -> CameraConfig {
    CameraConfig {
        elevation,
        height: size,
        width: size,
        ..CameraConfig::default()
    }
}

fn render(a: RenderArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let step = a.step_scale * ck.field.spec().min_voxel_size();
    let paths = export_turntable(&ck.field, &camera(a.elevation, a.size), a.views, step, &a.out)?;
    for p in paths {
        println!("{}", p.display());
    }
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let h = &ck.header;
    let spec = ck.field.spec();
    println!("kind          {}", h.kind);
    println!("prompt        {:?}", h.prompt);
    println!("iteration     {}", h.iteration);
    println!("seed          {}", h.seed);
    println!("config_digest {}", h.config_digest);
    println!(
        "resolution    {}x{}x{} ({} voxels, target {})",
        spec.resolution[0],
        spec.resolution[1],
        spec.resolution[2],
        spec.resolution.iter().map(|r| r - 1).product::<usize>(),
        spec.target_voxels
    );
    println!("bounds        {:?} .. {:?}", spec.bounds.min, spec.bounds.max);
    for (name, t) in ck.field.params() {
        println!("tensor        {name} {:?}", t.shape());
    }
    for (name, t) in &ck.extras {
        println!("extra         {name} {:?}", t.shape());
    }
    Ok(())
}

fn preset(name: Option<&str>) -> Result<()> {
    match name {
        None => PRESETS.iter().for_each(|p| println!("{p}")),
        Some(n) => print!("{}", RunConfig::preset(n)?.to_toml()),
    }
    Ok(())
}

fn read_prompts(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

fn voxf_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            for inner in std::fs::read_dir(&path)? {
                out.push(inner?.path());
            }
        } else {
            out.push(path);
        }
    }
    out.retain(|p| p.extension().is_some_and(|e| e == "voxf"));
    out.sort();
    Ok(out)
}

#[derive(Serialize)]
struct Report {
    model_id: String,
    elevation: f64,
    views: usize,
    prompts: usize,
    evaluated: usize,
    missing: Vec<String>,
    r_precision: f64,
    objects: Vec<ObjectReport>,
}

#[derive(Serialize)]
struct ObjectReport {
    checkpoint: PathBuf,
    #[serde(flatten)]
    retrieval: Retrieval,
}

fn eval(a: EvalArgs) -> Result<()> {
    let prompts = read_prompts(&a.prompts)?;
    // latest checkpoint for each prompt
    let mut found: BTreeMap<String, (u64, PathBuf, Checkpoint)> = BTreeMap::new();
    for path in voxf_files(&a.checkpoints)? {
        let ck = match Checkpoint::load(&path) {
            Ok(ck) => ck,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        let it = ck.header.iteration;
        let newer = found.get(&ck.header.prompt).map_or(true, |(best, _, _)| it > *best);
        if newer {
            found.insert(ck.header.prompt.clone(), (it, path, ck));
        }
    }
    let (present, missing): (Vec<String>, Vec<String>) =
        prompts.iter().cloned().partition(|p| found.contains_key(p));
    if !missing.is_empty() {
        log::warn!("no checkpoint for {} prompt(s): {missing:?}", missing.len());
    }
    if present.len() < 2 {
        bail!("need checkpoints for at least two prompts, found {}", present.len());
    }

    let endpoint = a.provider.provider.as_deref().unwrap_or("toy");
    let refs: Vec<&str> = present.iter().map(String::as_str).collect();
    let provider = open_provider(endpoint, &a.model, &refs, a.size)?;
    let cam = camera(a.elevation, a.size);
    let mut views = Vec::with_capacity(present.len());
    for p in &present {
        let ck = &found[p].2;
        let step = a.step_scale * ck.field.spec().min_voxel_size();
        let mut data = Vec::with_capacity(a.views * a.size * a.size * 3);
        for pose in cam.turntable(a.views) {
            let img = render_white(&ck.field, &pose, step)?;
            data.extend(img.data().iter().map(|&x| x as f64));
        }
        views.push(ImageBatch::new([a.views, a.size, a.size, 3], data)?);
    }
    let result = r_precision(provider.as_ref(), &present, &views)?;
    let report = Report {
        model_id: result.model_id,
        elevation: a.elevation,
        views: a.views,
        prompts: prompts.len(),
        evaluated: present.len(),
        missing,
        r_precision: result.r_precision,
        objects: result
            .objects
            .into_iter()
            .map(|r| ObjectReport {
                checkpoint: found[&r.prompt].1.clone(),
                retrieval: r,
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(out) = &a.out {
        std::fs::write(out, &json).with_context(|| format!("writing {}", out.display()))?;
    }
    println!("{json}");
    Ok(())
}
