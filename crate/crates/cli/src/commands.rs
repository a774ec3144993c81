use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Value};
use tinybridge::config::RunConfig;
use tinybridge::experiment::{
    build_model, eval_scenes, evaluate, load_model, new_trainer, params_report, resume_trainer,
    sample_prompts, schedule,
};
use tinybridge::text::token_count;
use tinybridge::train::checkpoint;
use tinybridge::train::scene::render;
use tinybridge::train::{data_seed, scene_at, Trainer};
use tinybridge::{Error, Result};

use crate::png;
use crate::{Cli, Command};

/// Prompts per sampling batch. Fixed because batch-size-dependent kernel
/// rounding perturbs 32-bit outputs.
const SAMPLE_CHUNK: usize = 8;

/// Prompts rendered into each training snapshot grid.
const GRID_PROMPTS: [&str; 4] = [
    "a red circle",
    "a blue square",
    "a green triangle left of a yellow circle",
    "a yellow square above a red triangle",
];

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Dataset { n } => dataset(cli, *n),
        Command::Train { resume, until } => train(cli, resume.as_deref(), *until),
        Command::Sample {
            checkpoint,
            prompts,
            cfg_scale,
            steps,
            eta,
        } => sample(cli, checkpoint, prompts, *cfg_scale, *steps, *eta),
        Command::Eval { samples, report } => eval(cli, samples, report.as_deref()),
        Command::Params => params(cli),
    }
}

fn io_at(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_at(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_at(path, e))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("json values serialise");
    text.push('\n');
    write_text(path, &text)
}

/// File, then `TINYBRIDGE__*` environment, then command-line overrides.
fn load_config(cli: &Cli, seed_key: Option<&str>) -> Result<RunConfig> {
    let file = cli.config.as_deref().map(read_text).transpose()?;
    let mut overrides: Vec<(&str, toml::Value)> = Vec::new();
    if let (Some(key), Some(seed)) = (seed_key, cli.seed) {
        overrides.push((key, seed_value(seed)?));
    }
    if let Some(out) = &cli.out {
        overrides.push(("output_dir", toml::Value::String(out.display().to_string())));
    }
    RunConfig::from_sources(file.as_deref(), std::env::vars(), &overrides)
}

fn seed_value(seed: u64) -> Result<toml::Value> {
    i64::try_from(seed)
        .map(toml::Value::Integer)
        .map_err(|_| Error::Config(format!("--seed {seed} exceeds the TOML integer range")))
}

/// Creates `dir`, refusing a non-empty one unless `force` is set.
fn fresh_dir(dir: &Path, force: bool) -> Result<()> {
    let occupied = match fs::read_dir(dir) {
        Ok(mut entries) => entries.next().is_some(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => false,
        Err(e) => return Err(io_at(dir, e)),
    };
    if occupied {
        if !force {
            return Err(Error::Config(format!(
                "{} is not empty; pass --force to replace it",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(|e| io_at(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| io_at(dir, e))
}

fn image_name(index: usize) -> String {
    format!("{index:06}.png")
}

fn dataset(cli: &Cli, n: usize) -> Result<()> {
    let cfg = load_config(cli, Some("train.seed"))?;
    let out = PathBuf::from(&cfg.output_dir);
    fresh_dir(&out, cli.force)?;
    let res = cfg.train.resolution;
    let seed = data_seed(cfg.train.seed);
    let mut records = String::new();
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let (spec, caption) = scene_at(seed, i as u64);
        let file = image_name(i);
        png::write(&out.join(&file), &render(&spec, res), res)?;
        let record = json!({ "index": i, "caption": caption, "spec": spec });
        records.push_str(&record.to_string());
        records.push('\n');
        samples.push(json!({ "index": i, "file": file, "prompt": caption }));
    }
    write_text(&out.join("records.jsonl"), &records)?;
    write_json(
        &out.join("manifest.json"),
        &json!({
            "kind": "dataset",
            "seed": cfg.train.seed,
            "data_seed": seed,
            "count": n,
            "resolution": res,
            "samples": samples,
        }),
    )?;
    eprintln!("wrote {n} scenes to {}", out.display());
    Ok(())
}

fn checkpoint_name(step: u64) -> String {
    format!("step_{step:06}.ckpt")
}

/// Keeps the first `lines` lines of the loss log, dropping steps that a
/// resumed run will redo.
fn truncate_log(path: &Path, lines: u64) -> Result<()> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(io_at(path, e)),
    };
    let kept: String = text.lines().take(lines as usize).map(|l| format!("{l}\n")).collect();
    if (kept.lines().count() as u64) < lines {
        return Err(Error::Config(format!(
            "{} holds fewer than {lines} steps; cannot resume into it",
            path.display()
        )));
    }
    write_text(path, &kept)
}

fn snapshot(trainer: &Trainer, cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut portable = cfg.clone();
    portable.output_dir = String::new();
    let rec = trainer.checkpoint(&portable.to_toml());
    checkpoint::save(&rec, &out.join("checkpoints").join(checkpoint_name(trainer.step)))?;
    let prompts: Vec<&str> = GRID_PROMPTS
        .iter()
        .copied()
        .filter(|p| token_count(p) <= cfg.language.max_len)
        .collect();
    if !prompts.is_empty() {
        let images = sample_prompts(&trainer.model, &trainer.sched, &prompts, &cfg.sample, SAMPLE_CHUNK)?;
        let path = out.join("samples").join(format!("step_{:06}.png", trainer.step));
        png::write_grid(&path, &images, cfg.sample.resolution)?;
    }
    Ok(())
}

fn train(cli: &Cli, resume: Option<&Path>, until: Option<u64>) -> Result<()> {
    let (cfg, mut trainer, out) = match resume {
        Some(path) => {
            if cli.config.is_some() || cli.seed.is_some() {
                return Err(Error::Config(
                    "--resume takes its configuration from the checkpoint; drop --config and --seed".into(),
                ));
            }
            let rec = checkpoint::load(path)?;
            let (mut cfg, trainer) = resume_trainer(&rec)?;
            let out = match &cli.out {
                Some(o) => o.clone(),
                None => path
                    .parent()
                    .and_then(Path::parent)
                    .map(Path::to_path_buf)
                    .unwrap_or_else(|| PathBuf::from(".")),
            };
            cfg.output_dir = out.display().to_string();
            fs::create_dir_all(&out).map_err(|e| io_at(&out, e))?;
            truncate_log(&out.join("loss.log"), trainer.step)?;
            (cfg, trainer, out)
        }
        None => {
            let cfg = load_config(cli, Some("train.seed"))?;
            let out = PathBuf::from(&cfg.output_dir);
            fresh_dir(&out, cli.force)?;
            let trainer = new_trainer(&cfg)?;
            write_text(&out.join("loss.log"), "")?;
            (cfg, trainer, out)
        }
    };
    for sub in ["checkpoints", "samples"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| io_at(&d, e))?;
    }
    write_text(&out.join("config.toml"), &cfg.to_toml())?;

    let log_path = out.join("loss.log");
    let mut log = fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| io_at(&log_path, e))?;
    let stop = until.unwrap_or(cfg.train.steps).min(cfg.train.steps);
    let every = cfg.train.snapshot_every;
    let started = Instant::now();
    while trainer.step < stop {
        let s = trainer.step_once()?;
        writeln!(log, "{} {}", trainer.step, s.loss).map_err(|e| io_at(&log_path, e))?;
        if trainer.step % every == 0 || trainer.step == stop {
            snapshot(&trainer, &cfg, &out)?;
            eprintln!(
                "step {} loss {:.6} elapsed {:.1}s",
                trainer.step,
                s.loss,
                started.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}

fn sample(
    cli: &Cli,
    ckpt: &Path,
    prompts_path: &Path,
    cfg_scale: Option<f64>,
    steps: Option<usize>,
    eta: Option<f64>,
) -> Result<()> {
    if cli.config.is_some() {
        return Err(Error::Config("sample takes its configuration from the checkpoint; drop --config".into()));
    }
    let out = cli
        .out
        .clone()
        .ok_or_else(|| Error::Config("sample needs --out".into()))?;
    let (base, model) = load_model(ckpt)?;
    let mut overrides: Vec<(&str, toml::Value)> = Vec::new();
    if let Some(seed) = cli.seed {
        overrides.push(("sample.seed", seed_value(seed)?));
    }
    if let Some(s) = cfg_scale {
        overrides.push(("sample.cfg_scale", toml::Value::Float(s)));
    }
    if let Some(n) = steps {
        overrides.push(("sample.num_inference_steps", toml::Value::Integer(n as i64)));
    }
    if let Some(e) = eta {
        overrides.push(("sample.eta", toml::Value::Float(e)));
    }
    let cfg = RunConfig::from_sources(Some(&base.to_toml()), std::env::vars(), &overrides)?;
    let text = read_text(prompts_path)?;
    fresh_dir(&out, cli.force)?;

    let max_len = cfg.language.max_len;
    let mut kept: Vec<(usize, String)> = Vec::new();
    let mut skipped = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let prompt = line.trim().to_string();
        let tokens = token_count(&prompt);
        if tokens > max_len {
            eprintln!("warning: skipping line {}: {tokens} tokens exceed max_len {max_len}", i + 1);
            skipped.push(json!({ "index": i, "prompt": prompt, "tokens": tokens }));
        } else {
            kept.push((i, prompt));
        }
    }
    let prompts: Vec<&str> = kept.iter().map(|(_, p)| p.as_str()).collect();
    let images = sample_prompts(&model, &schedule(&cfg)?, &prompts, &cfg.sample, SAMPLE_CHUNK)?;
    let res = cfg.sample.resolution;
    let mut samples = Vec::with_capacity(kept.len());
    for ((i, prompt), img) in kept.iter().zip(&images) {
        let file = image_name(*i);
        png::write(&out.join(&file), img, res)?;
        samples.push(json!({ "index": i, "file": file, "prompt": prompt }));
    }
    let s = &cfg.sample;
    write_json(
        &out.join("manifest.json"),
        &json!({
            "kind": "samples",
            "checkpoint": ckpt.file_name().map(|f| f.to_string_lossy().into_owned()),
            "resolution": res,
            "seed": s.seed,
            "cfg_scale": s.cfg_scale,
            "num_inference_steps": s.num_inference_steps,
            "eta": s.eta,
            "samples": samples,
            "skipped": skipped,
        }),
    )?;
    eprintln!("wrote {} images to {}", images.len(), out.display());
    Ok(())
}

fn manifest_error(path: &Path, what: &str) -> Error {
    Error::Config(format!("{}: {what}", path.display()))
}

fn eval(cli: &Cli, dir: &Path, report: Option<&Path>) -> Result<()> {
    let cfg = load_config(cli, Some("eval.seed"))?;
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.is_file() {
        return Err(Error::Config(format!("{} not found", manifest_path.display())));
    }
    let manifest: Value = serde_json::from_str(&read_text(&manifest_path)?)
        .map_err(|e| manifest_error(&manifest_path, &e.to_string()))?;
    let res = manifest["resolution"]
        .as_u64()
        .ok_or_else(|| manifest_error(&manifest_path, "missing integer `resolution`"))? as usize;
    let entries = manifest["samples"]
        .as_array()
        .ok_or_else(|| manifest_error(&manifest_path, "missing array `samples`"))?;
    let mut samples = Vec::with_capacity(entries.len());
    for e in entries {
        let (Some(file), Some(prompt)) = (e["file"].as_str(), e["prompt"].as_str()) else {
            return Err(manifest_error(&manifest_path, "sample entries need `file` and `prompt`"));
        };
        let path = dir.join(file);
        let (pixels, r) = png::read(&path)?;
        if r != res {
            return Err(manifest_error(&path, &format!("is {r}px, manifest says {res}px")));
        }
        samples.push((prompt.to_string(), pixels));
    }
    let reference: Vec<Vec<f32>> = eval_scenes(&cfg).iter().map(|s| render(s, res)).collect();
    let (alignment, frechet) = evaluate(&samples, &reference, res, cfg.eval.frechet_eps)?;
    let path = report.map_or_else(|| dir.join("report.txt"), Path::to_path_buf);
    write_text(&path, &alignment.to_kv(frechet))?;
    eprintln!(
        "evaluated {} samples, {} rejected; report at {}",
        samples.len(),
        alignment.rejected(),
        path.display()
    );
    Ok(())
}

fn params(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli, None)?;
    print!("{}", params_report(&build_model(&cfg)?));
    Ok(())
}
