//! `ptrack` command-line front end.
//!
//! Exit status: 0 on success, 1 when a flag or config key is invalid, 2 when
//! a run fails (I/O, corrupt checkpoint, divergence, hash mismatch).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use ptrack::autodiff::ParamStore;
use ptrack::data::{generate_dataset, load_dataset, save_dataset, write_pgm, Clip};
use ptrack::harness::checkpoint::Checkpoint;
use ptrack::harness::eval::track;
use ptrack::harness::train::check_task_payload;
use ptrack::harness::{
    delta_checkpoint, evaluate, finetune, load_foundation, load_prompt, pretrain, save_foundation, DType, TrackerConfig,
};
use ptrack::model::{PromptTracker, Tracker};
use ptrack::{Error, Task};

#[derive(Parser, Debug)]
#[command(name = "ptrack", version, about = "Foundation and prompt tracking on synthetic clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(Common),
    /// Train the foundation tracker on RGB clips.
    Pretrain(Common),
    /// Train prompt parameters on an RGB+X task against a frozen foundation.
    Finetune(Common),
    /// Track a dataset and report metrics.
    Eval(Common),
    /// Track a dataset and write per-clip predictions.
    Track(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// key=value configuration file (# starts a comment).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// rgb, rgb_n, rgb_m, rgb_d, rgb_t or rgb_e.
    #[arg(long)]
    task: Option<String>,
    /// Model checkpoint to read (the foundation for finetune).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Foundation checkpoint a delta checkpoint was trained against.
    #[arg(long)]
    foundation: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training steps for this stage.
    #[arg(long)]
    steps: Option<usize>,
    /// Place a prompter before every k-th encoder layer.
    #[arg(long = "every-k")]
    every_k: Option<usize>,
}

/// Failure classified by exit status.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn required<'a, T>(value: &'a Option<T>, flag: &str) -> std::result::Result<&'a T, Failure> {
    value.as_ref().ok_or_else(|| Failure::Usage(format!("{flag} is required")))
}

fn flag_error(flag: &str) -> impl Fn(Error) -> Failure + '_ {
    move |e| Failure::Usage(format!("{flag}: {e}"))
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

impl Common {
    /// Config file, then flags, validated and echoed to the log.
    fn config(&self, steps_key: &str) -> std::result::Result<TrackerConfig, Failure> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text =
                    fs::read_to_string(p).map_err(|e| Failure::Usage(format!("--config {}: {e}", p.display())))?;
                TrackerConfig::parse(&text, &p.display().to_string())?
            }
            None => TrackerConfig::toy(),
        };
        if let Some(s) = self.seed {
            cfg.set("seed", &s.to_string()).map_err(flag_error("--seed"))?;
        }
        if let Some(t) = &self.task {
            cfg.set("task", t).map_err(flag_error("--task"))?;
        }
        if let Some(n) = self.steps {
            cfg.set(steps_key, &n.to_string()).map_err(flag_error("--steps"))?;
        }
        if let Some(k) = self.every_k {
            cfg.set("every_k", &k.to_string()).map_err(flag_error("--every-k"))?;
        }
        let cfg = cfg.finish()?;
        for (k, v) in cfg.pairs() {
            info!("config {k}={v}");
        }
        Ok(cfg)
    }

    fn dataset(&self, task: Task) -> std::result::Result<Vec<Clip>, Failure> {
        let dir = required(&self.data, "--data")?;
        let task = task.modality().map(|_| task);
        let clips = load_dataset(dir, task)?;
        info!("loaded {} clips from {}", clips.len(), dir.display());
        Ok(clips)
    }
}

fn gen_data(a: &Common) -> Outcome {
    let out = required(&a.out, "--out")?;
    let cfg = a.config("steps")?;
    let clips = generate_dataset(cfg.seed, cfg.clips, &cfg.gen)?;
    save_dataset(out, &clips)?;
    info!("wrote {} clips to {}", clips.len(), out.display());
    Ok(())
}

fn run_pretrain(a: &Common) -> Outcome {
    let out = required(&a.out, "--out")?;
    let cfg = a.config("steps")?;
    if cfg.task != Task::Rgb {
        return Err(Failure::Usage(format!("--task: pretraining uses rgb clips, got {}", cfg.task)));
    }
    let clips = a.dataset(cfg.task)?;
    let (model, store, log) = pretrain(&cfg, &clips)?;
    info!("parameters: {}", model.census().total());
    info!("loss: first {:.6} last {:.6}", log.head_loss(10), log.tail_loss(10));
    let digest = save_foundation(&store, out, DType::F64)?;
    info!("wrote {} (sha256 {})", out.display(), hex::encode(digest));
    Ok(())
}

fn run_finetune(a: &Common) -> Outcome {
    let cfg = a.config("finetune_steps")?;
    let modality = cfg
        .task
        .modality()
        .ok_or_else(|| Failure::Usage(format!("--task: finetuning needs an RGB+X task, got {}", cfg.task)))?;
    let foundation = required(&a.checkpoint, "--checkpoint")?;
    let out = required(&a.out, "--out")?;
    let clips = a.dataset(cfg.task)?;
    check_task_payload(&clips, cfg.task)?;
    let (_, fstore, digest) = load_foundation(&cfg, foundation)?;
    let (model, store, log, audit) = finetune(&cfg, &fstore, &clips)?;
    let census = model.census();
    let formula = PromptTracker::closed_form_census(&cfg.foundation, &cfg.prompt, modality);
    info!("trainable parameters: {} (closed form {})", census.trainable(), formula.trainable());
    for line in census.to_string().lines() {
        info!("census {line}");
    }
    info!("loss: first {:.6} last {:.6}", log.head_loss(10), log.tail_loss(10));
    info!("freeze audit: {} frozen parameters checked, {} changed", audit.checked, audit.changed);
    let delta = delta_checkpoint(&store, &digest, DType::F64);
    delta.save(out)?;
    info!("wrote {} bound to foundation {}", out.display(), hex::encode(digest));
    Ok(())
}

/// Loads a foundation or delta checkpoint as a tracker for `cfg.task`.
fn load_model(a: &Common, cfg: &TrackerConfig) -> std::result::Result<(Box<dyn Tracker>, ParamStore), Failure> {
    let path = required(&a.checkpoint, "--checkpoint")?;
    let ckpt = Checkpoint::load(path)?;
    if ckpt.foundation_hash().is_some() {
        let foundation = a.foundation.as_ref().ok_or_else(|| {
            Failure::Usage(format!("--foundation is required: {} is a delta checkpoint", path.display()))
        })?;
        let (model, store) = load_prompt(cfg, path, foundation)?;
        return Ok((Box::new(model), store));
    }
    if cfg.task.is_mask() {
        return Err(Failure::Usage("--task: rgb_m needs a delta checkpoint trained on masks".into()));
    }
    if cfg.task != Task::Rgb {
        info!("{} is a foundation checkpoint; tracking with RGB only", path.display());
    }
    let (model, store, _) = load_foundation(cfg, path)?;
    Ok((Box::new(model), store))
}

fn run_eval(a: &Common) -> Outcome {
    let cfg = a.config("steps")?;
    let (model, store) = load_model(a, &cfg)?;
    let clips = a.dataset(cfg.task)?;
    let (report, per_clip) = evaluate(model.as_ref(), &store, &clips, &cfg.track)?;
    for c in &per_clip {
        let r = c.tally.report();
        info!("{}: auc {:.6} mean_iou {:.6}", c.id, r.auc, r.mean_iou);
    }
    print!("{}", report.to_table());
    if let Some(out) = &a.out {
        write_file(out, report.to_key_values().as_bytes())?;
        info!("wrote {}", out.display());
    }
    Ok(())
}

fn run_track(a: &Common) -> Outcome {
    let out = required(&a.out, "--out")?;
    let cfg = a.config("steps")?;
    let (model, store) = load_model(a, &cfg)?;
    let clips = a.dataset(cfg.task)?;
    for clip in &clips {
        let result = track(model.as_ref(), &store, clip, &cfg.track)?;
        let dir = out.join(&clip.id);
        let mut boxes = String::new();
        for (i, (b, s)) in result.boxes.iter().zip(&result.scores).enumerate() {
            let [x, y, w, h] = b.to_xywh();
            let _ = writeln!(boxes, "{i} {x} {y} {w} {h} {s}");
        }
        write_file(&dir.join("boxes.txt"), boxes.as_bytes())?;
        if let Some(masks) = &result.masks {
            for (i, m) in masks.iter().enumerate() {
                write_pgm(&dir.join("masks").join(format!("{i:04}.pgm")), m)?;
            }
        }
        info!("{}: {} frames in {:.3}s", clip.id, result.len(), result.elapsed.as_secs_f64());
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => run_pretrain(a),
        Command::Finetune(a) => run_finetune(a),
        Command::Eval(a) => run_eval(a),
        Command::Track(a) => run_track(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
