//! `polarbev` command-line tool.
//!
//! Exit codes: 0 success, 1 gradient check failed, 2 I/O error,
//! 3 invalid config, checkpoint or input file, 4 non-finite loss or value.

mod data;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use polarbev::metrics::EvalSetting;
use polarbev::pipeline::{
    bench_forward, evaluate_model, mini_grad_check, remap_table, train_toy, Model, ParamStore, PipelineConfig, RemapMode,
    TrainConfig, ViewGeometry,
};
use polarbev::synth::{gen_scene_set, toy_plan, SceneKnobs};
use polarbev::tensor::io::write_tensor;
use polarbev::{Error, Result};
use serde::Serialize;

use data::{parse_rig, read_dataset, write_dataset, Dataset};
use manifest::{hash_inputs, write_json, RunManifest, SCHEMA_VERSION};

#[derive(Parser)]
#[command(name = "polarbev", version, about = "Polar bird's-eye-view perception toolkit")]
struct Cli {
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true, env = "POLARBEV_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scenes, render every view and rasterize ground truth.
    Gen {
        #[arg(long, default_value_t = 8)]
        scenes: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// ring6, ring1, ringK or file:PATH.
        #[arg(long, default_value = "ring6")]
        rig: String,
        /// 0 places one fixed box; d ≥ 1 draws up to d random boxes.
        #[arg(long, default_value_t = 8)]
        difficulty: u32,
        /// Largest box-centre range in metres.
        #[arg(long, default_value_t = 15.0)]
        max_range: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a generated dataset.
    Train {
        /// JSON training config; missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        setting: u32,
    },
    /// Run a checkpoint on every scene and write the polar outputs.
    Forward {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the height of every iteration.
        #[arg(long)]
        dump_heights: bool,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 2)]
        setting: u32,
        /// Report path; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time the forward stages in single precision without a tape.
    Bench {
        /// `default` or a pipeline config JSON.
        #[arg(long, default_value = "default")]
        config: String,
        #[arg(long, default_value_t = 3)]
        repeat: usize,
        #[arg(long, default_value = "ring6")]
        rig: String,
        /// Also time the transform at these angular resolutions.
        #[arg(long, value_delimiter = ',')]
        d_ang: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the miniature model.
    Gradcheck {
        #[arg(long, default_value_t = 21)]
        seed: u64,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 2,
        Error::Diverged { .. } | Error::Numerical(_) => 4,
        _ => 3,
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn load_train_config(path: Option<&Path>) -> Result<TrainConfig> {
    let Some(p) = path else { return Ok(TrainConfig::default()) };
    let bytes = std::fs::read(p).map_err(|e| Error::Io { path: p.into(), source: e })?;
    let cfg: TrainConfig = serde_json::from_slice(&bytes)?;
    cfg.pipeline.validate()?;
    Ok(cfg)
}

/// Fails unless the dataset images carry the channels the encoder expects.
fn check_channels(ds: &Dataset, cfg: &PipelineConfig) -> Result<()> {
    if ds.plan.roles.len() != cfg.encoder.in_channels {
        return Err(Error::Validation {
            path: "encoder.in_channels".into(),
            msg: format!("dataset images have {} channels, the encoder expects {}", ds.plan.roles.len(), cfg.encoder.in_channels),
        });
    }
    Ok(())
}

fn load_model(ckpt: &Path) -> Result<Model> {
    let (cfg, params) = ParamStore::load_checkpoint(ckpt, None)?;
    Model::new(cfg, params)
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Gen { scenes, seed, rig, difficulty, max_range, out } => {
            let t0 = Instant::now();
            let rig = parse_rig(&rig)?;
            let knobs = SceneKnobs { difficulty, max_range, ..SceneKnobs::toy() };
            let specs = gen_scene_set(scenes, seed, knobs)?;
            write_dataset(&out, &rig, &toy_plan(), &specs)?;
            let mut m = RunManifest::new("gen", &out);
            m.seed = Some(seed);
            m.timings.insert("gen".into(), t0.elapsed().as_secs_f64());
            m.write()?;
        }
        Command::Train { config, data, out, setting } => {
            let t0 = Instant::now();
            let cfg = load_train_config(config.as_deref())?;
            let setting = EvalSetting::numbered(setting)?;
            let ds = read_dataset(&data)?;
            check_channels(&ds, &cfg.pipeline)?;
            let scenes = ds.scene_data(&setting, &cfg.pipeline.grid()?);
            let load_s = t0.elapsed().as_secs_f64();
            let outcome = train_toy(&scenes, &ds.rig, &cfg, &setting, |e| {
                eprintln!("step {:>5}  loss {:.4}  iou {:.3}  pq {:.3}", e.step, e.loss, e.iou, e.pq)
            })?;
            outcome.model.params.save_checkpoint(&outcome.model.cfg, &out.join("ckpt"))?;
            write_json(&out.join("config.json"), &cfg)?;
            write_json(&out.join("trace.json"), &serde_json::json!({ "schema_version": SCHEMA_VERSION, "trace": outcome.trace }))?;
            write_json(&out.join("report.json"), &outcome.report)?;
            let mut m = RunManifest::new("train", &out);
            m.config_path = config.clone();
            m.seed = Some(cfg.optimizer.seed);
            let mut inputs: Vec<&Path> = vec![&data];
            if let Some(c) = config.as_deref() {
                inputs.push(c);
            }
            m.input_hash = hash_inputs(&inputs)?;
            m.timings.insert("load".into(), load_s);
            m.timings.insert("train".into(), t0.elapsed().as_secs_f64() - load_s);
            m.write()?;
        }
        Command::Forward { ckpt, data, out, dump_heights } => {
            let t0 = Instant::now();
            let model = load_model(&ckpt)?;
            let ds = read_dataset(&data)?;
            check_channels(&ds, &model.cfg)?;
            let geom = ViewGeometry::new(&model.cfg.grid()?, &ds.rig);
            for (name, _, images) in &ds.scenes {
                let o = model.run::<f64>(&geom, images, None)?;
                let dir = out.join(name);
                write_tensor(&dir.join("seg_logits.bin"), "seg_logits", &o.seg_logits)?;
                write_tensor(&dir.join("centerness.bin"), "centerness", &o.centerness)?;
                write_tensor(&dir.join("offset.bin"), "offset", &o.offset)?;
                if dump_heights {
                    for (t, z) in o.heights.iter().enumerate() {
                        write_tensor(&dir.join(format!("height_{t}.bin")), &format!("height_{t}"), z)?;
                    }
                }
            }
            let mut m = RunManifest::new("forward", &out);
            m.input_hash = hash_inputs(&[&ckpt, &data])?;
            m.timings.insert("forward".into(), t0.elapsed().as_secs_f64());
            m.write()?;
        }
        Command::Eval { ckpt, data, setting, out } => {
            let model = load_model(&ckpt)?;
            let setting = EvalSetting::numbered(setting)?;
            let ds = read_dataset(&data)?;
            check_channels(&ds, &model.cfg)?;
            let grid = model.cfg.grid()?;
            let scenes = ds.scene_data(&setting, &grid);
            let geom = ViewGeometry::new(&grid, &ds.rig);
            let table = remap_table(&grid, &setting, RemapMode::Bilinear, 0.0)?;
            let decode = Default::default();
            let (report, _) = evaluate_model(&model, &geom, &scenes, &table, &setting, &decode, false)?;
            match out {
                Some(p) => write_json(&p, &report)?,
                None => print_json(&report)?,
            }
        }
        Command::Bench { config, repeat, rig, d_ang, seed, out } => {
            let cfg = if config == "default" { PipelineConfig::default() } else { PipelineConfig::load(Path::new(&config))? };
            let rig = parse_rig(&rig)?;
            let main = bench_forward(&cfg, &rig, repeat, seed)?;
            let mut scaling = Vec::new();
            for &a in &d_ang {
                let c = PipelineConfig { d_ang: a, ..cfg.clone() };
                let r = bench_forward(&c, &rig, repeat, seed)?;
                scaling.push(serde_json::json!({ "d_ang": a, "transform_s": r.transform_s, "total_s": r.total_s }));
            }
            let report = serde_json::json!({ "schema_version": SCHEMA_VERSION, "bench": main, "d_ang_scaling": scaling });
            match out {
                Some(p) => write_json(&p, &report)?,
                None => print_json(&report)?,
            }
        }
        Command::Gradcheck { seed } => {
            let t0 = Instant::now();
            let check = mini_grad_check(seed)?;
            print_json(&serde_json::json!({
                "schema_version": SCHEMA_VERSION,
                "check": check,
                "elapsed_s": t0.elapsed().as_secs_f64(),
            }))?;
            if !check.report.passed {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: could not size the thread pool: {e}");
            return ExitCode::from(3);
        }
    }
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
