use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use splatstream::config::Config;
use splatstream::dataset::{write_rgb_png, Dataset, PosesFile};
use splatstream::eval::run_protocol;
use splatstream::pipeline::{bench, Pipeline, PipelineState};
use splatstream::ply::{export_field, import_field};
use splatstream::raster::render;
use splatstream::synth::{synthesize, ObjectKind};
use splatstream::types::{normalize_pose_sequence, CameraPose};
use splatstream::{Error, Result};

/// Streaming object reconstruction into a canonical Gaussian field.
#[derive(Parser)]
#[command(name = "splatstream", version)]
struct Cli {
    /// TOML or JSON configuration file.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic object along a random trajectory into a dataset folder.
    Generate(GenerateArgs),
    /// Stream a dataset through the pipeline, writing one PLY per step.
    Run {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the evaluation protocol and print the stage table.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
        /// CSV of `t,view,lpips` rows computed externally.
        #[arg(long)]
        lpips: Option<PathBuf>,
        #[arg(long)]
        split_seed: Option<u64>,
    },
    /// Time every step of a long stream and report the late/early ratio.
    Bench {
        /// Dataset to stream; a synthetic one is generated when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        repetitions: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a PLY field from one pose of a poses.json file.
    Render {
        #[arg(long)]
        ply: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        /// Express the pose relative to frame 0, matching fields written by `run`.
        #[arg(long)]
        canonical: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    object: Option<ObjectKind>,
    #[arg(long)]
    primitives: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k1_elevations: Option<usize>,
    #[arg(long)]
    k2_radii: Option<usize>,
    #[arg(long)]
    waypoints: Option<usize>,
    #[arg(long)]
    elevation_limit_deg: Option<f64>,
    #[arg(long)]
    jitter: Option<f64>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::Path { path: parent.into(), source: e })?;
    }
    let f = File::create(path).map_err(|e| Error::Path { path: path.into(), source: e })?;
    Ok(BufWriter::new(f))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn generate(mut cfg: Config, a: GenerateArgs) -> Result<()> {
    let g = &mut cfg.generate;
    g.object = a.object.unwrap_or(g.object);
    g.primitives = a.primitives.unwrap_or(g.primitives);
    g.width = a.width.unwrap_or(g.width);
    g.height = a.height.unwrap_or(g.height);
    let t = &mut cfg.trajectory;
    t.frames = a.frames.unwrap_or(t.frames);
    t.seed = a.seed.unwrap_or(t.seed);
    t.k1_elevations = a.k1_elevations.unwrap_or(t.k1_elevations);
    t.k2_radii = a.k2_radii.unwrap_or(t.k2_radii);
    t.waypoints = a.waypoints.unwrap_or(t.waypoints);
    t.elevation_limit_deg = a.elevation_limit_deg.unwrap_or(t.elevation_limit_deg);
    t.jitter = a.jitter.unwrap_or(t.jitter);
    cfg.validate()?;
    let g = &cfg.generate;
    let scene = synthesize(g.object, g.primitives, &cfg.trajectory, g.width, g.height, &cfg.render)?;
    scene.dataset.save(&a.out)?;
    export_field(&scene.object, a.out.join("object.ply"))?;
    info!("wrote {} frames to {}", scene.dataset.len(), a.out.display());
    Ok(())
}

fn run(cfg: &Config, data: &Path, out: &Path) -> Result<()> {
    let ds = Dataset::load(data)?;
    if ds.len() < 2 {
        return Err(Error::InvalidArgument("dataset needs at least two frames".into()));
    }
    let poses = normalize_pose_sequence(&ds.poses)?;
    std::fs::create_dir_all(out).map_err(|e| Error::Path { path: out.into(), source: e })?;
    let mut state = PipelineState::init(&ds.frames[0], &poses[0], &ds.intrinsics, cfg.pipeline)?;
    let mut diag_out = create(&out.join("diagnostics.jsonl"))?;
    for (frame, pose) in ds.frames.iter().zip(&poses).skip(1) {
        let (field, diag) = state.step(frame, pose)?;
        export_field(&field, out.join(format!("step_{:05}.ply", diag.t)))?;
        serde_json::to_writer(&mut diag_out, &diag)?;
        writeln!(diag_out)?;
        info!("t={} bank={} removed={} {:.2} ms", diag.t, diag.bank_size, diag.removed, diag.step_ms);
    }
    diag_out.flush()?;
    Ok(())
}

fn read_lpips(path: &Path) -> Result<HashMap<(usize, usize), f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Path { path: path.into(), source: e })?;
    let mut table = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('t') {
            continue;
        }
        let bad = || Error::InvalidArgument(format!("{}:{}: expected t,view,lpips", path.display(), n + 1));
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 3 {
            return Err(bad());
        }
        let t = cols[0].parse().map_err(|_| bad())?;
        let view = cols[1].parse().map_err(|_| bad())?;
        let v = cols[2].parse().map_err(|_| bad())?;
        table.insert((t, view), v);
    }
    Ok(table)
}

fn eval(cfg: &Config, data: &Path, json: Option<&Path>, csv: Option<&Path>, lpips: Option<&Path>, split_seed: Option<u64>) -> Result<bool> {
    let ds = Dataset::load(data)?;
    let mut model = Pipeline::new(cfg.pipeline)?;
    let seed = split_seed.unwrap_or(cfg.eval.split_seed);
    let mut report = run_protocol(&mut model, &ds.frames, &ds.poses, &ds.intrinsics, seed, &cfg.render)?;
    if let Some(p) = lpips {
        report.attach_lpips(&read_lpips(p)?)?;
    }
    if let Some(p) = json {
        write_text(p, &report.to_json()?)?;
    }
    if let Some(p) = csv {
        write_text(p, &report.to_csv())?;
    }
    print!("{}", report.table());
    if let Some(e) = &report.error {
        eprintln!("protocol stopped at t={}: {}", e.t, e.message);
        return Ok(false);
    }
    Ok(true)
}

fn bench_cmd(cfg: &Config, data: Option<&Path>, frames: Option<usize>, reps: Option<usize>, out: Option<&Path>) -> Result<()> {
    let ds = match data {
        Some(d) => Dataset::load(d)?,
        None => {
            let mut params = cfg.trajectory.clone();
            params.frames = frames.unwrap_or(cfg.bench.frames);
            let g = &cfg.generate;
            synthesize(g.object, g.primitives, &params, g.width, g.height, &cfg.render)?.dataset
        }
    };
    let n = frames.unwrap_or(ds.len()).min(ds.len());
    let report = bench(
        &cfg.pipeline,
        &ds.frames[..n],
        &ds.poses[..n],
        &ds.intrinsics,
        reps.unwrap_or(cfg.bench.repetitions),
    )?;
    info!("late/early median step time: {:.3}", report.late_over_early);
    let text = serde_json::to_string_pretty(&report)?;
    match out {
        Some(p) => write_text(p, &text),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn render_cmd(cfg: &Config, ply: &Path, poses: &Path, frame: usize, canonical: bool, out: &Path) -> Result<()> {
    let field = import_field(ply)?;
    let f = File::open(poses).map_err(|e| Error::Path { path: poses.into(), source: e })?;
    let pf: PosesFile = serde_json::from_reader(std::io::BufReader::new(f))?;
    let all = pf.world_to_camera.iter().map(CameraPose::from_row_major).collect::<Result<Vec<_>>>()?;
    if frame >= all.len() {
        return Err(Error::InvalidArgument(format!("frame {frame} out of range ({} poses)", all.len())));
    }
    let pose = if canonical { all[frame].compose(&all[0].inverse()) } else { all[frame] };
    let img = render(&field, &pose, &pf.intrinsics, &cfg.render)?;
    write_rgb_png(&img.color, out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = match cli.config.as_deref().map(Config::load).transpose() {
        Ok(c) => c.unwrap_or_default(),
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Generate(a) => generate(cfg, a).map(|_| true),
        Command::Run { data, out } => run(&cfg, &data, &out).map(|_| true),
        Command::Eval {
            data,
            json,
            csv,
            lpips,
            split_seed,
        } => eval(&cfg, &data, json.as_deref(), csv.as_deref(), lpips.as_deref(), split_seed),
        Command::Bench {
            data,
            frames,
            repetitions,
            out,
        } => bench_cmd(&cfg, data.as_deref(), frames, repetitions, out.as_deref()).map(|_| true),
        Command::Render {
            ply,
            poses,
            frame,
            canonical,
            out,
        } => render_cmd(&cfg, &ply, &poses, frame, canonical, &out).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
