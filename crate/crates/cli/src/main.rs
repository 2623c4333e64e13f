use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use perfcap_core::gradcheck::run_gradcheck;
use perfcap_core::humanoid::{default_camera, humanoid, HumanoidOptions};
use perfcap_core::pipeline::{
    frame_file, generate_synthetic_sequence, metric_vertex_error, run_sequence, write_synthetic_sequence,
    MotionScript, SequenceConfig,
};
use perfcap_core::template::parse_obj;

#[derive(Parser)]
#[command(name = "perfcap", version, about = "Monocular template-based performance capture")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Track a sequence and write poses, meshes, logs and a report.
    Track(Box<TrackArgs>),
    /// Render a synthetic sequence with ground truth.
    Synth(SynthArgs),
    /// Mean vertex error between two directories of NNNNN.obj meshes.
    Eval(EvalArgs),
    /// Finite-difference checks of every residual block.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct TrackArgs {
    /// TOML config providing defaults; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    template: Option<PathBuf>,
    #[arg(long)]
    skeleton: Option<PathBuf>,
    #[arg(long)]
    skinning: Option<PathBuf>,
    #[arg(long)]
    calibration: Option<PathBuf>,
    #[arg(long)]
    frames: Option<PathBuf>,
    #[arg(long)]
    masks: Option<PathBuf>,
    #[arg(long)]
    detections: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,

    #[arg(long)]
    reproducible: Option<bool>,
    #[arg(long)]
    pipelined: Option<bool>,
    #[arg(long)]
    nonrigid: Option<bool>,
    #[arg(long)]
    snapping: Option<bool>,
    #[arg(long)]
    displacement_warping: Option<bool>,
    #[arg(long)]
    body_part_mask: Option<bool>,
    #[arg(long)]
    smoothing: Option<bool>,

    #[arg(long)]
    lambda_2d: Option<f64>,
    #[arg(long)]
    lambda_3d: Option<f64>,
    #[arg(long)]
    lambda_silhouette: Option<f64>,
    #[arg(long)]
    lambda_temporal: Option<f64>,
    #[arg(long)]
    lambda_anatomic: Option<f64>,
    #[arg(long)]
    pose_iterations: Option<usize>,
    #[arg(long)]
    first_frame_rounds: Option<usize>,

    #[arg(long)]
    w_photo: Option<f64>,
    #[arg(long)]
    w_silhouette: Option<f64>,
    #[arg(long)]
    w_smooth: Option<f64>,
    #[arg(long)]
    w_edge: Option<f64>,
    #[arg(long)]
    w_velocity: Option<f64>,
    #[arg(long)]
    w_acceleration: Option<f64>,
    #[arg(long)]
    gn_steps: Option<usize>,
    #[arg(long)]
    pcg_iterations: Option<usize>,

    /// Seven comma-separated non-rigidity weights, material classes 1 to 7.
    #[arg(long, value_delimiter = ',')]
    material_weights: Option<Vec<f64>>,
    /// Three comma-separated odd blur kernels, coarse to fine.
    #[arg(long, value_delimiter = ',')]
    pyramid_kernels: Option<Vec<usize>>,

    /// Print the effective config as TOML and exit.
    #[arg(long)]
    print_config: bool,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl TrackArgs {
    fn config(self) -> Result<SequenceConfig> {
        let mut c = match &self.config {
            Some(p) => SequenceConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => SequenceConfig::default(),
        };
        let p = &mut c.paths;
        set(&mut p.template, self.template);
        set(&mut p.skeleton, self.skeleton);
        set(&mut p.skinning, self.skinning);
        set(&mut p.calibration, self.calibration);
        set(&mut p.frames, self.frames);
        set(&mut p.masks, self.masks);
        set(&mut p.detections, self.detections);
        set(&mut p.output, self.output);

        let f = &mut c.flags;
        set(&mut f.reproducible, self.reproducible);
        set(&mut f.pipelined, self.pipelined);
        set(&mut f.nonrigid, self.nonrigid);
        set(&mut f.snapping, self.snapping);
        set(&mut f.displacement_warping, self.displacement_warping);
        set(&mut f.body_part_mask, self.body_part_mask);
        set(&mut f.smoothing, self.smoothing);

        let h = &mut c.pose;
        set(&mut h.lambda_2d, self.lambda_2d);
        set(&mut h.lambda_3d, self.lambda_3d);
        set(&mut h.lambda_silhouette, self.lambda_silhouette);
        set(&mut h.lambda_temporal, self.lambda_temporal);
        set(&mut h.lambda_anatomic, self.lambda_anatomic);
        set(&mut h.iterations, self.pose_iterations);
        set(&mut c.first_frame_rounds, self.first_frame_rounds);

        let h = &mut c.nonrigid;
        set(&mut h.w_photo, self.w_photo);
        set(&mut h.w_silhouette, self.w_silhouette);
        set(&mut h.w_smooth, self.w_smooth);
        set(&mut h.w_edge, self.w_edge);
        set(&mut h.w_velocity, self.w_velocity);
        set(&mut h.w_acceleration, self.w_acceleration);
        set(&mut h.gn_steps, self.gn_steps);
        set(&mut h.pcg_iterations, self.pcg_iterations);

        if let Some(w) = self.material_weights {
            c.material_weights = w
                .try_into()
                .map_err(|w: Vec<f64>| anyhow::anyhow!("--material-weights takes 7 values, got {}", w.len()))?;
        }
        if let Some(k) = self.pyramid_kernels {
            c.pyramid_kernels = k
                .try_into()
                .map_err(|k: Vec<usize>| anyhow::anyhow!("--pyramid-kernels takes 3 values, got {}", k.len()))?;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Script {
    Still,
    Skirt,
    Arms,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory; receives config.toml next to the data.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Script::Skirt)]
    script: Script,
    #[arg(long, default_value_t = 100)]
    frames: usize,
    #[arg(long, default_value_t = 320)]
    width: usize,
    #[arg(long, default_value_t = 240)]
    height: usize,
    /// Low-resolution template for quick runs.
    #[arg(long)]
    coarse: bool,
    /// Detection noise seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of tracked NNNNN.obj meshes.
    result: PathBuf,
    /// Directory of reference NNNNN.obj meshes.
    reference: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 25)]
    configs: usize,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    step: f64,
    /// Largest relative Jacobian error accepted.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn track(args: TrackArgs) -> Result<()> {
    let print = args.print_config;
    let config = args.config()?;
    if print {
        print!("{}", config.to_toml());
        return Ok(());
    }
    if config.paths.output.as_os_str().is_empty() {
        bail!("no output directory given (--output or paths.output)");
    }
    let result = run_sequence(&config)?;
    let r = &result.report;
    println!(
        "{} frames, mean IoU {:.4}, {:.1} frames/s; outputs in {}",
        r.frames.len(),
        r.mean_iou,
        r.frames_per_second,
        config.paths.output.display()
    );
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let opts = if args.coarse { HumanoidOptions::coarse() } else { HumanoidOptions::default() };
    let actor = humanoid(&opts)?;
    let camera = default_camera(args.width, args.height);
    let mut script = match args.script {
        Script::Still => MotionScript::still(args.frames),
        Script::Skirt => MotionScript::skirt(args.frames),
        Script::Arms => MotionScript::arms_near_torso(args.frames),
    };
    set(&mut script.seed, args.seed);
    info!("rendering {} frames of {} vertices", args.frames, actor.mesh.vertex_count());
    let seq = generate_synthetic_sequence(&actor, &camera, &script)?;
    write_synthetic_sequence(&seq, &actor, &args.out)?;
    println!(
        "wrote {} frames to {}; track with: perfcap track --config {}",
        args.frames,
        args.out.display(),
        args.out.join("config.toml").display()
    );
    Ok(())
}

fn read_mesh(path: &Path) -> Result<Vec<perfcap_core::Vec3>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(parse_obj(&text, path)?.0)
}

fn eval(args: EvalArgs) -> Result<()> {
    let mut errors = Vec::new();
    loop {
        let t = errors.len();
        let a = frame_file(&args.result, t).with_extension("obj");
        let b = frame_file(&args.reference, t).with_extension("obj");
        match (a.exists(), b.exists()) {
            (true, true) => {}
            (false, false) => break,
            (true, false) => bail!("frame {t}: {} has no reference mesh", a.display()),
            (false, true) => bail!("frame {t}: {} is missing", a.display()),
        }
        let e = metric_vertex_error(&read_mesh(&a)?, &read_mesh(&b)?).with_context(|| format!("frame {t}"))?;
        println!("{t:05} {e:.3}");
        errors.push(e);
    }
    if errors.is_empty() {
        bail!("no NNNNN.obj meshes found in {}", args.result.display());
    }
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    println!("mean vertex error {mean:.3} mm over {} frames", errors.len());
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> Result<()> {
    let checks = run_gradcheck(args.configs, args.seed, args.step)?;
    let mut failed = 0;
    for c in &checks {
        let ok = c.worst <= args.tolerance;
        failed += usize::from(!ok);
        println!(
            "{:<8} {:<14} worst {:.2e} over {} checks {}",
            c.stage,
            c.term,
            c.worst,
            c.checks,
            if ok { "ok" } else { "FAIL" }
        );
    }
    if failed > 0 {
        bail!("{failed} residual blocks exceed {:e}", args.tolerance);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let r = match cli.command {
        Command::Track(a) => track(*a),
        Command::Synth(a) => synth(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
