use clap::{Args, Parser, Subcommand};
use pseudoflow::harness::{
    ablation_suite, generate_scene_at, generate_scenes, load_config, reevaluate, run_experiment,
    summarize_stored, write_render_debug, write_scene, write_stored_evaluations, ExperimentConfig,
    HarnessError, Phase,
};
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Self-supervised pose refinement on synthetic scenes.
#[derive(Debug, Parser)]
#[command(name = "pseudoflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the scene suite and write images, meshes and poses.
    SceneGen(Common),
    /// Train on the suite and write training, evaluation and pose artifacts.
    Train(Common),
    /// Score the poses stored by `train` in the output directory again.
    Eval(Common),
    /// Run the four-variant loss ablation.
    Ablate(Common),
    /// Dump color, depth, coordinate and sigma maps of one scene.
    RenderDebug {
        #[command(flatten)]
        common: Common,
        /// Index of the scene to dump.
        #[arg(long, default_value_t = 0)]
        scene: usize,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment configuration file.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Directory receiving every output of the command.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Overrides the seed of the configuration.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
    /// Log progress to stderr.
    #[arg(long)]
    verbose: bool,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn setup(common: &Common) -> Result<ExperimentConfig, Failure> {
    let level = if common.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(Failure::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    let cfg = load_config(&common.config).map_err(|e| Failure::Config(e.to_string()))?;
    Ok(match common.seed {
        Some(seed) => cfg.with_seed(seed),
        None => cfg,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::SceneGen(common) => {
            let cfg = setup(&common)?;
            for scene in generate_scenes(&cfg)? {
                write_scene(
                    &scene,
                    &common.out.join(format!("scene_{:03}", scene.scene_id)),
                )?;
            }
            println!(
                "wrote {} scenes to {}",
                cfg.scene.count,
                common.out.display()
            );
        }
        Command::Train(common) => {
            let cfg = setup(&common)?;
            let outcome = run_experiment(&cfg, Some(&common.out))?;
            let s = &outcome.summary;
            println!(
                "ADD-0.1d init {:.3}  pretrained {:.3}  refined {:.3}",
                s.init.add_01d_accuracy, s.pretrained.add_01d_accuracy, s.refined.add_01d_accuracy
            );
        }
        Command::Eval(common) => {
            let cfg = setup(&common)?;
            let rows = reevaluate(&cfg, &common.out)?;
            write_stored_evaluations(
                &rows,
                create(&common.out.join("evaluation_recomputed.csv"))?,
            )?;
            for phase in [Phase::Init, Phase::Pretrained, Phase::Refined] {
                let s = summarize_stored(&rows, phase);
                println!(
                    "{:<10} ADD-0.1d {:.3}  rotation {:.3} deg  translation {:.5} m",
                    phase.as_str(),
                    s.add_01d_accuracy,
                    s.mean_rot_err_deg,
                    s.mean_trans_err_m
                );
            }
        }
        Command::Ablate(common) => {
            let cfg = setup(&common)?;
            for s in ablation_suite(&cfg, Some(&common.out))? {
                println!("{:<10} ADD-0.1d {:.3}", s.variant, s.add_01d_accuracy);
            }
        }
        Command::RenderDebug { common, scene } => {
            let cfg = setup(&common)?;
            let bundle = generate_scene_at(&cfg, scene)?;
            write_render_debug(&bundle, &cfg, &common.out)?;
            println!(
                "wrote debug maps of scene {scene} to {}",
                common.out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
