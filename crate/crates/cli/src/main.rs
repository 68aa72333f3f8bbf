mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Single image to explorable 4D scene.
#[derive(Parser)]
#[command(name = "forge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// TOML config file layered over the defaults (or over the bundle's snapshot).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config value, e.g. `--set train.iterations=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ExportMode {
    Baked,
    Live,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic world's input view to a PNG.
    SynthInput {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Lift an image to a point cloud and grow it along a pose plan.
    Expand {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        prompt: Option<String>,
        /// JSON array of `{"rotation": [w, x, y, z], "translation": [x, y, z]}`.
        /// Defaults to the configured orbit.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Generate the camera-controlled videos and their supervision masks.
    Animate {
        #[arg(long)]
        bundle: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Fit the canonical splats, then the 4D field.
    Train {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        iters_canonical: Option<usize>,
        #[arg(long = "iters-4d")]
        iters_4d: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write a viewer pack.
    Export {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = ExportMode::Baked)]
        mode: ExportMode,
        /// Comma-separated times in [0, 1] for baked packs. Defaults to one
        /// per video frame.
        #[arg(long, value_delimiter = ',')]
        times: Vec<f64>,
    },
    /// Render a flythrough along a pose file.
    RenderPath {
        #[arg(long)]
        bundle: PathBuf,
        /// JSON array of poses, each with an optional `time`; missing times
        /// are spread evenly over [0, 1].
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the reference suites, and check a bundle if given.
    Verify {
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Also run the end-to-end reconstruction check (about a minute).
        #[arg(long)]
        e2e: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Serve the synthetic plugins on a Unix socket.
    PluginServe {
        #[arg(long)]
        socket: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SynthInput { out, cfg } => commands::synth_input(&out, &cfg),
        Command::Expand {
            input,
            prompt,
            plan,
            out,
            cfg,
        } => commands::expand(&input, prompt, plan.as_deref(), &out, &cfg),
        Command::Animate { bundle, cfg } => commands::animate(&bundle, &cfg),
        Command::Train {
            bundle,
            iters_canonical,
            iters_4d,
            cfg,
        } => commands::train(&bundle, iters_canonical, iters_4d, &cfg),
        Command::Export {
            bundle,
            out,
            mode,
            times,
        } => commands::export(&bundle, &out, mode, &times),
        Command::RenderPath { bundle, poses, out } => commands::render_path(&bundle, &poses, &out),
        Command::Verify { bundle, e2e, seed } => commands::verify(bundle.as_deref(), e2e, seed),
        Command::PluginServe { socket, cfg } => commands::plugin_serve(&socket, &cfg),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
