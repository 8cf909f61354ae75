use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pacs::pipeline::{self, parse_override, Manifest};
use pacs::Result;

#[derive(Parser)]
#[command(name = "pacs", version, about = "Physics-aware affordance estimation for tracked deformable scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score tool motion against per-RGP stiffness and export fields.
    Affordance(Common),
    /// Compare compliant directions with observed motion.
    Validate(Common),
    /// Run validation over a list of solver iteration counts.
    Sweep(Common),
    /// Generate a synthetic scene with ground-truth directions.
    Synth(Common),
}

#[derive(Args)]
struct Common {
    /// Tracks CSV: frame,point_id,x,y,z,label
    #[arg(long)]
    tracks: Option<PathBuf>,
    /// Tool poses CSV: frame,tx,ty,tz,qw,qx,qy,qz
    #[arg(long)]
    poses: Option<PathBuf>,
    /// Tool keypoints CSV: frame,kp_id,x,y,z
    #[arg(long)]
    keypoints: Option<PathBuf>,
    /// Config file of `key = value` lines
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Config override `key=value`; repeatable
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated solver iteration counts for `sweep`
    #[arg(long, value_delimiter = ',')]
    iterations: Option<Vec<usize>>,
}

impl Common {
    fn manifest(self) -> Result<Manifest> {
        Ok(Manifest {
            tracks: self.tracks,
            poses: self.poses,
            keypoints: self.keypoints,
            config: self.config,
            out: self.out,
            overrides: self.overrides.iter().map(|s| parse_override(s)).collect::<Result<_>>()?,
            seed: self.seed,
            iterations: self.iterations,
        })
    }
}

fn run(cli: Cli) -> Result<()> {
    let (cmd, common): (fn(&Manifest) -> Result<_>, Common) = match cli.command {
        Command::Affordance(c) => (pipeline::cmd_affordance, c),
        Command::Validate(c) => (pipeline::cmd_validate, c),
        Command::Sweep(c) => (pipeline::cmd_sweep, c),
        Command::Synth(c) => (pipeline::cmd_synth, c),
    };
    cmd(&common.manifest()?).map(|_| ())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
