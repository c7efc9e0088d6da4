//! `polguide` command-line tool.

mod commands;
mod config;
mod error;
mod manifest;
mod pfm;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{BackboneArg, CameraArg};

/// Polarization-guided refinement of surface normal maps.
///
/// Exit codes: 0 success, 1 numeric failure, 2 I/O, 3 configuration, 4 bridge.
#[derive(Debug, Parser)]
#[command(name = "polguide", version)]
struct Cli {
    /// Worker threads for pixel-parallel work; 0 uses every core. Results do
    /// not depend on this value.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic scene from a TOML description.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Refine a backbone prediction against measured polarization.
    Refine(RefineArgs),
    /// Angular error between two normal maps.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// One-channel map; nonzero pixels are scored. Defaults to every pixel.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stokes components, DoLP, AoLP and validity mask from four captures.
    Stokes {
        /// Directory holding i000/i045/i090/i135.pfm.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Input sensitivity of the backbone output at one pixel.
    Jacobian {
        /// Backbone input image (normally s0.pfm).
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "smoother")]
        backbone: BackboneArg,
        /// `row,col`
        #[arg(long, value_parser = parse_pair)]
        pixel: (usize, usize),
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter sweeps on a synthetic scene with an oracle backbone.
    Sweep {
        #[command(subcommand)]
        kind: SweepKind,
    },
    /// Split observed Stokes into diffuse and specular parts.
    Decompose {
        /// Directory with the observation (captures or s0/s1/s2.pfm).
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        normals: PathBuf,
        #[arg(long)]
        l_s: PathBuf,
        #[arg(long, default_value_t = 1.5)]
        eta: f64,
        #[arg(long, default_value = "ortho")]
        camera: CameraArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recolor the diffuse part or tint the specular part.
    Edit {
        #[arg(long)]
        l_d: PathBuf,
        #[arg(long)]
        l_s: PathBuf,
        /// `recolor:<s>[,<s>,<s>]` or `metallic:<gain>:<t>[,<t>,<t>]`
        #[arg(long, value_parser = commands::parse_edit)]
        op: polguide::decomposition::EditOp,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve a built-in backbone over the bridge protocol on stdin/stdout.
    BridgeServe {
        #[arg(long, default_value = "smoother")]
        backbone: BackboneArg,
        /// `H,W,C`
        #[arg(long, value_parser = parse_shape)]
        shape: polguide::Shape,
        /// Oracle reference image; required for `oracle:` backbones.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct RefineArgs {
    /// Directory with i000/i045/i090/i135.pfm or s0/s1/s2.pfm.
    #[arg(long)]
    input: PathBuf,
    /// Ground-truth normals; `gt_normals.pfm` in the input directory is used
    /// when present.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    backbone: Option<BackboneArg>,
    /// TOML with a `[guidance]` table and an optional `backbone` string.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    activation_step: Option<usize>,
    #[arg(long)]
    lr_ls: Option<f64>,
    #[arg(long)]
    lr_ox: Option<f64>,
    #[arg(long)]
    lr_on: Option<f64>,
    #[arg(long)]
    camera: Option<CameraArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum SweepKind {
    /// Gaussian sensor noise levels.
    Noise {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.05, 0.1, 0.2])]
        sigmas: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Refractive index assumed during refinement.
    Eta {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [1.3, 1.5, 1.7, 2.0, 3.2])]
        etas: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// No guidance, image offset only, and both offsets.
    Ablation {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Diffuse-only, specular-only and mixed sphere presets.
    Material {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected row,col")?;
    Ok((
        a.trim().parse().map_err(|_| format!("bad row {a:?}"))?,
        b.trim().parse().map_err(|_| format!("bad column {b:?}"))?,
    ))
}

fn parse_shape(s: &str) -> Result<polguide::Shape, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad dimension {p:?}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [h, w, c] if h > 0 && w > 0 && (c == 1 || c == 3) => Ok(polguide::Shape::new(h, w, c)),
        _ => Err("expected H,W,C with C in {1, 3}".into()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(3)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
