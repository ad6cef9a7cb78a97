//! `c3gs`: command-line front end for the compression pipeline, the
//! container codec, the reference renderer and the synthetic scene
//! generator.
//!
//! Exit codes: 0 success, 1 usage error or rejected parameters, 2 I/O
//! failure, 3 corrupt or malformed input data.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use thiserror::Error;

use c3gs_core::codec::{self, CodecError, MAGIC};
use c3gs_core::finetune::LearningRates;
use c3gs_core::pipeline::{compress, PipelineConfig, PipelineError};
use c3gs_core::quant::{dequantize_scene, QuantRange};
use c3gs_core::render::{psnr, render_activated, RenderOptions};
use c3gs_core::scene::ply::{load_ply, save_ply, PlyError};
use c3gs_core::scene::synth::{orbit_cameras, synth_scene, SynthParams};
use c3gs_core::scene::{load_cameras, save_cameras, ActivatedScene, Camera, Image, SceneError};

#[derive(Debug, Parser)]
#[command(name = "c3gs", version, about = "Compress, inspect and render 3D Gaussian splat scenes")]
struct Cli {
    /// Print exactly one JSON document on stdout, errors included.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LrSchedule {
    /// 3DGS training rates divided by ten.
    Default,
    /// Undivided 3DGS rates with the final 3DGS position rate, for runs of a
    /// few hundred steps.
    Short,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compress a PLY scene into a .c3gs container.
    Compress {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Camera file (JSON object or array). Every 8th camera, starting
        /// with the first, is held out for the stage report.
        #[arg(long)]
        cameras: PathBuf,
        /// Directory of training targets named 0000.png, 0001.png, ... in
        /// camera order. Without it the input scene's own renders are used.
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long, default_value_t = 4096)]
        k_color: usize,
        #[arg(long, default_value_t = 4096)]
        k_shape: usize,
        /// Color sensitivity above which SH vectors are kept verbatim.
        #[arg(long, default_value_t = 6e-7)]
        beta_c: f64,
        /// Shape sensitivity above which covariances are kept verbatim.
        #[arg(long, default_value_t = 3e-6)]
        beta_g: f64,
        #[arg(long, default_value_t = 5000)]
        finetune_steps: usize,
        #[arg(long, value_enum, default_value_t = LrSchedule::Default)]
        lr_schedule: LrSchedule,
        /// Learning-rate multiplier reached at the last fine-tuning step.
        #[arg(long, default_value_t = 1.0)]
        lr_final_factor: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the stage report as tab-separated text.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Expand a container back into a PLY scene.
    Decompress {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Render a .ply or .c3gs scene to PNG.
    Render {
        scene: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        /// Camera index when the camera file holds several.
        #[arg(long, default_value_t = 0)]
        view: usize,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Per-view and mean PSNR between two scenes (.ply or .c3gs).
    Metrics {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        cameras: PathBuf,
    },
    /// Print the header and section sizes of a container.
    Info { input: PathBuf },
    /// Write a synthetic prototype scene and orbit cameras.
    Synth {
        /// Number of shape prototypes and of color prototypes.
        #[arg(long, default_value_t = 32)]
        prototypes: usize,
        #[arg(short = 'n', long, default_value_t = 5000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        cameras_out: PathBuf,
        #[arg(long, default_value_t = 10)]
        views: usize,
        /// Square image size of every camera.
        #[arg(long, default_value_t = 64)]
        resolution: u32,
        /// Focal length in pixels [default: 70/64 of the resolution].
        #[arg(long)]
        focal: Option<f64>,
        #[arg(long, default_value_t = 4.0)]
        distance: f64,
        #[arg(long, default_value_t = 3)]
        sh_degree: usize,
        #[arg(long, default_value_t = 0.1)]
        shape_noise: f64,
        #[arg(long, default_value_t = 0.02)]
        color_noise: f64,
        /// Extra Gaussians placed where no camera sees them.
        #[arg(long, default_value_t = 0)]
        invisible: usize,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Corrupt(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io { .. } => 2,
            CliError::Corrupt(_) => 3,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn corrupt(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Corrupt(format!("{}: {e}", path.display()))
}

fn scene_err(path: &Path, e: SceneError) -> CliError {
    match e {
        SceneError::Io(source) => CliError::Io { path: path.to_path_buf(), source },
        other => corrupt(path, other),
    }
}

fn pipeline_err(e: PipelineError) -> CliError {
    match e {
        PipelineError::Cluster(c) => CliError::Corrupt(c.to_string()),
        other => CliError::Usage(other.to_string()),
    }
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(io_err(path))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(io_err(path))
}

fn cameras(path: &Path) -> Result<Vec<Camera>, CliError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let cams = load_cameras(&text).map_err(|e| scene_err(path, e))?;
    if cams.is_empty() {
        return Err(corrupt(path, "no cameras"));
    }
    Ok(cams)
}

/// A scene file as render inputs, detected by content: containers start
/// with the container magic, anything else is parsed as PLY.
fn load_scene(path: &Path) -> Result<ActivatedScene, CliError> {
    let bytes = read(path)?;
    if bytes.starts_with(MAGIC) {
        let c = codec::decode(&bytes).map_err(|e| corrupt(path, e))?;
        dequantize_scene(&c).map_err(|e| corrupt(path, e))
    } else {
        let scene = load_ply(&bytes).map_err(|e: PlyError| corrupt(path, e))?;
        Ok(scene.activated())
    }
}

fn psnr_json(v: f64) -> Value {
    if v.is_infinite() {
        json!("inf")
    } else {
        json!(v)
    }
}

fn psnr_text(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.3}")
    }
}

struct Output {
    text: String,
    json: Value,
}

fn run(command: Command) -> Result<Output, CliError> {
    match command {
        Command::Compress {
            input,
            output,
            cameras: cam_path,
            images,
            k_color,
            k_shape,
            beta_c,
            beta_g,
            finetune_steps,
            lr_schedule,
            lr_final_factor,
            seed,
            report,
        } => {
            let scene = load_ply(&read(&input)?).map_err(|e| corrupt(&input, e))?;
            let cams = cameras(&cam_path)?;
            let targets = match &images {
                Some(dir) => Some(load_targets(dir, &cams)?),
                None => None,
            };
            let config = PipelineConfig {
                k_color,
                k_shape,
                beta_color: beta_c,
                beta_shape: beta_g,
                finetune_steps,
                lr: match lr_schedule {
                    LrSchedule::Default => LearningRates::default(),
                    LrSchedule::Short => LearningRates::short_schedule(),
                },
                lr_final_factor,
                seed,
                ..PipelineConfig::default()
            };
            let (bytes, stage_report) = compress(&scene, &cams, targets.as_deref(), &config).map_err(pipeline_err)?;
            write(&output, &bytes)?;
            let text = stage_report.to_text();
            if let Some(path) = &report {
                write(path, text.as_bytes())?;
            }
            Ok(Output {
                text: format!("{text}\nwrote {} ({} bytes)\n", output.display(), bytes.len()),
                json: json!({ "command": "compress", "output": output, "bytes": bytes.len(), "report": stage_report }),
            })
        }
        Command::Decompress { input, output } => {
            let bytes = read(&input)?;
            let c = codec::decode(&bytes).map_err(|e| corrupt(&input, e))?;
            let scene = dequantize_scene(&c).map_err(|e| corrupt(&input, e))?.to_scene();
            write(&output, &save_ply(&scene))?;
            Ok(Output {
                text: format!("wrote {} ({} Gaussians)\n", output.display(), scene.len()),
                json: json!({ "command": "decompress", "output": output, "count": scene.len() }),
            })
        }
        Command::Render { scene, camera, view, output } => {
            let s = load_scene(&scene)?;
            let cams = cameras(&camera)?;
            let cam = cams
                .get(view)
                .ok_or_else(|| CliError::Usage(format!("view {view} out of range ({} cameras)", cams.len())))?;
            let img = render_activated(&s, cam, &RenderOptions::default());
            write(&output, &img.to_png().map_err(|e| scene_err(&output, e))?)?;
            Ok(Output {
                text: format!("wrote {} ({}x{})\n", output.display(), img.width, img.height),
                json: json!({ "command": "render", "output": output, "width": img.width, "height": img.height }),
            })
        }
        Command::Metrics { a, b, cameras: cam_path } => {
            let sa = load_scene(&a)?;
            let sb = load_scene(&b)?;
            let cams = cameras(&cam_path)?;
            let opts = RenderOptions::default();
            let per_view: Vec<f64> = cams
                .iter()
                .map(|c| psnr(&render_activated(&sa, c, &opts), &render_activated(&sb, c, &opts)))
                .collect::<Result<_, _>>()
                .map_err(|e| CliError::Usage(e.to_string()))?;
            let mean = per_view.iter().sum::<f64>() / per_view.len() as f64;
            let mut text = String::from("view\tpsnr_db\n");
            for (i, v) in per_view.iter().enumerate() {
                text.push_str(&format!("{i}\t{}\n", psnr_text(*v)));
            }
            text.push_str(&format!("mean\t{}\n", psnr_text(mean)));
            let views: Vec<Value> =
                per_view.iter().enumerate().map(|(i, v)| json!({ "view": i, "psnr": psnr_json(*v) })).collect();
            Ok(Output { text, json: json!({ "command": "metrics", "views": views, "mean_psnr": psnr_json(mean) }) })
        }
        Command::Info { input } => {
            let bytes = read(&input)?;
            codec::decode(&bytes).map_err(|e| corrupt(&input, e))?;
            let h = codec::decode_header(&bytes).map_err(|e: CodecError| corrupt(&input, e))?;
            let r = codec::report(&bytes, h.count as usize).map_err(|e| corrupt(&input, e))?;
            let range = |q: &QuantRange| json!({ "bits": q.bits, "min": q.min, "max": q.max });
            let ranges = [
                ("opacity", &h.ranges.opacity),
                ("eta", &h.ranges.eta),
                ("color", &h.ranges.color),
                ("rotation", &h.ranges.rotation),
                ("scale", &h.ranges.scale),
            ];
            let mut text = format!(
                "version\t{}\nmorton_ordered\t{}\nN = {}\nsh_degree\t{}\ncolor_codebook\t{} ({} clustered), index bits {}\nshape_codebook\t{} ({} clustered), index bits {}\naabb\t{:?} .. {:?}\n",
                h.version,
                h.morton_ordered(),
                h.count,
                h.sh_degree,
                h.color_total,
                h.color_clustered,
                h.color_index_bits,
                h.shape_total,
                h.shape_clustered,
                h.shape_index_bits,
                h.aabb_min,
                h.aabb_max,
            );
            for (name, q) in &ranges {
                text.push_str(&format!("range {name}\t{} bits [{}, {}]\n", q.bits, q.min, q.max));
            }
            text.push_str("section\traw_bytes\tcompressed_bytes\tcrc32\n");
            for s in &h.sections {
                text.push_str(&format!("{}\t{}\t{}\t{:08x}\n", s.section, s.raw_len, s.compressed_len, s.crc32));
            }
            text.push_str(&format!("total_bytes\t{}\nratio\t{:.3}\n", r.total_bytes, r.ratio));
            let sections: Vec<Value> = h
                .sections
                .iter()
                .map(|s| {
                    json!({
                        "id": s.section as u8,
                        "name": s.section.name(),
                        "raw_bytes": s.raw_len,
                        "compressed_bytes": s.compressed_len,
                        "crc32": s.crc32,
                    })
                })
                .collect();
            let json = json!({
                "command": "info",
                "version": h.version,
                "flags": h.flags,
                "morton_ordered": h.morton_ordered(),
                "count": h.count,
                "sh_degree": h.sh_degree,
                "color_clustered": h.color_clustered,
                "color_total": h.color_total,
                "shape_clustered": h.shape_clustered,
                "shape_total": h.shape_total,
                "color_index_bits": h.color_index_bits,
                "shape_index_bits": h.shape_index_bits,
                "aabb_min": h.aabb_min,
                "aabb_max": h.aabb_max,
                "ranges": ranges.iter().map(|(n, q)| (n.to_string(), range(q))).collect::<serde_json::Map<_, _>>(),
                "sections": sections,
                "total_bytes": r.total_bytes,
                "uncompressed_bytes": r.uncompressed_bytes,
                "ratio": r.ratio,
            });
            Ok(Output { text, json })
        }
        Command::Synth {
            prototypes,
            count,
            seed,
            output,
            cameras_out,
            views,
            resolution,
            focal,
            distance,
            sh_degree,
            shape_noise,
            color_noise,
            invisible,
        } => {
            if count == 0 || prototypes == 0 || views == 0 || sh_degree > 3 {
                return Err(CliError::Usage("count, prototypes and views must be positive, sh-degree at most 3".into()));
            }
            let params = SynthParams {
                count,
                shape_prototypes: prototypes,
                color_prototypes: prototypes,
                sh_degree,
                shape_noise,
                color_noise,
                invisible,
                ..SynthParams::default()
            };
            let synth = synth_scene(&params, seed);
            let focal = focal.unwrap_or(70.0 / 64.0 * resolution as f64);
            let cams = orbit_cameras(views, distance, focal, resolution, resolution)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            write(&output, &save_ply(&synth.scene))?;
            save_cameras(&cameras_out, &cams).map_err(|e| scene_err(&cameras_out, e))?;
            Ok(Output {
                text: format!(
                    "wrote {} ({} Gaussians) and {} ({} cameras)\n",
                    output.display(),
                    synth.scene.len(),
                    cameras_out.display(),
                    cams.len()
                ),
                json: json!({
                    "command": "synth",
                    "output": output,
                    "count": synth.scene.len(),
                    "cameras_out": cameras_out,
                    "views": cams.len(),
                }),
            })
        }
    }
}

fn load_targets(dir: &Path, cams: &[Camera]) -> Result<Vec<Image>, CliError> {
    cams.iter()
        .enumerate()
        .map(|(i, cam)| {
            let path = dir.join(format!("{i:04}.png"));
            let img = Image::from_png(&read(&path)?).map_err(|e| corrupt(&path, e))?;
            if (img.width, img.height) != (cam.width, cam.height) {
                return Err(CliError::Usage(format!(
                    "{}: {}x{} image for a {}x{} camera",
                    path.display(),
                    img.width,
                    img.height,
                    cam.width,
                    cam.height
                )));
            }
            Ok(img)
        })
        .collect()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let json_mode = std::env::args().any(|a| a == "--json");
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            if json_mode {
                println!("{}", json!({ "error": e.to_string().trim(), "exit_code": 1 }));
            }
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(out) => {
            if cli.json {
                println!("{}", out.json);
            } else {
                print!("{}", out.text);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            if cli.json {
                println!("{}", json!({ "error": e.to_string(), "exit_code": e.exit_code() }));
            }
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
