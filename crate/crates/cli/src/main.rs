//! Batch entry points for the semantic occupancy pipeline: synthetic data
//! generation, two-stage training, evaluation, a depth voxelization utility,
//! and CVOX export.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure during training.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use semocc_core::config::RunConfig;
use semocc_core::geometry::{voxelize_points, CameraModel, DepthMap, PointCloud};
use semocc_core::metrics::MiouMode;
use semocc_core::semkitti::{
    read_labels, synth_scene, write_cvox, write_packed_bits, LabelGrid,
};
use semocc_core::train::{
    build_scenes, run_eval, stage1_products, train_stage1, train_stage2, TrainError,
};
use semocc_core::{completion::CompletionNet, fusion::FusionNet};

#[derive(Parser)]
#[command(name = "semocc", about = "camera-to-voxel semantic occupancy pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one synthetic scene: ground-truth CVOX, rendered depth with
    /// its JSON sidecar, and the camera description.
    Synth {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Optional config file; defaults describe the standard toy setup.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train one stage on the seeded synthetic scenes.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        config: PathBuf,
        /// Output directory; receives `stage<N>/` checkpoints and logs.
        #[arg(long)]
        out: PathBuf,
        /// Stage-1 checkpoint directory for stage 2 (default: <out>/stage1).
        #[arg(long)]
        stage1: Option<PathBuf>,
    },
    /// Evaluate checkpoints over the configured ranges and write TSV/JSON
    /// score tables.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Directory holding `stage1/` and `stage2/` checkpoints.
        #[arg(long)]
        ckpt: PathBuf,
        /// Scene source; only the seeded synthetic generator is supported.
        #[arg(long, default_value = "synth")]
        data: String,
        /// JSON report path; a TSV twin is written next to it.
        #[arg(long)]
        report: PathBuf,
        /// Optional directory for per-scene CVOX prediction exports.
        #[arg(long)]
        export_cvox: Option<PathBuf>,
    },
    /// Voxelize a raw depth map into packed occupancy bits.
    Voxelize {
        /// Raw little-endian f32 depth grid with a `.json` sidecar.
        #[arg(long)]
        depth: PathBuf,
        /// Camera JSON as written by `synth`.
        #[arg(long)]
        camera: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Export a raw little-endian u16 label grid as CVOX.
    Export {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

struct CliError {
    code: u8,
    msg: String,
}

impl CliError {
    fn config(msg: impl Into<String>) -> Self {
        CliError { code: 2, msg: msg.into() }
    }
    fn data(msg: impl Into<String>) -> Self {
        CliError { code: 3, msg: msg.into() }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let code = match &e {
            TrainError::NonFiniteLoss { .. } => 4,
            TrainError::Config(_) => 2,
            _ => 3,
        };
        CliError { code, msg: e.to_string() }
    }
}

#[derive(Serialize, Deserialize)]
struct DepthSidecar {
    width: usize,
    height: usize,
}

#[derive(Serialize, Deserialize)]
struct CameraJson {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl CameraJson {
    fn from_model(c: &CameraModel) -> Self {
        CameraJson {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            rotation: c.rotation,
            translation: c.translation,
        }
    }

    fn to_model(&self) -> Result<CameraModel, CliError> {
        CameraModel::new(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.width,
            self.height,
            self.rotation,
            self.translation,
        )
        .map_err(|e| CliError::data(format!("camera: {e}")))
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::config(format!("cannot read config {}: {e}", p.display())))?;
            RunConfig::parse(&text).map_err(|e| CliError::config(e.to_string()))
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, bytes)
        .map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

fn cmd_synth(seed: u64, out: &Path, config: Option<&Path>) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let spec = cfg.volume_spec().map_err(|e| CliError::config(e.to_string()))?;
    let cam = cfg.camera().map_err(|e| CliError::config(e.to_string()))?;
    let scene = synth_scene(seed, &spec, &cam).map_err(|e| CliError::config(e.to_string()))?;
    fs::create_dir_all(out)
        .map_err(|e| CliError::data(format!("cannot create {}: {e}", out.display())))?;

    let table = cfg.class_table();
    let mut names: Vec<String> = table.names().to_vec();
    names.push("empty".to_string());
    let mut cvox = Vec::new();
    write_cvox(&scene.gt, &names, &mut cvox).map_err(|e| CliError::data(e.to_string()))?;
    write_file(&out.join("gt.cvox"), &cvox)?;

    let mut depth_bytes = Vec::with_capacity(scene.depth.data().len() * 4);
    for &d in scene.depth.data() {
        depth_bytes.extend_from_slice(&(d as f32).to_le_bytes());
    }
    write_file(&out.join("depth.f32"), &depth_bytes)?;
    let sidecar = DepthSidecar { width: cam.width, height: cam.height };
    write_file(&out.join("depth.json"), serde_json::to_string_pretty(&sidecar).unwrap().as_bytes())?;
    write_file(
        &out.join("camera.json"),
        serde_json::to_string_pretty(&CameraJson::from_model(&cam)).unwrap().as_bytes(),
    )?;
    write_file(&out.join("mask2d.u8"), &scene.mask2d)?;
    println!(
        "scene seed {seed}: {} occupied voxels, wrote {}",
        scene.occupancy().count(),
        out.display()
    );
    Ok(())
}

fn cmd_train(stage: u8, config: &Path, out: &Path, stage1_dir: Option<&Path>) -> Result<(), CliError> {
    let cfg = load_config(Some(config))?;
    let scenes = build_scenes(&cfg)?;
    fs::create_dir_all(out)
        .map_err(|e| CliError::data(format!("cannot create {}: {e}", out.display())))?;
    if stage == 1 {
        let mut log = String::new();
        let net = train_stage1(&cfg, &scenes, &mut log)?;
        net.store
            .save(&out.join("stage1"))
            .map_err(|e| CliError::data(e.to_string()))?;
        write_file(&out.join("stage1_log.tsv"), log.as_bytes())?;
        let last = log.lines().last().unwrap_or("");
        println!("stage 1 done ({} steps); final: {last}", cfg.steps_stage1);
    } else {
        let s1_dir = stage1_dir.map(Path::to_path_buf).unwrap_or_else(|| out.join("stage1"));
        let mut stage1 = FusionNet::<f32>::init(
            cfg.fusion_config(),
            &mut semocc_core::nn::init_rng(cfg.seed ^ 0x51a9e1),
        );
        stage1
            .store
            .load_into(&s1_dir)
            .map_err(|e| CliError::data(format!("stage-1 checkpoint: {e}")))?;
        let products = stage1_products(&cfg, &stage1, &scenes)?;
        let frozen = stage1.store.checksum();
        let mut log = String::new();
        let net = train_stage2(&cfg, &scenes, &products, &mut log)?;
        assert_eq!(stage1.store.checksum(), frozen, "stage-1 parameters changed during stage 2");
        net.store
            .save(&out.join("stage2"))
            .map_err(|e| CliError::data(e.to_string()))?;
        write_file(&out.join("stage2_log.tsv"), log.as_bytes())?;
        let last = log.lines().last().unwrap_or("");
        println!("stage 2 done ({} steps); final: {last}", cfg.steps_stage2);
    }
    Ok(())
}

fn cmd_eval(
    config: &Path,
    ckpt: &Path,
    data: &str,
    report: &Path,
    export_cvox: Option<&Path>,
) -> Result<(), CliError> {
    if data != "synth" {
        return Err(CliError::data(format!(
            "unsupported data source `{data}`: only the seeded synthetic generator is available"
        )));
    }
    let cfg = load_config(Some(config))?;
    let scenes = build_scenes(&cfg)?;
    let mut stage1 = FusionNet::<f32>::init(
        cfg.fusion_config(),
        &mut semocc_core::nn::init_rng(cfg.seed ^ 0x51a9e1),
    );
    stage1
        .store
        .load_into(&ckpt.join("stage1"))
        .map_err(|e| CliError::data(format!("stage-1 checkpoint: {e}")))?;
    let mut stage2 = CompletionNet::<f32>::init(
        cfg.completion_config(),
        &mut semocc_core::nn::init_rng(cfg.seed ^ 0xc19a2b),
    );
    stage2
        .store
        .load_into(&ckpt.join("stage2"))
        .map_err(|e| CliError::data(format!("stage-2 checkpoint: {e}")))?;

    let out = run_eval(&cfg, &stage1, &stage2, &scenes, MiouMode::ExcludeUndefined)?;
    let json = serde_json::to_string_pretty(&out.report.to_json()).unwrap();
    write_file(report, json.as_bytes())?;
    let tsv_path = report.with_extension("tsv");
    write_file(&tsv_path, out.report.to_tsv().as_bytes())?;
    if let Some(dir) = export_cvox {
        let table = cfg.class_table();
        let mut names: Vec<String> = table.names().to_vec();
        names.push("empty".to_string());
        for (i, pred) in out.predictions.iter().enumerate() {
            let mut bytes = Vec::new();
            write_cvox(pred, &names, &mut bytes).map_err(|e| CliError::data(e.to_string()))?;
            write_file(&dir.join(format!("scene{i}.cvox")), &bytes)?;
        }
    }
    print!("{}", out.report.to_tsv());
    println!("report: {} and {}", report.display(), tsv_path.display());
    Ok(())
}

fn cmd_voxelize(
    depth_path: &Path,
    camera: &Path,
    out: &Path,
    config: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let spec = cfg.volume_spec().map_err(|e| CliError::config(e.to_string()))?;
    let sidecar_path = depth_path.with_extension("json");
    let sidecar: DepthSidecar = serde_json::from_str(
        &fs::read_to_string(&sidecar_path)
            .map_err(|e| CliError::data(format!("sidecar {}: {e}", sidecar_path.display())))?,
    )
    .map_err(|e| CliError::data(format!("sidecar: {e}")))?;
    let bytes = fs::read(depth_path)
        .map_err(|e| CliError::data(format!("depth {}: {e}", depth_path.display())))?;
    if bytes.len() != sidecar.width * sidecar.height * 4 {
        return Err(CliError::data(format!(
            "depth payload {} bytes does not match {}x{} f32 grid",
            bytes.len(),
            sidecar.width,
            sidecar.height
        )));
    }
    let depth_vals: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let depth = DepthMap::new(sidecar.width, sidecar.height, depth_vals)
        .map_err(|e| CliError::data(e.to_string()))?;
    let cam_json: CameraJson = serde_json::from_str(
        &fs::read_to_string(camera)
            .map_err(|e| CliError::data(format!("camera {}: {e}", camera.display())))?,
    )
    .map_err(|e| CliError::data(format!("camera: {e}")))?;
    let cam = cam_json.to_model()?;
    let cloud: PointCloud = semocc_core::geometry::backproject_depth(&depth, &cam);
    let grid = voxelize_points(&cloud, &spec);
    write_file(out, &write_packed_bits(&grid.data))?;
    println!(
        "voxelized {} points into {} occupied voxels; wrote {}",
        cloud.len(),
        grid.count(),
        out.display()
    );
    Ok(())
}

fn cmd_export(labels_path: &Path, out: &Path, config: Option<&Path>) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let spec = cfg.volume_spec().map_err(|e| CliError::config(e.to_string()))?;
    let bytes = fs::read(labels_path)
        .map_err(|e| CliError::data(format!("labels {}: {e}", labels_path.display())))?;
    let labels = read_labels(&bytes, spec.voxel_count())
        .map_err(|e| CliError::data(e.to_string()))?;
    let grid = LabelGrid::new(spec, labels);
    let table = cfg.class_table();
    let mut names: Vec<String> = table.names().to_vec();
    names.push("empty".to_string());
    let mut cvox = Vec::new();
    write_cvox(&grid, &names, &mut cvox).map_err(|e| CliError::data(e.to_string()))?;
    write_file(out, &cvox)?;
    println!("exported {} voxels to {}", spec.voxel_count(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { seed, out, config } => cmd_synth(seed, &out, config.as_deref()),
        Command::Train { stage, config, out, stage1 } => {
            cmd_train(stage, &config, &out, stage1.as_deref())
        }
        Command::Eval { config, ckpt, data, report, export_cvox } => {
            cmd_eval(&config, &ckpt, &data, &report, export_cvox.as_deref())
        }
        Command::Voxelize { depth, camera, out, config } => {
            cmd_voxelize(&depth, &camera, &out, config.as_deref())
        }
        Command::Export { labels, out, config } => cmd_export(&labels, &out, config.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}
