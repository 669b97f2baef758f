use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use flowdeform::checkpoint::Checkpoint;
use flowdeform::config::TrainConfig;
use flowdeform::data::{generate_synthetic_pairs, load_dataset, save_dataset, GenSpec};
use flowdeform::flow::DeformationField;
use flowdeform::geom::{load_cloud, parse_pose, read_pcf, write_pcf, CameraIntrinsics};
use flowdeform::pipeline::{evaluate, infer, render_cloud, transfer_contact_map, ContactField};
use flowdeform::train::{gradient_check, train};
use flowdeform::Result;

#[derive(Parser)]
#[command(name = "flowdeform", version, about = "Template-to-target point-cloud deformation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic template/target pairs.
    GenData {
        #[arg(long, default_value = "superquadric")]
        family: String,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Seed of the synthetic feature encoder; keep fixed across splits.
        #[arg(long)]
        feature_seed: Option<u64>,
        /// JSON generation settings; flags above override it.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Train from scratch and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Start from the full-size preset instead of the desk defaults.
        #[arg(long)]
        full_scale: bool,
    },
    /// Score single-step deformations and write the metric table.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Deform a template from feature files.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        template: PathBuf,
        #[arg(long, num_args = 1.., value_delimiter = ',', required = true)]
        views: Vec<PathBuf>,
        #[arg(long)]
        target_feat: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Carry a per-point contact map through a deformation field.
    Transfer {
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        template: PathBuf,
        #[arg(long)]
        contact: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Depth-shaded PGM render of a point cloud.
    Render {
        #[arg(long)]
        cloud: PathBuf,
        /// Text file with the 16 entries of a camera-to-world matrix.
        #[arg(long)]
        pose: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 240.0)]
        focal: f64,
    },
    /// Compare analytic and finite-difference gradients on one pair.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn read_config(path: Option<&Path>, base: TrainConfig) -> Result<TrainConfig> {
    match path {
        Some(p) => {
            let mut value = serde_json::to_value(&base)?;
            let overrides: serde_json::Value = serde_json::from_str(&fs::read_to_string(p)?)?;
            if let (Some(obj), serde_json::Value::Object(o)) = (value.as_object_mut(), overrides) {
                obj.extend(o);
            }
            TrainConfig::from_json(&value.to_string())
        }
        None => Ok(base),
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { family, count, seed, out, feature_seed, spec } => {
            let mut s: GenSpec = match spec {
                Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
                None => GenSpec::default(),
            };
            s.family = family;
            s.count = count;
            s.seed = seed;
            if let Some(f) = feature_seed {
                s.feature_seed = f;
            }
            let ds = generate_synthetic_pairs(&s)?;
            save_dataset(&ds, &out)?;
            info!("wrote {} pairs to {}", ds.len(), out.display());
        }
        Command::Train { config, data, out, full_scale } => {
            let base = if full_scale { TrainConfig::full_scale() } else { TrainConfig::default() };
            let cfg = read_config(config.as_deref(), base)?;
            let ds = load_dataset(&data)?;
            let outcome = train(&cfg, &ds)?;
            outcome.checkpoint.save(&out)?;
            fs::write(out.with_extension("history.json"), serde_json::to_string_pretty(&outcome.history)?)?;
            info!("wrote checkpoint {}", out.display());
        }
        Command::Eval { ckpt, data, out } => {
            let table = evaluate(&Checkpoint::load(&ckpt)?, &load_dataset(&data)?)?;
            fs::write(&out, table.to_tsv())?;
            let (cd, emd, siou) = table.mean();
            println!("mean cd {cd:.6e} emd {emd:.6e} siou {siou:.4}");
        }
        Command::Infer { ckpt, template, views, target_feat, out } => {
            let views: Vec<&Path> = views.iter().map(PathBuf::as_path).collect();
            infer(&Checkpoint::load(&ckpt)?, &template, &views, &target_feat, &out)?;
            info!("wrote deformed.pcf and field.pcf to {}", out.display());
        }
        Command::Transfer { field, template, contact, out } => {
            let field = DeformationField { vectors: read_pcf(fs::File::open(field)?)? };
            let template = load_cloud(&template)?;
            let contact = ContactField::parse(&fs::read_to_string(contact)?)?;
            let (moved, values) = transfer_contact_map(&field, &template, &contact)?;
            fs::create_dir_all(&out)?;
            write_pcf(fs::File::create(out.join("deformed.pcf"))?, &moved.points)?;
            fs::write(out.join("contact.txt"), values.format())?;
        }
        Command::Render { cloud, pose, out, size, focal } => {
            let pose = parse_pose(&fs::read_to_string(pose)?)?;
            render_cloud(&load_cloud(&cloud)?, &pose, &CameraIntrinsics::square(size, focal), &out)?;
        }
        Command::Gradcheck { config, tolerance } => {
            let cfg = read_config(config.as_deref(), TrainConfig::tiny())?;
            let spec = GenSpec { count: 1, seed: cfg.seed, scale_range: [0.5, 1.5], ..GenSpec::matching(&cfg) };
            let pair = generate_synthetic_pairs(&spec)?.pairs.remove(0);
            let report = gradient_check(&cfg, &pair, tolerance)?;
            for (block, err) in &report.blocks {
                println!("{block}\t{err:.3e}");
            }
            println!("{}", if report.passed { "PASS" } else { "FAIL" });
            return Ok(report.passed);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
