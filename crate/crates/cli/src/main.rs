use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use myoseg::gradcheck::{run_gradcheck_with, Faults};
use myoseg::io::{read_mask, read_volume, write_mask, write_probability, write_volume, Header};
use myoseg::mesh::{extract_surface, write_obj};
use myoseg::metrics::{dice_3d, slicewise_dice_profile};
use myoseg::networks::{Architecture, NetworkKind};
use myoseg::phantom::{generate_phantom, PhantomSpec};
use myoseg::pipeline::{preprocess, preprocess_pair, segment_volume, PropagationConfig};
use myoseg::training::{
    init_samples, load_checkpoint, prop_samples, save_checkpoint, train_init, train_prop,
    write_loss_csv, AugmentConfig, LossRecord, TrainConfig,
};
use myoseg::Error;

#[derive(Parser)]
#[command(
    name = "myoseg",
    version,
    about = "Myocardium segmentation by slice propagation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Init,
    Prop,
}

impl From<Kind> for NetworkKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Init => NetworkKind::Init,
            Kind::Prop => NetworkKind::Propagation,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Fault {
    Conv2d,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic volume and its ground-truth mask.
    Phantom {
        /// TOML phantom description; defaults apply to omitted keys.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_volume: PathBuf,
        #[arg(long)]
        out_gt: PathBuf,
    },
    /// Train a network on `NAME.cvol` / `NAME.cmsk` pairs.
    Train {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        log_every: usize,
        #[arg(long, default_value_t = 1)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
        #[arg(long)]
        no_augment: bool,
    },
    /// Segment a volume with trained checkpoints.
    Segment {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        init_ckpt: PathBuf,
        #[arg(long)]
        prop_ckpt: PathBuf,
        #[arg(long)]
        out_mask: PathBuf,
        #[arg(long)]
        out_prob: Option<PathBuf>,
        #[arg(long)]
        out_mesh: Option<PathBuf>,
        #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u8).range(1..=4))]
        stride: u8,
    },
    /// Dice between a predicted and a reference mask.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        profile: Option<PathBuf>,
    },
    /// Surface mesh of a binary mask.
    Mesh {
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every backward pass.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<Fault>,
    },
}

enum Failure {
    Verification(String),
    Input(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFiniteLoss { .. }
            | Error::NonFiniteGradient { .. }
            | Error::NonFiniteUpdate { .. } => Failure::Numeric(e.to_string()),
            _ => Failure::Input(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Input(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn phantom(spec: Option<&Path>, seed: Option<u64>, out_volume: &Path, out_gt: &Path) -> CmdResult {
    let mut spec = match spec {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure::Input(format!("{}: {e}", p.display())))?;
            PhantomSpec::from_toml_str(&text)?
        }
        None => PhantomSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let (volume, gt) = generate_phantom(&spec)?;
    write_volume(&volume, out_volume)?;
    write_mask(&gt, &Header::of(&volume), out_gt)?;
    let [nx, ny, nz] = volume.dims();
    let total = nx * ny * nz;
    println!(
        "volume {nx}x{ny}x{nz} ({total} voxels), myocardium {} voxels ({:.2}%), base_index {}",
        gt.count(),
        100.0 * gt.count() as f64 / total as f64,
        volume.base_index
    );
    Ok(())
}

/// Preprocessed `(volume, mask)` pairs for every `*.cvol` in `dir` that has
/// a `.cmsk` sibling, in file-name order.
fn load_pairs(
    dir: &Path,
) -> Result<Vec<(myoseg::volume::Volume, myoseg::volume::BinaryMask)>, Failure> {
    let entries =
        std::fs::read_dir(dir).map_err(|e| Failure::Input(format!("{}: {e}", dir.display())))?;
    let mut volumes: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "cvol"))
        .collect();
    volumes.sort();
    let mut pairs = Vec::new();
    for v in volumes {
        let gt = v.with_extension("cmsk");
        if !gt.exists() {
            eprintln!("warning: {} has no ground truth, skipped", v.display());
            continue;
        }
        let volume = read_volume(&v)?;
        let (mask, _) = read_mask(&gt)?;
        pairs.push(preprocess_pair(&volume, &mask)?);
    }
    if pairs.is_empty() {
        return Err(Failure::Input(format!(
            "no volume/mask pairs in {}",
            dir.display()
        )));
    }
    Ok(pairs)
}

#[allow(clippy::too_many_arguments)]
fn train(
    kind: NetworkKind,
    data: &Path,
    iterations: Option<usize>,
    lr: Option<f64>,
    seed: u64,
    out: &Path,
    log: Option<&Path>,
    log_every: usize,
    batch_size: usize,
    checkpoint_every: usize,
    no_augment: bool,
) -> CmdResult {
    let mut cfg = TrainConfig::for_kind(kind);
    if let Some(n) = iterations {
        cfg.iterations = n;
    }
    if let Some(lr) = lr {
        cfg.learning_rate = lr;
    }
    cfg.seed = seed;
    cfg.log_every = log_every;
    cfg.batch_size = batch_size;
    cfg.checkpoint_every = checkpoint_every;
    cfg.checkpoint_path = Some(out.to_path_buf());
    if no_augment {
        cfg.augmentation = AugmentConfig::disabled();
    }
    cfg.validate()?;
    println!(
        "training {kind} network: learning rate {}, {} iterations, batch {}, seed {seed}",
        cfg.learning_rate, cfg.iterations, cfg.batch_size
    );

    let pairs = load_pairs(data)?;
    let arch = Architecture::default();
    let started = Instant::now();
    let mut report = |r: &LossRecord| {
        println!(
            "iteration {:>7}  loss {:.6}  ({:.0} s)",
            r.iteration,
            r.total,
            started.elapsed().as_secs_f64()
        );
    };
    let outcome = match kind {
        NetworkKind::Init => {
            let mut samples = Vec::new();
            for (v, m) in &pairs {
                samples.extend(init_samples(v, m)?);
            }
            println!("{} slices from {} volumes", samples.len(), pairs.len());
            train_init(&samples, &arch, &cfg, &mut report)?
        }
        NetworkKind::Propagation => {
            let mut samples = Vec::new();
            for (v, m) in &pairs {
                samples.extend(prop_samples(v, m)?);
            }
            println!("{} windows from {} volumes", samples.len(), pairs.len());
            train_prop(&samples, &arch, &cfg, &mut report)?
        }
    };
    save_checkpoint(&outcome.params, out)?;
    if let Some(path) = log {
        write_loss_csv(&outcome.log, create(path)?)?;
    }
    println!("checkpoint written to {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn segment(
    volume: &Path,
    init_ckpt: &Path,
    prop_ckpt: &Path,
    out_mask: &Path,
    out_prob: Option<&Path>,
    out_mesh: Option<&Path>,
    stride: usize,
) -> CmdResult {
    let started = Instant::now();
    let mut init = load_checkpoint(init_ckpt)?;
    let mut prop = load_checkpoint(prop_ckpt)?;
    for (params, expected, path) in [
        (&init, NetworkKind::Init, init_ckpt),
        (&prop, NetworkKind::Propagation, prop_ckpt),
    ] {
        if params.kind != expected {
            return Err(Failure::Input(format!(
                "{} holds a {} network, expected {expected}",
                path.display(),
                params.kind
            )));
        }
    }
    let v = preprocess(&read_volume(volume)?)?;
    let result = segment_volume(&v, &mut init, &mut prop, &PropagationConfig { stride })?;
    let header = Header::of(&v);
    write_mask(&result.binary, &header, out_mask)?;
    if let Some(p) = out_prob {
        write_probability(&result.probability, &header, p)?;
    }
    let elapsed = started.elapsed().as_secs_f64();
    println!(
        "init_index {}  slices {}..={}  propagation steps {} up, {} down",
        result.init_index,
        result.slices_segmented.start(),
        result.slices_segmented.end(),
        result.invocations.0,
        result.invocations.1
    );
    println!(
        "segmented {} voxels in {elapsed:.3} s",
        result.binary.count()
    );
    if let Some(p) = out_mesh {
        let mesh = extract_surface(&result.binary, f64::from(v.spacing[0]))?;
        write_obj(&mesh, p)?;
        println!(
            "mesh: {} vertices, {} triangles",
            mesh.vertex_count(),
            mesh.triangle_count()
        );
    }
    Ok(())
}

fn eval(pred: &Path, gt: &Path, profile: Option<&Path>) -> CmdResult {
    let (p, _) = read_mask(pred)?;
    let (g, _) = read_mask(gt)?;
    let dice = dice_3d(&p, &g)?;
    let prof = slicewise_dice_profile(&p, &g)?;
    println!("dice_3d {dice:.6}");
    println!("max_adjacent_jump {:.6}", prof.smoothness);
    if let Some(path) = profile {
        prof.write_csv(create(path)?)?;
    }
    Ok(())
}

fn mesh(mask: &Path, out: &Path) -> CmdResult {
    let (m, header) = read_mask(mask)?;
    if header.spacing.iter().any(|&s| s != header.spacing[0]) {
        return Err(Failure::Input(format!(
            "mesh export needs isotropic spacing, got {:?}",
            header.spacing
        )));
    }
    let mesh = extract_surface(&m, f64::from(header.spacing[0]))?;
    write_obj(&mesh, out)?;
    println!(
        "{} vertices, {} triangles, euler characteristic {}",
        mesh.vertex_count(),
        mesh.triangle_count(),
        mesh.euler_characteristic()
    );
    Ok(())
}

fn gradcheck(seed: u64, fault: Option<Fault>) -> CmdResult {
    let faults = Faults {
        conv2d: matches!(fault, Some(Fault::Conv2d)),
    };
    let report = run_gradcheck_with(seed, faults)?;
    print!("{report}");
    let offenders: Vec<&str> = report.offenders().iter().map(|c| c.op.as_str()).collect();
    if offenders.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(format!(
            "gradient check failed for {}",
            offenders.join(", ")
        )))
    }
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Phantom {
            spec,
            seed,
            out_volume,
            out_gt,
        } => phantom(spec.as_deref(), seed, &out_volume, &out_gt),
        Command::Train {
            kind,
            data,
            iterations,
            lr,
            seed,
            out,
            log,
            log_every,
            batch_size,
            checkpoint_every,
            no_augment,
        } => train(
            kind.into(),
            &data,
            iterations,
            lr,
            seed,
            &out,
            log.as_deref(),
            log_every,
            batch_size,
            checkpoint_every,
            no_augment,
        ),
        Command::Segment {
            volume,
            init_ckpt,
            prop_ckpt,
            out_mask,
            out_prob,
            out_mesh,
            stride,
        } => segment(
            &volume,
            &init_ckpt,
            &prop_ckpt,
            &out_mask,
            out_prob.as_deref(),
            out_mesh.as_deref(),
            usize::from(stride),
        ),
        Command::Eval { pred, gt, profile } => eval(&pred, &gt, profile.as_deref()),
        Command::Mesh { mask, out } => mesh(&mask, &out),
        Command::Gradcheck { seed, inject_fault } => gradcheck(seed, inject_fault),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
