use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use voxseg::augment::{build_augmented_dataset, AugmentConfig};
use voxseg::gradcheck::{check_model, check_primitive, Tolerance, PRIMITIVES};
use voxseg::io::{
    generate_phantom, read_image, read_manifest, read_mask, write_manifest, write_mask, write_volume, ManifestEntry,
    PhantomSpec, Split, VolumeKind,
};
use voxseg::train::{evaluate, load_checkpoint, predict, smooth_curve, train_all, TrainRun};
use voxseg::util::mix_seed;
use voxseg::{Dims, Real};

#[derive(Parser)]
#[command(name = "voxseg", version, about = "Residual 3D U-Net segmentation of volumetric scans")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic layered volumes with fluid pockets and a manifest.
    PhantomGen {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: usize,
        /// Extents as W,H,Z or WxHxZ.
        #[arg(long)]
        dims: Dims,
        #[arg(long)]
        out: PathBuf,
        /// How many of the last volumes go to the validation split.
        #[arg(long, default_value_t = 0)]
        val: usize,
        /// How many of the last volumes go to the test split.
        #[arg(long, default_value_t = 0)]
        test: usize,
    },
    /// Expand the training split of a manifest into augmented pairs.
    Augment {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 16)]
        multiplicity: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Output extents; defaults to the extents of the training volumes.
        #[arg(long)]
        dims: Option<Dims>,
    },
    /// Train from a JSON run description.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        deterministic: bool,
    },
    /// Predict a probability volume with a trained checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Output stem; the network-resolution map is written here and the
        /// full-resolution copy to `<out>_full`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a prediction against one or more annotations (CSV on stdout).
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        gt: Vec<PathBuf>,
        /// Full-resolution extents the prediction is upsampled to.
        #[arg(long)]
        dims: Dims,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        /// 64-bit precision instead of 32-bit.
        #[arg(long)]
        f64: bool,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Skip the whole-model check.
        #[arg(long)]
        primitives_only: bool,
    },
    /// Average a metrics CSV over non-overlapping windows of rows.
    Smooth {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        window: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // core errors already carry their cause in the message
            let (kind, msg) = match e.downcast_ref::<voxseg::Error>() {
                Some(v) => (v.kind(), v.to_string()),
                None => ("cli", format!("{e:#}")),
            };
            let msg = msg.replace('\n', " ");
            eprintln!("error: {kind}: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::PhantomGen {
            seed,
            count,
            dims,
            out,
            val,
            test,
        } => phantom_gen(seed, count, dims, &out, val, test),
        Command::Augment {
            manifest,
            multiplicity,
            seed,
            out,
            dims,
        } => augment(&manifest, multiplicity, seed, &out, dims),
        Command::Train { config, deterministic } => {
            let text = fs::read_to_string(&config).map_err(|e| voxseg::Error::io(&config, e))?;
            let mut run: TrainRun =
                serde_json::from_str(&text).map_err(|e| voxseg::Error::Config(format!("{}: {e}", config.display())))?;
            run.deterministic |= deterministic;
            let outcomes = train_all(&run)?;
            for o in outcomes {
                let splits: serde_json::Map<_, _> = o
                    .splits
                    .iter()
                    .map(|h| (h.split.to_string(), json!({"peak_jaccard": h.peak_jaccard, "peak_smoothed_jaccard": h.peak_smoothed_jaccard})))
                    .collect();
                let line = json!({
                    "seed": o.seed, "epochs": o.epochs_run, "iterations": o.iterations_run,
                    "best_epoch": o.best_epoch, "best_jaccard": o.best_jaccard,
                    "parameters": o.parameter_count, "splits": splits,
                });
                println!("{line}");
            }
            Ok(())
        }
        Command::Predict { checkpoint, input, out } => {
            let mut ck = load_checkpoint(&checkpoint)?;
            let v = read_image(&input)?;
            let (small, full) = predict(&mut ck.model, &v)?;
            write_volume(&out, &small, VolumeKind::Prob)?;
            let full_path = sibling(&out, "_full");
            write_volume(&full_path, &full, VolumeKind::Prob)?;
            println!("{}", json!({"network": out, "full": full_path, "network_dims": small.dims().to_string(), "full_dims": full.dims().to_string()}));
            Ok(())
        }
        Command::Evaluate { pred, gt, dims, out } => {
            let p = read_image(&pred)?;
            let gts = gt
                .iter()
                .map(|g| Ok((label_of(g), read_mask(g)?)))
                .collect::<Result<Vec<_>>>()?;
            let mut csv = format!("label,{}\n", voxseg::metrics::MetricsReport::CSV_HEADER);
            for (label, r) in evaluate(&p, &gts, dims)? {
                csv.push_str(&format!("{label},{}\n", r.csv_row()));
            }
            match out {
                Some(path) => fs::write(&path, csv).map_err(|e| voxseg::Error::io(&path, e))?,
                None => print!("{csv}"),
            }
            Ok(())
        }
        Command::Gradcheck {
            f64,
            seeds,
            primitives_only,
        } => {
            if f64 {
                gradcheck::<f64>(seeds, primitives_only, "f64")
            } else {
                gradcheck::<f32>(seeds, primitives_only, "f32")
            }
        }
        Command::Smooth { input, out, window } => {
            let text = fs::read_to_string(&input).map_err(|e| voxseg::Error::io(&input, e))?;
            let smoothed = smooth_curve(&text, window, &input)?;
            fs::write(&out, smoothed).map_err(|e| voxseg::Error::io(&out, e))?;
            Ok(())
        }
    }
}

fn label_of(p: &Path) -> String {
    p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned())
}

/// `dir/name` with `suffix` appended to the file name.
fn sibling(p: &Path, suffix: &str) -> PathBuf {
    let mut name = p.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    p.with_file_name(name)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| voxseg::Error::io(dir, e))?;
    Ok(())
}

fn phantom_gen(seed: u64, count: usize, dims: Dims, out: &Path, val: usize, test: usize) -> Result<()> {
    if count == 0 {
        bail!(voxseg::Error::Config("--count must be >= 1".into()));
    }
    if val + test > count {
        bail!(voxseg::Error::Config(format!("--val {val} plus --test {test} exceed --count {count}")));
    }
    create_dir(out)?;
    let train = count - val - test;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let (image, mask) = generate_phantom(&PhantomSpec::new(mix_seed(seed, i as u64), dims))?;
        let stem = format!("phantom_{i:03}");
        write_volume(&out.join(&stem), &image, VolumeKind::Image)?;
        write_mask(&out.join(format!("{stem}_mask")), &mask)?;
        let split = if i < train {
            Split::Train
        } else if i < train + val {
            Split::Validation
        } else {
            Split::Test
        };
        entries.push(ManifestEntry {
            image_path: stem.clone().into(),
            annotation_paths: vec![format!("{stem}_mask").into()],
            split,
            author_tags: vec!["phantom".into()],
        });
    }
    let manifest = out.join("manifest.jsonl");
    write_manifest(&manifest, &entries)?;
    println!("{}", json!({"manifest": manifest, "count": count, "train": train, "validation": val, "test": test}));
    Ok(())
}

fn augment(manifest: &Path, multiplicity: usize, seed: u64, out: &Path, dims: Option<Dims>) -> Result<()> {
    let m = read_manifest(manifest)?;
    let train = m.split(Split::Train);
    if train.is_empty() {
        bail!(voxseg::Error::Config(format!("{} has no training entries", manifest.display())));
    }
    let mut sources = Vec::with_capacity(train.len());
    for e in &train {
        let image = read_image(&e.image)?;
        let masks = e.annotations.iter().map(|a| read_mask(a)).collect::<voxseg::Result<Vec<_>>>()?;
        let mask = voxseg::train::consensus_mask(&masks)?;
        sources.push((image, mask));
    }
    let target = match dims {
        Some(d) => d,
        None => {
            let d = sources[0].0.dims();
            if let Some((i, _)) = sources.iter().enumerate().find(|(_, s)| s.0.dims() != d) {
                bail!(voxseg::Error::Config(format!(
                    "training volumes differ in extents ({} vs {} at {}); pass --dims",
                    d,
                    sources[i].0.dims(),
                    train[i].image.display()
                )));
            }
            d
        }
    };
    let cfg = AugmentConfig {
        multiplicity,
        ..Default::default()
    };
    let items = build_augmented_dataset(&sources, &cfg, seed, target)?;
    create_dir(out)?;
    let mut entries = Vec::with_capacity(items.len());
    let mut log = String::new();
    for (n, item) in items.iter().enumerate() {
        let stem = format!("aug_{:03}_{:03}", item.source, n % multiplicity);
        write_volume(&out.join(&stem), &item.image, VolumeKind::Image)?;
        write_mask(&out.join(format!("{stem}_target")), &item.target)?;
        entries.push(ManifestEntry {
            image_path: stem.clone().into(),
            annotation_paths: vec![format!("{stem}_target").into()],
            split: Split::Train,
            author_tags: train[item.source].author_tags.clone(),
        });
        log.push_str(&json!({"item": stem, "source": train[item.source].image, "seed": item.seed, "spec": item.spec}).to_string());
        log.push('\n');
    }
    write_manifest(&out.join("manifest.jsonl"), &entries)?;
    let log_path = out.join("augment_log.jsonl");
    fs::write(&log_path, log).map_err(|e| voxseg::Error::io(&log_path, e))?;
    println!("{}", json!({"items": items.len(), "dims": target.to_string(), "manifest": out.join("manifest.jsonl")}));
    Ok(())
}

fn gradcheck<T: Real>(seeds: u64, primitives_only: bool, label: &str) -> Result<()> {
    let tol = Tolerance::for_type::<T>();
    let mut failed = Vec::new();
    for name in PRIMITIVES {
        let mut worst = 0.0f64;
        for s in 0..seeds {
            let r = check_primitive::<T>(name, s, &tol)?;
            if !r.passed(&tol) {
                failed.push(format!("{name}[seed {s}]"));
            }
            worst = worst.max(r.max_rel_error);
        }
        println!("{label} {name:<20} seeds {seeds:>3} max_rel_error {worst:.3e} {}", verdict(worst < tol.bound));
    }
    if !primitives_only {
        let r = check_model::<T>(0, 2, tol.model_step, &tol)?;
        println!(
            "{label} {:<20} elements {} max_rel_error {:.3e} {}",
            r.name,
            r.elements,
            r.max_rel_error,
            verdict(r.passed(&tol))
        );
        if !r.passed(&tol) {
            failed.push(r.name);
        }
    }
    if !failed.is_empty() {
        bail!("gradient check above {:e}: {}", tol.bound, failed.join(", "));
    }
    Ok(())
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAIL"
    }
}
