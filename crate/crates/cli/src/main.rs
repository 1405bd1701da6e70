use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use unia_core::affinity::{
    affinity_from_attention, AffinityConfig, RefineInputs, RefinerRegistry,
};
use unia_core::backbone::CamStack;
use unia_core::pipeline::eval::{write_metrics, METRICS_FILE};
use unia_core::pipeline::gradcheck::{run_suite, TOLERANCE};
use unia_core::pipeline::io::Image;
use unia_core::pipeline::synth::{synth_generate, SyntheticSpec};
use unia_core::pipeline::{evaluate, evaluate_pseudo_labels, infer, train, Config, Dataset, Model};
use unia_core::refine::{contrastive_affinity_loss, mcr, sample_pairs, AffinityLossForm, PseudoMask};
use unia_core::tensor::{read_blob, write_blob};
use unia_core::{Error, Tensor};

/// Exit status for masks whose shapes disagree.
const SHAPE_MISMATCH: u8 = 2;

#[derive(Parser)]
#[command(name = "unia", version, about = "Weakly supervised segmentation with uncertainty-aware pseudo labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic ambiguity dataset.
    SynthGen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        /// Spec fields as `--key value` pairs (size, num-classes, delta, seed, ...).
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Train from a JSON config; any field can follow as `--key value`.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Score a checkpoint on a labelled dataset and write metrics.json.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also score the pseudo labels (raw CAM, each source, refined).
        #[arg(long)]
        pseudo_labels: bool,
    },
    /// Predict one image: mask PGM, overlay PPM and uncertainty PGM.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Refine a class-map blob with a registered refiner.
    Refine {
        /// Blob holding `cam` as `[M × H × W]`.
        #[arg(long)]
        cam: PathBuf,
        /// Blob holding per-block attention `attn.<b>` as `[heads × n × n]`.
        #[arg(long)]
        attention: Option<PathBuf>,
        /// RGB image for the colour-aware refiner.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, default_value = "random-walk")]
        method: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        sinkhorn_iters: Option<usize>,
        #[arg(long)]
        sinkhorn_tol: Option<f64>,
        #[arg(long)]
        rw_iters: Option<usize>,
        #[arg(long)]
        par_iters: Option<usize>,
    },
    /// Merge three masks by mutual complementing.
    Mcr {
        #[arg(long)]
        p1: PathBuf,
        #[arg(long)]
        p2: PathBuf,
        #[arg(long)]
        p3: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Reject labels above this class count.
        #[arg(long)]
        num_classes: Option<usize>,
        /// Affinity blob (`m_aff` as `[n × n]`); reports the affinity loss of the merged mask.
        #[arg(long)]
        affinity: Option<PathBuf>,
        #[arg(long, default_value_t = 0.1)]
        tau: f64,
        #[arg(long, default_value_t = 2048)]
        pair_budget: usize,
        #[arg(long)]
        aff_log: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of every op and of the full objective.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let shape = e.chain().any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::Shape { .. })));
            ExitCode::from(if shape { SHAPE_MISMATCH } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::SynthGen { out, count, overrides } => {
            let mut spec = serde_json::to_value(SyntheticSpec::default())?;
            for (key, value) in pairs(&overrides)? {
                let slot = spec
                    .get_mut(&key)
                    .with_context(|| format!("unknown synth option --{}", key.replace('_', "-")))?;
                *slot = serde_json::from_str(&value).with_context(|| format!("bad value {value:?} for {key}"))?;
            }
            let spec: SyntheticSpec = serde_json::from_value(spec)?;
            synth_generate(&spec, count, &out)?;
            log::info!("wrote {count} samples to {}", out.display());
        }
        Command::Train { config, overrides } => {
            let mut cfg = match config {
                Some(path) => Config::load(&path)?,
                None => Config::default(),
            };
            for (key, value) in pairs(&overrides)? {
                cfg.apply_override(&key, &value)?;
            }
            cfg.apply_seed_env()?;
            let out = train(&cfg)?;
            let last = out.losses.last().expect("at least one iteration");
            println!("final loss {:.6}; checkpoint {}", last.total, out.checkpoint.display());
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            pseudo_labels,
        } => {
            let model = Model::load(&checkpoint)?;
            let dataset = Dataset::load(&data)?;
            let report = evaluate(&model, &dataset)?;
            let path = out.unwrap_or_else(|| checkpoint_dir(&checkpoint).join(METRICS_FILE));
            println!("mIoU {:.4}  DSC {}  CR {}", report.miou, fmt_opt(report.dsc), fmt_opt(report.cr));
            if pseudo_labels {
                let pl = evaluate_pseudo_labels(&model, &dataset)?;
                println!("pseudo labels: raw CAM mIoU {:.4}, refined mIoU {:.4}", pl.raw_cam.miou, pl.refined.miou);
                write_metrics(&path, &serde_json::json!({ "segmentation": report, "pseudo_labels": pl }))?;
            } else {
                write_metrics(&path, &report)?;
            }
            println!("metrics written to {}", path.display());
        }
        Command::Infer { checkpoint, image, out } => {
            let model = Model::load(&checkpoint)?;
            let img = Image::read(&image)?;
            let result = infer(&model, &img)?;
            let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
            result.save(&out, stem)?;
            println!("wrote {stem}_mask.pgm and {stem}_overlay.ppm to {}", out.display());
        }
        Command::Refine {
            cam,
            attention,
            image,
            method,
            out,
            sinkhorn_iters,
            sinkhorn_tol,
            rw_iters,
            par_iters,
        } => {
            let mut cfg = AffinityConfig::default();
            if let Some(v) = sinkhorn_iters {
                cfg.sinkhorn_iters = v;
            }
            if let Some(v) = sinkhorn_tol {
                cfg.sinkhorn_tol = v;
            }
            if let Some(v) = rw_iters {
                cfg.rw_iters = v;
            }
            if let Some(v) = par_iters {
                cfg.par.iters = v;
            }
            cfg.validate()?;
            refine(&cam, attention.as_deref(), image.as_deref(), &method, &cfg, &out)?;
        }
        Command::Mcr {
            p1,
            p2,
            p3,
            out,
            num_classes,
            affinity,
            tau,
            pair_budget,
            aff_log,
            seed,
        } => {
            let masks = [&p1, &p2, &p3]
                .map(|p| Image::read(p).and_then(|img| img.to_mask()).with_context(|| p.display().to_string()));
            let [a, b, c] = masks;
            let (a, b, c) = (a?, b?, c?);
            if let Some(m) = num_classes {
                for mask in [&a, &b, &c] {
                    mask.check_classes(m)?;
                }
            }
            let merged = mcr(&a, &b, &c)?;
            Image::gray(&merged.p).write(&out)?;
            if let Some(path) = affinity {
                let m_aff = single_tensor(&path, "m_aff")?;
                let m_aff = unia_core::affinity::AffinityMatrix::new(m_aff)?;
                let pairs = sample_pairs(&merged.p, &m_aff, pair_budget, seed)?;
                let loss = contrastive_affinity_loss(&pairs, tau, AffinityLossForm::from_flag(aff_log))?;
                println!(
                    "affinity loss {loss:.6} over {} positive / {} negative pairs",
                    pairs.positive.len(),
                    pairs.negative.len()
                );
            }
            println!("wrote {}", out.display());
        }
        Command::Gradcheck { seed } => {
            let report = run_suite(seed)?;
            for r in &report.results {
                let verdict = if r.max_rel_err < TOLERANCE { "ok" } else { "FAIL" };
                println!("{:<24} {:.3e}  {verdict}", r.name, r.max_rel_err);
            }
            println!("max rel err {:.3e} in {:.1}s", report.max_rel_err(), report.seconds);
            if !report.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// `--key value` pairs with the dashes stripped and kebab turned to snake.
fn pairs(args: &[String]) -> Result<Vec<(String, String)>> {
    if args.len() % 2 != 0 {
        bail!("overrides come in `--key value` pairs, got {args:?}");
    }
    args.chunks(2)
        .map(|kv| {
            let key = kv[0]
                .strip_prefix("--")
                .with_context(|| format!("expected --key, got {:?}", kv[0]))?;
            Ok((key.replace('-', "_"), kv[1].clone()))
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

fn checkpoint_dir(path: &Path) -> PathBuf {
    if path.extension().is_some_and(|e| e == "json") {
        path.parent().unwrap_or(Path::new(".")).to_path_buf()
    } else {
        path.to_path_buf()
    }
}

fn single_tensor(path: &Path, name: &str) -> Result<Tensor> {
    let mut blob = read_blob(path)?;
    blob.remove(name)
        .with_context(|| format!("{} has no tensor named {name}", path.display()))
}

fn refine(
    cam: &Path,
    attention: Option<&Path>,
    image: Option<&Path>,
    method: &str,
    cfg: &AffinityConfig,
    out: &Path,
) -> Result<()> {
    let cams = CamStack::new(single_tensor(cam, "cam")?)?;
    let affinity = match attention {
        Some(path) => {
            let blob = read_blob(path)?;
            let blocks: Vec<Tensor> = (0..blob.len())
                .map_while(|b| blob.get(&format!("attn.{b}")).cloned())
                .collect();
            if blocks.is_empty() {
                bail!("{} holds no attn.<block> tensors", path.display());
            }
            let (m_aff, outcome) = affinity_from_attention(&blocks, cfg)?;
            log::info!(
                "sinkhorn: {} iterations, converged: {}",
                outcome.iterations,
                outcome.converged
            );
            Some(m_aff)
        }
        None => None,
    };
    let image = image.map(|p| Image::read(p).and_then(|i| i.to_tensor())).transpose()?;
    let refiner = RefinerRegistry::default().build(method, cfg)?;
    let inputs = RefineInputs {
        affinity: affinity.as_ref(),
        image: image.as_ref(),
    };
    let refined = refiner.refine(&cams, &inputs)?;
    let mut tensors = BTreeMap::new();
    tensors.insert("cam".to_string(), refined.maps.clone());
    write_blob(out, &tensors)?;
    for c in 0..refined.num_classes() {
        let pixels = refined
            .class_map(c)
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let preview = PseudoMask::new(refined.height(), refined.width(), pixels)?;
        Image::gray(&preview).write(&out.join(format!("class{}.pgm", c + 1)))?;
    }
    println!("refined {} class maps with {method} into {}", refined.num_classes(), out.display());
    Ok(())
}
