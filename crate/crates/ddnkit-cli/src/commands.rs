use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use ddnkit::ads::{
    attach_aux_branch, place_ads, AdsPlacement, AttachmentPlan, GraphExtensionProber,
    PLACEMENT_CSV_HEADER,
};
use ddnkit::data::{
    atomic_write, csv_string, generate_synthetic, read_dataset, read_mask_dir, read_pgm,
    write_dataset, write_pgm, Raster, SegSample, ShapeKind, SyntheticConfig,
};
use ddnkit::erf::{emit_heatmap, measure_layers, GradMap, LerfReport, ProbeConfig};
use ddnkit::netspec::{build_graph, parse_spec, ComputeGraph, NetworkSpec};
use ddnkit::objsize::{estimate_obj, Connectivity, MaskImage};
use ddnkit::training::{
    evaluate, load_checkpoint, predict_labels, train, TrainConfig, METRICS_CSV_HEADER,
};
use ddnkit::{Error, Result};

#[derive(Parser)]
#[command(
    name = "ddnkit",
    version,
    about = "Densely decoded segmentation networks with adaptive deep supervision"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ConnArg {
    #[value(name = "4")]
    Four,
    #[value(name = "8")]
    Eight,
}

impl From<ConnArg> for Connectivity {
    fn from(c: ConnArg) -> Self {
        match c {
            ConnArg::Four => Connectivity::Four,
            ConnArg::Eight => Connectivity::Eight,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum KindArg {
    Disc,
    Ellipse,
    Blob,
}

#[derive(Subcommand)]
pub enum Command {
    /// Measure per-layer effective receptive fields and write the report CSV
    AnalyzeRf {
        /// Network description file
        #[arg(long)]
        spec: PathBuf,
        /// Probe input side (default: smallest that fits the deepest layer)
        #[arg(long)]
        input_size: Option<usize>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        /// Gradient-mass fraction kept by the threshold
        #[arg(long, default_value_t = 0.9545)]
        mass: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report CSV path (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for per-trial heatmaps (PGM + CSV per layer and trial)
        #[arg(long)]
        heatmaps: Option<PathBuf>,
        /// Probe the all-positive linear copy (identity activations,
        /// average pooling): deterministic, equals the analytic support
        /// at --mass 1.0
        #[arg(long)]
        linearized: bool,
    },
    /// Estimate the dataset-characteristic object size from a mask directory
    EstimateObj {
        #[arg(long)]
        masks: PathBuf,
        #[arg(long, value_enum, default_value = "8")]
        connectivity: ConnArg,
        #[arg(long, default_value_t = 4)]
        min_area: usize,
        /// CSV path (stdout summary is always printed)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Route the supervision case from a report and an object size
    PlaceAds {
        /// Report CSV from analyze-rf
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        obj: f64,
        /// Network description; required when routing lands in Case-2
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0.9545)]
        mass: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a network on an images/ + masks/ dataset directory
    Train {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Training config file (`key value` lines)
        #[arg(long)]
        config: Option<PathBuf>,
        /// auto | off | case1:<layer> | case2:<stacked>
        #[arg(long, default_value = "off")]
        ads: String,
        /// Output directory (log.csv, best.ddnk, placement.csv)
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config-file seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a dataset directory
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segment a single image with a checkpoint
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Generate a synthetic dataset directory
    GenData {
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, value_enum, default_value = "blob")]
        kind: KindArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn load_spec(path: &Path) -> Result<NetworkSpec> {
    parse_spec(&read_to_string(path)?)
}

fn build_from_spec(path: &Path, seed: u64) -> Result<ComputeGraph> {
    let spec = load_spec(path)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    build_graph(&spec, &mut rng)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::AnalyzeRf {
            spec,
            input_size,
            trials,
            mass,
            seed,
            out,
            heatmaps,
            linearized,
        } => analyze_rf(&spec, input_size, trials, mass, seed, out, heatmaps, linearized),
        Command::EstimateObj {
            masks,
            connectivity,
            min_area,
            out,
        } => estimate_obj_cmd(&masks, connectivity.into(), min_area, out),
        Command::PlaceAds {
            report,
            obj,
            spec,
            trials,
            mass,
            seed,
            out,
        } => place_ads_cmd(&report, obj, spec.as_deref(), trials, mass, seed, out),
        Command::Train {
            spec,
            data,
            config,
            ads,
            out,
            seed,
        } => train_cmd(&spec, &data, config.as_deref(), &ads, &out, seed),
        Command::Eval {
            checkpoint,
            data,
            threshold,
            out,
        } => eval_cmd(&checkpoint, &data, threshold, out),
        Command::Predict {
            checkpoint,
            image,
            out,
            threshold,
        } => predict_cmd(&checkpoint, &image, &out, threshold),
        Command::GenData {
            count,
            size,
            kind,
            seed,
            out,
        } => gen_data_cmd(count, size, kind, seed, &out),
    }
}

#[allow(clippy::too_many_arguments)]
fn analyze_rf(
    spec: &Path,
    input_size: Option<usize>,
    trials: usize,
    mass: f64,
    seed: u64,
    out: Option<PathBuf>,
    heatmaps: Option<PathBuf>,
    linearized: bool,
) -> Result<()> {
    let mut graph = build_from_spec(spec, seed)?;
    if linearized {
        graph = graph.linearize();
    }
    let input_size = input_size.unwrap_or_else(|| ddnkit::erf::default_input_size(&graph));
    let cfg = ProbeConfig::new(trials, mass, input_size, seed);
    let mut captured: Vec<(usize, usize, GradMap)> = Vec::new();
    let report = if heatmaps.is_some() {
        measure_layers(&graph, &cfg, Some(&mut captured))?
    } else {
        measure_layers(&graph, &cfg, None)?
    };
    let csv = report.to_csv();
    match out {
        Some(path) => {
            atomic_write(&path, csv.as_bytes())?;
            println!("wrote {} ({} layers)", path.display(), report.entries.len());
        }
        None => print!("{csv}"),
    }
    if let Some(dir) = heatmaps {
        for (layer, trial, map) in &captured {
            let stem = format!("layer{layer:02}_trial{trial:02}");
            emit_heatmap(
                map,
                &dir.join(format!("{stem}.pgm")),
                &dir.join(format!("{stem}.csv")),
            )?;
        }
        println!("wrote {} heatmaps to {}", captured.len(), dir.display());
    }
    Ok(())
}

fn estimate_obj_cmd(
    masks: &Path,
    connectivity: Connectivity,
    min_area: usize,
    out: Option<PathBuf>,
) -> Result<()> {
    let mask_images: Vec<MaskImage> = read_mask_dir(masks)?;
    if mask_images.is_empty() {
        return Err(Error::EmptyDataset { min_area });
    }
    let est = estimate_obj(&mask_images, connectivity, min_area)?;
    let header = ["obj", "num_images", "num_objects", "connectivity", "min_area"];
    let row = vec![
        format!("{}", est.obj),
        est.num_images.to_string(),
        est.num_objects.to_string(),
        est.connectivity.to_string(),
        est.min_area.to_string(),
    ];
    let csv = csv_string(&header, &[row]);
    if let Some(path) = out {
        atomic_write(&path, csv.as_bytes())?;
    } else {
        print!("{csv}");
    }
    println!(
        "Obj={:.2} over {} images ({} objects, {}-connectivity, min_area {})",
        est.obj, est.num_images, est.num_objects, est.connectivity, est.min_area
    );
    Ok(())
}

fn place_ads_cmd(
    report_path: &Path,
    obj: f64,
    spec: Option<&Path>,
    trials: usize,
    mass: f64,
    seed: u64,
    out: Option<PathBuf>,
) -> Result<()> {
    let report = LerfReport::from_csv(&read_to_string(report_path)?)?;
    let graph = match spec {
        Some(path) => Some(build_from_spec(path, seed)?),
        None => None,
    };
    let placement = if report.network_lerf() >= obj {
        // Case-1 needs no extension probes.
        place_ads(&report, obj, &mut ddnkit::ads::TableProber(Vec::new()))?
    } else {
        let graph = graph.as_ref().ok_or_else(|| Error::BadOperand {
            op: "place-ads",
            msg: format!(
                "network LERF {:.2} < obj {obj}: Case-2 needs --spec to probe extended tails",
                report.network_lerf()
            ),
        })?;
        let mut prober = GraphExtensionProber {
            graph,
            trials,
            mass,
            seed,
        };
        place_ads(&report, obj, &mut prober)?
    };
    emit_placement(&placement, out)
}

fn emit_placement(placement: &AdsPlacement, out: Option<PathBuf>) -> Result<()> {
    let csv = format!("{PLACEMENT_CSV_HEADER}\n{}\n", placement.to_csv_row());
    if let Some(path) = out {
        atomic_write(&path, csv.as_bytes())?;
    } else {
        print!("{csv}");
    }
    println!("{}", placement.rationale());
    Ok(())
}

fn parse_ads_flag(value: &str) -> Result<AdsMode> {
    if value == "auto" {
        return Ok(AdsMode::Auto);
    }
    if value == "off" {
        return Ok(AdsMode::Off);
    }
    if let Some(rest) = value.strip_prefix("case1:") {
        if let Ok(h) = rest.parse::<usize>() {
            return Ok(AdsMode::Case1(h));
        }
    }
    if let Some(rest) = value.strip_prefix("case2:") {
        if let Ok(k) = rest.parse::<usize>() {
            return Ok(AdsMode::Case2(k));
        }
    }
    Err(Error::BadOperand {
        op: "train",
        msg: format!("bad --ads value `{value}` (auto|off|case1:<h>|case2:<k>)"),
    })
}

enum AdsMode {
    Auto,
    Off,
    Case1(usize),
    Case2(usize),
}

fn train_cmd(
    spec: &Path,
    data: &Path,
    config: Option<&Path>,
    ads: &str,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let ads = parse_ads_flag(ads)?;
    let mut cfg = match config {
        Some(path) => TrainConfig::from_text(&read_to_string(path)?)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let samples = read_dataset(data)?;
    if samples.is_empty() {
        return Err(Error::BadOperand {
            op: "train",
            msg: format!("no samples under {}", data.display()),
        });
    }
    let mut graph = build_from_spec(spec, cfg.seed)?;
    let mut attach_rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0xADF0_0001);

    match ads {
        AdsMode::Off => {}
        AdsMode::Case1(h) => {
            let placement = manual_placement(AttachmentPlan::DecoderHeadForLayer(h));
            attach_aux_branch(&mut graph, &placement, &mut attach_rng)?;
            println!("aux branch: case1 target layer {h}");
        }
        AdsMode::Case2(k) => {
            let placement = manual_placement(AttachmentPlan::EncoderTail(k));
            attach_aux_branch(&mut graph, &placement, &mut attach_rng)?;
            println!("aux branch: case2 stacked {k}");
        }
        AdsMode::Auto => {
            let masks: Vec<MaskImage> = samples.iter().map(|s| s.mask.clone()).collect();
            let est = estimate_obj(&masks, Connectivity::Eight, ddnkit::objsize::DEFAULT_MIN_AREA)?;
            let probe_cfg = ProbeConfig::for_graph(&graph, cfg.seed);
            let report = measure_layers(&graph, &probe_cfg, None)?;
            let mut prober = GraphExtensionProber::new(&graph, &report);
            let placement = place_ads(&report, est.obj, &mut prober)?;
            attach_aux_branch(&mut graph, &placement, &mut attach_rng)?;
            println!("{}", placement.rationale());
            let placement_csv =
                format!("{PLACEMENT_CSV_HEADER}\n{}\n", placement.to_csv_row());
            atomic_write(&out.join("placement.csv"), placement_csv.as_bytes())?;
            atomic_write(&out.join("report.csv"), report.to_csv().as_bytes())?;
        }
    }

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ckpt = out.join("best.ddnk");
    let outcome = train(&mut graph, &samples, &cfg, Some(&ckpt))?;
    atomic_write(&out.join("log.csv"), outcome.log_csv().as_bytes())?;
    let last = outcome.log.last().expect("at least one epoch");
    println!(
        "trained {} epochs; best val dice {:.4} at epoch {}; final val dice {:.4}",
        outcome.log.len(),
        outcome.best_val_dice,
        outcome.best_epoch,
        last.val.dice
    );
    println!("wrote {} and {}", out.join("log.csv").display(), ckpt.display());
    Ok(())
}

fn manual_placement(plan: AttachmentPlan) -> AdsPlacement {
    let (case, target_layer, stacked_layers) = match plan {
        AttachmentPlan::DecoderHeadForLayer(h) => (ddnkit::ads::AdsCase::One, Some(h), None),
        AttachmentPlan::EncoderTail(k) => (ddnkit::ads::AdsCase::Two, None, Some(k)),
    };
    AdsPlacement {
        case,
        target_layer,
        stacked_layers,
        attachment: plan,
        match_residual: f64::NAN,
        obj: f64::NAN,
        network_lerf: f64::NAN,
    }
}

fn eval_cmd(checkpoint: &Path, data: &Path, threshold: f64, out: Option<PathBuf>) -> Result<()> {
    let graph = load_checkpoint(checkpoint)?;
    let samples = read_dataset(data)?;
    let (aggregate, per_image) = evaluate(&graph, &samples, threshold)?;
    let mut header = vec!["id"];
    header.extend(METRICS_CSV_HEADER);
    let mut rows: Vec<Vec<String>> = Vec::with_capacity(per_image.len() + 1);
    for (s, m) in samples.iter().zip(&per_image) {
        let mut row = vec![s.id.clone()];
        row.extend(m.csv_row());
        rows.push(row);
    }
    let mut agg_row = vec!["aggregate".to_string()];
    agg_row.extend(aggregate.csv_row());
    rows.push(agg_row);
    let csv = csv_string(&header, &rows);
    if let Some(path) = out {
        atomic_write(&path, csv.as_bytes())?;
    } else {
        print!("{csv}");
    }
    println!(
        "dice={:.4} jaccard={:.4} meanIU={:.4} over {} images",
        aggregate.dice,
        aggregate.jaccard,
        aggregate.mean_iu,
        per_image.len()
    );
    Ok(())
}

fn predict_cmd(checkpoint: &Path, image: &Path, out: &Path, threshold: f64) -> Result<()> {
    let graph = load_checkpoint(checkpoint)?;
    let raster = read_pgm(image)?;
    let mask = MaskImage::filled(raster.width, raster.height, 0);
    let sample = SegSample::from_rasters("input".into(), &raster, mask)?;
    let labels = predict_labels(&graph, &sample, threshold)?;
    let pixels: Vec<u8> = if graph.spec.num_classes == 1 {
        labels.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect()
    } else {
        labels
    };
    write_pgm(
        out,
        &Raster::new(raster.width, raster.height, pixels)?,
    )?;
    println!("wrote {}", out.display());
    Ok(())
}

fn gen_data_cmd(count: usize, size: usize, kind: KindArg, seed: u64, out: &Path) -> Result<()> {
    let mut cfg = SyntheticConfig::blobs(count, size, seed);
    cfg.kinds = vec![match kind {
        KindArg::Disc => ShapeKind::Disc,
        KindArg::Ellipse => ShapeKind::Ellipse,
        KindArg::Blob => ShapeKind::Blob,
    }];
    let samples = generate_synthetic(&cfg)?;
    write_dataset(out, &samples)?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}
