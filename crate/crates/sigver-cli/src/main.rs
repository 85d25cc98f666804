//! Command-line interface for the signature verification pipeline.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use sigver::dataset::{generate_synthetic, SignatureDataset, SynthConfig};
use sigver::embed::{train_network, Network, TrainConfig, UserImages};
use sigver::eval::{
    write_det_csv, write_eer_json, write_grid_csv, write_scores_csv, Evaluator, ForgeryMode,
    GridSpec, Protocol, RefSelection, System,
};
use sigver::ged::{dissimilarity_ged, CostParams};
use sigver::graph::{build_graph, GraphExtractionParams};
use sigver::lsap::{solve, CostMatrix};
use sigver::preprocess::{binarize, skeletonize};
use sigver::raster::GrayImage;

#[derive(Parser)]
#[command(name = "sigver", version, about = "Offline signature verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Structural dissimilarity of two signature images (CSV on stdout)
    Ged(GedArgs),
    /// Extract and print the keypoint graph of a signature image
    Graph(GraphArgs),
    /// Solve a linear sum assignment problem from a matrix file
    Lsap { matrix: PathBuf },
    /// Generate a synthetic signature dataset
    GenSynth(GenSynthArgs),
    /// Check a dataset directory against its manifest
    ValidateDataset { root: PathBuf },
    /// Train the embedding network on the genuine signatures of a dataset
    Train(TrainArgs),
    /// Embed a signature image with a trained model (CSV vector on stdout)
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Run a verification protocol and report EER, DET curve and scores
    Evaluate(EvaluateArgs),
    /// Grid search over GED cost parameters on the random-forgery protocol
    GridSearch(GridSearchArgs),
}

#[derive(Args)]
struct GedArgs {
    img1: PathBuf,
    img2: PathBuf,
    #[arg(long, default_value_t = 25.0)]
    c_node: f64,
    #[arg(long, default_value_t = 45.0)]
    c_edge: f64,
    /// Keypoint sampling interval in pixels
    #[arg(long, default_value_t = 25.0)]
    sampling_d: f64,
    /// Write intermediate binary and skeleton masks as PNGs
    #[arg(long)]
    dump_masks: Option<PathBuf>,
}

#[derive(Args)]
struct GraphArgs {
    image: PathBuf,
    #[arg(long, default_value_t = 25.0)]
    sampling_d: f64,
    #[arg(long, value_enum, default_value_t = GraphFormat::Text)]
    format: GraphFormat,
}

#[derive(Clone, Copy, ValueEnum)]
enum GraphFormat {
    Text,
    Gxl,
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long)]
    users: usize,
    #[arg(long)]
    genuine: usize,
    #[arg(long)]
    forgeries: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    strokes: usize,
    #[arg(long, default_value_t = 1.2)]
    jitter: f64,
    #[arg(long, default_value_t = 4.0)]
    forgery_noise: f64,
    #[arg(long, default_value_t = 160)]
    canvas_width: usize,
    #[arg(long, default_value_t = 100)]
    canvas_height: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Flat key=value hyperparameter file; defaults apply if omitted
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    R5,
    R10,
}

#[derive(Clone, Copy, ValueEnum)]
enum ForgeryArg {
    Sf,
    Rf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SystemArg {
    Ged,
    Neural,
    Mcs,
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectionArg {
    First,
    Random,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    protocol: ProtocolArg,
    #[arg(long, value_enum)]
    forgeries: ForgeryArg,
    #[arg(long, value_enum)]
    system: SystemArg,
    #[arg(long, default_value_t = 1)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Reference selection; defaults to `first` for a single run and
    /// `random` when runs > 1
    #[arg(long, value_enum)]
    selection: Option<SelectionArg>,
    /// Trained model file (required for neural and mcs)
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 25.0)]
    c_node: f64,
    #[arg(long, default_value_t = 45.0)]
    c_edge: f64,
    #[arg(long, default_value_t = 25.0)]
    sampling_d: f64,
    /// Pairwise score cache file, loaded if present and updated on exit
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Apply a-posteriori user-dependent score normalization before the
    /// pooled EER
    #[arg(long)]
    user_norm: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GridSearchArgs {
    #[arg(long)]
    data: PathBuf,
    /// Grid file: two lines of values (c_node candidates, c_edge
    /// candidates); the standard 11x11 grid if omitted
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ProtocolArg::R5)]
    protocol: ProtocolArg,
    #[arg(long, default_value_t = 1)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 25.0)]
    sampling_d: f64,
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Ged(args) => cmd_ged(args),
        Command::Graph(args) => cmd_graph(args),
        Command::Lsap { matrix } => cmd_lsap(&matrix),
        Command::GenSynth(args) => cmd_gen_synth(args),
        Command::ValidateDataset { root } => cmd_validate(&root),
        Command::Train(args) => cmd_train(args),
        Command::Embed { model, image } => cmd_embed(&model, &image),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::GridSearch(args) => cmd_grid_search(args),
    }
}

fn cmd_ged(args: GedArgs) -> Result<()> {
    let img1 = GrayImage::load_png(&args.img1)
        .with_context(|| format!("reading {}", args.img1.display()))?;
    let img2 = GrayImage::load_png(&args.img2)
        .with_context(|| format!("reading {}", args.img2.display()))?;

    if let Some(dir) = &args.dump_masks {
        std::fs::create_dir_all(dir)?;
        for (img, name) in [(&img1, "img1"), (&img2, "img2")] {
            let binary = binarize(img);
            let skeleton = skeletonize(&binary);
            binary.save_png(&dir.join(format!("{name}_binary.png")))?;
            skeleton.save_png(&dir.join(format!("{name}_skeleton.png")))?;
        }
    }

    let result = dissimilarity_ged(
        &img1,
        &img2,
        &CostParams::new(args.c_node, args.c_edge),
        &GraphExtractionParams::new(args.sampling_d),
    );
    println!("lower_bound,max_ged,normalized");
    println!("{},{},{}", result.lower_bound, result.max_ged, result.normalized);
    if result.degenerate {
        eprintln!("warning: at least one image produced an empty keypoint graph");
    }
    Ok(())
}

fn cmd_graph(args: GraphArgs) -> Result<()> {
    let img = GrayImage::load_png(&args.image)?;
    let skeleton = skeletonize(&binarize(&img));
    let graph = build_graph(&skeleton, &GraphExtractionParams::new(args.sampling_d));
    match args.format {
        GraphFormat::Text => print!("{}", graph.to_text()),
        GraphFormat::Gxl => {
            let id = args
                .image
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "graph".into());
            print!("{}", graph.to_gxl(&id));
        }
    }
    Ok(())
}

fn cmd_lsap(path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path)?;
    let values: Vec<f64> = text
        .split_whitespace()
        .map(|tok| {
            if tok.eq_ignore_ascii_case("inf") {
                Ok(f64::INFINITY)
            } else {
                tok.parse::<f64>()
                    .with_context(|| format!("bad matrix entry {tok}"))
            }
        })
        .collect::<Result<_>>()?;
    let n = (values.len() as f64).sqrt().round() as usize;
    if n * n != values.len() {
        bail!("matrix file has {} entries, not a square count", values.len());
    }
    let assignment = solve(&CostMatrix::new(n, values)?)?;
    println!("{}", assignment.total_cost);
    Ok(())
}

fn cmd_gen_synth(args: GenSynthArgs) -> Result<()> {
    let config = SynthConfig {
        users: args.users,
        genuine_per_user: args.genuine,
        skilled_per_user: args.forgeries,
        strokes: args.strokes,
        jitter: args.jitter,
        forgery_noise: args.forgery_noise,
        canvas_width: args.canvas_width,
        canvas_height: args.canvas_height,
        seed: args.seed,
    };
    let dataset = generate_synthetic(&config, &args.out)?;
    println!(
        "wrote {} users ({} genuine, {} skilled forgeries) to {}",
        dataset.user_count(),
        dataset.genuine_count(),
        dataset.forgery_count(),
        args.out.display()
    );
    Ok(())
}

fn cmd_validate(root: &Path) -> Result<()> {
    let dataset = SignatureDataset::load(root)?;
    println!(
        "ok: {} users, {} genuine, {} skilled forgeries",
        dataset.user_count(),
        dataset.genuine_count(),
        dataset.forgery_count()
    );
    Ok(())
}

fn load_training_data(root: &Path) -> Result<Vec<UserImages>> {
    let dataset = SignatureDataset::load(root)?;
    dataset
        .users
        .iter()
        .map(|user| {
            let images = user
                .genuine
                .iter()
                .map(|p| GrayImage::load_png(p).map_err(anyhow::Error::from))
                .collect::<Result<Vec<_>>>()?;
            Ok(UserImages {
                user: user.id.clone(),
                images,
            })
        })
        .collect()
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let config = match &args.config {
        Some(path) => TrainConfig::from_key_value(&std::fs::read_to_string(path)?)?,
        None => TrainConfig::default(),
    };
    let data = load_training_data(&args.data)?;
    let mut network = Network::default_architecture();
    network.init_params(config.seed);
    let (model, report) = train_network(network, &data, &config)?;
    eprintln!("epoch 0 (untrained): val loss {:.6}", report.val_losses[0]);
    for (e, (train, val)) in report
        .train_losses
        .iter()
        .zip(&report.val_losses[1..])
        .enumerate()
    {
        eprintln!("epoch {}: train loss {train:.6}, val loss {val:.6}", e + 1);
    }
    eprintln!(
        "best validation loss {:.6} at epoch {}",
        report.val_losses[report.best_epoch],
        report.best_epoch
    );
    model.save(&args.out, Some(&config), Some(config.seed))?;
    println!("saved model to {}", args.out.display());
    Ok(())
}

fn cmd_embed(model_path: &Path, image_path: &Path) -> Result<()> {
    let (model, _) = Network::load(model_path)?;
    let image = GrayImage::load_png(image_path)?;
    let embedding = model.embed(&image);
    let rendered: Vec<String> = embedding.iter().map(|v| v.to_string()).collect();
    println!("{}", rendered.join(","));
    Ok(())
}

fn build_protocol(
    protocol: ProtocolArg,
    forgeries: ForgeryArg,
    runs: usize,
    seed: u64,
    selection: Option<SelectionArg>,
) -> Protocol {
    let selection = selection.unwrap_or(if runs > 1 {
        SelectionArg::Random
    } else {
        SelectionArg::First
    });
    Protocol {
        reference_count: match protocol {
            ProtocolArg::R5 => 5,
            ProtocolArg::R10 => 10,
        },
        forgery_mode: match forgeries {
            ForgeryArg::Sf => ForgeryMode::Skilled,
            ForgeryArg::Rf => ForgeryMode::Random,
        },
        reference_selection: match selection {
            SelectionArg::First => RefSelection::FirstK,
            SelectionArg::Random => RefSelection::RandomSeeded,
        },
        runs,
        seed,
    }
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let dataset = SignatureDataset::load(&args.data)?;
    let model = args
        .model
        .as_ref()
        .map(|p| Network::load(p).map(|(m, _)| m))
        .transpose()?;
    let system = match args.system {
        SystemArg::Ged => System::Ged,
        SystemArg::Neural => System::Neural,
        SystemArg::Mcs => System::Mcs,
    };
    if system != System::Ged && model.is_none() {
        bail!("--model is required for the neural and mcs systems");
    }
    let protocol = build_protocol(
        args.protocol,
        args.forgeries,
        args.runs,
        args.seed,
        args.selection,
    );
    let cost = CostParams::new(args.c_node, args.c_edge);
    let extraction = GraphExtractionParams::new(args.sampling_d);

    let mut evaluator = Evaluator::new(&dataset, extraction, model.as_ref());
    if let Some(cache) = &args.cache {
        if cache.is_file() {
            let n = evaluator.load_cache(cache)?;
            eprintln!("loaded {n} cached pair scores");
        }
    }

    let result =
        evaluator.run_protocol_with_options(&protocol, system, &cost, args.user_norm)?;
    std::fs::create_dir_all(&args.out)?;
    let protocol_name = format!(
        "{}-{}{}",
        match args.protocol {
            ProtocolArg::R5 => "r5",
            ProtocolArg::R10 => "r10",
        },
        match args.forgeries {
            ForgeryArg::Sf => "sf",
            ForgeryArg::Rf => "rf",
        },
        if args.user_norm { "-usernorm" } else { "" }
    );
    let system_name = match args.system {
        SystemArg::Ged => "ged",
        SystemArg::Neural => "neural",
        SystemArg::Mcs => "mcs",
    };
    write_eer_json(&args.out.join("eer.json"), &result, system_name, &protocol_name)?;
    write_det_csv(&args.out.join("det.csv"), &result.det)?;
    let rows = evaluator.score_rows(&protocol, &cost)?;
    write_scores_csv(&args.out.join("scores.csv"), &rows)?;
    if let Some(cache) = &args.cache {
        evaluator.save_cache(cache)?;
    }

    println!(
        "{system_name} {protocol_name}: EER {:.4} over {} run(s)",
        result.eer,
        result.per_run_eers.len()
    );
    Ok(())
}

fn cmd_grid_search(args: GridSearchArgs) -> Result<()> {
    let dataset = SignatureDataset::load(&args.data)?;
    let grid = match &args.grid {
        Some(path) => GridSpec::parse(&std::fs::read_to_string(path)?)?,
        None => GridSpec::standard(),
    };
    let protocol = build_protocol(args.protocol, ForgeryArg::Rf, args.runs, args.seed, None);
    let extraction = GraphExtractionParams::new(args.sampling_d);
    let mut evaluator = Evaluator::new(&dataset, extraction, None);
    if let Some(cache) = &args.cache {
        if cache.is_file() {
            evaluator.load_cache(cache)?;
        }
    }
    let result = evaluator.grid_search(&grid, &protocol)?;
    std::fs::create_dir_all(&args.out)?;
    write_grid_csv(&args.out.join("grid.csv"), &result)?;
    if let Some(cache) = &args.cache {
        evaluator.save_cache(cache)?;
    }
    println!(
        "best: c_node = {}, c_edge = {} (EER {:.4}) over {} cells",
        result.best.c_node,
        result.best.c_edge,
        result.best.eer,
        result.cells.len()
    );
    Ok(())
}
