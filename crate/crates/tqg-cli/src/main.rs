//! `tqg` — build traffic quotient graphs from road extracts, extract
//! spatial-context features, contrastively pre-train the geometric encoder,
//! and train/evaluate the reduced forecaster with spatially gated addition.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use tqg::encoder::{embed_all, node_split, pretrain, write_loss_csv, Encoder};
use tqg::features::{
    apply_scaler, extract_raw_features_indexed, fit_scaler, write_features_csv, AmenityIndex,
    FeatureSpec, ScalerBounds,
};
use tqg::forecaster::{evaluate, train_forecaster, Forecaster, Normalization};
use tqg::nn::{load_checkpoint, save_checkpoint, Tensor2};
use tqg::osm::{load_road_csv, parse_osm_file, write_road_csv, BBox, RoadGraph};
use tqg::quotient::{
    build_quotient, match_sensors, prune_clusters, write_clusters_csv, write_quotient_csv,
    QuotientGraph,
};
use tqg::report::{report, write_metrics_csv, MetricsRow};
use tqg::runner::{run_variant, RunOptions};
use tqg::sensors::{load_sensors, load_speeds, temporal_split, SensorSet, SplitSpec};
use tqg::synth::{generate_city, load_amenities, write_city};
use tqg::variants::{load_variant, VariantConfig};
use tqg::Error;

#[derive(Parser)]
#[command(name = "tqg", version, about, max_term_width = 100)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic city dataset directory
    Synth(SynthArgs),
    /// Build the traffic quotient graph from a road extract and sensor list
    BuildGraph(BuildGraphArgs),
    /// Extract the scaled spatial-context feature matrix for all road nodes
    ExtractFeatures(ExtractArgs),
    /// Contrastively pre-train the geometric encoder
    Pretrain(PretrainArgs),
    /// Train the forecaster (optionally with a pre-trained encoder)
    Train(TrainArgs),
    /// Evaluate a trained forecaster: per-horizon MAE on the test split
    Eval(EvalArgs),
    /// Run the full two-arm protocol for one variant over several seeds
    RunVariant(RunVariantArgs),
    /// Summarize a run directory and render loss-curve SVGs
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 60)]
    sensors: usize,
    /// defaults to 4× the sensor count
    #[arg(long)]
    road_nodes: Option<usize>,
    #[arg(long, default_value_t = 1)]
    days: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildGraphArgs {
    /// OSM XML extract (alternative to --nodes/--edges)
    #[arg(long, conflicts_with_all = ["nodes", "edges"])]
    osm: Option<PathBuf>,
    /// road nodes CSV (with --edges)
    #[arg(long, requires = "edges")]
    nodes: Option<PathBuf>,
    #[arg(long, requires = "nodes")]
    edges: Option<PathBuf>,
    #[arg(long)]
    sensors: PathBuf,
    /// pruning radius ε in coordinate degrees; omit for no pruning
    #[arg(long)]
    epsilon: Option<f64>,
    /// envelope filter for OSM parsing: min_lon,min_lat,max_lon,max_lat
    #[arg(long, value_name = "LON,LAT,LON,LAT")]
    bbox: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExtractArgs {
    /// dataset directory (road_nodes.csv, road_edges.csv, amenities.csv)
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 2)]
    features: usize,
    /// amenity-count radius in coordinate degrees
    #[arg(long, default_value_t = tqg::features::DEFAULT_AMENITY_RADIUS)]
    radius: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    pre_epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// encoder checkpoint prefix from `pretrain`; omit (or --no-sga) for the baseline
    #[arg(long)]
    encoder: Option<PathBuf>,
    #[arg(long, default_value_t = false)]
    no_sga: bool,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 12)]
    s_in: usize,
    #[arg(long, default_value_t = 12)]
    horizon: usize,
    #[arg(long, default_value_t = 16)]
    d_h: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// forecaster checkpoint prefix from `train`
    #[arg(long)]
    model: PathBuf,
    /// encoder checkpoint prefix, required when the model was trained with SGA
    #[arg(long)]
    encoder: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunVariantArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    #[arg(long)]
    out: PathBuf,
    /// dataset directory; omitted = synthesize a city
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    city_seed: u64,
    #[arg(long, default_value_t = 60)]
    sensors: usize,
    #[arg(long)]
    road_nodes: Option<usize>,
    #[arg(long, default_value_t = 1)]
    days: usize,
    #[arg(long, default_value_t = 15)]
    pre_epochs: usize,
    #[arg(long, default_value_t = 15)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    threads: usize,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    run: PathBuf,
}

/// Forecaster sidecar: everything a checkpoint needs beyond raw parameters.
#[derive(Serialize, Deserialize)]
struct ModelMeta {
    n_sensors: usize,
    d_emb: Option<usize>,
    use_sga: bool,
    mean: f64,
    std: f64,
    s_in: usize,
    horizon: usize,
    d_h: usize,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::BuildGraph(a) => build_graph(a),
        Command::ExtractFeatures(a) => extract_features(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::RunVariant(a) => cmd_run_variant(a),
        Command::Report(a) => {
            let summary = report(&a.run)?;
            println!(
                "wrote {} with {} rows",
                a.run.join(tqg::report::SUMMARY_FILE).display(),
                summary.len()
            );
            Ok(())
        }
    }
}

fn synth(a: SynthArgs) -> Result<(), Error> {
    let road_nodes = a.road_nodes.unwrap_or(4 * a.sensors);
    let city = generate_city(a.seed, a.sensors, road_nodes, a.days)?;
    write_city(&city, &a.out)?;
    println!(
        "wrote {} ({} sensors, {} road nodes, {} timesteps)",
        a.out.display(),
        city.sensors.len(),
        city.road.nodes().len(),
        city.speeds.len()
    );
    Ok(())
}

fn parse_bbox(s: &str) -> Result<BBox, Error> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| Error::BadConfig(format!("bad bbox `{s}`")))?;
    if parts.len() != 4 {
        return Err(Error::BadConfig("bbox needs four numbers".into()));
    }
    Ok(BBox {
        min_lon: parts[0],
        min_lat: parts[1],
        max_lon: parts[2],
        max_lat: parts[3],
    })
}

fn build_graph(a: BuildGraphArgs) -> Result<(), Error> {
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(a.out.display().to_string(), e))?;
    let sensors = load_sensors(&a.sensors)?;
    let road: RoadGraph = match (&a.osm, &a.nodes, &a.edges) {
        (Some(osm), _, _) => {
            let bbox = a.bbox.as_deref().map(parse_bbox).transpose()?;
            let (road, amenities) = parse_osm_file(osm, bbox)?;
            write_road_csv(
                &road,
                &a.out.join("road_nodes.csv"),
                &a.out.join("road_edges.csv"),
            )?;
            tqg::synth::write_amenities(&amenities, &a.out.join("amenities.csv"))?;
            road
        }
        (None, Some(nodes), Some(edges)) => load_road_csv(nodes, edges)?,
        _ => {
            return Err(Error::BadConfig(
                "give either --osm or both --nodes and --edges".into(),
            ))
        }
    };
    let clusters = match_sensors(&road, &sensors)?;
    let mut q = build_quotient(&road, &clusters);
    if let Some(eps) = a.epsilon {
        q = prune_clusters(&q, &road, &sensors, eps);
    }
    write_quotient_csv(&q, &sensors, &a.out.join("quotient.csv"))?;
    write_clusters_csv(&q, &road, &sensors, &a.out.join("clusters.csv"))?;
    println!(
        "quotient: {} nodes, {} edges, {} isolated",
        q.n(),
        q.edge_count(),
        q.isolated_nodes().len()
    );
    Ok(())
}

fn extract_features(a: ExtractArgs) -> Result<(), Error> {
    let road = load_road_csv(
        &a.data.join("road_nodes.csv"),
        &a.data.join("road_edges.csv"),
    )?;
    let amenities = load_amenities(&a.data.join("amenities.csv"))?;
    let spec = FeatureSpec::new(
        tqg::features::FEATURE_ORDER[..a.features].to_vec(),
        a.radius,
    )?;
    let index = AmenityIndex::build(&amenities, spec.amenity_radius);
    let ids: Vec<i64> = road.nodes().iter().map(|n| n.id).collect();
    let raw = extract_raw_features_indexed(&road, &index, &ids, &spec)?;
    let bounds = fit_scaler(&raw);
    let scaled = apply_scaler(&raw, &bounds)?;
    write_features_csv(&scaled, &spec, &a.out)?;
    println!("wrote {} ({} rows × {} features)", a.out.display(), ids.len(), a.features);
    Ok(())
}

struct Dataset {
    road: RoadGraph,
    sensors: SensorSet,
    quotient: QuotientGraph,
    spec: FeatureSpec,
    index: AmenityIndex,
    bounds: ScalerBounds,
}

fn load_dataset(dir: &PathBuf, cfg: &VariantConfig) -> Result<Dataset, Error> {
    let road = load_road_csv(&dir.join("road_nodes.csv"), &dir.join("road_edges.csv"))?;
    let sensors = load_sensors(&dir.join("sensors.csv"))?;
    let amenities = load_amenities(&dir.join("amenities.csv"))?;
    let clusters = match_sensors(&road, &sensors)?;
    let q = build_quotient(&road, &clusters);
    let quotient = prune_clusters(&q, &road, &sensors, cfg.epsilon);
    let spec = cfg.feature_spec()?;
    let index = AmenityIndex::build(&amenities, spec.amenity_radius);
    let ids: Vec<i64> = road.nodes().iter().map(|n| n.id).collect();
    let raw = extract_raw_features_indexed(&road, &index, &ids, &spec)?;
    let bounds = fit_scaler(&raw);
    Ok(Dataset {
        road,
        sensors,
        quotient,
        spec,
        index,
        bounds,
    })
}

fn cmd_pretrain(a: PretrainArgs) -> Result<(), Error> {
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(a.out.display().to_string(), e))?;
    let cfg = load_variant(&a.config)?;
    let ds = load_dataset(&a.data, &cfg)?;
    let enc_cfg = tqg::encoder::EncoderConfig {
        batch_b: a.batch,
        pre_epochs: a.pre_epochs,
        ..cfg.encoder_config()
    };
    let split = node_split(ds.quotient.n(), a.seed);
    let (encoder, history) = pretrain(
        &ds.quotient,
        &ds.road,
        &ds.index,
        &ds.spec,
        &ds.bounds,
        enc_cfg,
        &split,
        a.seed,
    )?;
    let prefix = a.out.join(format!("encoder_{}", a.seed));
    save_checkpoint(&encoder.params, &prefix)?;
    write_loss_csv(&history, &a.out.join(format!("encoder_loss_{}.csv", a.seed)))?;
    let best = history.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    println!("saved {} (best val loss {best:.6})", prefix.display());
    Ok(())
}

fn load_encoder(cfg: &VariantConfig, prefix: &PathBuf) -> Result<Encoder, Error> {
    let params = load_checkpoint(prefix)?;
    let mut encoder = Encoder::init(cfg.encoder_config(), 0);
    for name in params.names().map(String::from).collect::<Vec<_>>() {
        encoder.params.set(&name, params.get(&name).clone());
    }
    Ok(encoder)
}

fn cmd_train(a: TrainArgs) -> Result<(), Error> {
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(a.out.display().to_string(), e))?;
    let cfg = load_variant(&a.config)?;
    let ds = load_dataset(&a.data, &cfg)?;
    let speeds = load_speeds(&a.data.join("speeds.csv"), &ds.sensors)?;
    let (train, val, _) = temporal_split(&speeds, SplitSpec::default())?;

    let use_sga = a.encoder.is_some() && !a.no_sga;
    let embeddings: Option<Tensor2> = match (&a.encoder, use_sga) {
        (Some(prefix), true) => {
            let encoder = load_encoder(&cfg, prefix)?;
            Some(embed_all(
                &encoder,
                &ds.quotient,
                &ds.road,
                &ds.index,
                &ds.spec,
                &ds.bounds,
                a.seed,
            )?)
        }
        _ => None,
    };

    let fc_cfg = tqg::forecaster::ForecastConfig {
        s_in: a.s_in,
        horizon: a.horizon,
        d_h: a.d_h,
        use_sga,
        epochs: a.epochs,
        ..cfg.forecast_config()
    };
    let (model, history) = train_forecaster(
        &train,
        &val,
        &ds.quotient,
        embeddings.as_ref(),
        fc_cfg,
        a.seed,
    )?;

    let arm = if use_sga { cfg.name.as_str() } else { "gwn" };
    let prefix = a.out.join(format!("forecaster_{arm}_{}", a.seed));
    save_checkpoint(&model.params, &prefix)?;
    write_meta(&model, &prefix)?;
    write_loss_csv(
        &history,
        &a.out.join(format!("forecaster_loss_{arm}_{}.csv", a.seed)),
    )?;
    println!("saved {}", prefix.display());
    Ok(())
}

fn write_meta(model: &Forecaster, prefix: &PathBuf) -> Result<(), Error> {
    let meta = ModelMeta {
        n_sensors: model.n_sensors,
        d_emb: model.d_emb,
        use_sga: model.cfg.use_sga,
        mean: model.norm.mean,
        std: model.norm.std,
        s_in: model.cfg.s_in,
        horizon: model.cfg.horizon,
        d_h: model.cfg.d_h,
    };
    let path = meta_path(prefix);
    std::fs::write(&path, serde_json::to_string_pretty(&meta).expect("meta serializes"))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

fn meta_path(prefix: &PathBuf) -> PathBuf {
    let mut s = prefix.as_os_str().to_os_string();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn cmd_eval(a: EvalArgs) -> Result<(), Error> {
    let cfg = load_variant(&a.config)?;
    let ds = load_dataset(&a.data, &cfg)?;
    let speeds = load_speeds(&a.data.join("speeds.csv"), &ds.sensors)?;
    let (_, _, test) = temporal_split(&speeds, SplitSpec::default())?;

    let meta_file = meta_path(&a.model);
    let meta: ModelMeta = serde_json::from_str(
        &std::fs::read_to_string(&meta_file)
            .map_err(|e| Error::io(meta_file.display().to_string(), e))?,
    )
    .map_err(|e| Error::BadConfig(format!("{}: {e}", meta_file.display())))?;

    let fc_cfg = tqg::forecaster::ForecastConfig {
        s_in: meta.s_in,
        horizon: meta.horizon,
        d_h: meta.d_h,
        use_sga: meta.use_sga,
        ..cfg.forecast_config()
    };
    let mut model = Forecaster::init(fc_cfg, meta.n_sensors, meta.d_emb, 0);
    model.norm = Normalization {
        mean: meta.mean,
        std: meta.std,
    };
    let params = load_checkpoint(&a.model)?;
    for name in params.names().map(String::from).collect::<Vec<_>>() {
        model.params.set(&name, params.get(&name).clone());
    }

    let embeddings: Option<Tensor2> = match (&a.encoder, meta.use_sga) {
        (Some(prefix), true) => {
            let encoder = load_encoder(&cfg, prefix)?;
            Some(embed_all(
                &encoder,
                &ds.quotient,
                &ds.road,
                &ds.index,
                &ds.spec,
                &ds.bounds,
                0,
            )?)
        }
        (None, true) => {
            return Err(Error::BadConfig(
                "model was trained with SGA; pass --encoder".into(),
            ))
        }
        _ => None,
    };

    let result = evaluate(&model, &test, &ds.quotient, embeddings.as_ref())?;
    let arm = if meta.use_sga { cfg.name.clone() } else { "gwn".into() };
    let mut rows = vec![MetricsRow {
        variant: arm.clone(),
        seed: 0,
        horizon_step: 0,
        mae: result.all_steps,
    }];
    for (k, &mae) in result.per_step.iter().enumerate() {
        rows.push(MetricsRow {
            variant: arm.clone(),
            seed: 0,
            horizon_step: k + 1,
            mae,
        });
    }
    write_metrics_csv(&rows, &a.out)?;
    println!(
        "all-steps MAE {:.4}; per-horizon written to {}",
        result.all_steps,
        a.out.display()
    );
    Ok(())
}

fn cmd_run_variant(a: RunVariantArgs) -> Result<(), Error> {
    let cfg = load_variant(&a.config)?;
    let opts = RunOptions {
        seeds: (0..a.seeds as u64).collect(),
        out_dir: a.out.clone(),
        city_seed: a.city_seed,
        n_sensors: a.sensors,
        n_road_nodes: a.road_nodes.unwrap_or(4 * a.sensors),
        days: a.days,
        data_dir: a.data.clone(),
        pre_epochs: a.pre_epochs,
        train_epochs: a.epochs,
        threads: a.threads,
        ..RunOptions::default()
    };
    let rows = run_variant(&cfg, &opts)?;
    println!(
        "wrote {} metric rows and report to {}",
        rows.len(),
        a.out.display()
    );
    Ok(())
}
