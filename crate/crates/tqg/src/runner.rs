//! End-to-end orchestration: synthetic city (or on-disk dataset) → quotient
//! graph → scaler → per-seed pre-training, two forecaster arms (with and
//! without the encoder) → metrics CSV → report. Seeds run in a worker pool;
//! every artifact is deterministic in (config, seeds).

use std::path::PathBuf;

use crate::encoder::{embed_all, node_split, pretrain, write_loss_csv, EncoderConfig};
use crate::features::{
    extract_raw_features_indexed, fit_scaler, AmenityIndex, FeatureSpec, ScalerBounds,
};
use crate::forecaster::{evaluate, train_forecaster, ForecastConfig};
use crate::nn::save_checkpoint;
use crate::osm::RoadGraph;
use crate::quotient::{build_quotient, match_sensors, prune_clusters, QuotientGraph};
use crate::report::{report, write_metrics_csv, MetricsRow};
use crate::sensors::{temporal_split, SensorSet, SpeedSeries, SplitSpec};
use crate::synth::generate_city;
use crate::variants::VariantConfig;
use crate::{Error, Result};

/// Name of the no-encoder arm in metrics files.
pub const BASELINE_ARM: &str = "gwn";

/// Desk-scale run options; the paper-scale protocol is 10 seeds, 50
/// pre-epochs and 100 training epochs.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// synthetic-city parameters, used when no dataset directory is given
    pub city_seed: u64,
    pub n_sensors: usize,
    pub n_road_nodes: usize,
    pub days: usize,
    /// dataset directory (road_nodes/road_edges/sensors/amenities/speeds CSVs)
    pub data_dir: Option<PathBuf>,
    pub pre_epochs: usize,
    pub train_epochs: usize,
    pub s_in: usize,
    pub horizon: usize,
    pub d_h: usize,
    pub encoder_batch: usize,
    pub window_batch: usize,
    pub threads: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            seeds: vec![0, 1, 2],
            out_dir: PathBuf::from("runs/out"),
            city_seed: 1,
            n_sensors: 60,
            n_road_nodes: 240,
            days: 1,
            data_dir: None,
            pre_epochs: 15,
            train_epochs: 15,
            s_in: 12,
            horizon: 12,
            d_h: 16,
            encoder_batch: 32,
            window_batch: 8,
            threads: 4,
        }
    }
}

/// Everything a run needs once, independent of seed.
pub struct Prepared {
    pub road: RoadGraph,
    pub sensors: SensorSet,
    pub quotient: QuotientGraph,
    pub spec: FeatureSpec,
    pub index: AmenityIndex,
    pub bounds: ScalerBounds,
    pub train: SpeedSeries,
    pub val: SpeedSeries,
    pub test: SpeedSeries,
}

/// Load (or synthesize) the dataset, build the pruned quotient graph and fit
/// the feature scaler over the full road-node population.
pub fn prepare(cfg: &VariantConfig, opts: &RunOptions) -> Result<Prepared> {
    let (road, sensors, amenities, speeds) = match &opts.data_dir {
        Some(dir) => {
            let road = crate::osm::load_road_csv(
                &dir.join("road_nodes.csv"),
                &dir.join("road_edges.csv"),
            )?;
            let sensors = crate::sensors::load_sensors(&dir.join("sensors.csv"))?;
            let amenities = crate::synth::load_amenities(&dir.join("amenities.csv"))?;
            let speeds = crate::sensors::load_speeds(&dir.join("speeds.csv"), &sensors)?;
            (road, sensors, amenities, speeds)
        }
        None => {
            let city = generate_city(opts.city_seed, opts.n_sensors, opts.n_road_nodes, opts.days)?;
            (city.road, city.sensors, city.amenities, city.speeds)
        }
    };

    let clusters = match_sensors(&road, &sensors)?;
    let q = build_quotient(&road, &clusters);
    let quotient = prune_clusters(&q, &road, &sensors, cfg.epsilon);

    let spec = cfg.feature_spec()?;
    let index = AmenityIndex::build(&amenities, spec.amenity_radius);
    let all_ids: Vec<i64> = road.nodes().iter().map(|n| n.id).collect();
    let raw = extract_raw_features_indexed(&road, &index, &all_ids, &spec)?;
    let bounds = fit_scaler(&raw);

    let (train, val, test) = temporal_split(&speeds, SplitSpec::default())?;
    Ok(Prepared {
        road,
        sensors,
        quotient,
        spec,
        index,
        bounds,
        train,
        val,
        test,
    })
}

fn encoder_config(cfg: &VariantConfig, opts: &RunOptions) -> EncoderConfig {
    EncoderConfig {
        batch_b: opts.encoder_batch,
        pre_epochs: opts.pre_epochs,
        ..cfg.encoder_config()
    }
}

fn forecast_config(cfg: &VariantConfig, opts: &RunOptions, use_sga: bool) -> ForecastConfig {
    ForecastConfig {
        s_in: opts.s_in,
        horizon: opts.horizon,
        d_h: opts.d_h,
        use_sga,
        epochs: opts.train_epochs,
        batch_size: opts.window_batch,
        ..cfg.forecast_config()
    }
}

/// Artifacts of one (variant, seed) execution.
struct SeedOutcome {
    seed: u64,
    rows: Vec<MetricsRow>,
}

fn run_seed(
    cfg: &VariantConfig,
    opts: &RunOptions,
    prep: &Prepared,
    seed: u64,
) -> Result<SeedOutcome> {
    let split = node_split(prep.quotient.n(), seed);
    let enc_cfg = encoder_config(cfg, opts);
    let (encoder, enc_history) = pretrain(
        &prep.quotient,
        &prep.road,
        &prep.index,
        &prep.spec,
        &prep.bounds,
        enc_cfg,
        &split,
        seed,
    )?;
    write_loss_csv(
        &enc_history,
        &opts.out_dir.join(format!("encoder_loss_{seed}.csv")),
    )?;
    save_checkpoint(
        &encoder.params,
        &opts.out_dir.join(format!("encoder_{seed}")),
    )?;

    let embeddings = embed_all(
        &encoder,
        &prep.quotient,
        &prep.road,
        &prep.index,
        &prep.spec,
        &prep.bounds,
        seed,
    )?;

    let mut rows = Vec::new();
    for (arm, use_sga) in [(cfg.name.as_str(), true), (BASELINE_ARM, false)] {
        let emb = use_sga.then_some(&embeddings);
        let fc_cfg = forecast_config(cfg, opts, use_sga);
        let (model, history) =
            train_forecaster(&prep.train, &prep.val, &prep.quotient, emb, fc_cfg, seed)?;
        write_loss_csv(
            &history,
            &opts
                .out_dir
                .join(format!("forecaster_loss_{arm}_{seed}.csv")),
        )?;
        save_checkpoint(
            &model.params,
            &opts.out_dir.join(format!("forecaster_{arm}_{seed}")),
        )?;
        let eval = evaluate(&model, &prep.test, &prep.quotient, emb)?;
        rows.push(MetricsRow {
            variant: arm.to_string(),
            seed,
            horizon_step: 0,
            mae: eval.all_steps,
        });
        for (k, &mae) in eval.per_step.iter().enumerate() {
            rows.push(MetricsRow {
                variant: arm.to_string(),
                seed,
                horizon_step: k + 1,
                mae,
            });
        }
    }
    Ok(SeedOutcome { seed, rows })
}

/// Execute the full two-arm protocol for every seed, write all artifacts
/// under `opts.out_dir` and produce the report. Returns the metrics rows.
pub fn run_variant(cfg: &VariantConfig, opts: &RunOptions) -> Result<Vec<MetricsRow>> {
    std::fs::create_dir_all(&opts.out_dir)
        .map_err(|e| Error::io(opts.out_dir.display().to_string(), e))?;
    let prep = prepare(cfg, opts)?;

    let workers = opts.threads.max(1).min(opts.seeds.len().max(1));
    let mut outcomes: Vec<SeedOutcome> = Vec::new();
    let chunks: Vec<Vec<u64>> = opts
        .seeds
        .chunks(opts.seeds.len().div_ceil(workers).max(1))
        .map(|c| c.to_vec())
        .collect();
    let results: Vec<Result<Vec<SeedOutcome>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .iter()
            .map(|chunk| {
                let prep = &prep;
                scope.spawn(move || {
                    chunk
                        .iter()
                        .map(|&seed| run_seed(cfg, opts, prep, seed))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    for r in results {
        outcomes.extend(r?);
    }
    outcomes.sort_by_key(|o| o.seed);

    let rows: Vec<MetricsRow> = outcomes.into_iter().flat_map(|o| o.rows).collect();
    write_metrics_csv(&rows, &opts.out_dir.join(crate::report::METRICS_FILE))?;
    report(&opts.out_dir)?;
    Ok(rows)
}
